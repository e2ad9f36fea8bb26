//! Noise schedules, forward diffusion, DDPM ancestral sampling, VP-SDE
//! Euler-Maruyama simulation, the two training losses, and the purification
//! operator.
//!
//! Purification runs as a chain of [`ChainStep`]s so the attack side can
//! replay and backpropagate through it segment by segment. All noise comes
//! from labelled counter streams; a [`Trajectory`] therefore captures enough
//! state to reproduce every step bitwise.

use std::sync::Arc;

use crate::autodiff::{NodeRef, Tape};
use crate::chainckpt::{forward_record, forward_record_with_states, ChainRecord, ChainStep};
use crate::error::{CoreError, Result};
use crate::models::{MlpOnTape, MlpParams};
use crate::rng::{RngState, StreamRng};
use crate::tensor::Tensor;

/// The beta/alpha/alpha-bar/sigma tables shared by both samplers.
///
/// Tables are 1-indexed by diffusion step `t in 1..=T`; `alpha_bar(0) = 1`
/// by convention, which forces `sigma(1) = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    sigmas: Vec<f64>,
}

impl NoiseSchedule {
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(CoreError::Config("schedule needs at least one step".into()));
        }
        if betas.iter().any(|&b| !(0.0 < b && b < 1.0)) {
            return Err(CoreError::Config("every beta must lie in (0, 1)".into()));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(betas.len() + 1);
        alpha_bars.push(1.0);
        for (t, &a) in alphas.iter().enumerate() {
            alpha_bars.push(alpha_bars[t] * a);
        }
        let sigmas: Vec<f64> = (1..=betas.len())
            .map(|t| (betas[t - 1] * (1.0 - alpha_bars[t - 1]) / (1.0 - alpha_bars[t])).sqrt())
            .collect();
        Ok(NoiseSchedule {
            betas,
            alphas,
            alpha_bars,
            sigmas,
        })
    }

    /// Betas linearly interpolated from `beta_min` to `beta_max` inclusive
    /// over `t_max` steps (`t_max = 1` degenerates to `[beta_min]`).
    pub fn linear(t_max: usize, beta_min: f64, beta_max: f64) -> Result<Self> {
        if t_max < 1 {
            return Err(CoreError::Config("schedule length must be at least 1".into()));
        }
        if !(0.0 < beta_min && beta_min <= beta_max && beta_max < 1.0) {
            return Err(CoreError::Config(format!(
                "need 0 < beta_min <= beta_max < 1, got [{beta_min}, {beta_max}]"
            )));
        }
        let betas = if t_max == 1 {
            vec![beta_min]
        } else {
            (0..t_max)
                .map(|i| beta_min + (beta_max - beta_min) * i as f64 / (t_max - 1) as f64)
                .collect()
        };
        NoiseSchedule::from_betas(betas)
    }

    pub fn t_max(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// `alpha_bar(t)` for `t in 0..=T`, with `alpha_bar(0) = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigmas[t - 1]
    }

    fn check_t(&self, t: usize, op: &str) -> Result<()> {
        if t >= 1 && t <= self.t_max() {
            Ok(())
        } else {
            Err(CoreError::domain(
                op,
                format!("step {t} outside 1..={}", self.t_max()),
            ))
        }
    }

    /// Continuous noise rate at `t in [0, 1]`: the discrete table scaled by
    /// `T`, linearly interpolated between grid points `i/T` and clamped at
    /// the ends. On the grid, `beta_rate(i/T) = T * beta_i`.
    pub fn beta_rate(&self, t: f64) -> f64 {
        let t_max = self.t_max() as f64;
        let u = (t * t_max).clamp(1.0, t_max);
        let lo = u.floor() as usize;
        let hi = u.ceil() as usize;
        let frac = u - lo as f64;
        t_max * (self.beta(lo) * (1.0 - frac) + self.beta(hi.max(lo)) * frac)
    }

    /// `alpha_bar` at a continuous position `u in [0, T]`, linearly
    /// interpolated between table entries.
    pub fn alpha_bar_cont(&self, u: f64) -> f64 {
        let u = u.clamp(0.0, self.t_max() as f64);
        let lo = u.floor() as usize;
        let hi = u.ceil() as usize;
        let frac = u - lo as f64;
        self.alpha_bar(lo) * (1.0 - frac) + self.alpha_bar(hi) * frac
    }
}

/// Which sampler realizes the purification chain.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PurifyKind {
    Ddpm,
    Vpsde,
}

/// Purification operator configuration: how far to diffuse and with which
/// sampler.
#[derive(Clone)]
pub struct PurifierConfig {
    pub kind: PurifyKind,
    pub t_star: usize,
    pub schedule: Arc<NoiseSchedule>,
    pub eot_samples: usize,
}

impl PurifierConfig {
    pub fn new(kind: PurifyKind, t_star: usize, schedule: Arc<NoiseSchedule>) -> Result<Self> {
        if t_star > schedule.t_max() {
            return Err(CoreError::Config(format!(
                "purification length {t_star} exceeds schedule length {}",
                schedule.t_max()
            )));
        }
        Ok(PurifierConfig {
            kind,
            t_star,
            schedule,
            eot_samples: 1,
        })
    }
}

/// `sqrt(abar_t) x0 + sqrt(1 - abar_t) eps`: the marginal jump to step `t`.
pub fn diffuse_closed_form(
    x0: &Tensor,
    t: usize,
    eps: &Tensor,
    s: &NoiseSchedule,
) -> Result<Tensor> {
    s.check_t(t, "diffuse_closed_form")?;
    let ab = s.alpha_bar(t);
    x0.scale(ab.sqrt()).add_scaled(eps, (1.0 - ab).sqrt())
}

fn record_diffuse_step(
    tape: &mut Tape,
    x: NodeRef,
    t: usize,
    s: &NoiseSchedule,
    eps: &Tensor,
) -> Result<NodeRef> {
    let scaled = tape.scale(x, s.alpha(t).sqrt())?;
    let noise = tape.constant(eps.scale(s.beta(t).sqrt()));
    tape.add(scaled, noise)
}

fn record_ddpm_reverse(
    tape: &mut Tape,
    handle: &MlpOnTape,
    x: NodeRef,
    t: usize,
    s: &NoiseSchedule,
    z: &Tensor,
) -> Result<NodeRef> {
    let eps = handle.eps_theta(tape, x, t as f64)?;
    let coef = (1.0 - s.alpha(t)) / (1.0 - s.alpha_bar(t)).sqrt();
    let scaled_eps = tape.scale(eps, coef)?;
    let centered = tape.sub(x, scaled_eps)?;
    let mean = tape.scale(centered, 1.0 / s.alpha(t).sqrt())?;
    let sigma = s.sigma(t);
    if sigma == 0.0 {
        Ok(mean)
    } else {
        let noise = tape.constant(z.scale(sigma));
        tape.add(mean, noise)
    }
}

/// One ancestral sampling step `x_{t-1} = (x_t - (1-a_t)/sqrt(1-abar_t)
/// eps(x_t,t))/sqrt(a_t) + sigma_t z`. At `t = 1`, `sigma_1 = 0` and no
/// noise is added regardless of `z`.
pub fn ddpm_reverse_step(
    x_t: &Tensor,
    t: usize,
    p: &MlpParams,
    z: &Tensor,
    s: &NoiseSchedule,
) -> Result<Tensor> {
    s.check_t(t, "ddpm_reverse_step")?;
    let mut tape = Tape::new();
    let handle = p.place_on(&mut tape, false);
    let xr = tape.shared_constant(x_t);
    let out = record_ddpm_reverse(&mut tape, &handle, xr, t, s, z)?;
    Ok(tape.value(out).clone())
}

fn record_sde_forward(
    tape: &mut Tape,
    x: NodeRef,
    t: f64,
    dt: f64,
    s: &NoiseSchedule,
    dw: &Tensor,
) -> Result<NodeRef> {
    let rate = s.beta_rate(t);
    let drift = tape.scale(x, -0.5 * rate * dt)?;
    let out = tape.add(x, drift)?;
    let noise = tape.constant(dw.scale(rate.sqrt()));
    tape.add(out, noise)
}

/// Euler-Maruyama forward step `x + (-1/2 beta(t) x) dt + sqrt(beta(t)) dw`,
/// with `dw` drawn as `sqrt(dt) * standard normal`.
pub fn sde_forward_step(
    x: &Tensor,
    t: f64,
    dt: f64,
    s: &NoiseSchedule,
    dw: &Tensor,
) -> Result<Tensor> {
    if dt <= 0.0 {
        return Err(CoreError::Config("sde_forward_step requires dt > 0".into()));
    }
    let mut tape = Tape::new();
    let xr = tape.shared_constant(x);
    let out = record_sde_forward(&mut tape, xr, t, dt, s, dw)?;
    Ok(tape.value(out).clone())
}

fn record_sde_reverse(
    tape: &mut Tape,
    handle: &MlpOnTape,
    x: NodeRef,
    t: f64,
    dt: f64,
    s: &NoiseSchedule,
    dw: &Tensor,
) -> Result<NodeRef> {
    let rate = s.beta_rate(t);
    let u = t * s.t_max() as f64;
    let abar = s.alpha_bar_cont(u);
    let eps = handle.eps_theta(tape, x, u)?;
    // [-1/2 beta x - beta s_theta](-dt) with s_theta = -eps/sqrt(1-abar).
    let xdrift = tape.scale(x, 0.5 * rate * dt)?;
    let sdrift = tape.scale(eps, -rate * dt / (1.0 - abar).sqrt())?;
    let out = tape.add(x, xdrift)?;
    let out = tape.add(out, sdrift)?;
    let noise = tape.constant(dw.scale(rate.sqrt()));
    tape.add(out, noise)
}

/// Reverse-time Euler-Maruyama step, integrated backward from `t` with the
/// score obtained by rescaling the noise predictor.
pub fn sde_reverse_step(
    x: &Tensor,
    t: f64,
    dt: f64,
    p: &MlpParams,
    s: &NoiseSchedule,
    dw: &Tensor,
) -> Result<Tensor> {
    if dt <= 0.0 {
        return Err(CoreError::Config("sde_reverse_step requires dt > 0".into()));
    }
    let mut tape = Tape::new();
    let handle = p.place_on(&mut tape, false);
    let xr = tape.shared_constant(x);
    let out = record_sde_reverse(&mut tape, &handle, xr, t, dt, s, dw)?;
    Ok(tape.value(out).clone())
}

/// Per-sample draws consumed by the training losses: `(t, eps)`.
pub type LossDraw = (usize, Tensor);

/// Draws one `(t, eps)` pair per batch element; `t` uniform on `{2..T}`
/// (step 1 is excluded because `sigma_1 = 0` makes the DDPM weight
/// singular; both losses share the draw layout so they can be compared on
/// identical noise).
pub fn sample_loss_draws(
    batch_len: usize,
    dim: usize,
    s: &NoiseSchedule,
    rng: &mut StreamRng,
) -> Result<Vec<LossDraw>> {
    if s.t_max() < 2 {
        return Err(CoreError::Config(
            "training losses need a schedule of length >= 2".into(),
        ));
    }
    Ok((0..batch_len)
        .map(|_| {
            let t = rng.int_range(2, s.t_max());
            let eps = Tensor::vector(rng.fill_normal(dim));
            (t, eps)
        })
        .collect())
}

/// Records the density-gradient training objective: the Monte-Carlo mean of
/// `w_t |eps - eps_theta(sqrt(abar) x0 + sqrt(1-abar) eps, t)|^2` with
/// `w_t = beta_t^2 / (2 sigma_t^2 alpha_t (1-abar_t))`.
pub fn ddpm_loss_record(
    tape: &mut Tape,
    handle: &MlpOnTape,
    batch: &[Tensor],
    s: &NoiseSchedule,
    draws: &[LossDraw],
) -> Result<NodeRef> {
    if batch.is_empty() {
        return Err(CoreError::Config("ddpm_loss needs a nonempty batch".into()));
    }
    let mut total: Option<NodeRef> = None;
    for (x0, (t, eps)) in batch.iter().zip(draws.iter()) {
        let t = *t;
        let w = s.beta(t).powi(2)
            / (2.0 * s.sigma(t).powi(2) * s.alpha(t) * (1.0 - s.alpha_bar(t)));
        let x_t = diffuse_closed_form(x0, t, eps, s)?;
        let xr = tape.constant(x_t);
        let pred = handle.eps_theta(tape, xr, t as f64)?;
        let target = tape.constant(eps.clone());
        let diff = tape.sub(target, pred)?;
        let sq = tape.square(diff)?;
        let ss = tape.sum(sq)?;
        let term = tape.scale(ss, w)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
    }
    tape.scale(total.expect("nonempty batch"), 1.0 / batch.len() as f64)
}

/// Density-gradient loss on fresh draws from `rng`.
pub fn ddpm_loss(
    p: &MlpParams,
    batch: &[Tensor],
    s: &NoiseSchedule,
    rng: &mut StreamRng,
) -> Result<f64> {
    let draws = sample_loss_draws(batch.len(), p.data_dim(), s, rng)?;
    ddpm_loss_with_draws(p, batch, s, &draws)
}

/// Density-gradient loss on explicit draws (deterministic replay seam).
pub fn ddpm_loss_with_draws(
    p: &MlpParams,
    batch: &[Tensor],
    s: &NoiseSchedule,
    draws: &[LossDraw],
) -> Result<f64> {
    let mut tape = Tape::new();
    let handle = p.place_on(&mut tape, false);
    let out = ddpm_loss_record(&mut tape, &handle, batch, s, draws)?;
    tape.value(out).as_scalar()
}

/// Records the score-matching objective: the Monte-Carlo mean of
/// `lambda(t) |s_theta(x_t, t) - grad log p(x_t|x0)|^2` with the Gaussian
/// transition target `-(x_t - sqrt(abar) x0)/(1-abar)` and
/// `lambda(t) = 1 - abar_t`. The score is the rescaled noise predictor
/// `s_theta = -eps_theta / sqrt(1-abar)`.
pub fn score_matching_loss_record(
    tape: &mut Tape,
    handle: &MlpOnTape,
    batch: &[Tensor],
    s: &NoiseSchedule,
    draws: &[LossDraw],
) -> Result<NodeRef> {
    if batch.is_empty() {
        return Err(CoreError::Config(
            "score_matching_loss needs a nonempty batch".into(),
        ));
    }
    let mut total: Option<NodeRef> = None;
    for (x0, (t, eps)) in batch.iter().zip(draws.iter()) {
        let t = *t;
        let ab = s.alpha_bar(t);
        let lambda = 1.0 - ab;
        let x_t = diffuse_closed_form(x0, t, eps, s)?;
        let target = x_t.sub(&x0.scale(ab.sqrt()))?.scale(-1.0 / (1.0 - ab));
        let xr = tape.constant(x_t);
        let pred = handle.eps_theta(tape, xr, t as f64)?;
        let score = tape.scale(pred, -1.0 / (1.0 - ab).sqrt())?;
        let tgt = tape.constant(target);
        let diff = tape.sub(score, tgt)?;
        let sq = tape.square(diff)?;
        let ss = tape.sum(sq)?;
        let term = tape.scale(ss, lambda)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
    }
    tape.scale(total.expect("nonempty batch"), 1.0 / batch.len() as f64)
}

/// Score-matching loss on fresh draws from `rng`.
pub fn score_matching_loss(
    p: &MlpParams,
    batch: &[Tensor],
    s: &NoiseSchedule,
    rng: &mut StreamRng,
) -> Result<f64> {
    let draws = sample_loss_draws(batch.len(), p.data_dim(), s, rng)?;
    score_matching_loss_with_draws(p, batch, s, &draws)
}

pub fn score_matching_loss_with_draws(
    p: &MlpParams,
    batch: &[Tensor],
    s: &NoiseSchedule,
    draws: &[LossDraw],
) -> Result<f64> {
    let mut tape = Tape::new();
    let handle = p.place_on(&mut tape, false);
    let out = score_matching_loss_record(&mut tape, &handle, batch, s, draws)?;
    tape.value(out).as_scalar()
}

// ---------------------------------------------------------------------------
// Purification chain steps
// ---------------------------------------------------------------------------

/// DDPM forward kernel `x_t = sqrt(a_t) x_{t-1} + sqrt(b_t) eps_t`.
pub struct DiffuseStep {
    pub t: usize,
    pub schedule: Arc<NoiseSchedule>,
}

impl ChainStep for DiffuseStep {
    fn label(&self) -> String {
        format!("purify/fwd/step={}", self.t)
    }

    fn record(&self, tape: &mut Tape, x: NodeRef, rng: &mut StreamRng) -> Result<NodeRef> {
        let dim = tape.value(x).len();
        let eps = Tensor::vector(rng.fill_normal(dim));
        record_diffuse_step(tape, x, self.t, &self.schedule, &eps)
    }
}

/// DDPM ancestral reverse step at index `t`.
pub struct DdpmReverseStep {
    pub t: usize,
    pub schedule: Arc<NoiseSchedule>,
    pub params: Arc<MlpParams>,
}

impl ChainStep for DdpmReverseStep {
    fn label(&self) -> String {
        format!("purify/rev/step={}", self.t)
    }

    fn record(&self, tape: &mut Tape, x: NodeRef, rng: &mut StreamRng) -> Result<NodeRef> {
        let dim = tape.value(x).len();
        // z is drawn even at t = 1 (where it is unused) so every step
        // consumes the same stream layout.
        let z = Tensor::vector(rng.fill_normal(dim));
        let handle = self.params.place_on(tape, false);
        record_ddpm_reverse(tape, &handle, x, self.t, &self.schedule, &z)
    }
}

/// VP-SDE Euler-Maruyama forward step over `[(i-1)/T, i/T]`, evaluated at
/// the left endpoint.
pub struct SdeForwardStep {
    pub i: usize,
    pub schedule: Arc<NoiseSchedule>,
}

impl ChainStep for SdeForwardStep {
    fn label(&self) -> String {
        format!("purify/fwd/step={}", self.i)
    }

    fn record(&self, tape: &mut Tape, x: NodeRef, rng: &mut StreamRng) -> Result<NodeRef> {
        let dim = tape.value(x).len();
        let t_max = self.schedule.t_max() as f64;
        let dt = 1.0 / t_max;
        let dw = Tensor::vector(rng.fill_normal(dim)).scale(dt.sqrt());
        record_sde_forward(tape, x, (self.i - 1) as f64 / t_max, dt, &self.schedule, &dw)
    }
}

/// VP-SDE reverse step from `i/T` down to `(i-1)/T`, evaluated at `i/T`.
pub struct SdeReverseStep {
    pub i: usize,
    pub schedule: Arc<NoiseSchedule>,
    pub params: Arc<MlpParams>,
}

impl ChainStep for SdeReverseStep {
    fn label(&self) -> String {
        format!("purify/rev/step={}", self.i)
    }

    fn record(&self, tape: &mut Tape, x: NodeRef, rng: &mut StreamRng) -> Result<NodeRef> {
        let dim = tape.value(x).len();
        let t_max = self.schedule.t_max() as f64;
        let dt = 1.0 / t_max;
        let dw = Tensor::vector(rng.fill_normal(dim)).scale(dt.sqrt());
        let handle = self.params.place_on(tape, false);
        record_sde_reverse(
            tape,
            &handle,
            x,
            self.i as f64 / t_max,
            dt,
            &self.schedule,
            &dw,
        )
    }
}

/// Builds the full purification chain: `t_star` diffusion steps followed by
/// `t_star` reverse steps.
pub fn build_purify_steps(cfg: &PurifierConfig, p: &Arc<MlpParams>) -> Vec<Box<dyn ChainStep>> {
    let mut steps: Vec<Box<dyn ChainStep>> = Vec::with_capacity(2 * cfg.t_star);
    match cfg.kind {
        PurifyKind::Ddpm => {
            for t in 1..=cfg.t_star {
                steps.push(Box::new(DiffuseStep {
                    t,
                    schedule: Arc::clone(&cfg.schedule),
                }));
            }
            for t in (1..=cfg.t_star).rev() {
                steps.push(Box::new(DdpmReverseStep {
                    t,
                    schedule: Arc::clone(&cfg.schedule),
                    params: Arc::clone(p),
                }));
            }
        }
        PurifyKind::Vpsde => {
            for i in 1..=cfg.t_star {
                steps.push(Box::new(SdeForwardStep {
                    i,
                    schedule: Arc::clone(&cfg.schedule),
                }));
            }
            for i in (1..=cfg.t_star).rev() {
                steps.push(Box::new(SdeReverseStep {
                    i,
                    schedule: Arc::clone(&cfg.schedule),
                    params: Arc::clone(p),
                }));
            }
        }
    }
    steps
}

/// Stored forward samples `x_0..x_{T*}` and reverse samples `x'_{T*}..x'_0`
/// with the RNG state of every step. The forward endpoint and the reverse
/// start are the same sample (`x'_{T*} = x_{T*}`), so the underlying chain
/// has `2 T*` steps and `2 T* + 1` samples.
pub struct Trajectory {
    record: ChainRecord,
    t_star: usize,
}

impl Trajectory {
    pub fn t_star(&self) -> usize {
        self.t_star
    }

    pub fn record(&self) -> &ChainRecord {
        &self.record
    }

    /// `x_t` from the diffusion pass, `t in 0..=T*`.
    pub fn forward_sample(&self, t: usize) -> &Tensor {
        self.record.sample(t)
    }

    /// `x'_t` from the reverse pass, `t in 0..=T*` (`x'_{T*} = x_{T*}`).
    pub fn reverse_sample(&self, t: usize) -> &Tensor {
        self.record.sample(2 * self.t_star - t)
    }

    /// Chain-sample index of `x_t` (for gradient injection).
    pub fn forward_index(&self, t: usize) -> usize {
        t
    }

    /// Chain-sample index of `x'_t` (for gradient injection).
    pub fn reverse_index(&self, t: usize) -> usize {
        2 * self.t_star - t
    }

    /// The purified output `x'_0`.
    pub fn output(&self) -> &Tensor {
        self.record.output()
    }

    pub fn rng_states(&self) -> &[RngState] {
        self.record.states()
    }
}

/// Diffuses `x` for `t_star` steps and reverses back to `t = 0`. Noise comes
/// from streams derived from `rng`; the returned trajectory replays bitwise.
pub fn purify(
    x: &Tensor,
    cfg: &PurifierConfig,
    p: &Arc<MlpParams>,
    rng: &StreamRng,
) -> Result<(Tensor, Trajectory)> {
    if cfg.t_star == 0 {
        let traj = Trajectory {
            record: ChainRecord::trivial(x.clone()),
            t_star: 0,
        };
        return Ok((x.clone(), traj));
    }
    let record = forward_record(build_purify_steps(cfg, p), x, rng)?;
    let out = record.output().clone();
    Ok((
        out,
        Trajectory {
            record,
            t_star: cfg.t_star,
        },
    ))
}

/// As [`purify`] but replaying previously captured RNG states (frozen noise).
pub fn purify_with_states(
    x: &Tensor,
    cfg: &PurifierConfig,
    p: &Arc<MlpParams>,
    states: &[RngState],
) -> Result<(Tensor, Trajectory)> {
    if cfg.t_star == 0 {
        let traj = Trajectory {
            record: ChainRecord::trivial(x.clone()),
            t_star: 0,
        };
        return Ok((x.clone(), traj));
    }
    let record = forward_record_with_states(build_purify_steps(cfg, p), x, states.to_vec())?;
    let out = record.output().clone();
    Ok((
        out,
        Trajectory {
            record,
            t_star: cfg.t_star,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bits(t: &Tensor) -> Vec<u64> {
        t.data().iter().map(|v| v.to_bits()).collect()
    }

    #[test]
    fn linear_schedule_degenerate_and_hand_product() {
        let s = NoiseSchedule::linear(1, 0.1, 0.5).unwrap();
        assert_eq!(s.t_max(), 1);
        assert_eq!(s.beta(1), 0.1);

        let s = NoiseSchedule::linear(2, 0.1, 0.1).unwrap();
        assert!((s.alpha_bar(1) - 0.9).abs() < 1e-15);
        assert!((s.alpha_bar(2) - 0.81).abs() < 1e-15);
    }

    #[test]
    fn sigma_one_is_zero() {
        for t_max in [1, 2, 17, 50] {
            let s = NoiseSchedule::linear(t_max, 1e-3, 5e-2).unwrap();
            assert_eq!(s.sigma(1), 0.0);
        }
    }

    #[test]
    fn schedule_bounds_are_enforced() {
        assert!(NoiseSchedule::linear(0, 0.1, 0.2).is_err());
        assert!(NoiseSchedule::linear(5, 0.0, 0.2).is_err());
        assert!(NoiseSchedule::linear(5, 0.3, 0.2).is_err());
        assert!(NoiseSchedule::linear(5, 0.3, 1.0).is_err());
        assert!(NoiseSchedule::from_betas(vec![]).is_err());
    }

    #[test]
    fn schedule_identities_hold_tightly() {
        let mut rng = StreamRng::new(8, "sched");
        for _ in 0..20 {
            let t_max = rng.int_range(1, 64);
            let bmin = 1e-4 + rng.uniform() * 1e-2;
            let bmax = bmin + rng.uniform() * 0.05;
            let s = NoiseSchedule::linear(t_max, bmin, bmax).unwrap();
            assert_eq!(s.alpha_bar(0), 1.0);
            let mut prev = 1.0;
            for t in 1..=t_max {
                assert!((s.alpha(t) - (1.0 - s.beta(t))).abs() <= 1e-15);
                assert!((s.alpha_bar(t) - prev * s.alpha(t)).abs() <= 1e-15);
                assert!(s.alpha_bar(t) < prev, "alpha_bar must strictly decrease");
                let expect =
                    (s.beta(t) * (1.0 - s.alpha_bar(t - 1)) / (1.0 - s.alpha_bar(t))).sqrt();
                assert!((s.sigma(t) - expect).abs() <= 1e-15);
                prev = s.alpha_bar(t);
            }
        }
    }

    #[test]
    fn diffuse_closed_form_examples() {
        let s = NoiseSchedule::from_betas(vec![0.75]).unwrap(); // abar_1 = 0.25
        let x0 = Tensor::scalar(1.0);
        let out = diffuse_closed_form(&x0, 1, &Tensor::scalar(0.0), &s).unwrap();
        assert!((out.as_scalar().unwrap() - 0.5).abs() < 1e-15);
        let out = diffuse_closed_form(&x0, 1, &Tensor::scalar(0.5), &s).unwrap();
        assert!((out.as_scalar().unwrap() - 0.933_012_701_892_219_3).abs() < 1e-12);

        // Tiny beta: abar close to 1, output close to x0.
        let s = NoiseSchedule::from_betas(vec![1e-12]).unwrap();
        let out = diffuse_closed_form(&x0, 1, &Tensor::scalar(0.3), &s).unwrap();
        assert!((out.as_scalar().unwrap() - 1.0).abs() < 1e-5);

        assert!(diffuse_closed_form(&x0, 2, &Tensor::scalar(0.0), &s).is_err());
        assert!(diffuse_closed_form(&x0, 0, &Tensor::scalar(0.0), &s).is_err());
    }

    #[test]
    fn ddpm_reverse_step_examples() {
        let s = NoiseSchedule::from_betas(vec![0.1, 0.1]).unwrap();
        let p = MlpParams::zeros(1, &[4], 4).unwrap();

        // eps == 0, z == 0: x_{t-1} = x_t / sqrt(alpha_t).
        let out = ddpm_reverse_step(&Tensor::scalar(1.0), 2, &p, &Tensor::scalar(0.0), &s)
            .unwrap();
        let expect = 1.0 / 0.9f64.sqrt() + 0.0;
        assert!((out.as_scalar().unwrap() - expect).abs() < 1e-15);

        // t = 1: sigma is 0, so z is ignored.
        let out = ddpm_reverse_step(&Tensor::scalar(1.0), 1, &p, &Tensor::scalar(123.0), &s)
            .unwrap();
        assert!((out.as_scalar().unwrap() - 1.0 / 0.9f64.sqrt()).abs() < 1e-15);

        // Hand evaluation with z = 1 at t = 2.
        let out = ddpm_reverse_step(&Tensor::scalar(1.0), 2, &p, &Tensor::scalar(1.0), &s)
            .unwrap();
        let sigma2 = (0.1f64 * 0.1 / 0.19).sqrt();
        assert!((out.as_scalar().unwrap() - (1.0 / 0.9f64.sqrt() + sigma2)).abs() < 1e-12);
        assert!((out.as_scalar().unwrap() - 1.283_509).abs() < 1e-6);

        assert!(ddpm_reverse_step(&Tensor::scalar(1.0), 3, &p, &Tensor::scalar(0.0), &s).is_err());
    }

    #[test]
    fn ddpm_loss_zero_predictor_is_weighted_noise_power() {
        let s = NoiseSchedule::linear(10, 1e-3, 5e-2).unwrap();
        let p = MlpParams::zeros(2, &[4], 4).unwrap();
        let batch = vec![Tensor::vector(vec![0.5, 0.5]); 4];
        let draws: Vec<LossDraw> = (2..6)
            .map(|t| (t, Tensor::vector(vec![0.3, -0.4])))
            .collect();
        let loss = ddpm_loss_with_draws(&p, &batch, &s, &draws).unwrap();
        let expect: f64 = draws
            .iter()
            .map(|(t, eps)| {
                let w = s.beta(*t).powi(2)
                    / (2.0 * s.sigma(*t).powi(2) * s.alpha(*t) * (1.0 - s.alpha_bar(*t)));
                w * eps.sumsq()
            })
            .sum::<f64>()
            / 4.0;
        assert!(loss > 0.0);
        assert!((loss - expect).abs() < 1e-12 * expect.abs().max(1.0));
    }

    #[test]
    fn ddpm_loss_perfect_predictor_is_zero() {
        // With zero noise drawn and a zero predictor, prediction == noise.
        let s = NoiseSchedule::linear(10, 1e-3, 5e-2).unwrap();
        let p = MlpParams::zeros(2, &[4], 4).unwrap();
        let batch = vec![Tensor::vector(vec![0.2, 0.8]); 3];
        let draws: Vec<LossDraw> = vec![(3, Tensor::vector(vec![0.0, 0.0])); 3];
        let loss = ddpm_loss_with_draws(&p, &batch, &s, &draws).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn ddpm_loss_rejects_empty_batch() {
        let s = NoiseSchedule::linear(10, 1e-3, 5e-2).unwrap();
        let p = MlpParams::zeros(2, &[4], 4).unwrap();
        let mut rng = StreamRng::new(1, "loss");
        assert!(ddpm_loss(&p, &[], &s, &mut rng).is_err());
    }

    #[test]
    fn score_matching_equals_unweighted_ddpm_on_same_draws() {
        let s = NoiseSchedule::linear(12, 1e-3, 4e-2).unwrap();
        let mut rng = StreamRng::new(17, "params");
        let p = MlpParams::init(2, &[8, 8], 4, &mut rng).unwrap();
        let batch: Vec<Tensor> = (0..6)
            .map(|_| Tensor::vector(vec![rng.uniform(), rng.uniform()]))
            .collect();
        let mut drng = StreamRng::new(18, "draws");
        let draws = sample_loss_draws(batch.len(), 2, &s, &mut drng).unwrap();

        let sm = score_matching_loss_with_draws(&p, &batch, &s, &draws).unwrap();
        // Independent unweighted evaluation of |eps - eps_theta|^2.
        let unweighted: f64 = batch
            .iter()
            .zip(draws.iter())
            .map(|(x0, (t, eps))| {
                let x_t = diffuse_closed_form(x0, *t, eps, &s).unwrap();
                let pred = p.eps_theta(&x_t, *t as f64).unwrap();
                eps.sub(&pred).unwrap().sumsq()
            })
            .sum::<f64>()
            / batch.len() as f64;
        assert!(
            (sm - unweighted).abs() <= 1e-12 * unweighted.abs().max(1.0),
            "{sm} vs {unweighted}"
        );
        // Nonnegativity.
        assert!(sm >= 0.0);
    }

    #[test]
    fn score_oracle_reaches_zero() {
        let s = NoiseSchedule::linear(10, 1e-3, 5e-2).unwrap();
        let p = MlpParams::zeros(1, &[4], 4).unwrap();
        let batch = vec![Tensor::scalar(0.4); 2];
        let draws: Vec<LossDraw> = vec![(2, Tensor::scalar(0.0)); 2];
        assert_eq!(
            score_matching_loss_with_draws(&p, &batch, &s, &draws).unwrap(),
            0.0
        );
    }

    #[test]
    fn sde_forward_step_examples() {
        // Schedule with constant rate T*beta = 0.2.
        let s = NoiseSchedule::from_betas(vec![0.1, 0.1]).unwrap();
        let out = sde_forward_step(&Tensor::scalar(1.0), 0.5, 0.1, &s, &Tensor::scalar(0.0))
            .unwrap();
        assert!((out.as_scalar().unwrap() - 0.99).abs() < 1e-15);

        // Tiny rate: x unchanged when dw = 0.
        let s = NoiseSchedule::from_betas(vec![1e-15, 1e-15]).unwrap();
        let out = sde_forward_step(&Tensor::scalar(1.0), 0.5, 0.1, &s, &Tensor::scalar(0.0))
            .unwrap();
        assert!((out.as_scalar().unwrap() - 1.0).abs() < 1e-12);

        assert!(sde_forward_step(&Tensor::scalar(1.0), 0.5, 0.0, &s, &Tensor::scalar(0.0))
            .is_err());
    }

    #[test]
    fn sde_forward_variance_matches_recursion_oracle() {
        let s = Arc::new(NoiseSchedule::linear(20, 5e-3, 5e-2).unwrap());
        let t_max = s.t_max() as f64;
        let dt = 1.0 / t_max;
        let steps = 10usize;
        let x0 = 0.7;

        // Exact variance recursion for the Euler-Maruyama map.
        let mut var_exact = 0.0;
        for i in 1..=steps {
            let rate = s.beta_rate((i - 1) as f64 / t_max);
            let a = 1.0 - 0.5 * rate * dt;
            var_exact = a * a * var_exact + rate * dt;
        }

        let n_paths = 10_000;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        let root = StreamRng::new(77, "sde-mc");
        for path in 0..n_paths {
            let mut rng = root.derive(&format!("path={path}"));
            let mut x = Tensor::scalar(x0);
            for i in 1..=steps {
                let dw = Tensor::scalar(rng.normal() * dt.sqrt());
                x = sde_forward_step(&x, (i - 1) as f64 / t_max, dt, &s, &dw).unwrap();
            }
            let v = x.as_scalar().unwrap();
            sum += v;
            sumsq += v * v;
        }
        let mean = sum / n_paths as f64;
        let var = sumsq / n_paths as f64 - mean * mean;
        assert!(
            (var - var_exact).abs() / var_exact < 0.05,
            "mc {var} vs exact {var_exact}"
        );
        // Variance grows with time.
        assert!(var_exact > 0.0);
    }

    #[test]
    fn sde_reverse_step_drift_only_and_determinism() {
        let s = NoiseSchedule::from_betas(vec![0.1, 0.1]).unwrap();
        let p = MlpParams::zeros(1, &[4], 4).unwrap();
        // s_theta == 0 and dw == 0: time-reversed drift-only step.
        let out = sde_reverse_step(&Tensor::scalar(1.0), 1.0, 0.5, &p, &s, &Tensor::scalar(0.0))
            .unwrap();
        let rate = s.beta_rate(1.0);
        assert!((out.as_scalar().unwrap() - (1.0 + 0.5 * rate * 0.5)).abs() < 1e-15);

        let dw = Tensor::scalar(0.37);
        let a = sde_reverse_step(&Tensor::scalar(0.8), 0.5, 0.1, &p, &s, &dw).unwrap();
        let b = sde_reverse_step(&Tensor::scalar(0.8), 0.5, 0.1, &p, &s, &dw).unwrap();
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn sde_one_step_roundtrip_matches_moment_oracle() {
        // Data law N(0,1) with the exact one-step score wired into a linear
        // predictor: eps(x, t) = sqrt(beta_1) x realizes s(x) = -x at t=1.
        let beta = 0.04;
        let s = Arc::new(NoiseSchedule::from_betas(vec![beta]).unwrap());
        let mut p = MlpParams::zeros(1, &[], 2).unwrap();
        {
            // Single linear layer: out = W . concat(x, embed) + b.
            let w = Tensor::matrix(3, 1, vec![beta.sqrt(), 0.0, 0.0]).unwrap();
            p.weights[0] = w;
        }

        // One forward + one reverse step on X0 ~ N(0,1).
        let n_paths = 20_000;
        let root = StreamRng::new(5150, "roundtrip");
        let (mut sum, mut sumsq) = (0.0, 0.0);
        for path in 0..n_paths {
            let mut rng = root.derive(&format!("path={path}"));
            let x0 = rng.normal();
            let dw1 = Tensor::scalar(rng.normal());
            let dw2 = Tensor::scalar(rng.normal());
            let x1 = sde_forward_step(&Tensor::scalar(x0), 0.0, 1.0, &s, &dw1).unwrap();
            let x0p = sde_reverse_step(&x1, 1.0, 1.0, &p, &s, &dw2).unwrap();
            let v = x0p.as_scalar().unwrap();
            sum += v;
            sumsq += v * v;
        }
        let mean = sum / n_paths as f64;
        let var = sumsq / n_paths as f64 - mean * mean;

        // Exact moments of the composed linear maps.
        let a_f = 1.0 - 0.5 * beta; // forward contraction
        let var_mid = a_f * a_f + beta;
        let a_r = 1.0 - 0.5 * beta; // reverse: (1 + beta/2 - beta) to O(beta)
        let var_exact = a_r * a_r * var_mid + beta;
        let se_var = var_exact * (2.0 / (n_paths as f64 - 1.0)).sqrt();
        assert!(mean.abs() < 4.0 / (n_paths as f64).sqrt() * 1.5, "mean {mean}");
        assert!(
            (var - var_exact).abs() < 4.0 * se_var,
            "mc {var} vs exact {var_exact}"
        );
    }

    #[test]
    fn purify_identity_when_t_star_zero() {
        let s = Arc::new(NoiseSchedule::linear(10, 1e-3, 5e-2).unwrap());
        let cfg = PurifierConfig::new(PurifyKind::Ddpm, 0, s).unwrap();
        let p = Arc::new(MlpParams::zeros(2, &[4], 4).unwrap());
        let x = Tensor::vector(vec![0.3, 0.7]);
        let rng = StreamRng::new(1, "purify");
        let (out, traj) = purify(&x, &cfg, &p, &rng).unwrap();
        assert_eq!(out.data(), x.data());
        assert_eq!(traj.record().samples().len(), 1);
        assert_eq!(bits(traj.forward_sample(0)), bits(&x));
        assert_eq!(bits(traj.reverse_sample(0)), bits(&x));
    }

    #[test]
    fn purify_is_deterministic_per_seed_and_varies_across_seeds() {
        let s = Arc::new(NoiseSchedule::linear(10, 1e-3, 5e-2).unwrap());
        for kind in [PurifyKind::Ddpm, PurifyKind::Vpsde] {
            let cfg = PurifierConfig::new(kind, 4, Arc::clone(&s)).unwrap();
            let mut prng = StreamRng::new(2, "params");
            let p = Arc::new(MlpParams::init(2, &[8], 4, &mut prng).unwrap());
            let x = Tensor::vector(vec![0.4, 0.6]);

            let (a, traj_a) = purify(&x, &cfg, &p, &StreamRng::new(10, "draw")).unwrap();
            let (b, _) = purify(&x, &cfg, &p, &StreamRng::new(10, "draw")).unwrap();
            let (c, _) = purify(&x, &cfg, &p, &StreamRng::new(11, "draw")).unwrap();
            assert_eq!(bits(&a), bits(&b));
            assert_ne!(bits(&a), bits(&c));

            // Sample counts: T*+1 on each side sharing the junction.
            assert_eq!(traj_a.record().samples().len(), 2 * 4 + 1);
            assert_eq!(
                bits(traj_a.forward_sample(4)),
                bits(traj_a.reverse_sample(4))
            );

            // Replay from captured states is bitwise identical.
            let (r, _) = purify_with_states(&x, &cfg, &p, traj_a.rng_states()).unwrap();
            assert_eq!(bits(&a), bits(&r));
        }
    }

    #[test]
    fn purifier_config_validates_t_star() {
        let s = Arc::new(NoiseSchedule::linear(10, 1e-3, 5e-2).unwrap());
        assert!(PurifierConfig::new(PurifyKind::Ddpm, 11, s).is_err());
    }
}
