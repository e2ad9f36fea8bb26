//! Evasion attacks against the purification defense: the adaptive attack
//! with the deviated-reconstruction loss, plus PGD, BPDA, SPSA, joint, and
//! adjoint-gradient baselines, and the majority-vote robust-accuracy
//! evaluation.
//!
//! Gradients through the purifier are always computed with the segment-wise
//! chain backward, with the deviated-reconstruction terms injected directly
//! at their trajectory samples. Randomness is consumed from labelled
//! streams (`point=i / iter=k / draw=j / purify/...`) so every attack run
//! replays bit-exactly per seed.

use std::sync::Arc;

use crate::autodiff::{MemoryMeter, Tape};
use crate::chainckpt::{segmentwise_backward, ChainStep, InjectMap};
use crate::diffusion::{purify, purify_with_states, PurifierConfig, PurifyKind, SdeReverseStep, Trajectory};
use crate::error::{CoreError, Result};
use crate::models::{cross_entropy, ClassifierParams, MlpParams};
use crate::rng::{RngState, StreamRng};
use crate::tensor::Tensor;

/// Perturbation norm of the threat model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Norm {
    Linf,
    L2,
}

/// Where the deviated-reconstruction loss is applied along the trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TimestepStrategy {
    /// Steps drawn from the whole range `[0, T*]`.
    Uniform,
    /// Steps drawn from `[0, T*/3]` only.
    InitialThird,
    /// Steps drawn from `[2 T*/3, T*]` only.
    FinalThird,
}

/// The purification defense under attack: the sampler configuration, the
/// noise model driving it, and the downstream classifier.
#[derive(Clone)]
pub struct Defense {
    pub purifier: PurifierConfig,
    pub eps_model: Arc<MlpParams>,
    pub classifier: Arc<ClassifierParams>,
}

/// Attack hyperparameters. `step_size` defaults to `2 * eps` and the
/// step-halving checkpoint set to `{0.22, 0.44, 0.66, 0.88} * n_iter`.
#[derive(Debug, Clone)]
pub struct AttackConfig {
    pub eps: f64,
    pub norm: Norm,
    pub n_iter: usize,
    pub eot: usize,
    pub momentum: f64,
    pub lambda: f64,
    pub step_size: Option<f64>,
    pub checkpoint_iters: Option<Vec<usize>>,
    pub timestep_strategy: TimestepStrategy,
    /// Steps carrying the deviated loss per draw; `floor(T*/3)` when unset.
    pub timestep_count: Option<usize>,
    pub random_start: bool,
    /// Rademacher probe pairs per SPSA gradient estimate.
    pub spsa_samples: usize,
    /// Central-difference width of the SPSA probes.
    pub spsa_delta: f64,
    /// Data domain box, coordinatewise.
    pub domain: (f64, f64),
}

impl AttackConfig {
    pub fn new(eps: f64, norm: Norm) -> Self {
        AttackConfig {
            eps,
            norm,
            n_iter: 40,
            eot: 8,
            momentum: 0.75,
            lambda: 1.0,
            step_size: None,
            checkpoint_iters: None,
            timestep_strategy: TimestepStrategy::Uniform,
            timestep_count: None,
            random_start: false,
            spsa_samples: 16,
            spsa_delta: 0.01,
            domain: (0.0, 1.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.eps < 0.0 {
            return Err(CoreError::Config("eps must be nonnegative".into()));
        }
        if self.n_iter < 1 || self.eot < 1 {
            return Err(CoreError::Config("n_iter and eot must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.momentum) {
            return Err(CoreError::Config("momentum must lie in [0, 1]".into()));
        }
        if self.domain.0 >= self.domain.1 {
            return Err(CoreError::Config("empty data domain".into()));
        }
        Ok(())
    }

    pub fn step_size(&self) -> f64 {
        self.step_size.unwrap_or(2.0 * self.eps)
    }

    /// Iterations at which the step size halves.
    pub fn checkpoints(&self) -> Vec<usize> {
        self.checkpoint_iters.clone().unwrap_or_else(|| {
            [0.22, 0.44, 0.66, 0.88]
                .iter()
                .map(|f| (f * self.n_iter as f64).floor() as usize)
                .collect()
        })
    }
}

/// Outcome of one attack run on one point.
#[derive(Debug, Clone)]
pub struct AttackResult {
    pub adversarial: Tensor,
    pub best_loss: f64,
    /// Surrogate loss at every evaluated iterate, in order.
    pub loss_trace: Vec<f64>,
    /// Misclassification flag of the final adversarial example over `eot`
    /// fresh purification draws.
    pub success_per_draw: Vec<bool>,
}

/// Projects onto the perturbation ball around `x_orig` and then into the
/// data domain box. For `linf` a coordinatewise clamp; for `l2` a radial
/// rescale onto the sphere when outside.
pub fn project(
    x: &Tensor,
    x_orig: &Tensor,
    eps: f64,
    norm: Norm,
    domain: (f64, f64),
) -> Result<Tensor> {
    let inside = match norm {
        Norm::Linf => x.clamp_around(x_orig, eps)?,
        Norm::L2 => {
            let d = x.sub(x_orig)?;
            let n = d.l2_norm();
            if n > eps {
                x_orig.add(&d.scale(eps / n))?
            } else {
                x.clone()
            }
        }
    };
    Ok(inside.clamp(domain.0, domain.1))
}

/// Draws the deviated-loss time steps for one purification draw:
/// `count` distinct steps (default `floor(T*/3)`) from the strategy's range,
/// without replacement, sorted.
pub fn sample_timesteps(
    strategy: TimestepStrategy,
    t_star: usize,
    count: Option<usize>,
    rng: &mut StreamRng,
) -> Result<Vec<usize>> {
    if t_star < 3 {
        return Err(CoreError::Config(format!(
            "timestep sampling needs t_star >= 3, got {t_star}"
        )));
    }
    let count = count.unwrap_or(t_star / 3);
    let (lo, hi) = match strategy {
        TimestepStrategy::Uniform => (0, t_star),
        TimestepStrategy::InitialThird => (0, t_star / 3),
        TimestepStrategy::FinalThird => (2 * t_star / 3, t_star),
    };
    if hi - lo + 1 < count {
        return Err(CoreError::Config(format!(
            "range [{lo}, {hi}] smaller than sample count {count}"
        )));
    }
    Ok(rng.sample_distinct(lo, hi, count))
}

/// `sum_t alpha_t d(x_t, x'_t)` with `d` the squared Euclidean distance.
pub fn deviated_loss(traj: &Trajectory, steps: &[usize], weights: &[f64]) -> Result<f64> {
    if steps.is_empty() {
        return Err(CoreError::Config("deviated_loss needs at least one step".into()));
    }
    if steps.len() != weights.len() {
        return Err(CoreError::Config(format!(
            "{} steps but {} weights",
            steps.len(),
            weights.len()
        )));
    }
    let mut total = 0.0;
    for (&t, &w) in steps.iter().zip(weights.iter()) {
        if t > traj.t_star() {
            return Err(CoreError::Config(format!(
                "step {t} outside trajectory range 0..={}",
                traj.t_star()
            )));
        }
        total += w * traj.forward_sample(t).sq_dist(traj.reverse_sample(t))?;
    }
    Ok(total)
}

/// Uniform weights `1/n`, the default time weighting.
pub fn uniform_weights(n: usize) -> Vec<f64> {
    vec![1.0 / n as f64; n]
}

fn classifier_loss_and_grad(
    classifier: &ClassifierParams,
    x: &Tensor,
    y: usize,
) -> Result<(f64, Tensor)> {
    let mut tape = Tape::new();
    let handle = classifier.place_on(&mut tape, false);
    let xr = tape.var(x.clone());
    let logits = handle.logits(&mut tape, xr)?;
    let ce = tape.cross_entropy(logits, y)?;
    let loss = tape.value(ce).as_scalar()?;
    let grads = tape.backward(ce, Tensor::scalar(1.0))?;
    Ok((loss, grads.get(xr).expect("input is a variable").clone()))
}

fn draw_timesteps(t_star: usize, cfg: &AttackConfig, rng: &StreamRng) -> Result<Vec<usize>> {
    if cfg.lambda == 0.0 || t_star < 3 {
        return Ok(Vec::new());
    }
    let mut srng = rng.derive("steps");
    sample_timesteps(cfg.timestep_strategy, t_star, cfg.timestep_count, &mut srng)
}

fn combined_loss_on(
    traj: &Trajectory,
    y: usize,
    defense: &Defense,
    cfg: &AttackConfig,
    steps: &[usize],
) -> Result<f64> {
    let logits = defense.classifier.classify(traj.output())?;
    let l_cls = cross_entropy(&logits, y)?;
    let l_dev = if cfg.lambda != 0.0 && !steps.is_empty() {
        deviated_loss(traj, steps, &uniform_weights(steps.len()))?
    } else {
        0.0
    };
    Ok(l_cls + cfg.lambda * l_dev)
}

/// One purification draw of the combined surrogate `L_cls + lambda L_dev`.
/// Deterministic per `rng`; the expectation over draws is taken by the EOT
/// wrapper.
pub fn combined_objective(
    x: &Tensor,
    y: usize,
    defense: &Defense,
    cfg: &AttackConfig,
    rng: &StreamRng,
) -> Result<(f64, Trajectory)> {
    let steps = draw_timesteps(defense.purifier.t_star, cfg, rng)?;
    let (_, traj) = purify(x, &defense.purifier, &defense.eps_model, rng)?;
    let loss = combined_loss_on(&traj, y, defense, cfg, &steps)?;
    Ok((loss, traj))
}

/// As [`combined_objective`] but with a frozen noise path and a fixed
/// time-step set, making the objective a deterministic function of `x`
/// (the form finite differences are taken against).
pub fn combined_objective_frozen(
    x: &Tensor,
    y: usize,
    defense: &Defense,
    cfg: &AttackConfig,
    states: &[RngState],
    steps: &[usize],
) -> Result<f64> {
    let (_, traj) = purify_with_states(x, &defense.purifier, &defense.eps_model, states)?;
    combined_loss_on(&traj, y, defense, cfg, steps)
}

fn add_injection(inject: &mut InjectMap, index: usize, g: Tensor) -> Result<()> {
    match inject.entry(index) {
        std::collections::btree_map::Entry::Vacant(e) => {
            e.insert(g);
        }
        std::collections::btree_map::Entry::Occupied(mut e) => {
            let sum = e.get().add(&g)?;
            e.insert(sum);
        }
    }
    Ok(())
}

/// Loss and input gradient of one purification draw, backpropagated
/// segment-wise with the deviated-loss gradients injected at their samples.
fn draw_gradient(
    x: &Tensor,
    y: usize,
    defense: &Defense,
    cfg: &AttackConfig,
    rng: &StreamRng,
    meter: &MemoryMeter,
) -> Result<(f64, Tensor)> {
    let steps = draw_timesteps(defense.purifier.t_star, cfg, rng)?;
    let (_, traj) = purify(x, &defense.purifier, &defense.eps_model, rng)?;

    let (l_cls, seed) = classifier_loss_and_grad(&defense.classifier, traj.output(), y)?;
    let mut loss = l_cls;
    let mut inject = InjectMap::new();
    if cfg.lambda != 0.0 && !steps.is_empty() {
        let weights = uniform_weights(steps.len());
        loss += cfg.lambda * deviated_loss(&traj, &steps, &weights)?;
        for (&t, &w) in steps.iter().zip(weights.iter()) {
            let fwd = traj.forward_sample(t);
            let rev = traj.reverse_sample(t);
            // d/dx'_t of w |x_t - x'_t|^2 is 2w (x'_t - x_t); the x_t side
            // gets the opposite sign.
            let g_rev = rev.sub(fwd)?.scale(2.0 * w * cfg.lambda);
            let g_fwd = g_rev.scale(-1.0);
            add_injection(&mut inject, traj.reverse_index(t), g_rev)?;
            add_injection(&mut inject, traj.forward_index(t), g_fwd)?;
        }
    }
    let grad = segmentwise_backward(traj.record(), &seed, &inject, meter)?;
    Ok((loss, grad))
}

fn eot_loss_gradient(
    x: &Tensor,
    y: usize,
    defense: &Defense,
    cfg: &AttackConfig,
    rng: &StreamRng,
) -> Result<(f64, Tensor)> {
    let meter = MemoryMeter::new();
    let mut loss_sum = 0.0;
    let mut grad_sum = Tensor::zeros_like(x);
    for j in 0..cfg.eot {
        let drng = rng.derive(&format!("draw={j}"));
        let (l, g) = draw_gradient(x, y, defense, cfg, &drng, &meter)?;
        loss_sum += l;
        grad_sum = grad_sum.add(&g)?;
    }
    let inv = 1.0 / cfg.eot as f64;
    Ok((loss_sum * inv, grad_sum.scale(inv)))
}

/// Mean over `cfg.eot` independent purification draws of the gradient of
/// `L_cls + lambda L_dev` with respect to the input, each draw
/// backpropagated segment-wise.
pub fn eot_gradient(
    x: &Tensor,
    y: usize,
    defense: &Defense,
    cfg: &AttackConfig,
    rng: &StreamRng,
) -> Result<Tensor> {
    Ok(eot_loss_gradient(x, y, defense, cfg, rng)?.1)
}

fn step_direction(g: &Tensor, norm: Norm) -> Tensor {
    match norm {
        Norm::Linf => g.sign(),
        Norm::L2 => {
            let n = g.l2_norm();
            if n > 0.0 {
                g.scale(1.0 / n)
            } else {
                Tensor::zeros_like(g)
            }
        }
    }
}

fn random_start_point(x: &Tensor, cfg: &AttackConfig, rng: &StreamRng) -> Result<Tensor> {
    if !cfg.random_start {
        return Ok(x.clone());
    }
    let mut irng = rng.derive("init");
    let jitter: Vec<f64> = (0..x.len())
        .map(|_| (irng.uniform() * 2.0 - 1.0) * cfg.eps)
        .collect();
    project(
        &x.add(&Tensor::new(x.shape().to_vec(), jitter)?)?,
        x,
        cfg.eps,
        cfg.norm,
        cfg.domain,
    )
}

type LossGradFn<'a> = dyn Fn(&Tensor, &StreamRng) -> Result<(f64, Tensor)> + 'a;

/// Momentum loop with best-iterate tracking and step halving at the
/// checkpoint iterations:
/// `z = P(x_k + eta dir(g))`,
/// `x_{k+1} = P(x_k + a (z - x_k) + (1 - a)(x_k - x_{k-1}))`.
/// Returns the best iterate by surrogate loss; misclassified iterates stay
/// under optimization.
fn momentum_loop(
    x: &Tensor,
    y: usize,
    defense: &Defense,
    cfg: &AttackConfig,
    rng: &StreamRng,
    loss_grad: &LossGradFn,
) -> Result<AttackResult> {
    cfg.validate()?;
    let mut eta = cfg.step_size();
    let checkpoints = cfg.checkpoints();

    let x0 = random_start_point(x, cfg, rng)?;
    let (l0, g0) = loss_grad(&x0, &rng.derive("iter=0"))?;
    let mut trace = vec![l0];
    let mut best = (l0, x0.clone());

    let x1 = project(
        &x0.add(&step_direction(&g0, cfg.norm).scale(eta))?,
        x,
        cfg.eps,
        cfg.norm,
        cfg.domain,
    )?;
    let (l1, g1) = loss_grad(&x1, &rng.derive("iter=1"))?;
    trace.push(l1);
    if l1 > best.0 {
        best = (l1, x1.clone());
    }

    let mut x_prev = x0;
    let mut x_cur = x1;
    let mut g_cur = g1;
    for k in 1..cfg.n_iter {
        let z = project(
            &x_cur.add(&step_direction(&g_cur, cfg.norm).scale(eta))?,
            x,
            cfg.eps,
            cfg.norm,
            cfg.domain,
        )?;
        let x_next = {
            let z_term = z.sub(&x_cur)?.scale(cfg.momentum);
            let momentum_term = x_cur.sub(&x_prev)?.scale(1.0 - cfg.momentum);
            project(
                &x_cur.add(&z_term)?.add(&momentum_term)?,
                x,
                cfg.eps,
                cfg.norm,
                cfg.domain,
            )?
        };
        let (l_next, g_next) = loss_grad(&x_next, &rng.derive(&format!("iter={}", k + 1)))?;
        trace.push(l_next);
        if l_next > best.0 {
            best = (l_next, x_next.clone());
        }
        if checkpoints.contains(&k) {
            eta *= 0.5;
        }
        x_prev = x_cur;
        x_cur = x_next;
        g_cur = g_next;
    }

    finish_result(best, trace, x, y, defense, cfg, rng)
}

/// Plain projected ascent `x_{k+1} = P(x_k + eta dir(g))` with a constant
/// step. Shares the evaluation layout with the momentum loop, so the two
/// coincide bitwise when momentum and step halving are disabled.
fn pgd_loop(
    x: &Tensor,
    y: usize,
    defense: &Defense,
    cfg: &AttackConfig,
    rng: &StreamRng,
    loss_grad: &LossGradFn,
) -> Result<AttackResult> {
    cfg.validate()?;
    let eta = cfg.step_size();
    let mut x_cur = random_start_point(x, cfg, rng)?;
    let mut trace = Vec::with_capacity(cfg.n_iter + 1);
    let mut best: Option<(f64, Tensor)> = None;
    for k in 0..=cfg.n_iter {
        let (l, g) = loss_grad(&x_cur, &rng.derive(&format!("iter={k}")))?;
        trace.push(l);
        if best.as_ref().map_or(true, |(bl, _)| l > *bl) {
            best = Some((l, x_cur.clone()));
        }
        if k == cfg.n_iter {
            break;
        }
        x_cur = project(
            &x_cur.add(&step_direction(&g, cfg.norm).scale(eta))?,
            x,
            cfg.eps,
            cfg.norm,
            cfg.domain,
        )?;
    }
    finish_result(
        best.expect("at least one eval"),
        trace,
        x,
        y,
        defense,
        cfg,
        rng,
    )
}

fn finish_result(
    best: (f64, Tensor),
    trace: Vec<f64>,
    x_orig: &Tensor,
    y: usize,
    defense: &Defense,
    cfg: &AttackConfig,
    rng: &StreamRng,
) -> Result<AttackResult> {
    let (best_loss, adversarial) = best;
    debug_assert!(within_budget(&adversarial, x_orig, cfg));
    let mut success = Vec::with_capacity(cfg.eot);
    for j in 0..cfg.eot {
        let erng = rng.derive(&format!("final-eval/draw={j}"));
        let (out, _) = purify(&adversarial, &defense.purifier, &defense.eps_model, &erng)?;
        success.push(defense.classifier.predict(&out)? != y);
    }
    Ok(AttackResult {
        adversarial,
        best_loss,
        loss_trace: trace,
        success_per_draw: success,
    })
}

/// Budget and domain membership of an adversarial example (tolerance 1e-12).
pub fn within_budget(adv: &Tensor, x_orig: &Tensor, cfg: &AttackConfig) -> bool {
    let dist = match cfg.norm {
        Norm::Linf => adv.linf_dist(x_orig).unwrap_or(f64::INFINITY),
        Norm::L2 => adv.l2_dist(x_orig).unwrap_or(f64::INFINITY),
    };
    dist <= cfg.eps + 1e-12
        && adv
            .data()
            .iter()
            .all(|&v| (cfg.domain.0..=cfg.domain.1).contains(&v))
}

/// The adaptive attack: the momentum loop over the EOT gradient of
/// `L_cls + lambda L_dev`.
pub fn diffattack(
    x: &Tensor,
    y: usize,
    defense: &Defense,
    cfg: &AttackConfig,
    rng: &StreamRng,
) -> Result<AttackResult> {
    momentum_loop(x, y, defense, cfg, rng, &|probe, r| {
        eot_loss_gradient(probe, y, defense, cfg, r)
    })
}

/// Plain PGD through the purifier: CE loss only, EOT gradient, sign or
/// normalized steps.
pub fn pgd_attack(
    x: &Tensor,
    y: usize,
    defense: &Defense,
    cfg: &AttackConfig,
    rng: &StreamRng,
) -> Result<AttackResult> {
    let mut ce_cfg = cfg.clone();
    ce_cfg.lambda = 0.0;
    let cfg_ref = &ce_cfg;
    pgd_loop(x, y, defense, cfg_ref, rng, &|probe, r| {
        eot_loss_gradient(probe, y, defense, cfg_ref, r)
    })
}

fn bpda_loss_gradient(
    x: &Tensor,
    y: usize,
    defense: &Defense,
    cfg: &AttackConfig,
    rng: &StreamRng,
) -> Result<(f64, Tensor)> {
    let mut loss_sum = 0.0;
    let mut grad_sum = Tensor::zeros_like(x);
    for j in 0..cfg.eot {
        let drng = rng.derive(&format!("draw={j}"));
        let (out, _) = purify(x, &defense.purifier, &defense.eps_model, &drng)?;
        // Backward treats the purifier as the identity: the classifier
        // gradient at the purified output is applied directly to x.
        let (l, g) = classifier_loss_and_grad(&defense.classifier, &out, y)?;
        loss_sum += l;
        grad_sum = grad_sum.add(&g)?;
    }
    let inv = 1.0 / cfg.eot as f64;
    Ok((loss_sum * inv, grad_sum.scale(inv)))
}

/// BPDA with the identity surrogate: forward through the true purifier,
/// backward as if `P` were the identity. The diffusion chain is never
/// differentiated.
pub fn bpda_attack(
    x: &Tensor,
    y: usize,
    defense: &Defense,
    cfg: &AttackConfig,
    rng: &StreamRng,
) -> Result<AttackResult> {
    pgd_loop(x, y, defense, cfg, rng, &|probe, r| {
        bpda_loss_gradient(probe, y, defense, cfg, r)
    })
}

/// SPSA estimate of the gradient of `f` at `x`: `k` Rademacher probe pairs
/// with central differences of width `2c`. Returns the mean probe loss and
/// the estimate. Both probes of a pair see the same noise stream.
pub fn spsa_gradient<F>(
    mut f: F,
    x: &Tensor,
    k: usize,
    c: f64,
    rng: &StreamRng,
) -> Result<(f64, Tensor)>
where
    F: FnMut(&Tensor, &StreamRng) -> Result<f64>,
{
    if k == 0 || c <= 0.0 {
        return Err(CoreError::Config("spsa needs k >= 1 and c > 0".into()));
    }
    let mut grad = vec![0.0; x.len()];
    let mut loss_sum = 0.0;
    for s in 0..k {
        let mut prng = rng.derive(&format!("spsa={s}"));
        let delta: Vec<f64> = (0..x.len())
            .map(|_| if prng.uniform() < 0.5 { -1.0 } else { 1.0 })
            .collect();
        let dt = Tensor::new(x.shape().to_vec(), delta.clone())?;
        let noise_rng = prng.derive("probe");
        let lp = f(&x.add(&dt.scale(c))?, &noise_rng)?;
        let lm = f(&x.add(&dt.scale(-c))?, &noise_rng)?;
        let slope = (lp - lm) / (2.0 * c);
        for (gi, di) in grad.iter_mut().zip(delta.iter()) {
            *gi += slope * di;
        }
        loss_sum += 0.5 * (lp + lm);
    }
    let inv = 1.0 / k as f64;
    Ok((
        loss_sum * inv,
        Tensor::new(x.shape().to_vec(), grad.iter().map(|g| g * inv).collect())?,
    ))
}

/// Black-box SPSA attack: projected ascent on the finite-difference
/// estimate of CE through the purifier.
pub fn spsa_attack(
    x: &Tensor,
    y: usize,
    defense: &Defense,
    cfg: &AttackConfig,
    rng: &StreamRng,
) -> Result<AttackResult> {
    pgd_loop(x, y, defense, cfg, rng, &|probe, r| {
        spsa_gradient(
            |p, noise_rng| {
                let (out, _) = purify(p, &defense.purifier, &defense.eps_model, noise_rng)?;
                cross_entropy(&defense.classifier.classify(&out)?, y)
            },
            probe,
            cfg.spsa_samples,
            cfg.spsa_delta,
            r,
        )
    })
}

/// Joint-attack flavor: the score-estimator update or the full
/// purified-difference update.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JointMode {
    Score,
    Full,
}

const JOINT_BALANCE: f64 = 0.5;

/// Joint attack: each step moves along
/// `lambda' sign(A) + (1 - lambda') sign(grad CE)` where `A` is the score
/// `s_theta(x)` (score mode) or the purified difference `P(x) - x` (full
/// mode) and `lambda'` is fixed at 0.5. Score mode needs a score estimator
/// and rejects DDPM purifiers.
pub fn joint_attack(
    mode: JointMode,
    x: &Tensor,
    y: usize,
    defense: &Defense,
    cfg: &AttackConfig,
    rng: &StreamRng,
) -> Result<AttackResult> {
    if mode == JointMode::Score && defense.purifier.kind == PurifyKind::Ddpm {
        return Err(CoreError::Config(
            "joint attack (score) needs a score estimator; the ddpm purifier does not expose one"
                .into(),
        ));
    }
    pgd_loop(x, y, defense, cfg, rng, &|probe, r| {
        let (l_ce, g_ce) = bpda_loss_gradient(probe, y, defense, cfg, r)?;
        let a = match mode {
            JointMode::Score => {
                // Score direction at the input, evaluated at the first
                // schedule step: s = -eps(x, 1)/sqrt(1 - abar_1).
                let eps = defense.eps_model.eps_theta(probe, 1.0)?;
                let ab = defense.purifier.schedule.alpha_bar(1);
                eps.scale(-1.0 / (1.0 - ab).sqrt())
            }
            JointMode::Full => {
                let mut diff_sum = Tensor::zeros_like(probe);
                for j in 0..cfg.eot {
                    let drng = r.derive(&format!("joint-draw={j}"));
                    let (out, _) = purify(probe, &defense.purifier, &defense.eps_model, &drng)?;
                    diff_sum = diff_sum.add(&out.sub(probe)?)?;
                }
                diff_sum.scale(1.0 / cfg.eot as f64)
            }
        };
        let combined = a
            .sign()
            .scale(JOINT_BALANCE)
            .add(&g_ce.sign().scale(1.0 - JOINT_BALANCE))?;
        Ok((l_ce, combined))
    })
}

fn adjoint_loss_gradient(
    x: &Tensor,
    y: usize,
    defense: &Defense,
    cfg: &AttackConfig,
    rng: &StreamRng,
) -> Result<(f64, Tensor)> {
    if defense.purifier.kind != PurifyKind::Vpsde {
        return Err(CoreError::Config(
            "adjoint gradients integrate an SDE; the ddpm purifier is discrete".into(),
        ));
    }
    let mut loss_sum = 0.0;
    let mut grad_sum = Tensor::zeros_like(x);
    for j in 0..cfg.eot {
        let drng = rng.derive(&format!("draw={j}"));
        let (out, traj) = purify(x, &defense.purifier, &defense.eps_model, &drng)?;
        let (l, g) = adjoint_single_draw(&out, y, defense, &traj)?;
        loss_sum += l;
        grad_sum = grad_sum.add(&g)?;
    }
    let inv = 1.0 / cfg.eot as f64;
    Ok((loss_sum * inv, grad_sum.scale(inv)))
}

/// Gradient of CE through a VP-SDE purification draw via the augmented
/// reverse system: the state is re-integrated backward on the same fixed
/// grid and noise path while the adjoint accumulates one-step
/// vector-Jacobian products. Unlike the checkpointing path, intermediate
/// states are reconstructed rather than stored, so the result carries the
/// integrator's discretization error.
pub fn adjoint_gradient(
    x: &Tensor,
    y: usize,
    defense: &Defense,
    cfg: &AttackConfig,
    rng: &StreamRng,
) -> Result<Tensor> {
    Ok(adjoint_loss_gradient(x, y, defense, cfg, rng)?.1)
}

fn adjoint_single_draw(
    purified: &Tensor,
    y: usize,
    defense: &Defense,
    traj: &Trajectory,
) -> Result<(f64, Tensor)> {
    let s = &defense.purifier.schedule;
    let p = &defense.eps_model;
    let t_star = traj.t_star();
    let t_max = s.t_max() as f64;
    let dt = 1.0 / t_max;
    let dim = purified.len();
    let states = traj.rng_states();

    let (loss, mut adj) = classifier_loss_and_grad(&defense.classifier, purified, y)?;
    if t_star == 0 {
        return Ok((loss, adj));
    }

    let draw_dw = |chain_index: usize| -> Tensor {
        let mut r = StreamRng::from_state(states[chain_index]);
        Tensor::vector(r.fill_normal(dim)).scale(dt.sqrt())
    };

    // Reverse chain: reconstruct x'_i from x'_{i-1} by explicit backward
    // re-integration on the same noise path, then apply the step's VJP at
    // the reconstruction.
    let mut state = purified.clone();
    for i in 1..=t_star {
        let chain_index = 2 * t_star - i; // the reverse step that produced x'_{i-1}
        let dw = draw_dw(chain_index);
        let rate = s.beta_rate(i as f64 / t_max);
        let abar = s.alpha_bar_cont(i as f64);
        let eps = p.eps_theta(&state, i as f64)?;
        let drift = state
            .scale(0.5 * rate * dt)
            .add(&eps.scale(-rate * dt / (1.0 - abar).sqrt()))?;
        state = state.sub(&drift)?.sub(&dw.scale(rate.sqrt()))?;

        let step = SdeReverseStep {
            i,
            schedule: Arc::clone(s),
            params: Arc::clone(p),
        };
        let mut tape = Tape::new();
        let xr = tape.var(state.clone());
        let mut srng = StreamRng::from_state(states[chain_index]);
        let outr = step.record(&mut tape, xr, &mut srng)?;
        let grads = tape.backward(outr, adj.clone())?;
        adj = grads.get(xr).expect("input is a variable").clone();
    }

    // Forward chain: the Euler-Maruyama diffusion step is linear in x given
    // its noise, so its inverse and Jacobian are exact.
    for i in (1..=t_star).rev() {
        let chain_index = i - 1;
        let dw = draw_dw(chain_index);
        let rate = s.beta_rate((i - 1) as f64 / t_max);
        let a = 1.0 - 0.5 * rate * dt;
        state = state.sub(&dw.scale(rate.sqrt()))?.scale(1.0 / a);
        adj = adj.scale(a);
    }
    Ok((loss, adj))
}

/// Adjoint-gradient attack for VP-SDE purifiers: the momentum loop driven
/// by the adjoint CE gradient.
pub fn adjoint_attack(
    x: &Tensor,
    y: usize,
    defense: &Defense,
    cfg: &AttackConfig,
    rng: &StreamRng,
) -> Result<AttackResult> {
    momentum_loop(x, y, defense, cfg, rng, &|probe, r| {
        adjoint_loss_gradient(probe, y, defense, cfg, r)
    })
}

/// Attack roster used by evaluations and the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttackMethod {
    DiffAttack,
    /// The adaptive attack with the deviated-reconstruction loss disabled.
    LambdaZero,
    Pgd,
    Bpda,
    Spsa,
    JointScore,
    JointFull,
    Adjoint,
}

impl AttackMethod {
    pub const ALL: [AttackMethod; 8] = [
        AttackMethod::DiffAttack,
        AttackMethod::LambdaZero,
        AttackMethod::Pgd,
        AttackMethod::Bpda,
        AttackMethod::Spsa,
        AttackMethod::JointScore,
        AttackMethod::JointFull,
        AttackMethod::Adjoint,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            AttackMethod::DiffAttack => "diffattack",
            AttackMethod::LambdaZero => "lambda0",
            AttackMethod::Pgd => "pgd",
            AttackMethod::Bpda => "bpda",
            AttackMethod::Spsa => "spsa",
            AttackMethod::JointScore => "joint_score",
            AttackMethod::JointFull => "joint_full",
            AttackMethod::Adjoint => "adjoint",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        AttackMethod::ALL
            .iter()
            .find(|m| m.name() == name)
            .copied()
            .ok_or_else(|| CoreError::Config(format!("unknown attack '{name}'")))
    }

    pub fn run(
        &self,
        x: &Tensor,
        y: usize,
        defense: &Defense,
        cfg: &AttackConfig,
        rng: &StreamRng,
    ) -> Result<AttackResult> {
        match self {
            AttackMethod::DiffAttack => diffattack(x, y, defense, cfg, rng),
            AttackMethod::LambdaZero => {
                let mut c = cfg.clone();
                c.lambda = 0.0;
                diffattack(x, y, defense, &c, rng)
            }
            AttackMethod::Pgd => pgd_attack(x, y, defense, cfg, rng),
            AttackMethod::Bpda => bpda_attack(x, y, defense, cfg, rng),
            AttackMethod::Spsa => spsa_attack(x, y, defense, cfg, rng),
            AttackMethod::JointScore => joint_attack(JointMode::Score, x, y, defense, cfg, rng),
            AttackMethod::JointFull => joint_attack(JointMode::Full, x, y, defense, cfg, rng),
            AttackMethod::Adjoint => adjoint_attack(x, y, defense, cfg, rng),
        }
    }
}

/// Majority-vote correctness of one input over `n_eval_draws` fresh
/// purification seeds; correct means a strict majority of draws classify
/// to `y`.
pub fn majority_correct(
    x: &Tensor,
    y: usize,
    defense: &Defense,
    n_eval_draws: usize,
    rng: &StreamRng,
) -> Result<bool> {
    let mut votes = 0usize;
    for j in 0..n_eval_draws {
        let erng = rng.derive(&format!("eval/draw={j}"));
        let (out, _) = purify(x, &defense.purifier, &defense.eps_model, &erng)?;
        if defense.classifier.predict(&out)? == y {
            votes += 1;
        }
    }
    Ok(2 * votes > n_eval_draws)
}

/// Runs `attack` on every dataset point and scores the adversarial
/// examples by majority vote over fresh purification draws. Returns the
/// fraction still classified correctly.
pub fn robust_accuracy(
    dataset: &[(Tensor, usize)],
    attack: AttackMethod,
    defense: &Defense,
    cfg: &AttackConfig,
    n_eval_draws: usize,
    rng: &StreamRng,
) -> Result<f64> {
    if dataset.is_empty() || n_eval_draws == 0 {
        return Err(CoreError::Config(
            "robust_accuracy needs data and at least one eval draw".into(),
        ));
    }
    let mut correct = 0usize;
    for (i, (x, y)) in dataset.iter().enumerate() {
        let prng = rng.derive(&format!("point={i}"));
        let result = attack.run(x, *y, defense, cfg, &prng.derive("attack"))?;
        if majority_correct(&result.adversarial, *y, defense, n_eval_draws, &prng)? {
            correct += 1;
        }
    }
    Ok(correct as f64 / dataset.len() as f64)
}

/// Majority-vote accuracy of the defense on clean inputs, with the same
/// evaluation stream layout as [`robust_accuracy`].
pub fn clean_accuracy(
    dataset: &[(Tensor, usize)],
    defense: &Defense,
    n_eval_draws: usize,
    rng: &StreamRng,
) -> Result<f64> {
    if dataset.is_empty() || n_eval_draws == 0 {
        return Err(CoreError::Config(
            "clean_accuracy needs data and at least one eval draw".into(),
        ));
    }
    let mut correct = 0usize;
    for (i, (x, y)) in dataset.iter().enumerate() {
        let prng = rng.derive(&format!("point={i}"));
        if majority_correct(x, *y, defense, n_eval_draws, &prng)? {
            correct += 1;
        }
    }
    Ok(correct as f64 / dataset.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::NoiseSchedule;

    fn bits(t: &Tensor) -> Vec<u64> {
        t.data().iter().map(|v| v.to_bits()).collect()
    }

    fn toy_defense(kind: PurifyKind, t_star: usize, seed: u64) -> Defense {
        let schedule = Arc::new(NoiseSchedule::linear(12, 1e-3, 5e-2).unwrap());
        let mut rng = StreamRng::new(seed, "defense");
        let eps_model = Arc::new(MlpParams::init(2, &[8, 8], 4, &mut rng).unwrap());
        let classifier = Arc::new(ClassifierParams::init(2, &[8], 2, &mut rng).unwrap());
        Defense {
            purifier: PurifierConfig::new(kind, t_star, schedule).unwrap(),
            eps_model,
            classifier,
        }
    }

    #[test]
    fn project_examples() {
        let orig = Tensor::vector(vec![0.0, 0.0]);
        let inside = Tensor::vector(vec![0.05, -0.02]);
        let projected = project(&inside, &orig, 0.1, Norm::Linf, (-1.0, 1.0)).unwrap();
        assert_eq!(projected.data(), inside.data());

        let far = Tensor::vector(vec![0.5, 0.0]);
        let projected = project(&far, &orig, 0.1, Norm::Linf, (-1.0, 1.0)).unwrap();
        assert_eq!(projected.data(), &[0.1, 0.0]);

        let far = Tensor::vector(vec![3.0, 4.0]);
        let projected = project(&far, &orig, 1.0, Norm::L2, (-1.0, 1.0)).unwrap();
        assert!((projected.data()[0] - 0.6).abs() < 1e-15);
        assert!((projected.data()[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn project_respects_domain_box() {
        let orig = Tensor::vector(vec![0.95, 0.5]);
        let x = Tensor::vector(vec![1.2, 0.5]);
        let projected = project(&x, &orig, 0.2, Norm::Linf, (0.0, 1.0)).unwrap();
        assert_eq!(projected.data(), &[1.0, 0.5]);
    }

    #[test]
    fn timestep_strategies_cover_their_ranges() {
        let mut rng = StreamRng::new(1, "steps");
        let uni = sample_timesteps(TimestepStrategy::Uniform, 9, None, &mut rng).unwrap();
        assert_eq!(uni.len(), 3);
        assert!(uni.iter().all(|&t| t <= 9));

        let init = sample_timesteps(TimestepStrategy::InitialThird, 9, None, &mut rng).unwrap();
        assert_eq!(init.len(), 3);
        assert!(init.iter().all(|&t| t <= 3));

        let fin = sample_timesteps(TimestepStrategy::FinalThird, 9, None, &mut rng).unwrap();
        assert_eq!(fin.len(), 3);
        assert!(fin.iter().all(|&t| t >= 6));

        assert!(sample_timesteps(TimestepStrategy::Uniform, 2, None, &mut rng).is_err());
        assert!(
            sample_timesteps(TimestepStrategy::InitialThird, 9, Some(10), &mut rng).is_err()
        );
    }

    #[test]
    fn deviated_loss_examples() {
        let defense = toy_defense(PurifyKind::Ddpm, 4, 3);
        let x = Tensor::vector(vec![0.4, 0.6]);
        let (_, traj) = purify(
            &x,
            &defense.purifier,
            &defense.eps_model,
            &StreamRng::new(5, "p"),
        )
        .unwrap();
        // Identical forward/reverse sample at the junction: distance 0.
        assert_eq!(
            deviated_loss(&traj, &[4], &uniform_weights(1)).unwrap(),
            0.0
        );
        assert!(deviated_loss(&traj, &[], &[]).is_err());
        assert!(deviated_loss(&traj, &[9], &uniform_weights(1)).is_err());

        // Hand-checked distances through the stored samples.
        let d0 = traj
            .forward_sample(0)
            .sq_dist(traj.reverse_sample(0))
            .unwrap();
        let d2 = traj
            .forward_sample(2)
            .sq_dist(traj.reverse_sample(2))
            .unwrap();
        let l = deviated_loss(&traj, &[0, 2], &uniform_weights(2)).unwrap();
        assert!((l - 0.5 * (d0 + d2)).abs() < 1e-15);
    }

    #[test]
    fn combined_objective_lambda_zero_is_ce_through_purifier() {
        let defense = toy_defense(PurifyKind::Ddpm, 4, 7);
        let mut cfg = AttackConfig::new(0.1, Norm::Linf);
        cfg.lambda = 0.0;
        let x = Tensor::vector(vec![0.3, 0.7]);
        let rng = StreamRng::new(11, "obj");
        let (loss, traj) = combined_objective(&x, 0, &defense, &cfg, &rng).unwrap();
        let ce = cross_entropy(&defense.classifier.classify(traj.output()).unwrap(), 0).unwrap();
        assert_eq!(loss, ce);
    }

    #[test]
    fn combined_objective_is_deterministic_per_seed() {
        let defense = toy_defense(PurifyKind::Ddpm, 6, 7);
        let cfg = AttackConfig::new(0.1, Norm::Linf);
        let x = Tensor::vector(vec![0.3, 0.7]);
        let (a, _) = combined_objective(&x, 1, &defense, &cfg, &StreamRng::new(3, "o")).unwrap();
        let (b, _) = combined_objective(&x, 1, &defense, &cfg, &StreamRng::new(3, "o")).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn eot_gradient_of_one_draw_matches_mean_of_draws() {
        let defense = toy_defense(PurifyKind::Ddpm, 5, 9);
        let mut cfg = AttackConfig::new(0.1, Norm::Linf);
        cfg.eot = 4;
        let x = Tensor::vector(vec![0.45, 0.55]);
        let rng = StreamRng::new(21, "eot");
        let g = eot_gradient(&x, 1, &defense, &cfg, &rng).unwrap();

        // Mean of the single-draw gradients with the same sub-streams.
        let mut sum = Tensor::zeros_like(&x);
        let meter = MemoryMeter::new();
        for j in 0..cfg.eot {
            let drng = rng.derive(&format!("draw={j}"));
            let (_, gj) = draw_gradient(&x, 1, &defense, &cfg, &drng, &meter).unwrap();
            sum = sum.add(&gj).unwrap();
        }
        let mean = sum.scale(1.0 / cfg.eot as f64);
        assert_eq!(bits(&g), bits(&mean));

        // eot = 1 equals the single draw.
        let mut cfg1 = cfg.clone();
        cfg1.eot = 1;
        let g1 = eot_gradient(&x, 1, &defense, &cfg1, &rng).unwrap();
        let (_, d0) = draw_gradient(&x, 1, &defense, &cfg1, &rng.derive("draw=0"), &meter).unwrap();
        assert_eq!(bits(&g1), bits(&d0));
    }

    #[test]
    fn diffattack_collapses_to_pgd_without_momentum_or_deviation() {
        let defense = toy_defense(PurifyKind::Ddpm, 0, 13);
        let mut cfg = AttackConfig::new(0.08, Norm::Linf);
        cfg.lambda = 0.0;
        cfg.eot = 1;
        cfg.momentum = 1.0;
        cfg.n_iter = 6;
        cfg.checkpoint_iters = Some(vec![]);
        let x = Tensor::vector(vec![0.52, 0.48]);
        let rng = StreamRng::new(31, "collapse");
        let a = diffattack(&x, 1, &defense, &cfg, &rng).unwrap();
        let b = pgd_attack(&x, 1, &defense, &cfg, &rng).unwrap();
        assert_eq!(bits(&a.adversarial), bits(&b.adversarial));
        assert_eq!(a.loss_trace.len(), b.loss_trace.len());
        for (la, lb) in a.loss_trace.iter().zip(b.loss_trace.iter()) {
            assert_eq!(la.to_bits(), lb.to_bits());
        }
    }

    #[test]
    fn attacks_respect_budget_and_track_best_loss() {
        let defense = toy_defense(PurifyKind::Ddpm, 4, 17);
        let mut cfg = AttackConfig::new(0.06, Norm::Linf);
        cfg.n_iter = 4;
        cfg.eot = 2;
        let x = Tensor::vector(vec![0.5, 0.5]);
        for method in [
            AttackMethod::DiffAttack,
            AttackMethod::LambdaZero,
            AttackMethod::Pgd,
            AttackMethod::Bpda,
            AttackMethod::Spsa,
            AttackMethod::JointFull,
        ] {
            let res = method
                .run(&x, 0, &defense, &cfg, &StreamRng::new(41, "budget"))
                .unwrap();
            assert!(
                within_budget(&res.adversarial, &x, &cfg),
                "{} broke the budget",
                method.name()
            );
            // Best-so-far is the max of the trace.
            let max = res.loss_trace.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert_eq!(res.best_loss, max, "{}", method.name());
            assert_eq!(res.success_per_draw.len(), cfg.eot);
        }
    }

    #[test]
    fn l2_budget_is_respected() {
        let defense = toy_defense(PurifyKind::Ddpm, 3, 19);
        let mut cfg = AttackConfig::new(0.05, Norm::L2);
        cfg.n_iter = 3;
        cfg.eot = 1;
        let x = Tensor::vector(vec![0.5, 0.5]);
        let res = diffattack(&x, 0, &defense, &cfg, &StreamRng::new(43, "l2")).unwrap();
        assert!(within_budget(&res.adversarial, &x, &cfg));
    }

    #[test]
    fn zero_eps_attacks_return_the_input() {
        let defense = toy_defense(PurifyKind::Ddpm, 3, 23);
        let mut cfg = AttackConfig::new(0.0, Norm::Linf);
        cfg.n_iter = 2;
        cfg.eot = 1;
        let x = Tensor::vector(vec![0.4, 0.6]);
        for method in [AttackMethod::Pgd, AttackMethod::Spsa, AttackMethod::DiffAttack] {
            let res = method
                .run(&x, 0, &defense, &cfg, &StreamRng::new(47, "e0"))
                .unwrap();
            assert_eq!(bits(&res.adversarial), bits(&x), "{}", method.name());
        }
    }

    #[test]
    fn bpda_gradient_ignores_the_chain() {
        // With the identity purifier the BPDA gradient equals the plain
        // classifier gradient; with a real chain it equals the classifier
        // gradient at the purified output, untouched by the chain Jacobian.
        let defense = toy_defense(PurifyKind::Ddpm, 4, 29);
        let cfg = AttackConfig::new(0.1, Norm::Linf);
        let x = Tensor::vector(vec![0.45, 0.55]);
        let rng = StreamRng::new(53, "bpda");
        let mut cfg1 = cfg.clone();
        cfg1.eot = 1;
        let (_, g) = bpda_loss_gradient(&x, 0, &defense, &cfg1, &rng).unwrap();
        let drng = rng.derive("draw=0");
        let (out, _) = purify(&x, &defense.purifier, &defense.eps_model, &drng).unwrap();
        let (_, oracle) = classifier_loss_and_grad(&defense.classifier, &out, 0).unwrap();
        assert_eq!(bits(&g), bits(&oracle));
    }

    #[test]
    fn bpda_equals_pgd_on_identity_purifier() {
        let defense = toy_defense(PurifyKind::Ddpm, 0, 31);
        let mut cfg = AttackConfig::new(0.07, Norm::Linf);
        cfg.n_iter = 5;
        cfg.eot = 2;
        let x = Tensor::vector(vec![0.52, 0.44]);
        let rng = StreamRng::new(59, "bpda-pgd");
        let a = bpda_attack(&x, 1, &defense, &cfg, &rng).unwrap();
        let b = pgd_attack(&x, 1, &defense, &cfg, &rng).unwrap();
        assert_eq!(bits(&a.adversarial), bits(&b.adversarial));
    }

    #[test]
    fn spsa_estimate_correlates_with_analytic_gradient() {
        // Quadratic loss f(x) = |x - c|^2 with known gradient 2(x - c).
        let c = Tensor::vector(vec![0.2, -0.1, 0.4, 0.0]);
        let x = Tensor::vector(vec![0.5, 0.3, -0.2, 0.1]);
        let rng = StreamRng::new(61, "spsa");
        let (_, est) = spsa_gradient(
            |p, _| p.sq_dist(&c),
            &x,
            64,
            1e-3,
            &rng,
        )
        .unwrap();
        let truth = x.sub(&c).unwrap().scale(2.0);
        let cos = est.dot(&truth).unwrap() / (est.l2_norm() * truth.l2_norm());
        assert!(cos > 0.5, "cosine {cos}");
    }

    #[test]
    fn joint_score_rejects_ddpm() {
        let defense = toy_defense(PurifyKind::Ddpm, 3, 37);
        let cfg = AttackConfig::new(0.05, Norm::Linf);
        let x = Tensor::vector(vec![0.5, 0.5]);
        let err = joint_attack(
            JointMode::Score,
            &x,
            0,
            &defense,
            &cfg,
            &StreamRng::new(67, "js"),
        )
        .unwrap_err();
        assert!(err.to_string().contains("score estimator"), "{err}");
    }

    #[test]
    fn joint_score_runs_on_vpsde() {
        let defense = toy_defense(PurifyKind::Vpsde, 3, 37);
        let mut cfg = AttackConfig::new(0.05, Norm::Linf);
        cfg.n_iter = 2;
        cfg.eot = 1;
        let x = Tensor::vector(vec![0.5, 0.5]);
        let res = joint_attack(
            JointMode::Score,
            &x,
            0,
            &defense,
            &cfg,
            &StreamRng::new(67, "js"),
        )
        .unwrap();
        assert!(within_budget(&res.adversarial, &x, &cfg));
    }

    #[test]
    fn adjoint_rejects_ddpm_and_matches_checkpointing_in_the_linear_regime() {
        let x = Tensor::vector(vec![0.45, 0.6]);
        let mut cfg = AttackConfig::new(0.05, Norm::Linf);
        cfg.eot = 1;
        cfg.lambda = 0.0;

        let ddpm = toy_defense(PurifyKind::Ddpm, 3, 41);
        assert!(adjoint_gradient(&x, 0, &ddpm, &cfg, &StreamRng::new(71, "adj")).is_err());

        // Tiny rates and an untrained-but-smooth model: the explicit
        // backward re-integration error is far below 1e-6 relative.
        let schedule = Arc::new(NoiseSchedule::linear(50, 1e-6, 2e-6).unwrap());
        let mut rng = StreamRng::new(43, "defense");
        let eps_model = Arc::new(MlpParams::init(2, &[8], 4, &mut rng).unwrap());
        let classifier = Arc::new(ClassifierParams::init(2, &[8], 2, &mut rng).unwrap());
        let defense = Defense {
            purifier: PurifierConfig::new(PurifyKind::Vpsde, 8, schedule).unwrap(),
            eps_model,
            classifier,
        };
        let rng = StreamRng::new(73, "adj2");
        let g_adj = adjoint_gradient(&x, 0, &defense, &cfg, &rng).unwrap();
        let g_ckpt = eot_gradient(&x, 0, &defense, &cfg, &rng).unwrap();
        let rel = g_adj.sub(&g_ckpt).unwrap().l2_norm() / g_ckpt.l2_norm();
        assert!(rel <= 1e-6, "rel err {rel}");
    }

    #[test]
    fn adjoint_discrepancy_shrinks_under_grid_refinement() {
        let x = Tensor::vector(vec![0.45, 0.6]);
        let mut cfg = AttackConfig::new(0.05, Norm::Linf);
        cfg.eot = 1;
        cfg.lambda = 0.0;
        let mut discrepancies = Vec::new();
        for (t_max, t_star) in [(10usize, 5usize), (20, 10), (40, 20)] {
            // The same continuous rate (T * beta = 0.05) at finer grids; at
            // this rate the drift discretization error dominates the noise
            // interaction and refinement shows clean convergence.
            let beta = 0.05 / t_max as f64;
            let schedule = Arc::new(NoiseSchedule::linear(t_max, beta, beta).unwrap());
            let mut rng = StreamRng::new(47, "defense");
            let eps_model = Arc::new(MlpParams::init(2, &[8], 4, &mut rng).unwrap());
            let classifier = Arc::new(ClassifierParams::init(2, &[8], 2, &mut rng).unwrap());
            let defense = Defense {
                purifier: PurifierConfig::new(PurifyKind::Vpsde, t_star, schedule).unwrap(),
                eps_model,
                classifier,
            };
            let rng = StreamRng::new(79, "refine");
            let g_adj = adjoint_gradient(&x, 0, &defense, &cfg, &rng).unwrap();
            let g_ckpt = eot_gradient(&x, 0, &defense, &cfg, &rng).unwrap();
            discrepancies
                .push(g_adj.sub(&g_ckpt).unwrap().l2_norm() / g_ckpt.l2_norm());
        }
        assert!(
            discrepancies[1] < discrepancies[0] && discrepancies[2] < discrepancies[1],
            "{discrepancies:?}"
        );
    }

    #[test]
    fn robust_accuracy_bounds_and_oracle_cases() {
        let defense = toy_defense(PurifyKind::Ddpm, 3, 53);
        let mut cfg = AttackConfig::new(0.05, Norm::Linf);
        cfg.n_iter = 2;
        cfg.eot = 1;
        let data: Vec<(Tensor, usize)> = (0..6)
            .map(|i| {
                (
                    Tensor::vector(vec![0.2 + 0.1 * i as f64, 0.5]),
                    i % 2,
                )
            })
            .collect();
        let rng = StreamRng::new(83, "ra");
        let ra = robust_accuracy(&data, AttackMethod::Pgd, &defense, &cfg, 3, &rng).unwrap();
        assert!((0.0..=1.0).contains(&ra));

        // eps = 0 attack equals clean accuracy under the same eval streams.
        let mut cfg0 = cfg.clone();
        cfg0.eps = 0.0;
        let ra0 = robust_accuracy(&data, AttackMethod::Pgd, &defense, &cfg0, 3, &rng).unwrap();
        let clean = clean_accuracy(&data, &defense, 3, &rng).unwrap();
        assert_eq!(ra0, clean);
    }

    #[test]
    fn eot_variance_shrinks_with_more_draws() {
        let defense = toy_defense(PurifyKind::Ddpm, 4, 59);
        let x = Tensor::vector(vec![0.5, 0.5]);
        let mut cfg1 = AttackConfig::new(0.1, Norm::Linf);
        cfg1.eot = 1;
        let mut cfg8 = cfg1.clone();
        cfg8.eot = 8;

        let spread = |cfg: &AttackConfig| -> f64 {
            let mut grads = Vec::new();
            for rep in 0..50 {
                let rng = StreamRng::new(1000 + rep, "var");
                grads.push(eot_gradient(&x, 0, &defense, cfg, &rng).unwrap());
            }
            let dim = x.len();
            let mut mean = vec![0.0; dim];
            for g in &grads {
                for (m, v) in mean.iter_mut().zip(g.data()) {
                    *m += v / grads.len() as f64;
                }
            }
            let mut tr = 0.0;
            for g in &grads {
                for (m, v) in mean.iter().zip(g.data()) {
                    tr += (v - m) * (v - m);
                }
            }
            tr / grads.len() as f64
        };
        let v1 = spread(&cfg1);
        let v8 = spread(&cfg8);
        assert!(v8 < v1, "var(eot=8) {v8} !< var(eot=1) {v1}");
    }
}
