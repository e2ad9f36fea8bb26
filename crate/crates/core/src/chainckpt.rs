//! Segment-wise forwarding-backwarding over chains of differentiable
//! stochastic steps.
//!
//! A chain is run once without retaining any graph, storing every
//! intermediate sample and the RNG state of every step. The backward pass
//! then walks the chain from the end: it replays one segment onto a fresh
//! tape (bit-exact, thanks to the captured RNG states), applies one
//! vector-Jacobian product, adds any gradient injected directly at the
//! segment's samples, and releases the tape before moving on. At most one
//! segment graph is ever live, so peak graph memory does not grow with the
//! chain length; only the stored samples do, and those are accounted
//! separately.
//!
//! [`fullgraph_backward`] is the reference path that keeps the whole chain
//! on a single tape. For any chain the two produce bitwise identical
//! gradients: they execute the same primitives in the same order on the same
//! replayed values, and injected gradients are folded in at the same point
//! of the accumulation order in both.

use std::collections::BTreeMap;

pub use crate::autodiff::MemoryMeter;
use crate::autodiff::{NodeRef, Tape};
use crate::error::{CoreError, Result};
use crate::models::MlpParams;
use crate::rng::{RngState, StreamRng};
use crate::tensor::Tensor;

use std::sync::Arc;

/// One differentiable, possibly stochastic step of a chain.
///
/// Implementations must be replay-deterministic: recording with the same
/// input node value and an RNG restored to the same state reproduces the
/// forward output bitwise.
pub trait ChainStep {
    /// Stream label for this step's noise draws; unique within a chain.
    fn label(&self) -> String;

    /// Records the step on `tape`, reading noise from `rng`.
    fn record(&self, tape: &mut Tape, x: NodeRef, rng: &mut StreamRng) -> Result<NodeRef>;

    /// Plain forward evaluation (no graph retained beyond the call).
    fn apply(&self, x: &Tensor, rng: &mut StreamRng) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xr = tape.shared_constant(x);
        let out = self.record(&mut tape, xr, rng)?;
        Ok(tape.value(out).clone())
    }
}

/// Direct gradient contributions keyed by sample index `0..=T`. Entry `j` is
/// added to the accumulated gradient at sample `j` when the backward sweep
/// reaches it.
pub type InjectMap = BTreeMap<usize, Tensor>;

/// A recorded chain: the steps, every intermediate sample `x_0..x_T`, and
/// the RNG state captured before each step ran.
pub struct ChainRecord {
    steps: Vec<Box<dyn ChainStep>>,
    samples: Vec<Tensor>,
    states: Vec<RngState>,
}

impl ChainRecord {
    /// Chain of zero steps; backward passes reduce to the seed gradient.
    pub fn trivial(x0: Tensor) -> Self {
        ChainRecord {
            steps: Vec::new(),
            samples: vec![x0],
            states: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn samples(&self) -> &[Tensor] {
        &self.samples
    }

    pub fn sample(&self, i: usize) -> &Tensor {
        &self.samples[i]
    }

    pub fn output(&self) -> &Tensor {
        self.samples.last().expect("samples is never empty")
    }

    pub fn states(&self) -> &[RngState] {
        &self.states
    }

    /// Logical bytes held by the stored samples.
    pub fn sample_bytes(&self) -> usize {
        self.samples.iter().map(Tensor::byte_size).sum()
    }
}

/// Runs the chain forward without retaining any tape, storing every
/// intermediate sample and per-step RNG state. Each step draws from a stream
/// derived from `rng` by the step's label.
pub fn forward_record(
    steps: Vec<Box<dyn ChainStep>>,
    x0: &Tensor,
    rng: &StreamRng,
) -> Result<ChainRecord> {
    if steps.is_empty() {
        return Err(CoreError::Config("forward_record needs at least one step".into()));
    }
    let states: Vec<RngState> = steps
        .iter()
        .map(|s| rng.derive(&s.label()).state())
        .collect();
    forward_record_with_states(steps, x0, states)
}

/// As [`forward_record`] but replaying explicit, previously captured RNG
/// states — the hook that lets a caller freeze the noise path.
pub fn forward_record_with_states(
    steps: Vec<Box<dyn ChainStep>>,
    x0: &Tensor,
    states: Vec<RngState>,
) -> Result<ChainRecord> {
    if steps.len() != states.len() {
        return Err(CoreError::Config(format!(
            "{} steps but {} rng states",
            steps.len(),
            states.len()
        )));
    }
    let mut samples = Vec::with_capacity(steps.len() + 1);
    samples.push(x0.clone());
    for (i, step) in steps.iter().enumerate() {
        let mut srng = StreamRng::from_state(states[i]);
        let next = step
            .apply(&samples[i], &mut srng)
            .map_err(|e| step_error(i, e))?;
        samples.push(next);
    }
    Ok(ChainRecord {
        steps,
        samples,
        states,
    })
}

fn step_error(i: usize, e: CoreError) -> CoreError {
    CoreError::domain(&format!("chain step {i}"), e.to_string())
}

/// Segment-wise backward with segment size 1 (replay one step at a time).
pub fn segmentwise_backward(
    record: &ChainRecord,
    seed_grad: &Tensor,
    inject: &InjectMap,
    meter: &MemoryMeter,
) -> Result<Tensor> {
    segmentwise_backward_segmented(record, seed_grad, inject, meter, 1)
}

/// Segment-wise backward replaying `segment_size` steps per tape. Larger
/// segments trade peak graph memory for fewer replays.
pub fn segmentwise_backward_segmented(
    record: &ChainRecord,
    seed_grad: &Tensor,
    inject: &InjectMap,
    meter: &MemoryMeter,
    segment_size: usize,
) -> Result<Tensor> {
    if segment_size == 0 {
        return Err(CoreError::Config("segment size must be at least 1".into()));
    }
    let n = record.len();
    check_inject_shapes(record, inject)?;
    let mut g = seed_with_injection(record, seed_grad, inject, n)?;

    let mut hi = n;
    while hi > 0 {
        let lo = hi.saturating_sub(segment_size);
        let mut tape = Tape::with_meter(meter);
        let leaf = tape.var(record.samples[lo].clone());
        let mut node_at = Vec::with_capacity(hi - lo + 1);
        node_at.push(leaf);
        let mut cur = leaf;
        for i in lo..hi {
            let mut srng = StreamRng::from_state(record.states[i]);
            cur = record.steps[i]
                .record(&mut tape, cur, &mut srng)
                .map_err(|e| step_error(i, e))?;
            node_at.push(cur);
        }
        let mut seeds = vec![(cur, g)];
        for j in lo + 1..hi {
            if let Some(direct) = inject.get(&j) {
                seeds.push((node_at[j - lo], direct.clone()));
            }
        }
        let grads = tape.backward_seeded(&seeds)?;
        g = grads
            .get(leaf)
            .expect("segment leaf is a variable")
            .clone();
        tape.release();
        if let Some(direct) = inject.get(&lo) {
            g = g.add(direct)?;
        }
        hi = lo;
    }
    Ok(g)
}

/// Reference backward that builds the whole chain on one tape. Same
/// contract as [`segmentwise_backward`]; retains every segment's graph.
pub fn fullgraph_backward(
    record: &ChainRecord,
    seed_grad: &Tensor,
    inject: &InjectMap,
    meter: &MemoryMeter,
) -> Result<Tensor> {
    let n = record.len();
    check_inject_shapes(record, inject)?;
    if n == 0 {
        return seed_with_injection(record, seed_grad, inject, 0);
    }
    let mut tape = Tape::with_meter(meter);
    let leaf = tape.var(record.samples[0].clone());
    let mut node_at = Vec::with_capacity(n + 1);
    node_at.push(leaf);
    let mut cur = leaf;
    for i in 0..n {
        let mut srng = StreamRng::from_state(record.states[i]);
        cur = record.steps[i]
            .record(&mut tape, cur, &mut srng)
            .map_err(|e| step_error(i, e))?;
        node_at.push(cur);
    }
    // Injections fire at visit time (after all downstream contributions),
    // which reproduces the segmentwise accumulation order exactly. The
    // ascending map order puts a final-sample injection after the seed.
    let mut seeds = vec![(cur, seed_grad.clone())];
    for (&j, direct) in inject.iter() {
        seeds.push((node_at[j], direct.clone()));
    }
    let grads = tape.backward_seeded(&seeds)?;
    let g = grads.get(leaf).expect("chain leaf is a variable").clone();
    tape.release();
    Ok(g)
}

/// Seed gradient at the final sample, with a final-sample injection folded
/// in after the seed.
fn seed_with_injection(
    record: &ChainRecord,
    seed_grad: &Tensor,
    inject: &InjectMap,
    at: usize,
) -> Result<Tensor> {
    let expect = record.samples[at].shape();
    if seed_grad.shape() != expect {
        return Err(CoreError::shape(
            "chain backward",
            format!("seed shape {:?} vs output shape {:?}", seed_grad.shape(), expect),
        ));
    }
    let mut g = seed_grad.clone();
    if let Some(direct) = inject.get(&at) {
        g = g.add(direct)?;
    }
    Ok(g)
}

fn check_inject_shapes(record: &ChainRecord, inject: &InjectMap) -> Result<()> {
    for (&j, t) in inject.iter() {
        if j >= record.samples.len() {
            return Err(CoreError::Config(format!(
                "injection at sample {j} is outside the chain (len {})",
                record.len()
            )));
        }
        if t.shape() != record.samples[j].shape() {
            return Err(CoreError::shape(
                &format!("injection at step {j}"),
                format!("{:?} vs sample {:?}", t.shape(), record.samples[j].shape()),
            ));
        }
    }
    Ok(())
}

/// Peak tape-node bytes observed by `meter` since its last reset. Stored
/// chain samples are accounted separately (see [`ChainRecord::sample_bytes`]).
pub fn peak_live_bytes(meter: &MemoryMeter) -> usize {
    meter.peak_bytes()
}

/// Generic stochastic MLP step `x' = x + 0.1 * net(x, t) + noise * z`,
/// used by equivalence sweeps and memory benchmarks.
pub struct MlpChainStep {
    pub params: Arc<MlpParams>,
    pub t: f64,
    pub noise: f64,
    pub index: usize,
}

impl ChainStep for MlpChainStep {
    fn label(&self) -> String {
        format!("mlp/step={}", self.index)
    }

    fn record(&self, tape: &mut Tape, x: NodeRef, rng: &mut StreamRng) -> Result<NodeRef> {
        let dim = self.params.data_dim();
        let z = Tensor::vector(rng.fill_normal(dim));
        let handle = self.params.place_on(tape, false);
        let net = handle.eps_theta(tape, x, self.t)?;
        let scaled = tape.scale(net, 0.1)?;
        let drifted = tape.add(x, scaled)?;
        let noise = tape.constant(z.scale(self.noise));
        tape.add(drifted, noise)
    }
}
