//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records primitives eagerly (forward values are computed at
//! record time) and replays them in reverse for vector-Jacobian products.
//! Tapes have explicit lifetimes: [`Tape::release`] frees node storage and
//! returns the accounted bytes to the attached [`MemoryMeter`], which is what
//! lets a caller build and discard one small graph per chain segment while
//! observing peak graph memory.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use crate::error::{CoreError, Result};
use crate::tensor::Tensor;

/// Reference to a node on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct NodeRef(pub usize);

/// Differentiable primitives. Elementwise ops require equal shapes; matrix
/// multiply accepts `[m,k]x[k,n]` and the vector form `[k]x[k,n]`; `BiasAdd`
/// broadcasts a `[c]` bias over the rows of an `[r,c]` matrix (or adds two
/// `[c]` vectors). `CrossEntropy` fuses log-softmax with the label pick for
/// numerical stability.
#[derive(Debug, Clone)]
pub enum Op {
    Var,
    Const,
    Add(NodeRef, NodeRef),
    Sub(NodeRef, NodeRef),
    Mul(NodeRef, NodeRef),
    Scale(NodeRef, f64),
    MatMul(NodeRef, NodeRef),
    BiasAdd(NodeRef, NodeRef),
    Tanh(NodeRef),
    Relu(NodeRef),
    Exp(NodeRef),
    Log(NodeRef),
    Square(NodeRef),
    Sqrt(NodeRef),
    Sum(NodeRef),
    Mean(NodeRef),
    Concat(NodeRef, NodeRef),
    CrossEntropy(NodeRef, usize),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Var => "var",
            Op::Const => "const",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::MatMul(..) => "matmul",
            Op::BiasAdd(..) => "bias_add",
            Op::Tanh(..) => "tanh",
            Op::Relu(..) => "relu",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Square(..) => "square",
            Op::Sqrt(..) => "sqrt",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Concat(..) => "concat",
            Op::CrossEntropy(..) => "cross_entropy",
        }
    }
}

struct TapeNode {
    op: Op,
    value: Tensor,
}

/// Shared byte counter for live tape nodes. Counts node value storage only;
/// stored chain samples are accounted separately by their owners.
#[derive(Clone)]
pub struct MemoryMeter {
    inner: Arc<MeterInner>,
}

struct MeterInner {
    current: AtomicUsize,
    peak: AtomicUsize,
}

impl MemoryMeter {
    pub fn new() -> Self {
        MemoryMeter {
            inner: Arc::new(MeterInner {
                current: AtomicUsize::new(0),
                peak: AtomicUsize::new(0),
            }),
        }
    }

    fn alloc(&self, bytes: usize) {
        let cur = self.inner.current.fetch_add(bytes, Ordering::Relaxed) + bytes;
        self.inner.peak.fetch_max(cur, Ordering::Relaxed);
    }

    fn free(&self, bytes: usize) {
        self.inner.current.fetch_sub(bytes, Ordering::Relaxed);
    }

    pub fn current_bytes(&self) -> usize {
        self.inner.current.load(Ordering::Relaxed)
    }

    pub fn peak_bytes(&self) -> usize {
        self.inner.peak.load(Ordering::Relaxed)
    }

    /// Resets the peak to the current level.
    pub fn reset_peak(&self) {
        self.inner
            .peak
            .store(self.current_bytes(), Ordering::Relaxed);
    }
}

impl Default for MemoryMeter {
    fn default() -> Self {
        MemoryMeter::new()
    }
}

/// Gradients keyed by tape node id. Holds one entry per variable leaf of the
/// backward pass that produced it; each gradient has the shape of the node's
/// forward value.
#[derive(Debug, Clone, Default)]
pub struct GradMap {
    entries: BTreeMap<usize, Tensor>,
}

impl GradMap {
    pub fn get(&self, node: NodeRef) -> Option<&Tensor> {
        self.entries.get(&node.0)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (NodeRef, &Tensor)> {
        self.entries.iter().map(|(&id, t)| (NodeRef(id), t))
    }
}

/// A recording of primitives with single ownership and explicit release.
pub struct Tape {
    nodes: Vec<TapeNode>,
    vars: Vec<usize>,
    live: bool,
    bytes: usize,
    meter: MemoryMeter,
}

impl Tape {
    /// Tape with a private meter.
    pub fn new() -> Self {
        Tape::with_meter(&MemoryMeter::new())
    }

    /// Tape whose node bytes are accounted on a shared meter.
    pub fn with_meter(meter: &MemoryMeter) -> Self {
        Tape {
            nodes: Vec::new(),
            vars: Vec::new(),
            live: true,
            bytes: 0,
            meter: meter.clone(),
        }
    }

    pub fn is_live(&self) -> bool {
        self.live
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Bytes currently accounted to this tape's nodes.
    pub fn live_bytes(&self) -> usize {
        self.bytes
    }

    /// Leaf tensor that participates in gradients.
    pub fn var(&mut self, value: Tensor) -> NodeRef {
        let r = self.push(Op::Var, value, true);
        self.vars.push(r.0);
        r
    }

    /// Leaf tensor treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> NodeRef {
        self.push(Op::Const, value, true)
    }

    /// Constant whose storage stays shared with the caller (model parameters
    /// placed on a segment tape, stored chain samples). Accounts zero graph
    /// bytes: the tape allocates nothing for it.
    pub fn shared_constant(&mut self, value: &Tensor) -> NodeRef {
        self.push(Op::Const, value.clone(), false)
    }

    fn push(&mut self, op: Op, value: Tensor, account: bool) -> NodeRef {
        if account {
            let bytes = value.byte_size();
            self.bytes += bytes;
            self.meter.alloc(bytes);
        }
        self.nodes.push(TapeNode { op, value });
        NodeRef(self.nodes.len() - 1)
    }

    pub fn value(&self, node: NodeRef) -> &Tensor {
        &self.nodes[node.0].value
    }

    fn check_ref(&self, r: NodeRef) -> Result<()> {
        if r.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(CoreError::NotOnTape { node: r.0 })
        }
    }

    /// Records a primitive: validates shapes, evaluates the forward value
    /// eagerly, and appends a node. The returned reference is usable as an
    /// input to later primitives.
    pub fn record(&mut self, op: Op) -> Result<NodeRef> {
        if !self.live {
            return Err(CoreError::DeadTape);
        }
        let value = self.eval(&op)?;
        if !value.all_finite() {
            return Err(CoreError::domain(
                op.name(),
                "non-finite value produced".to_string(),
            ));
        }
        Ok(self.push(op, value, true))
    }

    fn eval(&self, op: &Op) -> Result<Tensor> {
        let v = |r: NodeRef| -> Result<&Tensor> {
            self.check_ref(r)?;
            Ok(&self.nodes[r.0].value)
        };
        match *op {
            Op::Var | Op::Const => Err(CoreError::Config(
                "leaves are created with var()/constant(), not record()".into(),
            )),
            Op::Add(a, b) => v(a)?.add(v(b)?),
            Op::Sub(a, b) => v(a)?.sub(v(b)?),
            Op::Mul(a, b) => v(a)?.mul(v(b)?),
            Op::Scale(a, k) => Ok(v(a)?.scale(k)),
            Op::MatMul(a, b) => matmul_forward(v(a)?, v(b)?),
            Op::BiasAdd(a, b) => bias_add_forward(v(a)?, v(b)?),
            Op::Tanh(a) => Ok(v(a)?.map(f64::tanh)),
            Op::Relu(a) => Ok(v(a)?.map(|x| if x > 0.0 { x } else { 0.0 })),
            Op::Exp(a) => Ok(v(a)?.map(f64::exp)),
            Op::Log(a) => {
                let x = v(a)?;
                if x.data().iter().any(|&e| e <= 0.0) {
                    return Err(CoreError::domain("log", "nonpositive input"));
                }
                Ok(x.map(f64::ln))
            }
            Op::Square(a) => Ok(v(a)?.map(|x| x * x)),
            Op::Sqrt(a) => {
                let x = v(a)?;
                if x.data().iter().any(|&e| e < 0.0) {
                    return Err(CoreError::domain("sqrt", "negative input"));
                }
                Ok(x.map(f64::sqrt))
            }
            Op::Sum(a) => Ok(Tensor::scalar(v(a)?.sum_values())),
            Op::Mean(a) => {
                let x = v(a)?;
                Ok(Tensor::scalar(x.sum_values() / x.len() as f64))
            }
            Op::Concat(a, b) => {
                let (xa, xb) = (v(a)?, v(b)?);
                if xa.shape().len() != 1 || xb.shape().len() != 1 {
                    return Err(CoreError::shape(
                        "concat",
                        format!("rank-1 only, got {:?} and {:?}", xa.shape(), xb.shape()),
                    ));
                }
                let mut data = xa.data().to_vec();
                data.extend_from_slice(xb.data());
                Ok(Tensor::vector(data))
            }
            Op::CrossEntropy(a, y) => {
                let logits = v(a)?;
                if logits.shape().len() != 1 {
                    return Err(CoreError::shape(
                        "cross_entropy",
                        format!("rank-1 logits required, got {:?}", logits.shape()),
                    ));
                }
                if y >= logits.len() {
                    return Err(CoreError::domain(
                        "cross_entropy",
                        format!("label {} out of range for {} classes", y, logits.len()),
                    ));
                }
                Ok(Tensor::scalar(cross_entropy_value(logits.data(), y)))
            }
        }
    }

    // Convenience wrappers over record().

    pub fn add(&mut self, a: NodeRef, b: NodeRef) -> Result<NodeRef> {
        self.record(Op::Add(a, b))
    }
    pub fn sub(&mut self, a: NodeRef, b: NodeRef) -> Result<NodeRef> {
        self.record(Op::Sub(a, b))
    }
    pub fn mul(&mut self, a: NodeRef, b: NodeRef) -> Result<NodeRef> {
        self.record(Op::Mul(a, b))
    }
    pub fn scale(&mut self, a: NodeRef, k: f64) -> Result<NodeRef> {
        self.record(Op::Scale(a, k))
    }
    pub fn matmul(&mut self, a: NodeRef, b: NodeRef) -> Result<NodeRef> {
        self.record(Op::MatMul(a, b))
    }
    pub fn bias_add(&mut self, a: NodeRef, b: NodeRef) -> Result<NodeRef> {
        self.record(Op::BiasAdd(a, b))
    }
    pub fn tanh(&mut self, a: NodeRef) -> Result<NodeRef> {
        self.record(Op::Tanh(a))
    }
    pub fn relu(&mut self, a: NodeRef) -> Result<NodeRef> {
        self.record(Op::Relu(a))
    }
    pub fn exp(&mut self, a: NodeRef) -> Result<NodeRef> {
        self.record(Op::Exp(a))
    }
    pub fn log(&mut self, a: NodeRef) -> Result<NodeRef> {
        self.record(Op::Log(a))
    }
    pub fn square(&mut self, a: NodeRef) -> Result<NodeRef> {
        self.record(Op::Square(a))
    }
    pub fn sqrt(&mut self, a: NodeRef) -> Result<NodeRef> {
        self.record(Op::Sqrt(a))
    }
    pub fn sum(&mut self, a: NodeRef) -> Result<NodeRef> {
        self.record(Op::Sum(a))
    }
    pub fn mean(&mut self, a: NodeRef) -> Result<NodeRef> {
        self.record(Op::Mean(a))
    }
    pub fn concat(&mut self, a: NodeRef, b: NodeRef) -> Result<NodeRef> {
        self.record(Op::Concat(a, b))
    }
    pub fn cross_entropy(&mut self, logits: NodeRef, y: usize) -> Result<NodeRef> {
        self.record(Op::CrossEntropy(logits, y))
    }

    /// Vector-Jacobian products in reverse topological order, seeded at
    /// `root` with `seed`. Returns gradients for every variable leaf
    /// (zeros where the root does not depend on the variable).
    pub fn backward(&self, root: NodeRef, seed: Tensor) -> Result<GradMap> {
        self.backward_seeded(&[(root, seed)])
    }

    /// Backward pass with gradient injected at several nodes. Each seed is
    /// added to its node's accumulated gradient when the reverse sweep
    /// reaches that node, after all downstream contributions and before the
    /// node's own VJP fires; this ordering is what makes segment-replayed
    /// backward passes bitwise identical to whole-graph ones.
    pub fn backward_seeded(&self, seeds: &[(NodeRef, Tensor)]) -> Result<GradMap> {
        for (r, seed) in seeds {
            self.check_ref(*r)?;
            if seed.shape() != self.nodes[r.0].value.shape() {
                return Err(CoreError::shape(
                    "backward",
                    format!(
                        "seed shape {:?} vs node shape {:?}",
                        seed.shape(),
                        self.nodes[r.0].value.shape()
                    ),
                ));
            }
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        for i in (0..self.nodes.len()).rev() {
            for (r, seed) in seeds {
                if r.0 == i {
                    accumulate(&mut grads[i], seed)?;
                }
            }
            let Some(g) = grads[i].take() else { continue };
            self.apply_vjp(i, &g, &mut grads)?;
            // Only variable leaves need their gradient kept around.
            if matches!(self.nodes[i].op, Op::Var) {
                grads[i] = Some(g);
            }
        }
        let mut map = GradMap::default();
        for &id in &self.vars {
            let g = grads[id]
                .take()
                .unwrap_or_else(|| Tensor::zeros_like(&self.nodes[id].value));
            map.entries.insert(id, g);
        }
        Ok(map)
    }

    fn apply_vjp(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let val = |r: NodeRef| &self.nodes[r.0].value;
        match self.nodes[i].op {
            Op::Var | Op::Const => {}
            Op::Add(a, b) => {
                accumulate(&mut grads[a.0], g)?;
                accumulate(&mut grads[b.0], g)?;
            }
            Op::Sub(a, b) => {
                accumulate(&mut grads[a.0], g)?;
                accumulate(&mut grads[b.0], &g.scale(-1.0))?;
            }
            Op::Mul(a, b) => {
                accumulate(&mut grads[a.0], &g.mul(val(b))?)?;
                accumulate(&mut grads[b.0], &g.mul(val(a))?)?;
            }
            Op::Scale(a, k) => accumulate(&mut grads[a.0], &g.scale(k))?,
            Op::MatMul(a, b) => {
                let (ga, gb) = matmul_backward(val(a), val(b), g)?;
                accumulate(&mut grads[a.0], &ga)?;
                accumulate(&mut grads[b.0], &gb)?;
            }
            Op::BiasAdd(a, b) => {
                let gbias = bias_backward(val(a), val(b), g)?;
                accumulate(&mut grads[a.0], g)?;
                accumulate(&mut grads[b.0], &gbias)?;
            }
            Op::Tanh(a) => {
                let y = &self.nodes[i].value;
                let ga = g.zip_map(y, "tanh_vjp", |gi, yi| gi * (1.0 - yi * yi))?;
                accumulate(&mut grads[a.0], &ga)?;
            }
            Op::Relu(a) => {
                let x = val(a);
                let ga = g.zip_map(x, "relu_vjp", |gi, xi| if xi > 0.0 { gi } else { 0.0 })?;
                accumulate(&mut grads[a.0], &ga)?;
            }
            Op::Exp(a) => {
                let y = &self.nodes[i].value;
                accumulate(&mut grads[a.0], &g.mul(y)?)?;
            }
            Op::Log(a) => {
                let x = val(a);
                let ga = g.zip_map(x, "log_vjp", |gi, xi| gi / xi)?;
                accumulate(&mut grads[a.0], &ga)?;
            }
            Op::Square(a) => {
                let x = val(a);
                let ga = g.zip_map(x, "square_vjp", |gi, xi| 2.0 * xi * gi)?;
                accumulate(&mut grads[a.0], &ga)?;
            }
            Op::Sqrt(a) => {
                let y = &self.nodes[i].value;
                let ga = g.zip_map(y, "sqrt_vjp", |gi, yi| gi / (2.0 * yi))?;
                accumulate(&mut grads[a.0], &ga)?;
            }
            Op::Sum(a) => {
                let gs = g.as_scalar()?;
                let ga = val(a).map(|_| gs);
                accumulate(&mut grads[a.0], &ga)?;
            }
            Op::Mean(a) => {
                let x = val(a);
                let gs = g.as_scalar()? / x.len() as f64;
                let ga = x.map(|_| gs);
                accumulate(&mut grads[a.0], &ga)?;
            }
            Op::Concat(a, b) => {
                let la = val(a).len();
                let ga = Tensor::vector(g.data()[..la].to_vec());
                let gb = Tensor::vector(g.data()[la..].to_vec());
                accumulate(&mut grads[a.0], &ga)?;
                accumulate(&mut grads[b.0], &gb)?;
            }
            Op::CrossEntropy(a, y) => {
                let gs = g.as_scalar()?;
                let sm = softmax(val(a).data());
                let mut glogits = sm;
                glogits[y] -= 1.0;
                for e in glogits.iter_mut() {
                    *e *= gs;
                }
                accumulate(&mut grads[a.0], &Tensor::vector(glogits))?;
            }
        }
        Ok(())
    }

    /// Frees all node storage and marks the tape dead. Idempotent: releasing
    /// twice (or releasing an empty tape) is a no-op.
    pub fn release(&mut self) {
        if !self.live && self.nodes.is_empty() {
            return;
        }
        self.meter.free(self.bytes);
        self.bytes = 0;
        self.nodes.clear();
        self.nodes.shrink_to_fit();
        self.vars.clear();
        self.live = false;
    }
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

impl Drop for Tape {
    fn drop(&mut self) {
        self.release();
    }
}

fn accumulate(slot: &mut Option<Tensor>, contribution: &Tensor) -> Result<()> {
    match slot {
        Some(existing) => {
            *existing = existing.add(contribution)?;
        }
        None => *slot = Some(contribution.clone()),
    }
    Ok(())
}

/// Four-accumulator dot product; a fixed summation order keeps results
/// reproducible while letting the backend pipeline the multiplies.
#[inline]
pub(crate) fn dot4(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len();
    let chunks = n / 4;
    let (mut s0, mut s1, mut s2, mut s3) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for i in 0..chunks {
        let j = i * 4;
        s0 += a[j] * b[j];
        s1 += a[j + 1] * b[j + 1];
        s2 += a[j + 2] * b[j + 2];
        s3 += a[j + 3] * b[j + 3];
    }
    let mut s = (s0 + s1) + (s2 + s3);
    for j in chunks * 4..n {
        s += a[j] * b[j];
    }
    s
}

fn matmul_forward(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    match (a.shape(), b.shape()) {
        ([m, k], [k2, n]) if k == k2 => {
            let (m, k, n) = (*m, *k, *n);
            let mut out = vec![0.0; m * n];
            for i in 0..m {
                let row = &a.data()[i * k..(i + 1) * k];
                let orow = &mut out[i * n..(i + 1) * n];
                for (p, &ap) in row.iter().enumerate() {
                    let brow = &b.data()[p * n..(p + 1) * n];
                    for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                        *o += ap * bv;
                    }
                }
            }
            Tensor::matrix(m, n, out)
        }
        ([k], [k2, n]) if k == k2 => {
            let (k, n) = (*k, *n);
            let mut out = vec![0.0; n];
            for (p, &ap) in a.data().iter().enumerate().take(k) {
                let brow = &b.data()[p * n..(p + 1) * n];
                for (o, &bv) in out.iter_mut().zip(brow.iter()) {
                    *o += ap * bv;
                }
            }
            Ok(Tensor::vector(out))
        }
        _ => Err(CoreError::shape(
            "matmul",
            format!("{:?} x {:?}", a.shape(), b.shape()),
        )),
    }
}

fn matmul_backward(a: &Tensor, b: &Tensor, g: &Tensor) -> Result<(Tensor, Tensor)> {
    match (a.shape(), b.shape()) {
        ([m, k], [_, n]) => {
            let (m, k, n) = (*m, *k, *n);
            // ga = g . b^T
            let mut ga = vec![0.0; m * k];
            for i in 0..m {
                let grow = &g.data()[i * n..(i + 1) * n];
                for p in 0..k {
                    ga[i * k + p] = dot4(&b.data()[p * n..(p + 1) * n], grow);
                }
            }
            // gb = a^T . g
            let mut gb = vec![0.0; k * n];
            for i in 0..m {
                let grow = &g.data()[i * n..(i + 1) * n];
                let arow = &a.data()[i * k..(i + 1) * k];
                for (p, &ap) in arow.iter().enumerate() {
                    let out = &mut gb[p * n..(p + 1) * n];
                    for (o, &gv) in out.iter_mut().zip(grow.iter()) {
                        *o += ap * gv;
                    }
                }
            }
            Ok((Tensor::matrix(m, k, ga)?, Tensor::matrix(k, n, gb)?))
        }
        ([k], [_, n]) => {
            let (k, n) = (*k, *n);
            let mut ga = vec![0.0; k];
            for (p, gp) in ga.iter_mut().enumerate() {
                *gp = dot4(&b.data()[p * n..(p + 1) * n], g.data());
            }
            let mut gb = vec![0.0; k * n];
            for (p, &ap) in a.data().iter().enumerate() {
                let out = &mut gb[p * n..(p + 1) * n];
                for (o, &gv) in out.iter_mut().zip(g.data().iter()) {
                    *o = ap * gv;
                }
            }
            Ok((Tensor::vector(ga), Tensor::matrix(k, n, gb)?))
        }
        _ => unreachable!("validated at record time"),
    }
}

fn bias_add_forward(a: &Tensor, bias: &Tensor) -> Result<Tensor> {
    match (a.shape(), bias.shape()) {
        ([r, c], [c2]) if c == c2 => {
            let (r, c) = (*r, *c);
            let mut out = a.data().to_vec();
            for i in 0..r {
                for j in 0..c {
                    out[i * c + j] += bias.data()[j];
                }
            }
            Tensor::matrix(r, c, out)
        }
        ([c], [c2]) if c == c2 => a.add(bias),
        _ => Err(CoreError::shape(
            "bias_add",
            format!("{:?} + {:?}", a.shape(), bias.shape()),
        )),
    }
}

fn bias_backward(a: &Tensor, bias: &Tensor, g: &Tensor) -> Result<Tensor> {
    match (a.shape(), bias.shape()) {
        ([r, c], [_]) => {
            let (r, c) = (*r, *c);
            let mut gb = vec![0.0; c];
            for i in 0..r {
                for (j, gbj) in gb.iter_mut().enumerate() {
                    *gbj += g.data()[i * c + j];
                }
            }
            Ok(Tensor::vector(gb))
        }
        ([_], [_]) => Ok(g.clone()),
        _ => unreachable!("validated at record time"),
    }
}

pub(crate) fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

pub(crate) fn cross_entropy_value(logits: &[f64], y: usize) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|&l| (l - m).exp()).sum::<f64>().ln();
    lse - logits[y]
}

/// Central finite differences `(f(x + h e_i) - f(x - h e_i)) / 2h` per
/// coordinate. The independent oracle for every gradient in the test suites;
/// `f` must be deterministic for a fixed noise plan.
pub fn finite_diff_grad<F>(mut f: F, x: &Tensor, h: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if h <= 0.0 {
        return Err(CoreError::Config("finite_diff_grad requires h > 0".into()));
    }
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.data().to_vec();
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let fp = f(&Tensor::new(x.shape().to_vec(), probe.clone())?)?;
        probe[i] = orig - h;
        let fm = f(&Tensor::new(x.shape().to_vec(), probe.clone())?)?;
        probe[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(CoreError::domain(
                "finite_diff_grad",
                format!("non-finite objective at coordinate {i}"),
            ));
        }
        grad[i] = (fp - fm) / (2.0 * h);
    }
    Tensor::new(x.shape().to_vec(), grad)
}
