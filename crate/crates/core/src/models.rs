//! Small trainable networks: the noise predictor used by the samplers and
//! the downstream classifier, plus the Adam optimizer that trains them.
//!
//! Both networks are plain MLPs with tanh activations. The noise predictor
//! takes `(x, t)` by concatenating a sinusoidal time embedding onto `x`.

use crate::autodiff::{GradMap, NodeRef, Tape};
use crate::error::{CoreError, Result};
use crate::rng::StreamRng;
use crate::tensor::Tensor;

/// Sinusoidal features `[sin(t/10000^(2i/dim)), ..., cos(...)]`, sines first.
pub fn time_embed(t: f64, dim: usize) -> Result<Tensor> {
    if dim == 0 || dim % 2 != 0 {
        return Err(CoreError::Config(format!(
            "time embedding size must be a positive even number, got {dim}"
        )));
    }
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = 10000f64.powf(-2.0 * i as f64 / dim as f64);
        out[i] = (t * freq).sin();
        out[half + i] = (t * freq).cos();
    }
    Ok(Tensor::vector(out))
}

fn init_layers(dims: &[usize], rng: &mut StreamRng) -> (Vec<Tensor>, Vec<Tensor>) {
    let mut weights = Vec::new();
    let mut biases = Vec::new();
    for (idx, pair) in dims.windows(2).enumerate() {
        let (fan_in, fan_out) = (pair[0], pair[1]);
        let std = 1.0 / (fan_in as f64).sqrt();
        let mut wrng = rng.derive(&format!("layer={idx}/w"));
        let data: Vec<f64> = (0..fan_in * fan_out).map(|_| wrng.normal() * std).collect();
        weights.push(Tensor::matrix(fan_in, fan_out, data).expect("dims consistent"));
        biases.push(Tensor::vector(vec![0.0; fan_out]));
    }
    (weights, biases)
}

/// Noise predictor parameters. Input width is `data_dim + time_embed_dim`,
/// output width is `data_dim`. The score form is obtained everywhere by the
/// single rescaling `s(x,t) = -eps(x,t)/sqrt(1 - alpha_bar_t)`; see
/// [`crate::diffusion::score_scale`].
#[derive(Debug, Clone)]
pub struct MlpParams {
    pub layer_dims: Vec<usize>,
    pub weights: Vec<Tensor>,
    pub biases: Vec<Tensor>,
    pub time_embed_dim: usize,
}

impl MlpParams {
    pub const DEFAULT_HIDDEN: [usize; 3] = [128, 128, 128];

    pub fn init(
        data_dim: usize,
        hidden: &[usize],
        time_embed_dim: usize,
        rng: &mut StreamRng,
    ) -> Result<Self> {
        if time_embed_dim == 0 || time_embed_dim % 2 != 0 {
            return Err(CoreError::Config(format!(
                "time embedding size must be a positive even number, got {time_embed_dim}"
            )));
        }
        let mut dims = vec![data_dim + time_embed_dim];
        dims.extend_from_slice(hidden);
        dims.push(data_dim);
        let (weights, biases) = init_layers(&dims, rng);
        Ok(MlpParams {
            layer_dims: dims,
            weights,
            biases,
            time_embed_dim,
        })
    }

    /// All-zero parameters; the predictor is identically zero.
    pub fn zeros(data_dim: usize, hidden: &[usize], time_embed_dim: usize) -> Result<Self> {
        let mut p = MlpParams::init(data_dim, hidden, time_embed_dim, &mut StreamRng::new(0, "z"))?;
        for w in p.weights.iter_mut() {
            *w = Tensor::zeros_like(w);
        }
        Ok(p)
    }

    pub fn data_dim(&self) -> usize {
        self.layer_dims[0] - self.time_embed_dim
    }

    /// Parameters in update order: `w0, b0, w1, b1, ...`.
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.weights
            .iter_mut()
            .zip(self.biases.iter_mut())
            .flat_map(|(w, b)| [w, b])
            .collect()
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.weights
            .iter()
            .zip(self.biases.iter())
            .flat_map(|(w, b)| [w, b])
            .collect()
    }

    /// Places the parameters on a tape and returns the handle used to run
    /// forward passes against them.
    pub fn place_on(&self, tape: &mut Tape, trainable: bool) -> MlpOnTape {
        MlpOnTape {
            layers: place_layers(tape, &self.weights, &self.biases, trainable),
            time_embed_dim: self.time_embed_dim,
        }
    }

    /// Noise prediction without any gradient bookkeeping.
    pub fn eps_theta(&self, x: &Tensor, t: f64) -> Result<Tensor> {
        let mut tape = Tape::new();
        let handle = self.place_on(&mut tape, false);
        let xr = tape.constant(x.clone());
        let out = handle.eps_theta(&mut tape, xr, t)?;
        Ok(tape.value(out).clone())
    }
}

/// Classifier parameters mapping a data point to `num_classes` logits.
#[derive(Debug, Clone)]
pub struct ClassifierParams {
    pub layer_dims: Vec<usize>,
    pub weights: Vec<Tensor>,
    pub biases: Vec<Tensor>,
    pub num_classes: usize,
}

impl ClassifierParams {
    pub fn init(
        data_dim: usize,
        hidden: &[usize],
        num_classes: usize,
        rng: &mut StreamRng,
    ) -> Result<Self> {
        if num_classes < 2 {
            return Err(CoreError::Config(format!(
                "classifier needs at least 2 classes, got {num_classes}"
            )));
        }
        let mut dims = vec![data_dim];
        dims.extend_from_slice(hidden);
        dims.push(num_classes);
        let (weights, biases) = init_layers(&dims, rng);
        Ok(ClassifierParams {
            layer_dims: dims,
            weights,
            biases,
            num_classes,
        })
    }

    pub fn zeros(data_dim: usize, hidden: &[usize], num_classes: usize) -> Result<Self> {
        let mut p =
            ClassifierParams::init(data_dim, hidden, num_classes, &mut StreamRng::new(0, "z"))?;
        for w in p.weights.iter_mut() {
            *w = Tensor::zeros_like(w);
        }
        Ok(p)
    }

    pub fn data_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.weights
            .iter_mut()
            .zip(self.biases.iter_mut())
            .flat_map(|(w, b)| [w, b])
            .collect()
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.weights
            .iter()
            .zip(self.biases.iter())
            .flat_map(|(w, b)| [w, b])
            .collect()
    }

    pub fn place_on(&self, tape: &mut Tape, trainable: bool) -> ClassifierOnTape {
        ClassifierOnTape {
            layers: place_layers(tape, &self.weights, &self.biases, trainable),
        }
    }

    /// Logits for a single point.
    pub fn classify(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let handle = self.place_on(&mut tape, false);
        let xr = tape.constant(x.clone());
        let out = handle.logits(&mut tape, xr)?;
        Ok(tape.value(out).clone())
    }

    /// Predicted label: argmax with lowest-index tie-break.
    pub fn predict(&self, x: &Tensor) -> Result<usize> {
        Ok(self.classify(x)?.argmax())
    }
}

struct LayerRefs {
    weights: Vec<NodeRef>,
    biases: Vec<NodeRef>,
}

fn place_layers(
    tape: &mut Tape,
    weights: &[Tensor],
    biases: &[Tensor],
    trainable: bool,
) -> LayerRefs {
    let put = |tape: &mut Tape, t: &Tensor| {
        if trainable {
            tape.var(t.clone())
        } else {
            tape.shared_constant(t)
        }
    };
    LayerRefs {
        weights: weights.iter().map(|w| put(tape, w)).collect(),
        biases: biases.iter().map(|b| put(tape, b)).collect(),
    }
}

fn mlp_forward(tape: &mut Tape, layers: &LayerRefs, input: NodeRef) -> Result<NodeRef> {
    let mut h = input;
    let last = layers.weights.len() - 1;
    for (i, (&w, &b)) in layers.weights.iter().zip(layers.biases.iter()).enumerate() {
        let lin = tape.matmul(h, w)?;
        h = tape.bias_add(lin, b)?;
        if i != last {
            h = tape.tanh(h)?;
        }
    }
    Ok(h)
}

/// Noise predictor placed on a tape.
pub struct MlpOnTape {
    layers: LayerRefs,
    time_embed_dim: usize,
}

impl MlpOnTape {
    /// Records the forward pass for input node `x` at time `t`. The time
    /// embedding enters as a constant, so gradients flow through `x` only.
    pub fn eps_theta(&self, tape: &mut Tape, x: NodeRef, t: f64) -> Result<NodeRef> {
        let embed = tape.constant(time_embed(t, self.time_embed_dim)?);
        let joined = tape.concat(x, embed)?;
        mlp_forward(tape, &self.layers, joined)
    }

    /// Parameter node references in `w0, b0, w1, b1, ...` order.
    pub fn param_refs(&self) -> Vec<NodeRef> {
        self.layers
            .weights
            .iter()
            .zip(self.layers.biases.iter())
            .flat_map(|(&w, &b)| [w, b])
            .collect()
    }
}

/// Classifier placed on a tape.
pub struct ClassifierOnTape {
    layers: LayerRefs,
}

impl ClassifierOnTape {
    pub fn logits(&self, tape: &mut Tape, x: NodeRef) -> Result<NodeRef> {
        mlp_forward(tape, &self.layers, x)
    }

    pub fn param_refs(&self) -> Vec<NodeRef> {
        self.layers
            .weights
            .iter()
            .zip(self.layers.biases.iter())
            .flat_map(|(&w, &b)| [w, b])
            .collect()
    }
}

/// Numerically stabilized `-log softmax(logits)[y]`.
pub fn cross_entropy(logits: &Tensor, y: usize) -> Result<f64> {
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
    Ok(crate::autodiff::cross_entropy_value(logits.data(), y))
}

/// Adam state for one parameter list (first/second moments in the same
/// order as the parameters they track).
#[derive(Debug, Clone)]
pub struct OptimState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_opt: f64,
    pub step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl OptimState {
    pub fn new(lr: f64, params: &[&Tensor]) -> Self {
        OptimState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps_opt: 1e-8,
            step: 0,
            m: params.iter().map(|p| Tensor::zeros_like(p)).collect(),
            v: params.iter().map(|p| Tensor::zeros_like(p)).collect(),
        }
    }
}

/// One Adam update with bias correction. `refs` associates each parameter
/// with its node on the tape that produced `grads`; every parameter must
/// have a gradient entry.
pub fn adam_step(
    params: &mut [&mut Tensor],
    refs: &[NodeRef],
    grads: &GradMap,
    state: &mut OptimState,
) -> Result<()> {
    if params.len() != refs.len() || params.len() != state.m.len() {
        return Err(CoreError::Config(format!(
            "adam_step arity mismatch: {} params, {} refs, {} moments",
            params.len(),
            refs.len(),
            state.m.len()
        )));
    }
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - state.beta1.powf(t);
    let bc2 = 1.0 - state.beta2.powf(t);
    for (i, (param, &r)) in params.iter_mut().zip(refs.iter()).enumerate() {
        let g = grads.get(r).ok_or(CoreError::MissingGradient {
            what: format!("parameter {i}"),
        })?;
        if g.shape() != param.shape() {
            return Err(CoreError::shape(
                "adam_step",
                format!("grad {:?} vs param {:?}", g.shape(), param.shape()),
            ));
        }
        let m = state.m[i]
            .zip_map(g, "adam_m", |m, g| state.beta1 * m + (1.0 - state.beta1) * g)?;
        let v = state.v[i].zip_map(g, "adam_v", |v, g| {
            state.beta2 * v + (1.0 - state.beta2) * g * g
        })?;
        let data: Vec<f64> = param
            .data()
            .iter()
            .zip(m.data().iter().zip(v.data().iter()))
            .map(|(&p, (&mi, &vi))| {
                let mhat = mi / bc1;
                let vhat = vi / bc2;
                p - state.lr * mhat / (vhat.sqrt() + state.eps_opt)
            })
            .collect();
        **param = Tensor::new(param.shape().to_vec(), data)?;
        state.m[i] = m;
        state.v[i] = v;
    }
    Ok(())
}
