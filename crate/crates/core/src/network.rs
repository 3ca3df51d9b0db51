//! Hand-differentiated layers, the encoder, the predictor family, the
//! trainable inverse predictor and the moving-average target bank.
//!
//! A forward pass in [`Mode::Train`] returns a [`Tape`] holding what the
//! backward pass needs. Stop-gradient is realized by simply not calling
//! [`Network::backward`] for a detached branch, or by dropping the input
//! gradient it returns.

use std::io::{BufRead, Write};
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::linalg::{l2_normalize, normalize_backward, Matrix, NormalizedBatch, Rng};
use crate::losses::cosine_loss;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

static NEXT_NET_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_NET_ID.fetch_add(1, Ordering::Relaxed)
}

/// A trainable array with its gradient accumulator and SGD momentum buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Matrix,
    pub grad: Matrix,
    pub velocity: Matrix,
}

impl Param {
    pub fn new(value: Matrix) -> Self {
        let (r, c) = value.shape();
        Self {
            value,
            grad: Matrix::zeros(r, c),
            velocity: Matrix::zeros(r, c),
        }
    }

    pub fn len(&self) -> usize {
        self.value.data().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    FullyConnected,
    BiasOnly,
    BatchNorm,
    Relu,
    Tanh,
    L2Norm,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    /// `y = x W + b` with `W` stored `in × out`.
    Linear {
        weight: Param,
        bias: Option<Param>,
    },
    Bias {
        bias: Param,
    },
    BatchNorm {
        gamma: Param,
        beta: Param,
        running_mean: Vec<f64>,
        running_var: Vec<f64>,
        /// Without affine, `gamma`/`beta` stay at 1/0 and are not trained.
        affine: bool,
    },
    Relu {
        dim: usize,
    },
    Tanh {
        dim: usize,
    },
    L2Norm {
        dim: usize,
    },
}

impl Layer {
    /// Fan-in uniform init `U(−1/√in, 1/√in)` for weight and bias.
    pub fn linear(input: usize, output: usize, with_bias: bool, rng: &mut Rng) -> Layer {
        let bound = 1.0 / (input as f64).sqrt();
        let w: Vec<f64> = (0..input * output)
            .map(|_| rng.uniform_range(-bound, bound))
            .collect();
        Layer::Linear {
            weight: Param::new(Matrix::from_vec(input, output, w).expect("sized")),
            bias: with_bias.then(|| {
                let b: Vec<f64> = (0..output)
                    .map(|_| rng.uniform_range(-bound, bound))
                    .collect();
                Param::new(Matrix::from_vec(1, output, b).expect("sized"))
            }),
        }
    }

    pub fn bias(dim: usize) -> Layer {
        Layer::Bias {
            bias: Param::new(Matrix::zeros(1, dim)),
        }
    }

    pub fn batch_norm(dim: usize) -> Layer {
        Layer::BatchNorm {
            gamma: Param::new(Matrix::from_vec(1, dim, vec![1.0; dim]).expect("sized")),
            beta: Param::new(Matrix::zeros(1, dim)),
            running_mean: vec![0.0; dim],
            running_var: vec![1.0; dim],
            affine: true,
        }
    }

    pub fn batch_norm_fixed(dim: usize) -> Layer {
        let mut layer = Layer::batch_norm(dim);
        if let Layer::BatchNorm { affine, .. } = &mut layer {
            *affine = false;
        }
        layer
    }

    pub fn kind(&self) -> LayerKind {
        match self {
            Layer::Linear { .. } => LayerKind::FullyConnected,
            Layer::Bias { .. } => LayerKind::BiasOnly,
            Layer::BatchNorm { .. } => LayerKind::BatchNorm,
            Layer::Relu { .. } => LayerKind::Relu,
            Layer::Tanh { .. } => LayerKind::Tanh,
            Layer::L2Norm { .. } => LayerKind::L2Norm,
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            Layer::Linear { weight, .. } => weight.value.rows(),
            Layer::Bias { bias } => bias.value.cols(),
            Layer::BatchNorm { gamma, .. } => gamma.value.cols(),
            Layer::Relu { dim } | Layer::Tanh { dim } | Layer::L2Norm { dim } => *dim,
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            Layer::Linear { weight, .. } => weight.value.cols(),
            _ => self.input_dim(),
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        match self {
            Layer::Linear { weight, bias } => {
                let mut v = vec![weight];
                if let Some(b) = bias {
                    v.push(b);
                }
                v
            }
            Layer::Bias { bias } => vec![bias],
            Layer::BatchNorm {
                gamma,
                beta,
                affine: true,
                ..
            } => vec![gamma, beta],
            _ => Vec::new(),
        }
    }

    fn params(&self) -> Vec<&Param> {
        match self {
            Layer::Linear { weight, bias } => {
                let mut v = vec![weight];
                if let Some(b) = bias {
                    v.push(b);
                }
                v
            }
            Layer::Bias { bias } => vec![bias],
            Layer::BatchNorm {
                gamma,
                beta,
                affine: true,
                ..
            } => vec![gamma, beta],
            _ => Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone)]
enum Cache {
    Linear(Matrix),
    Bias,
    BatchNorm {
        xhat: Matrix,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    Relu(Matrix),
    Tanh(Matrix),
    L2Norm {
        raw: Matrix,
        norms: Vec<f64>,
    },
}

/// Forward activations recorded for one backward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    net_id: u64,
    version: u64,
    rows: usize,
    caches: Vec<Cache>,
}

#[derive(Debug, PartialEq)]
pub struct Network {
    layers: Vec<Layer>,
    input_dim: usize,
    output_dim: usize,
    id: u64,
    version: u64,
}

impl Clone for Network {
    fn clone(&self) -> Self {
        Self {
            layers: self.layers.clone(),
            input_dim: self.input_dim,
            output_dim: self.output_dim,
            id: fresh_id(),
            version: 0,
        }
    }
}

impl Network {
    pub fn new(input_dim: usize, layers: Vec<Layer>) -> Result<Self> {
        let mut dim = input_dim;
        for (i, l) in layers.iter().enumerate() {
            if l.input_dim() != dim {
                return Err(Error::BadDims(format!(
                    "layer {i} expects width {}, previous width is {dim}",
                    l.input_dim()
                )));
            }
            dim = l.output_dim();
        }
        Ok(Self {
            layers,
            input_dim,
            output_dim: dim,
            id: fresh_id(),
            version: 0,
        })
    }

    pub fn identity(dim: usize) -> Self {
        Self::new(dim, Vec::new()).expect("empty network composes")
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn ends_with_l2norm(&self) -> bool {
        matches!(self.layers.last(), Some(Layer::L2Norm { .. }))
    }

    pub fn kinds(&self) -> Vec<LayerKind> {
        self.layers.iter().map(Layer::kind).collect()
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.layers.iter_mut().flat_map(|l| l.params_mut())
    }

    pub fn params(&self) -> impl Iterator<Item = &Param> {
        self.layers.iter().flat_map(|l| l.params())
    }

    pub fn num_params(&self) -> usize {
        self.params().map(Param::len).sum()
    }

    pub fn params_flat(&self) -> Vec<f64> {
        self.params()
            .flat_map(|p| p.value.data().iter().copied())
            .collect()
    }

    pub fn grads_flat(&self) -> Vec<f64> {
        self.params()
            .flat_map(|p| p.grad.data().iter().copied())
            .collect()
    }

    pub fn set_params_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::ShapeMismatch {
                expected: (self.num_params(), 1),
                found: (flat.len(), 1),
            });
        }
        let mut off = 0;
        for p in self.params_mut() {
            let n = p.len();
            p.value.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        self.version += 1;
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Marks parameters as changed; outstanding tapes become stale.
    pub fn bump_version(&mut self) {
        self.version += 1;
    }

    pub fn forward(&mut self, x: &Matrix, mode: Mode) -> Result<(Matrix, Tape)> {
        if x.cols() != self.input_dim {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim,
                found: x.cols(),
            });
        }
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for layer in &mut self.layers {
            let (out, cache) = layer_forward(layer, h, mode)?;
            caches.push(cache);
            h = out;
        }
        Ok((
            h,
            Tape {
                net_id: self.id,
                version: self.version,
                rows: x.rows(),
                caches,
            },
        ))
    }

    /// Eval-mode forward that touches no state.
    pub fn infer(&self, x: &Matrix) -> Result<Matrix> {
        let mut copy = Network {
            layers: self.layers.clone(),
            input_dim: self.input_dim,
            output_dim: self.output_dim,
            id: self.id,
            version: self.version,
        };
        Ok(copy.forward(x, Mode::Eval)?.0)
    }

    /// Accumulates parameter gradients and returns `dL/dx`.
    pub fn backward(&mut self, tape: &Tape, grad_y: &Matrix) -> Result<Matrix> {
        if tape.net_id != self.id
            || tape.version != self.version
            || tape.caches.len() != self.layers.len()
            || grad_y.rows() != tape.rows
        {
            return Err(Error::StaleTape);
        }
        if grad_y.cols() != self.output_dim {
            return Err(Error::DimensionMismatch {
                expected: self.output_dim,
                found: grad_y.cols(),
            });
        }
        let mut g = grad_y.clone();
        for (layer, cache) in self.layers.iter_mut().zip(&tape.caches).rev() {
            g = layer_backward(layer, cache, g)?;
        }
        Ok(g)
    }
}

fn layer_forward(layer: &mut Layer, x: Matrix, mode: Mode) -> Result<(Matrix, Cache)> {
    Ok(match layer {
        Layer::Linear { weight, bias } => {
            let mut y = x.matmul(&weight.value)?;
            if let Some(b) = bias {
                y = y.add_row_vector(b.value.data())?;
            }
            (y, Cache::Linear(x))
        }
        Layer::Bias { bias } => (x.add_row_vector(bias.value.data())?, Cache::Bias),
        Layer::BatchNorm {
            gamma,
            beta,
            running_mean,
            running_var,
            ..
        } => {
            let (m, d) = x.shape();
            let (mean, var, batch_stats) = if mode == Mode::Train {
                let mean = x.col_mean();
                let mut var = vec![0.0; d];
                for row in x.iter_rows() {
                    for ((v, xv), mu) in var.iter_mut().zip(row).zip(&mean) {
                        *v += (xv - mu) * (xv - mu);
                    }
                }
                let unbiased = if m > 1 {
                    m as f64 / (m as f64 - 1.0)
                } else {
                    1.0
                };
                var.iter_mut().for_each(|v| *v /= m as f64);
                for j in 0..d {
                    running_mean[j] = (1.0 - BN_MOMENTUM) * running_mean[j] + BN_MOMENTUM * mean[j];
                    running_var[j] =
                        (1.0 - BN_MOMENTUM) * running_var[j] + BN_MOMENTUM * var[j] * unbiased;
                }
                (mean, var, true)
            } else {
                (running_mean.clone(), running_var.clone(), false)
            };
            let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
            let mut xhat = x;
            for xr in xhat.data_mut().chunks_exact_mut(d) {
                for ((v, mu), s) in xr.iter_mut().zip(&mean).zip(&inv_std) {
                    *v = (*v - mu) * s;
                }
            }
            let mut y = xhat.clone();
            let (g, b) = (gamma.value.data(), beta.value.data());
            for yr in y.data_mut().chunks_exact_mut(d) {
                for ((v, gj), bj) in yr.iter_mut().zip(g).zip(b) {
                    *v = gj * *v + bj;
                }
            }
            (
                y,
                Cache::BatchNorm {
                    xhat,
                    inv_std,
                    batch_stats,
                },
            )
        }
        Layer::Relu { .. } => (x.map(|v| v.max(0.0)), Cache::Relu(x)),
        Layer::Tanh { .. } => {
            let y = x.map(f64::tanh);
            (y.clone(), Cache::Tanh(y))
        }
        Layer::L2Norm { .. } => {
            let nb = l2_normalize(&x)?;
            let (z, norms) = nb.into_parts();
            (z, Cache::L2Norm { raw: x, norms })
        }
    })
}

fn layer_backward(layer: &mut Layer, cache: &Cache, dy: Matrix) -> Result<Matrix> {
    match (layer, cache) {
        (Layer::Linear { weight, bias }, Cache::Linear(x)) => {
            let dw = x.matmul_tn(&dy)?;
            weight.grad.add_assign(&dw)?;
            if let Some(b) = bias {
                let db = dy.col_sum();
                crate::linalg::axpy(1.0, &db, b.grad.data_mut());
            }
            dy.matmul_nt(&weight.value)
        }
        (Layer::Bias { bias }, Cache::Bias) => {
            let db = dy.col_sum();
            crate::linalg::axpy(1.0, &db, bias.grad.data_mut());
            Ok(dy)
        }
        (
            Layer::BatchNorm {
                gamma,
                beta,
                affine,
                ..
            },
            Cache::BatchNorm {
                xhat,
                inv_std,
                batch_stats,
            },
        ) => {
            let (m, d) = dy.shape();
            let mut dgamma = vec![0.0; d];
            let mut dbeta = vec![0.0; d];
            for (dyr, xr) in dy.iter_rows().zip(xhat.iter_rows()) {
                for j in 0..d {
                    dgamma[j] += dyr[j] * xr[j];
                    dbeta[j] += dyr[j];
                }
            }
            if *affine {
                crate::linalg::axpy(1.0, &dgamma, gamma.grad.data_mut());
                crate::linalg::axpy(1.0, &dbeta, beta.grad.data_mut());
            }
            let scale: Vec<f64> = gamma
                .value
                .data()
                .iter()
                .zip(inv_std)
                .map(|(g, s)| g * s)
                .collect();
            let mut dx = dy;
            if *batch_stats {
                // dx = γ·inv_std·(dy − Σdy/M − x̂·Σ(dy·x̂)/M)
                let mf = m as f64;
                let mean_dy: Vec<f64> = dbeta.iter().map(|v| v / mf).collect();
                let mean_dyx: Vec<f64> = dgamma.iter().map(|v| v / mf).collect();
                for (dxr, xr) in dx.data_mut().chunks_exact_mut(d).zip(xhat.iter_rows()) {
                    for j in 0..d {
                        dxr[j] = scale[j] * (dxr[j] - mean_dy[j] - xr[j] * mean_dyx[j]);
                    }
                }
            } else {
                for dxr in dx.data_mut().chunks_exact_mut(d) {
                    dxr.iter_mut().zip(&scale).for_each(|(v, s)| *v *= s);
                }
            }
            Ok(dx)
        }
        (Layer::Relu { .. }, Cache::Relu(x)) => {
            let mut dx = dy;
            for (g, &xv) in dx.data_mut().iter_mut().zip(x.data()) {
                if xv <= 0.0 {
                    *g = 0.0;
                }
            }
            Ok(dx)
        }
        (Layer::Tanh { .. }, Cache::Tanh(y)) => {
            let mut dx = dy;
            for (g, &yv) in dx.data_mut().iter_mut().zip(y.data()) {
                *g *= 1.0 - yv * yv;
            }
            Ok(dx)
        }
        (Layer::L2Norm { .. }, Cache::L2Norm { raw, norms }) => normalize_backward(&dy, raw, norms),
        _ => Err(Error::StaleTape),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PredictorVariant {
    NonlinearMlp,
    TwoFc,
    TanhFc,
    BiasOnly,
    Identity,
}

impl PredictorVariant {
    pub fn name(self) -> &'static str {
        match self {
            PredictorVariant::NonlinearMlp => "mlp",
            PredictorVariant::TwoFc => "two-fc",
            PredictorVariant::TanhFc => "tanh-fc",
            PredictorVariant::BiasOnly => "bias",
            PredictorVariant::Identity => "identity",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "mlp" => PredictorVariant::NonlinearMlp,
            "two-fc" => PredictorVariant::TwoFc,
            "tanh-fc" => PredictorVariant::TanhFc,
            "bias" => PredictorVariant::BiasOnly,
            "identity" => PredictorVariant::Identity,
            _ => return None,
        })
    }

    /// Variants that only work on an l2-normalized encoder output.
    pub fn needs_l2norm_encoder(self) -> bool {
        matches!(
            self,
            PredictorVariant::TwoFc | PredictorVariant::TanhFc | PredictorVariant::BiasOnly
        )
    }
}

pub fn make_predictor(
    variant: PredictorVariant,
    dim: usize,
    hidden: usize,
    rng: &mut Rng,
) -> Result<Network> {
    if dim == 0
        || (hidden == 0
            && matches!(
                variant,
                PredictorVariant::NonlinearMlp | PredictorVariant::TwoFc
            ))
    {
        return Err(Error::BadDims(format!(
            "predictor dim {dim}, hidden {hidden}"
        )));
    }
    let layers = match variant {
        PredictorVariant::NonlinearMlp => vec![
            Layer::linear(dim, hidden, true, rng),
            Layer::batch_norm(hidden),
            Layer::Relu { dim: hidden },
            Layer::linear(hidden, dim, true, rng),
        ],
        PredictorVariant::TwoFc => vec![
            Layer::linear(dim, hidden, false, rng),
            Layer::linear(hidden, dim, false, rng),
            Layer::bias(dim),
        ],
        PredictorVariant::TanhFc => vec![Layer::linear(dim, dim, true, rng), Layer::Tanh { dim }],
        PredictorVariant::BiasOnly => vec![Layer::bias(dim)],
        PredictorVariant::Identity => Vec::new(),
    };
    Network::new(dim, layers)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderConfig {
    pub input: usize,
    pub hidden: usize,
    pub output: usize,
    pub final_bn: bool,
    pub final_affine: bool,
    pub l2norm: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            input: 32,
            hidden: 64,
            output: 32,
            final_bn: true,
            final_affine: true,
            l2norm: false,
        }
    }
}

/// `FC + BN + ReLU + FC [+ BN] [+ L2Norm]`.
pub fn make_encoder(cfg: EncoderConfig, rng: &mut Rng) -> Result<Network> {
    if cfg.input == 0 || cfg.hidden == 0 || cfg.output == 0 {
        return Err(Error::BadDims(format!("{cfg:?}")));
    }
    let mut layers = vec![
        Layer::linear(cfg.input, cfg.hidden, true, rng),
        Layer::batch_norm(cfg.hidden),
        Layer::Relu { dim: cfg.hidden },
        Layer::linear(cfg.hidden, cfg.output, true, rng),
    ];
    if cfg.final_bn && cfg.final_affine {
        layers.push(Layer::batch_norm(cfg.output));
    } else if cfg.final_bn {
        layers.push(Layer::batch_norm_fixed(cfg.output));
    }
    if cfg.l2norm {
        layers.push(Layer::L2Norm { dim: cfg.output });
    }
    Network::new(cfg.input, layers)
}

/// SGD with momentum and L2 weight decay (PyTorch semantics).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Sgd {
    /// Applies one update with learning rate `lr`, then clears the gradients.
    pub fn step(&self, net: &mut Network, lr: f64) {
        for p in net.params_mut() {
            let Param {
                value,
                grad,
                velocity,
            } = p;
            for ((w, g), v) in value
                .data_mut()
                .iter_mut()
                .zip(grad.data_mut().iter_mut())
                .zip(velocity.data_mut().iter_mut())
            {
                let d = *g + self.weight_decay * *w;
                *v = self.momentum * *v + d;
                *w -= lr * *v;
                *g = 0.0;
            }
        }
        net.bump_version();
    }
}

/// Loss values and encoder-side gradients of one inverse-predictor step.
#[derive(Debug, Clone)]
pub struct InverseStep {
    pub l_pred: f64,
    pub l_inv_pred: f64,
    pub l_enc: f64,
    pub grad_z_a: Matrix,
    pub grad_z_b: Matrix,
}

/// One step of the three-loss inverse-predictor objective on encoder outputs
/// `z_a`, `z_b`:
///
/// - `L_pred = D(h(sg z_a), z_b)/2 + D(h(sg z_b), z_a)/2` trains `h`;
/// - `L_inv  = D(h_inv(sg p_a), z_a)/2 + D(h_inv(sg p_b), z_b)/2` trains `h_inv`;
/// - `L_enc  = D(p_a, h_inv(p_b))/2 + D(p_b, h_inv(p_a))/2` trains `h` and the encoder,
///
/// where `D(p, z) = −mean(P · sg(Z))`. Accumulates grads in `h` and `h_inv`.
pub fn inverse_predictor_step(
    h: &mut Network,
    h_inv: &mut Network,
    z_a: &Matrix,
    z_b: &Matrix,
) -> Result<InverseStep> {
    z_a.ensure_shape(z_b)?;
    if h.input_dim() != h_inv.input_dim() || h.output_dim() != h_inv.output_dim() {
        return Err(Error::ShapeMismatch {
            expected: (h.input_dim(), h.output_dim()),
            found: (h_inv.input_dim(), h_inv.output_dim()),
        });
    }
    let za = l2_normalize(z_a)?;
    let zb = l2_normalize(z_b)?;
    let (p_a, tape_pa) = h.forward(z_a, Mode::Train)?;
    let (p_b, tape_pb) = h.forward(z_b, Mode::Train)?;
    let pa = l2_normalize(&p_a)?;
    let pb = l2_normalize(&p_b)?;
    let (i_a, tape_ia) = h_inv.forward(&p_a, Mode::Train)?;
    let (i_b, tape_ib) = h_inv.forward(&p_b, Mode::Train)?;
    let ia = l2_normalize(&i_a)?;
    let ib = l2_normalize(&i_b)?;

    let half = |v: f64| v / 2.0;
    // predictor loss: parameter grads only
    let lp_a = cosine_loss(&pa, zb.z())?;
    let lp_b = cosine_loss(&pb, za.z())?;
    // inverse predictor loss
    let li_a = cosine_loss(&ia, za.z())?;
    let li_b = cosine_loss(&ib, zb.z())?;
    // encoder loss through h, target h_inv(p) detached
    let le_a = cosine_loss(&pa, ib.z())?;
    let le_b = cosine_loss(&pb, ia.z())?;

    let back = |net: &mut Network, tape: &Tape, nb: &NormalizedBatch, raw: &Matrix, g: &Matrix| {
        let g = normalize_backward(&g.scale(0.5), raw, nb.raw_norms())?;
        net.backward(tape, &g)
    };
    back(h, &tape_pa, &pa, &p_a, lp_a.grad(0))?;
    back(h, &tape_pb, &pb, &p_b, lp_b.grad(0))?;
    back(h_inv, &tape_ia, &ia, &i_a, li_a.grad(0))?;
    back(h_inv, &tape_ib, &ib, &i_b, li_b.grad(0))?;
    let grad_z_a = back(h, &tape_pa, &pa, &p_a, le_a.grad(0))?;
    let grad_z_b = back(h, &tape_pb, &pb, &p_b, le_b.grad(0))?;

    Ok(InverseStep {
        l_pred: half(lp_a.value) + half(lp_b.value),
        l_inv_pred: half(li_a.value) + half(li_b.value),
        l_enc: half(le_a.value) + half(le_b.value),
        grad_z_a,
        grad_z_b,
    })
}

/// Per-sample moving-average targets `η_x ← m·η_x + (1 − m)·fresh`.
/// The first visit of a sample stores the fresh target as is.
#[derive(Debug, Clone, PartialEq)]
pub struct MovingAverageBank {
    targets: Matrix,
    seen: Vec<bool>,
    momentum: f64,
}

impl MovingAverageBank {
    pub fn new(len: usize, dim: usize, momentum: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&momentum) {
            return Err(Error::InvalidParameter(format!(
                "moving-average coefficient {momentum}"
            )));
        }
        Ok(Self {
            targets: Matrix::zeros(len, dim),
            seen: vec![false; len],
            momentum,
        })
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn targets(&self) -> &Matrix {
        &self.targets
    }

    pub fn get(&self, indices: &[usize]) -> Result<Matrix> {
        self.check(indices)?;
        Ok(self.targets.select_rows(indices))
    }

    fn check(&self, indices: &[usize]) -> Result<()> {
        let len = self.seen.len();
        match indices.iter().find(|&&i| i >= len) {
            Some(&index) => Err(Error::IndexOutOfRange { index, len }),
            None => Ok(()),
        }
    }

    pub fn update(&mut self, indices: &[usize], fresh: &Matrix) -> Result<()> {
        self.check(indices)?;
        if fresh.rows() != indices.len() || fresh.cols() != self.targets.cols() {
            return Err(Error::ShapeMismatch {
                expected: (indices.len(), self.targets.cols()),
                found: fresh.shape(),
            });
        }
        let m = self.momentum;
        for (r, &i) in indices.iter().enumerate() {
            let src = fresh.row(r);
            let first = !self.seen[i];
            let dst = self.targets.row_mut(i);
            for (d, s) in dst.iter_mut().zip(src) {
                *d = if first { *s } else { m * *d + (1.0 - m) * s };
            }
            self.seen[i] = true;
        }
        Ok(())
    }
}

/// Detached multi-view target: the normalized mean of views `2..N`.
pub fn same_batch_eoa_target(views: &[NormalizedBatch]) -> Result<Matrix> {
    if views.len() < 2 {
        return Err(Error::TooFewViews(views.len()));
    }
    let mut sum = views[1].z().clone();
    for v in &views[2..] {
        sum.add_assign(v.z())?;
    }
    let mean = sum.scale(1.0 / (views.len() - 1) as f64);
    Ok(l2_normalize(&mean)?.into_parts().0)
}

// ---------------------------------------------------------------------------
// Checkpoints

pub const CHECKPOINT_MAGIC: &str = "siamlab-checkpoint v1";

fn write_floats<W: Write>(w: &mut W, tag: &str, xs: &[f64]) -> std::io::Result<()> {
    write!(w, "{tag} {}", xs.len())?;
    for x in xs {
        write!(w, " {x:?}")?;
    }
    writeln!(w)
}

/// Writes named networks in the line-oriented text checkpoint format
/// described in the README.
pub fn write_checkpoint<W: Write>(w: &mut W, nets: &[(&str, &Network)]) -> Result<()> {
    writeln!(w, "{CHECKPOINT_MAGIC}")?;
    for (name, net) in nets {
        if name.is_empty() || name.contains(char::is_whitespace) {
            return Err(Error::Checkpoint(format!("bad network name {name:?}")));
        }
        writeln!(
            w,
            "network {name} {} {} {}",
            net.input_dim,
            net.output_dim,
            net.layers.len()
        )?;
        for layer in &net.layers {
            match layer {
                Layer::Linear { weight, bias } => {
                    writeln!(
                        w,
                        "layer linear {} {} {}",
                        weight.value.rows(),
                        weight.value.cols(),
                        u8::from(bias.is_some())
                    )?;
                    write_floats(w, "weight", weight.value.data())?;
                    if let Some(b) = bias {
                        write_floats(w, "bias", b.value.data())?;
                    }
                }
                Layer::Bias { bias } => {
                    writeln!(w, "layer bias {}", bias.value.cols())?;
                    write_floats(w, "bias", bias.value.data())?;
                }
                Layer::BatchNorm {
                    gamma,
                    beta,
                    running_mean,
                    running_var,
                    affine,
                } => {
                    writeln!(
                        w,
                        "layer batchnorm {} {}",
                        gamma.value.cols(),
                        u8::from(*affine)
                    )?;
                    write_floats(w, "gamma", gamma.value.data())?;
                    write_floats(w, "beta", beta.value.data())?;
                    write_floats(w, "running_mean", running_mean)?;
                    write_floats(w, "running_var", running_var)?;
                }
                Layer::Relu { dim } => writeln!(w, "layer relu {dim}")?,
                Layer::Tanh { dim } => writeln!(w, "layer tanh {dim}")?,
                Layer::L2Norm { dim } => writeln!(w, "layer l2norm {dim}")?,
            }
        }
    }
    writeln!(w, "end")?;
    Ok(())
}

struct Lines<R: BufRead> {
    inner: std::io::Lines<R>,
    line_no: usize,
}

impl<R: BufRead> Lines<R> {
    fn next_line(&mut self) -> Result<String> {
        self.line_no += 1;
        match self.inner.next() {
            Some(l) => Ok(l?),
            None => Err(Error::Checkpoint(format!(
                "unexpected end of file at line {}",
                self.line_no
            ))),
        }
    }

    fn bad(&self, what: &str) -> Error {
        Error::Checkpoint(format!("line {}: {what}", self.line_no))
    }

    fn floats(&mut self, tag: &str, len: usize) -> Result<Vec<f64>> {
        let line = self.next_line()?;
        let mut it = line.split_ascii_whitespace();
        if it.next() != Some(tag) {
            return Err(self.bad(&format!("expected `{tag}`")));
        }
        let n: usize = it
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| self.bad("bad length"))?;
        if n != len {
            return Err(self.bad(&format!("`{tag}` has {n} values, expected {len}")));
        }
        let xs: Vec<f64> = it
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| self.bad("bad number"))?;
        if xs.len() != n {
            return Err(self.bad("value count mismatch"));
        }
        Ok(xs)
    }
}

fn parse_usize(s: Option<&str>) -> Option<usize> {
    s.and_then(|s| s.parse().ok())
}

pub fn read_checkpoint<R: BufRead>(r: R) -> Result<Vec<(String, Network)>> {
    let mut lines = Lines {
        inner: r.lines(),
        line_no: 0,
    };
    if lines.next_line()?.trim() != CHECKPOINT_MAGIC {
        return Err(lines.bad("missing header"));
    }
    let mut out = Vec::new();
    loop {
        let line = lines.next_line()?;
        let mut it = line.split_ascii_whitespace();
        match it.next() {
            Some("end") => return Ok(out),
            Some("network") => {}
            _ => return Err(lines.bad("expected `network` or `end`")),
        }
        let name = it
            .next()
            .ok_or_else(|| lines.bad("missing name"))?
            .to_string();
        let input = parse_usize(it.next()).ok_or_else(|| lines.bad("bad input dim"))?;
        let _output = parse_usize(it.next()).ok_or_else(|| lines.bad("bad output dim"))?;
        let count = parse_usize(it.next()).ok_or_else(|| lines.bad("bad layer count"))?;
        let mut layers = Vec::with_capacity(count);
        for _ in 0..count {
            let line = lines.next_line()?;
            let mut it = line.split_ascii_whitespace();
            if it.next() != Some("layer") {
                return Err(lines.bad("expected `layer`"));
            }
            let kind = it.next().unwrap_or_default().to_string();
            let a = parse_usize(it.next()).ok_or_else(|| lines.bad("bad dim"))?;
            let layer = match kind.as_str() {
                "linear" => {
                    let b = parse_usize(it.next()).ok_or_else(|| lines.bad("bad dim"))?;
                    let has_bias =
                        parse_usize(it.next()).ok_or_else(|| lines.bad("bad flag"))? == 1;
                    let w = lines.floats("weight", a * b)?;
                    let bias = if has_bias {
                        Some(Param::new(Matrix::from_vec(
                            1,
                            b,
                            lines.floats("bias", b)?,
                        )?))
                    } else {
                        None
                    };
                    Layer::Linear {
                        weight: Param::new(Matrix::from_vec(a, b, w)?),
                        bias,
                    }
                }
                "bias" => Layer::Bias {
                    bias: Param::new(Matrix::from_vec(1, a, lines.floats("bias", a)?)?),
                },
                "batchnorm" => Layer::BatchNorm {
                    gamma: Param::new(Matrix::from_vec(1, a, lines.floats("gamma", a)?)?),
                    beta: Param::new(Matrix::from_vec(1, a, lines.floats("beta", a)?)?),
                    running_mean: lines.floats("running_mean", a)?,
                    running_var: lines.floats("running_var", a)?,
                    affine: parse_usize(it.next()).unwrap_or(1) == 1,
                },
                "relu" => Layer::Relu { dim: a },
                "tanh" => Layer::Tanh { dim: a },
                "l2norm" => Layer::L2Norm { dim: a },
                other => return Err(lines.bad(&format!("unknown layer `{other}`"))),
            };
            layers.push(layer);
        }
        out.push((name, Network::new(input, layers)?));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_predictor_passes_through() {
        let mut rng = Rng::new(1);
        let mut h = make_predictor(PredictorVariant::Identity, 4, 0, &mut rng).unwrap();
        let x = Matrix::random_normal(3, 4, &mut rng);
        let (y, tape) = h.forward(&x, Mode::Train).unwrap();
        assert_eq!(y, x);
        let g = Matrix::random_normal(3, 4, &mut rng);
        assert_eq!(h.backward(&tape, &g).unwrap(), g);
    }

    #[test]
    fn zero_bias_layer_is_identity() {
        let mut rng = Rng::new(2);
        let mut h = make_predictor(PredictorVariant::BiasOnly, 5, 0, &mut rng).unwrap();
        let z = l2_normalize(&Matrix::random_normal(4, 5, &mut rng)).unwrap();
        let (p, _) = h.forward(z.z(), Mode::Train).unwrap();
        assert_eq!(&p, z.z());
        for n in p.row_norms() {
            assert!((n - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn relu_blocks_negative_preactivations() {
        let mut net = Network::new(2, vec![Layer::Relu { dim: 2 }]).unwrap();
        let x = Matrix::from_rows(&[[-1.0, 2.0]]);
        let (_, tape) = net.forward(&x, Mode::Train).unwrap();
        let dx = net
            .backward(&tape, &Matrix::from_rows(&[[5.0, 5.0]]))
            .unwrap();
        assert_eq!(dx, Matrix::from_rows(&[[0.0, 5.0]]));
    }

    #[test]
    fn l2norm_layer_matches_normalize_backward() {
        let mut rng = Rng::new(3);
        let mut net = Network::new(6, vec![Layer::L2Norm { dim: 6 }]).unwrap();
        let x = Matrix::random_normal(4, 6, &mut rng);
        let g = Matrix::random_normal(4, 6, &mut rng);
        let (_, tape) = net.forward(&x, Mode::Train).unwrap();
        let dx = net.backward(&tape, &g).unwrap();
        let direct = normalize_backward(&g, &x, &x.row_norms()).unwrap();
        assert!(dx.max_abs_diff(&direct) < 1e-15);
    }

    #[test]
    fn stale_tape_is_rejected() {
        let mut rng = Rng::new(4);
        let mut net = make_predictor(PredictorVariant::TanhFc, 3, 0, &mut rng).unwrap();
        let x = Matrix::random_normal(2, 3, &mut rng);
        let (_, tape) = net.forward(&x, Mode::Train).unwrap();
        Sgd {
            momentum: 0.9,
            weight_decay: 0.0,
        }
        .step(&mut net, 0.1);
        assert!(matches!(net.backward(&tape, &x), Err(Error::StaleTape)));
        let mut other = net.clone();
        let (_, tape) = net.forward(&x, Mode::Train).unwrap();
        assert!(matches!(other.backward(&tape, &x), Err(Error::StaleTape)));
    }

    #[test]
    fn dimension_mismatch() {
        let mut rng = Rng::new(5);
        let mut net = make_encoder(EncoderConfig::default(), &mut rng).unwrap();
        let x = Matrix::zeros(4, 7);
        assert!(matches!(
            net.forward(&x, Mode::Train),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(Network::new(3, vec![Layer::bias(4)]).is_err());
    }

    #[test]
    fn two_fc_with_identity_first_layer_is_single_fc() {
        let mut rng = Rng::new(6);
        let d = 4;
        let mut two = make_predictor(PredictorVariant::TwoFc, d, d, &mut rng).unwrap();
        let w = Matrix::random_normal(d, d, &mut rng);
        let b: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        if let Layer::Linear { weight, .. } = &mut two.layers_mut()[0] {
            weight.value = Matrix::identity(d);
        }
        if let Layer::Linear { weight, .. } = &mut two.layers_mut()[1] {
            weight.value = w.clone();
        }
        if let Layer::Bias { bias } = &mut two.layers_mut()[2] {
            bias.value = Matrix::from_vec(1, d, b.clone()).unwrap();
        }
        let x = Matrix::random_normal(5, d, &mut rng);
        let y = two.infer(&x).unwrap();
        let single = x.matmul(&w).unwrap().add_row_vector(&b).unwrap();
        assert!(y.max_abs_diff(&single) < 1e-12);
    }

    #[test]
    fn batchnorm_train_output_is_standardized() {
        let mut rng = Rng::new(7);
        let mut net = Network::new(3, vec![Layer::batch_norm(3)]).unwrap();
        let x = Matrix::random_normal(64, 3, &mut rng).map(|v| 3.0 * v + 2.0);
        let (y, _) = net.forward(&x, Mode::Train).unwrap();
        for (j, m) in y.col_mean().iter().enumerate() {
            assert!(m.abs() < 1e-6);
            let var = y.iter_rows().map(|r| r[j] * r[j]).sum::<f64>() / 64.0;
            assert!((var - 1.0).abs() < 1e-3);
        }
        // eval mode is a fixed affine map
        let e1 = net.infer(&x).unwrap();
        let e2 = net.infer(&x).unwrap();
        assert_eq!(e1, e2);
    }

    #[test]
    fn bias_gradient_is_row_sum_of_output_gradient() {
        let mut rng = Rng::new(8);
        let mut h = make_predictor(PredictorVariant::BiasOnly, 4, 0, &mut rng).unwrap();
        let z = Matrix::random_normal(5, 4, &mut rng);
        let g = Matrix::random_normal(5, 4, &mut rng);
        let (_, tape) = h.forward(&z, Mode::Train).unwrap();
        let dx = h.backward(&tape, &g).unwrap();
        assert_eq!(dx, g);
        let gb = h.grads_flat();
        for (a, b) in gb.iter().zip(g.col_sum()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn inverse_step_with_identities() {
        let mut rng = Rng::new(9);
        let mut h = Network::identity(4);
        let mut h_inv = Network::identity(4);
        let za = Matrix::random_normal(6, 4, &mut rng);
        let zb = Matrix::random_normal(6, 4, &mut rng);
        let out = inverse_predictor_step(&mut h, &mut h_inv, &za, &zb).unwrap();
        assert!((out.l_inv_pred + 1.0).abs() < 1e-12);
    }

    #[test]
    fn inverse_step_reaches_all_three_networks() {
        let mut rng = Rng::new(10);
        let mut h = make_predictor(PredictorVariant::NonlinearMlp, 6, 3, &mut rng).unwrap();
        let mut h_inv = make_predictor(PredictorVariant::NonlinearMlp, 6, 3, &mut rng).unwrap();
        let za = Matrix::random_normal(8, 6, &mut rng);
        let zb = Matrix::random_normal(8, 6, &mut rng);
        let out = inverse_predictor_step(&mut h, &mut h_inv, &za, &zb).unwrap();
        assert!(h.grads_flat().iter().any(|g| g.abs() > 1e-8));
        assert!(h_inv.grads_flat().iter().any(|g| g.abs() > 1e-8));
        assert!(out.grad_z_a.frobenius() > 1e-8 && out.grad_z_b.frobenius() > 1e-8);
    }

    #[test]
    fn moving_average_extremes() {
        let mut rng = Rng::new(11);
        let init = Matrix::random_normal(3, 2, &mut rng);
        let fresh = Matrix::random_normal(3, 2, &mut rng);
        let mut bank = MovingAverageBank::new(5, 2, 0.0).unwrap();
        bank.update(&[0, 2, 4], &init).unwrap();
        bank.update(&[0, 2, 4], &fresh).unwrap();
        assert_eq!(bank.get(&[0, 2, 4]).unwrap(), fresh);

        let mut bank = MovingAverageBank::new(5, 2, 1.0).unwrap();
        bank.update(&[0, 2, 4], &init).unwrap();
        bank.update(&[0, 2, 4], &fresh).unwrap();
        assert_eq!(bank.get(&[0, 2, 4]).unwrap(), init);

        let mut bank = MovingAverageBank::new(5, 2, 0.8).unwrap();
        bank.update(&[1], &Matrix::from_rows(&[[1.0, 0.0]]))
            .unwrap();
        bank.update(&[1], &Matrix::from_rows(&[[0.0, 1.0]]))
            .unwrap();
        let got = bank.get(&[1]).unwrap();
        assert!((got.get(0, 0) - 0.8).abs() < 1e-15 && (got.get(0, 1) - 0.2).abs() < 1e-15);
        // untouched rows stay zero
        assert_eq!(bank.get(&[3]).unwrap().frobenius(), 0.0);
        assert!(matches!(
            bank.update(&[7], &init.select_rows(&[0])),
            Err(Error::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn two_view_eoa_target_is_second_view() {
        let mut rng = Rng::new(12);
        let v1 = l2_normalize(&Matrix::random_normal(4, 3, &mut rng)).unwrap();
        let v2 = l2_normalize(&Matrix::random_normal(4, 3, &mut rng)).unwrap();
        let t = same_batch_eoa_target(&[v1.clone(), v2.clone()]).unwrap();
        assert!(t.max_abs_diff(v2.z()) < 1e-12);
        assert!(matches!(
            same_batch_eoa_target(&[v1]),
            Err(Error::TooFewViews(1))
        ));
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = Rng::new(13);
        let enc = make_encoder(
            EncoderConfig {
                l2norm: true,
                ..EncoderConfig::default()
            },
            &mut rng,
        )
        .unwrap();
        let pred = make_predictor(PredictorVariant::TwoFc, 32, 16, &mut rng).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &[("encoder", &enc), ("predictor", &pred)]).unwrap();
        let back = read_checkpoint(std::io::Cursor::new(&buf)).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].0, "encoder");
        assert_eq!(back[0].1.params_flat(), enc.params_flat());
        assert_eq!(back[1].1.kinds(), pred.kinds());
        assert_eq!(back[1].1.params_flat(), pred.params_flat());
        let mut buf2 = Vec::new();
        write_checkpoint(
            &mut buf2,
            &[("encoder", &back[0].1), ("predictor", &back[1].1)],
        )
        .unwrap();
        assert_eq!(buf, buf2);
    }

    #[test]
    fn checkpoint_rejects_garbage() {
        assert!(read_checkpoint(std::io::Cursor::new(b"hello\n")).is_err());
        let truncated = format!("{CHECKPOINT_MAGIC}\nnetwork x 2 2 1\nlayer bias 2\nbias 2 1.0\n");
        assert!(read_checkpoint(std::io::Cursor::new(truncated.as_bytes())).is_err());
    }
}
