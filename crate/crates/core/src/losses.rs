//! Losses on l2-normalized representations, each with its hand-derived
//! gradient.
//!
//! Every loss is a batch mean. Gradients are returned on the live inputs
//! only; anything wrapped in stop-gradient is taken as a constant. Losses that
//! support component surgery use target injection: the loss becomes
//! `−mean(Z · sg(T))` so the negative gradient on each row is `T / M`.

use crate::decomposition::{compose_target, decompose_gradient};
use crate::error::{Error, Result};
use crate::linalg::{dot, Matrix, NormalizedBatch};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LossKind {
    Cosine,
    RawMse,
    SimSiam,
    Mirror,
    Triplet,
    InfoNce,
    Decorrelation,
    ProbeCenter,
    ProbeResidual,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::Cosine => "cosine",
            LossKind::RawMse => "raw-mse",
            LossKind::SimSiam => "simsiam",
            LossKind::Mirror => "mirror",
            LossKind::Triplet => "triplet",
            LossKind::InfoNce => "infonce",
            LossKind::Decorrelation => "decorrelation",
            LossKind::ProbeCenter => "probe-center",
            LossKind::ProbeResidual => "probe-residual",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "cosine" => LossKind::Cosine,
            "raw-mse" => LossKind::RawMse,
            "simsiam" => LossKind::SimSiam,
            "mirror" => LossKind::Mirror,
            "triplet" => LossKind::Triplet,
            "infonce" => LossKind::InfoNce,
            "decorrelation" => LossKind::Decorrelation,
            "probe-center" => LossKind::ProbeCenter,
            "probe-residual" => LossKind::ProbeResidual,
            _ => return None,
        })
    }
}

/// Which parts of the extra gradient survive surgery.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Surgery {
    pub keep_o_e: bool,
    pub keep_r_e: bool,
}

impl Surgery {
    pub const FULL: Surgery = Surgery {
        keep_o_e: true,
        keep_r_e: true,
    };
    pub const NONE: Surgery = Surgery {
        keep_o_e: false,
        keep_r_e: false,
    };
    pub const ONLY_O: Surgery = Surgery {
        keep_o_e: true,
        keep_r_e: false,
    };
    pub const ONLY_R: Surgery = Surgery {
        keep_o_e: false,
        keep_r_e: true,
    };

    pub fn is_full(self) -> bool {
        self.keep_o_e && self.keep_r_e
    }
}

impl Default for Surgery {
    fn default() -> Self {
        Surgery::FULL
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossSpec {
    pub kind: LossKind,
    pub temperature: f64,
    pub surgery: Surgery,
    pub symmetric: bool,
}

impl LossSpec {
    pub fn new(kind: LossKind) -> Self {
        Self {
            kind,
            temperature: 0.2,
            surgery: Surgery::FULL,
            symmetric: true,
        }
    }

    pub fn with_surgery(mut self, surgery: Surgery) -> Self {
        self.surgery = surgery;
        self
    }

    pub fn with_temperature(mut self, tau: f64) -> Self {
        self.temperature = tau;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind == LossKind::InfoNce && !(self.temperature > 0.0) {
            return Err(Error::TemperatureNonPositive(self.temperature));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct LossOutput {
    pub value: f64,
    /// `dL/d(input)` for each live input, in the order the loss documents.
    pub grads: Vec<Matrix>,
    /// InfoNCE weights: row `i` is the softmax over `[positive, negatives...]`.
    pub lambda: Option<Matrix>,
}

impl LossOutput {
    pub fn grad(&self, i: usize) -> &Matrix {
        &self.grads[i]
    }
}

fn mean_rowwise_dot(a: &Matrix, b: &Matrix) -> f64 {
    a.iter_rows()
        .zip(b.iter_rows())
        .map(|(x, y)| dot(x, y))
        .sum::<f64>()
        / a.rows() as f64
}

fn ensure_same(a: &Matrix, b: &Matrix) -> Result<()> {
    a.ensure_shape(b)
}

/// `−mean(Z_a · sg(T))`. Live input: `Z_a`.
pub fn cosine_loss(z_a: &NormalizedBatch, target: &Matrix) -> Result<LossOutput> {
    ensure_same(z_a.z(), target)?;
    let m = z_a.rows() as f64;
    Ok(LossOutput {
        value: -mean_rowwise_dot(z_a.z(), target),
        grads: vec![target.scale(-1.0 / m)],
        lambda: None,
    })
}

/// Symmetric SimSiam loss `−(P_a·sg(Z_b) + P_b·sg(Z_a))/2`.
/// Live inputs: `P_a`, `P_b`.
pub fn simsiam_loss(
    p_a: &NormalizedBatch,
    p_b: &NormalizedBatch,
    z_a: &NormalizedBatch,
    z_b: &NormalizedBatch,
) -> Result<LossOutput> {
    simsiam_loss_with_surgery(p_a, p_b, z_a, z_b, Surgery::FULL)
}

/// SimSiam with the extra gradient `Z_b − P_b` split into `o_e`/`r_e` and
/// recomposed on top of the basic gradient `P_b` (and symmetrically).
pub fn simsiam_loss_with_surgery(
    p_a: &NormalizedBatch,
    p_b: &NormalizedBatch,
    z_a: &NormalizedBatch,
    z_b: &NormalizedBatch,
    surgery: Surgery,
) -> Result<LossOutput> {
    for other in [p_b.z(), z_a.z(), z_b.z()] {
        ensure_same(p_a.z(), other)?;
    }
    let (target_a, target_b) = if surgery.is_full() {
        (z_b.z().clone(), z_a.z().clone())
    } else {
        (
            simsiam_target(p_b.z(), z_b.z(), surgery)?,
            simsiam_target(p_a.z(), z_a.z(), surgery)?,
        )
    };
    let m = p_a.rows() as f64;
    let value =
        -(mean_rowwise_dot(p_a.z(), &target_a) + mean_rowwise_dot(p_b.z(), &target_b)) / 2.0;
    Ok(LossOutput {
        value,
        grads: vec![target_a.scale(-0.5 / m), target_b.scale(-0.5 / m)],
        lambda: None,
    })
}

/// Target for one SimSiam direction: basic `P_other` plus surgery on
/// `Z_other − P_other`.
pub fn simsiam_target(p_other: &Matrix, z_other: &Matrix, surgery: Surgery) -> Result<Matrix> {
    let d = decompose_gradient(z_other, p_other)?;
    compose_target(p_other, &d, surgery.keep_o_e, surgery.keep_r_e)
}

/// Mirror loss `−(P_a·Z_b + P_b·Z_a)/2` with every factor live.
/// The predictor outputs must come from detached encoder outputs.
/// Live inputs, in order: `Z_a`, `Z_b`, `P_a`, `P_b`.
pub fn mirror_loss(
    p_a: &NormalizedBatch,
    p_b: &NormalizedBatch,
    z_a: &NormalizedBatch,
    z_b: &NormalizedBatch,
) -> Result<LossOutput> {
    for other in [p_b.z(), z_a.z(), z_b.z()] {
        ensure_same(p_a.z(), other)?;
    }
    let s = -0.5 / p_a.rows() as f64;
    let value = -(mean_rowwise_dot(p_a.z(), z_b.z()) + mean_rowwise_dot(p_b.z(), z_a.z())) / 2.0;
    Ok(LossOutput {
        value,
        grads: vec![
            p_b.z().scale(s),
            p_a.z().scale(s),
            z_b.z().scale(s),
            z_a.z().scale(s),
        ],
        lambda: None,
    })
}

/// Unclipped triplet loss `−Z_a·sg(Z_b − Z_n)` where `Z_n = Z_b[negatives[i]]`.
/// The extra gradient `−Z_n` goes through surgery. Live input: `Z_a`.
pub fn triplet_loss(
    z_a: &NormalizedBatch,
    z_b: &NormalizedBatch,
    negatives: &[usize],
    surgery: Surgery,
) -> Result<LossOutput> {
    let target = triplet_target(z_b.z(), negatives, surgery)?;
    ensure_same(z_a.z(), &target)?;
    cosine_loss(z_a, &target)
}

pub fn triplet_target(z_b: &Matrix, negatives: &[usize], surgery: Surgery) -> Result<Matrix> {
    if negatives.len() != z_b.rows() {
        return Err(Error::ShapeMismatch {
            expected: (z_b.rows(), 1),
            found: (negatives.len(), 1),
        });
    }
    for (i, &j) in negatives.iter().enumerate() {
        if i == j {
            return Err(Error::SelfNegative(i));
        }
        if j >= z_b.rows() {
            return Err(Error::IndexOutOfRange {
                index: j,
                len: z_b.rows(),
            });
        }
    }
    let z_n = z_b.select_rows(negatives);
    let full = z_b.sub(&z_n)?;
    let d = decompose_gradient(&full, z_b)?;
    compose_target(z_b, &d, surgery.keep_o_e, surgery.keep_r_e)
}

/// Softmax weights and the decomposed extra gradient of InfoNCE for one
/// direction. Anchors are the rows of `Z_a`; the positive of anchor `i` is
/// `Z_b[i]` and its negatives are the other rows of `Z_a`.
#[derive(Debug, Clone)]
pub struct InfoNceParts {
    /// `M × M`; column 0 is the positive, columns `1..` the negatives `j ≠ i` in order.
    pub lambda: Matrix,
    /// `−o_z` with `o_z` the center of `Z_a`.
    pub o_e: Vec<f64>,
    /// `−Σ_k λ_ik r_k` per anchor.
    pub r_e: Matrix,
    /// `Σ_k λ_ik Z_k` per anchor.
    pub weighted: Matrix,
    /// Mean `−log λ_i0`.
    pub value: f64,
}

pub fn infonce_parts(
    z_a: &NormalizedBatch,
    z_b: &NormalizedBatch,
    tau: f64,
) -> Result<InfoNceParts> {
    if !(tau > 0.0) {
        return Err(Error::TemperatureNonPositive(tau));
    }
    ensure_same(z_a.z(), z_b.z())?;
    let (za, zb) = (z_a.z(), z_b.z());
    let (m, d) = za.shape();
    if m < 2 {
        return Err(Error::BatchTooSmall(m));
    }
    let gram = za.matmul_nt(za)?;
    let o_z = za.col_mean();
    let mut lambda = Matrix::zeros(m, m);
    let mut weighted = Matrix::zeros(m, d);
    let mut value = 0.0;
    let mut logits = vec![0.0; m];
    for i in 0..m {
        logits[0] = dot(za.row(i), zb.row(i)) / tau;
        let mut k = 1;
        for j in 0..m {
            if j != i {
                logits[k] = gram.get(i, j) / tau;
                k += 1;
            }
        }
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = logits.iter().map(|l| (l - max).exp()).sum();
        let log_z = max + sum.ln();
        value += log_z - logits[0];
        let lrow = lambda.row_mut(i);
        for (w, l) in lrow.iter_mut().zip(&logits) {
            *w = (l - log_z).exp();
        }
        let lrow = lambda.row(i).to_vec();
        let wrow = weighted.row_mut(i);
        crate::linalg::axpy(lrow[0], zb.row(i), wrow);
        let mut k = 1;
        for j in 0..m {
            if j != i {
                crate::linalg::axpy(lrow[k], za.row(j), wrow);
                k += 1;
            }
        }
    }
    // Σλ = 1, so Σλ_k r_k = Σλ_k Z_k − o_z.
    let neg_oz: Vec<f64> = o_z.iter().map(|v| -v).collect();
    let r_e = weighted.add_row_vector(&neg_oz)?.scale(-1.0);
    Ok(InfoNceParts {
        lambda,
        o_e: neg_oz,
        r_e,
        weighted,
        value: value / m as f64,
    })
}

/// One-directional InfoNCE with in-batch negatives and temperature `tau`.
/// Positives and negatives are detached; live input: `Z_a`.
/// With full surgery the gradient is the exact softmax gradient
/// `−(Z_b − Σλ_k Z_k)/(τM)`; otherwise the target
/// `(Z_b + [o_e] + [r_e])/τ` is injected.
pub fn infonce_loss(
    z_a: &NormalizedBatch,
    z_b: &NormalizedBatch,
    tau: f64,
    surgery: Surgery,
) -> Result<LossOutput> {
    let parts = infonce_parts(z_a, z_b, tau)?;
    let m = z_a.rows() as f64;
    let zb = z_b.z();
    if surgery.is_full() {
        let grad = zb.sub(&parts.weighted)?.scale(-1.0 / (tau * m));
        return Ok(LossOutput {
            value: parts.value,
            grads: vec![grad],
            lambda: Some(parts.lambda),
        });
    }
    let target = infonce_target(zb, &parts, tau, surgery)?;
    let mut out = cosine_loss(z_a, &target)?;
    out.lambda = Some(parts.lambda);
    Ok(out)
}

pub fn infonce_target(
    z_b: &Matrix,
    parts: &InfoNceParts,
    tau: f64,
    surgery: Surgery,
) -> Result<Matrix> {
    let mut t = z_b.clone();
    if surgery.keep_o_e {
        t = t.add_row_vector(&parts.o_e)?;
    }
    if surgery.keep_r_e {
        t.add_assign(&parts.r_e)?;
    }
    Ok(t.scale(1.0 / tau))
}

/// Mean Shannon entropy (nats) of the rows of a weight matrix.
pub fn mean_row_entropy(lambda: &Matrix) -> f64 {
    let h: f64 = lambda
        .iter_rows()
        .map(|r| {
            -r.iter()
                .filter(|&&p| p > 0.0)
                .map(|&p| p * p.ln())
                .sum::<f64>()
        })
        .sum();
    h / lambda.rows() as f64
}

/// Sum of squared off-diagonal entries of the column covariance, over `D`.
/// Live input: `Z`.
pub fn decorrelation_loss(z: &Matrix) -> Result<LossOutput> {
    let (m, d) = z.shape();
    if m < 2 {
        return Err(Error::BatchTooSmall(m));
    }
    let zc = z.centered();
    let mut cov = zc.matmul_tn(&zc)?.scale(1.0 / (m as f64 - 1.0));
    let mut value = 0.0;
    for j in 0..d {
        cov.set(j, j, 0.0);
        for k in 0..d {
            value += cov.get(j, k).powi(2);
        }
    }
    value /= d as f64;
    // dL/dC = 2C_off/D; dL/dZc = Zc (G + Gᵀ)/(M−1) = 4 Zc C_off / (D(M−1)).
    // Centering backward is the identity here since Zc C_off has zero column means.
    let grad = zc.matmul(&cov)?.scale(4.0 / (d as f64 * (m as f64 - 1.0)));
    Ok(LossOutput {
        value,
        grads: vec![grad],
        lambda: None,
    })
}

/// Value of [`decorrelation_loss`] without the gradient.
pub fn covariance_value(z: &Matrix) -> Result<f64> {
    let (m, d) = z.shape();
    if m < 2 {
        return Err(Error::BatchTooSmall(m));
    }
    let zc = z.centered();
    let cov = zc.matmul_tn(&zc)?.scale(1.0 / (m as f64 - 1.0));
    let mut value = 0.0;
    for j in 0..d {
        for k in 0..d {
            if j != k {
                value += cov.get(j, k).powi(2);
            }
        }
    }
    Ok(value / d as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProbeMode {
    Center,
    Residual,
}

/// `−Z_a·sg(o_z)` or `−Z_a·sg(Z_a − o_z)`. Live input: `Z_a`.
pub fn probe_losses(z_a: &NormalizedBatch, mode: ProbeMode) -> Result<LossOutput> {
    let z = z_a.z();
    if z.rows() < 2 {
        return Err(Error::BatchTooSmall(z.rows()));
    }
    let o = z.col_mean();
    let target = match mode {
        ProbeMode::Center => Matrix::broadcast_row(&o, z.rows()),
        ProbeMode::Residual => {
            let neg: Vec<f64> = o.iter().map(|v| -v).collect();
            z.add_row_vector(&neg)?
        }
    };
    cosine_loss(z_a, &target)
}

/// Mean squared error over all entries on unnormalized outputs.
/// Live input: `z_a`.
pub fn raw_mse_loss(z_a: &Matrix, z_b_detached: &Matrix) -> Result<LossOutput> {
    ensure_same(z_a, z_b_detached)?;
    let diff = z_a.sub(z_b_detached)?;
    let n = (z_a.rows() * z_a.cols()) as f64;
    let value = diff.data().iter().map(|v| v * v).sum::<f64>() / n;
    Ok(LossOutput {
        value,
        grads: vec![diff.scale(2.0 / n)],
        lambda: None,
    })
}
