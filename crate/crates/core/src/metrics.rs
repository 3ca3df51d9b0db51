//! Collapse diagnostics, the online linear probe and the read-only probes
//! used by the bias-layer, η-sweep and alignment experiments.

use crate::decomposition::{decompose_matrix, eta_sweep, EtaSweepResult};
use crate::error::{Error, Result};
use crate::linalg::{cosine_sim, dot, norm, Matrix, NormalizedBatch, Rng, ZERO_NORM};
use crate::losses::{covariance_value, decorrelation_loss, infonce_parts};

/// Mean over dimensions of the per-dimension (population) standard deviation.
/// A healthy spread on the unit sphere sits near `1/√D`.
pub fn std_metric(z: &NormalizedBatch) -> Result<f64> {
    std_of_columns(z.z())
}

pub fn std_of_columns(z: &Matrix) -> Result<f64> {
    let (m, d) = z.shape();
    if m < 2 {
        return Err(Error::BatchTooSmall(m));
    }
    let mean = z.col_mean();
    let mut var = vec![0.0; d];
    for row in z.iter_rows() {
        for ((v, x), mu) in var.iter_mut().zip(row).zip(&mean) {
            *v += (x - mu) * (x - mu);
        }
    }
    Ok(var.iter().map(|v| (v / m as f64).sqrt()).sum::<f64>() / d as f64)
}

/// Off-diagonal covariance energy, read-only.
pub fn covariance_metric(z: &Matrix) -> Result<f64> {
    covariance_value(z)
}

/// Row normalization that leaves (near-)zero rows at zero instead of failing.
pub fn normalize_rows_lossy(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let n = norm(row);
        if n > ZERO_NORM {
            row.iter_mut().for_each(|v| *v /= n);
        } else {
            row.iter_mut().for_each(|v| *v = 0.0);
        }
    }
    out
}

/// Softmax regression trained with momentum SGD on detached features.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearProbe {
    weight: Matrix,
    bias: Vec<f64>,
    v_weight: Matrix,
    v_bias: Vec<f64>,
    momentum: f64,
}

impl LinearProbe {
    pub fn new(dim: usize, classes: usize) -> Self {
        Self {
            weight: Matrix::zeros(dim, classes),
            bias: vec![0.0; classes],
            v_weight: Matrix::zeros(dim, classes),
            v_bias: vec![0.0; classes],
            momentum: 0.9,
        }
    }

    pub fn classes(&self) -> usize {
        self.bias.len()
    }

    fn logits(&self, x: &Matrix) -> Result<Matrix> {
        x.matmul(&self.weight)?.add_row_vector(&self.bias)
    }

    pub fn predict(&self, x: &Matrix) -> Result<Vec<usize>> {
        let logits = self.logits(x)?;
        Ok(logits
            .iter_rows()
            .map(|r| {
                // first maximal entry, so ties (e.g. collapsed inputs) are deterministic
                let mut best = 0;
                for (j, &v) in r.iter().enumerate() {
                    if v > r[best] {
                        best = j;
                    }
                }
                best
            })
            .collect())
    }

    pub fn accuracy(&self, x: &Matrix, labels: &[usize]) -> Result<f64> {
        let pred = self.predict(x)?;
        let hits = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
        Ok(hits as f64 / labels.len().max(1) as f64)
    }

    /// One cross-entropy SGD step; returns the batch accuracy before the step.
    pub fn update(&mut self, x: &Matrix, labels: &[usize], lr: f64) -> Result<f64> {
        if labels.len() != x.rows() {
            return Err(Error::ShapeMismatch {
                expected: (x.rows(), 1),
                found: (labels.len(), 1),
            });
        }
        let k = self.classes();
        if let Some(&l) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::IndexOutOfRange { index: l, len: k });
        }
        let mut grad = self.logits(x)?;
        let m = x.rows() as f64;
        let mut hits = 0;
        for (i, &label) in labels.iter().enumerate() {
            let row = grad.row_mut(i);
            let mut best = 0;
            for j in 0..k {
                if row[j] > row[best] {
                    best = j;
                }
            }
            if best == label {
                hits += 1;
            }
            let max = row[best];
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum * m;
            }
            row[label] -= 1.0 / m;
        }
        let gw = x.matmul_tn(&grad)?;
        let gb = grad.col_sum();
        let mu = self.momentum;
        for ((w, v), g) in self
            .weight
            .data_mut()
            .iter_mut()
            .zip(self.v_weight.data_mut().iter_mut())
            .zip(gw.data())
        {
            *v = mu * *v + g;
            *w -= lr * *v;
        }
        for ((b, v), g) in self.bias.iter_mut().zip(self.v_bias.iter_mut()).zip(&gb) {
            *v = mu * *v + g;
            *b -= lr * *v;
        }
        Ok(hits as f64 / m)
    }
}

/// Train a fresh probe for `epochs` passes of full-batch steps and report
/// held-out accuracy.
pub fn fit_probe(
    train_x: &Matrix,
    train_y: &[usize],
    test_x: &Matrix,
    test_y: &[usize],
    classes: usize,
    epochs: usize,
    lr: f64,
) -> Result<f64> {
    let mut probe = LinearProbe::new(train_x.cols(), classes);
    for _ in 0..epochs {
        probe.update(train_x, train_y, lr)?;
    }
    probe.accuracy(test_x, test_y)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BiasProbe {
    /// `cossim(b_p, o_z)`.
    pub cossim: f64,
    /// `‖b_p − ((1−m̄)/m̄)·o_z‖ / ‖b_p‖`.
    pub residual: f64,
    pub m_bar: f64,
}

/// Compares a bias-only predictor's vector with the center of the encoder
/// outputs over a history of `(Z_a, Z_b)` batches. `m̄` is the mean of
/// `cossim(p_a, z_b)/‖p_a‖` with `p_a = Z_a + b_p`.
pub fn bias_center_probe(
    b_p: &[f64],
    history: &[(NormalizedBatch, NormalizedBatch)],
) -> Result<BiasProbe> {
    let b_norm = norm(b_p);
    if !(b_norm > ZERO_NORM) {
        return Err(Error::UntrainedPredictor);
    }
    if history.is_empty() {
        return Err(Error::BatchTooSmall(0));
    }
    let d = b_p.len();
    let mut center = vec![0.0; d];
    let mut m_sum = 0.0;
    let mut count = 0usize;
    for (za, zb) in history {
        za.z().ensure_shape(zb.z())?;
        if za.cols() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                found: za.cols(),
            });
        }
        for (a, b) in za.z().iter_rows().zip(zb.z().iter_rows()) {
            let p: Vec<f64> = a.iter().zip(b_p).map(|(x, y)| x + y).collect();
            let pn = norm(&p);
            m_sum += cosine_sim(&p, b)? / pn;
            crate::linalg::axpy(1.0, a, &mut center);
            count += 1;
        }
    }
    let n = count as f64;
    center.iter_mut().for_each(|c| *c /= n);
    let m_bar = m_sum / n;
    let scale = (1.0 - m_bar) / m_bar;
    let diff: Vec<f64> = b_p
        .iter()
        .zip(&center)
        .map(|(b, o)| b - scale * o)
        .collect();
    Ok(BiasProbe {
        cossim: cosine_sim(b_p, &center)?,
        residual: norm(&diff) / b_norm,
        m_bar,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlignmentReading {
    pub tau: f64,
    /// Cosine between InfoNCE's `r_e` and the decorrelation descent direction.
    pub r_e: Option<f64>,
    /// Same for the broadcast `o_e`.
    pub o_e: Option<f64>,
}

fn flat_cosine(a: &Matrix, b: &Matrix) -> Option<f64> {
    cosine_sim(a.data(), b.data()).ok()
}

/// For each `τ`, cosine between the InfoNCE extra-gradient components on
/// `Z_a` and the negative gradient of the decorrelation loss on `Z_a`.
/// Undefined readings (degenerate batches) are `None`.
pub fn decorrelation_alignment_probe(
    z_a: &NormalizedBatch,
    z_b: &NormalizedBatch,
    taus: &[f64],
) -> Result<Vec<AlignmentReading>> {
    let descent = decorrelation_loss(z_a.z())?.grads[0].scale(-1.0);
    let mut out = Vec::with_capacity(taus.len());
    for &tau in taus {
        let parts = infonce_parts(z_a, z_b, tau)?;
        let o_e = Matrix::broadcast_row(&parts.o_e, z_a.rows());
        out.push(AlignmentReading {
            tau,
            r_e: flat_cosine(&parts.r_e, &descent),
            o_e: flat_cosine(&o_e, &descent),
        });
    }
    Ok(out)
}

/// Centers of `Z` and `P` and the two η sweeps: SimSiam's `o_z − o_p` against
/// `o_p`, and the mirrored `o_p − o_z` against `o_z`.
#[derive(Debug, Clone, PartialEq)]
pub struct EtaProbe {
    pub o_z: Vec<f64>,
    pub o_p: Vec<f64>,
    pub simsiam: EtaSweepResult,
    pub mirror: EtaSweepResult,
}

pub fn eta_probe(z: &Matrix, p: &Matrix, grid: &[f64]) -> Result<EtaProbe> {
    z.ensure_shape(p)?;
    let o_z = decompose_matrix(z)?.center;
    let o_p = decompose_matrix(p)?.center;
    let e: Vec<f64> = o_z.iter().zip(&o_p).map(|(a, b)| a - b).collect();
    let neg: Vec<f64> = e.iter().map(|v| -v).collect();
    Ok(EtaProbe {
        simsiam: eta_sweep(&e, &o_p, grid)?,
        mirror: eta_sweep(&neg, &o_z, grid)?,
        o_z,
        o_p,
    })
}

/// Expected η crossings for the probe above, in closed form.
pub fn eta_crossings_closed_form(o_z: &[f64], o_p: &[f64]) -> (f64, f64) {
    let zp = dot(o_z, o_p);
    (zp / dot(o_p, o_p) - 1.0, zp / dot(o_z, o_z) - 1.0)
}

/// Points uniform on the unit sphere, used as a healthy reference batch.
pub fn sphere_sample(rows: usize, dim: usize, rng: &mut Rng) -> Result<NormalizedBatch> {
    crate::linalg::l2_normalize(&Matrix::random_normal(rows, dim, rng))
}
