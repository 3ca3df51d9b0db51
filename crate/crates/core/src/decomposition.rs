//! Center/residual decomposition of representation batches and of the extra
//! gradient, plus the component surgery used by the ablations.
//!
//! A batch `Z` splits as `Z_i = o + r_i` with `o` the batch mean. An extra
//! gradient `G_e = full − basic` splits the same way into `o_e` (its batch
//! mean) and `r_e` (what is left per row).

use crate::error::{Error, Result};
use crate::linalg::{cosine_sim, dot, norm, Matrix, NormalizedBatch, ZERO_NORM};

#[derive(Debug, Clone, PartialEq)]
pub struct CenterResidual {
    pub center: Vec<f64>,
    pub residuals: Matrix,
    /// `‖o‖` on the normalized batch.
    pub m_o: f64,
    /// Root-mean-square residual norm.
    pub m_r: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientDecomposition {
    pub basic: Matrix,
    pub extra: Matrix,
    pub o_e: Vec<f64>,
    pub r_e: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EtaSweepResult {
    pub grid: Vec<f64>,
    /// `None` where `o_e − η·o_ref` vanished.
    pub similarities: Vec<Option<f64>>,
    pub zero_crossing: Option<f64>,
}

pub fn decompose(z: &NormalizedBatch) -> Result<CenterResidual> {
    decompose_matrix(z.z())
}

/// Same as [`decompose`] for rows that are not required to be unit norm.
/// `m_o`/`m_r` are then absolute magnitudes rather than ratios.
pub fn decompose_matrix(z: &Matrix) -> Result<CenterResidual> {
    if z.rows() < 2 {
        return Err(Error::BatchTooSmall(z.rows()));
    }
    let center = z.col_mean();
    let neg: Vec<f64> = center.iter().map(|c| -c).collect();
    let residuals = z.add_row_vector(&neg)?;
    let m_o = norm(&center);
    let mean_sq = residuals.iter_rows().map(|r| dot(r, r)).sum::<f64>() / z.rows() as f64;
    Ok(CenterResidual {
        center,
        residuals,
        m_o,
        m_r: mean_sq.sqrt(),
    })
}

pub fn decompose_gradient(full_target: &Matrix, basic: &Matrix) -> Result<GradientDecomposition> {
    basic.ensure_shape(full_target)?;
    let extra = full_target.sub(basic)?;
    let o_e = extra.col_mean();
    let neg: Vec<f64> = o_e.iter().map(|c| -c).collect();
    let r_e = extra.add_row_vector(&neg)?;
    Ok(GradientDecomposition {
        basic: basic.clone(),
        extra,
        o_e,
        r_e,
    })
}

/// `basic + [o_e] + [r_e]`, the (detached) optimization target after surgery.
pub fn compose_target(
    basic: &Matrix,
    decomp: &GradientDecomposition,
    keep_o: bool,
    keep_r: bool,
) -> Result<Matrix> {
    basic.ensure_shape(&decomp.r_e)?;
    let mut out = basic.clone();
    if keep_o {
        out = out.add_row_vector(&decomp.o_e)?;
    }
    if keep_r {
        out.add_assign(&decomp.r_e)?;
    }
    Ok(out)
}

/// Default η grid: 64 evenly spaced points on `[-2, 2]`.
pub fn default_eta_grid() -> Vec<f64> {
    let n = 64;
    (0..n)
        .map(|i| -2.0 + 4.0 * i as f64 / (n - 1) as f64)
        .collect()
}

/// Cosine between `o_e − η·o_ref` and `o_ref` over `grid`, with the sign change
/// located by linear interpolation between neighbouring grid points.
pub fn eta_sweep(o_e: &[f64], o_ref: &[f64], grid: &[f64]) -> Result<EtaSweepResult> {
    let ref_norm = norm(o_ref);
    if !(ref_norm > ZERO_NORM) {
        return Err(Error::ZeroNormVector(ref_norm));
    }
    if o_e.len() != o_ref.len() {
        return Err(Error::ShapeMismatch {
            expected: (1, o_ref.len()),
            found: (1, o_e.len()),
        });
    }
    if grid.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::InvalidParameter(
            "η grid must be strictly ascending".into(),
        ));
    }
    let similarities: Vec<Option<f64>> = grid
        .iter()
        .map(|&eta| {
            let shifted: Vec<f64> = o_e.iter().zip(o_ref).map(|(e, r)| e - eta * r).collect();
            cosine_sim(&shifted, o_ref).ok()
        })
        .collect();

    let samples: Vec<(f64, f64)> = grid
        .iter()
        .zip(&similarities)
        .filter_map(|(&g, s)| s.map(|s| (g, s)))
        .collect();
    let mut zero_crossing = None;
    for (i, &(g, s)) in samples.iter().enumerate() {
        if s.abs() < 1e-12 {
            zero_crossing = Some(g);
            break;
        }
        if let Some(&(g1, s1)) = samples.get(i + 1) {
            if s * s1 < 0.0 && s1.abs() >= 1e-12 {
                zero_crossing = Some(g + (g1 - g) * s / (s - s1));
                break;
            }
        }
    }
    Ok(EtaSweepResult {
        grid: grid.to_vec(),
        similarities,
        zero_crossing,
    })
}
