//! Self-checks runnable from the command line.

use crate::cli::config::parse_config;
use crate::cli::plot::render_svg;
use crate::cli::presets::registry;
use crate::cli::runner::{evaluate, execute};
use crate::data::{synth_generate, SyntheticSpec};
use crate::decomposition::{compose_target, decompose, decompose_gradient};
use crate::error::{Error, Result};
use crate::linalg::{
    cosine_sim, cosine_sim_grad, finite_diff_grad, l2_normalize, normalize_backward,
    relative_error, Matrix, Rng,
};
use crate::losses::{decorrelation_loss, infonce_parts, simsiam_loss, simsiam_target, Surgery};
use crate::network::{make_encoder, EncoderConfig, Mode};

pub const SUITES: [&str; 8] = [
    "all",
    "linalg",
    "decomposition",
    "losses",
    "network",
    "data",
    "trainer",
    "cli",
];

const FD_STEP: f64 = 1e-5;
const FD_TOL: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub suite: &'static str,
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Report {
    pub checks: Vec<Check>,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    /// One `suite  name  PASS|FAIL  detail` line per check.
    pub fn to_tsv(&self) -> String {
        self.checks
            .iter()
            .map(|c| {
                let verdict = if c.passed { "PASS" } else { "FAIL" };
                format!("{}\t{}\t{verdict}\t{}\n", c.suite, c.name, c.detail)
            })
            .collect()
    }

    fn push(
        &mut self,
        suite: &'static str,
        name: impl Into<String>,
        outcome: Result<(bool, String)>,
    ) {
        let (passed, detail) = outcome.unwrap_or_else(|e| (false, format!("error: {e}")));
        self.checks.push(Check {
            suite,
            name: name.into(),
            passed,
            detail,
        });
    }
}

pub fn run_suite(suite: &str) -> Result<Report> {
    let mut report = Report::default();
    let selected: Vec<&str> = match suite {
        "all" => SUITES[1..].to_vec(),
        s if SUITES.contains(&s) => vec![s],
        _ => {
            return Err(Error::InvalidParameter(format!(
                "unknown suite `{suite}` (use one of {SUITES:?})"
            )))
        }
    };
    for s in selected {
        match s {
            "linalg" => linalg(&mut report),
            "decomposition" => decomposition(&mut report),
            "losses" => losses(&mut report),
            "network" => network(&mut report),
            "data" => data(&mut report),
            "trainer" => trainer(&mut report),
            _ => cli(&mut report),
        }
    }
    Ok(report)
}

fn fd_verdict(analytic: &[f64], numeric: &[f64]) -> (bool, String) {
    let err = relative_error(analytic, numeric);
    (
        err < FD_TOL,
        format!("rel_err={err:.2e} over {} points", analytic.len()),
    )
}

fn linalg(report: &mut Report) {
    let mut rng = Rng::new(11);
    let a = Matrix::random_normal(7, 5, &mut rng);
    let b = Matrix::random_normal(5, 6, &mut rng);
    report.push(
        "linalg",
        "matmul matches transposed forms",
        (|| {
            let ab = a.matmul(&b)?;
            let via_tn = a.transpose().matmul_tn(&b)?;
            let via_nt = a.matmul_nt(&b.transpose())?;
            let err = ab.max_abs_diff(&via_tn).max(ab.max_abs_diff(&via_nt));
            Ok((err < 1e-12, format!("max_diff={err:.1e}")))
        })(),
    );
    report.push(
        "linalg",
        "normalized rows are unit",
        (|| {
            let n = l2_normalize(&a)?;
            let worst = n
                .z()
                .row_norms()
                .iter()
                .map(|v| (v - 1.0).abs())
                .fold(0.0, f64::max);
            Ok((worst < 1e-12, format!("max |norm-1|={worst:.1e}")))
        })(),
    );
    report.push(
        "linalg",
        "cosine gradient",
        (|| {
            let x: Vec<f64> = a.row(0).to_vec();
            let y: Vec<f64> = a.row(1).to_vec();
            let g = cosine_sim_grad(&x, &y)?;
            let fd = finite_diff_grad(|p| cosine_sim(p, &y).unwrap_or(f64::NAN), &x, FD_STEP)?;
            Ok(fd_verdict(&g, &fd))
        })(),
    );
    let w = Matrix::random_normal(7, 5, &mut rng);
    report.push("linalg", "normalization backward", normalize_check(&a, &w));
}

fn normalize_check(a: &Matrix, w: &Matrix) -> Result<(bool, String)> {
    let n = l2_normalize(a)?;
    let g = normalize_backward(w, a, n.raw_norms())?;
    let (rows, cols) = a.shape();
    let fd = finite_diff_grad(
        |p| {
            let m = Matrix::from_vec(rows, cols, p.to_vec()).expect("shape");
            l2_normalize(&m).map_or(f64::NAN, |z| {
                z.z().data().iter().zip(w.data()).map(|(x, y)| x * y).sum()
            })
        },
        a.data(),
        FD_STEP,
    )?;
    Ok(fd_verdict(g.data(), &fd))
}

fn decomposition(report: &mut Report) {
    let mut rng = Rng::new(12);
    report.push(
        "decomposition",
        "center plus residual rebuilds Z",
        (|| {
            let z = l2_normalize(&Matrix::random_normal(16, 8, &mut rng))?;
            let d = decompose(&z)?;
            let rebuilt = d.residuals.add_row_vector(&d.center)?;
            let err = rebuilt.max_abs_diff(z.z());
            let col = d
                .residuals
                .col_sum()
                .iter()
                .map(|v| v.abs())
                .fold(0.0, f64::max);
            Ok((
                err < 1e-12 && col < 1e-12,
                format!("rebuild={err:.1e} residual col sum={col:.1e}"),
            ))
        })(),
    );
}

fn losses(report: &mut Report) {
    let mut rng = Rng::new(13);
    let z = Matrix::random_normal(6, 4, &mut rng);
    report.push(
        "losses",
        "basic plus extra gradient rebuilds the loss gradient",
        (|| {
            let unit = |rng: &mut Rng| l2_normalize(&Matrix::random_normal(6, 4, rng));
            let (p_a, p_b, z_a, z_b) = (
                unit(&mut rng)?,
                unit(&mut rng)?,
                unit(&mut rng)?,
                unit(&mut rng)?,
            );
            let full = simsiam_loss(&p_a, &p_b, &z_a, &z_b)?;
            let d = decompose_gradient(z_b.z(), p_b.z())?;
            let rebuilt = compose_target(p_b.z(), &d, true, true)?.scale(-0.5 / 6.0);
            let via_target = simsiam_target(p_b.z(), z_b.z(), Surgery::FULL)?.scale(-0.5 / 6.0);
            let err = rebuilt
                .max_abs_diff(full.grad(0))
                .max(via_target.max_abs_diff(full.grad(0)));
            let o_sum = d.r_e.col_sum().iter().map(|v| v.abs()).fold(0.0, f64::max);
            Ok((
                err < 1e-12 && o_sum < 1e-12,
                format!("max_diff={err:.1e} r_e col sum={o_sum:.1e}"),
            ))
        })(),
    );
    report.push(
        "losses",
        "decorrelation gradient",
        (|| {
            let g = decorrelation_loss(&z)?.grads[0].clone();
            let fd = finite_diff_grad(
                |p| {
                    let m = Matrix::from_vec(6, 4, p.to_vec()).expect("shape");
                    decorrelation_loss(&m).map_or(f64::NAN, |o| o.value)
                },
                z.data(),
                FD_STEP,
            )?;
            Ok(fd_verdict(g.data(), &fd))
        })(),
    );
    report.push(
        "losses",
        "infonce weights are a distribution",
        (|| {
            let a = l2_normalize(&z)?;
            let b = l2_normalize(&Matrix::random_normal(6, 4, &mut rng))?;
            let parts = infonce_parts(&a, &b, 0.2)?;
            let worst = parts
                .lambda
                .iter_rows()
                .map(|r| (r.iter().sum::<f64>() - 1.0).abs())
                .fold(0.0, f64::max);
            Ok((worst < 1e-12, format!("max |sum-1|={worst:.1e}")))
        })(),
    );
}

fn network(report: &mut Report) {
    report.push(
        "network",
        "encoder parameter gradient",
        (|| {
            let mut rng = Rng::new(14);
            let cfg = EncoderConfig {
                input: 4,
                hidden: 5,
                output: 3,
                l2norm: false,
                ..EncoderConfig::default()
            };
            let mut net = make_encoder(cfg, &mut rng)?;
            let x = Matrix::random_normal(6, 4, &mut rng);
            let w = Matrix::random_normal(6, 3, &mut rng);
            let (y, tape) = net.forward(&x, Mode::Train)?;
            net.zero_grad();
            net.backward(&tape, &w)?;
            let analytic = net.grads_flat();
            let _ = y;
            let start = net.params_flat();
            let fd = finite_diff_grad(
                |p| {
                    let mut probe = net.clone();
                    probe.set_params_flat(p).expect("length");
                    let y = probe.forward(&x, Mode::Train).expect("forward").0;
                    y.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
                },
                &start,
                FD_STEP,
            );
            Ok(fd_verdict(&analytic, &fd?))
        })(),
    );
}

fn data(report: &mut Report) {
    report.push(
        "data",
        "synthetic generation is seeded",
        (|| {
            let spec = SyntheticSpec {
                per_class: 5,
                ..SyntheticSpec::default()
            };
            let a = synth_generate(&spec)?;
            let b = synth_generate(&spec)?;
            let same = a.samples == b.samples && a.labels == b.labels;
            Ok((same && a.len() == 50, format!("{} samples", a.len())))
        })(),
    );
}

fn trainer(report: &mut Report) {
    for preset in registry() {
        let outcome = execute(&preset.settings, &preset.protocol).map(|exec| {
            let outcomes: Vec<_> = preset.claims.iter().map(|c| evaluate(c, &exec)).collect();
            let held = outcomes.iter().all(|o| o.held);
            let detail = outcomes
                .iter()
                .map(|o| format!("{}: {}", o.claim, o.detail))
                .collect::<Vec<_>>()
                .join("; ");
            (held, detail)
        });
        report.push("trainer", preset.name, outcome);
    }
}

fn cli(report: &mut Report) {
    report.push(
        "cli",
        "config parsing",
        (|| {
            let pairs = parse_config("# c\nsteps = 10\n\ndata.sigma=0.2\n")?;
            Ok((pairs.len() == 2, format!("{pairs:?}")))
        })(),
    );
    report.push(
        "cli",
        "plot rendering",
        (|| {
            let svg = render_svg("step,m_o\n0,0.1\n10,0.5\n", &["m_o"])?;
            Ok((
                svg.starts_with("<svg") && svg.contains("polyline"),
                format!("{} bytes", svg.len()),
            ))
        })(),
    );
}
