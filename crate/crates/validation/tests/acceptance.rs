//! One test per acceptance criterion. Each prints a single
//! `criterion N: PASS|FAIL ...` line to stdout, uncaptured.

use std::io::Write;
use std::time::{Duration, Instant};

use siamlab::cli::presets::TAU_GRID;
use siamlab::cli::runner::{execute, prepare, Execution};
use siamlab::decomposition::decompose;
use siamlab::linalg::{
    dot, finite_diff_grad, l2_normalize, norm, normalize_backward, relative_error, Matrix,
    NormalizedBatch, Rng,
};
use siamlab::losses::{
    cosine_loss, decorrelation_loss, infonce_loss, infonce_parts, infonce_target, mean_row_entropy,
    mirror_loss, probe_losses, raw_mse_loss, simsiam_loss, simsiam_loss_with_surgery,
    simsiam_target, triplet_loss, ProbeMode, Surgery,
};
use siamlab::metrics::bias_center_probe;
use siamlab::network::{
    make_encoder, make_predictor, EncoderConfig, Layer, Mode, Network, PredictorVariant,
};
use siamlab::trainer::MetricsRecord;

const SEEDS: [u64; 3] = [0, 1, 2];
const FD_STEP: f64 = 1e-5;
const FD_TOL: f64 = 1e-4;
const FD_POINTS: usize = 50;

fn report(criterion: u32, ok: bool, detail: &str) {
    let verdict = if ok { "PASS" } else { "FAIL" };
    let line = format!("\ncriterion {criterion}: {verdict} {detail}\n");
    let _ = std::io::stdout().write_all(line.as_bytes());
    assert!(ok, "criterion {criterion} failed: {detail}");
}

fn run(name: &str, seed: u64, overrides: &[(&str, &str)]) -> (Execution, Duration) {
    let pairs: Vec<(String, String)> = overrides
        .iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect();
    let preset = prepare(name, seed, &pairs).unwrap();
    let start = Instant::now();
    let exec = execute(&preset.settings, &preset.protocol).unwrap();
    (exec, start.elapsed())
}

fn last(exec: &Execution) -> &MetricsRecord {
    exec.record.last().unwrap()
}

fn dim(name: &str) -> usize {
    prepare(name, 0, &[])
        .unwrap()
        .settings
        .config
        .encoder
        .output
}

fn collapsed(exec: &Execution, d: usize) -> bool {
    let r = last(exec);
    r.m_o > 0.99 && r.std < 0.1 / (d as f64).sqrt()
}

fn unit(rows: usize, cols: usize, rng: &mut Rng) -> NormalizedBatch {
    l2_normalize(&Matrix::random_normal(rows, cols, rng)).unwrap()
}

#[test]
fn criterion_01_normalized_mse_identity() {
    let mut rng = Rng::new(1);
    let mut worst = 0.0f64;
    for _ in 0..10_000 {
        let z = unit(2, 16, &mut rng);
        let (a, b) = (z.z().row(0), z.z().row(1));
        let mse: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / 2.0;
        worst = worst.max((mse - 1.0 + dot(a, b)).abs());
    }
    report(
        1,
        worst < 1e-9,
        &format!("max deviation {worst:.2e} over 10^4 pairs"),
    );
}

/// Worst relative error between analytic and central-difference gradients
/// over `FD_POINTS` random draws.
fn worst_fd<F>(mut draw: F) -> f64
where
    F: FnMut(&mut Rng) -> (Vec<f64>, Vec<f64>),
{
    let mut rng = Rng::new(2);
    (0..FD_POINTS)
        .map(|_| {
            let (analytic, numeric) = draw(&mut rng);
            relative_error(&analytic, &numeric)
        })
        .fold(0.0, f64::max)
}

fn split(flat: &[f64], shapes: &[(usize, usize)]) -> Vec<Matrix> {
    let mut out = Vec::new();
    let mut at = 0;
    for &(r, c) in shapes {
        out.push(Matrix::from_vec(r, c, flat[at..at + r * c].to_vec()).unwrap());
        at += r * c;
    }
    out
}

/// Loss on L2-normalized live inputs; the analytic gradient is pulled back
/// through the normalization and compared with differences on raw inputs.
fn unit_loss_check<L>(
    rng: &mut Rng,
    live: usize,
    (m, d): (usize, usize),
    loss: L,
) -> (Vec<f64>, Vec<f64>)
where
    L: Fn(&[NormalizedBatch]) -> (f64, Vec<Matrix>),
{
    let raws: Vec<Matrix> = (0..live)
        .map(|_| Matrix::random_normal(m, d, rng))
        .collect();
    let normed: Vec<NormalizedBatch> = raws.iter().map(|r| l2_normalize(r).unwrap()).collect();
    let (_, grads) = loss(&normed);
    let mut analytic = Vec::new();
    for ((g, raw), n) in grads.iter().zip(&raws).zip(&normed) {
        analytic.extend(
            normalize_backward(g, raw, n.raw_norms())
                .unwrap()
                .into_vec(),
        );
    }
    let flat: Vec<f64> = raws.iter().flat_map(|r| r.data().to_vec()).collect();
    let shapes = vec![(m, d); live];
    let numeric = finite_diff_grad(
        |p| {
            let batches: Vec<NormalizedBatch> = split(p, &shapes)
                .iter()
                .map(|r| l2_normalize(r).unwrap())
                .collect();
            loss(&batches).0
        },
        &flat,
        FD_STEP,
    )
    .unwrap();
    (analytic, numeric)
}

/// InfoNCE value with anchors live and positives/negatives frozen.
fn infonce_frozen(anchor: &Matrix, positives: &Matrix, negatives: &Matrix, tau: f64) -> f64 {
    let m = anchor.rows();
    let mut total = 0.0;
    for i in 0..m {
        let mut logits = vec![dot(anchor.row(i), positives.row(i)) / tau];
        logits.extend(
            (0..m)
                .filter(|&j| j != i)
                .map(|j| dot(anchor.row(i), negatives.row(j)) / tau),
        );
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        total += lse - logits[0];
    }
    total / m as f64
}

fn frozen_dot_loss(z: &Matrix, target: &Matrix) -> f64 {
    -z.iter_rows()
        .zip(target.iter_rows())
        .map(|(a, b)| dot(a, b))
        .sum::<f64>()
        / z.rows() as f64
}

fn layer_net(rng: &mut Rng, which: &str) -> Network {
    let (i, o) = (4, 5);
    let layers = match which {
        "linear" => vec![Layer::linear(i, o, true, rng)],
        "linear-nobias" => vec![Layer::linear(i, o, false, rng)],
        "bias" => {
            let mut b = Layer::bias(i);
            if let Layer::Bias { bias } = &mut b {
                bias.value = Matrix::random_normal(1, i, rng);
            }
            vec![b]
        }
        "batchnorm" => {
            let mut bn = Layer::batch_norm(i);
            if let Layer::BatchNorm { gamma, beta, .. } = &mut bn {
                gamma.value = Matrix::random_normal(1, i, rng);
                beta.value = Matrix::random_normal(1, i, rng);
            }
            vec![bn]
        }
        "batchnorm-fixed" => vec![Layer::batch_norm_fixed(i)],
        "relu" => vec![Layer::Relu { dim: i }],
        "tanh" => vec![Layer::Tanh { dim: i }],
        "l2norm" => vec![Layer::L2Norm { dim: i }],
        _ => unreachable!(),
    };
    Network::new(i, layers).unwrap()
}

/// Gradient of `Σ W ⊙ net(x)` with respect to parameters and input.
fn network_check(rng: &mut Rng, net: &Network, rows: usize) -> (Vec<f64>, Vec<f64>) {
    let x = Matrix::random_normal(rows, net.input_dim(), rng);
    let w = Matrix::random_normal(rows, net.output_dim(), rng);
    let mut live = net.clone();
    let (_, tape) = live.forward(&x, Mode::Train).unwrap();
    live.zero_grad();
    let grad_x = live.backward(&tape, &w).unwrap();
    let mut analytic = live.grads_flat();
    analytic.extend(grad_x.into_vec());
    let n_params = net.num_params();
    let mut point = net.params_flat();
    point.extend(x.data().to_vec());
    let numeric = finite_diff_grad(
        |p| {
            let mut probe = net.clone();
            probe.set_params_flat(&p[..n_params]).unwrap();
            let xs = Matrix::from_vec(x.rows(), x.cols(), p[n_params..].to_vec()).unwrap();
            let y = probe.forward(&xs, Mode::Train).unwrap().0;
            y.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
        },
        &point,
        FD_STEP,
    )
    .unwrap();
    (analytic, numeric)
}

#[test]
fn criterion_02_gradient_oracle() {
    let shape = (5, 4);
    let mut results: Vec<(String, f64)> = Vec::new();
    let mut add = |name: &str, err: f64| results.push((name.to_string(), err));

    add(
        "cosine",
        worst_fd(|rng| {
            let t = Matrix::random_normal(5, 4, rng);
            unit_loss_check(rng, 1, shape, |b| {
                let o = cosine_loss(&b[0], &t).unwrap();
                (o.value, o.grads)
            })
        }),
    );
    add(
        "simsiam",
        worst_fd(|rng| {
            let (za, zb) = (unit(5, 4, rng), unit(5, 4, rng));
            unit_loss_check(rng, 2, shape, |b| {
                let o = simsiam_loss(&b[0], &b[1], &za, &zb).unwrap();
                (o.value, o.grads)
            })
        }),
    );
    for (label, surgery) in [
        ("simsiam-keep-o", Surgery::ONLY_O),
        ("simsiam-keep-r", Surgery::ONLY_R),
        ("simsiam-none", Surgery::NONE),
    ] {
        add(
            label,
            worst_fd(|rng| {
                let (pa, pb, za, zb) = (
                    unit(5, 4, rng),
                    unit(5, 4, rng),
                    unit(5, 4, rng),
                    unit(5, 4, rng),
                );
                let ta = simsiam_target(pb.z(), zb.z(), surgery).unwrap();
                let tb = simsiam_target(pa.z(), za.z(), surgery).unwrap();
                let o = simsiam_loss_with_surgery(&pa, &pb, &za, &zb, surgery).unwrap();
                let raw = [pa.z().clone(), pb.z().clone()];
                let numeric = finite_diff_grad(
                    |p| {
                        let m = split(p, &[(5, 4), (5, 4)]);
                        (frozen_dot_loss(&m[0], &ta) + frozen_dot_loss(&m[1], &tb)) / 2.0
                    },
                    &[raw[0].data(), raw[1].data()].concat(),
                    FD_STEP,
                )
                .unwrap();
                let analytic = [o.grads[0].data(), o.grads[1].data()].concat();
                (analytic, numeric)
            }),
        );
    }
    add(
        "mirror",
        worst_fd(|rng| {
            unit_loss_check(rng, 4, shape, |b| {
                let o = mirror_loss(&b[2], &b[3], &b[0], &b[1]).unwrap();
                (o.value, o.grads)
            })
        }),
    );
    for (label, surgery) in [
        ("triplet", Surgery::FULL),
        ("triplet-keep-o", Surgery::ONLY_O),
        ("triplet-keep-r", Surgery::ONLY_R),
    ] {
        add(
            label,
            worst_fd(|rng| {
                let zb = unit(5, 4, rng);
                let negatives = rng.derangement(5);
                unit_loss_check(rng, 1, shape, |b| {
                    let o = triplet_loss(&b[0], &zb, &negatives, surgery).unwrap();
                    (o.value, o.grads)
                })
            }),
        );
    }
    for tau in [0.1, 0.5] {
        add(
            &format!("infonce tau={tau}"),
            worst_fd(|rng| {
                let raw = Matrix::random_normal(5, 4, rng);
                let za = l2_normalize(&raw).unwrap();
                let zb = unit(5, 4, rng);
                let o = infonce_loss(&za, &zb, tau, Surgery::FULL).unwrap();
                let analytic = normalize_backward(&o.grads[0], &raw, za.raw_norms())
                    .unwrap()
                    .into_vec();
                let negatives = za.z().clone();
                let numeric = finite_diff_grad(
                    |p| {
                        let m = Matrix::from_vec(5, 4, p.to_vec()).unwrap();
                        infonce_frozen(l2_normalize(&m).unwrap().z(), zb.z(), &negatives, tau)
                    },
                    raw.data(),
                    FD_STEP,
                )
                .unwrap();
                (analytic, numeric)
            }),
        );
    }
    add(
        "decorrelation",
        worst_fd(|rng| {
            let z = Matrix::random_normal(6, 4, rng);
            let g = decorrelation_loss(&z).unwrap().grads.remove(0);
            let numeric = finite_diff_grad(
                |p| {
                    decorrelation_loss(&Matrix::from_vec(6, 4, p.to_vec()).unwrap())
                        .unwrap()
                        .value
                },
                z.data(),
                FD_STEP,
            )
            .unwrap();
            (g.into_vec(), numeric)
        }),
    );
    for mode in [ProbeMode::Center, ProbeMode::Residual] {
        add(
            &format!("probe {mode:?}"),
            worst_fd(|rng| {
                let raw = Matrix::random_normal(5, 4, rng);
                let z = l2_normalize(&raw).unwrap();
                let o = probe_losses(&z, mode).unwrap();
                let center = z.z().col_mean();
                let target = match mode {
                    ProbeMode::Center => Matrix::broadcast_row(&center, 5),
                    ProbeMode::Residual => z.z().sub(&Matrix::broadcast_row(&center, 5)).unwrap(),
                };
                let analytic = normalize_backward(&o.grads[0], &raw, z.raw_norms())
                    .unwrap()
                    .into_vec();
                let numeric = finite_diff_grad(
                    |p| {
                        let m = Matrix::from_vec(5, 4, p.to_vec()).unwrap();
                        frozen_dot_loss(l2_normalize(&m).unwrap().z(), &target)
                    },
                    raw.data(),
                    FD_STEP,
                )
                .unwrap();
                (analytic, numeric)
            }),
        );
    }
    add(
        "raw-mse",
        worst_fd(|rng| {
            let (a, b) = (
                Matrix::random_normal(5, 4, rng),
                Matrix::random_normal(5, 4, rng),
            );
            let g = raw_mse_loss(&a, &b).unwrap().grads.remove(0);
            let numeric = finite_diff_grad(
                |p| {
                    raw_mse_loss(&Matrix::from_vec(5, 4, p.to_vec()).unwrap(), &b)
                        .unwrap()
                        .value
                },
                a.data(),
                FD_STEP,
            )
            .unwrap();
            (g.into_vec(), numeric)
        }),
    );
    for layer in [
        "linear",
        "linear-nobias",
        "bias",
        "batchnorm",
        "batchnorm-fixed",
        "relu",
        "tanh",
        "l2norm",
    ] {
        add(
            &format!("layer {layer}"),
            worst_fd(|rng| {
                let net = layer_net(rng, layer);
                network_check(rng, &net, 6)
            }),
        );
    }
    for (final_bn, final_affine, l2norm) in [
        (true, true, true),
        (true, false, true),
        (false, true, true),
        (true, true, false),
    ] {
        add(
            &format!("encoder bn={final_bn} affine={final_affine} l2={l2norm}"),
            worst_fd(|rng| {
                let cfg = EncoderConfig {
                    input: 4,
                    hidden: 6,
                    output: 3,
                    final_bn,
                    final_affine,
                    l2norm,
                };
                let net = make_encoder(cfg, rng).unwrap();
                network_check(rng, &net, 6)
            }),
        );
    }
    for variant in [
        PredictorVariant::NonlinearMlp,
        PredictorVariant::TwoFc,
        PredictorVariant::TanhFc,
        PredictorVariant::BiasOnly,
    ] {
        add(
            &format!("predictor {}", variant.name()),
            worst_fd(|rng| {
                let mut net = make_predictor(variant, 3, 5, rng).unwrap();
                for v in net.params_mut() {
                    v.value = Matrix::random_normal(v.value.rows(), v.value.cols(), rng).scale(0.5);
                }
                network_check(rng, &net, 6)
            }),
        );
    }

    let failing: Vec<String> = results
        .iter()
        .filter(|(_, e)| e.is_nan() || *e >= FD_TOL)
        .map(|(n, e)| format!("{n}={e:.1e}"))
        .collect();
    let worst = results.iter().map(|r| r.1).fold(0.0, f64::max);
    let detail = format!(
        "{} gradients x {FD_POINTS} points, worst rel err {worst:.2e}{}",
        results.len(),
        if failing.is_empty() {
            String::new()
        } else {
            format!(", failing: {}", failing.join(", "))
        }
    );
    report(2, failing.is_empty(), &detail);
}

#[test]
fn criterion_03_decomposition_identities() {
    let mut rng = Rng::new(3);
    let (mut rebuild, mut sum, mut pyth) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..200 {
        let z = unit(32, 16, &mut rng);
        let d = decompose(&z).unwrap();
        rebuild = rebuild.max(
            d.residuals
                .add_row_vector(&d.center)
                .unwrap()
                .max_abs_diff(z.z()),
        );
        sum = sum.max(
            d.residuals
                .col_sum()
                .iter()
                .map(|v| v.abs())
                .fold(0.0, f64::max),
        );
        pyth = pyth.max((d.m_o.powi(2) + d.m_r.powi(2) - 1.0).abs());
    }
    let ok = rebuild <= 1e-12 && sum <= 1e-9 && pyth <= 1e-9;
    report(
        3,
        ok,
        &format!("|Z-(o+r)|={rebuild:.1e} |sum r|={sum:.1e} |m_o^2+m_r^2-1|={pyth:.1e}"),
    );
}

#[test]
fn criterion_04_infonce_decomposition() {
    let mut rng = Rng::new(4);
    let (m, d) = (16, 32);
    let (mut grad_err, mut sum_err, mut uniform_err) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..20 {
        let (za, zb) = (unit(m, d, &mut rng), unit(m, d, &mut rng));
        let tau = 0.2;
        let parts = infonce_parts(&za, &zb, tau).unwrap();
        let decomposed = infonce_target(zb.z(), &parts, tau, Surgery::FULL).unwrap();
        for i in 0..m {
            let mut logits = vec![dot(za.z().row(i), zb.z().row(i)) / tau];
            let mut rows = vec![zb.z().row(i)];
            for j in (0..m).filter(|&j| j != i) {
                logits.push(dot(za.z().row(i), za.z().row(j)) / tau);
                rows.push(za.z().row(j));
            }
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let s: f64 = w.iter().sum();
            // Negative softmax gradient of −log λ_0 with respect to the anchor.
            let direct: Vec<f64> = (0..d)
                .map(|c| {
                    (zb.z().get(i, c)
                        - rows
                            .iter()
                            .zip(&w)
                            .map(|(r, wk)| wk / s * r[c])
                            .sum::<f64>())
                        / tau
                })
                .collect();
            let diff = direct
                .iter()
                .zip(decomposed.row(i))
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            grad_err = grad_err.max(diff);
        }
        let via_loss = infonce_loss(&za, &zb, tau, Surgery::FULL)
            .unwrap()
            .grads
            .remove(0)
            .scale(-(m as f64));
        grad_err = grad_err.max(via_loss.max_abs_diff(&decomposed));
        for row in parts.lambda.iter_rows() {
            sum_err = sum_err.max((row.iter().sum::<f64>() - 1.0).abs());
        }
        let hot = infonce_parts(&za, &zb, 100.0).unwrap();
        let uniform = 1.0 / m as f64;
        for v in hot.lambda.data() {
            uniform_err = uniform_err.max((v - uniform).abs() / uniform);
        }
    }
    let ok = grad_err < 1e-9 && sum_err < 1e-9 && uniform_err < 0.01;
    report(
        4,
        ok,
        &format!("grad diff {grad_err:.1e}, |sum lambda - 1| {sum_err:.1e}, tau=100 max rel dev {uniform_err:.2e}"),
    );
}

fn matrix_check(criterion: u32, cases: &[(&str, bool)]) {
    let mut ok = true;
    let mut detail = Vec::new();
    for &(name, want_collapse) in cases {
        let d = dim(name);
        for seed in SEEDS {
            let (exec, _) = run(name, seed, &[]);
            let got = collapsed(&exec, d);
            let r = last(&exec);
            if got != want_collapse {
                ok = false;
                detail.push(format!("{name}/s{seed} m_o={:.3} std={:.4}", r.m_o, r.std));
            }
        }
    }
    let summary = if ok {
        "all presets match on seeds 0,1,2".to_string()
    } else {
        format!("mismatched: {}", detail.join(", "))
    };
    report(criterion, ok, &summary);
}

#[test]
fn criterion_05_collapse_matrix() {
    let mut ok = true;
    let mut notes = Vec::new();
    let mut slowest = Duration::ZERO;
    for name in [
        "table2-naive",
        "table2-mirror",
        "table2-symmetric-predictor",
    ] {
        let d = dim(name);
        for seed in SEEDS {
            let (exec, t) = run(name, seed, &[]);
            slowest = slowest.max(t);
            if !collapsed(&exec, d) {
                ok = false;
                let r = last(&exec);
                notes.push(format!(
                    "{name}/s{seed} not collapsed (m_o={:.3} std={:.4})",
                    r.m_o, r.std
                ));
            }
        }
    }
    for name in ["table2-simsiam", "table2-inverse-predictor"] {
        for seed in SEEDS {
            let (exec, t) = run(name, seed, &[]);
            slowest = slowest.max(t);
            let r = last(&exec);
            let chance = 1.0 / exec.num_classes as f64;
            if !(r.m_r > 0.5 && r.probe_acc >= 3.0 * chance) {
                ok = false;
                notes.push(format!(
                    "{name}/s{seed} m_r={:.3} acc={:.3}",
                    r.m_r, r.probe_acc
                ));
            }
        }
    }
    ok &= slowest < Duration::from_secs(60);
    let detail = format!(
        "slowest run {:.1}s; {}",
        slowest.as_secs_f64(),
        if notes.is_empty() {
            "all hold".into()
        } else {
            notes.join(", ")
        }
    );
    report(5, ok, &detail);
}

#[test]
fn criterion_06_triplet_surgery() {
    matrix_check(
        6,
        &[
            ("table3-full", false),
            ("table3-keep-o", false),
            ("table3-keep-r", true),
        ],
    );
}

#[test]
fn criterion_07_simsiam_surgery() {
    matrix_check(
        7,
        &[
            ("table4-full", false),
            ("table4-keep-o", false),
            ("table4-keep-r", false),
            ("table4-none", true),
        ],
    );
}

#[test]
fn criterion_08_moving_average_and_same_batch() {
    matrix_check(
        8,
        &[
            ("table1-moving-average", false),
            ("table1-samebatch-10", true),
            ("table1-samebatch-25", true),
        ],
    );
}

/// History whose targets all equal the center direction; the bias is put on
/// the fixed point by bisection on its length.
fn injected_bias_residual() -> f64 {
    let mut rng = Rng::new(9);
    let (m, d) = (64, 8);
    let mut raw = Matrix::random_normal(m, d, &mut rng);
    for row in 0..m {
        raw.row_mut(row)[0] += 2.0;
    }
    let za = l2_normalize(&raw).unwrap();
    let center = za.z().col_mean();
    let dir: Vec<f64> = center.iter().map(|c| c / norm(&center)).collect();
    let zb = NormalizedBatch::from_unit_rows(Matrix::broadcast_row(&dir, m)).unwrap();
    let history = vec![(za, zb)];
    let gap = |s: f64| {
        let b: Vec<f64> = center.iter().map(|c| s * c).collect();
        let p = bias_center_probe(&b, &history).unwrap();
        (s - (1.0 - p.m_bar) / p.m_bar, p.residual)
    };
    let (mut lo, mut hi) = (1e-6, 1e3);
    assert!(gap(lo).0 < 0.0 && gap(hi).0 > 0.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if gap(mid).0 < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    gap(0.5 * (lo + hi)).1
}

#[test]
fn criterion_09_bias_fixed_point() {
    let injected = injected_bias_residual();
    let mut ok = injected < 1e-9;
    let mut notes = vec![format!("injected residual {injected:.1e}")];
    for seed in SEEDS {
        let (exec, _) = run("table6-bias", seed, &[]);
        let c = exec.reading("bias_cossim").unwrap();
        let r = exec.reading("bias_residual").unwrap();
        ok &= c >= 0.95 && r < 0.2;
        notes.push(format!("s{seed} cossim={c:.3} residual={r:.3}"));
    }
    report(9, ok, &notes.join(", "));
}

#[test]
fn criterion_10_eta_crossings() {
    let mut ok = true;
    let mut notes = Vec::new();
    for seed in SEEDS {
        let (exec, _) = run("fig4a", seed, &[]);
        let s = exec.reading("eta_simsiam").unwrap();
        let m = exec.reading("eta_mirror").unwrap();
        ok &= s < 0.0 && m > 0.0;
        notes.push(format!("s{seed} simsiam={s:.3} mirror={m:.3}"));
    }
    report(10, ok, &notes.join(", "));
}

#[test]
fn criterion_11_center_and_residual_probes() {
    let (center, _) = run("fig3-center", 0, &[]);
    let (residual, _) = run("fig3-residual", 0, &[]);
    let (c0, c1) = (center.record.trajectory[0].m_o, last(&center).m_o);
    let (r0, r1) = (residual.record.trajectory[0].m_r, last(&residual).m_r);
    let window = last(&center).step;
    let ok = c1 > c0 && r1 > r0 && window >= 499;
    report(
        11,
        ok,
        &format!("m_o {c0:.4} -> {c1:.4}, m_r {r0:.5} -> {r1:.5} over {window} steps"),
    );
}

#[test]
fn criterion_12_decorrelation_recovery() {
    let (exec, _) = run("fig4b", 0, &[]);
    let c = exec.reading("m_r_collapsed").unwrap();
    let r = exec.reading("m_r_restored").unwrap();
    report(
        12,
        c < 0.1 && r > 0.5,
        &format!("m_r after collapse {c:.4}, after regularizer-only phase {r:.4}"),
    );
}

#[test]
fn criterion_13_temperature_study() {
    let mut rng = Rng::new(13);
    let (za, zb) = (unit(64, 16, &mut rng), unit(64, 16, &mut rng));
    let entropies: Vec<f64> = TAU_GRID
        .iter()
        .map(|&tau| mean_row_entropy(&infonce_parts(&za, &zb, tau).unwrap().lambda))
        .collect();
    let monotone = entropies.windows(2).all(|w| w[1] >= w[0]);

    let mut grid = TAU_GRID.to_vec();
    grid.push(2.0);
    let mut majority = 0;
    let mut notes = Vec::new();
    for seed in SEEDS {
        let covs: Vec<f64> = grid
            .iter()
            .map(|tau| last(&run("fig6", seed, &[("arch.tau", &tau.to_string())]).0).covariance)
            .collect();
        let rising = covs.windows(2).filter(|w| w[1] >= w[0]).count();
        majority += usize::from(rising >= 4);
        notes.push(format!("s{seed} {rising}/5"));
    }
    let ok = monotone && majority >= 2;
    let entropy_text: Vec<String> = entropies.iter().map(|e| format!("{e:.3}")).collect();
    report(
        13,
        ok,
        &format!(
            "entropy [{}], covariance nondecreasing pairs {}",
            entropy_text.join(" "),
            notes.join(", ")
        ),
    );
}

#[test]
fn criterion_14_covariance_trends() {
    let mut ok = true;
    let mut notes = Vec::new();
    for seed in SEEDS {
        let full = last(&run("fig5-infonce", seed, &[]).0).covariance;
        let no_re = last(&run("fig5-infonce-no-re", seed, &[]).0).covariance;
        ok &= no_re > full;
        notes.push(format!("s{seed} no-r_e {no_re:.2e} vs full {full:.2e}"));
    }
    let (ss, _) = run("fig5-simsiam", 0, &[]);
    let at100 = ss.record.at_step(100).unwrap().covariance;
    let end = last(&ss).covariance;
    ok &= end < at100;
    notes.push(format!("simsiam {at100:.2e} at step 100 -> {end:.2e}"));
    report(14, ok, &notes.join(", "));
}

#[test]
fn criterion_15_alignment_probe() {
    let mut ok = true;
    let mut notes = Vec::new();
    for seed in SEEDS {
        let (exec, _) = run("fig4c", seed, &[]);
        for tau in [0.1, 0.2] {
            let r = exec.reading(&format!("align_r_e_tau{tau}")).unwrap();
            let o = exec.reading(&format!("align_o_e_tau{tau}")).unwrap();
            ok &= r > o;
            notes.push(format!("s{seed} tau={tau} r_e={r:.3} o_e={o:.1e}"));
        }
    }
    report(15, ok, &notes.join(", "));
}

#[test]
fn criterion_16_bn_mse() {
    let d = dim("fig8-bn");
    let threshold = 0.1 / (d as f64).sqrt();
    let mut ok = true;
    let mut notes = Vec::new();
    for seed in SEEDS {
        let with_bn = last(&run("fig8-bn", seed, &[]).0).std;
        let (no_bn_exec, _) = run("fig8-no-bn", seed, &[]);
        ok &= with_bn > threshold && collapsed(&no_bn_exec, d);
        notes.push(format!(
            "s{seed} std with BN {with_bn:.4}, without {:.1e}",
            last(&no_bn_exec).std
        ));
    }
    report(
        16,
        ok,
        &format!("threshold {threshold:.4}; {}", notes.join(", ")),
    );
}

#[test]
fn criterion_17_determinism() {
    let short = [
        ("train.warmup", "5"),
        ("train.steps", "60"),
        ("train.metric_every", "20"),
    ];
    let mut mismatched = Vec::new();
    let names = siamlab::cli::presets::names();
    for name in &names {
        let a = run(name, 7, &short).0;
        let b = run(name, 7, &short).0;
        if a.record.to_csv_string() != b.record.to_csv_string() || a.checkpoint != b.checkpoint {
            mismatched.push(*name);
        }
    }
    let detail = if mismatched.is_empty() {
        format!("{} presets rerun byte-identically", names.len())
    } else {
        format!("differing: {}", mismatched.join(", "))
    };
    report(17, mismatched.is_empty(), &detail);
}
