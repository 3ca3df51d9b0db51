//! Executes presets, writes run artifacts and aggregates sweeps.

use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use crate::cli::config::RunSettings;
use crate::cli::plot::render_svg;
use crate::cli::presets::{find, Claim, Preset, Protocol};
use crate::data::synth_generate;
use crate::decomposition::{default_eta_grid, eta_sweep};
use crate::error::{Error, Result};
use crate::losses::LossKind;
use crate::metrics::{bias_center_probe, decorrelation_alignment_probe, eta_probe, EtaProbe};
use crate::network::{Layer, Network};
use crate::trainer::{ArchitectureSpec, RunRecord, Trainer};

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "SIAMLAB_OUT";

pub fn default_out_root() -> PathBuf {
    std::env::var_os(OUT_ENV).map_or_else(|| PathBuf::from("siamlab-runs"), PathBuf::from)
}

/// Everything a protocol produced.
#[derive(Debug, Clone)]
pub struct Execution {
    pub record: RunRecord,
    /// Named scalar probe results; `NaN` marks an undefined reading.
    pub readings: Vec<(String, f64)>,
    pub eta: Option<EtaProbe>,
    pub checkpoint: String,
    pub num_classes: usize,
}

impl Execution {
    pub fn reading(&self, name: &str) -> Option<f64> {
        self.readings.iter().find(|(n, _)| n == name).map(|r| r.1)
    }
}

/// Last bias vector of a network: a bias layer or a linear layer's bias.
pub fn last_bias(net: &Network) -> Option<Vec<f64>> {
    net.layers().iter().rev().find_map(|l| match l {
        Layer::Bias { bias } => Some(bias.value.data().to_vec()),
        Layer::Linear { bias: Some(b), .. } => Some(b.value.data().to_vec()),
        _ => None,
    })
}

fn alignment_key(kind: &str, tau: f64) -> String {
    format!("align_{kind}_tau{tau}")
}

/// Runs a protocol under the given settings without touching the disk.
pub fn execute(settings: &RunSettings, protocol: &Protocol) -> Result<Execution> {
    settings.check()?;
    let data = synth_generate(&settings.data)?;
    let mut config = settings.config.clone();
    if let Protocol::Recovery { warm, .. } = protocol {
        config.steps = *warm;
    }
    let mut tr = Trainer::new(settings.arch, config, &data, &settings.data)?;
    tr.run_phase()?;
    let mut readings = Vec::new();
    let mut eta = None;
    match protocol {
        Protocol::Train => {}
        Protocol::BiasProbe { history } => {
            let b = last_bias(tr.predictor()).ok_or(Error::UntrainedPredictor)?;
            let hist: Vec<_> = tr
                .snapshot(*history)?
                .into_iter()
                .map(|(a, b, _)| (a, b))
                .collect();
            let probe = bias_center_probe(&b, &hist)?;
            readings.push(("bias_cossim".into(), probe.cossim));
            readings.push(("bias_residual".into(), probe.residual));
            readings.push(("bias_m_bar".into(), probe.m_bar));
        }
        Protocol::EtaProbe => {
            let (za, _, pa) = tr.snapshot(1)?.remove(0);
            let probe = eta_probe(za.z(), pa.z(), &default_eta_grid())?;
            readings.push((
                "eta_simsiam".into(),
                probe.simsiam.zero_crossing.unwrap_or(f64::NAN),
            ));
            readings.push((
                "eta_mirror".into(),
                probe.mirror.zero_crossing.unwrap_or(f64::NAN),
            ));
            eta = Some(probe);
        }
        Protocol::Recovery {
            collapse,
            regularize,
            ..
        } => {
            tr.start_phase(ArchitectureSpec::naive(LossKind::Cosine), *collapse)?;
            tr.run_phase()?;
            let m_r = tr.trajectory().last().map_or(f64::NAN, |r| r.m_r);
            readings.push(("m_r_collapsed".into(), m_r));
            tr.start_phase(
                ArchitectureSpec::naive(LossKind::Decorrelation),
                *regularize,
            )?;
            tr.run_phase()?;
            let m_r = tr.trajectory().last().map_or(f64::NAN, |r| r.m_r);
            readings.push(("m_r_restored".into(), m_r));
        }
        Protocol::Alignment { taus } => {
            let (za, zb, _) = tr.snapshot(1)?.remove(0);
            for r in decorrelation_alignment_probe(&za, &zb, taus)? {
                readings.push((alignment_key("r_e", r.tau), r.r_e.unwrap_or(f64::NAN)));
                readings.push((alignment_key("o_e", r.tau), r.o_e.unwrap_or(f64::NAN)));
            }
        }
    }
    let mut checkpoint = Vec::new();
    tr.write_checkpoint(&mut checkpoint)?;
    Ok(Execution {
        record: tr.record(),
        readings,
        eta,
        checkpoint: String::from_utf8(checkpoint).expect("checkpoint text is ASCII"),
        num_classes: settings.data.num_classes,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClaimOutcome {
    pub claim: String,
    pub held: bool,
    pub detail: String,
}

fn outcome(claim: &Claim, held: bool, detail: String) -> ClaimOutcome {
    ClaimOutcome {
        claim: claim.describe(),
        held,
        detail,
    }
}

pub fn evaluate(claim: &Claim, exec: &Execution) -> ClaimOutcome {
    let rec = &exec.record;
    let (Some(first), Some(last)) = (rec.trajectory.first(), rec.last()) else {
        return outcome(claim, false, "empty trajectory".into());
    };
    let reading = |n: &str| exec.reading(n).unwrap_or(f64::NAN);
    match claim {
        Claim::Collapse | Claim::NoCollapse => {
            let want = matches!(claim, Claim::Collapse);
            outcome(
                claim,
                rec.collapsed == want,
                format!("m_o={:.4} std={:.5}", last.m_o, last.std),
            )
        }
        Claim::ResidualAbove(v) => outcome(claim, last.m_r > *v, format!("m_r={:.4}", last.m_r)),
        Claim::ProbeAboveChance(k) => {
            let chance = 1.0 / exec.num_classes as f64;
            outcome(
                claim,
                last.probe_acc >= k * chance,
                format!("acc={:.3} chance={chance:.3}", last.probe_acc),
            )
        }
        Claim::CenterRises => outcome(
            claim,
            last.m_o > first.m_o,
            format!("m_o {:.4} -> {:.4}", first.m_o, last.m_o),
        ),
        Claim::ResidualRises => outcome(
            claim,
            last.m_r > first.m_r,
            format!("m_r {:.5} -> {:.5}", first.m_r, last.m_r),
        ),
        Claim::CovarianceFallsAfter(step) => match rec.at_step(*step) {
            Some(at) => outcome(
                claim,
                last.covariance < at.covariance,
                format!(
                    "cov@{step}={:.3e} end={:.3e}",
                    at.covariance, last.covariance
                ),
            ),
            None => outcome(claim, false, format!("no record at step {step}")),
        },
        Claim::BiasFixedPoint {
            min_cossim,
            max_residual,
        } => {
            let (c, r) = (reading("bias_cossim"), reading("bias_residual"));
            outcome(
                claim,
                c >= *min_cossim && r < *max_residual,
                format!("cossim={c:.4} residual={r:.4}"),
            )
        }
        Claim::EtaSigns => {
            let (s, m) = (reading("eta_simsiam"), reading("eta_mirror"));
            outcome(
                claim,
                s < 0.0 && m > 0.0,
                format!("simsiam={s:.4} mirror={m:.4}"),
            )
        }
        Claim::Recovers {
            collapsed_below,
            restored_above,
        } => {
            let (c, r) = (reading("m_r_collapsed"), reading("m_r_restored"));
            outcome(
                claim,
                c < *collapsed_below && r > *restored_above,
                format!("m_r collapsed={c:.4} restored={r:.4}"),
            )
        }
        Claim::ResidualAlignmentWins(taus) => {
            let mut held = true;
            let mut detail = String::new();
            for &tau in taus {
                let (r, o) = (
                    reading(&alignment_key("r_e", tau)),
                    reading(&alignment_key("o_e", tau)),
                );
                held &= r > o;
                let _ = write!(detail, "tau={tau}: r_e={r:.4} o_e={o:.4}; ");
            }
            outcome(claim, held, detail.trim_end_matches("; ").to_string())
        }
    }
}

/// A preset with overrides applied and every seed pointed at `seed`.
pub fn prepare(name: &str, seed: u64, overrides: &[(String, String)]) -> Result<Preset> {
    let mut preset = find(name)?;
    preset.settings.reseed(seed);
    preset.settings.apply_all(overrides)?;
    Ok(preset)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunManifest {
    pub out_dir: PathBuf,
    pub preset: String,
    pub seed: u64,
    pub overrides: Vec<(String, String)>,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub csv: PathBuf,
    pub svg: PathBuf,
    pub checkpoint: PathBuf,
    pub eta_csv: Option<PathBuf>,
    pub collapsed: bool,
    pub readings: Vec<(String, f64)>,
    pub outcomes: Vec<ClaimOutcome>,
}

impl RunManifest {
    pub fn expectation_held(&self) -> bool {
        self.outcomes.iter().all(|o| o.held)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "preset = {}", self.preset);
        let _ = writeln!(s, "seed = {}", self.seed);
        for (k, v) in &self.overrides {
            let _ = writeln!(s, "override = {k}={v}");
        }
        let _ = writeln!(s, "started_unix = {}", self.started_unix);
        let _ = writeln!(s, "finished_unix = {}", self.finished_unix);
        let _ = writeln!(s, "out_dir = {}", self.out_dir.display());
        let _ = writeln!(s, "csv = {}", self.csv.display());
        let _ = writeln!(s, "svg = {}", self.svg.display());
        let _ = writeln!(s, "checkpoint = {}", self.checkpoint.display());
        if let Some(p) = &self.eta_csv {
            let _ = writeln!(s, "eta_csv = {}", p.display());
        }
        let _ = writeln!(s, "collapsed = {}", self.collapsed);
        for (k, v) in &self.readings {
            let _ = writeln!(s, "reading.{k} = {v}");
        }
        for o in &self.outcomes {
            let verdict = if o.held { "held" } else { "violated" };
            let _ = writeln!(s, "claim = {verdict}: {} ({})", o.claim, o.detail);
        }
        let _ = writeln!(s, "expectation_held = {}", self.expectation_held());
        s
    }
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(contents)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Runs a preset and writes `trajectory.csv`, `trajectory.svg`,
/// `checkpoint.txt` (plus `eta.csv` for the η probe) and `manifest.txt`
/// under `out_root/<preset>-seed<seed>/`.
pub fn run_preset(
    name: &str,
    seed: u64,
    overrides: &[(String, String)],
    out_root: &Path,
) -> Result<RunManifest> {
    let preset = prepare(name, seed, overrides)?;
    let started_unix = unix_now();
    let exec = execute(&preset.settings, &preset.protocol)?;
    let outcomes: Vec<_> = preset.claims.iter().map(|c| evaluate(c, &exec)).collect();

    let out_dir = out_root.join(format!("{name}-seed{seed}"));
    std::fs::create_dir_all(&out_dir)?;
    let csv = out_dir.join("trajectory.csv");
    let csv_text = exec.record.to_csv_string();
    std::fs::write(&csv, &csv_text)?;
    let svg = out_dir.join("trajectory.svg");
    std::fs::write(&svg, render_svg(&csv_text, &["m_o", "m_r", "std"])?)?;
    let checkpoint = out_dir.join("checkpoint.txt");
    std::fs::write(&checkpoint, &exec.checkpoint)?;
    let eta_csv = match &exec.eta {
        Some(probe) => {
            let path = out_dir.join("eta.csv");
            let mut text = String::from("eta,simsiam,mirror\n");
            let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
            for (i, eta) in probe.simsiam.grid.iter().enumerate() {
                let _ = writeln!(
                    text,
                    "{eta},{},{}",
                    fmt(probe.simsiam.similarities[i]),
                    fmt(probe.mirror.similarities[i])
                );
            }
            std::fs::write(&path, text)?;
            Some(path)
        }
        None => None,
    };
    let manifest = RunManifest {
        out_dir: out_dir.clone(),
        preset: name.to_string(),
        seed,
        overrides: overrides.to_vec(),
        started_unix,
        finished_unix: unix_now(),
        csv,
        svg,
        checkpoint,
        eta_csv,
        collapsed: exec.record.collapsed,
        readings: exec.readings,
        outcomes,
    };
    write_atomic(&out_dir.join("manifest.txt"), manifest.to_text().as_bytes())?;
    Ok(manifest)
}

/// Parameters [`sweep`] accepts.
pub const SWEEP_PARAMS: [&str; 4] = ["tau", "sigma", "ma_momentum", "eta"];

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub value: f64,
    pub seed: u64,
    pub metric: String,
    pub step: usize,
    pub reading: f64,
}

pub const SWEEP_CSV_HEADER: &str = "value,seed,metric,step,reading";

pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], w: &mut W) -> Result<()> {
    writeln!(w, "{SWEEP_CSV_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{}",
            r.value, r.seed, r.metric, r.step, r.reading
        )?;
    }
    Ok(())
}

/// One run per `(value, seed)` for `tau`, `sigma` and `ma_momentum`, in
/// long format. For `eta` the values are the η grid and there is one run per
/// seed of a preset with the η probe.
pub fn sweep(
    name: &str,
    param: &str,
    values: &[f64],
    seeds: &[u64],
    overrides: &[(String, String)],
) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(Error::InvalidParameter("empty value list".into()));
    }
    if seeds.is_empty() {
        return Err(Error::InvalidParameter("empty seed list".into()));
    }
    let key = match param {
        "tau" => "arch.tau",
        "sigma" => "data.sigma",
        "ma_momentum" => "train.ma_momentum",
        "eta" => "",
        _ => {
            return Err(Error::InvalidParameter(format!(
                "`{param}` is not sweepable (use one of {SWEEP_PARAMS:?})"
            )))
        }
    };
    let mut rows = Vec::new();
    if param == "eta" {
        for &seed in seeds {
            let preset = prepare(name, seed, overrides)?;
            if preset.protocol != Protocol::EtaProbe {
                return Err(Error::InvalidParameter(format!(
                    "preset `{name}` has no eta probe"
                )));
            }
            let exec = execute(&preset.settings, &preset.protocol)?;
            let probe = exec.eta.as_ref().expect("eta protocol");
            let step = exec.record.last().map_or(0, |r| r.step);
            let e: Vec<f64> = probe
                .o_z
                .iter()
                .zip(&probe.o_p)
                .map(|(z, p)| z - p)
                .collect();
            let neg: Vec<f64> = e.iter().map(|v| -v).collect();
            let ss = eta_sweep(&e, &probe.o_p, values)?;
            let mirror = eta_sweep(&neg, &probe.o_z, values)?;
            for (metric, res) in [("simsiam", ss), ("mirror", mirror)] {
                for (&value, sim) in values.iter().zip(&res.similarities) {
                    if let Some(reading) = sim {
                        rows.push(SweepRow {
                            value,
                            seed,
                            metric: metric.into(),
                            step,
                            reading: *reading,
                        });
                    }
                }
            }
        }
        return Ok(rows);
    }
    for &value in values {
        for &seed in seeds {
            let mut all = overrides.to_vec();
            all.push((key.to_string(), value.to_string()));
            let preset = prepare(name, seed, &all)?;
            let exec = execute(&preset.settings, &preset.protocol)?;
            for r in &exec.record.trajectory {
                let metrics = [
                    ("loss", Some(r.loss)),
                    ("std", Some(r.std)),
                    ("m_o", Some(r.m_o)),
                    ("m_r", Some(r.m_r)),
                    ("covariance", Some(r.covariance)),
                    ("entropy_lambda", r.entropy_lambda),
                    ("probe_acc", Some(r.probe_acc)),
                ];
                for (metric, v) in metrics {
                    if let Some(reading) = v {
                        rows.push(SweepRow {
                            value,
                            seed,
                            metric: metric.into(),
                            step: r.step,
                            reading,
                        });
                    }
                }
            }
            let step = exec.record.last().map_or(0, |r| r.step);
            for (metric, reading) in &exec.readings {
                rows.push(SweepRow {
                    value,
                    seed,
                    metric: metric.clone(),
                    step,
                    reading: *reading,
                });
            }
        }
    }
    Ok(rows)
}
