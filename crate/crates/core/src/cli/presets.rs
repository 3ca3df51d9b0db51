//! Named experiments with their expected qualitative outcomes.

use crate::cli::config::RunSettings;
use crate::data::SyntheticSpec;
use crate::error::{Error, Result};
use crate::losses::{LossKind, Surgery};
use crate::network::PredictorVariant;
use crate::trainer::{ArchTag, ArchitectureSpec, TrainConfig};

/// What a preset does after (or around) training.
#[derive(Debug, Clone, PartialEq)]
pub enum Protocol {
    /// One training run.
    Train,
    /// Train, then compare the predictor's last bias with the center of `Z`
    /// over `history` fresh batches.
    BiasProbe { history: usize },
    /// Train, then sweep `η` on the centers of `Z` and `P`.
    EtaProbe,
    /// Train as configured for `warm` steps, switch to the plain cosine loss
    /// without predictor for `collapse` steps, then train on the
    /// decorrelation loss alone for `regularize` steps.
    Recovery {
        warm: usize,
        collapse: usize,
        regularize: usize,
    },
    /// Train, then compare InfoNCE gradient components with the
    /// decorrelation gradient at each temperature.
    Alignment { taus: Vec<f64> },
}

/// A qualitative expectation checked after a run.
#[derive(Debug, Clone, PartialEq)]
pub enum Claim {
    Collapse,
    NoCollapse,
    /// Final `m_r` above the value.
    ResidualAbove(f64),
    /// Final probe accuracy at least this multiple of chance.
    ProbeAboveChance(f64),
    /// Final `m_o` above the first recorded `m_o`.
    CenterRises,
    /// Final `m_r` above the first recorded `m_r`.
    ResidualRises,
    /// Final covariance below the covariance recorded at this step.
    CovarianceFallsAfter(usize),
    BiasFixedPoint {
        min_cossim: f64,
        max_residual: f64,
    },
    /// SimSiam-direction crossing below zero, mirror-direction above.
    EtaSigns,
    Recovers {
        collapsed_below: f64,
        restored_above: f64,
    },
    /// `r_e` aligns better than `o_e` at each listed temperature.
    ResidualAlignmentWins(Vec<f64>),
}

impl Claim {
    pub fn describe(&self) -> String {
        match self {
            Claim::Collapse => "collapse".into(),
            Claim::NoCollapse => "no collapse".into(),
            Claim::ResidualAbove(v) => format!("m_r > {v}"),
            Claim::ProbeAboveChance(k) => format!("probe accuracy >= {k}x chance"),
            Claim::CenterRises => "m_o rises".into(),
            Claim::ResidualRises => "m_r rises".into(),
            Claim::CovarianceFallsAfter(s) => format!("covariance at end < at step {s}"),
            Claim::BiasFixedPoint {
                min_cossim,
                max_residual,
            } => {
                format!("bias cossim >= {min_cossim}, residual < {max_residual}")
            }
            Claim::EtaSigns => "eta crossings: simsiam < 0, mirror > 0".into(),
            Claim::Recovers {
                collapsed_below,
                restored_above,
            } => format!(
                "m_r < {collapsed_below} after collapse, > {restored_above} after regularizing"
            ),
            Claim::ResidualAlignmentWins(taus) => {
                format!("r_e beats o_e alignment at tau {taus:?}")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Preset {
    pub name: &'static str,
    pub settings: RunSettings,
    pub protocol: Protocol,
    pub claims: Vec<Claim>,
}

impl Preset {
    fn new(name: &'static str, arch: ArchitectureSpec, claims: Vec<Claim>) -> Self {
        Preset {
            name,
            settings: RunSettings {
                arch,
                config: TrainConfig::default(),
                data: SyntheticSpec::default(),
            },
            protocol: Protocol::Train,
            claims,
        }
    }

    fn protocol(mut self, p: Protocol) -> Self {
        self.protocol = p;
        self
    }

    fn steps(mut self, steps: usize) -> Self {
        self.settings.config.steps = steps;
        self
    }

    fn no_final_bn(mut self) -> Self {
        self.settings.config.encoder.final_bn = false;
        self
    }
}

/// Temperatures probed by the alignment preset and swept by default.
pub const TAU_GRID: [f64; 5] = [0.05, 0.1, 0.2, 0.5, 1.0];

pub fn registry() -> Vec<Preset> {
    use Claim::*;
    use PredictorVariant as P;
    let mlp = P::NonlinearMlp;
    let arch = ArchitectureSpec::new;
    let healthy = || vec![NoCollapse, ResidualAbove(0.5), ProbeAboveChance(3.0)];
    let triplet = |s| ArchitectureSpec::naive(LossKind::Triplet).with_surgery(s);
    let simsiam = |s| ArchitectureSpec::simsiam(mlp).with_surgery(s);
    let infonce = |s| ArchitectureSpec::naive(LossKind::InfoNce).with_surgery(s);
    let eoa = |n| arch(ArchTag::SameBatchEoa, P::Identity, LossKind::Cosine).with_views(n);
    vec![
        Preset::new(
            "table1-moving-average",
            arch(ArchTag::MovingAverageTarget, P::Identity, LossKind::Cosine),
            vec![NoCollapse],
        ),
        Preset::new("table1-samebatch-10", eoa(10), vec![Collapse]),
        Preset::new("table1-samebatch-25", eoa(25), vec![Collapse]),
        Preset::new(
            "table2-naive",
            ArchitectureSpec::naive(LossKind::Cosine),
            vec![Collapse],
        ),
        Preset::new("table2-simsiam", ArchitectureSpec::simsiam(mlp), healthy()),
        Preset::new(
            "table2-mirror",
            arch(ArchTag::MirrorSimSiam, mlp, LossKind::Mirror),
            vec![Collapse],
        ),
        Preset::new(
            "table2-symmetric-predictor",
            arch(ArchTag::SymmetricPredictor, mlp, LossKind::Cosine),
            vec![Collapse],
        ),
        Preset::new(
            "table2-inverse-predictor",
            arch(ArchTag::InversePredictor, mlp, LossKind::Cosine),
            healthy(),
        ),
        Preset::new("table3-full", triplet(Surgery::FULL), vec![NoCollapse]),
        Preset::new("table3-keep-o", triplet(Surgery::ONLY_O), vec![NoCollapse]),
        Preset::new("table3-keep-r", triplet(Surgery::ONLY_R), vec![Collapse]),
        Preset::new("table4-full", simsiam(Surgery::FULL), vec![NoCollapse]),
        Preset::new("table4-keep-o", simsiam(Surgery::ONLY_O), vec![NoCollapse]),
        Preset::new("table4-keep-r", simsiam(Surgery::ONLY_R), vec![NoCollapse]),
        Preset::new("table4-none", simsiam(Surgery::NONE), vec![Collapse]),
        Preset::new(
            "table5-mlp",
            ArchitectureSpec::simsiam(mlp),
            vec![NoCollapse],
        ),
        Preset::new(
            "table5-two-fc",
            ArchitectureSpec::simsiam(P::TwoFc),
            vec![NoCollapse],
        ),
        Preset::new(
            "table5-tanh-fc",
            ArchitectureSpec::simsiam(P::TanhFc),
            vec![NoCollapse],
        ),
        Preset::new(
            "table5-bias",
            ArchitectureSpec::simsiam(P::BiasOnly),
            vec![NoCollapse],
        ),
        Preset::new(
            "table6-bias",
            ArchitectureSpec::simsiam(P::BiasOnly),
            vec![BiasFixedPoint {
                min_cossim: 0.95,
                max_residual: 0.2,
            }],
        )
        .protocol(Protocol::BiasProbe { history: 8 }),
        Preset::new(
            "table6-mlp-bias",
            ArchitectureSpec::simsiam(mlp),
            vec![NoCollapse],
        )
        .protocol(Protocol::BiasProbe { history: 8 }),
        Preset::new(
            "fig3-center",
            ArchitectureSpec::naive(LossKind::ProbeCenter),
            vec![CenterRises],
        )
        .steps(500),
        Preset::new(
            "fig3-residual",
            ArchitectureSpec::naive(LossKind::ProbeResidual),
            vec![ResidualRises],
        )
        .steps(500),
        Preset::new("fig4a", ArchitectureSpec::simsiam(mlp), vec![EtaSigns])
            .protocol(Protocol::EtaProbe),
        Preset::new(
            "fig4b",
            ArchitectureSpec::simsiam(mlp),
            vec![Recovers {
                collapsed_below: 0.1,
                restored_above: 0.5,
            }],
        )
        .protocol(Protocol::Recovery {
            warm: 500,
            collapse: 3000,
            regularize: 1000,
        }),
        Preset::new(
            "fig4c",
            infonce(Surgery::FULL),
            vec![ResidualAlignmentWins(vec![0.1, 0.2])],
        )
        .protocol(Protocol::Alignment {
            taus: TAU_GRID.to_vec(),
        }),
        Preset::new(
            "fig5-simsiam",
            ArchitectureSpec::simsiam(mlp),
            vec![CovarianceFallsAfter(100)],
        ),
        Preset::new("fig5-infonce", infonce(Surgery::FULL), vec![NoCollapse]),
        Preset::new(
            "fig5-infonce-no-re",
            infonce(Surgery::ONLY_O),
            vec![NoCollapse],
        ),
        Preset::new("fig6", infonce(Surgery::FULL), vec![NoCollapse]),
        Preset::new(
            "fig8-bn",
            arch(ArchTag::BnMse, P::Identity, LossKind::RawMse),
            vec![NoCollapse],
        ),
        Preset::new(
            "fig8-no-bn",
            arch(ArchTag::BnMse, P::Identity, LossKind::RawMse),
            vec![Collapse],
        )
        .no_final_bn(),
    ]
}

pub fn names() -> Vec<&'static str> {
    registry().into_iter().map(|p| p.name).collect()
}

pub fn find(name: &str) -> Result<Preset> {
    registry()
        .into_iter()
        .find(|p| p.name == name)
        .ok_or_else(|| Error::UnknownPreset(name.to_string()))
}
