//! Architecture wiring and the SGD training loop.
//!
//! Each architecture is implemented by hand in [`Trainer::accumulate_gradients`];
//! [`wire`] returns the matching declarative [`Plan`] for inspection.

use std::fmt::Write as _;
use std::io::Write;

use crate::data::{batch_iter, BatchIter, Dataset, SyntheticSpec, ViewBatch};
use crate::decomposition::decompose;
use crate::error::{Error, Result};
use crate::linalg::{l2_normalize, normalize_backward, Matrix, NormalizedBatch, Rng};
use crate::losses::{
    cosine_loss, decorrelation_loss, infonce_loss, mean_row_entropy, mirror_loss, probe_losses,
    raw_mse_loss, simsiam_loss_with_surgery, triplet_loss, LossKind, LossSpec, ProbeMode, Surgery,
};
use crate::metrics::{covariance_metric, normalize_rows_lossy, std_metric, LinearProbe};
use crate::network::{
    inverse_predictor_step, make_encoder, make_predictor, same_batch_eoa_target, EncoderConfig,
    Mode, MovingAverageBank, Network, PredictorVariant, Sgd, Tape,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ArchTag {
    NaiveSiamese,
    SimSiam,
    MirrorSimSiam,
    SymmetricPredictor,
    InversePredictor,
    MovingAverageTarget,
    SameBatchEoa,
    BnMse,
}

impl ArchTag {
    pub const ALL: [ArchTag; 8] = [
        ArchTag::NaiveSiamese,
        ArchTag::SimSiam,
        ArchTag::MirrorSimSiam,
        ArchTag::SymmetricPredictor,
        ArchTag::InversePredictor,
        ArchTag::MovingAverageTarget,
        ArchTag::SameBatchEoa,
        ArchTag::BnMse,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ArchTag::NaiveSiamese => "naive",
            ArchTag::SimSiam => "simsiam",
            ArchTag::MirrorSimSiam => "mirror",
            ArchTag::SymmetricPredictor => "symmetric-predictor",
            ArchTag::InversePredictor => "inverse-predictor",
            ArchTag::MovingAverageTarget => "moving-average",
            ArchTag::SameBatchEoa => "same-batch",
            ArchTag::BnMse => "bn-mse",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        ArchTag::ALL.into_iter().find(|t| t.name() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArchitectureSpec {
    pub tag: ArchTag,
    pub predictor: PredictorVariant,
    pub loss: LossSpec,
    pub n_views: usize,
    /// Weight of an added decorrelation term on the normalized encoder output.
    pub decorrelation_weight: f64,
}

impl ArchitectureSpec {
    pub fn new(tag: ArchTag, predictor: PredictorVariant, kind: LossKind) -> Self {
        Self {
            tag,
            predictor,
            loss: LossSpec::new(kind),
            n_views: 2,
            decorrelation_weight: 0.0,
        }
    }

    pub fn naive(kind: LossKind) -> Self {
        Self::new(ArchTag::NaiveSiamese, PredictorVariant::Identity, kind)
    }

    pub fn simsiam(predictor: PredictorVariant) -> Self {
        Self::new(ArchTag::SimSiam, predictor, LossKind::SimSiam)
    }

    pub fn with_surgery(mut self, surgery: Surgery) -> Self {
        self.loss.surgery = surgery;
        self
    }

    pub fn with_temperature(mut self, tau: f64) -> Self {
        self.loss.temperature = tau;
        self
    }

    pub fn with_views(mut self, n: usize) -> Self {
        self.n_views = n;
        self
    }

    pub fn validate(&self) -> Result<()> {
        use ArchTag::*;
        use LossKind::{
            Cosine, Decorrelation, InfoNce, Mirror, ProbeCenter, ProbeResidual, RawMse, Triplet,
        };
        let bad = |m: &str| {
            Err(Error::InvalidArchitecture(format!(
                "{}: {m}",
                self.tag.name()
            )))
        };
        self.loss.validate()?;
        let identity = self.predictor == PredictorVariant::Identity;
        let kind = self.loss.kind;
        match self.tag {
            NaiveSiamese | MovingAverageTarget | SameBatchEoa | BnMse if !identity => {
                return bad("takes no predictor");
            }
            ArchTag::SimSiam | MirrorSimSiam | SymmetricPredictor | InversePredictor
                if identity =>
            {
                return bad("requires a predictor");
            }
            _ => {}
        }
        let kind_ok = match self.tag {
            NaiveSiamese => matches!(
                kind,
                Cosine | Triplet | InfoNce | Decorrelation | ProbeCenter | ProbeResidual
            ),
            ArchTag::SimSiam => kind == LossKind::SimSiam,
            MirrorSimSiam => kind == Mirror,
            SymmetricPredictor | InversePredictor | MovingAverageTarget | SameBatchEoa => {
                kind == Cosine
            }
            BnMse => kind == RawMse,
        };
        if !kind_ok {
            return bad(&format!("loss `{}` not supported", kind.name()));
        }
        if !self.loss.surgery.is_full() && !matches!(kind, LossKind::SimSiam | Triplet | InfoNce) {
            return bad("surgery only applies to simsiam, triplet and infonce losses");
        }
        if self.n_views < 2 || (self.tag != SameBatchEoa && self.n_views != 2) {
            return bad(&format!("{} views", self.n_views));
        }
        if !(self.decorrelation_weight >= 0.0) {
            return bad("negative decorrelation weight");
        }
        Ok(())
    }

    pub fn encoder_config(&self, base: EncoderConfig) -> EncoderConfig {
        EncoderConfig {
            l2norm: self.predictor.needs_l2norm_encoder(),
            final_affine: base.final_affine && self.tag != ArchTag::BnMse,
            ..base
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NetRole {
    Encoder,
    Predictor,
    InversePredictor,
}

/// `output = net(input)`, with the input possibly detached.
#[derive(Debug, Clone, PartialEq)]
pub struct Pass {
    pub output: &'static str,
    pub net: NetRole,
    pub input: &'static str,
    pub input_detached: bool,
}

/// One loss term: the tensors it differentiates, the ones it treats as
/// constants, and the networks whose parameters receive its gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Term {
    pub name: &'static str,
    pub live: Vec<&'static str>,
    pub detached: Vec<&'static str>,
    pub updates: Vec<NetRole>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Plan {
    pub passes: Vec<Pass>,
    pub terms: Vec<Term>,
}

impl Plan {
    /// Live tensors through which `role` receives gradient.
    pub fn gradient_sources(&self, role: NetRole) -> Vec<&'static str> {
        let mut out: Vec<&'static str> = Vec::new();
        for t in self.terms.iter().filter(|t| t.updates.contains(&role)) {
            for l in &t.live {
                if !out.contains(l) {
                    out.push(l);
                }
            }
        }
        out
    }

    pub fn updated(&self) -> Vec<NetRole> {
        let mut out = Vec::new();
        for t in &self.terms {
            for r in &t.updates {
                if !out.contains(r) {
                    out.push(*r);
                }
            }
        }
        out
    }
}

fn pass(output: &'static str, net: NetRole, input: &'static str, input_detached: bool) -> Pass {
    Pass {
        output,
        net,
        input,
        input_detached,
    }
}

fn term(
    name: &'static str,
    live: &[&'static str],
    detached: &[&'static str],
    updates: &[NetRole],
) -> Term {
    Term {
        name,
        live: live.to_vec(),
        detached: detached.to_vec(),
        updates: updates.to_vec(),
    }
}

pub fn wire(arch: &ArchitectureSpec) -> Result<Plan> {
    use NetRole::*;
    arch.validate()?;
    let enc = vec![
        pass("z_a", Encoder, "x_a", false),
        pass("z_b", Encoder, "x_b", false),
    ];
    let mut plan = match arch.tag {
        ArchTag::NaiveSiamese => Plan {
            passes: enc,
            terms: vec![term(
                arch.loss.kind.name(),
                &["z_a", "z_b"],
                &["z_a", "z_b"],
                &[Encoder],
            )],
        },
        ArchTag::SimSiam => Plan {
            passes: [
                enc,
                vec![
                    pass("p_a", Predictor, "z_a", false),
                    pass("p_b", Predictor, "z_b", false),
                ],
            ]
            .concat(),
            terms: vec![term(
                "simsiam",
                &["p_a", "p_b"],
                &["z_a", "z_b"],
                &[Encoder, Predictor],
            )],
        },
        ArchTag::MirrorSimSiam => Plan {
            passes: [
                enc,
                vec![
                    pass("p_a", Predictor, "z_a", true),
                    pass("p_b", Predictor, "z_b", true),
                ],
            ]
            .concat(),
            terms: vec![term(
                "mirror",
                &["z_a", "z_b", "p_a", "p_b"],
                &[],
                &[Encoder, Predictor],
            )],
        },
        ArchTag::SymmetricPredictor => Plan {
            passes: [
                enc,
                vec![
                    pass("p_a", Predictor, "z_a", false),
                    pass("p_b", Predictor, "z_b", false),
                    pass("d_p_a", Predictor, "z_a", true),
                    pass("d_p_b", Predictor, "z_b", true),
                ],
            ]
            .concat(),
            terms: vec![
                term("pred", &["d_p_a", "d_p_b"], &["z_a", "z_b"], &[Predictor]),
                term(
                    "enc",
                    &["p_a", "p_b"],
                    &["d_p_a", "d_p_b"],
                    &[Encoder, Predictor],
                ),
            ],
        },
        ArchTag::InversePredictor => Plan {
            passes: [
                enc,
                vec![
                    pass("p_a", Predictor, "z_a", false),
                    pass("p_b", Predictor, "z_b", false),
                    pass("d_p_a", Predictor, "z_a", true),
                    pass("d_p_b", Predictor, "z_b", true),
                    pass("inv_p_a", InversePredictor, "p_a", true),
                    pass("inv_p_b", InversePredictor, "p_b", true),
                ],
            ]
            .concat(),
            terms: vec![
                term("pred", &["d_p_a", "d_p_b"], &["z_a", "z_b"], &[Predictor]),
                term(
                    "inv_pred",
                    &["inv_p_a", "inv_p_b"],
                    &["z_a", "z_b"],
                    &[InversePredictor],
                ),
                term(
                    "enc",
                    &["p_a", "p_b"],
                    &["inv_p_a", "inv_p_b"],
                    &[Encoder, Predictor],
                ),
            ],
        },
        ArchTag::MovingAverageTarget => Plan {
            passes: enc,
            terms: vec![term("cosine", &["z_a"], &["bank[ids]"], &[Encoder])],
        },
        ArchTag::SameBatchEoa => Plan {
            passes: vec![
                pass("z_1", Encoder, "x_1", false),
                pass("z_2..z_N", Encoder, "x_2..x_N", false),
            ],
            terms: vec![term("cosine", &["z_1"], &["mean(z_2..z_N)"], &[Encoder])],
        },
        ArchTag::BnMse => Plan {
            passes: enc,
            terms: vec![term("raw-mse", &["z_a", "z_b"], &[], &[Encoder])],
        },
    };
    if arch.decorrelation_weight > 0.0 {
        let live: &[&'static str] = if arch.tag == ArchTag::SameBatchEoa {
            &["z_1"]
        } else {
            &["z_a", "z_b"]
        };
        plan.terms
            .push(term("decorrelation", live, &[], &[Encoder]));
    }
    Ok(plan)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Schedule {
    Cosine,
    Constant,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub warmup: usize,
    pub schedule: Schedule,
    pub seed: u64,
    pub ma_momentum: f64,
    pub probe_lr: f64,
    pub metric_every: usize,
    pub encoder: EncoderConfig,
    pub predictor_hidden: usize,
    pub train_frac: f64,
    pub collapse_m_o: f64,
    pub collapse_std_factor: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch: 128,
            base_lr: 2.0,
            momentum: 0.9,
            weight_decay: 1e-5,
            warmup: 100,
            schedule: Schedule::Cosine,
            seed: 0,
            ma_momentum: 0.8,
            probe_lr: 0.1,
            metric_every: 50,
            encoder: EncoderConfig::default(),
            predictor_hidden: 16,
            train_frac: 0.8,
            collapse_m_o: 0.99,
            collapse_std_factor: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if !(self.base_lr > 0.0) {
            return bad(format!("base_lr {}", self.base_lr));
        }
        if self.warmup > self.steps {
            return bad(format!(
                "warmup {} exceeds {} steps",
                self.warmup, self.steps
            ));
        }
        if self.batch < 2 {
            return Err(Error::BatchTooSmall(self.batch));
        }
        if self.metric_every == 0 {
            return bad("metric_every 0".into());
        }
        if !(0.0..=1.0).contains(&self.ma_momentum) {
            return bad(format!("ma_momentum {}", self.ma_momentum));
        }
        Ok(())
    }

    /// Peak encoder learning rate `base_lr · M / 256`.
    pub fn peak_lr(&self) -> f64 {
        self.base_lr * self.batch as f64 / 256.0
    }

    /// Encoder learning rate at `step` of a phase of `total` steps.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        let peak = self.peak_lr();
        let warmup = self.warmup.min(total);
        if step < warmup {
            return peak * (step + 1) as f64 / warmup as f64;
        }
        match self.schedule {
            Schedule::Constant => peak,
            Schedule::Cosine => {
                let span = (total - warmup).max(1) as f64;
                let t = ((step - warmup) as f64 / span).min(1.0);
                0.5 * peak * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }

    /// Flat `key=value` snapshot.
    pub fn pairs(&self) -> Vec<(String, String)> {
        let s = |k: &str, v: String| (k.to_string(), v);
        vec![
            s("steps", self.steps.to_string()),
            s("batch", self.batch.to_string()),
            s("base_lr", self.base_lr.to_string()),
            s("momentum", self.momentum.to_string()),
            s("weight_decay", self.weight_decay.to_string()),
            s("warmup", self.warmup.to_string()),
            s(
                "schedule",
                match self.schedule {
                    Schedule::Cosine => "cosine",
                    Schedule::Constant => "constant",
                }
                .into(),
            ),
            s("seed", self.seed.to_string()),
            s("ma_momentum", self.ma_momentum.to_string()),
            s("probe_lr", self.probe_lr.to_string()),
            s("metric_every", self.metric_every.to_string()),
            s("input_dim", self.encoder.input.to_string()),
            s("hidden", self.encoder.hidden.to_string()),
            s("dim", self.encoder.output.to_string()),
            s("final_bn", self.encoder.final_bn.to_string()),
            s("final_affine", self.encoder.final_affine.to_string()),
            s("predictor_hidden", self.predictor_hidden.to_string()),
            s("train_frac", self.train_frac.to_string()),
            s("collapse_m_o", self.collapse_m_o.to_string()),
            s("collapse_std_factor", self.collapse_std_factor.to_string()),
        ]
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::InvalidOverride(format!("{key}={v}: not a valid number")))
        }
        fn flag(key: &str, v: &str) -> Result<bool> {
            match v {
                "true" | "1" | "on" => Ok(true),
                "false" | "0" | "off" => Ok(false),
                _ => Err(Error::InvalidOverride(format!(
                    "{key}={v}: expected a boolean"
                ))),
            }
        }
        match key {
            "steps" => self.steps = num(key, value)?,
            "batch" => self.batch = num(key, value)?,
            "base_lr" => self.base_lr = num(key, value)?,
            "momentum" => self.momentum = num(key, value)?,
            "weight_decay" => self.weight_decay = num(key, value)?,
            "warmup" => self.warmup = num(key, value)?,
            "schedule" => {
                self.schedule = match value {
                    "cosine" => Schedule::Cosine,
                    "constant" => Schedule::Constant,
                    _ => return Err(Error::InvalidOverride(format!("{key}={value}"))),
                }
            }
            "seed" => self.seed = num(key, value)?,
            "ma_momentum" => self.ma_momentum = num(key, value)?,
            "probe_lr" => self.probe_lr = num(key, value)?,
            "metric_every" => self.metric_every = num(key, value)?,
            "input_dim" => self.encoder.input = num(key, value)?,
            "hidden" => self.encoder.hidden = num(key, value)?,
            "dim" => self.encoder.output = num(key, value)?,
            "final_bn" => self.encoder.final_bn = flag(key, value)?,
            "final_affine" => self.encoder.final_affine = flag(key, value)?,
            "predictor_hidden" => self.predictor_hidden = num(key, value)?,
            "train_frac" => self.train_frac = num(key, value)?,
            "collapse_m_o" => self.collapse_m_o = num(key, value)?,
            "collapse_std_factor" => self.collapse_std_factor = num(key, value)?,
            _ => return Err(Error::InvalidOverride(format!("unknown key `{key}`"))),
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRecord {
    pub step: usize,
    pub loss: f64,
    pub std: f64,
    pub m_o: f64,
    pub m_r: f64,
    pub covariance: f64,
    pub entropy_lambda: Option<f64>,
    pub probe_acc: f64,
    pub lr: f64,
}

pub const RUN_CSV_HEADER: &str = "step,loss,std,m_o,m_r,covariance,entropy_lambda,probe_acc,lr";

#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub config: Vec<(String, String)>,
    pub trajectory: Vec<MetricsRecord>,
    pub checkpoint: Option<std::path::PathBuf>,
    pub collapsed: bool,
}

impl RunRecord {
    pub fn last(&self) -> Option<&MetricsRecord> {
        self.trajectory.last()
    }

    pub fn at_step(&self, step: usize) -> Option<&MetricsRecord> {
        self.trajectory.iter().find(|r| r.step == step)
    }

    pub fn write_csv<W: Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "{RUN_CSV_HEADER}")?;
        for r in &self.trajectory {
            let entropy = r.entropy_lambda.map(|e| e.to_string()).unwrap_or_default();
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{}",
                r.step, r.loss, r.std, r.m_o, r.m_r, r.covariance, entropy, r.probe_acc, r.lr
            )?;
        }
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("ascii")
    }
}

/// `m_o > threshold` and `Std < factor/√D`.
pub fn collapse_verdict(
    record: &MetricsRecord,
    dim: usize,
    m_o_threshold: f64,
    std_factor: f64,
) -> bool {
    record.m_o > m_o_threshold && record.std < std_factor / (dim as f64).sqrt()
}

/// Loss value, diagnostics and the first view's representations of one step.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub loss: f64,
    pub entropy_lambda: Option<f64>,
    pub z_first: NormalizedBatch,
}

struct EncodedView {
    raw: Matrix,
    tape: Tape,
    z: NormalizedBatch,
}

struct Predicted {
    raw: Matrix,
    tape: Tape,
    p: NormalizedBatch,
}

pub struct Trainer {
    arch: ArchitectureSpec,
    config: TrainConfig,
    pub encoder: Network,
    pub predictor: Network,
    pub inverse: Option<Network>,
    bank: Option<MovingAverageBank>,
    probe: LinearProbe,
    train: Dataset,
    held_out: Dataset,
    batches: BatchIter,
    neg_rng: Rng,
    sgd: Sgd,
    step: usize,
    phase_start: usize,
    phase_steps: usize,
    trajectory: Vec<MetricsRecord>,
}

impl Trainer {
    pub fn new(
        arch: ArchitectureSpec,
        config: TrainConfig,
        data: &Dataset,
        spec: &SyntheticSpec,
    ) -> Result<Self> {
        arch.validate()?;
        config.validate()?;
        if data.is_empty() {
            return Err(Error::BadSpec("empty dataset".into()));
        }
        let rng = Rng::new(config.seed);
        let (train, held_out) = data.split(config.train_frac, &mut rng.fork(14))?;
        let enc_cfg = EncoderConfig {
            input: data.dim(),
            ..arch.encoder_config(config.encoder)
        };
        let encoder = make_encoder(enc_cfg, &mut rng.fork(10))?;
        let d = enc_cfg.output;
        let hidden = config.predictor_hidden;
        let predictor = make_predictor(arch.predictor, d, hidden, &mut rng.fork(11))?;
        let inverse = match arch.tag {
            ArchTag::InversePredictor => Some(make_predictor(
                arch.predictor,
                d,
                hidden,
                &mut rng.fork(12),
            )?),
            _ => None,
        };
        let bank = match arch.tag {
            ArchTag::MovingAverageTarget => {
                Some(MovingAverageBank::new(train.len(), d, config.ma_momentum)?)
            }
            _ => None,
        };
        let batches = batch_iter(
            &train,
            config.batch,
            arch.n_views,
            spec.augment,
            &rng.fork(13),
        )?;
        Ok(Self {
            arch,
            probe: LinearProbe::new(d, data.num_classes),
            sgd: Sgd {
                momentum: config.momentum,
                weight_decay: config.weight_decay,
            },
            phase_steps: config.steps,
            config,
            encoder,
            predictor,
            inverse,
            bank,
            train,
            held_out,
            batches,
            neg_rng: rng.fork(15),
            step: 0,
            phase_start: 0,
            trajectory: Vec::new(),
        })
    }

    pub fn arch(&self) -> &ArchitectureSpec {
        &self.arch
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn step_index(&self) -> usize {
        self.step
    }

    pub fn trajectory(&self) -> &[MetricsRecord] {
        &self.trajectory
    }

    pub fn train_set(&self) -> &Dataset {
        &self.train
    }

    pub fn held_out(&self) -> &Dataset {
        &self.held_out
    }

    pub fn encoder(&self) -> &Network {
        &self.encoder
    }

    pub fn predictor(&self) -> &Network {
        &self.predictor
    }

    pub fn dim(&self) -> usize {
        self.encoder.output_dim()
    }

    pub fn next_batch(&mut self) -> ViewBatch {
        self.batches.next_batch()
    }

    /// Switches to another objective on the same networks. The learning-rate
    /// schedule restarts for a phase of `steps` steps. The new architecture
    /// must use the same encoder layout and either the same predictor variant
    /// or none at all.
    pub fn start_phase(&mut self, arch: ArchitectureSpec, steps: usize) -> Result<()> {
        arch.validate()?;
        let drops_predictor = arch.predictor == PredictorVariant::Identity
            && matches!(
                arch.tag,
                ArchTag::NaiveSiamese | ArchTag::MovingAverageTarget
            )
            && !self.arch.predictor.needs_l2norm_encoder();
        if (arch.predictor != self.arch.predictor && !drops_predictor)
            || arch.n_views != self.arch.n_views
        {
            return Err(Error::InvalidArchitecture(format!(
                "phase switch from {} to {} changes the networks",
                self.arch.tag.name(),
                arch.tag.name()
            )));
        }
        if arch.tag == ArchTag::InversePredictor && self.inverse.is_none() {
            return Err(Error::InvalidArchitecture(
                "no inverse predictor to train".into(),
            ));
        }
        if arch.tag == ArchTag::MovingAverageTarget && self.bank.is_none() {
            self.bank = Some(MovingAverageBank::new(
                self.train.len(),
                self.dim(),
                self.config.ma_momentum,
            )?);
        }
        self.arch = arch;
        self.phase_start = self.step;
        self.phase_steps = steps;
        Ok(())
    }

    fn encode(&mut self, x: &Matrix) -> Result<EncodedView> {
        let (raw, tape) = self.encoder.forward(x, Mode::Train)?;
        let z = l2_normalize(&raw)?;
        Ok(EncodedView { raw, tape, z })
    }

    fn encoder_backward(&mut self, v: &EncodedView, grad_on_z: &Matrix) -> Result<()> {
        let g = normalize_backward(grad_on_z, &v.raw, v.z.raw_norms())?;
        self.encoder.backward(&v.tape, &g)?;
        Ok(())
    }

    fn predict(&mut self, input: &Matrix) -> Result<Predicted> {
        let (raw, tape) = self.predictor.forward(input, Mode::Train)?;
        let p = l2_normalize(&raw)?;
        Ok(Predicted { raw, tape, p })
    }

    /// Backpropagates a gradient on normalized predictions through the
    /// predictor; returns the gradient on its input.
    fn predictor_backward(&mut self, pr: &Predicted, grad_on_p: &Matrix) -> Result<Matrix> {
        let g = normalize_backward(grad_on_p, &pr.raw, pr.p.raw_norms())?;
        self.predictor.backward(&pr.tape, &g)
    }

    /// Runs the forward and backward passes of the current architecture on
    /// `batch`, accumulating gradients without updating any parameter.
    pub fn accumulate_gradients(&mut self, batch: &ViewBatch) -> Result<StepOutput> {
        let arch = self.arch;
        let mut entropy = None;
        let (loss, z_first, extra_views) = match arch.tag {
            ArchTag::SameBatchEoa => {
                let first = self.encode(&batch.views[0])?;
                let mut rest = Vec::with_capacity(batch.views.len());
                rest.push(first.z.clone());
                for x in &batch.views[1..] {
                    let (raw, _) = self.encoder.forward(x, Mode::Train)?;
                    rest.push(l2_normalize(&raw)?);
                }
                let target = same_batch_eoa_target(&rest)?;
                let out = cosine_loss(&first.z, &target)?;
                self.encoder_backward(&first, out.grad(0))?;
                (out.value, first.z.clone(), vec![first])
            }
            _ => {
                let a = self.encode(batch.view_a())?;
                let b = self.encode(batch.view_b())?;
                let loss = self.two_view_step(&a, &b, batch, &mut entropy)?;
                (loss, a.z.clone(), vec![a, b])
            }
        };
        let mut loss = loss;
        if arch.decorrelation_weight > 0.0 {
            let w = arch.decorrelation_weight / extra_views.len() as f64;
            for v in &extra_views {
                let out = decorrelation_loss(v.z.z())?;
                loss += w * out.value;
                self.encoder_backward(v, &out.grad(0).scale(w))?;
            }
        }
        Ok(StepOutput {
            loss,
            entropy_lambda: entropy,
            z_first,
        })
    }

    fn two_view_step(
        &mut self,
        a: &EncodedView,
        b: &EncodedView,
        batch: &ViewBatch,
        entropy: &mut Option<f64>,
    ) -> Result<f64> {
        let arch = self.arch;
        let spec = arch.loss;
        let both = spec.symmetric;
        match arch.tag {
            ArchTag::NaiveSiamese => {
                let pairs: Vec<(&EncodedView, &EncodedView)> = if both {
                    vec![(a, b), (b, a)]
                } else {
                    vec![(a, b)]
                };
                let w = 1.0 / pairs.len() as f64;
                let perm = match spec.kind {
                    LossKind::Triplet => Some(self.neg_rng.derangement(a.z.rows())),
                    _ => None,
                };
                let mut total = 0.0;
                let mut ent = 0.0;
                for (x, y) in pairs {
                    let out = match spec.kind {
                        LossKind::Cosine => cosine_loss(&x.z, y.z.z())?,
                        LossKind::Triplet => triplet_loss(
                            &x.z,
                            &y.z,
                            perm.as_deref().unwrap_or_default(),
                            spec.surgery,
                        )?,
                        LossKind::InfoNce => {
                            infonce_loss(&x.z, &y.z, spec.temperature, spec.surgery)?
                        }
                        LossKind::Decorrelation => decorrelation_loss(x.z.z())?,
                        LossKind::ProbeCenter => probe_losses(&x.z, ProbeMode::Center)?,
                        LossKind::ProbeResidual => probe_losses(&x.z, ProbeMode::Residual)?,
                        other => {
                            return Err(Error::InvalidArchitecture(format!(
                                "naive with {}",
                                other.name()
                            )))
                        }
                    };
                    if let Some(l) = &out.lambda {
                        ent += w * mean_row_entropy(l);
                    }
                    total += w * out.value;
                    self.encoder_backward(x, &out.grad(0).scale(w))?;
                }
                if spec.kind == LossKind::InfoNce {
                    *entropy = Some(ent);
                }
                Ok(total)
            }
            ArchTag::SimSiam => {
                let pa = self.predict(&a.raw)?;
                let pb = self.predict(&b.raw)?;
                let out = simsiam_loss_with_surgery(&pa.p, &pb.p, &a.z, &b.z, spec.surgery)?;
                let ga = self.predictor_backward(&pa, out.grad(0))?;
                let gb = self.predictor_backward(&pb, out.grad(1))?;
                self.encoder.backward(&a.tape, &ga)?;
                self.encoder.backward(&b.tape, &gb)?;
                Ok(out.value)
            }
            ArchTag::MirrorSimSiam => {
                // predictor inputs are detached: its input gradients are dropped
                let pa = self.predict(&a.raw)?;
                let pb = self.predict(&b.raw)?;
                let out = mirror_loss(&pa.p, &pb.p, &a.z, &b.z)?;
                self.encoder_backward(a, out.grad(0))?;
                self.encoder_backward(b, out.grad(1))?;
                self.predictor_backward(&pa, out.grad(2))?;
                self.predictor_backward(&pb, out.grad(3))?;
                Ok(out.value)
            }
            ArchTag::SymmetricPredictor => {
                // one forward per view serves both the live and the detached
                // predictor pass; only the encoder-loss input gradient is kept
                let pa = self.predict(&a.raw)?;
                let pb = self.predict(&b.raw)?;
                let pred_a = cosine_loss(&pa.p, b.z.z())?;
                let pred_b = cosine_loss(&pb.p, a.z.z())?;
                let enc_a = cosine_loss(&pa.p, pb.p.z())?;
                let enc_b = cosine_loss(&pb.p, pa.p.z())?;
                self.predictor_backward(&pa, &pred_a.grad(0).scale(0.5))?;
                self.predictor_backward(&pb, &pred_b.grad(0).scale(0.5))?;
                let ga = self.predictor_backward(&pa, &enc_a.grad(0).scale(0.5))?;
                let gb = self.predictor_backward(&pb, &enc_b.grad(0).scale(0.5))?;
                self.encoder.backward(&a.tape, &ga)?;
                self.encoder.backward(&b.tape, &gb)?;
                Ok((pred_a.value + pred_b.value + enc_a.value + enc_b.value) / 2.0)
            }
            ArchTag::InversePredictor => {
                let inverse = self.inverse.as_mut().ok_or_else(|| {
                    Error::InvalidArchitecture("inverse predictor missing".into())
                })?;
                let out = inverse_predictor_step(&mut self.predictor, inverse, &a.raw, &b.raw)?;
                self.encoder.backward(&a.tape, &out.grad_z_a)?;
                self.encoder.backward(&b.tape, &out.grad_z_b)?;
                Ok(out.l_pred + out.l_inv_pred + out.l_enc)
            }
            ArchTag::MovingAverageTarget => {
                let bank = self.bank.as_mut().ok_or_else(|| {
                    Error::InvalidArchitecture("moving-average bank missing".into())
                })?;
                bank.update(&batch.ids, b.z.z())?;
                let target = normalize_rows_lossy(&bank.get(&batch.ids)?);
                let out = cosine_loss(&a.z, &target)?;
                self.encoder_backward(a, out.grad(0))?;
                Ok(out.value)
            }
            ArchTag::BnMse => {
                let out = raw_mse_loss(&a.raw, &b.raw)?;
                self.encoder.backward(&a.tape, out.grad(0))?;
                self.encoder.backward(&b.tape, &out.grad(0).scale(-1.0))?;
                Ok(out.value)
            }
            ArchTag::SameBatchEoa => unreachable!("handled by the multi-view path"),
        }
    }

    fn held_out_accuracy(&self) -> Result<f64> {
        let feats = normalize_rows_lossy(&self.encoder.infer(&self.held_out.samples)?);
        self.probe.accuracy(&feats, &self.held_out.labels)
    }

    /// Normalized eval-mode features of the held-out split.
    pub fn held_out_features(&self) -> Result<Matrix> {
        Ok(normalize_rows_lossy(
            &self.encoder.infer(&self.held_out.samples)?,
        ))
    }

    /// One optimization step; returns the metrics when this step is recorded.
    pub fn step(&mut self) -> Result<Option<MetricsRecord>> {
        let batch = self.next_batch();
        let out = self.accumulate_gradients(&batch)?;
        if !out.loss.is_finite() {
            return Err(Error::DivergedTraining {
                step: self.step,
                loss: out.loss,
            });
        }
        self.probe
            .update(out.z_first.z(), &batch.labels, self.config.probe_lr)?;
        let local = self.step - self.phase_start;
        let lr = self.config.lr_at(local, self.phase_steps);
        let last = local + 1 == self.phase_steps;
        let record = if self.step.is_multiple_of(self.config.metric_every) || last {
            let cr = decompose(&out.z_first)?;
            let r = MetricsRecord {
                step: self.step,
                loss: out.loss,
                std: std_metric(&out.z_first)?,
                m_o: cr.m_o,
                m_r: cr.m_r,
                covariance: covariance_metric(out.z_first.z())?,
                entropy_lambda: out.entropy_lambda,
                probe_acc: self.held_out_accuracy()?,
                lr,
            };
            self.trajectory.push(r);
            Some(r)
        } else {
            None
        };
        self.sgd.step(&mut self.encoder, lr);
        let fixed = self.config.peak_lr();
        self.sgd.step(&mut self.predictor, fixed);
        if let Some(inv) = self.inverse.as_mut() {
            self.sgd.step(inv, fixed);
        }
        self.step += 1;
        Ok(record)
    }

    /// Runs the rest of the current phase.
    pub fn run_phase(&mut self) -> Result<()> {
        while self.step - self.phase_start < self.phase_steps {
            self.step()?;
        }
        Ok(())
    }

    pub fn is_collapsed(&self) -> bool {
        self.trajectory.last().is_some_and(|r| {
            collapse_verdict(
                r,
                self.dim(),
                self.config.collapse_m_o,
                self.config.collapse_std_factor,
            )
        })
    }

    pub fn record(&self) -> RunRecord {
        let mut config = self.config.pairs();
        config.push(("arch".into(), self.arch.tag.name().into()));
        config.push(("predictor".into(), self.arch.predictor.name().into()));
        config.push(("loss".into(), self.arch.loss.kind.name().into()));
        config.push(("tau".into(), self.arch.loss.temperature.to_string()));
        config.push((
            "keep_o_e".into(),
            self.arch.loss.surgery.keep_o_e.to_string(),
        ));
        config.push((
            "keep_r_e".into(),
            self.arch.loss.surgery.keep_r_e.to_string(),
        ));
        config.push(("n_views".into(), self.arch.n_views.to_string()));
        RunRecord {
            config,
            trajectory: self.trajectory.clone(),
            checkpoint: None,
            collapsed: self.is_collapsed(),
        }
    }

    /// Normalized `Z_a`, `Z_b` and predictions `P_a` of fresh batches, in
    /// train mode and without touching any parameter.
    pub fn snapshot(
        &mut self,
        batches: usize,
    ) -> Result<Vec<(NormalizedBatch, NormalizedBatch, NormalizedBatch)>> {
        let mut out = Vec::with_capacity(batches);
        for _ in 0..batches {
            let batch = self.next_batch();
            let a = self.encode(batch.view_a())?;
            let b = self.encode(batch.view_b())?;
            let p = self.predict(&a.raw)?;
            out.push((a.z, b.z, p.p));
        }
        Ok(out)
    }

    pub fn write_checkpoint<W: Write>(&self, w: &mut W) -> Result<()> {
        let mut nets: Vec<(&str, &Network)> =
            vec![("encoder", &self.encoder), ("predictor", &self.predictor)];
        if let Some(inv) = &self.inverse {
            nets.push(("inverse", inv));
        }
        crate::network::write_checkpoint(w, &nets)
    }
}

/// Trains `arch` for `config.steps` steps on `data`.
pub fn train(
    arch: ArchitectureSpec,
    config: TrainConfig,
    data: &Dataset,
    spec: &SyntheticSpec,
) -> Result<RunRecord> {
    let mut t = Trainer::new(arch, config, data, spec)?;
    t.run_phase()?;
    Ok(t.record())
}

/// Human-readable one-line summary of a record's final metrics.
pub fn summarize(record: &RunRecord) -> String {
    let mut s = String::new();
    if let Some(r) = record.last() {
        let _ = write!(
            s,
            "step {} loss {:.4} std {:.4} m_o {:.3} m_r {:.3} cov {:.4} acc {:.3}",
            r.step, r.loss, r.std, r.m_o, r.m_r, r.covariance, r.probe_acc
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_generate;

    #[test]
    fn schedule_warmup_then_cosine() {
        let cfg = TrainConfig {
            steps: 1100,
            ..TrainConfig::default()
        };
        let peak = cfg.peak_lr();
        assert!((peak - 1.0).abs() < 1e-15);
        assert!((cfg.lr_at(0, 1100) - peak / 100.0).abs() < 1e-15);
        assert!((cfg.lr_at(99, 1100) - peak).abs() < 1e-15);
        assert!((cfg.lr_at(100, 1100) - peak).abs() < 1e-15);
        assert!((cfg.lr_at(600, 1100) - peak / 2.0).abs() < 1e-12);
        assert!(cfg.lr_at(1099, 1100) < 1e-5 * peak);
    }

    #[test]
    fn invalid_architectures() {
        let mut a = ArchitectureSpec::simsiam(PredictorVariant::Identity);
        assert!(matches!(a.validate(), Err(Error::InvalidArchitecture(_))));
        a = ArchitectureSpec::new(
            ArchTag::MirrorSimSiam,
            PredictorVariant::Identity,
            LossKind::Mirror,
        );
        assert!(a.validate().is_err());
        a = ArchitectureSpec::new(
            ArchTag::NaiveSiamese,
            PredictorVariant::NonlinearMlp,
            LossKind::Cosine,
        );
        assert!(a.validate().is_err());
        a = ArchitectureSpec::naive(LossKind::Cosine).with_surgery(Surgery::NONE);
        assert!(a.validate().is_err());
        a = ArchitectureSpec::naive(LossKind::InfoNce).with_temperature(0.0);
        assert!(matches!(
            a.validate(),
            Err(Error::TemperatureNonPositive(_))
        ));
    }

    #[test]
    fn plans_place_detaches() {
        let simsiam = wire(&ArchitectureSpec::simsiam(PredictorVariant::NonlinearMlp)).unwrap();
        assert_eq!(
            simsiam.gradient_sources(NetRole::Encoder),
            vec!["p_a", "p_b"]
        );
        assert_eq!(simsiam.terms[0].detached, vec!["z_a", "z_b"]);

        let mirror = wire(&ArchitectureSpec::new(
            ArchTag::MirrorSimSiam,
            PredictorVariant::NonlinearMlp,
            LossKind::Mirror,
        ))
        .unwrap();
        assert!(mirror
            .passes
            .iter()
            .filter(|p| p.net == NetRole::Predictor)
            .all(|p| p.input_detached));
        assert!(mirror.gradient_sources(NetRole::Encoder).contains(&"z_a"));

        let inverse = wire(&ArchitectureSpec::new(
            ArchTag::InversePredictor,
            PredictorVariant::NonlinearMlp,
            LossKind::Cosine,
        ))
        .unwrap();
        assert_eq!(inverse.terms.len(), 3);
        assert_eq!(inverse.updated().len(), 3);
    }

    #[test]
    fn short_run_is_deterministic() {
        let spec = SyntheticSpec::default();
        let data = synth_generate(&spec).unwrap();
        let cfg = TrainConfig {
            steps: 30,
            warmup: 5,
            metric_every: 10,
            ..TrainConfig::default()
        };
        let arch = ArchitectureSpec::simsiam(PredictorVariant::NonlinearMlp);
        let r1 = train(arch, cfg.clone(), &data, &spec).unwrap();
        let r2 = train(arch, cfg, &data, &spec).unwrap();
        assert_eq!(r1.to_csv_string(), r2.to_csv_string());
        assert_eq!(r1.trajectory.len(), 4);
        for r in &r1.trajectory {
            assert!((r.m_o * r.m_o + r.m_r * r.m_r - 1.0).abs() < 1e-9);
        }
    }
}
