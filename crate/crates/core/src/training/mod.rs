//! Training loops: enhancement training in every objective mode, encoder and
//! decoder pre-training, and fine-tuning from pre-trained halves.

mod pretrain;
mod teacher;

use std::fmt;
use std::fs::{self, File};
use std::hash::{Hash, Hasher};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Batch, DataError};
use crate::dsp::{DspError, StftConfig, StftPlan};
use crate::losses::{self, Discriminator, LossError, LossWeights, Projection};
use crate::metrics::{eval_sisdr, MetricError};
use crate::model::{Conditioning, Gcrn, GcrnConfig, ModelError, ParamSet};
use crate::teacher::{apply_view, aligned_frames, LayerWeights, TeacherError, TeacherView};
use crate::tensor::checkpoint::{Checkpoint, CheckpointError};
use crate::tensor::{clip_global_norm, Adam, AdamConfig, Tape, Tensor, TensorError, Var};

pub use pretrain::{finetune_model, DecoderInput, EncoderLoss, PretrainConfig, PretrainTarget, Pretrainer};
pub use teacher::{Teacher, TeacherSource};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("mode {mode} needs {resource}")]
    Missing { mode: String, resource: String },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite {what} at step {step}{}", match .checkpoint {
        Some(p) => format!("; last good parameters saved to {}", p.display()),
        None => String::new(),
    })]
    NonFinite {
        step: usize,
        what: &'static str,
        checkpoint: Option<PathBuf>,
    },
    #[error("model depends on the teacher at inference: {0}")]
    TeacherDependent(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Teacher(#[from] TeacherError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Dsp(#[from] DspError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Baseline,
    Concat,
    ConcatWs,
    DistillEmbed,
    DistillEmbedWs,
    DistillOutput,
    DistillAdv,
    DistillAdvWs,
    DistillTriplet,
    DistillTripletWs,
}

/// The auxiliary term a mode adds to the SI-SDR objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Aux {
    None,
    Embed,
    Adversarial,
    Triplet,
    Output,
}

impl Mode {
    pub const ALL: [Mode; 10] = [
        Mode::Baseline,
        Mode::Concat,
        Mode::ConcatWs,
        Mode::DistillEmbed,
        Mode::DistillEmbedWs,
        Mode::DistillOutput,
        Mode::DistillAdv,
        Mode::DistillAdvWs,
        Mode::DistillTriplet,
        Mode::DistillTripletWs,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Baseline => "baseline",
            Mode::Concat => "concat",
            Mode::ConcatWs => "concat_ws",
            Mode::DistillEmbed => "distill_embed",
            Mode::DistillEmbedWs => "distill_embed_ws",
            Mode::DistillOutput => "distill_output",
            Mode::DistillAdv => "distill_adv",
            Mode::DistillAdvWs => "distill_adv_ws",
            Mode::DistillTriplet => "distill_triplet",
            Mode::DistillTripletWs => "distill_triplet_ws",
        }
    }

    pub fn aux(self) -> Aux {
        match self {
            Mode::Baseline | Mode::Concat | Mode::ConcatWs => Aux::None,
            Mode::DistillEmbed | Mode::DistillEmbedWs => Aux::Embed,
            Mode::DistillOutput => Aux::Output,
            Mode::DistillAdv | Mode::DistillAdvWs => Aux::Adversarial,
            Mode::DistillTriplet | Mode::DistillTripletWs => Aux::Triplet,
        }
    }

    pub fn view(self) -> TeacherView {
        match self {
            Mode::ConcatWs | Mode::DistillEmbedWs | Mode::DistillAdvWs | Mode::DistillTripletWs => TeacherView::WeightedSum,
            _ => TeacherView::LastLayer,
        }
    }

    pub fn is_concat(self) -> bool {
        matches!(self, Mode::Concat | Mode::ConcatWs)
    }

    pub fn needs_teacher(self) -> bool {
        self != Mode::Baseline
    }

    /// Whether the trained model must run without the teacher.
    pub fn teacher_free(self) -> bool {
        !self.is_concat()
    }

    fn needs_clean_embeddings(self) -> bool {
        matches!(self.aux(), Aux::Embed | Aux::Adversarial | Aux::Triplet)
    }

    fn needs_noisy_embeddings(self) -> bool {
        self.is_concat() || self.aux() == Aux::Triplet
    }

    fn needs_projection(self) -> bool {
        matches!(self.aux(), Aux::Embed | Aux::Adversarial | Aux::Triplet)
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Mode::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| {
            let names: Vec<_> = Mode::ALL.iter().map(|m| m.name()).collect();
            format!("unknown mode {s:?}; expected one of {}", names.join(", "))
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub mode: Mode,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    pub weights: LossWeights,
    pub teacher: TeacherSource,
    /// Steps between intermediate checkpoints; 0 writes only the final one.
    pub checkpoint_every: usize,
    pub clip_norm: f64,
    pub disc_hidden: usize,
    pub stft: StftConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Baseline,
            steps: 5000,
            batch: 8,
            lr: 1e-3,
            seed: 0,
            weights: LossWeights::default(),
            teacher: TeacherSource::None,
            checkpoint_every: 1000,
            clip_norm: 5.0,
            disc_hidden: 64,
            stft: StftConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if self.batch == 0 {
            return Err(TrainError::Config("batch must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(TrainError::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.clip_norm > 0.0) {
            return Err(TrainError::Config(format!("clip_norm must be positive, got {}", self.clip_norm)));
        }
        self.stft.validate()?;
        if self.disc_hidden == 0 {
            return Err(TrainError::Config("disc_hidden must be positive".into()));
        }
        if self.mode.needs_teacher() && self.teacher == TeacherSource::None {
            return Err(TrainError::Missing {
                mode: self.mode.to_string(),
                resource: "a teacher source (teacher.kind = \"synthetic\" or \"files\")".into(),
            });
        }
        Ok(())
    }

    pub fn lambda(&self) -> f64 {
        match self.mode.aux() {
            Aux::None => 0.0,
            Aux::Embed => self.weights.embed,
            Aux::Adversarial => self.weights.adversarial,
            Aux::Triplet => self.weights.triplet,
            Aux::Output => self.weights.output,
        }
    }
}

/// One metric log record.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub values: Vec<(&'static str, f64)>,
}

impl StepRecord {
    pub fn get(&self, key: &str) -> Option<f64> {
        self.values.iter().find(|(k, _)| *k == key).map(|&(_, v)| v)
    }
}

impl fmt::Display for StepRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.step)?;
        for (k, v) in &self.values {
            write!(f, "\t{k}={v}")?;
        }
        Ok(())
    }
}

/// Order-sensitive hash of every parameter's bits.
pub fn param_hash(p: &ParamSet<f32>) -> u64 {
    let mut h = std::collections::hash_map::DefaultHasher::new();
    for (name, t) in p.iter() {
        name.hash(&mut h);
        t.shape().hash(&mut h);
        for v in t.data() {
            v.to_bits().hash(&mut h);
        }
    }
    h.finish()
}

/// Clips and applies one Adam update to the parameters of `sets` whose names
/// pass `keep`. Returns the gradient norm before clipping.
fn update(opt: &mut Adam<f32>, sets: &mut [&mut ParamSet<f32>], keep: &dyn Fn(&str) -> bool, clip: f64) -> Result<f64> {
    let norm = clip_global_norm(
        sets.iter_mut().flat_map(|s| s.iter_mut().filter(|(n, _)| keep(n)).map(|(_, t)| t)),
        clip,
    );
    if norm.is_finite() {
        opt.step(sets.iter_mut().flat_map(|s| s.iter_mut().filter(|(n, _)| keep(n))))?;
    }
    sets.iter_mut().for_each(|s| s.clear_grads());
    Ok(norm)
}

fn all(_: &str) -> bool {
    true
}

/// Slices two `[B, T, D]` sequences to their common frame count.
fn align_frames(tape: &mut Tape<f32>, a: Var, b: Var) -> Result<(Var, Var)> {
    let (ta, tb) = (tape.shape(a)[1], tape.shape(b)[1]);
    let n = aligned_frames(tb, ta)?;
    let a = if ta > n { tape.slice(a, 1, 0, n)? } else { a };
    let b = if tb > n { tape.slice(b, 1, 0, n)? } else { b };
    Ok((a, b))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Values kept from a generator step for the following critic step.
struct CriticInputs {
    fake: Tensor<f32>,
    real_layers: Vec<Tensor<f32>>,
}

/// Enhancement training in one of the [`Mode`]s.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: Gcrn<f32>,
    pub projection: Option<Projection<f32>>,
    pub discriminator: Option<Discriminator<f32>>,
    /// `teacher.logits` for the weighted-sum view.
    pub logits: Option<ParamSet<f32>>,
    teacher: Option<Teacher>,
    plan: Arc<StftPlan<f32>>,
    gen_opt: Adam<f32>,
    disc_opt: Adam<f32>,
    step: usize,
}

impl Trainer {
    /// Fresh model from `model_cfg`. Projection and conditioning widths are
    /// set from the teacher.
    pub fn new(cfg: TrainConfig, mut model_cfg: GcrnConfig) -> Result<Self> {
        cfg.validate()?;
        let teacher = Teacher::open(&cfg.teacher, model_cfg.bins)?;
        if let Some(t) = &teacher {
            model_cfg.projection_dim = t.dim();
            model_cfg.conditioning_dim = t.dim();
        }
        model_cfg.conditioning = if cfg.mode.is_concat() { Conditioning::Concat } else { Conditioning::None };
        let model = Gcrn::new(model_cfg, cfg.seed)?;
        Self::assemble(cfg, model, teacher)
    }

    /// Continues training an existing model.
    pub fn from_model(cfg: TrainConfig, model: Gcrn<f32>) -> Result<Self> {
        cfg.validate()?;
        let teacher = Teacher::open(&cfg.teacher, model.config().bins)?;
        Self::assemble(cfg, model, teacher)
    }

    fn assemble(cfg: TrainConfig, model: Gcrn<f32>, teacher: Option<Teacher>) -> Result<Self> {
        let mode = cfg.mode;
        let mc = model.config().clone();
        if mc.bins != cfg.stft.bins() {
            return Err(TrainError::Config(format!("model expects {} bins, STFT gives {}", mc.bins, cfg.stft.bins())));
        }
        if mode.is_concat() != (mc.conditioning == Conditioning::Concat) {
            return Err(TrainError::Config(format!(
                "mode {mode} needs a model with {} conditioning",
                if mode.is_concat() { "concat" } else { "no" }
            )));
        }
        if mode.aux() == Aux::Output && !teacher.as_ref().is_some_and(Teacher::differentiable) {
            return Err(LossError::NotDifferentiable("a precomputed embedding file").into());
        }
        if mode.needs_noisy_embeddings() && !teacher.as_ref().is_some_and(Teacher::differentiable) {
            return Err(TrainError::Missing {
                mode: mode.to_string(),
                resource: "teacher embeddings of the noisy input, which only the synthetic teacher provides".into(),
            });
        }
        let dim = teacher.as_ref().map(Teacher::dim).unwrap_or(mc.projection_dim);
        if mode.is_concat() && mc.conditioning_dim != dim {
            return Err(TrainError::Config(format!(
                "model conditioning_dim {} differs from teacher width {dim}",
                mc.conditioning_dim
            )));
        }
        let projection = mode.needs_projection().then(|| Projection::new(mc.lstm_hidden, dim, cfg.seed));
        let discriminator = (mode.aux() == Aux::Adversarial).then(|| Discriminator::new(dim, cfg.disc_hidden, cfg.seed));
        let logits = (mode.view() == TeacherView::WeightedSum).then(|| {
            let mut p = ParamSet::new();
            p.insert("teacher.logits", LayerWeights::<f32>::new(teacher.as_ref().map_or(1, Teacher::layers)).logits);
            p
        });
        let adam = AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        };
        Ok(Self {
            plan: Arc::new(StftPlan::new(cfg.stft)?),
            gen_opt: Adam::new(adam),
            disc_opt: Adam::new(adam),
            cfg,
            model,
            projection,
            discriminator,
            logits,
            teacher,
            step: 0,
        })
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// Softmax layer weights of the weighted-sum view.
    pub fn layer_weights(&self) -> Option<Vec<f64>> {
        self.logits.as_ref().map(|p| {
            LayerWeights {
                logits: p.get("teacher.logits").expect("logits present").clone(),
            }
            .weights()
        })
    }

    /// The layer logits belong to the critic's update in adversarial modes,
    /// where only the real branch sees them.
    fn logits_in_generator(&self) -> bool {
        self.cfg.mode.aux() != Aux::Adversarial
    }

    /// One generator update and, in adversarial modes, one critic update.
    pub fn step(&mut self, batch: &Batch) -> Result<StepRecord> {
        let (mut rec, critic) = self.generator_step(batch)?;
        if let Some(c) = critic {
            let (d_loss, d_norm) = self.critic_step(c)?;
            if !(d_loss.is_finite() && d_norm.is_finite()) {
                return Err(self.non_finite(rec.step, "discriminator loss"));
            }
            rec.values.push(("disc_loss", d_loss));
            rec.values.push(("disc_grad_norm", d_norm));
        }
        self.step = rec.step;
        Ok(rec)
    }

    fn generator_step(&mut self, batch: &Batch) -> Result<(StepRecord, Option<CriticInputs>)> {
        let step = self.step + 1;
        let mode = self.cfg.mode;
        let mut tape = Tape::new();
        let mut b = self.model.bind(&mut tape, all);
        if let Some(p) = &self.projection {
            p.params.bind_into(&mut tape, &mut b, all);
        }
        if let Some(l) = &self.logits {
            let on = self.logits_in_generator();
            l.bind_into(&mut tape, &mut b, |_| on);
        }
        if let Some(d) = &self.discriminator {
            d.params.bind_into(&mut tape, &mut b, |_| false);
        }
        let x = tape.leaf(&batch.noisy);
        let y = tape.leaf(&batch.clean);
        let spec = tape.stft(x, &self.plan)?;
        let frames = tape.shape(spec)[2];
        let logits = b.try_get("teacher.logits");
        let view = mode.view();
        let clean_layers = match (&mut self.teacher, mode.needs_clean_embeddings()) {
            (Some(t), true) => Some(t.clean_layers(&mut tape, batch, y, &self.plan, frames)?),
            _ => None,
        };
        let noisy_layers = match (&mut self.teacher, mode.needs_noisy_embeddings()) {
            (Some(t), true) => Some(t.noisy_layers(&mut tape, x, &self.plan)?),
            _ => None,
        };
        let cond = match &noisy_layers {
            Some(layers) if mode.is_concat() => Some(apply_view(&mut tape, layers, view, logits)?),
            _ => None,
        };
        let fwd = self.model.forward(&mut tape, &b, spec, cond)?;
        let est = tape.istft(fwd.spec, &self.plan)?;
        let n = tape.shape(est)[1];
        let yc = tape.slice(y, 1, 0, n)?;
        let sisdr = losses::sisdr_loss(&mut tape, est, yc)?;
        let mut critic = None;
        let aux = match mode.aux() {
            Aux::None => None,
            Aux::Embed => {
                let proj = self.projection.as_ref().expect("projection present");
                let e = proj.apply(&mut tape, &b, fwd.encoded.output)?;
                let t = apply_view(&mut tape, clean_layers.as_ref().expect("clean embeddings"), view, logits)?;
                let (e, t) = align_frames(&mut tape, e, t)?;
                Some(losses::distill_embed(&mut tape, e, t)?)
            }
            Aux::Triplet => {
                let proj = self.projection.as_ref().expect("projection present");
                let a = proj.apply(&mut tape, &b, fwd.encoded.output)?;
                let p = apply_view(&mut tape, clean_layers.as_ref().expect("clean embeddings"), view, logits)?;
                let neg = apply_view(&mut tape, noisy_layers.as_ref().expect("noisy embeddings"), view, logits)?;
                let (a, p) = align_frames(&mut tape, a, p)?;
                let (a, neg) = align_frames(&mut tape, a, neg)?;
                Some(losses::triplet(&mut tape, a, p, neg, self.cfg.weights.margin)?)
            }
            Aux::Adversarial => {
                let proj = self.projection.as_ref().expect("projection present");
                let disc = self.discriminator.as_ref().expect("discriminator present");
                let layers = clean_layers.as_ref().expect("clean embeddings");
                let fake = proj.apply(&mut tape, &b, fwd.encoded.output)?;
                let (fake, _) = align_frames(&mut tape, fake, layers[0])?;
                critic = Some(CriticInputs {
                    fake: tape.tensor(fake),
                    real_layers: layers.iter().map(|&v| tape.tensor(v)).collect(),
                });
                let d_fake = disc.score(&mut tape, &b, fake)?;
                Some(losses::lsgan_generator(&mut tape, d_fake))
            }
            Aux::Output => {
                let t = self.teacher.as_ref().expect("teacher present").synthetic().expect("checked at startup");
                Some(losses::distill_output(&mut tape, est, yc, t, &self.plan)?)
            }
        };
        let lambda = self.cfg.lambda();
        let total = match aux {
            Some(a) => {
                let w = tape.mul_scalar(a, lambda);
                tape.add(sisdr, w)?
            }
            None => sisdr,
        };
        let total_v = tape.scalar(total) as f64;
        if !total_v.is_finite() {
            return Err(self.non_finite(step, "loss"));
        }
        let mut grads = tape.backward(total)?;
        self.model.params.collect_grads(&b, &mut grads);
        let mut sets: Vec<&mut ParamSet<f32>> = vec![&mut self.model.params];
        if let Some(p) = &mut self.projection {
            p.params.collect_grads(&b, &mut grads);
            sets.push(&mut p.params);
        }
        if self.cfg.mode.aux() != Aux::Adversarial {
            if let Some(l) = &mut self.logits {
                l.collect_grads(&b, &mut grads);
                sets.push(l);
            }
        }
        let norm = update(&mut self.gen_opt, &mut sets, &all, self.cfg.clip_norm)?;
        if !norm.is_finite() {
            return Err(self.non_finite(step, "generator gradient"));
        }
        let sisdr_loss = tape.scalar(sisdr) as f64;
        let mut values = vec![("loss", total_v), ("sisdr_loss", sisdr_loss)];
        if let Some(a) = aux {
            values.push(("aux", tape.scalar(a) as f64));
        }
        values.push(("grad_norm", norm));
        Ok((StepRecord { step, values }, critic))
    }

    fn critic_step(&mut self, c: CriticInputs) -> Result<(f64, f64)> {
        let disc = self.discriminator.as_mut().expect("discriminator present");
        let mut tape = Tape::new();
        let mut b = disc.params.bind(&mut tape, all);
        if let Some(l) = &self.logits {
            l.bind_into(&mut tape, &mut b, all);
        }
        let layers: Vec<Var> = c.real_layers.iter().map(|t| tape.leaf(t)).collect();
        let real = apply_view(&mut tape, &layers, self.cfg.mode.view(), b.try_get("teacher.logits"))?;
        let fake = tape.leaf(&c.fake);
        let (fake, real) = align_frames(&mut tape, fake, real)?;
        let d_fake = disc.score(&mut tape, &b, fake)?;
        let d_real = disc.score(&mut tape, &b, real)?;
        let loss = losses::lsgan_discriminator(&mut tape, d_fake, d_real);
        let value = tape.scalar(loss) as f64;
        if !value.is_finite() {
            return Ok((value, 0.0));
        }
        let mut grads = tape.backward(loss)?;
        disc.params.collect_grads(&b, &mut grads);
        let mut sets: Vec<&mut ParamSet<f32>> = vec![&mut disc.params];
        if let Some(l) = &mut self.logits {
            l.collect_grads(&b, &mut grads);
            sets.push(l);
        }
        let norm = update(&mut self.disc_opt, &mut sets, &all, self.cfg.clip_norm)?;
        Ok((value, norm))
    }

    fn non_finite(&mut self, step: usize, what: &'static str) -> TrainError {
        self.model.params.clear_grads();
        TrainError::NonFinite {
            step,
            what,
            checkpoint: None,
        }
    }

    /// Projection, discriminator and layer logits, if any.
    pub fn extras_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        let sets = [
            self.projection.as_ref().map(|p| &p.params),
            self.discriminator.as_ref().map(|d| &d.params),
            self.logits.as_ref(),
        ];
        for set in sets.into_iter().flatten() {
            for (name, t) in set.iter() {
                ck.push(name, t).expect("names are unique");
            }
        }
        ck
    }

    /// Runs `cfg.steps` steps, drawing batches from `next`. With a run
    /// directory, writes `metrics.tsv`, periodic `step_NNNNNNN.gck` files,
    /// the final `model.gck`, `extras.gck` when the mode has extra
    /// parameters, and `layer_weights.tsv` for weighted-sum modes.
    pub fn run<F>(&mut self, mut next: F, run_dir: Option<&Path>) -> Result<Vec<StepRecord>>
    where
        F: FnMut() -> std::result::Result<Batch, DataError>,
    {
        let mut log = RunLog::open(run_dir)?;
        let mut records = Vec::with_capacity(self.cfg.steps);
        for _ in 0..self.cfg.steps {
            let batch = next()?;
            let rec = self.step(&batch).map_err(|e| log.abort(e, &self.model))?;
            log.record(&rec, self.cfg.checkpoint_every, &self.model)?;
            records.push(rec);
        }
        let extras = self.extras_checkpoint();
        log.finish(&self.model, &[("extras.gck", &extras)])?;
        if let (Some(d), Some(w)) = (run_dir, self.layer_weights()) {
            let text: String = w.iter().enumerate().map(|(l, v)| format!("{l}\t{v}\n")).collect();
            write_file(&d.join("layer_weights.tsv"), &text)?;
        }
        Ok(records)
    }
}

/// Metric log and checkpoints of a run directory.
pub(crate) struct RunLog {
    dir: Option<PathBuf>,
    file: Option<File>,
}

impl RunLog {
    pub(crate) fn open(dir: Option<&Path>) -> Result<Self> {
        let io = |path: &Path| {
            let path = path.to_path_buf();
            move |source| TrainError::Io { path, source }
        };
        let file = match dir {
            Some(d) => {
                fs::create_dir_all(d).map_err(io(d))?;
                let p = d.join("metrics.tsv");
                Some(File::create(&p).map_err(io(&p))?)
            }
            None => None,
        };
        Ok(Self {
            dir: dir.map(Path::to_path_buf),
            file,
        })
    }

    pub(crate) fn record(&mut self, rec: &StepRecord, checkpoint_every: usize, model: &Gcrn<f32>) -> Result<()> {
        let (Some(d), Some(f)) = (&self.dir, &mut self.file) else { return Ok(()) };
        writeln!(f, "{rec}").map_err(|source| TrainError::Io {
            path: d.join("metrics.tsv"),
            source,
        })?;
        if checkpoint_every > 0 && rec.step % checkpoint_every == 0 {
            model.to_checkpoint().save(&d.join(format!("step_{:07}.gck", rec.step)))?;
        }
        Ok(())
    }

    /// Saves the unchanged parameters on a non-finite abort.
    pub(crate) fn abort(&self, e: TrainError, model: &Gcrn<f32>) -> TrainError {
        match (e, &self.dir) {
            (TrainError::NonFinite { step, what, .. }, Some(d)) => {
                let p = d.join("last_good.gck");
                if let Err(e) = model.to_checkpoint().save(&p) {
                    return e.into();
                }
                TrainError::NonFinite {
                    step,
                    what,
                    checkpoint: Some(p),
                }
            }
            (e, _) => e,
        }
    }

    pub(crate) fn finish(&self, model: &Gcrn<f32>, extras: &[(&str, &dyn AsCheckpoint)]) -> Result<()> {
        let Some(d) = &self.dir else { return Ok(()) };
        model.to_checkpoint().save(&d.join("model.gck"))?;
        for (name, set) in extras {
            let ck = set.as_checkpoint();
            if !ck.is_empty() {
                ck.save(&d.join(name))?;
            }
        }
        Ok(())
    }
}

pub(crate) trait AsCheckpoint {
    fn as_checkpoint(&self) -> Checkpoint;
}

impl AsCheckpoint for Checkpoint {
    fn as_checkpoint(&self) -> Checkpoint {
        self.clone()
    }
}

impl AsCheckpoint for ParamSet<f32> {
    fn as_checkpoint(&self) -> Checkpoint {
        self.to_checkpoint()
    }
}

/// Offline enhancement of one waveform. The output is the STFT synthesis
/// length, which can be a few samples shorter than the input.
pub fn enhance(model: &Gcrn<f32>, plan: &Arc<StftPlan<f32>>, noisy: &[f32]) -> Result<Vec<f32>> {
    let mut tape = Tape::new();
    let b = model.bind(&mut tape, |_| false);
    let x = tape.constant(&[1, noisy.len()], noisy.to_vec())?;
    let spec = tape.stft(x, plan)?;
    let out = model.forward(&mut tape, &b, spec, None)?;
    let w = tape.istft(out.spec, plan)?;
    Ok(tape.value(w).to_vec())
}

/// Runs inference with no teacher available. Models whose decoder needs
/// teacher features fail.
pub fn check_teacher_free(model: &Gcrn<f32>, stft: StftConfig) -> Result<()> {
    let plan = Arc::new(StftPlan::new(stft)?);
    let probe: Vec<f32> = (0..3200).map(|i| (i as f32 * 0.031).sin() * 0.1).collect();
    match enhance(model, &plan, &probe) {
        Ok(_) => Ok(()),
        Err(TrainError::Model(e @ ModelError::Condition(_))) => Err(TrainError::TeacherDependent(e.to_string())),
        Err(e) => Err(e),
    }
}

/// Mean SI-SDR of the enhanced and of the unprocessed noisy signals against
/// the clean references, over `(noisy, clean)` pairs.
pub fn mean_sisdr(model: &Gcrn<f32>, plan: &Arc<StftPlan<f32>>, pairs: &[(&[f32], &[f32])]) -> Result<(f64, f64)> {
    let (mut enh, mut raw) = (0.0, 0.0);
    for (noisy, clean) in pairs {
        let est = enhance(model, plan, noisy)?;
        let n = est.len();
        enh += eval_sisdr(&est, &clean[..n])?;
        raw += eval_sisdr(&noisy[..n], &clean[..n])?;
    }
    let k = pairs.len().max(1) as f64;
    Ok((enh / k, raw / k))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Dataset, FixedBatches, SnrSpec};

    fn batches(n: usize, len: usize, batch: usize) -> FixedBatches {
        let d = Dataset::synthetic(n, len, SnrSpec::Fixed(0.0), 5).unwrap();
        FixedBatches::new(d.materialize(1).unwrap(), batch)
    }

    fn cfg(mode: Mode, steps: usize) -> TrainConfig {
        TrainConfig {
            mode,
            steps,
            batch: 2,
            teacher: TeacherSource::synthetic(),
            checkpoint_every: 0,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn mode_names_round_trip() {
        for m in Mode::ALL {
            assert_eq!(m.name().parse::<Mode>().unwrap(), m);
            let s = toml::to_string(&TrainConfig { mode: m, ..TrainConfig::default() }).unwrap();
            assert!(s.contains(&format!("mode = \"{}\"", m.name())));
        }
        assert!("distill".parse::<Mode>().is_err());
    }

    #[test]
    fn non_baseline_modes_need_a_teacher() {
        for m in Mode::ALL.into_iter().filter(|m| m.needs_teacher()) {
            let c = TrainConfig {
                mode: m,
                ..TrainConfig::default()
            };
            let e = Trainer::new(c, GcrnConfig::tiny()).err().unwrap();
            assert!(e.to_string().contains("teacher source"), "{m}: {e}");
        }
    }

    #[test]
    fn every_mode_takes_finite_steps() {
        let mut data = batches(2, 3200, 2);
        for m in Mode::ALL {
            let mut t = Trainer::new(cfg(m, 2), GcrnConfig::tiny()).unwrap();
            let recs = t.run(|| Ok(data.next_batch()), None).unwrap();
            assert_eq!(recs.len(), 2);
            for r in &recs {
                assert!(r.values.iter().all(|(_, v)| v.is_finite()), "{m}: {r}");
                assert_eq!(r.get("aux").is_some(), m.aux() != Aux::None, "{m}");
                assert_eq!(r.get("disc_loss").is_some(), m.aux() == Aux::Adversarial, "{m}");
            }
            assert_eq!(check_teacher_free(&t.model, StftConfig::default()).is_ok(), m.teacher_free(), "{m}");
        }
    }

    #[test]
    fn critic_and_generator_touch_disjoint_parameters() {
        let mut data = batches(2, 3200, 2);
        let mut t = Trainer::new(cfg(Mode::DistillAdvWs, 1), GcrnConfig::tiny()).unwrap();
        let gen = |t: &Trainer| (param_hash(&t.model.params), param_hash(&t.projection.as_ref().unwrap().params));
        let critic = |t: &Trainer| (param_hash(&t.discriminator.as_ref().unwrap().params), param_hash(t.logits.as_ref().unwrap()));
        for _ in 0..2 {
            let (g0, c0) = (gen(&t), critic(&t));
            let (_, inputs) = t.generator_step(&data.next_batch()).unwrap();
            let g1 = gen(&t);
            assert_ne!(g1, g0);
            assert_eq!(critic(&t), c0);
            t.critic_step(inputs.unwrap()).unwrap();
            assert_eq!(gen(&t), g1);
            let c2 = critic(&t);
            assert!(c2.0 != c0.0 && c2.1 != c0.1);
        }
    }

    #[test]
    fn same_seed_gives_identical_logs() {
        let run = || {
            let mut data = batches(2, 3200, 2);
            let mut t = Trainer::new(cfg(Mode::DistillTriplet, 3), GcrnConfig::tiny()).unwrap();
            t.run(|| Ok(data.next_batch()), None).unwrap().iter().map(|r| r.to_string()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn run_directory_contents() {
        let dir = tempfile::tempdir().unwrap();
        let mut data = batches(2, 3200, 2);
        let mut c = cfg(Mode::DistillEmbedWs, 2);
        c.checkpoint_every = 1;
        let mut t = Trainer::new(c, GcrnConfig::tiny()).unwrap();
        t.run(|| Ok(data.next_batch()), Some(dir.path())).unwrap();
        for f in ["metrics.tsv", "model.gck", "extras.gck", "layer_weights.tsv", "step_0000001.gck", "step_0000002.gck"] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        let log = fs::read_to_string(dir.path().join("metrics.tsv")).unwrap();
        let first = log.lines().next().unwrap();
        assert!(first.starts_with("1\tloss="), "{first}");
        let w: f64 = fs::read_to_string(dir.path().join("layer_weights.tsv"))
            .unwrap()
            .lines()
            .map(|l| l.split('\t').nth(1).unwrap().parse::<f64>().unwrap())
            .sum();
        assert!((w - 1.0).abs() < 1e-9);
        let ck = Checkpoint::load(&dir.path().join("model.gck")).unwrap();
        assert_eq!(Gcrn::<f32>::from_checkpoint(t.model.config().clone(), &ck).unwrap(), t.model);
    }

    #[test]
    fn non_finite_loss_aborts_with_last_good_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let mut data = batches(2, 3200, 2);
        let mut t = Trainer::new(cfg(Mode::Baseline, 3), GcrnConfig::tiny()).unwrap();
        let good = t.model.clone();
        let e = t
            .run(
                || {
                    let mut b = data.next_batch();
                    b.noisy.data_mut()[7] = f32::NAN;
                    Ok(b)
                },
                Some(dir.path()),
            )
            .unwrap_err();
        match e {
            TrainError::NonFinite { step: 1, checkpoint: Some(p), .. } => {
                let ck = Checkpoint::load(&p).unwrap();
                assert_eq!(Gcrn::<f32>::from_checkpoint(good.config().clone(), &ck).unwrap(), good);
            }
            e => panic!("unexpected {e}"),
        }
    }
}
