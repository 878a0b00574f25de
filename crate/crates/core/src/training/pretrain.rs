use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::data::{Batch, DataError};
use crate::dsp::{StftConfig, StftPlan};
use crate::losses::{self, Projection};
use crate::model::{uniform, Conditioning, Gcrn, GcrnConfig, ModelError, ParamSet, Skips};
use crate::rng;
use crate::tensor::checkpoint::Checkpoint;
use crate::tensor::{Adam, AdamConfig, Tape, Tensor};

use super::{align_frames, all, update, Result, RunLog, StepRecord, Teacher, TeacherSource, TrainError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PretrainTarget {
    Encoder,
    Decoder,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderLoss {
    L1,
    L2,
    Cosine,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderInput {
    /// Clean-speech teacher embeddings through a learned linear adapter.
    Teacher,
    /// Output of a pre-trained encoder on the noisy input, kept fixed.
    FrozenEncoder,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub target: PretrainTarget,
    pub encoder_loss: EncoderLoss,
    pub decoder_input: DecoderInput,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    pub clip_norm: f64,
    pub teacher: TeacherSource,
    /// Encoder weights for the frozen-encoder decoder input.
    pub encoder_checkpoint: Option<PathBuf>,
    pub checkpoint_every: usize,
    pub stft: StftConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            target: PretrainTarget::Encoder,
            encoder_loss: EncoderLoss::L1,
            decoder_input: DecoderInput::Teacher,
            steps: 5000,
            batch: 8,
            lr: 1e-3,
            seed: 0,
            clip_norm: 5.0,
            teacher: TeacherSource::synthetic(),
            encoder_checkpoint: None,
            checkpoint_every: 1000,
            stft: StftConfig::default(),
        }
    }
}

impl PretrainConfig {
    fn uses_teacher(&self) -> bool {
        self.target == PretrainTarget::Encoder || self.decoder_input == DecoderInput::Teacher
    }

    fn what(&self) -> String {
        match self.target {
            PretrainTarget::Encoder => "encoder pre-training".into(),
            PretrainTarget::Decoder => format!("decoder pre-training from {:?} input", self.decoder_input),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.stft.validate()?;
        if self.batch == 0 || !(self.lr > 0.0) || !(self.clip_norm > 0.0) {
            return Err(TrainError::Config("batch, lr and clip_norm must be positive".into()));
        }
        if self.uses_teacher() && self.teacher == TeacherSource::None {
            return Err(TrainError::Missing {
                mode: self.what(),
                resource: "a teacher source".into(),
            });
        }
        if self.target == PretrainTarget::Decoder && self.decoder_input == DecoderInput::FrozenEncoder && self.encoder_checkpoint.is_none() {
            return Err(TrainError::Missing {
                mode: self.what(),
                resource: "an encoder checkpoint (encoder_checkpoint)".into(),
            });
        }
        Ok(())
    }
}

/// Trains one half of the model: the encoder towards teacher embeddings of
/// the clean speech, or the decoder to reconstruct clean speech from teacher
/// embeddings or from a frozen encoder. The decoder is trained without
/// encoder skips; each stage instead adds its input duplicated along
/// frequency.
pub struct Pretrainer {
    pub cfg: PretrainConfig,
    pub model: Gcrn<f32>,
    /// `proj.*` for the encoder, `adapter.*` for teacher-fed decoders.
    pub head: ParamSet<f32>,
    teacher: Option<Teacher>,
    plan: Arc<StftPlan<f32>>,
    opt: Adam<f32>,
    step: usize,
}

impl Pretrainer {
    pub fn new(cfg: PretrainConfig, mut model_cfg: GcrnConfig) -> Result<Self> {
        cfg.validate()?;
        model_cfg.conditioning = Conditioning::None;
        if model_cfg.bins != cfg.stft.bins() {
            return Err(TrainError::Config(format!("model expects {} bins, STFT gives {}", model_cfg.bins, cfg.stft.bins())));
        }
        let teacher = if cfg.uses_teacher() { Teacher::open(&cfg.teacher, model_cfg.bins)? } else { None };
        if let Some(t) = &teacher {
            model_cfg.projection_dim = t.dim();
        }
        let mut model = Gcrn::new(model_cfg, cfg.seed)?;
        let h = model.config().lstm_hidden;
        let head = match (cfg.target, cfg.decoder_input, &teacher) {
            (PretrainTarget::Encoder, _, Some(t)) => Projection::new(h, t.dim(), cfg.seed).params,
            (PretrainTarget::Decoder, DecoderInput::Teacher, Some(t)) => {
                let d = t.dim();
                let mut r = rng::stream(cfg.seed, rng::ADAPTER);
                let mut p = ParamSet::new();
                p.insert("adapter.w", uniform(&mut r, &[d, h], 1.0 / (d as f64).sqrt()));
                p.insert("adapter.b", Tensor::zeros(&[h]));
                p
            }
            _ => {
                let path = cfg.encoder_checkpoint.as_ref().expect("validated");
                model.params.load_from(&Checkpoint::load(path)?, "enc.")?;
                ParamSet::new()
            }
        };
        Ok(Self {
            opt: Adam::new(AdamConfig {
                lr: cfg.lr,
                ..AdamConfig::default()
            }),
            plan: Arc::new(StftPlan::new(cfg.stft)?),
            cfg,
            model,
            head,
            teacher,
            step: 0,
        })
    }

    fn trains(&self, name: &str) -> bool {
        match self.cfg.target {
            PretrainTarget::Encoder => name.starts_with("enc."),
            PretrainTarget::Decoder => name.starts_with("dec."),
        }
    }

    pub fn step(&mut self, batch: &Batch) -> Result<StepRecord> {
        let step = self.step + 1;
        let mut tape = Tape::new();
        let mut b = self.model.bind(&mut tape, |n| self.trains(n));
        self.head.bind_into(&mut tape, &mut b, all);
        let x = tape.leaf(&batch.noisy);
        let y = tape.leaf(&batch.clean);
        let spec = tape.stft(x, &self.plan)?;
        let frames = tape.shape(spec)[2];
        let loss = match (self.cfg.target, self.cfg.decoder_input) {
            (PretrainTarget::Encoder, _) => {
                let teacher = self.teacher.as_mut().expect("teacher present");
                let target = *teacher.clean_layers(&mut tape, batch, y, &self.plan, frames)?.last().expect("layers");
                let enc = self.model.encode(&mut tape, &b, spec)?;
                let e = tape.linear(enc.output, b.get("proj.w"), Some(b.get("proj.b")))?;
                let (e, target) = align_frames(&mut tape, e, target)?;
                match self.cfg.encoder_loss {
                    EncoderLoss::L1 => losses::mean_l1(&mut tape, e, target)?,
                    EncoderLoss::L2 => losses::mean_squared(&mut tape, e, target)?,
                    EncoderLoss::Cosine => losses::cosine_distance(&mut tape, e, target)?,
                }
            }
            (PretrainTarget::Decoder, input) => {
                let h = if input == DecoderInput::Teacher {
                    let teacher = self.teacher.as_mut().expect("teacher present");
                    let e = *teacher.clean_layers(&mut tape, batch, y, &self.plan, frames)?.last().expect("layers");
                    tape.linear(e, b.get("adapter.w"), Some(b.get("adapter.b")))?
                } else {
                    self.model.encode(&mut tape, &b, spec)?.output
                };
                let out = self.model.decode(&mut tape, &b, h, &Skips::Duplicate, None)?;
                let est = tape.istft(out, &self.plan)?;
                let n = tape.shape(est)[1];
                let yc = tape.slice(y, 1, 0, n)?;
                losses::sisdr_loss(&mut tape, est, yc)?
            }
        };
        let value = tape.scalar(loss) as f64;
        if !value.is_finite() {
            return Err(TrainError::NonFinite {
                step,
                what: "loss",
                checkpoint: None,
            });
        }
        let mut grads = tape.backward(loss)?;
        self.model.params.collect_grads(&b, &mut grads);
        self.head.collect_grads(&b, &mut grads);
        let target = self.cfg.target;
        let keep = move |n: &str| match target {
            PretrainTarget::Encoder => n.starts_with("enc.") || n.starts_with("proj."),
            PretrainTarget::Decoder => n.starts_with("dec.") || n.starts_with("adapter."),
        };
        let norm = update(&mut self.opt, &mut [&mut self.model.params, &mut self.head], &keep, self.cfg.clip_norm)?;
        if !norm.is_finite() {
            return Err(TrainError::NonFinite {
                step,
                what: "gradient",
                checkpoint: None,
            });
        }
        self.step = step;
        Ok(StepRecord {
            step,
            values: vec![("loss", value), ("grad_norm", norm)],
        })
    }

    /// Runs `cfg.steps` steps. With a run directory, writes `metrics.tsv`,
    /// periodic checkpoints, the final `model.gck` (both halves) and
    /// `head.gck`.
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
        log.finish(&self.model, &[("head.gck", &self.head)])?;
        Ok(records)
    }
}

/// A model whose encoder comes from one checkpoint and decoder from another.
/// Every missing or misshapen tensor from either side is reported.
pub fn finetune_model(cfg: GcrnConfig, seed: u64, encoder: &Checkpoint, decoder: &Checkpoint) -> Result<Gcrn<f32>> {
    let mut m = Gcrn::new(cfg, seed)?;
    let mut problems = Vec::new();
    for (ck, prefix) in [(encoder, "enc."), (decoder, "dec.")] {
        match m.params.load_from(ck, prefix) {
            Ok(_) => {}
            Err(ModelError::Incompatible(p)) => problems.extend(p),
            Err(e) => return Err(e.into()),
        }
    }
    if problems.is_empty() {
        Ok(m)
    } else {
        Err(ModelError::Incompatible(problems).into())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Dataset, FixedBatches, SnrSpec};
    use crate::training::{param_hash, Mode, TrainConfig, Trainer};

    fn data() -> FixedBatches {
        let d = Dataset::synthetic(2, 3200, SnrSpec::Fixed(0.0), 9).unwrap();
        FixedBatches::new(d.materialize(2).unwrap(), 2)
    }

    fn subset(p: &ParamSet<f32>, prefix: &str) -> ParamSet<f32> {
        let mut s = ParamSet::new();
        for (n, t) in p.iter().filter(|(n, _)| n.starts_with(prefix)) {
            s.insert(n, t.clone());
        }
        s
    }

    #[test]
    fn encoder_pretraining_moves_only_the_encoder() {
        let mut d = data();
        for loss in [EncoderLoss::L1, EncoderLoss::L2, EncoderLoss::Cosine] {
            let cfg = PretrainConfig {
                encoder_loss: loss,
                steps: 3,
                batch: 2,
                ..PretrainConfig::default()
            };
            let mut p = Pretrainer::new(cfg, GcrnConfig::tiny()).unwrap();
            let dec = param_hash(&subset(&p.model.params, "dec."));
            let enc = param_hash(&subset(&p.model.params, "enc."));
            let recs = p.run(|| Ok(d.next_batch()), None).unwrap();
            assert!(recs.iter().all(|r| r.get("loss").unwrap().is_finite()));
            assert_eq!(param_hash(&subset(&p.model.params, "dec.")), dec);
            assert_ne!(param_hash(&subset(&p.model.params, "enc.")), enc);
        }
    }

    #[test]
    fn frozen_encoder_needs_a_checkpoint_and_stays_frozen() {
        let cfg = PretrainConfig {
            target: PretrainTarget::Decoder,
            decoder_input: DecoderInput::FrozenEncoder,
            steps: 2,
            batch: 2,
            ..PretrainConfig::default()
        };
        let e = Pretrainer::new(cfg.clone(), GcrnConfig::tiny()).err().unwrap();
        assert!(e.to_string().contains("encoder checkpoint"), "{e}");

        let dir = tempfile::tempdir().unwrap();
        let enc_model = Gcrn::<f32>::new(GcrnConfig::tiny(), 77).unwrap();
        let path = dir.path().join("enc.gck");
        enc_model.to_checkpoint().save(&path).unwrap();
        let mut p = Pretrainer::new(
            PretrainConfig {
                encoder_checkpoint: Some(path),
                ..cfg
            },
            GcrnConfig::tiny(),
        )
        .unwrap();
        let enc = subset(&enc_model.params, "enc.");
        assert_eq!(param_hash(&subset(&p.model.params, "enc.")), param_hash(&enc));
        let mut d = data();
        p.run(|| Ok(d.next_batch()), Some(dir.path())).unwrap();
        assert_eq!(param_hash(&subset(&p.model.params, "enc.")), param_hash(&enc));
        assert!(dir.path().join("model.gck").exists());
        assert!(!dir.path().join("head.gck").exists(), "no head parameters to save");
    }

    #[test]
    fn teacher_fed_decoder_reconstructs_clean_shape() {
        let cfg = PretrainConfig {
            target: PretrainTarget::Decoder,
            steps: 2,
            batch: 2,
            ..PretrainConfig::default()
        };
        let mut p = Pretrainer::new(cfg, GcrnConfig::tiny()).unwrap();
        assert_eq!(p.head.get("adapter.w").unwrap().shape(), &[64, 64]);
        let mut d = data();
        let recs = p.run(|| Ok(d.next_batch()), None).unwrap();
        assert!(recs.iter().all(|r| r.get("loss").unwrap().is_finite()));
    }

    #[test]
    fn finetune_from_initial_checkpoints_matches_baseline() {
        let seed = 4;
        let init = Gcrn::<f32>::new(GcrnConfig::tiny(), seed).unwrap().to_checkpoint();
        let m = finetune_model(GcrnConfig::tiny(), 99, &init, &init).unwrap();
        let cfg = TrainConfig {
            steps: 2,
            batch: 2,
            seed,
            checkpoint_every: 0,
            ..TrainConfig::default()
        };
        let (mut d1, mut d2) = (data(), data());
        let mut a = Trainer::from_model(cfg.clone(), m).unwrap();
        let mut b = Trainer::new(cfg, GcrnConfig::tiny()).unwrap();
        let ra = a.run(|| Ok(d1.next_batch()), None).unwrap();
        let rb = b.run(|| Ok(d2.next_batch()), None).unwrap();
        assert_eq!(ra, rb);
        assert_eq!(a.model, b.model);
        assert_eq!(Mode::Baseline, a.cfg.mode);
    }

    #[test]
    fn finetune_lists_every_mismatch() {
        let tiny = Gcrn::<f32>::new(GcrnConfig::tiny(), 1).unwrap().to_checkpoint();
        let e = finetune_model(GcrnConfig::default(), 1, &tiny, &tiny).err().unwrap().to_string();
        assert!(e.contains("enc.conv0.a.w") && e.contains("dec.fc.w"), "{e}");
    }
}
