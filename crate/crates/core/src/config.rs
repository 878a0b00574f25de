//! Run configuration: one TOML document with a section per component.
//! Unknown keys are rejected, and the materialized document (every default
//! filled in) is what gets written into a run directory.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dsp::StftConfig;
use crate::losses::LossWeights;
use crate::model::GcrnConfig;
use crate::training::{DecoderInput, EncoderLoss, Mode, PretrainConfig, PretrainTarget, TeacherSource, TrainConfig};

/// A configuration problem, located by its dotted key path.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub field: String,
    pub msg: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.field.is_empty() {
            write!(f, "{}", self.msg)
        } else {
            write!(f, "{}: {}", self.field, self.msg)
        }
    }
}

impl std::error::Error for ConfigError {}

fn err<T>(field: &str, msg: impl fmt::Display) -> Result<T, ConfigError> {
    Err(ConfigError {
        field: field.into(),
        msg: msg.to_string(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Tab-separated `clean  noise  snr` records.
    pub manifest: Option<PathBuf>,
    /// Training crop in samples; 0 keeps whole clips.
    pub crop: usize,
    /// Batches prepared ahead of the training loop.
    pub prefetch: usize,
    /// Without a manifest, this many generated clips are used instead.
    pub synthetic_clips: usize,
    pub synthetic_seconds: f64,
    pub synthetic_snr_db: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            manifest: None,
            crop: 16000,
            prefetch: 4,
            synthetic_clips: 0,
            synthetic_seconds: 1.0,
            synthetic_snr_db: -5.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub mode: Mode,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub checkpoint_every: usize,
    pub clip_norm: f64,
    pub disc_hidden: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            mode: t.mode,
            steps: t.steps,
            batch: t.batch,
            lr: t.lr,
            checkpoint_every: t.checkpoint_every,
            clip_norm: t.clip_norm,
            disc_hidden: t.disc_hidden,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainSection {
    pub target: PretrainTarget,
    pub encoder_loss: EncoderLoss,
    pub decoder_input: DecoderInput,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub checkpoint_every: usize,
    pub clip_norm: f64,
    pub encoder_checkpoint: Option<PathBuf>,
}

impl Default for PretrainSection {
    fn default() -> Self {
        let p = PretrainConfig::default();
        Self {
            target: p.target,
            encoder_loss: p.encoder_loss,
            decoder_input: p.decoder_input,
            steps: p.steps,
            batch: p.batch,
            lr: p.lr,
            checkpoint_every: p.checkpoint_every,
            clip_norm: p.clip_norm,
            encoder_checkpoint: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Also compute STOI for every utterance.
    pub stoi: bool,
    /// Optional JSON copy of the report.
    pub json: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub stft: StftConfig,
    pub model: GcrnConfig,
    pub data: DataConfig,
    pub train: TrainSection,
    pub pretrain: PretrainSection,
    pub losses: LossWeights,
    pub teacher: TeacherSource,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            stft: StftConfig::default(),
            model: GcrnConfig::default(),
            data: DataConfig::default(),
            train: TrainSection::default(),
            pretrain: PretrainSection::default(),
            losses: LossWeights::default(),
            teacher: TeacherSource::None,
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError {
            field: String::new(),
            msg: e.to_string().trim_end().to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError {
            field: String::new(),
            msg: format!("{}: {e}", path.display()),
        })?;
        Self::from_toml(&text).map_err(|e| ConfigError {
            msg: format!("{}: {}", path.display(), e.msg),
            ..e
        })
    }

    /// The materialized document.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if let Err(e) = self.stft.validate() {
            return err("stft", e);
        }
        if let Err(e) = self.model.validate() {
            return err("model", e);
        }
        if self.model.bins != self.stft.bins() {
            return err(
                "model.bins",
                format!("{} does not match the {} bins of stft.fft_size {}", self.model.bins, self.stft.bins(), self.stft.fft_size),
            );
        }
        if let Err(e) = self.losses.validate() {
            return err("losses", e);
        }
        if self.data.crop != 0 && self.data.crop < self.stft.window_len {
            return err("data.crop", format!("{} is shorter than one analysis window", self.data.crop));
        }
        if self.data.synthetic_clips > 0 && !(self.data.synthetic_seconds > 0.0) {
            return err("data.synthetic_seconds", "must be positive");
        }
        for (field, v) in [("train.batch", self.train.batch), ("pretrain.batch", self.pretrain.batch)] {
            if v == 0 {
                return err(field, "must be positive");
            }
        }
        for (field, v) in [
            ("train.lr", self.train.lr),
            ("train.clip_norm", self.train.clip_norm),
            ("pretrain.lr", self.pretrain.lr),
            ("pretrain.clip_norm", self.pretrain.clip_norm),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return err(field, format!("must be positive, got {v}"));
            }
        }
        if self.train.disc_hidden == 0 {
            return err("train.disc_hidden", "must be positive");
        }
        if let TeacherSource::Synthetic { layers, dim, .. } = self.teacher {
            if layers == 0 || dim == 0 {
                return err("teacher", "synthetic teacher needs positive layers and dim");
            }
        }
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            mode: t.mode,
            steps: t.steps,
            batch: t.batch,
            lr: t.lr,
            seed: self.seed,
            weights: self.losses,
            teacher: self.teacher.clone(),
            checkpoint_every: t.checkpoint_every,
            clip_norm: t.clip_norm,
            disc_hidden: t.disc_hidden,
            stft: self.stft,
        }
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        let p = &self.pretrain;
        PretrainConfig {
            target: p.target,
            encoder_loss: p.encoder_loss,
            decoder_input: p.decoder_input,
            steps: p.steps,
            batch: p.batch,
            lr: p.lr,
            seed: self.seed,
            clip_norm: p.clip_norm,
            teacher: self.teacher.clone(),
            encoder_checkpoint: p.encoder_checkpoint.clone(),
            checkpoint_every: p.checkpoint_every,
            stft: self.stft,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn materialized_document_round_trips() {
        let mut c = RunConfig {
            model: GcrnConfig::tiny(),
            teacher: TeacherSource::synthetic(),
            ..RunConfig::default()
        };
        c.train.mode = Mode::DistillAdvWs;
        let text = c.to_toml();
        for section in ["[stft]", "[model]", "[data]", "[train]", "[pretrain]", "[losses]", "[teacher]", "[eval]"] {
            assert!(text.contains(section), "{section} missing:\n{text}");
        }
        assert_eq!(RunConfig::from_toml(&text).unwrap(), c);
    }

    #[test]
    fn partial_documents_take_defaults() {
        let c = RunConfig::from_toml("seed = 3\n[train]\nsteps = 10\n[teacher]\nkind = \"files\"\ndir = \"emb\"\n").unwrap();
        assert_eq!((c.seed, c.train.steps, c.train.batch), (3, 10, 8));
        assert_eq!(c.teacher, TeacherSource::Files { dir: "emb".into() });
        assert_eq!(c.train_config().seed, 3);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let e = RunConfig::from_toml("[train]\nstepz = 10\n").unwrap_err();
        assert!(e.msg.contains("stepz"), "{e}");
        let e = RunConfig::from_toml("[losses]\nlambda = 1\n").unwrap_err();
        assert!(e.msg.contains("lambda"), "{e}");
    }

    #[test]
    fn validation_names_the_field() {
        let mut c = RunConfig::default();
        c.train.batch = 0;
        assert_eq!(c.validate().unwrap_err().field, "train.batch");
        let mut c = RunConfig::default();
        c.stft.hop = 0;
        assert_eq!(c.validate().unwrap_err().field, "stft");
        c.stft.hop = 320;
        c.stft.fft_size = 1024;
        assert_eq!(c.validate().unwrap_err().field, "model.bins");
        let mut c = RunConfig::default();
        c.losses.margin = 0.0;
        assert_eq!(c.validate().unwrap_err().field, "losses");
    }
}
