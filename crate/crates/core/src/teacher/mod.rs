//! Teacher embeddings: the `SEB1` file format, last-layer and learned
//! weighted-sum views, frame alignment, and a frozen synthetic teacher.
//!
//! `SEB1` layout, all integers little-endian u32:
//!
//! ```text
//! "SEB1" version=1 L T D hop_samples sample_rate
//! L*T*D f32 LE values, layer-major then frame-major
//! ```

mod synthetic;

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::tensor::{Float, Tape, Tensor, TensorError, Var};

pub use synthetic::SyntheticTeacher;

pub const MAGIC: &[u8; 4] = b"SEB1";
pub const VERSION: u32 = 1;
pub const HEADER_BYTES: usize = 4 + 6 * 4;

#[derive(Debug, Error)]
pub enum TeacherError {
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("bad magic {0:?}, expected \"SEB1\"")]
    BadMagic([u8; 4]),
    #[error("unsupported SEB1 version {0}")]
    Version(u32),
    #[error("SEB1 size mismatch: header implies {expected} bytes, file has {actual}")]
    Size { expected: usize, actual: usize },
    #[error("invalid embedding sequence: {0}")]
    Invalid(String),
    #[error("teacher has {teacher} frames, spectrogram has {spec}; more than one frame apart")]
    Alignment { teacher: usize, spec: usize },
    #[error("{0} layer logits given for {1} layers")]
    LogitCount(usize, usize),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Dsp(#[from] crate::dsp::DspError),
}

/// `layers x frames x dim` activations on the 20 ms frame grid.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSequence {
    pub layers: usize,
    pub frames: usize,
    pub dim: usize,
    pub hop_samples: u32,
    pub sample_rate: u32,
    pub data: Vec<f32>,
}

impl EmbeddingSequence {
    pub fn new(layers: usize, frames: usize, dim: usize, data: Vec<f32>) -> Result<Self, TeacherError> {
        let e = Self {
            layers,
            frames,
            dim,
            hop_samples: 320,
            sample_rate: crate::dsp::SAMPLE_RATE,
            data,
        };
        e.validate()?;
        Ok(e)
    }

    pub fn validate(&self) -> Result<(), TeacherError> {
        if self.layers == 0 || self.dim == 0 {
            return Err(TeacherError::Invalid(format!("layers {} and dim {} must be positive", self.layers, self.dim)));
        }
        if self.data.len() != self.layers * self.frames * self.dim {
            return Err(TeacherError::Invalid(format!(
                "{} values for {}x{}x{}",
                self.data.len(),
                self.layers,
                self.frames,
                self.dim
            )));
        }
        if let Some(i) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(TeacherError::Invalid(format!("non-finite value at index {i}")));
        }
        Ok(())
    }

    /// Layer `l` as a `frames x dim` slice.
    pub fn layer(&self, l: usize) -> &[f32] {
        let n = self.frames * self.dim;
        &self.data[l * n..(l + 1) * n]
    }

    pub fn last_layer(&self) -> &[f32] {
        self.layer(self.layers - 1)
    }

    /// Keeps the first `frames` frames of every layer.
    pub fn truncated(&self, frames: usize) -> Self {
        let frames = frames.min(self.frames);
        let data = (0..self.layers)
            .flat_map(|l| self.layer(l)[..frames * self.dim].iter().copied())
            .collect();
        Self {
            frames,
            data,
            ..self.clone()
        }
    }

    /// `out[t] = sum_l softmax(logits)_l * e[l][t]`.
    pub fn weighted_sum(&self, logits: &[f64]) -> Result<Vec<f32>, TeacherError> {
        if logits.len() != self.layers {
            return Err(TeacherError::LogitCount(logits.len(), self.layers));
        }
        let w = softmax(logits);
        let n = self.frames * self.dim;
        let mut out = vec![0.0f64; n];
        for (l, wl) in w.iter().enumerate() {
            for (o, &v) in out.iter_mut().zip(self.layer(l)) {
                *o += wl * v as f64;
            }
        }
        Ok(out.into_iter().map(|v| v as f32).collect())
    }

    /// One `[1, frames, dim]` constant per layer.
    pub fn bind_layers<T: Float>(&self, tape: &mut Tape<T>) -> Vec<Var> {
        (0..self.layers)
            .map(|l| {
                let t = Tensor::new(vec![1, self.frames, self.dim], self.layer(l).iter().map(|&v| T::of_f32(v)).collect())
                    .expect("layer shape");
                tape.leaf(&t)
            })
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::with_capacity(HEADER_BYTES + 4 * self.data.len());
        b.extend_from_slice(MAGIC);
        for v in [
            VERSION,
            self.layers as u32,
            self.frames as u32,
            self.dim as u32,
            self.hop_samples,
            self.sample_rate,
        ] {
            b.extend_from_slice(&v.to_le_bytes());
        }
        for v in &self.data {
            b.extend_from_slice(&v.to_le_bytes());
        }
        b
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self, TeacherError> {
        if b.len() < HEADER_BYTES {
            if b.len() >= 4 && &b[..4] != MAGIC {
                return Err(TeacherError::BadMagic(b[..4].try_into().unwrap()));
            }
            return Err(TeacherError::Size {
                expected: HEADER_BYTES,
                actual: b.len(),
            });
        }
        let magic: [u8; 4] = b[..4].try_into().unwrap();
        if &magic != MAGIC {
            return Err(TeacherError::BadMagic(magic));
        }
        let u = |i: usize| u32::from_le_bytes(b[4 + 4 * i..8 + 4 * i].try_into().unwrap());
        if u(0) != VERSION {
            return Err(TeacherError::Version(u(0)));
        }
        let (layers, frames, dim) = (u(1) as usize, u(2) as usize, u(3) as usize);
        let expected = layers
            .checked_mul(frames)
            .and_then(|n| n.checked_mul(dim))
            .and_then(|n| n.checked_mul(4))
            .and_then(|n| n.checked_add(HEADER_BYTES))
            .ok_or_else(|| TeacherError::Invalid("header dimensions overflow".into()))?;
        if b.len() != expected {
            return Err(TeacherError::Size { expected, actual: b.len() });
        }
        let data = b[HEADER_BYTES..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let e = Self {
            layers,
            frames,
            dim,
            hop_samples: u(4),
            sample_rate: u(5),
            data,
        };
        e.validate()?;
        Ok(e)
    }

    pub fn save(&self, path: &Path) -> Result<(), TeacherError> {
        std::fs::File::create(path)
            .and_then(|mut f| f.write_all(&self.to_bytes()))
            .map_err(|source| TeacherError::Io {
                path: path.display().to_string(),
                source,
            })
    }

    pub fn load(path: &Path) -> Result<Self, TeacherError> {
        let mut b = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut b))
            .map_err(|source| TeacherError::Io {
                path: path.display().to_string(),
                source,
            })?;
        Self::from_bytes(&b)
    }
}

fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Common frame count of a teacher sequence and a spectrogram; they may
/// differ by at most one frame.
pub fn aligned_frames(teacher: usize, spec: usize) -> Result<usize, TeacherError> {
    if teacher.abs_diff(spec) > 1 {
        return Err(TeacherError::Alignment { teacher, spec });
    }
    Ok(teacher.min(spec))
}

/// Which view of the teacher's layers a training objective sees.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TeacherView {
    LastLayer,
    /// Softmax-weighted sum with learnable logits.
    WeightedSum,
}

/// Learnable per-layer logits for the weighted-sum view.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights<T: Float = f32> {
    pub logits: Tensor<T>,
}

impl<T: Float> LayerWeights<T> {
    /// Uniform weights.
    pub fn new(layers: usize) -> Self {
        Self {
            logits: Tensor::zeros(&[layers]).with_grad(),
        }
    }

    pub fn weights(&self) -> Vec<f64> {
        softmax(&self.logits.data().iter().map(|v| v.as_f64()).collect::<Vec<_>>())
    }
}

/// Weighted sum of per-layer sequences on the tape, differentiable in both
/// the layers and the logits.
pub fn weighted_sum<T: Float>(tape: &mut Tape<T>, layers: &[Var], logits: Var) -> Result<Var, TeacherError> {
    let n = tape.shape(logits).iter().product::<usize>();
    if n != layers.len() || layers.is_empty() {
        return Err(TeacherError::LogitCount(n, layers.len()));
    }
    let w = tape.softmax(logits)?;
    let mut acc: Option<Var> = None;
    for (l, &layer) in layers.iter().enumerate() {
        let wl = tape.slice(w, 0, l, 1)?;
        let term = tape.scale(layer, wl)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, term)?,
            None => term,
        });
    }
    Ok(acc.unwrap())
}

/// Applies a view to per-layer sequences. `logits` is required for the
/// weighted-sum view.
pub fn apply_view<T: Float>(tape: &mut Tape<T>, layers: &[Var], view: TeacherView, logits: Option<Var>) -> Result<Var, TeacherError> {
    match (view, logits) {
        (TeacherView::LastLayer, _) => Ok(*layers.last().expect("at least one layer")),
        (TeacherView::WeightedSum, Some(l)) => weighted_sum(tape, layers, l),
        (TeacherView::WeightedSum, None) => Err(TeacherError::LogitCount(0, layers.len())),
    }
}

/// Embedding files in a directory, looked up as `<dir>/<stem>.seb` for an
/// audio file `<anything>/<stem>.wav`.
#[derive(Clone, Debug)]
pub struct FileTeacher {
    pub dir: PathBuf,
}

impl FileTeacher {
    pub fn path_for(&self, audio: &Path) -> PathBuf {
        let stem = audio.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        self.dir.join(format!("{stem}.seb"))
    }

    pub fn load_for(&self, audio: &Path) -> Result<EmbeddingSequence, TeacherError> {
        EmbeddingSequence::load(&self.path_for(audio))
    }
}
