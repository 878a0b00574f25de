//! STFT analysis and least-squares overlap-add synthesis.
//!
//! Frames are 25 ms long with a 20 ms hop at 16 kHz (400/320 samples), which
//! puts the spectrogram on the same 20 ms grid as the teacher embeddings.
//! Frames are Hann-windowed and zero-padded to a 512-point FFT, giving 257
//! bins. With only 20% overlap plain Hann overlap-add is not COLA, so
//! synthesis divides by the summed squared window instead.

mod plan;
mod stream;
pub mod wav;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use plan::StftPlan;
pub use stream::{StftFrame, StreamingStft};

pub const SAMPLE_RATE: u32 = 16_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DspError {
    #[error("input has {len} samples, shorter than one {window}-sample window")]
    TooShort { len: usize, window: usize },
    #[error("spectrogram has {got} bins, config expects {expected}")]
    BinMismatch { got: usize, expected: usize },
    #[error("streaming chunk has {got} samples, expected {expected}")]
    ChunkSize { got: usize, expected: usize },
    #[error("invalid stft config: {0}")]
    Config(String),
    #[error("spectrogram real/imag shapes differ")]
    Shape,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowKind {
    /// Periodic Hann window.
    Hann,
    /// Analysis window divided by the summed squared window (least squares).
    LeastSquares,
    Rectangular,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StftConfig {
    pub window_len: usize,
    pub hop: usize,
    pub fft_size: usize,
    pub analysis_window: WindowKind,
    pub synthesis_window: WindowKind,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self {
            window_len: 400,
            hop: 320,
            fft_size: 512,
            analysis_window: WindowKind::Hann,
            synthesis_window: WindowKind::LeastSquares,
        }
    }
}

impl StftConfig {
    pub fn validate(&self) -> Result<(), DspError> {
        if self.hop == 0 || self.hop > self.window_len || self.window_len > self.fft_size {
            return Err(DspError::Config(format!(
                "need 0 < hop ({}) <= window_len ({}) <= fft_size ({})",
                self.hop, self.window_len, self.fft_size
            )));
        }
        if self.analysis_window == WindowKind::LeastSquares {
            return Err(DspError::Config("least_squares is a synthesis window".into()));
        }
        Ok(())
    }

    pub fn bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    /// `floor((n - window_len) / hop) + 1`, or `None` when `n < window_len`.
    pub fn frame_count(&self, n: usize) -> Option<usize> {
        (n >= self.window_len).then(|| (n - self.window_len) / self.hop + 1)
    }

    /// Number of samples produced by synthesis from `frames` frames.
    pub fn synthesis_len(&self, frames: usize) -> usize {
        if frames == 0 {
            0
        } else {
            (frames - 1) * self.hop + self.window_len
        }
    }
}

/// Mono audio.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>) -> Self {
        Self {
            samples,
            sample_rate: SAMPLE_RATE,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn energy(&self) -> f64 {
        self.samples.iter().map(|&x| x as f64 * x as f64).sum()
    }

    pub fn peak(&self) -> f32 {
        self.samples.iter().fold(0.0f32, |m, &x| m.max(x.abs()))
    }
}

/// Complex STFT stored as separate `frames x bins` real and imaginary planes.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexSpectrogram {
    pub frames: usize,
    pub bins: usize,
    pub re: Vec<f32>,
    pub im: Vec<f32>,
}

impl ComplexSpectrogram {
    pub fn zeros(frames: usize, bins: usize) -> Self {
        Self {
            frames,
            bins,
            re: vec![0.0; frames * bins],
            im: vec![0.0; frames * bins],
        }
    }

    /// From a `[2, frames, bins]` planar buffer.
    pub fn from_planar(frames: usize, bins: usize, data: &[f32]) -> Self {
        let n = frames * bins;
        Self {
            frames,
            bins,
            re: data[..n].to_vec(),
            im: data[n..2 * n].to_vec(),
        }
    }

    /// `[2, frames, bins]` planar layout used by the model.
    pub fn to_planar(&self) -> Vec<f32> {
        let mut v = Vec::with_capacity(2 * self.re.len());
        v.extend_from_slice(&self.re);
        v.extend_from_slice(&self.im);
        v
    }

    pub fn magnitude(&self, t: usize, f: usize) -> f32 {
        let i = t * self.bins + f;
        self.re[i].hypot(self.im[i])
    }

    /// Keeps the first `frames` frames.
    pub fn truncate(&mut self, frames: usize) {
        if frames < self.frames {
            self.frames = frames;
            self.re.truncate(frames * self.bins);
            self.im.truncate(frames * self.bins);
        }
    }
}

pub fn stft(w: &Waveform, cfg: &StftConfig) -> Result<ComplexSpectrogram, DspError> {
    let plan = StftPlan::<f32>::new(*cfg)?;
    plan.spectrogram(&w.samples)
}

pub fn istft(s: &ComplexSpectrogram, cfg: &StftConfig) -> Result<Waveform, DspError> {
    let plan = StftPlan::<f32>::new(*cfg)?;
    plan.waveform(s)
}
