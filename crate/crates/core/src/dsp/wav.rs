//! Mono WAV input and output at 16 kHz.

use std::path::Path;

use hound::{SampleFormat, WavSpec};
use thiserror::Error;

use super::{Waveform, SAMPLE_RATE};

#[derive(Debug, Error)]
pub enum WavError {
    #[error("{path}: {source}")]
    Hound { path: String, source: hound::Error },
    #[error("{path}: sample rate {rate} Hz is not supported (only {SAMPLE_RATE} Hz, no resampling)")]
    SampleRate { path: String, rate: u32 },
    #[error("{path}: {channels} channels, only mono is supported")]
    Channels { path: String, channels: u16 },
    #[error("{path}: unsupported sample format ({bits}-bit {format:?})")]
    Format { path: String, bits: u16, format: SampleFormat },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum WavFormat {
    #[default]
    Pcm16,
    Float32,
}

pub fn read_wav(path: &Path) -> Result<Waveform, WavError> {
    let p = || path.display().to_string();
    let hound_err = |source| WavError::Hound { path: p(), source };
    let mut r = hound::WavReader::open(path).map_err(hound_err)?;
    let spec = r.spec();
    if spec.sample_rate != SAMPLE_RATE {
        return Err(WavError::SampleRate {
            path: p(),
            rate: spec.sample_rate,
        });
    }
    if spec.channels != 1 {
        return Err(WavError::Channels {
            path: p(),
            channels: spec.channels,
        });
    }
    let samples = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Int, 16) => r
            .samples::<i16>()
            .map(|s| s.map(|v| v as f32 / 32768.0))
            .collect::<Result<Vec<_>, _>>(),
        (SampleFormat::Float, 32) => r.samples::<f32>().collect::<Result<Vec<_>, _>>(),
        (format, bits) => return Err(WavError::Format { path: p(), bits, format }),
    }
    .map_err(hound_err)?;
    Ok(Waveform::new(samples))
}

pub fn write_wav(path: &Path, w: &Waveform, format: WavFormat) -> Result<(), WavError> {
    let hound_err = |source| WavError::Hound {
        path: path.display().to_string(),
        source,
    };
    let spec = WavSpec {
        channels: 1,
        sample_rate: w.sample_rate,
        bits_per_sample: if format == WavFormat::Pcm16 { 16 } else { 32 },
        sample_format: if format == WavFormat::Pcm16 {
            SampleFormat::Int
        } else {
            SampleFormat::Float
        },
    };
    let mut wr = hound::WavWriter::create(path, spec).map_err(hound_err)?;
    for &s in &w.samples {
        match format {
            WavFormat::Pcm16 => wr.write_sample((s.clamp(-1.0, 1.0) * 32767.0).round() as i16),
            WavFormat::Float32 => wr.write_sample(s),
        }
        .map_err(hound_err)?;
    }
    wr.finalize().map_err(hound_err)
}
