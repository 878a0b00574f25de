use std::sync::Arc;

use crate::dsp::{StftConfig, StftPlan};
use crate::model::uniform;
use crate::rng;
use crate::tensor::{ConvSpec, Float, Tape, Tensor, Var, EPS};

use super::{EmbeddingSequence, TeacherError};

/// Input gain applied to the log-magnitude spectrogram.
const INPUT_GAIN: f64 = 0.25;

/// A frozen stack of time convolutions over the log-magnitude spectrogram,
/// standing in for a pretrained self-supervised encoder. It lives on the
/// tape, so gradients flow through it into whatever produced its input.
#[derive(Clone, Debug)]
pub struct SyntheticTeacher<T: Float = f32> {
    pub layers: usize,
    pub dim: usize,
    bins: usize,
    weights: Vec<(Tensor<T>, Tensor<T>)>,
}

impl<T: Float> SyntheticTeacher<T> {
    pub fn new(bins: usize, layers: usize, dim: usize, seed: u64) -> Self {
        let mut r = rng::stream(seed, rng::TEACHER);
        let mut weights = Vec::with_capacity(layers);
        for l in 0..layers {
            let cin = if l == 0 { bins } else { dim };
            let bound = (3.0 / (cin * 3) as f64).sqrt();
            let mut w: Tensor<T> = uniform(&mut r, &[dim, cin, 3, 1], bound);
            w.set_requires_grad(false);
            let mut b: Tensor<T> = uniform(&mut r, &[dim], 0.1);
            b.set_requires_grad(false);
            weights.push((w, b));
        }
        Self { layers, dim, bins, weights }
    }

    /// Default teacher: 4 layers of width 64 over 257 bins.
    pub fn standard(seed: u64) -> Self {
        Self::new(257, 4, 64, seed)
    }

    /// Per-layer embeddings `[B, T, dim]` of a `[B, 2, T, bins]` spectrogram.
    pub fn embed(&self, tape: &mut Tape<T>, spec: Var) -> Result<Vec<Var>, TeacherError> {
        let s = tape.shape(spec).to_vec();
        if s.len() != 4 || s[1] != 2 || s[3] != self.bins {
            return Err(TeacherError::Invalid(format!("teacher expects [B, 2, T, {}], got {s:?}", self.bins)));
        }
        let (b, t) = (s[0], s[2]);
        let re = tape.slice(spec, 1, 0, 1)?;
        let im = tape.slice(spec, 1, 1, 1)?;
        let re2 = tape.mul(re, re)?;
        let im2 = tape.mul(im, im)?;
        let pow = tape.add(re2, im2)?;
        let pow = tape.add_scalar(pow, EPS);
        let mag = tape.sqrt(pow);
        let logmag = tape.log_eps(mag);
        let logmag = tape.mul_scalar(logmag, INPUT_GAIN);
        let x = tape.reshape(logmag, &[b, t, self.bins])?;
        let x = tape.permute(x, &[0, 2, 1])?;
        let mut x = tape.reshape(x, &[b, self.bins, t, 1])?;
        let spec_same = ConvSpec {
            stride: (1, 1),
            pad_time: (1, 1),
            pad_freq: (0, 0),
        };
        let mut out = Vec::with_capacity(self.layers);
        for (w, bias) in &self.weights {
            let w = tape.leaf(w);
            let bias = tape.leaf(bias);
            let y = tape.conv2d(x, w, Some(bias), spec_same)?;
            x = tape.tanh(y);
            let e = tape.reshape(x, &[b, self.dim, t])?;
            out.push(tape.permute(e, &[0, 2, 1])?);
        }
        Ok(out)
    }

    /// Per-layer embeddings of a `[B, N]` waveform.
    pub fn embed_wave(&self, tape: &mut Tape<T>, wave: Var, plan: &Arc<StftPlan<T>>) -> Result<Vec<Var>, TeacherError> {
        let spec = tape.stft(wave, plan)?;
        self.embed(tape, spec)
    }

    /// Off-tape embedding of a single waveform.
    pub fn sequence(&self, samples: &[f32]) -> Result<EmbeddingSequence, TeacherError> {
        let plan = Arc::new(StftPlan::<T>::new(StftConfig::default())?);
        let mut tape = Tape::new();
        let w = tape.constant(&[1, samples.len()], samples.iter().map(|&v| T::of_f32(v)).collect())?;
        let layers = self.embed_wave(&mut tape, w, &plan)?;
        let frames = tape.shape(layers[0])[1];
        let data = layers
            .iter()
            .flat_map(|&v| tape.value(v).iter().map(|x| x.as_f32()).collect::<Vec<_>>())
            .collect();
        EmbeddingSequence::new(self.layers, frames, self.dim, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tone(n: usize, f: f32) -> Vec<f32> {
        (0..n).map(|i| 0.5 * (2.0 * std::f32::consts::PI * f * i as f32 / 16000.0).sin()).collect()
    }

    #[test]
    fn one_second_gives_49_frames_in_range() {
        let t = SyntheticTeacher::<f32>::standard(3);
        let e = t.sequence(&tone(16000, 440.0)).unwrap();
        assert_eq!((e.layers, e.frames, e.dim), (4, 49, 64));
        assert!(e.data.iter().all(|v| v.abs() <= 1.0));
        let spread = e.last_layer().iter().map(|v| v.abs()).sum::<f32>() / e.last_layer().len() as f32;
        assert!(spread > 0.05 && spread < 0.95, "activations saturated or dead: {spread}");
    }

    #[test]
    fn deterministic_and_input_sensitive() {
        let t = SyntheticTeacher::<f32>::standard(3);
        let a = t.sequence(&tone(8000, 440.0)).unwrap();
        assert_eq!(a, SyntheticTeacher::<f32>::standard(3).sequence(&tone(8000, 440.0)).unwrap());
        let b = t.sequence(&tone(8000, 1500.0)).unwrap();
        assert_ne!(a.data, b.data);
    }

    #[test]
    fn frozen_but_differentiable_in_input() {
        let t = SyntheticTeacher::<f64>::new(257, 2, 8, 1);
        let plan = Arc::new(StftPlan::<f64>::new(StftConfig::default()).unwrap());
        let mut tape = Tape::new();
        let w = tape.leaf(&Tensor::from_fn(&[1, 1600], |i| (i as f64 * 0.05).sin()).with_grad());
        let layers = t.embed_wave(&mut tape, w, &plan).unwrap();
        let loss = tape.sum(*layers.last().unwrap());
        let g = tape.backward(loss).unwrap();
        let gw = g.get(w).unwrap();
        assert!(gw.iter().any(|v| v.abs() > 0.0));
        assert!(t.weights.iter().all(|(w, b)| !w.requires_grad() && !b.requires_grad()));
    }
}
