use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use super::{ComplexSpectrogram, DspError, StftConfig, Waveform, WindowKind};
use crate::tensor::Float;

/// Overlap-add normalisation below this value is clamped. Only the outermost
/// samples of a signal fall under it; interior positions of the default
/// framing stay above 0.017.
const WOLA_FLOOR: f64 = 1e-3;

/// Precomputed windows and FFT plans for one [`StftConfig`].
///
/// Besides the forward maps it exposes their adjoints, which the autodiff
/// tape uses as backward rules.
pub struct StftPlan<T: Float> {
    cfg: StftConfig,
    analysis: Vec<T>,
    synthesis: Vec<T>,
    forward: Arc<dyn Fft<T>>,
    inverse: Arc<dyn Fft<T>>,
}

impl<T: Float> std::fmt::Debug for StftPlan<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("StftPlan").field("cfg", &self.cfg).finish()
    }
}

fn window(kind: WindowKind, n: usize) -> Vec<f64> {
    match kind {
        WindowKind::Rectangular => vec![1.0; n],
        WindowKind::Hann | WindowKind::LeastSquares => (0..n)
            .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
            .collect(),
    }
}

impl<T: Float> StftPlan<T> {
    pub fn new(cfg: StftConfig) -> Result<Self, DspError> {
        cfg.validate()?;
        let analysis = window(cfg.analysis_window, cfg.window_len);
        let synthesis = match cfg.synthesis_window {
            WindowKind::LeastSquares => analysis.clone(),
            k => window(k, cfg.window_len),
        };
        let mut planner = FftPlanner::new();
        Ok(Self {
            cfg,
            analysis: analysis.into_iter().map(T::of_f64).collect(),
            synthesis: synthesis.into_iter().map(T::of_f64).collect(),
            forward: planner.plan_fft_forward(cfg.fft_size),
            inverse: planner.plan_fft_inverse(cfg.fft_size),
        })
    }

    pub fn config(&self) -> &StftConfig {
        &self.cfg
    }

    pub fn bins(&self) -> usize {
        self.cfg.bins()
    }

    pub fn frame_count(&self, n: usize) -> Option<usize> {
        self.cfg.frame_count(n)
    }

    pub fn synthesis_len(&self, frames: usize) -> usize {
        self.cfg.synthesis_len(frames)
    }

    /// Spectrum of one frame of exactly `window_len` samples, written as
    /// `re[0..bins]`, `im[0..bins]`.
    pub fn analyze_frame(&self, frame: &[T], re: &mut [T], im: &mut [T]) {
        let n = self.cfg.fft_size;
        let mut buf = vec![Complex::new(T::zero(), T::zero()); n];
        for (b, (&x, &w)) in buf.iter_mut().zip(frame.iter().zip(&self.analysis)) {
            b.re = x * w;
        }
        self.forward.process(&mut buf);
        for k in 0..self.bins() {
            re[k] = buf[k].re;
            im[k] = buf[k].im;
        }
    }

    /// Full signal to planar `[2, frames, bins]`. The caller guarantees the
    /// signal holds at least one window.
    pub fn analyze(&self, x: &[T]) -> Vec<T> {
        let frames = self.frame_count(x.len()).unwrap_or(0);
        let bins = self.bins();
        let mut out = vec![T::zero(); 2 * frames * bins];
        let (re, im) = out.split_at_mut(frames * bins);
        for t in 0..frames {
            let s = t * self.cfg.hop;
            self.analyze_frame(
                &x[s..s + self.cfg.window_len],
                &mut re[t * bins..(t + 1) * bins],
                &mut im[t * bins..(t + 1) * bins],
            );
        }
        out
    }

    /// Adjoint of [`analyze`](Self::analyze) for a signal of `len` samples.
    pub fn analyze_adjoint(&self, g: &[T], frames: usize, len: usize) -> Vec<T> {
        let (n, bins, wl) = (self.cfg.fft_size, self.bins(), self.cfg.window_len);
        let mut out = vec![T::zero(); len];
        let mut buf = vec![Complex::new(T::zero(), T::zero()); n];
        for t in 0..frames {
            buf.iter_mut().for_each(|c| *c = Complex::new(T::zero(), T::zero()));
            for k in 0..bins {
                buf[k] = Complex::new(g[t * bins + k], g[frames * bins + t * bins + k]);
            }
            // sum_k G_k e^{+i 2 pi k n / N}
            self.inverse.process(&mut buf);
            let s = t * self.cfg.hop;
            for i in 0..wl {
                out[s + i] += buf[i].re * self.analysis[i];
            }
        }
        out
    }

    /// Inverse real FFT of one frame (first `window_len` samples), ignoring
    /// the imaginary parts of the DC and Nyquist bins.
    fn frame_irfft(&self, re: &[T], im: &[T], buf: &mut [Complex<T>]) {
        let (n, bins) = (self.cfg.fft_size, self.bins());
        for k in 0..bins {
            buf[k] = Complex::new(re[k], im[k]);
        }
        for k in 1..n - bins + 1 {
            buf[n - k] = Complex::new(re[k], -im[k]);
        }
        if n % 2 == 0 {
            buf[n / 2].im = T::zero();
        }
        buf[0].im = T::zero();
        self.inverse.process(buf);
    }

    fn normaliser(&self, frames: usize) -> Vec<T> {
        let len = self.synthesis_len(frames);
        let mut den = vec![T::zero(); len];
        for t in 0..frames {
            let s = t * self.cfg.hop;
            for i in 0..self.cfg.window_len {
                den[s + i] += self.analysis[i] * self.synthesis[i];
            }
        }
        let floor = T::of_f64(WOLA_FLOOR);
        den.iter_mut().for_each(|d| *d = d.max(floor));
        den
    }

    /// Planar `[2, frames, bins]` to `(frames - 1) * hop + window_len` samples.
    pub fn synthesize(&self, spec: &[T], frames: usize) -> Vec<T> {
        let (n, bins, wl) = (self.cfg.fft_size, self.bins(), self.cfg.window_len);
        let inv_n = T::of_f64(1.0 / n as f64);
        let mut out = vec![T::zero(); self.synthesis_len(frames)];
        let mut buf = vec![Complex::new(T::zero(), T::zero()); n];
        let (re, im) = spec.split_at(frames * bins);
        for t in 0..frames {
            self.frame_irfft(&re[t * bins..(t + 1) * bins], &im[t * bins..(t + 1) * bins], &mut buf);
            let s = t * self.cfg.hop;
            for i in 0..wl {
                out[s + i] += buf[i].re * inv_n * self.synthesis[i];
            }
        }
        for (o, d) in out.iter_mut().zip(self.normaliser(frames)) {
            *o /= d;
        }
        out
    }

    /// Adjoint of [`synthesize`](Self::synthesize).
    pub fn synthesize_adjoint(&self, g: &[T], frames: usize) -> Vec<T> {
        let (n, bins, wl) = (self.cfg.fft_size, self.bins(), self.cfg.window_len);
        let den = self.normaliser(frames);
        let inv_n = T::of_f64(1.0 / n as f64);
        let two = T::of_f64(2.0);
        let mut out = vec![T::zero(); 2 * frames * bins];
        let mut buf = vec![Complex::new(T::zero(), T::zero()); n];
        for t in 0..frames {
            buf.iter_mut().for_each(|c| *c = Complex::new(T::zero(), T::zero()));
            let s = t * self.cfg.hop;
            for i in 0..wl {
                buf[i].re = g[s + i] / den[s + i] * self.synthesis[i];
            }
            self.forward.process(&mut buf);
            for k in 0..bins {
                let c = if k == 0 || (n % 2 == 0 && k == n / 2) { T::one() } else { two };
                let scale = c * inv_n;
                out[t * bins + k] = buf[k].re * scale;
                // DC and Nyquist imaginary parts do not reach the output.
                out[frames * bins + t * bins + k] = if k == 0 || (n % 2 == 0 && k == n / 2) {
                    T::zero()
                } else {
                    buf[k].im * scale
                };
            }
        }
        out
    }

    pub fn spectrogram(&self, x: &[f32]) -> Result<ComplexSpectrogram, DspError> {
        let frames = self.frame_count(x.len()).ok_or(DspError::TooShort {
            len: x.len(),
            window: self.cfg.window_len,
        })?;
        let xt: Vec<T> = x.iter().map(|&v| T::of_f32(v)).collect();
        let planar: Vec<f32> = self.analyze(&xt).into_iter().map(|v| v.as_f32()).collect();
        Ok(ComplexSpectrogram::from_planar(frames, self.bins(), &planar))
    }

    pub fn waveform(&self, s: &ComplexSpectrogram) -> Result<Waveform, DspError> {
        if s.bins != self.bins() {
            return Err(DspError::BinMismatch {
                got: s.bins,
                expected: self.bins(),
            });
        }
        if s.re.len() != s.im.len() || s.re.len() != s.frames * s.bins {
            return Err(DspError::Shape);
        }
        let planar: Vec<T> = s.to_planar().into_iter().map(T::of_f32).collect();
        Ok(Waveform::new(
            self.synthesize(&planar, s.frames).into_iter().map(|v| v.as_f32()).collect(),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(n: usize, seed: u64) -> Vec<f64> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| r.random_range(-1.0..1.0)).collect()
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn analysis_adjoint_identity() {
        let plan = StftPlan::<f64>::new(StftConfig::default()).unwrap();
        let x = rand_vec(1500, 1);
        let frames = plan.frame_count(1500).unwrap();
        let y = rand_vec(2 * frames * 257, 2);
        let lhs = dot(&plan.analyze(&x), &y);
        let rhs = dot(&x, &plan.analyze_adjoint(&y, frames, 1500));
        assert!((lhs - rhs).abs() < 1e-9 * lhs.abs().max(1.0), "{lhs} vs {rhs}");
    }

    #[test]
    fn synthesis_adjoint_identity() {
        let plan = StftPlan::<f64>::new(StftConfig::default()).unwrap();
        let frames = 5;
        let s = rand_vec(2 * frames * 257, 3);
        let g = rand_vec(plan.synthesis_len(frames), 4);
        let lhs = dot(&plan.synthesize(&s, frames), &g);
        let rhs = dot(&s, &plan.synthesize_adjoint(&g, frames));
        assert!((lhs - rhs).abs() < 1e-9 * lhs.abs().max(1.0), "{lhs} vs {rhs}");
    }
}
