//! Short-time objective intelligibility.
//!
//! Follows the published procedure (Taal et al., 2011) but runs directly at
//! 16 kHz: 512-sample Hann frames with 50% overlap, a 1024-point FFT, 15
//! one-third octave bands centred from 150 Hz upward, 24-frame (384 ms)
//! analysis segments, a -15 dB clipping bound and removal of frames more
//! than 40 dB below the loudest reference frame.

use std::f64::consts::PI;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::MetricError;

const FRAME: usize = 512;
const HOP: usize = 256;
const NFFT: usize = 1024;
const BANDS: usize = 15;
const MIN_CENTER_HZ: f64 = 150.0;
const SEGMENT: usize = 24;
const BETA_DB: f64 = -15.0;
const DYN_RANGE_DB: f64 = 40.0;
const FS: f64 = 16_000.0;

/// Shortest input accepted: one analysis segment of frames.
pub const STOI_MIN_SAMPLES: usize = (SEGMENT - 1) * HOP + FRAME;

fn hann() -> Vec<f64> {
    // Symmetric window excluding the zero end points, as in the reference code.
    (0..FRAME)
        .map(|n| 0.5 - 0.5 * (2.0 * PI * (n + 1) as f64 / (FRAME + 1) as f64).cos())
        .collect()
}

fn frame_starts(len: usize) -> impl Iterator<Item = usize> {
    (0..).map(|i| i * HOP).take_while(move |s| s + FRAME <= len)
}

/// Drops frames of `x` (and the same frames of `y`) whose energy is more than
/// the dynamic range below the loudest `x` frame, then overlap-adds the rest.
fn remove_silent(x: &[f64], y: &[f64], w: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let starts: Vec<usize> = frame_starts(x.len()).collect();
    let energy: Vec<f64> = starts
        .iter()
        .map(|&s| {
            let e: f64 = (0..FRAME).map(|n| (w[n] * x[s + n]).powi(2)).sum();
            20.0 * (e.sqrt() + f64::EPSILON).log10()
        })
        .collect();
    let max = energy.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let keep: Vec<usize> = starts
        .iter()
        .zip(&energy)
        .filter(|(_, &e)| e > max - DYN_RANGE_DB)
        .map(|(&s, _)| s)
        .collect();
    let len = if keep.is_empty() {
        0
    } else {
        (keep.len() - 1) * HOP + FRAME
    };
    let (mut xs, mut ys) = (vec![0.0; len], vec![0.0; len]);
    for (j, &s) in keep.iter().enumerate() {
        for n in 0..FRAME {
            xs[j * HOP + n] += w[n] * x[s + n];
            ys[j * HOP + n] += w[n] * y[s + n];
        }
    }
    (xs, ys)
}

/// Third-octave band envelopes, `[band][frame]`.
fn band_envelopes(x: &[f64], w: &[f64], bands: &[(usize, usize)]) -> Vec<Vec<f64>> {
    let fft = FftPlanner::new().plan_fft_forward(NFFT);
    let starts: Vec<usize> = frame_starts(x.len()).collect();
    let mut env = vec![Vec::with_capacity(starts.len()); BANDS];
    let mut buf = vec![Complex::new(0.0, 0.0); NFFT];
    for &s in &starts {
        buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
        for n in 0..FRAME {
            buf[n].re = w[n] * x[s + n];
        }
        fft.process(&mut buf);
        for (j, &(lo, hi)) in bands.iter().enumerate() {
            env[j].push((lo..hi).map(|k| buf[k].norm_sqr()).sum::<f64>().sqrt());
        }
    }
    env
}

/// Bin ranges `[lo, hi)` of the one-third octave bands.
fn third_octave_bins() -> Vec<(usize, usize)> {
    let bin_hz = FS / NFFT as f64;
    let nearest = |f: f64| ((f / bin_hz).round() as usize).min(NFFT / 2);
    (0..BANDS)
        .map(|k| {
            let cf = MIN_CENTER_HZ * 2f64.powf(k as f64 / 3.0);
            (nearest(cf * 2f64.powf(-1.0 / 6.0)), nearest(cf * 2f64.powf(1.0 / 6.0)))
        })
        .collect()
}

fn centered_norm(v: &mut [f64]) -> f64 {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    v.iter_mut().for_each(|x| *x -= m);
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// STOI of `est` against the clean `reference`. Both must be 16 kHz and of
/// equal length.
pub fn eval_stoi(est: &[f32], reference: &[f32]) -> Result<f64, MetricError> {
    if est.len() != reference.len() {
        return Err(MetricError::LengthMismatch {
            est: est.len(),
            reference: reference.len(),
        });
    }
    if reference.len() < STOI_MIN_SAMPLES {
        return Err(MetricError::TooShort {
            len: reference.len(),
            min: STOI_MIN_SAMPLES,
        });
    }
    let w = hann();
    let x: Vec<f64> = reference.iter().map(|&v| v as f64).collect();
    let y: Vec<f64> = est.iter().map(|&v| v as f64).collect();
    let (x, y) = remove_silent(&x, &y, &w);
    let bands = third_octave_bins();
    let ex = band_envelopes(&x, &w, &bands);
    let ey = band_envelopes(&y, &w, &bands);
    let frames = ex[0].len();
    if frames < SEGMENT {
        return Err(MetricError::TooFewFrames { frames, min: SEGMENT });
    }
    let clip = 1.0 + 10f64.powf(-BETA_DB / 20.0);
    let (mut total, mut count) = (0.0, 0usize);
    for m in SEGMENT..=frames {
        for j in 0..BANDS {
            let mut xs = ex[j][m - SEGMENT..m].to_vec();
            let ys = &ey[j][m - SEGMENT..m];
            let nx = xs.iter().map(|v| v * v).sum::<f64>().sqrt();
            let ny = ys.iter().map(|v| v * v).sum::<f64>().sqrt();
            let alpha = nx / (ny + f64::EPSILON);
            let mut yc: Vec<f64> = ys.iter().zip(&xs).map(|(&yv, &xv)| (alpha * yv).min(clip * xv)).collect();
            let (a, b) = (centered_norm(&mut xs), centered_norm(&mut yc));
            let d: f64 = xs.iter().zip(&yc).map(|(p, q)| p * q).sum();
            total += d / (a * b + f64::EPSILON);
            count += 1;
        }
    }
    Ok((total / count as f64).clamp(-1.0, 1.0))
}
