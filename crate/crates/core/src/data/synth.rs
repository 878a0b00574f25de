//! Synthetic speech-like and noise signals for tests and desk-scale runs.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::rng;

const SR: f64 = 16000.0;

/// Formant centre frequencies (Hz) for a handful of vowels.
const VOWELS: [[f64; 3]; 5] = [
    [730.0, 1090.0, 2440.0],
    [270.0, 2290.0, 3010.0],
    [530.0, 1840.0, 2480.0],
    [570.0, 840.0, 2410.0],
    [300.0, 870.0, 2240.0],
];

/// Voiced syllables separated by short pauses: a glottal harmonic series
/// shaped by three formants, with a gliding pitch and a smooth envelope.
pub fn synthetic_speech(len: usize, seed: u64) -> Vec<f32> {
    let mut r = rng::stream(seed, rng::DATA ^ 0x5eec);
    let mut out = vec![0.0f64; len];
    let f0_base = r.random_range(95.0..220.0);
    let mut pos = r.random_range(0..800usize);
    while pos < len {
        let syl = r.random_range(1600..4800usize);
        let vowel = VOWELS[r.random_range(0..VOWELS.len())];
        let f0_start = f0_base * r.random_range(0.85..1.15);
        let f0_end = f0_base * r.random_range(0.85..1.15);
        let amp = r.random_range(0.4..1.0);
        let mut phase = 0.0f64;
        for i in 0..syl.min(len - pos) {
            let u = i as f64 / syl as f64;
            let f0 = f0_start + (f0_end - f0_start) * u;
            phase += 2.0 * PI * f0 / SR;
            let env = 0.3 + 0.7 * (PI * u).sin().powi(2);
            let mut v = 0.0;
            let mut h = 1;
            while (h as f64) * f0 < 7000.0 {
                let fh = h as f64 * f0;
                let gain: f64 = vowel
                    .iter()
                    .map(|&fc| (-((fh - fc) / (0.12 * fc + 60.0)).powi(2)).exp())
                    .sum::<f64>()
                    + 0.05;
                v += gain * (h as f64 * phase).sin() / (h as f64).sqrt();
                h += 1;
            }
            out[pos + i] += amp * env * v;
        }
        pos += syl + r.random_range(300..2400usize);
    }
    // Light breath noise so no sample run is exactly silent.
    for o in out.iter_mut() {
        let n: f64 = StandardNormal.sample(&mut r);
        *o += 0.003 * n;
    }
    normalize(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NoiseKind {
    White,
    Pink,
    Babble,
    Hum,
}

impl NoiseKind {
    pub const ALL: [NoiseKind; 4] = [Self::White, Self::Pink, Self::Babble, Self::Hum];
}

pub fn synthetic_noise(kind: NoiseKind, len: usize, seed: u64) -> Vec<f32> {
    let mut r = rng::stream(seed, rng::DATA ^ 0x0015e);
    let mut gauss = move || -> f64 { StandardNormal.sample(&mut r) };
    let out: Vec<f64> = match kind {
        NoiseKind::White => (0..len).map(|_| gauss()).collect(),
        NoiseKind::Pink => {
            // Sum of one-pole lowpass filters at octave-spaced corners.
            let poles = [0.99886, 0.99332, 0.96900, 0.86650, 0.55000];
            let gains = [0.0555, 0.0750, 0.1538, 0.3104, 0.5329];
            let mut st = [0.0f64; 5];
            (0..len)
                .map(|_| {
                    let w = gauss();
                    let mut y = 0.0;
                    for k in 0..5 {
                        st[k] = poles[k] * st[k] + gains[k] * w;
                        y += st[k];
                    }
                    y + 0.1 * w
                })
                .collect()
        }
        NoiseKind::Babble => {
            let mut acc = vec![0.0f64; len];
            for k in 0..5 {
                for (a, v) in acc.iter_mut().zip(synthetic_speech(len, seed.wrapping_mul(31).wrapping_add(k))) {
                    *a += v as f64;
                }
            }
            acc
        }
        NoiseKind::Hum => (0..len)
            .map(|i| {
                let t = i as f64 / SR;
                (1..6).map(|h| (2.0 * PI * 50.0 * h as f64 * t).sin() / h as f64).sum::<f64>() + 0.2 * gauss()
            })
            .collect(),
    };
    normalize(out)
}

fn normalize(x: Vec<f64>) -> Vec<f32> {
    let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    x.into_iter().map(|v| (0.9 * v / peak) as f32).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generators_are_seeded_and_bounded() {
        for kind in NoiseKind::ALL {
            let a = synthetic_noise(kind, 4000, 3);
            assert_eq!(a, synthetic_noise(kind, 4000, 3));
            assert_ne!(a, synthetic_noise(kind, 4000, 4));
            assert!(a.iter().all(|v| v.abs() <= 0.9 + 1e-6));
        }
        let s = synthetic_speech(16000, 1);
        assert_eq!(s.len(), 16000);
        assert!(s.iter().all(|v| v.is_finite() && v.abs() <= 0.9 + 1e-6));
        assert_ne!(s, synthetic_speech(16000, 2));
    }
}
