//! Evaluation metrics: SI-SDR and STOI, plus the per-utterance report.

mod stoi;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use stoi::{eval_stoi, STOI_MIN_SAMPLES};

/// Bounds applied to every SI-SDR value, in dB.
pub const SISDR_CLAMP_DB: f64 = 60.0;
/// Floor applied to the target and residual energies.
pub const SISDR_ENERGY_FLOOR: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("reference signal has zero energy")]
    ZeroReference,
    #[error("estimate has {est} samples, reference has {reference}")]
    LengthMismatch { est: usize, reference: usize },
    #[error("signal has {len} samples, STOI needs at least {min}")]
    TooShort { len: usize, min: usize },
    #[error("only {frames} non-silent frames remain, STOI needs {min}")]
    TooFewFrames { frames: usize, min: usize },
}

/// Scale-invariant SDR in dB, evaluated in double precision.
///
/// `alpha = <est, ref> / |ref|^2`, target `alpha * ref`, residual
/// `target - est`. Both energies are floored before the ratio so a perfect
/// estimate yields the upper clamp.
pub fn eval_sisdr(est: &[f32], reference: &[f32]) -> Result<f64, MetricError> {
    if est.len() != reference.len() {
        return Err(MetricError::LengthMismatch {
            est: est.len(),
            reference: reference.len(),
        });
    }
    let rr: f64 = reference.iter().map(|&r| r as f64 * r as f64).sum();
    if rr == 0.0 {
        return Err(MetricError::ZeroReference);
    }
    let er: f64 = est.iter().zip(reference).map(|(&e, &r)| e as f64 * r as f64).sum();
    let alpha = er / rr;
    let (mut target, mut resid) = (0.0, 0.0);
    for (&e, &r) in est.iter().zip(reference) {
        let t = alpha * r as f64;
        target += t * t;
        resid += (t - e as f64) * (t - e as f64);
    }
    let ratio = target.max(SISDR_ENERGY_FLOOR) / resid.max(SISDR_ENERGY_FLOOR);
    Ok((10.0 * ratio.log10()).clamp(-SISDR_CLAMP_DB, SISDR_CLAMP_DB))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub id: String,
    pub sisdr_db: f64,
    pub stoi: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

impl Aggregate {
    pub fn of(values: impl Iterator<Item = f64> + Clone) -> Self {
        let n = values.clone().count();
        if n == 0 {
            return Self { mean: f64::NAN, std: f64::NAN };
        }
        let mean = values.clone().sum::<f64>() / n as f64;
        let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        Self { mean, std: var.sqrt() }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    pub fn push(&mut self, id: impl Into<String>, sisdr_db: f64, stoi: f64) {
        self.rows.push(EvalRow {
            id: id.into(),
            sisdr_db,
            stoi: stoi.clamp(-1.0, 1.0),
        });
    }

    pub fn sisdr(&self) -> Aggregate {
        Aggregate::of(self.rows.iter().map(|r| r.sisdr_db))
    }

    pub fn stoi(&self) -> Aggregate {
        Aggregate::of(self.rows.iter().map(|r| r.stoi))
    }

    /// Tab-separated rows followed by `#mean` and `#std` footer lines.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("id\tsisdr_db\tstoi\n");
        for r in &self.rows {
            s += &format!("{}\t{:.6}\t{:.6}\n", r.id, r.sisdr_db, r.stoi);
        }
        let (a, b) = (self.sisdr(), self.stoi());
        s += &format!("#mean\t{:.6}\t{:.6}\n", a.mean, b.mean);
        s += &format!("#std\t{:.6}\t{:.6}\n", a.std, b.std);
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::json!({
            "rows": self.rows,
            "sisdr_db": self.sisdr(),
            "stoi": self.stoi(),
        })
        .to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_evaluated_example_is_zero_db() {
        assert!(eval_sisdr(&[1.0, 1.0], &[1.0, 0.0]).unwrap().abs() < 1e-12);
    }

    #[test]
    fn perfect_estimate_clamps() {
        let r = [0.3f32, -0.2, 0.9];
        assert_eq!(eval_sisdr(&r, &r).unwrap(), 60.0);
        let scaled: Vec<f32> = r.iter().map(|x| 2.5 * x).collect();
        assert_eq!(eval_sisdr(&scaled, &r).unwrap(), 60.0);
    }

    #[test]
    fn errors() {
        assert_eq!(eval_sisdr(&[1.0], &[0.0]), Err(MetricError::ZeroReference));
        assert!(matches!(eval_sisdr(&[1.0], &[1.0, 2.0]), Err(MetricError::LengthMismatch { .. })));
    }

    #[test]
    fn report_aggregates_recompute() {
        let mut rep = EvalReport::default();
        rep.push("a", 1.0, 0.5);
        rep.push("b", 3.0, 0.7);
        rep.push("c", 8.0, 2.0);
        assert_eq!(rep.rows[2].stoi, 1.0);
        let m = (1.0 + 3.0 + 8.0) / 3.0;
        assert!((rep.sisdr().mean - m).abs() < 1e-9);
        let sd = (((1.0f64 - m).powi(2) + (3.0 - m).powi(2) + (8.0 - m).powi(2)) / 3.0).sqrt();
        assert!((rep.sisdr().std - sd).abs() < 1e-9);
        let tsv = rep.to_tsv();
        assert!(tsv.starts_with("id\tsisdr_db\tstoi\n"));
        assert!(tsv.contains("#mean\t4.000000"));
        let v: serde_json::Value = serde_json::from_str(&rep.to_json()).unwrap();
        assert_eq!(v["rows"].as_array().unwrap().len(), 3);
    }
}
