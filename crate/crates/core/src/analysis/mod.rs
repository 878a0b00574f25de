//! Temporal structure of embedding sequences: how similar frames are as a
//! function of their separation, summarized as box-plot statistics.

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsp::{stft, DspError, StftConfig, Waveform};

/// Lags of the standard study, in milliseconds.
pub const STANDARD_LAGS_MS: [u32; 5] = [20, 60, 400, 1000, 2000];
/// Frames whose feature variance falls below this are skipped for correlation.
pub const MIN_VARIANCE: f64 = 1e-12;
/// Added to spectrogram magnitudes before the log.
pub const LOG_FLOOR: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("lag {lag_ms} ms is not a multiple of the {hop_ms} ms frame hop")]
    LagNotMultiple { lag_ms: u32, hop_ms: u32 },
    #[error("lag {lag_ms} ms ({lag} frames) needs more than the {frames} frames available")]
    LagTooLong { lag_ms: u32, lag: usize, frames: usize },
    #[error("no samples at lag {0} ms")]
    NoSamples(u32),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Dsp(#[from] DspError),
}

pub type Result<T> = std::result::Result<T, AnalysisError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    /// Pearson correlation across the feature dimension of a frame pair.
    Correlation,
    /// L2 distance between a frame pair.
    Euclidean,
    /// L2 distance divided by the sequence's mean frame norm.
    NormalizedEuclidean,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Correlation => "corr",
            Metric::Euclidean => "l2",
            Metric::NormalizedEuclidean => "l2_norm",
        }
    }
}

/// Frame-major `T x D` view of one embedding layer.
#[derive(Clone, Copy, Debug)]
pub struct Frames<'a> {
    pub data: &'a [f32],
    pub frames: usize,
    pub dim: usize,
    pub hop_ms: u32,
}

impl<'a> Frames<'a> {
    pub fn new(data: &'a [f32], frames: usize, dim: usize, hop_ms: u32) -> Self {
        assert_eq!(data.len(), frames * dim, "data does not match frames x dim");
        Self { data, frames, dim, hop_ms }
    }

    pub fn frame(&self, t: usize) -> &'a [f32] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }

    fn lag_frames(&self, lag_ms: u32) -> Result<usize> {
        if self.hop_ms == 0 || lag_ms % self.hop_ms != 0 || lag_ms == 0 {
            return Err(AnalysisError::LagNotMultiple { lag_ms, hop_ms: self.hop_ms });
        }
        let lag = (lag_ms / self.hop_ms) as usize;
        if lag >= self.frames {
            return Err(AnalysisError::LagTooLong {
                lag_ms,
                lag,
                frames: self.frames,
            });
        }
        Ok(lag)
    }

    fn mean_norm(&self) -> f64 {
        (0..self.frames).map(|t| norm(self.frame(t))).sum::<f64>() / self.frames.max(1) as f64
    }
}

fn norm(a: &[f32]) -> f64 {
    a.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt()
}

fn centered(a: &[f64]) -> (Vec<f64>, f64) {
    let m = a.iter().sum::<f64>() / a.len() as f64;
    let c: Vec<f64> = a.iter().map(|&x| x - m).collect();
    let var = c.iter().map(|x| x * x).sum::<f64>() / a.len() as f64;
    (c, var)
}

/// Pearson correlation of two equal-length vectors, or `None` when either
/// has variance below [`MIN_VARIANCE`].
pub fn pearson(a: &[f32], b: &[f32]) -> Option<f64> {
    let widen = |v: &[f32]| v.iter().map(|&x| x as f64).collect::<Vec<_>>();
    pearson_f64(&widen(a), &widen(b))
}

pub fn pearson_f64(a: &[f64], b: &[f64]) -> Option<f64> {
    let (ca, va) = centered(a);
    let (cb, vb) = centered(b);
    if va < MIN_VARIANCE || vb < MIN_VARIANCE {
        return None;
    }
    let cov: f64 = ca.iter().zip(&cb).map(|(x, y)| x * y).sum();
    let den = (ca.iter().map(|x| x * x).sum::<f64>() * cb.iter().map(|x| x * x).sum::<f64>()).sqrt();
    Some((cov / den).clamp(-1.0, 1.0))
}

pub fn euclidean(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum::<f64>().sqrt()
}

/// Raw frame-pair samples at one lag.
#[derive(Clone, Debug, PartialEq)]
pub struct LagSamples {
    pub lag_ms: u32,
    pub metric: Metric,
    pub values: Vec<f64>,
    /// Pairs dropped for near-zero variance.
    pub skipped: usize,
}

impl LagSamples {
    pub fn stats(&self) -> Result<LagStats> {
        LagStats::of(self.lag_ms, self.metric, &self.values, self.skipped)
    }
}

pub fn lag_samples(e: Frames, lag_ms: u32, metric: Metric) -> Result<LagSamples> {
    let lag = e.lag_frames(lag_ms)?;
    let scale = match metric {
        Metric::NormalizedEuclidean => {
            let m = e.mean_norm();
            if m > 0.0 {
                1.0 / m
            } else {
                0.0
            }
        }
        _ => 1.0,
    };
    let mut values = Vec::with_capacity(e.frames - lag);
    let mut skipped = 0;
    for t in 0..e.frames - lag {
        let (a, b) = (e.frame(t), e.frame(t + lag));
        match metric {
            Metric::Correlation => match pearson(a, b) {
                Some(r) => values.push(r),
                None => skipped += 1,
            },
            Metric::Euclidean | Metric::NormalizedEuclidean => values.push(euclidean(a, b) * scale),
        }
    }
    Ok(LagSamples {
        lag_ms,
        metric,
        values,
        skipped,
    })
}

pub fn lag_correlation(e: Frames, lag_ms: u32) -> Result<(LagSamples, LagStats)> {
    let s = lag_samples(e, lag_ms, Metric::Correlation)?;
    let st = s.stats()?;
    Ok((s, st))
}

pub fn lag_euclidean(e: Frames, lag_ms: u32, normalized: bool) -> Result<(LagSamples, LagStats)> {
    let metric = if normalized { Metric::NormalizedEuclidean } else { Metric::Euclidean };
    let s = lag_samples(e, lag_ms, metric)?;
    let st = s.stats()?;
    Ok((s, st))
}

/// Box-plot summary. Quartiles interpolate linearly between order
/// statistics; whiskers reach the most extreme samples within 1.5 IQR of
/// the box.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LagStats {
    pub lag_ms: u32,
    pub metric: Metric,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub whisker_lo: f64,
    pub whisker_hi: f64,
    pub count: usize,
    pub skipped: usize,
}

/// Quantile `q` of sorted data by linear interpolation.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

impl LagStats {
    pub fn of(lag_ms: u32, metric: Metric, values: &[f64], skipped: usize) -> Result<Self> {
        if values.is_empty() {
            return Err(AnalysisError::NoSamples(lag_ms));
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let (q1, median, q3) = (quantile(&v, 0.25), quantile(&v, 0.5), quantile(&v, 0.75));
        let iqr = q3 - q1;
        let (lo, hi) = (q1 - 1.5 * iqr, q3 + 1.5 * iqr);
        // An interpolated quartile can lie beyond the nearest in-fence datum;
        // the whisker then stops at the box.
        let whisker_lo = v.iter().copied().find(|&x| x >= lo).unwrap_or(q1).min(q1);
        let whisker_hi = v.iter().rev().copied().find(|&x| x <= hi).unwrap_or(q3).max(q3);
        Ok(Self {
            lag_ms,
            metric,
            q1,
            median,
            q3,
            whisker_lo,
            whisker_hi,
            count: v.len(),
            skipped,
        })
    }

    pub const TSV_HEADER: &'static str = "source\tmetric\tlag_ms\tcount\tskipped\twhisker_lo\tq1\tmedian\tq3\twhisker_hi";

    pub fn tsv_row(&self, source: &str) -> String {
        format!(
            "{source}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            self.metric.name(),
            self.lag_ms,
            self.count,
            self.skipped,
            self.whisker_lo,
            self.q1,
            self.median,
            self.q3,
            self.whisker_hi
        )
    }
}

impl fmt::Display for LagStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} @ {} ms: median {:.4} [{:.4}, {:.4}] n={}",
            self.metric.name(),
            self.lag_ms,
            self.median,
            self.q1,
            self.q3,
            self.count
        )
    }
}

/// Per-file statistics plus statistics of all samples pooled across files.
#[derive(Clone, Debug, Default)]
pub struct Study {
    pub per_file: Vec<(String, Vec<LagStats>)>,
    pub pooled: Vec<LagStats>,
    pub samples: Vec<(String, LagSamples)>,
}

/// Runs every lag and metric over a set of named sequences. Lags longer
/// than a sequence are left out for that sequence only.
pub fn study(inputs: &[(String, Frames)], lags_ms: &[u32], metrics: &[Metric]) -> Result<Study> {
    let mut out = Study::default();
    for &metric in metrics {
        for &lag in lags_ms {
            let mut pooled = Vec::new();
            let mut skipped = 0;
            for (name, e) in inputs {
                let s = match lag_samples(*e, lag, metric) {
                    Ok(s) => s,
                    Err(AnalysisError::LagTooLong { .. }) => continue,
                    Err(e) => return Err(e),
                };
                if let Ok(st) = s.stats() {
                    match out.per_file.iter_mut().find(|(n, _)| n == name) {
                        Some((_, v)) => v.push(st),
                        None => out.per_file.push((name.clone(), vec![st])),
                    }
                }
                pooled.extend_from_slice(&s.values);
                skipped += s.skipped;
                out.samples.push((name.clone(), s));
            }
            if !pooled.is_empty() {
                out.pooled.push(LagStats::of(lag, metric, &pooled, skipped)?);
            }
        }
    }
    Ok(out)
}

impl Study {
    pub fn to_tsv(&self) -> String {
        let mut s = String::from(LagStats::TSV_HEADER);
        s.push('\n');
        for st in &self.pooled {
            s.push_str(&st.tsv_row("pooled"));
            s.push('\n');
        }
        for (name, v) in &self.per_file {
            for st in v {
                s.push_str(&st.tsv_row(name));
                s.push('\n');
            }
        }
        s
    }

    /// One row per sample: `source, metric, lag_ms, value`.
    pub fn samples_tsv(&self) -> String {
        let mut s = String::from("source\tmetric\tlag_ms\tvalue\n");
        for (name, ls) in &self.samples {
            for v in &ls.values {
                s.push_str(&format!("{name}\t{}\t{}\t{v}\n", ls.metric.name(), ls.lag_ms));
            }
        }
        s
    }
}

/// `20 log10(|X| + floor)` per frame and bin.
pub fn log_spectrogram(w: &Waveform, cfg: &StftConfig) -> Result<Vec<Vec<f64>>> {
    let s = stft(w, cfg)?;
    Ok((0..s.frames)
        .map(|t| (0..s.bins).map(|f| 20.0 * (s.magnitude(t, f) as f64 + LOG_FLOOR).log10()).collect())
        .collect())
}

/// Writes the log spectrogram as CSV, one frame per row.
pub fn export_spectrogram(w: &Waveform, cfg: &StftConfig, path: &Path) -> Result<()> {
    let m = log_spectrogram(w, cfg)?;
    let io = |source| AnalysisError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    for row in m {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        writeln!(f, "{}", line.join(",")).map_err(io)?;
    }
    f.flush().map_err(io)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn frames(data: &[f32], d: usize) -> Frames<'_> {
        Frames::new(data, data.len() / d, d, 20)
    }

    #[test]
    fn identical_frames() {
        let d = 16;
        let base: Vec<f32> = (0..d).map(|i| (i as f32 * 0.7).sin()).collect();
        let data: Vec<f32> = (0..120).flat_map(|_| base.clone()).collect();
        let e = frames(&data, d);
        for lag in [20, 60, 400, 1000, 2000] {
            let (s, st) = lag_correlation(e, lag).unwrap();
            assert!(s.values.iter().all(|&r| (r - 1.0).abs() < 1e-12));
            assert_eq!(st.median, 1.0);
            let (s, _) = lag_euclidean(e, lag, false).unwrap();
            assert!(s.values.iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn shifted_frames_are_delta_sqrt_d_apart() {
        let d = 9;
        let delta = 0.5f32;
        let data: Vec<f32> = (0..10).flat_map(|t| (0..d).map(move |i| i as f32 + t as f32 * delta)).collect();
        let (s, _) = lag_euclidean(frames(&data, d), 20, false).unwrap();
        for v in s.values {
            assert!((v - 0.5 * 3.0).abs() < 1e-6);
        }
    }

    #[test]
    fn constant_frames_are_skipped() {
        let d = 4;
        let mut data: Vec<f32> = (0..5 * d).map(|i| (i as f32).sin()).collect();
        data[..d].iter_mut().for_each(|v| *v = 2.0);
        let (s, st) = lag_correlation(frames(&data, d), 20).unwrap();
        assert_eq!((s.skipped, s.values.len(), st.skipped), (1, 3, 1));
    }

    #[test]
    fn lag_errors() {
        let data = vec![0.5f32; 10 * 3];
        let e = frames(&data, 3);
        assert!(matches!(lag_correlation(e, 30), Err(AnalysisError::LagNotMultiple { .. })));
        assert!(matches!(lag_correlation(e, 200), Err(AnalysisError::LagTooLong { lag: 10, .. })));
    }

    #[test]
    fn white_noise_frames_are_uncorrelated() {
        let mut r = crate::rng::stream(1, 0);
        let d = 768;
        let data: Vec<f32> = (0..200 * d).map(|_| StandardNormal.sample(&mut r)).collect();
        let (_, st) = lag_correlation(frames(&data, d), 20).unwrap();
        assert!(st.median.abs() < 0.1, "{st}");
    }

    #[test]
    fn box_statistics_match_hand_computation() {
        let v = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 100.0];
        let st = LagStats::of(20, Metric::Euclidean, &v, 0).unwrap();
        assert_eq!((st.q1, st.median, st.q3), (3.0, 5.0, 7.0));
        // Fences at -3 and 13: the outlier is excluded from the whisker.
        assert_eq!((st.whisker_lo, st.whisker_hi), (1.0, 8.0));
        let q = quantile(&[0.0, 10.0], 0.25);
        assert_eq!(q, 2.5);
    }

    #[test]
    fn ar1_correlation_decays_with_lag() {
        let (d, t, phi) = (64, 2000, 0.97f64);
        let mut r = crate::rng::stream(5, 0);
        let mut x: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut r)).collect();
        let mut data = Vec::with_capacity(t * d);
        for _ in 0..t {
            for v in x.iter_mut() {
                let n: f64 = StandardNormal.sample(&mut r);
                *v = phi * *v + (1.0 - phi * phi).sqrt() * n;
            }
            data.extend(x.iter().map(|&v| v as f32));
        }
        let e = frames(&data, d);
        let med: Vec<f64> = STANDARD_LAGS_MS.iter().map(|&l| lag_correlation(e, l).unwrap().1.median).collect();
        assert!(med.windows(2).all(|w| w[0] > w[1]), "{med:?}");
    }

    #[test]
    fn study_pools_and_keeps_per_file_rows() {
        let d = 8;
        let a: Vec<f32> = (0..30 * d).map(|i| (i as f32 * 0.3).sin()).collect();
        let b: Vec<f32> = (0..4 * d).map(|i| (i as f32 * 0.2).cos()).collect();
        let inputs = vec![("a".to_string(), frames(&a, d)), ("b".to_string(), frames(&b, d))];
        let st = study(&inputs, &[20, 400], &[Metric::Correlation, Metric::NormalizedEuclidean]).unwrap();
        let pooled20 = &st.pooled[0];
        assert_eq!(pooled20.count, 29 + 3);
        // b is too short for 400 ms, so that lag pools a alone.
        assert_eq!(st.pooled[1].count, 10);
        assert_eq!(st.per_file.iter().find(|(n, _)| n == "b").unwrap().1.len(), 2);
        let tsv = st.to_tsv();
        assert!(tsv.starts_with("source\tmetric"));
        assert_eq!(st.samples_tsv().lines().count(), 1 + 2 * (32 + 10));
    }

    #[test]
    fn spectrogram_export() {
        let cfg = StftConfig::default();
        let zero = log_spectrogram(&Waveform::new(vec![0.0; 4000]), &cfg).unwrap();
        assert!(zero.iter().flatten().all(|&v| (v - (-160.0)).abs() < 1e-9));
        let mut r = crate::rng::stream(2, 0);
        let w = Waveform::new((0..8000).map(|_| r.random_range(-0.5..0.5)).collect());
        let s = stft(&w, &cfg).unwrap();
        let m = log_spectrogram(&w, &cfg).unwrap();
        assert_eq!((m.len(), m[0].len()), (s.frames, s.bins));
        assert_eq!(m[3][17], 20.0 * (s.magnitude(3, 17) as f64 + 1e-8).log10());
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.csv");
        export_spectrogram(&w, &cfg, &p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().count(), s.frames);
        assert_eq!(text.lines().next().unwrap().split(',').count(), s.bins);
    }

    proptest! {
        #[test]
        fn pearson_is_invariant_to_positive_affine_maps(
            seed in 0u64..1000, sa in 0.01f64..100.0, sb in 0.01f64..100.0, ta in -50.0f64..50.0, tb in -50.0f64..50.0
        ) {
            let mut r = crate::rng::stream(seed, 0);
            let a: Vec<f64> = (0..64).map(|_| r.random_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..64).map(|_| r.random_range(-1.0..1.0)).collect();
            let a2: Vec<f64> = a.iter().map(|x| sa * x + ta).collect();
            let b2: Vec<f64> = b.iter().map(|x| sb * x + tb).collect();
            let r1 = pearson_f64(&a, &b).unwrap();
            prop_assert!((r1 - pearson_f64(&a2, &b2).unwrap()).abs() < 1e-9);
        }

        #[test]
        fn quartiles_are_ordered(v in proptest::collection::vec(-1e3f64..1e3, 1..60)) {
            let st = LagStats::of(20, Metric::Euclidean, &v, 0).unwrap();
            prop_assert!(st.whisker_lo <= st.q1 && st.q1 <= st.median && st.median <= st.q3 && st.q3 <= st.whisker_hi);
        }
    }
}
