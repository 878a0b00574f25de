//! Noisy/clean pair construction and deterministic batch iteration.

mod synth;

use std::path::{Path, PathBuf};
use std::sync::mpsc::{sync_channel, Receiver};
use std::sync::Arc;
use std::thread::JoinHandle;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::dsp::wav::{read_wav, WavError};
use crate::dsp::{StftConfig, Waveform};
use crate::rng;
use crate::tensor::Tensor;

pub use synth::{synthetic_noise, synthetic_speech, NoiseKind};

/// Peak level clips are normalized to before mixing.
pub const PEAK_LEVEL: f32 = 0.9;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{0} has zero energy")]
    ZeroEnergy(&'static str),
    #[error("manifest line {line}: {msg}")]
    Manifest { line: usize, msg: String },
    #[error("invalid snr spec {0:?}: expected `x` or `lo:hi` with lo <= hi")]
    Snr(String),
    #[error("unreadable record: {0}")]
    Record(#[from] WavError),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("crop of {crop} samples is shorter than one {window}-sample window")]
    Crop { crop: usize, window: usize },
    #[error("dataset is empty")]
    Empty,
    #[error("clip {id}: {source}")]
    Clip { id: String, source: Box<DataError> },
}

pub type Result<T> = std::result::Result<T, DataError>;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SnrSpec {
    Fixed(f64),
    Uniform { lo: f64, hi: f64 },
}

impl SnrSpec {
    pub fn parse(s: &str) -> Result<Self> {
        let bad = || DataError::Snr(s.to_string());
        let num = |v: &str| v.trim().parse::<f64>().ok().filter(|x| x.is_finite());
        match s.split_once(':') {
            None => num(s).map(Self::Fixed).ok_or_else(bad),
            Some((lo, hi)) => {
                let (lo, hi) = (num(lo).ok_or_else(bad)?, num(hi).ok_or_else(bad)?);
                if lo > hi {
                    return Err(bad());
                }
                Ok(Self::Uniform { lo, hi })
            }
        }
    }

    pub fn sample(&self, rng: &mut impl Rng) -> f64 {
        match *self {
            Self::Fixed(x) => x,
            Self::Uniform { lo, hi } if lo == hi => lo,
            Self::Uniform { lo, hi } => rng.random_range(lo..=hi),
        }
    }
}

impl std::fmt::Display for SnrSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Fixed(x) => write!(f, "{x}"),
            Self::Uniform { lo, hi } => write!(f, "{lo}:{hi}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MixRecord {
    pub clean: PathBuf,
    pub noise: PathBuf,
    pub snr: SnrSpec,
}

impl MixRecord {
    /// Utterance id: the clean file's stem.
    pub fn id(&self) -> String {
        self.clean.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MixManifest {
    pub records: Vec<MixRecord>,
}

impl MixManifest {
    /// Parses `clean<TAB>noise<TAB>snr` lines. Blank lines and `#` comments
    /// are skipped; relative paths resolve against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            let t = line.trim_end_matches('\r');
            if t.trim().is_empty() || t.trim_start().starts_with('#') {
                continue;
            }
            let cols: Vec<&str> = t.split('\t').collect();
            if cols.len() != 3 {
                return Err(DataError::Manifest {
                    line: line_no,
                    msg: format!("expected 3 tab-separated columns, found {}", cols.len()),
                });
            }
            if cols[0].trim().is_empty() || cols[1].trim().is_empty() {
                return Err(DataError::Manifest {
                    line: line_no,
                    msg: "empty path".into(),
                });
            }
            let snr = SnrSpec::parse(cols[2].trim()).map_err(|e| DataError::Manifest {
                line: line_no,
                msg: e.to_string(),
            })?;
            records.push(MixRecord {
                clean: base.join(cols[0].trim()),
                noise: base.join(cols[1].trim()),
                snr,
            });
        }
        Ok(Self { records })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| DataError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn to_tsv(&self) -> String {
        self.records
            .iter()
            .map(|r| format!("{}\t{}\t{}\n", r.clean.display(), r.noise.display(), r.snr))
            .collect()
    }
}

/// Result of mixing: `noisy = clean + gain * noise`.
#[derive(Clone, Debug, PartialEq)]
pub struct Mixture {
    pub noisy: Waveform,
    pub clean: Waveform,
    pub noise: Waveform,
    pub gain: f64,
}

/// Scales `noise` so that `10 log10(|clean|^2 / |g noise|^2) = snr_db` and
/// adds it to `clean`. Lengths must match; see [`fit_noise`].
pub fn mix_at_snr(clean: &Waveform, noise: &Waveform, snr_db: f64) -> Result<Mixture> {
    assert_eq!(clean.len(), noise.len(), "mix_at_snr needs equal lengths");
    let (ec, en) = (clean.energy(), noise.energy());
    if ec <= 0.0 {
        return Err(DataError::ZeroEnergy("clean"));
    }
    if en <= 0.0 {
        return Err(DataError::ZeroEnergy("noise"));
    }
    let gain = (ec / (en * 10f64.powf(snr_db / 10.0))).sqrt();
    let scaled: Vec<f32> = noise.samples.iter().map(|&n| (gain * n as f64) as f32).collect();
    let noisy = clean.samples.iter().zip(&scaled).map(|(&c, &n)| c + n).collect();
    Ok(Mixture {
        noisy: Waveform::new(noisy),
        clean: clean.clone(),
        noise: Waveform::new(scaled),
        gain,
    })
}

/// Measured `10 log10(|clean|^2 / |noise|^2)`.
pub fn measured_snr(clean: &Waveform, noise: &Waveform) -> f64 {
    10.0 * (clean.energy() / noise.energy()).log10()
}

/// Tiles a short noise clip or takes a random window of a long one.
pub fn fit_noise(noise: &[f32], len: usize, rng: &mut impl Rng) -> Vec<f32> {
    if noise.len() >= len {
        let off = rng.random_range(0..=noise.len() - len);
        noise[off..off + len].to_vec()
    } else {
        noise.iter().copied().cycle().take(len).collect()
    }
}

pub fn peak_normalize(x: &mut [f32], level: f32) {
    let peak = x.iter().fold(0.0f32, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        let g = level / peak;
        x.iter_mut().for_each(|v| *v *= g);
    }
}

/// A clean/noise source pair held in memory.
#[derive(Clone, Debug)]
pub struct Clip {
    pub id: String,
    pub clean_path: Option<PathBuf>,
    pub clean: Vec<f32>,
    pub noise: Vec<f32>,
    pub snr: SnrSpec,
}

/// One mixed training item.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub id: String,
    pub clean_path: Option<PathBuf>,
    pub noisy: Vec<f32>,
    pub clean: Vec<f32>,
    pub snr_db: f64,
    /// Offset of the crop in the source clip, a multiple of the STFT hop.
    pub offset: usize,
}

/// A batch as `[B, N]` waveforms.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub noisy: Tensor<f32>,
    pub clean: Tensor<f32>,
    pub ids: Vec<String>,
    pub clean_paths: Vec<Option<PathBuf>>,
    pub snrs: Vec<f64>,
    /// Crop offsets in STFT frames.
    pub frame_offsets: Vec<usize>,
}

impl Batch {
    pub fn from_examples(items: &[Example], hop: usize) -> Self {
        let n = items[0].noisy.len();
        let b = items.len();
        let noisy = Tensor::new(vec![b, n], items.iter().flat_map(|e| e.noisy.iter().copied()).collect()).expect("equal lengths");
        let clean = Tensor::new(vec![b, n], items.iter().flat_map(|e| e.clean.iter().copied()).collect()).expect("equal lengths");
        Self {
            noisy,
            clean,
            ids: items.iter().map(|e| e.id.clone()).collect(),
            clean_paths: items.iter().map(|e| e.clean_path.clone()).collect(),
            snrs: items.iter().map(|e| e.snr_db).collect(),
            frame_offsets: items.iter().map(|e| e.offset / hop).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// In-memory clips plus the crop length used to cut training items.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub clips: Vec<Clip>,
    /// Crop length in samples; `None` keeps whole clips.
    pub crop: Option<usize>,
    pub stft: StftConfig,
}

impl Dataset {
    pub fn new(clips: Vec<Clip>, crop: Option<usize>) -> Result<Self> {
        let stft = StftConfig::default();
        if let Some(c) = crop {
            if c < stft.window_len {
                return Err(DataError::Crop {
                    crop: c,
                    window: stft.window_len,
                });
            }
        }
        if clips.is_empty() {
            return Err(DataError::Empty);
        }
        Ok(Self { clips, crop, stft })
    }

    /// Reads every record's audio.
    pub fn from_manifest(m: &MixManifest, crop: Option<usize>) -> Result<Self> {
        let clips = m
            .records
            .par_iter()
            .map(|r| {
                let read = |p: &Path| read_wav(p).map_err(DataError::Record);
                Ok(Clip {
                    id: r.id(),
                    clean_path: Some(r.clean.clone()),
                    clean: read(&r.clean)?.samples,
                    noise: read(&r.noise)?.samples,
                    snr: r.snr,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(clips, crop)
    }

    /// `n` synthetic speech clips of `len` samples, each paired with one of
    /// the synthetic noise kinds.
    pub fn synthetic(n: usize, len: usize, snr: SnrSpec, seed: u64) -> Result<Self> {
        let clips = (0..n)
            .map(|i| {
                let s = seed.wrapping_mul(1_000_003).wrapping_add(i as u64);
                Clip {
                    id: format!("syn{i:04}"),
                    clean_path: None,
                    clean: synthetic_speech(len, s),
                    noise: synthetic_noise(NoiseKind::ALL[i % NoiseKind::ALL.len()], len, s),
                    snr,
                }
            })
            .collect();
        Self::new(clips, Some(len))
    }

    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }

    /// Builds item `index` using its own random stream, so results do not
    /// depend on which worker computes them.
    pub fn example(&self, index: usize, rng: &mut ChaCha8Rng) -> Result<Example> {
        let clip = &self.clips[index];
        let wrap = |e: DataError| DataError::Clip {
            id: clip.id.clone(),
            source: Box::new(e),
        };
        let len = self.crop.unwrap_or(clip.clean.len());
        let hop = self.stft.hop;
        let (mut clean, offset) = if clip.clean.len() > len {
            let off = rng.random_range(0..=(clip.clean.len() - len) / hop) * hop;
            (clip.clean[off..off + len].to_vec(), off)
        } else {
            let mut c = clip.clean.clone();
            c.resize(len, 0.0);
            (c, 0)
        };
        let mut noise = fit_noise(&clip.noise, len, rng);
        peak_normalize(&mut clean, PEAK_LEVEL);
        peak_normalize(&mut noise, PEAK_LEVEL);
        let snr_db = clip.snr.sample(rng);
        let m = mix_at_snr(&Waveform::new(clean), &Waveform::new(noise), snr_db).map_err(wrap)?;
        Ok(Example {
            id: clip.id.clone(),
            clean_path: clip.clean_path.clone(),
            noisy: m.noisy.samples,
            clean: m.clean.samples,
            snr_db,
            offset,
        })
    }

    fn item_rng(seed: u64, epoch: u64, index: usize) -> ChaCha8Rng {
        rng::stream(seed ^ epoch.wrapping_mul(0x9e37_79b9_7f4a_7c15), rng::DATA ^ (index as u64).wrapping_mul(0xd6e8_feb8_6659_fd93))
    }

    /// Every clip mixed once with the given seed, in clip order.
    pub fn materialize(&self, seed: u64) -> Result<Vec<Example>> {
        (0..self.len())
            .into_par_iter()
            .map(|i| self.example(i, &mut Self::item_rng(seed, 0, i)))
            .collect()
    }

    /// Shuffled order of clip indices for an epoch.
    pub fn epoch_order(&self, seed: u64, epoch: u64) -> Vec<usize> {
        use rand::seq::SliceRandom;
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut rng::stream(seed ^ epoch, rng::DATA));
        order
    }

    /// Batch `k` of the endless seeded stream.
    fn batch_at(&self, seed: u64, batch: usize, k: u64) -> Result<Batch> {
        let n = self.len() as u64;
        let idx: Vec<(u64, usize)> = (0..batch as u64)
            .map(|j| {
                let global = k * batch as u64 + j;
                let epoch = global / n;
                (epoch, self.epoch_order(seed, epoch)[(global % n) as usize])
            })
            .collect();
        let items = idx
            .par_iter()
            .map(|&(epoch, i)| self.example(i, &mut Self::item_rng(seed, epoch, i)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Batch::from_examples(&items, self.stft.hop))
    }
}

/// Endless seeded batch stream with background prefetch. Items are built in
/// parallel but the emitted order depends only on the seed.
pub struct BatchStream {
    rx: Receiver<Result<Batch>>,
    worker: Option<JoinHandle<()>>,
}

impl BatchStream {
    pub fn new(data: Arc<Dataset>, batch: usize, seed: u64, prefetch: usize) -> Self {
        assert!(batch > 0, "batch size must be positive");
        let (tx, rx) = sync_channel(prefetch.max(1));
        let worker = std::thread::spawn(move || {
            for k in 0.. {
                if tx.send(data.batch_at(seed, batch, k)).is_err() {
                    break;
                }
            }
        });
        Self { rx, worker: Some(worker) }
    }
}

impl Iterator for BatchStream {
    type Item = Result<Batch>;

    fn next(&mut self) -> Option<Self::Item> {
        self.rx.recv().ok()
    }
}

impl Drop for BatchStream {
    fn drop(&mut self) {
        // Unblock the producer, then wait for it.
        let (_, dead) = sync_channel(0);
        drop(std::mem::replace(&mut self.rx, dead));
        if let Some(w) = self.worker.take() {
            let _ = w.join();
        }
    }
}

/// A fixed set of mixed examples cycled in order; used for overfitting runs.
#[derive(Clone, Debug)]
pub struct FixedBatches {
    pub examples: Vec<Example>,
    pub batch: usize,
    pub hop: usize,
    next: usize,
}

impl FixedBatches {
    pub fn new(examples: Vec<Example>, batch: usize) -> Self {
        assert!(!examples.is_empty() && batch > 0);
        Self {
            examples,
            batch,
            hop: StftConfig::default().hop,
            next: 0,
        }
    }

    pub fn next_batch(&mut self) -> Batch {
        let items: Vec<Example> = (0..self.batch)
            .map(|j| self.examples[(self.next + j) % self.examples.len()].clone())
            .collect();
        self.next = (self.next + self.batch) % self.examples.len();
        Batch::from_examples(&items, self.hop)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::eval_sisdr;
    use proptest::prelude::*;

    fn wave(n: usize, seed: u64) -> Waveform {
        Waveform::new(synthetic_speech(n, seed))
    }

    #[test]
    fn zero_db_balances_energy() {
        let c = wave(8000, 1);
        let n = Waveform::new(synthetic_noise(NoiseKind::White, 8000, 2));
        let m = mix_at_snr(&c, &n, 0.0).unwrap();
        assert!((m.noise.energy() / c.energy() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn minus_five_db_energy_ratio() {
        let c = wave(8000, 3);
        let n = Waveform::new(synthetic_noise(NoiseKind::Pink, 8000, 4));
        let m = mix_at_snr(&c, &n, -5.0).unwrap();
        assert!((m.noise.energy() / c.energy() - 10f64.powf(0.5)).abs() < 1e-5);
        for (y, (x, v)) in m.noisy.samples.iter().zip(c.samples.iter().zip(&m.noise.samples)) {
            assert_eq!(*y, x + v);
        }
    }

    #[test]
    fn orthogonal_noise_gives_exact_sisdr() {
        // Clean on even samples, noise on odd ones.
        let n = 4000;
        let c = Waveform::new((0..n).map(|i| if i % 2 == 0 { ((i as f32) * 0.01).sin() + 0.5 } else { 0.0 }).collect());
        let v = Waveform::new((0..n).map(|i| if i % 2 == 1 { ((i as f32) * 0.037).cos() } else { 0.0 }).collect());
        let m = mix_at_snr(&c, &v, -5.0).unwrap();
        let s = eval_sisdr(&m.noisy.samples, &c.samples).unwrap();
        assert!((s + 5.0).abs() < 1e-5, "{s}");
    }

    #[test]
    fn zero_energy_is_an_error() {
        let z = Waveform::new(vec![0.0; 100]);
        let w = wave(100, 1);
        assert!(matches!(mix_at_snr(&z, &w, 0.0), Err(DataError::ZeroEnergy("clean"))));
        assert!(matches!(mix_at_snr(&w, &z, 0.0), Err(DataError::ZeroEnergy("noise"))));
    }

    #[test]
    fn snr_spec_parsing() {
        assert_eq!(SnrSpec::parse("-5").unwrap(), SnrSpec::Fixed(-5.0));
        assert_eq!(SnrSpec::parse("-5:5").unwrap(), SnrSpec::Uniform { lo: -5.0, hi: 5.0 });
        assert!(SnrSpec::parse("5:-5").is_err());
        assert!(SnrSpec::parse("nan").is_err());
        assert!(SnrSpec::parse("").is_err());
    }

    #[test]
    fn manifest_parsing() {
        let m = MixManifest::parse("# c\na.wav\tn.wav\t-5\n\n/x/b.wav\tn.wav\t-5:5\n", Path::new("/d")).unwrap();
        assert_eq!(m.records.len(), 2);
        assert_eq!(m.records[0].clean, Path::new("/d/a.wav"));
        assert_eq!(m.records[1].clean, Path::new("/x/b.wav"));
        assert_eq!(m.records[1].id(), "b");
        match MixManifest::parse("a.wav\tn.wav\n", Path::new(".")) {
            Err(DataError::Manifest { line: 1, .. }) => {}
            r => panic!("{r:?}"),
        }
        assert!(MixManifest::parse("a.wav\tn.wav\t3:1\n", Path::new(".")).is_err());
    }

    #[test]
    fn noise_is_tiled_or_cropped() {
        let mut r = rng::stream(1, rng::DATA);
        assert_eq!(fit_noise(&[1.0, 2.0, 3.0], 7, &mut r), vec![1.0, 2.0, 3.0, 1.0, 2.0, 3.0, 1.0]);
        let long: Vec<f32> = (0..100).map(|i| i as f32).collect();
        let w = fit_noise(&long, 10, &mut r);
        assert_eq!(w.len(), 10);
        assert!(w.windows(2).all(|p| p[1] == p[0] + 1.0));
    }

    #[test]
    fn one_second_crop_is_49_frames() {
        let d = Dataset::synthetic(3, 24000, SnrSpec::Fixed(0.0), 1).unwrap();
        let d = Dataset { crop: Some(16000), ..d };
        let b = d.batch_at(5, 2, 0).unwrap();
        assert_eq!(b.noisy.shape(), &[2, 16000]);
        assert_eq!(d.stft.frame_count(16000), Some(49));
        assert!(Dataset::new(d.clips.clone(), Some(100)).is_err());
    }

    #[test]
    fn stream_is_deterministic_and_in_range() {
        let d = Arc::new(Dataset::synthetic(5, 4000, SnrSpec::Uniform { lo: -5.0, hi: 5.0 }, 2).unwrap());
        let a: Vec<Batch> = BatchStream::new(d.clone(), 3, 9, 2).take(4).map(|b| b.unwrap()).collect();
        let b: Vec<Batch> = BatchStream::new(d.clone(), 3, 9, 1).take(4).map(|b| b.unwrap()).collect();
        assert_eq!(a, b);
        let c: Vec<Batch> = BatchStream::new(d, 3, 10, 2).take(4).map(|b| b.unwrap()).collect();
        assert_ne!(a, c);
        assert!(a.iter().flat_map(|b| &b.snrs).all(|s| (-5.0..=5.0).contains(s)));
    }

    #[test]
    fn epochs_visit_every_clip() {
        let d = Dataset::synthetic(4, 1000, SnrSpec::Fixed(0.0), 2).unwrap();
        let mut o = d.epoch_order(3, 0);
        o.sort();
        assert_eq!(o, vec![0, 1, 2, 3]);
    }

    #[test]
    fn unreadable_record_names_path() {
        let m = MixManifest::parse("missing_clean.wav\tn.wav\t0\n", Path::new("/nonexistent")).unwrap();
        let e = Dataset::from_manifest(&m, None).unwrap_err().to_string();
        assert!(e.contains("/nonexistent/missing_clean.wav"), "{e}");
    }

    proptest! {
        #[test]
        fn requested_snr_is_met(snr in -20.0f64..20.0, seed in 0u64..50) {
            let c = wave(2000, seed);
            let n = Waveform::new(synthetic_noise(NoiseKind::Babble, 2000, seed + 1));
            let m = mix_at_snr(&c, &n, snr).unwrap();
            prop_assert!((measured_snr(&c, &m.noise) - snr).abs() < 1e-6);
        }
    }
}
