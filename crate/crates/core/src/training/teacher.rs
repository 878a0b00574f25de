use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::data::Batch;
use crate::dsp::StftPlan;
use crate::teacher::{aligned_frames, EmbeddingSequence, FileTeacher, SyntheticTeacher, TeacherError};
use crate::tensor::{Tape, Tensor, Var};

use super::{Result, TrainError};

/// Where teacher embeddings come from.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TeacherSource {
    #[default]
    None,
    /// Frozen random conv stack evaluated on the fly.
    Synthetic { seed: u64, layers: usize, dim: usize },
    /// SEB1 files named after each clean clip.
    Files { dir: PathBuf },
}

impl TeacherSource {
    pub fn synthetic() -> Self {
        Self::Synthetic {
            seed: 0,
            layers: 4,
            dim: 64,
        }
    }
}

pub enum Teacher {
    Synthetic(SyntheticTeacher<f32>),
    Files {
        store: FileTeacher,
        layers: usize,
        dim: usize,
        cache: HashMap<PathBuf, Arc<EmbeddingSequence>>,
    },
}

impl Teacher {
    /// Opens a source. File sources are probed now so a missing or empty
    /// directory fails at startup.
    pub fn open(src: &TeacherSource, bins: usize) -> Result<Option<Self>> {
        Ok(match src {
            TeacherSource::None => None,
            &TeacherSource::Synthetic { seed, layers, dim } => {
                if layers == 0 || dim == 0 {
                    return Err(TrainError::Config("synthetic teacher needs positive layers and dim".into()));
                }
                Some(Self::Synthetic(SyntheticTeacher::new(bins, layers, dim, seed)))
            }
            TeacherSource::Files { dir } => {
                let io = |source| TrainError::Io { path: dir.clone(), source };
                let mut first = None;
                for entry in std::fs::read_dir(dir).map_err(io)? {
                    let p = entry.map_err(io)?.path();
                    if p.extension().is_some_and(|e| e == "seb") && first.as_ref().is_none_or(|f: &PathBuf| p < *f) {
                        first = Some(p);
                    }
                }
                let first = first.ok_or_else(|| TrainError::Missing {
                    mode: "file teacher".into(),
                    resource: format!("at least one .seb file in {}", dir.display()),
                })?;
                let e = EmbeddingSequence::load(&first)?;
                Some(Self::Files {
                    store: FileTeacher { dir: dir.clone() },
                    layers: e.layers,
                    dim: e.dim,
                    cache: HashMap::new(),
                })
            }
        })
    }

    pub fn layers(&self) -> usize {
        match self {
            Self::Synthetic(t) => t.layers,
            Self::Files { layers, .. } => *layers,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::Synthetic(t) => t.dim,
            Self::Files { dim, .. } => *dim,
        }
    }

    /// Whether embeddings can be computed for arbitrary audio on the tape.
    pub fn differentiable(&self) -> bool {
        matches!(self, Self::Synthetic(_))
    }

    pub fn synthetic(&self) -> Option<&SyntheticTeacher<f32>> {
        match self {
            Self::Synthetic(t) => Some(t),
            Self::Files { .. } => None,
        }
    }

    /// Per-layer `[B, T, D]` embeddings of the clean batch, `T` within one
    /// frame of `frames`.
    pub fn clean_layers(&mut self, tape: &mut Tape<f32>, batch: &Batch, clean: Var, plan: &Arc<StftPlan<f32>>, frames: usize) -> Result<Vec<Var>> {
        match self {
            Self::Synthetic(t) => Ok(t.embed_wave(tape, clean, plan)?),
            Self::Files {
                store,
                layers,
                dim,
                cache,
            } => {
                let mut seqs = Vec::with_capacity(batch.len());
                for (i, p) in batch.clean_paths.iter().enumerate() {
                    let p = p.as_ref().ok_or_else(|| TrainError::Missing {
                        mode: "file teacher".into(),
                        resource: format!("a clean file path for item {}", batch.ids[i]),
                    })?;
                    let key = store.path_for(p);
                    let seq = match cache.get(&key) {
                        Some(s) => s.clone(),
                        None => {
                            let s = Arc::new(EmbeddingSequence::load(&key)?);
                            if (s.layers, s.dim) != (*layers, *dim) {
                                return Err(TeacherError::Invalid(format!(
                                    "{}: {} layers of width {}, expected {layers} of width {dim}",
                                    key.display(),
                                    s.layers,
                                    s.dim
                                ))
                                .into());
                            }
                            cache.insert(key, s.clone());
                            s
                        }
                    };
                    seqs.push(seq);
                }
                let mut t = frames;
                for (s, &off) in seqs.iter().zip(&batch.frame_offsets) {
                    let avail = s.frames.saturating_sub(off);
                    if avail < frames {
                        t = t.min(aligned_frames(avail, frames)?);
                    }
                }
                let (b, d) = (seqs.len(), *dim);
                Ok((0..*layers)
                    .map(|l| {
                        let mut data = Vec::with_capacity(b * t * d);
                        for (s, &off) in seqs.iter().zip(&batch.frame_offsets) {
                            data.extend_from_slice(&s.layer(l)[off * d..(off + t) * d]);
                        }
                        tape.leaf(&Tensor::new(vec![b, t, d], data).expect("sized above"))
                    })
                    .collect())
            }
        }
    }

    /// Per-layer embeddings of the noisy input; synthetic teacher only.
    pub fn noisy_layers(&mut self, tape: &mut Tape<f32>, noisy: Var, plan: &Arc<StftPlan<f32>>) -> Result<Vec<Var>> {
        match self {
            Self::Synthetic(t) => Ok(t.embed_wave(tape, noisy, plan)?),
            Self::Files { .. } => Err(TrainError::Missing {
                mode: "file teacher".into(),
                resource: "embeddings of the noisy mixtures".into(),
            }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Example;
    use crate::dsp::StftConfig;

    #[test]
    fn file_teacher_slices_crops_by_frame_offset() {
        let dir = tempfile::tempdir().unwrap();
        let (l, t, d) = (2, 60, 3);
        let seq = EmbeddingSequence::new(l, t, d, (0..l * t * d).map(|i| i as f32).collect()).unwrap();
        seq.save(&dir.path().join("a.seb")).unwrap();
        let src = TeacherSource::Files { dir: dir.path().into() };
        let mut teacher = Teacher::open(&src, 257).unwrap().unwrap();
        assert_eq!((teacher.layers(), teacher.dim(), teacher.differentiable()), (2, 3, false));
        let ex = Example {
            id: "a".into(),
            clean_path: Some("/audio/a.wav".into()),
            noisy: vec![0.0; 16000],
            clean: vec![0.0; 16000],
            snr_db: 0.0,
            offset: 5 * 320,
        };
        let batch = Batch::from_examples(&[ex], 320);
        let plan = Arc::new(StftPlan::new(StftConfig::default()).unwrap());
        let mut tape = Tape::new();
        let y = tape.leaf(&batch.clean);
        let layers = teacher.clean_layers(&mut tape, &batch, y, &plan, 49).unwrap();
        assert_eq!(tape.shape(layers[1]), &[1, 49, 3]);
        assert_eq!(tape.value(layers[1])[0], seq.layer(1)[5 * d]);
        assert!(teacher.noisy_layers(&mut tape, y, &plan).is_err());
    }

    #[test]
    fn empty_directory_fails_at_open() {
        let dir = tempfile::tempdir().unwrap();
        let e = Teacher::open(&TeacherSource::Files { dir: dir.path().into() }, 257).err().unwrap();
        assert!(e.to_string().contains(".seb"), "{e}");
    }
}
