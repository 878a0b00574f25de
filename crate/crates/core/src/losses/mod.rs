//! Training objectives on the tape: SI-SDR, embedding distillation,
//! least-squares adversarial distillation, triplet distillation and output
//! distillation through a differentiable teacher.

mod disc;

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsp::StftPlan;
use crate::metrics::{SISDR_CLAMP_DB, SISDR_ENERGY_FLOOR};
use crate::model::{uniform, ParamSet};
use crate::rng;
use crate::teacher::{SyntheticTeacher, TeacherError};
use crate::tensor::{Float, Tape, Tensor, TensorError, Var};

pub use disc::Discriminator;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("reference row {0} has zero energy")]
    ZeroReference(usize),
    #[error("estimate has shape {est:?}, reference {reference:?}")]
    Shape { est: Vec<usize>, reference: Vec<usize> },
    #[error("output distillation backpropagates through the teacher and needs a differentiable teacher; {0} is not")]
    NotDifferentiable(&'static str),
    #[error("invalid loss weights: {0}")]
    Weights(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Teacher(#[from] TeacherError),
}

pub type Result<T> = std::result::Result<T, LossError>;

/// Weights of the auxiliary terms and the triplet margin.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub embed: f64,
    pub adversarial: f64,
    pub triplet: f64,
    pub output: f64,
    pub margin: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            embed: 1.0,
            adversarial: 0.1,
            triplet: 1.0,
            output: 1.0,
            margin: 100.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (k, v) in [
            ("embed", self.embed),
            ("adversarial", self.adversarial),
            ("triplet", self.triplet),
            ("output", self.output),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(LossError::Weights(format!("lambda.{k} = {v} must be finite and >= 0")));
            }
        }
        if !(self.margin > 0.0 && self.margin.is_finite()) {
            return Err(LossError::Weights(format!("margin = {} must be > 0", self.margin)));
        }
        Ok(())
    }
}

fn check_same<T: Float>(tape: &Tape<T>, a: Var, b: Var) -> Result<()> {
    if tape.shape(a) != tape.shape(b) {
        return Err(LossError::Shape {
            est: tape.shape(a).to_vec(),
            reference: tape.shape(b).to_vec(),
        });
    }
    Ok(())
}

/// Broadcasts `[B]` to `[B, n]`.
fn rows<T: Float>(tape: &mut Tape<T>, s: Var, n: usize) -> Result<Var> {
    let b = tape.shape(s)[0];
    let col = tape.reshape(s, &[b, 1])?;
    let ones = tape.constant(&[1, n], vec![T::one(); n])?;
    Ok(tape.matmul(col, ones)?)
}

/// Natural log of values already floored at the SI-SDR energy floor.
fn ln_floored<T: Float>(tape: &mut Tape<T>, x: Var) -> Var {
    let x = tape.clamp(x, SISDR_ENERGY_FLOOR, f64::INFINITY);
    let x = tape.add_scalar(x, -crate::tensor::EPS);
    tape.log_eps(x)
}

/// Per-row SI-SDR in dB of `[B, N]` estimates against `[B, N]` references,
/// with energies floored at 1e-8 and the result clamped to +-60 dB.
pub fn sisdr<T: Float>(tape: &mut Tape<T>, est: Var, reference: Var) -> Result<Var> {
    check_same(tape, est, reference)?;
    let s = tape.shape(est).to_vec();
    if s.len() != 2 {
        return Err(LossError::Shape {
            est: s,
            reference: tape.shape(reference).to_vec(),
        });
    }
    let n = s[1];
    for (i, r) in tape.value(reference).chunks(n).enumerate() {
        if r.iter().all(|&v| v == T::zero()) {
            return Err(LossError::ZeroReference(i));
        }
    }
    let er = tape.mul(est, reference)?;
    let dot = tape.sum_last(er)?;
    let rr = tape.mul(reference, reference)?;
    let rr = tape.sum_last(rr)?;
    let alpha = tape.div(dot, rr)?;
    let alpha_rows = rows(tape, alpha, n)?;
    let target = tape.mul(alpha_rows, reference)?;
    let resid = tape.sub(est, target)?;
    let t2 = tape.mul(target, target)?;
    let t_energy = tape.sum_last(t2)?;
    let r2 = tape.mul(resid, resid)?;
    let r_energy = tape.sum_last(r2)?;
    let lt = ln_floored(tape, t_energy);
    let lr = ln_floored(tape, r_energy);
    let diff = tape.sub(lt, lr)?;
    let db = tape.mul_scalar(diff, 10.0 / std::f64::consts::LN_10);
    Ok(tape.clamp(db, -SISDR_CLAMP_DB, SISDR_CLAMP_DB))
}

/// Negative mean SI-SDR, the enhancement objective.
pub fn sisdr_loss<T: Float>(tape: &mut Tape<T>, est: Var, reference: Var) -> Result<Var> {
    let s = sisdr(tape, est, reference)?;
    let m = tape.mean(s);
    Ok(tape.neg(m))
}

/// Mean absolute difference; used for embedding distillation.
pub fn mean_l1<T: Float>(tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var> {
    check_same(tape, a, b)?;
    let d = tape.sub(a, b)?;
    let d = tape.abs(d);
    Ok(tape.mean(d))
}

pub fn mean_squared<T: Float>(tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var> {
    check_same(tape, a, b)?;
    let d = tape.sub(a, b)?;
    let d2 = tape.mul(d, d)?;
    Ok(tape.mean(d2))
}

/// Mean of `1 - cos(a_t, b_t)` over frames.
pub fn cosine_distance<T: Float>(tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var> {
    check_same(tape, a, b)?;
    let c = tape.cosine_last(a, b)?;
    let m = tape.mean(c);
    let neg = tape.neg(m);
    Ok(tape.add_scalar(neg, 1.0))
}

/// Embedding distillation: mean L1 between the projected bottleneck and the
/// teacher view, both `[B, T, D]`.
pub fn distill_embed<T: Float>(tape: &mut Tape<T>, projected: Var, teacher: Var) -> Result<Var> {
    mean_l1(tape, projected, teacher)
}

/// Generator side of the least-squares GAN: `mean (D(fake) - 1)^2`.
pub fn lsgan_generator<T: Float>(tape: &mut Tape<T>, d_fake: Var) -> Var {
    let s = tape.add_scalar(d_fake, -1.0);
    let s2 = tape.mul(s, s).expect("same shape");
    tape.mean(s2)
}

/// Discriminator side: `1/2 mean D(fake)^2 + 1/2 mean (D(real) - 1)^2`.
pub fn lsgan_discriminator<T: Float>(tape: &mut Tape<T>, d_fake: Var, d_real: Var) -> Var {
    let f2 = tape.mul(d_fake, d_fake).expect("same shape");
    let f = tape.mean(f2);
    let r = lsgan_generator(tape, d_real);
    let sum = tape.add(f, r).expect("scalars");
    tape.mul_scalar(sum, 0.5)
}

/// Triplet hinge on per-frame L2 distances, averaged over frames. Inputs
/// are `[.., D]`.
pub fn triplet<T: Float>(tape: &mut Tape<T>, anchor: Var, positive: Var, negative: Var, margin: f64) -> Result<Var> {
    check_same(tape, anchor, positive)?;
    check_same(tape, anchor, negative)?;
    let ap = tape.sub(anchor, positive)?;
    let dp = tape.l2_norm_last(ap)?;
    let an = tape.sub(anchor, negative)?;
    let dn = tape.l2_norm_last(an)?;
    let d = tape.sub(dp, dn)?;
    let d = tape.add_scalar(d, margin);
    let h = tape.relu(d);
    Ok(tape.mean(h))
}

/// A teacher callable on waveforms inside a loss.
pub trait WaveTeacher<T: Float> {
    fn name(&self) -> &'static str;
    fn differentiable(&self) -> bool;
    /// Last-layer embeddings `[B, T, D]` of `[B, N]` waveforms.
    fn embed_last(&self, tape: &mut Tape<T>, wave: Var, plan: &Arc<StftPlan<T>>) -> Result<Var>;
}

impl<T: Float> WaveTeacher<T> for SyntheticTeacher<T> {
    fn name(&self) -> &'static str {
        "the synthetic teacher"
    }

    fn differentiable(&self) -> bool {
        true
    }

    fn embed_last(&self, tape: &mut Tape<T>, wave: Var, plan: &Arc<StftPlan<T>>) -> Result<Var> {
        let layers = self.embed_wave(tape, wave, plan)?;
        Ok(*layers.last().expect("teacher has layers"))
    }
}

/// Precomputed embeddings from disk; cannot be evaluated on new audio.
pub struct PrecomputedTeacher;

impl<T: Float> WaveTeacher<T> for PrecomputedTeacher {
    fn name(&self) -> &'static str {
        "a precomputed embedding file"
    }

    fn differentiable(&self) -> bool {
        false
    }

    fn embed_last(&self, _: &mut Tape<T>, _: Var, _: &Arc<StftPlan<T>>) -> Result<Var> {
        Err(LossError::NotDifferentiable("a precomputed embedding file"))
    }
}

/// Output distillation: mean L1 between the teacher's last-layer embeddings
/// of the estimate and of the clean reference.
pub fn distill_output<T: Float>(
    tape: &mut Tape<T>,
    est: Var,
    reference: Var,
    teacher: &dyn WaveTeacher<T>,
    plan: &Arc<StftPlan<T>>,
) -> Result<Var> {
    if !teacher.differentiable() {
        return Err(LossError::NotDifferentiable(teacher.name()));
    }
    check_same(tape, est, reference)?;
    let reference = tape.detach(reference);
    let a = teacher.embed_last(tape, est, plan)?;
    let b = teacher.embed_last(tape, reference, plan)?;
    mean_l1(tape, a, b)
}

/// Linear map from the bottleneck width to the teacher width.
#[derive(Clone, Debug)]
pub struct Projection<T: Float = f32> {
    pub params: ParamSet<T>,
}

impl<T: Float> Projection<T> {
    pub fn new(input: usize, output: usize, seed: u64) -> Self {
        let mut r = rng::stream(seed, rng::PROJECTION);
        let mut params = ParamSet::new();
        params.insert("proj.w", uniform(&mut r, &[input, output], 1.0 / (input as f64).sqrt()));
        params.insert("proj.b", Tensor::zeros(&[output]));
        Self { params }
    }

    pub fn apply(&self, tape: &mut Tape<T>, b: &crate::model::Bound, x: Var) -> Result<Var> {
        Ok(tape.linear(x, b.get("proj.w"), Some(b.get("proj.b")))?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::StftConfig;
    use crate::metrics::eval_sisdr;
    use proptest::prelude::*;

    fn c64(tape: &mut Tape<f64>, shape: &[usize], v: Vec<f64>) -> Var {
        tape.leaf(&Tensor::new(shape.to_vec(), v).unwrap().with_grad())
    }

    fn sisdr1(est: &[f64], r: &[f64]) -> f64 {
        let mut tape = Tape::new();
        let e = c64(&mut tape, &[1, est.len()], est.to_vec());
        let rv = c64(&mut tape, &[1, r.len()], r.to_vec());
        let s = sisdr(&mut tape, e, rv).unwrap();
        tape.value(s)[0]
    }

    #[test]
    fn sisdr_examples() {
        assert_eq!(sisdr1(&[1.0, 1.0], &[1.0, 0.0]), 0.0);
        assert_eq!(sisdr1(&[3.0, 0.0, 6.0], &[1.0, 0.0, 2.0]), 60.0);
        let v = sisdr1(&[1.0, 1.0, 0.0, 0.0], &[1.0, 0.0, 0.0, 0.0]);
        assert!(v.abs() < 1e-12);
        let mut tape = Tape::<f64>::new();
        let e = c64(&mut tape, &[1, 2], vec![1.0, 1.0]);
        let z = c64(&mut tape, &[1, 2], vec![0.0, 0.0]);
        assert!(matches!(sisdr(&mut tape, e, z), Err(LossError::ZeroReference(0))));
        let w = c64(&mut tape, &[1, 3], vec![1.0; 3]);
        assert!(matches!(sisdr(&mut tape, e, w), Err(LossError::Shape { .. })));
    }

    #[test]
    fn sisdr_matches_eval_path() {
        let r: Vec<f64> = (0..300).map(|i| (i as f64 * 0.07).sin()).collect();
        let e: Vec<f64> = r.iter().enumerate().map(|(i, v)| 0.8 * v + 0.3 * (i as f64 * 1.3).cos()).collect();
        let ev = eval_sisdr(&e.iter().map(|&v| v as f32).collect::<Vec<_>>(), &r.iter().map(|&v| v as f32).collect::<Vec<_>>()).unwrap();
        assert!((sisdr1(&e, &r) - ev).abs() < 1e-4);
    }

    proptest! {
        #[test]
        fn sisdr_is_scale_invariant(c in 0.01f64..100.0, seed in 0u64..100) {
            let r: Vec<f64> = (0..64).map(|i| ((i as u64 * 2654435761 + seed) % 1000) as f64 / 500.0 - 1.0).collect();
            let e: Vec<f64> = (0..64).map(|i| ((i as u64 * 40503 + 7 * seed) % 997) as f64 / 498.0 - 1.0).collect();
            let ce: Vec<f64> = e.iter().map(|v| c * v).collect();
            prop_assert!((sisdr1(&e, &r) - sisdr1(&ce, &r)).abs() < 1e-6);
        }

        #[test]
        fn triplet_is_nonnegative(a in proptest::collection::vec(-3.0f64..3.0, 12), p in proptest::collection::vec(-3.0f64..3.0, 12), n in proptest::collection::vec(-3.0f64..3.0, 12), m in 0.1f64..10.0) {
            let mut tape = Tape::new();
            let (av, pv, nv) = (c64(&mut tape, &[3, 4], a), c64(&mut tape, &[3, 4], p), c64(&mut tape, &[3, 4], n));
            let l = triplet(&mut tape, av, pv, nv, m).unwrap();
            prop_assert!(tape.scalar(l) >= 0.0);
        }
    }

    #[test]
    fn embed_distillation_examples() {
        let mut tape = Tape::<f64>::new();
        let a = c64(&mut tape, &[1, 2, 3], vec![0.5, -1.0, 2.0, 0.0, 3.0, 1.0]);
        let z = mean_l1(&mut tape, a, a).unwrap();
        assert_eq!(tape.scalar(z), 0.0);
        let b = tape.add_scalar(a, 1.0);
        let one = distill_embed(&mut tape, a, b).unwrap();
        assert!((tape.scalar(one) - 1.0).abs() < 1e-12);
        let c = c64(&mut tape, &[1, 3, 2], vec![0.0; 6]);
        assert!(distill_embed(&mut tape, a, c).is_err());
    }

    #[test]
    fn embed_distillation_matches_two_loops() {
        let (t, d) = (7, 5);
        let x: Vec<f64> = (0..t * d).map(|i| ((i * 31 % 17) as f64 - 8.0) / 3.0).collect();
        let y: Vec<f64> = (0..t * d).map(|i| ((i * 7 % 13) as f64 - 6.0) / 2.0).collect();
        let mut oracle = 0.0;
        for ti in 0..t {
            for di in 0..d {
                oracle += (x[ti * d + di] - y[ti * d + di]).abs();
            }
        }
        oracle /= (t * d) as f64;
        let mut tape = Tape::new();
        let (a, b) = (c64(&mut tape, &[1, t, d], x), c64(&mut tape, &[1, t, d], y));
        let l = distill_embed(&mut tape, a, b).unwrap();
        assert!((tape.scalar(l) - oracle).abs() < 1e-12);
    }

    #[test]
    fn lsgan_examples() {
        let cases = [(1.0, 1.0, 0.0, 0.5), (0.5, 0.5, 0.25, 0.25), (0.0, 1.0, 1.0, 0.0)];
        for (fake, real, gen, disc) in cases {
            let mut tape = Tape::<f64>::new();
            let f = c64(&mut tape, &[2, 3], vec![fake; 6]);
            let r = c64(&mut tape, &[2, 3], vec![real; 6]);
            let g = lsgan_generator(&mut tape, f);
            let d = lsgan_discriminator(&mut tape, f, r);
            assert!((tape.scalar(g) - gen).abs() < 1e-12);
            assert!((tape.scalar(d) - disc).abs() < 1e-12);
        }
    }

    #[test]
    fn triplet_examples() {
        let d = 4;
        let a = vec![0.0; d];
        let at = |dist: f64| {
            let mut tape = Tape::<f64>::new();
            let av = c64(&mut tape, &[1, 1, d], a.clone());
            let pv = c64(&mut tape, &[1, 1, d], a.clone());
            let mut n = vec![0.0; d];
            n[0] = dist;
            let nv = c64(&mut tape, &[1, 1, d], n);
            let l = triplet(&mut tape, av, pv, nv, LossWeights::default().margin).unwrap();
            tape.scalar(l)
        };
        assert!((at(50.0) - 50.0).abs() < 1e-3);
        assert_eq!(at(200.0), 0.0);
        assert_eq!(LossWeights::default().margin, 100.0);
    }

    #[test]
    fn cosine_and_squared_distances() {
        let mut tape = Tape::<f64>::new();
        let a = c64(&mut tape, &[2, 3], vec![1.0, 2.0, 3.0, -1.0, 0.5, 2.0]);
        let c = cosine_distance(&mut tape, a, a).unwrap();
        assert!(tape.scalar(c).abs() < 1e-8);
        let b = c64(&mut tape, &[2, 3], vec![0.0, 2.0, 1.0, 1.0, 0.5, 0.0]);
        let m = mean_squared(&mut tape, a, b).unwrap();
        let oracle = [1.0, 0.0, 4.0, 4.0, 0.0, 4.0].iter().sum::<f64>() / 6.0;
        assert!((tape.scalar(m) - oracle).abs() < 1e-12);
    }

    #[test]
    fn output_distillation() {
        let plan = Arc::new(StftPlan::<f64>::new(StftConfig::default()).unwrap());
        let teacher = SyntheticTeacher::<f64>::new(257, 2, 8, 5);
        let r: Vec<f64> = (0..1600).map(|i| 0.4 * (i as f64 * 0.03).sin() + 0.2 * (i as f64 * 0.11).sin()).collect();
        let mut tape = Tape::new();
        let rv = c64(&mut tape, &[1, 1600], r.clone());
        let ev = c64(&mut tape, &[1, 1600], r.clone());
        let same = distill_output(&mut tape, ev, rv, &teacher, &plan).unwrap();
        assert_eq!(tape.scalar(same), 0.0);
        let doubled = tape.mul_scalar(ev, 2.0);
        let l = distill_output(&mut tape, doubled, rv, &teacher, &plan).unwrap();
        assert!(tape.scalar(l) > 0.0);
        match distill_output(&mut tape, ev, rv, &PrecomputedTeacher, &plan) {
            Err(e @ LossError::NotDifferentiable(_)) => assert!(e.to_string().contains("differentiable teacher")),
            r => panic!("{r:?}"),
        }
    }

    #[test]
    fn weights_validate() {
        assert!(LossWeights::default().validate().is_ok());
        assert!(LossWeights { margin: 0.0, ..Default::default() }.validate().is_err());
        assert!(LossWeights { embed: -1.0, ..Default::default() }.validate().is_err());
    }
}
