//! Central finite-difference checks of tape gradients in 64-bit precision.
//!
//! Each case maps named inputs to a tensor; the checked scalar is a fixed
//! random projection of that tensor. The reported error is
//! `|analytic - numeric| / max(|analytic|, |numeric|)` over the checked
//! coordinates.

use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::dsp::{StftConfig, StftPlan};
use crate::losses::{self, Discriminator, LossError, Projection};
use crate::model::{Bound, Gcrn, GcrnConfig, ModelError, Skips};
use crate::rng;
use crate::teacher::{self, SyntheticTeacher, TeacherError};
use crate::tensor::{ConvSpec, ConvTransposeSpec, Tape, Tensor, TensorError, Var};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum GradError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Teacher(#[from] TeacherError),
}

type CaseFn = dyn Fn(&mut Tape<f64>, &Bound) -> Result<Var, GradError> + Sync;

#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub name: String,
    pub coords: usize,
    pub rel_error: f64,
    pub elapsed: Duration,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.rel_error < TOLERANCE
    }
}

/// A function of named inputs; inputs created with `with_grad` are checked.
pub struct Case {
    pub name: String,
    inputs: Vec<(String, Tensor<f64>)>,
    f: Box<CaseFn>,
    /// Largest number of coordinates checked per input.
    pub max_coords: usize,
}

impl Case {
    pub fn new<S: Into<String>>(
        name: impl Into<String>,
        inputs: Vec<(S, Tensor<f64>)>,
        f: impl Fn(&mut Tape<f64>, &Bound) -> Result<Var, GradError> + Sync + 'static,
    ) -> Self {
        Self {
            name: name.into(),
            inputs: inputs.into_iter().map(|(n, t)| (n.into(), t)).collect(),
            f: Box::new(f),
            max_coords: 48,
        }
    }

    pub fn coords(mut self, n: usize) -> Self {
        self.max_coords = n;
        self
    }

    fn eval(&self, inputs: &[(String, Tensor<f64>)]) -> Result<(Tape<f64>, Bound, Var), GradError> {
        let mut tape = Tape::new();
        let mut b = Bound::default();
        for (n, t) in inputs {
            let v = tape.leaf(t);
            b.insert(n.clone(), v);
        }
        let out = (self.f)(&mut tape, &b)?;
        Ok((tape, b, out))
    }

    fn project(out: &[f64], proj: &[f64]) -> f64 {
        out.iter().zip(proj).map(|(a, b)| a * b).sum()
    }

    pub fn run(&self, seed: u64) -> Result<GradReport, GradError> {
        let start = Instant::now();
        let mut r = rng::stream(seed, rng::PROJECTION);
        let (mut tape, b, out) = self.eval(&self.inputs)?;
        let n_out = tape.value(out).len();
        let proj: Vec<f64> = (0..n_out).map(|_| StandardNormal.sample(&mut r)).collect();
        let p = tape.constant(tape.shape(out).to_vec().as_slice(), proj.clone())?;
        let weighted = tape.mul(out, p)?;
        let loss = tape.sum(weighted);
        let grads = tape.backward(loss)?;

        let (mut num2, mut ana2, mut diff2, mut coords) = (0.0, 0.0, 0.0, 0);
        for (i, (name, t)) in self.inputs.iter().enumerate() {
            if !t.requires_grad() {
                continue;
            }
            let analytic = grads.get(b.get(name)).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; t.len()]);
            let picks: Vec<usize> = if t.len() <= self.max_coords {
                (0..t.len()).collect()
            } else {
                sample(&mut r, t.len(), self.max_coords).into_vec()
            };
            for k in picks {
                let mut shifted = self.inputs.clone();
                let at = |s: &mut Vec<(String, Tensor<f64>)>, d: f64| -> Result<f64, GradError> {
                    s[i].1.data_mut()[k] = t.data()[k] + d;
                    let (tp, _, o) = self.eval(s)?;
                    Ok(Self::project(tp.value(o), &proj))
                };
                let num = (at(&mut shifted, STEP)? - at(&mut shifted, -STEP)?) / (2.0 * STEP);
                let a = analytic[k];
                num2 += num * num;
                ana2 += a * a;
                diff2 += (a - num) * (a - num);
                coords += 1;
            }
        }
        let denom = num2.max(ana2).sqrt();
        let rel_error = if denom == 0.0 { 0.0 } else { diff2.sqrt() / denom };
        Ok(GradReport {
            name: self.name.clone(),
            coords,
            rel_error,
            elapsed: start.elapsed(),
        })
    }
}

/// Values in `+-[0.2, 1.2]`, away from the kinks of abs/relu/leaky-relu.
fn rand_t(r: &mut impl Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = r.random_range(0.2..1.2);
        if r.random::<bool>() {
            m
        } else {
            -m
        }
    })
    .with_grad()
}

fn scaled(t: Tensor<f64>, c: f64) -> Tensor<f64> {
    let mut t = t;
    t.data_mut().iter_mut().for_each(|v| *v *= c);
    t
}

fn pos_t(r: &mut impl Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| r.random_range(0.5..2.0)).with_grad()
}

/// Every differentiable tape op, every loss, and a composed GCRN forward.
pub fn suite(seed: u64) -> Vec<Case> {
    let mut r = rng::stream(seed, rng::MODEL ^ 0x6772);
    let r = &mut r;
    let mut cases = Vec::new();

    macro_rules! unary {
        ($name:expr, $shape:expr, $gen:ident, |$t:ident, $x:ident| $body:expr) => {
            cases.push(Case::new($name, vec![("x", $gen(r, &$shape))], |$t, b| {
                let $x = b.get("x");
                Ok($body)
            }));
        };
    }
    macro_rules! binary {
        ($name:expr, $sa:expr, $sb:expr, $gb:ident, |$t:ident, $x:ident, $y:ident| $body:expr) => {
            cases.push(Case::new($name, vec![("x", rand_t(r, &$sa)), ("y", $gb(r, &$sb))], |$t, b| {
                let ($x, $y) = (b.get("x"), b.get("y"));
                Ok($body)
            }));
        };
    }

    binary!("add", [3, 4], [3, 4], rand_t, |t, x, y| t.add(x, y)?);
    binary!("sub", [3, 4], [3, 4], rand_t, |t, x, y| t.sub(x, y)?);
    binary!("mul", [3, 4], [3, 4], rand_t, |t, x, y| t.mul(x, y)?);
    binary!("div", [3, 4], [3, 4], pos_t, |t, x, y| t.div(x, y)?);
    binary!("scale", [3, 4], [1], rand_t, |t, x, y| t.scale(x, y)?);
    binary!("matmul", [3, 4], [4, 5], rand_t, |t, x, y| t.matmul(x, y)?);
    unary!("add_scalar", [5], rand_t, |t, x| t.add_scalar(x, 0.7));
    unary!("mul_scalar", [5], rand_t, |t, x| t.mul_scalar(x, -1.3));
    unary!("neg", [5], rand_t, |t, x| t.neg(x));
    cases.push(Case::new(
        "linear",
        vec![("x", rand_t(r, &[2, 3, 4])), ("w", rand_t(r, &[4, 5])), ("b", rand_t(r, &[5]))],
        |t, b| Ok(t.linear(b.get("x"), b.get("w"), Some(b.get("b")))?),
    ));
    cases.push(Case::new(
        "conv2d causal strided",
        vec![("x", rand_t(r, &[2, 3, 5, 9])), ("w", rand_t(r, &[4, 3, 2, 3])), ("b", rand_t(r, &[4]))],
        |t, b| Ok(t.conv2d(b.get("x"), b.get("w"), Some(b.get("b")), ConvSpec::causal(2, 2))?),
    ));
    cases.push(Case::new(
        "conv2d same padded",
        vec![("x", rand_t(r, &[1, 2, 6, 1])), ("w", rand_t(r, &[3, 2, 3, 1])), ("b", rand_t(r, &[3]))],
        |t, b| {
            let spec = ConvSpec {
                stride: (2, 1),
                pad_time: (1, 1),
                pad_freq: (0, 0),
            };
            Ok(t.conv2d(b.get("x"), b.get("w"), Some(b.get("b")), spec)?)
        },
    ));
    cases.push(Case::new(
        "conv_transpose2d",
        vec![("x", rand_t(r, &[2, 3, 4, 4])), ("w", rand_t(r, &[3, 2, 2, 3])), ("b", rand_t(r, &[2]))],
        |t, b| {
            let spec = ConvTransposeSpec {
                stride: (1, 2),
                crop_front: (0, 0),
                out_size: (4, 9),
            };
            Ok(t.conv_transpose2d(b.get("x"), b.get("w"), Some(b.get("b")), spec)?)
        },
    ));
    unary!("sigmoid", [6], rand_t, |t, x| t.sigmoid(x));
    unary!("tanh", [6], rand_t, |t, x| t.tanh(x));
    unary!("elu", [6], rand_t, |t, x| t.elu(x, 1.0));
    unary!("leaky_relu", [6], rand_t, |t, x| t.leaky_relu(x, 0.1));
    unary!("relu", [6], rand_t, |t, x| t.relu(x));
    unary!("abs", [6], rand_t, |t, x| t.abs(x));
    unary!("sqrt", [6], pos_t, |t, x| t.sqrt(x));
    unary!("log_eps", [6], pos_t, |t, x| t.log_eps(x));
    unary!("clamp", [6], pos_t, |t, x| t.clamp(x, 0.3, 1.7));
    unary!("softmax", [3, 5], rand_t, |t, x| t.softmax(x)?);
    binary!("concat", [2, 3], [2, 2], rand_t, |t, x, y| t.concat(&[x, y], 1)?);
    unary!("slice", [3, 6], rand_t, |t, x| t.slice(x, 1, 2, 3)?);
    unary!("reshape", [3, 4], rand_t, |t, x| t.reshape(x, &[2, 6])?);
    unary!("permute", [2, 3, 4], rand_t, |t, x| t.permute(x, &[0, 2, 1])?);
    unary!("gather_last", [2, 4], rand_t, |t, x| t.gather_last(x, &[3, 0, 0, 2, 1])?);
    unary!("sum", [2, 3], rand_t, |t, x| t.sum(x));
    unary!("mean", [2, 3], rand_t, |t, x| t.mean(x));
    unary!("sum_last", [2, 3], rand_t, |t, x| t.sum_last(x)?);
    unary!("mean_last", [2, 3], rand_t, |t, x| t.mean_last(x)?);
    unary!("l1_norm_last", [2, 3], rand_t, |t, x| t.l1_norm_last(x)?);
    unary!("l2_norm_last", [2, 3], rand_t, |t, x| t.l2_norm_last(x)?);
    binary!("cosine_last", [2, 4], [2, 4], rand_t, |t, x, y| t.cosine_last(x, y)?);
    cases.push(Case::new(
        "grouped lstm",
        vec![
            ("x", rand_t(r, &[2, 4, 4])),
            ("w", scaled(rand_t(r, &[2, 2 + 3, 12]), 0.5)),
            ("b", rand_t(r, &[2, 12])),
        ],
        |t, b| Ok(t.lstm(b.get("x"), b.get("w"), b.get("b"))?),
    ));
    unary!("upsample_dup", [1, 4, 2, 3], rand_t, |t, x| t.upsample_dup(x, 2, 6)?);

    let plan = Arc::new(StftPlan::<f64>::new(StftConfig::default()).expect("default stft"));
    {
        let plan = plan.clone();
        cases.push(Case::new("stft", vec![("x", rand_t(r, &[1, 1040]))], move |t, b| Ok(t.stft(b.get("x"), &plan)?)));
    }
    {
        let plan = plan.clone();
        cases.push(Case::new("istft", vec![("x", rand_t(r, &[1, 2, 3, 257]))], move |t, b| Ok(t.istft(b.get("x"), &plan)?)));
    }

    // Losses.
    let wave = |r: &mut rand_chacha::ChaCha8Rng, n: usize| {
        let ph: f64 = r.random_range(0.0..6.0);
        Tensor::from_fn(&[2, n], |i| (0.05 * i as f64 + ph).sin() + 0.3 * (0.21 * i as f64).cos()).with_grad()
    };
    cases.push(Case::new(
        "loss sisdr",
        vec![("est", rand_t(r, &[2, 64])), ("ref", wave(r, 64))],
        |t, b| Ok(losses::sisdr_loss(t, b.get("est"), b.get("ref"))?),
    ));
    cases.push(Case::new(
        "loss embedding distillation",
        vec![("x", rand_t(r, &[1, 3, 4])), ("y", rand_t(r, &[1, 3, 4]))],
        |t, b| Ok(losses::distill_embed(t, b.get("x"), b.get("y"))?),
    ));
    cases.push(Case::new(
        "loss weighted teacher layers",
        vec![("l0", rand_t(r, &[1, 3, 4])), ("l1", rand_t(r, &[1, 3, 4])), ("w", rand_t(r, &[2]))],
        |t, b| Ok(teacher::weighted_sum(t, &[b.get("l0"), b.get("l1")], b.get("w"))?),
    ));
    {
        let d = Discriminator::<f64>::new(4, 3, seed);
        let mut inputs = vec![("fake".to_string(), rand_t(r, &[1, 6, 4])), ("real".to_string(), rand_t(r, &[1, 6, 4]))];
        for (n, p) in d.params.iter() {
            inputs.push((n.to_string(), scaled(p.clone(), 4.0)));
        }
        let d2 = d.clone();
        cases.push(Case::new("loss lsgan generator", inputs.clone(), move |t, b| {
            let s = d2.score(t, b, b.get("fake"))?;
            Ok(losses::lsgan_generator(t, s))
        }));
        cases.push(Case::new("loss lsgan discriminator", inputs, move |t, b| {
            let f = d.score(t, b, b.get("fake"))?;
            let re = d.score(t, b, b.get("real"))?;
            Ok(losses::lsgan_discriminator(t, f, re))
        }));
    }
    cases.push(Case::new(
        "loss triplet",
        vec![("a", rand_t(r, &[1, 3, 4])), ("p", rand_t(r, &[1, 3, 4])), ("n", rand_t(r, &[1, 3, 4]))],
        |t, b| Ok(losses::triplet(t, b.get("a"), b.get("p"), b.get("n"), 100.0)?),
    ));
    {
        let plan = plan.clone();
        let teacher = SyntheticTeacher::<f64>::new(257, 2, 4, seed);
        // Broadband signals keep every bin away from the log-magnitude floor.
        // The clean reference is detached inside the loss, so it is a constant.
        let mut reference = rand_t(r, &[2, 720]);
        reference.set_requires_grad(false);
        cases.push(
            Case::new("loss output distillation", vec![("est", rand_t(r, &[2, 720])), ("ref", reference)], move |t, b| {
                Ok(losses::distill_output(t, b.get("est"), b.get("ref"), &teacher, &plan)?)
            })
            .coords(24),
        );
    }
    {
        let proj = Projection::<f64>::new(4, 3, seed);
        let mut inputs = vec![("x".to_string(), rand_t(r, &[1, 2, 4]))];
        for (n, p) in proj.params.iter() {
            inputs.push((n.to_string(), rand_t(r, p.shape())));
        }
        cases.push(Case::new("projection", inputs, move |t, b| Ok(proj.apply(t, b, b.get("x"))?)));
    }

    // Composed model on 4 frames.
    let cfg = GcrnConfig::tiny();
    let model = Gcrn::<f64>::new(cfg.clone(), seed).expect("tiny config");
    let mut inputs = vec![("x".to_string(), rand_t(r, &[1, 2, 4, cfg.bins]))];
    for (n, p) in model.params.iter() {
        inputs.push((n.to_string(), p.clone()));
    }
    let m2 = model.clone();
    cases.push(
        Case::new("gcrn forward", inputs.clone(), move |t, b| Ok(m2.forward(t, b, b.get("x"), None)?.spec)).coords(6),
    );
    cases.push(
        Case::new("gcrn decoder with duplicated skips", inputs, move |t, b| {
            let e = model.encode(t, b, b.get("x"))?;
            Ok(model.decode(t, b, e.output, &Skips::Duplicate, None)?)
        })
        .coords(4),
    );
    cases
}

/// Runs every case of [`suite`].
pub fn run_suite(seed: u64) -> Result<Vec<GradReport>, GradError> {
    use rayon::prelude::*;
    suite(seed).par_iter().map(|c| c.run(seed)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_a_wrong_gradient() {
        // detach() hides the dependence from backward, so analytic != numeric.
        let c = Case::new("broken", vec![("x", Tensor::from_fn(&[3], |i| i as f64 + 1.0).with_grad())], |t, b| {
            let x = b.get("x");
            let d = t.detach(x);
            let y = t.mul(x, d)?;
            Ok(y)
        });
        let rep = c.run(1).unwrap();
        assert!(!rep.passed(), "{rep:?}");
        assert!((rep.rel_error - 0.5).abs() < 1e-6);
    }

    #[test]
    fn accepts_a_correct_gradient() {
        let c = Case::new("square", vec![("x", Tensor::from_fn(&[4], |i| i as f64 - 1.5).with_grad())], |t, b| {
            let x = b.get("x");
            Ok(t.mul(x, x)?)
        });
        assert!(c.run(1).unwrap().passed());
    }

    #[test]
    fn every_case_passes() {
        let reports = run_suite(11).unwrap();
        let failed: Vec<_> = reports.iter().filter(|r| !r.passed()).collect();
        assert!(failed.is_empty(), "{failed:#?}");
        assert!(reports.iter().all(|r| r.coords > 0));
    }
}
