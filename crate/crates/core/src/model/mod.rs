//! Causal gated convolutional recurrent network (GCRN).
//!
//! ```text
//! [B,2,T,F] -> 5 x gated conv (stride 2 in freq) -> flatten -> grouped LSTM   (encoder)
//!           -> shuffle -> grouped LSTM -> [concat cond + linear] -> linear
//!           -> 5 x (add skip, gated transposed conv) -> [B,2,T,F]            (decoder)
//! ```
//!
//! The LSTM stack is split evenly between encoder and decoder, so the encoder
//! output is the first LSTM's hidden sequence. Every convolution is causal in
//! time: kernel height 2 with one frame of left padding.

mod stream;

use indexmap::IndexMap;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng;
use crate::tensor::checkpoint::{Checkpoint, CheckpointError};
use crate::tensor::{ConvSpec, ConvTransposeSpec, Float, Tape, Tensor, TensorError, Var};

pub use stream::StreamState;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("input has {got} frequency bins, model expects {expected}")]
    BinMismatch { got: usize, expected: usize },
    #[error("condition has {cond} frames but input has {input}; more than one frame apart")]
    ConditionFrames { input: usize, cond: usize },
    #[error("model {0}")]
    Condition(&'static str),
    #[error("stream state has been finished; start a new stream")]
    StreamFinished,
    #[error("checkpoint does not match the model:\n{}", .0.join("\n"))]
    Incompatible(Vec<String>),
}

type Result<T> = std::result::Result<T, ModelError>;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Conditioning {
    #[default]
    None,
    Concat,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GcrnConfig {
    pub bins: usize,
    /// Encoder output channels per block; the decoder mirrors them.
    pub channels: Vec<usize>,
    /// (time, frequency).
    pub kernel: [usize; 2],
    pub freq_strides: Vec<usize>,
    pub lstm_hidden: usize,
    /// Total LSTM layers, split evenly between encoder and decoder.
    pub lstm_layers: usize,
    pub lstm_groups: usize,
    /// Width of the distillation projection from the encoder output.
    pub projection_dim: usize,
    pub conditioning: Conditioning,
    pub conditioning_dim: usize,
}

impl Default for GcrnConfig {
    fn default() -> Self {
        Self {
            bins: 257,
            channels: vec![16, 32, 64, 128, 256],
            kernel: [2, 3],
            freq_strides: vec![2; 5],
            lstm_hidden: 256,
            lstm_layers: 2,
            lstm_groups: 2,
            projection_dim: 768,
            conditioning: Conditioning::None,
            conditioning_dim: 768,
        }
    }
}

impl GcrnConfig {
    /// Small preset for tests and desk-scale overfitting.
    pub fn tiny() -> Self {
        Self {
            channels: vec![8, 16, 16, 32, 32],
            lstm_hidden: 64,
            projection_dim: 64,
            conditioning_dim: 64,
            ..Self::default()
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "default" => Some(Self::default()),
            "tiny" => Some(Self::tiny()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(ModelError::Config(m));
        if self.channels.is_empty() || self.channels.contains(&0) {
            return err(format!("channels must be non-empty and positive, got {:?}", self.channels));
        }
        if self.freq_strides.len() != self.channels.len() || self.freq_strides.contains(&0) {
            return err(format!(
                "freq_strides {:?} must have one positive entry per block ({})",
                self.freq_strides,
                self.channels.len()
            ));
        }
        if self.kernel[0] == 0 || self.kernel[1] == 0 {
            return err("kernel sizes must be positive".into());
        }
        if self.lstm_layers < 2 || self.lstm_layers % 2 != 0 {
            return err(format!("lstm_layers must be even and >= 2, got {}", self.lstm_layers));
        }
        if self.lstm_groups == 0 || self.lstm_hidden % self.lstm_groups != 0 {
            return err(format!(
                "lstm_hidden {} must split into {} groups",
                self.lstm_hidden, self.lstm_groups
            ));
        }
        let mut f = self.bins;
        for (k, &s) in self.freq_strides.iter().enumerate() {
            if f < self.kernel[1] {
                return err(format!("block {k}: {f} bins are narrower than the kernel"));
            }
            f = (f - self.kernel[1]) / s + 1;
        }
        if (self.channels.last().unwrap() * f) % self.lstm_groups != 0 {
            return err("bottleneck width must split into lstm_groups".into());
        }
        if self.conditioning == Conditioning::Concat && self.conditioning_dim == 0 {
            return err("conditioning_dim must be positive for concat conditioning".into());
        }
        Ok(())
    }

    /// Frequency sizes before and after each encoder block.
    pub fn freq_sizes(&self) -> Vec<usize> {
        let mut v = vec![self.bins];
        for &s in &self.freq_strides {
            let f = *v.last().unwrap();
            v.push((f - self.kernel[1]) / s + 1);
        }
        v
    }

    pub fn bottleneck_width(&self) -> usize {
        self.channels.last().unwrap() * self.freq_sizes().last().unwrap()
    }

    fn in_channels(&self, k: usize) -> usize {
        if k == 0 {
            2
        } else {
            self.channels[k - 1]
        }
    }

    pub fn encoder_lstm_layers(&self) -> usize {
        self.lstm_layers / 2
    }

    /// Feature permutation applied between LSTM layers so that each group of
    /// the next layer sees features from every group of the previous one.
    pub fn shuffle_indices(&self) -> Vec<usize> {
        let (h, g) = (self.lstm_hidden, self.lstm_groups);
        let hg = h / g;
        (0..h).map(|j| (j % g) * hg + j / g).collect()
    }
}

/// Parameter count of one grouped LSTM layer with the layout used here.
pub fn grouped_lstm_params(input: usize, hidden: usize, groups: usize) -> usize {
    let (ig, hg) = (input / groups, hidden / groups);
    groups * ((ig + hg) * 4 * hg + 4 * hg)
}

/// Parameter vars bound on a tape, by name.
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: IndexMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` was not bound"))
    }

    pub fn insert(&mut self, name: impl Into<String>, v: Var) {
        self.vars.insert(name.into(), v);
    }

    pub fn try_get(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

/// Named parameter tensors in a fixed order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet<T: Float = f32> {
    params: IndexMap<String, Tensor<T>>,
}

impl<T: Float> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            params: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.params.insert(name.into(), t.with_grad());
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params.get_mut(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|k| k.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn count(&self) -> usize {
        self.params.values().map(|t| t.len()).sum()
    }

    /// Binds every parameter as a leaf; those for which `trainable` is false
    /// are bound without gradient tracking.
    pub fn bind_into(&self, tape: &mut Tape<T>, bound: &mut Bound, trainable: impl Fn(&str) -> bool) {
        for (name, t) in &self.params {
            let mut t = t.clone();
            t.set_requires_grad(trainable(name));
            bound.vars.insert(name.clone(), tape.leaf(&t));
        }
    }

    pub fn bind(&self, tape: &mut Tape<T>, trainable: impl Fn(&str) -> bool) -> Bound {
        let mut b = Bound::default();
        self.bind_into(tape, &mut b, trainable);
        b
    }

    /// Moves gradients from a backward pass onto the parameters. Parameters
    /// the loss does not reach get a zero gradient.
    pub fn collect_grads(&mut self, bound: &Bound, grads: &mut crate::tensor::Gradients<T>) {
        for (name, t) in self.params.iter_mut() {
            let g = bound
                .try_get(name)
                .and_then(|v| grads.take(v))
                .unwrap_or_else(|| vec![T::zero(); t.len()]);
            t.set_grad(g).expect("gradient has parameter shape");
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        for (name, t) in &self.params {
            ck.push(name, t).expect("names are unique");
        }
        ck
    }

    /// Overwrites every parameter whose name starts with `prefix` from `ck`.
    /// All shape and presence mismatches are reported together.
    pub fn load_from(&mut self, ck: &Checkpoint, prefix: &str) -> Result<usize> {
        let mut problems = Vec::new();
        let mut loaded = 0;
        for (name, t) in self.params.iter_mut().filter(|(n, _)| n.starts_with(prefix)) {
            match ck.get(name) {
                None => problems.push(format!("  {name}: missing from checkpoint")),
                Some((shape, _)) if shape != t.shape() => {
                    problems.push(format!("  {name}: checkpoint {shape:?}, model {:?}", t.shape()))
                }
                Some(_) => {
                    *t = ck.tensor::<T>(name)?.with_grad();
                    loaded += 1;
                }
            }
        }
        if problems.is_empty() {
            Ok(loaded)
        } else {
            Err(ModelError::Incompatible(problems))
        }
    }

    pub fn cast<U: Float>(&self) -> ParamSet<U> {
        ParamSet {
            params: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), v.cast::<U>().with_grad()))
                .collect(),
        }
    }

    pub fn clear_grads(&mut self) {
        self.params.values_mut().for_each(|t| t.clear_grad());
    }
}

pub fn uniform<T: Float>(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::of_f64(rng.random_range(-bound..=bound)))
}

/// Encoder outputs: per-block activations (decoder skips) and the final
/// encoder LSTM sequence `[B, T, H]`.
#[derive(Clone, Debug)]
pub struct Encoded {
    pub skips: Vec<Var>,
    pub output: Var,
}

/// What the decoder adds at each stage input.
#[derive(Clone, Debug)]
pub enum Skips {
    /// Encoder block outputs, outermost first.
    Encoder(Vec<Var>),
    /// No encoder: each stage instead adds its predecessor's input,
    /// upsampled by duplicating every frequency bin twice.
    Duplicate,
}

#[derive(Clone, Debug)]
pub struct Forward {
    /// `[B, 2, T, bins]` real and imaginary parts.
    pub spec: Var,
    pub encoded: Encoded,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Gcrn<T: Float = f32> {
    cfg: GcrnConfig,
    pub params: ParamSet<T>,
}

impl<T: Float> Gcrn<T> {
    pub fn new(cfg: GcrnConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rng::stream(seed, rng::MODEL);
        let mut p = ParamSet::new();
        let [kt, kf] = cfg.kernel;
        let nblk = cfg.channels.len();
        for k in 0..nblk {
            let (ci, co) = (cfg.in_channels(k), cfg.channels[k]);
            let bound = 1.0 / ((ci * kt * kf) as f64).sqrt();
            for g in ["a", "g"] {
                p.insert(format!("enc.conv{k}.{g}.w"), uniform(&mut rng, &[co, ci, kt, kf], bound));
                p.insert(format!("enc.conv{k}.{g}.b"), Tensor::zeros(&[co]));
            }
        }
        let h = cfg.lstm_hidden;
        let mut input = cfg.bottleneck_width();
        for (side, layers) in [("enc", cfg.encoder_lstm_layers()), ("dec", cfg.lstm_layers / 2)] {
            for i in 0..layers {
                let (gr, hg) = (cfg.lstm_groups, h / cfg.lstm_groups);
                let bound = 1.0 / (hg as f64).sqrt();
                p.insert(format!("{side}.lstm{i}.w"), uniform(&mut rng, &[gr, input / gr + hg, 4 * hg], bound));
                // Forget-gate bias of one.
                p.insert(
                    format!("{side}.lstm{i}.b"),
                    Tensor::from_fn(&[gr, 4 * hg], |j| if (j % (4 * hg)) / hg == 1 { T::one() } else { T::zero() }),
                );
                input = h;
            }
        }
        if cfg.conditioning == Conditioning::Concat {
            let d = cfg.conditioning_dim;
            // Identity on the bottleneck half, zero on the condition half.
            p.insert(
                "dec.cond.w",
                Tensor::from_fn(&[h + d, h], |i| if i / h == i % h { T::one() } else { T::zero() }),
            );
            p.insert("dec.cond.b", Tensor::zeros(&[h]));
        }
        let bw = cfg.bottleneck_width();
        p.insert("dec.fc.w", uniform(&mut rng, &[h, bw], 1.0 / (h as f64).sqrt()));
        p.insert("dec.fc.b", Tensor::zeros(&[bw]));
        for k in (0..nblk).rev() {
            let ci = cfg.channels[k];
            let bound = 1.0 / ((ci * kt * kf) as f64).sqrt();
            if k > 0 {
                let co = cfg.channels[k - 1];
                for g in ["a", "g"] {
                    p.insert(format!("dec.deconv{k}.{g}.w"), uniform(&mut rng, &[ci, co, kt, kf], bound));
                    p.insert(format!("dec.deconv{k}.{g}.b"), Tensor::zeros(&[co]));
                }
            } else {
                p.insert("dec.out.w", uniform(&mut rng, &[ci, 2, kt, kf], bound));
                p.insert("dec.out.b", Tensor::zeros(&[2]));
            }
        }
        Ok(Self { cfg, params: p })
    }

    pub fn config(&self) -> &GcrnConfig {
        &self.cfg
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    pub fn bind(&self, tape: &mut Tape<T>, trainable: impl Fn(&str) -> bool) -> Bound {
        self.params.bind(tape, trainable)
    }

    pub fn cast<U: Float>(&self) -> Gcrn<U> {
        Gcrn {
            cfg: self.cfg.clone(),
            params: self.params.cast(),
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        self.params.to_checkpoint()
    }

    /// Builds a model for `cfg` and fills every parameter from `ck`.
    pub fn from_checkpoint(cfg: GcrnConfig, ck: &Checkpoint) -> Result<Self> {
        let mut m = Self::new(cfg, 0)?;
        m.params.load_from(ck, "")?;
        Ok(m)
    }

    fn conv_spec(&self, k: usize) -> ConvSpec {
        ConvSpec::causal(self.cfg.kernel[0], self.cfg.freq_strides[k])
    }

    fn glu_conv(&self, tape: &mut Tape<T>, b: &Bound, x: Var, k: usize) -> Result<Var> {
        let spec = self.conv_spec(k);
        let a = tape.conv2d(x, b.get(&format!("enc.conv{k}.a.w")), Some(b.get(&format!("enc.conv{k}.a.b"))), spec)?;
        let g = tape.conv2d(x, b.get(&format!("enc.conv{k}.g.w")), Some(b.get(&format!("enc.conv{k}.g.b"))), spec)?;
        let g = tape.sigmoid(g);
        let y = tape.mul(a, g)?;
        Ok(tape.elu(y, 1.0))
    }

    fn deconv_spec(&self, k: usize, frames: usize) -> ConvTransposeSpec {
        let f = self.cfg.freq_sizes();
        ConvTransposeSpec {
            stride: (1, self.cfg.freq_strides[k]),
            crop_front: (0, 0),
            out_size: (frames, f[k]),
        }
    }

    fn lstm_stack(&self, tape: &mut Tape<T>, b: &Bound, side: &str, mut x: Var) -> Result<Var> {
        let shuffle = self.cfg.shuffle_indices();
        for i in 0..self.cfg.lstm_layers / 2 {
            if side == "dec" || i > 0 {
                x = tape.gather_last(x, &shuffle)?;
            }
            x = tape.lstm(x, b.get(&format!("{side}.lstm{i}.w")), b.get(&format!("{side}.lstm{i}.b")))?;
        }
        Ok(x)
    }

    /// `x`: `[B, 2, T, bins]`.
    pub fn encode(&self, tape: &mut Tape<T>, b: &Bound, x: Var) -> Result<Encoded> {
        let s = tape.shape(x).to_vec();
        if s.len() != 4 || s[1] != 2 {
            return Err(TensorError::Invalid {
                op: "encode",
                msg: format!("expected [batch, 2, frames, bins], got {s:?}"),
            }
            .into());
        }
        if s[3] != self.cfg.bins {
            return Err(ModelError::BinMismatch {
                got: s[3],
                expected: self.cfg.bins,
            });
        }
        let (nb, t) = (s[0], s[2]);
        let mut skips = Vec::with_capacity(self.cfg.channels.len());
        let mut h = x;
        for k in 0..self.cfg.channels.len() {
            h = self.glu_conv(tape, b, h, k)?;
            skips.push(h);
        }
        let flat = tape.permute(h, &[0, 2, 1, 3])?;
        let flat = tape.reshape(flat, &[nb, t, self.cfg.bottleneck_width()])?;
        let output = self.lstm_stack(tape, b, "enc", flat)?;
        Ok(Encoded { skips, output })
    }

    /// `h`: encoder output `[B, T, H]`; `cond`: `[B, T, D]` for concat models.
    pub fn decode(&self, tape: &mut Tape<T>, b: &Bound, h: Var, skips: &Skips, cond: Option<Var>) -> Result<Var> {
        let s = tape.shape(h).to_vec();
        let (nb, t) = (s[0], s[1]);
        let mut z = self.lstm_stack(tape, b, "dec", h)?;
        match (self.cfg.conditioning, cond) {
            (Conditioning::Concat, Some(c)) => {
                let cat = tape.concat(&[z, c], 2)?;
                z = tape.linear(cat, b.get("dec.cond.w"), Some(b.get("dec.cond.b")))?;
            }
            (Conditioning::Concat, None) => return Err(ModelError::Condition("uses concat conditioning but no condition was given")),
            (Conditioning::None, Some(_)) => return Err(ModelError::Condition("has no conditioning path but a condition was given")),
            (Conditioning::None, None) => {}
        }
        let z = tape.linear(z, b.get("dec.fc.w"), Some(b.get("dec.fc.b")))?;
        let nblk = self.cfg.channels.len();
        let f = self.cfg.freq_sizes();
        let z = tape.reshape(z, &[nb, t, self.cfg.channels[nblk - 1], f[nblk]])?;
        let mut x = tape.permute(z, &[0, 2, 1, 3])?;
        let mut prev_in: Option<Var> = None;
        for k in (0..nblk).rev() {
            let skip = match skips {
                Skips::Encoder(v) => Some(v[k]),
                Skips::Duplicate => prev_in
                    .map(|p| tape.upsample_dup(p, self.cfg.channels[k], f[k + 1]))
                    .transpose()?,
            };
            let zin = match skip {
                Some(sk) => tape.add(x, sk)?,
                None => x,
            };
            prev_in = Some(zin);
            let spec = self.deconv_spec(k, t);
            x = if k > 0 {
                let a = tape.conv_transpose2d(zin, b.get(&format!("dec.deconv{k}.a.w")), Some(b.get(&format!("dec.deconv{k}.a.b"))), spec)?;
                let g = tape.conv_transpose2d(zin, b.get(&format!("dec.deconv{k}.g.w")), Some(b.get(&format!("dec.deconv{k}.g.b"))), spec)?;
                let g = tape.sigmoid(g);
                let y = tape.mul(a, g)?;
                tape.elu(y, 1.0)
            } else {
                tape.conv_transpose2d(zin, b.get("dec.out.w"), Some(b.get("dec.out.b")), spec)?
            };
        }
        Ok(x)
    }

    /// Full model. With concat conditioning, `cond` (`[B, Tc, D]`) may differ
    /// from the input by one frame; both are then cut to the shorter length.
    pub fn forward(&self, tape: &mut Tape<T>, b: &Bound, x: Var, cond: Option<Var>) -> Result<Forward> {
        let (x, cond) = align_condition(tape, x, cond)?;
        let encoded = self.encode(tape, b, x)?;
        let spec = self.decode(tape, b, encoded.output, &Skips::Encoder(encoded.skips.clone()), cond)?;
        Ok(Forward { spec, encoded })
    }
}

/// Trims `x` (`[B, 2, T, F]`) and `cond` (`[B, Tc, D]`) to a common frame count.
pub fn align_condition<T: Float>(tape: &mut Tape<T>, x: Var, cond: Option<Var>) -> Result<(Var, Option<Var>)> {
    let Some(c) = cond else { return Ok((x, None)) };
    let (tx, tc) = (tape.shape(x)[2], tape.shape(c)[1]);
    if tx.abs_diff(tc) > 1 {
        return Err(ModelError::ConditionFrames { input: tx, cond: tc });
    }
    let n = tx.min(tc);
    let x = if tx > n { tape.slice(x, 2, 0, n)? } else { x };
    let c = if tc > n { tape.slice(c, 1, 0, n)? } else { c };
    Ok((x, Some(c)))
}
