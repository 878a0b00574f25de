use crate::model::{uniform, Bound, ParamSet};
use crate::rng;
use crate::tensor::{ConvSpec, Float, Tape, Tensor, Var};

use super::Result;

const KERNEL: usize = 5;
const STRIDES: [usize; 3] = [2, 2, 1];
const SLOPE: f64 = 0.1;

/// Frame-wise convolutional critic over `[B, T, D]` embedding sequences.
/// Three time convolutions (strides 2, 2, 1) with leaky ReLU, then a
/// 1-channel score per downsampled frame.
#[derive(Clone, Debug)]
pub struct Discriminator<T: Float = f32> {
    pub params: ParamSet<T>,
    dim: usize,
}

impl<T: Float> Discriminator<T> {
    pub fn new(dim: usize, hidden: usize, seed: u64) -> Self {
        let mut r = rng::stream(seed, rng::DISCRIMINATOR);
        let mut params = ParamSet::new();
        let widths = [dim, hidden, hidden, hidden];
        for (i, w) in widths.windows(2).enumerate() {
            let bound = 1.0 / ((w[0] * KERNEL) as f64).sqrt();
            params.insert(format!("disc.conv{i}.w"), uniform(&mut r, &[w[1], w[0], KERNEL, 1], bound));
            params.insert(format!("disc.conv{i}.b"), Tensor::zeros(&[w[1]]));
        }
        params.insert("disc.out.w", uniform(&mut r, &[1, hidden, 3, 1], 1.0 / ((hidden * 3) as f64).sqrt()));
        params.insert("disc.out.b", Tensor::zeros(&[1]));
        Self { params, dim }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Scores `[B, T']` for `[B, T, D]` input.
    pub fn score(&self, tape: &mut Tape<T>, b: &Bound, x: Var) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        let (bs, t, d) = (s[0], s[1], s[2]);
        let x = tape.permute(x, &[0, 2, 1])?;
        let mut h = tape.reshape(x, &[bs, d, t, 1])?;
        for (i, &stride) in STRIDES.iter().enumerate() {
            let spec = ConvSpec {
                stride: (stride, 1),
                pad_time: (KERNEL / 2, KERNEL / 2),
                pad_freq: (0, 0),
            };
            let y = tape.conv2d(h, b.get(&format!("disc.conv{i}.w")), Some(b.get(&format!("disc.conv{i}.b"))), spec)?;
            h = tape.leaky_relu(y, SLOPE);
        }
        let spec = ConvSpec {
            stride: (1, 1),
            pad_time: (1, 1),
            pad_freq: (0, 0),
        };
        let y = tape.conv2d(h, b.get("disc.out.w"), Some(b.get("disc.out.b")), spec)?;
        let tn = tape.shape(y)[2];
        Ok(tape.reshape(y, &[bs, tn])?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scores_downsampled_frames() {
        let d = Discriminator::<f32>::new(16, 8, 1);
        let mut tape = Tape::new();
        let b = d.params.bind(&mut tape, |_| true);
        let x = tape.leaf(&Tensor::from_fn(&[2, 49, 16], |i| (i as f32 * 0.01).sin()));
        let s = d.score(&mut tape, &b, x).unwrap();
        assert_eq!(tape.shape(s), &[2, 13]);
        assert!(d.params.names().all(|n| n.starts_with("disc.")));
    }
}
