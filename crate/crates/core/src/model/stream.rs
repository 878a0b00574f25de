use super::{Conditioning, Gcrn, ModelError};
use crate::tensor::kernels::{self, Geometry, LstmDims};
use crate::tensor::Float;

/// Per-stream recurrent state: the last `kernel_time - 1` input frames of
/// every convolution and the `(h, c)` pair of every LSTM layer.
#[derive(Clone, Debug)]
pub struct StreamState<T: Float = f32> {
    enc_hist: Vec<Vec<Vec<T>>>,
    dec_hist: Vec<Vec<Vec<T>>>,
    lstm: Vec<(Vec<T>, Vec<T>)>,
    frames: usize,
    finished: bool,
}

impl<T: Float> StreamState<T> {
    pub fn frames(&self) -> usize {
        self.frames
    }

    /// Marks the stream as ended; further pushes are rejected.
    pub fn finish(&mut self) {
        self.finished = true;
    }

    pub fn is_finished(&self) -> bool {
        self.finished
    }
}

fn elu<T: Float>(x: T) -> T {
    if x > T::zero() {
        x
    } else {
        x.exp() - T::one()
    }
}

/// Stacks the history frames and the current frame into `[1, c, kt, f]`.
fn window<T: Float>(hist: &[Vec<T>], cur: &[T], c: usize, f: usize) -> Vec<T> {
    let kt = hist.len() + 1;
    let mut x = vec![T::zero(); c * kt * f];
    for ch in 0..c {
        for (ti, frame) in hist.iter().map(|h| h.as_slice()).chain(std::iter::once(cur)).enumerate() {
            x[(ch * kt + ti) * f..(ch * kt + ti + 1) * f].copy_from_slice(&frame[ch * f..(ch + 1) * f]);
        }
    }
    x
}

fn push_hist<T: Float>(hist: &mut [Vec<T>], cur: &[T]) {
    if hist.is_empty() {
        return;
    }
    hist.rotate_left(1);
    hist.last_mut().unwrap().copy_from_slice(cur);
}

impl<T: Float> Gcrn<T> {
    pub fn stream_state(&self) -> StreamState<T> {
        let cfg = self.config();
        let f = cfg.freq_sizes();
        let hist = cfg.kernel[0] - 1;
        let nblk = cfg.channels.len();
        StreamState {
            enc_hist: (0..nblk)
                .map(|k| vec![vec![T::zero(); cfg.in_channels(k) * f[k]]; hist])
                .collect(),
            dec_hist: (0..nblk)
                .map(|k| vec![vec![T::zero(); cfg.channels[k] * f[k + 1]]; hist])
                .collect(),
            lstm: (0..cfg.lstm_layers)
                .map(|_| (vec![T::zero(); cfg.lstm_hidden], vec![T::zero(); cfg.lstm_hidden]))
                .collect(),
            frames: 0,
            finished: false,
        }
    }

    fn p(&self, name: &str) -> &[T] {
        self.params.get(name).expect("parameter exists").data()
    }

    fn lstm_step(&self, name: &str, x: &[T], state: &mut (Vec<T>, Vec<T>)) -> Vec<T> {
        let cfg = self.config();
        let dims = LstmDims {
            batch: 1,
            time: 1,
            input: x.len(),
            hidden: cfg.lstm_hidden,
            groups: cfg.lstm_groups,
        };
        let w = self.p(&format!("{name}.w"));
        let b = self.p(&format!("{name}.b"));
        kernels::lstm_forward(x, w, b, dims, state).0
    }

    fn linear_step(&self, name: &str, x: &[T]) -> Vec<T> {
        let w = self.params.get(&format!("{name}.w")).expect("parameter exists");
        let (k, n) = (w.shape()[0], w.shape()[1]);
        let mut out = self.p(&format!("{name}.b")).to_vec();
        kernels::matmul_acc(x, w.data(), &mut out, 1, k, n);
        out
    }

    /// Processes one spectrogram frame, given as `re[0..bins]` followed by
    /// `im[0..bins]`, and returns the enhanced frame in the same layout.
    /// `cond` is one frame of the conditioning sequence for concat models.
    pub fn forward_stream(&self, state: &mut StreamState<T>, frame: &[T], cond: Option<&[T]>) -> Result<Vec<T>, ModelError> {
        if state.finished {
            return Err(ModelError::StreamFinished);
        }
        let cfg = self.config();
        if frame.len() != 2 * cfg.bins {
            return Err(ModelError::BinMismatch {
                got: frame.len() / 2,
                expected: cfg.bins,
            });
        }
        match (cfg.conditioning, cond) {
            (Conditioning::Concat, Some(c)) if c.len() != cfg.conditioning_dim => {
                return Err(ModelError::Condition("condition frame has the wrong width"))
            }
            (Conditioning::Concat, None) => return Err(ModelError::Condition("uses concat conditioning but no condition was given")),
            (Conditioning::None, Some(_)) => return Err(ModelError::Condition("has no conditioning path but a condition was given")),
            _ => {}
        }
        let f = cfg.freq_sizes();
        let [kt, kf] = cfg.kernel;
        let nblk = cfg.channels.len();

        let mut skips = Vec::with_capacity(nblk);
        let mut cur = frame.to_vec();
        for k in 0..nblk {
            let (ci, co) = (cfg.in_channels(k), cfg.channels[k]);
            let x = window(&state.enc_hist[k], &cur, ci, f[k]);
            push_hist(&mut state.enc_hist[k], &cur);
            let geo = Geometry {
                stride: (1, cfg.freq_strides[k]),
                front: (0, 0),
            };
            let conv = |g: &str| {
                let mut y = kernels::conv_forward(&x, [1, ci, kt, f[k]], self.p(&format!("enc.conv{k}.{g}.w")), [co, ci, kt, kf], geo, (1, f[k + 1]));
                kernels::add_channel_bias(&mut y, 1, co, f[k + 1], self.p(&format!("enc.conv{k}.{g}.b")));
                y
            };
            let (a, g) = (conv("a"), conv("g"));
            cur = a.iter().zip(&g).map(|(&a, &g)| elu(a * kernels::sigmoid(g))).collect();
            skips.push(cur.clone());
        }

        let shuffle = cfg.shuffle_indices();
        let half = cfg.lstm_layers / 2;
        let mut h = cur;
        for i in 0..cfg.lstm_layers {
            if i > 0 {
                h = shuffle.iter().map(|&j| h[j]).collect();
            }
            let name = if i < half { format!("enc.lstm{i}") } else { format!("dec.lstm{}", i - half) };
            h = self.lstm_step(&name, &h, &mut state.lstm[i]);
        }
        if let Some(c) = cond {
            h.extend_from_slice(c);
            h = self.linear_step("dec.cond", &h);
        }
        let mut x = self.linear_step("dec.fc", &h);
        for k in (0..nblk).rev() {
            let ci = cfg.channels[k];
            let zin: Vec<T> = x.iter().zip(&skips[k]).map(|(&a, &b)| a + b).collect();
            let z = window(&state.dec_hist[k], &zin, ci, f[k + 1]);
            push_hist(&mut state.dec_hist[k], &zin);
            let geo = Geometry {
                stride: (1, cfg.freq_strides[k]),
                front: (0, 0),
            };
            let co = if k > 0 { cfg.channels[k - 1] } else { 2 };
            let deconv = |name: &str| {
                let full = kernels::conv_transpose_forward(&z, [1, ci, kt, f[k + 1]], self.p(&format!("{name}.w")), [ci, co, kt, kf], geo, (kt, f[k]));
                // Only the newest output frame is complete.
                let mut y: Vec<T> = (0..co)
                    .flat_map(|o| full[(o * kt + kt - 1) * f[k]..(o * kt + kt) * f[k]].iter().copied())
                    .collect();
                kernels::add_channel_bias(&mut y, 1, co, f[k], self.p(&format!("{name}.b")));
                y
            };
            x = if k > 0 {
                let a = deconv(&format!("dec.deconv{k}.a"));
                let g = deconv(&format!("dec.deconv{k}.g"));
                a.iter().zip(&g).map(|(&a, &g)| elu(a * kernels::sigmoid(g))).collect()
            } else {
                deconv("dec.out")
            };
        }
        state.frames += 1;
        Ok(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Bound, GcrnConfig};
    use crate::tensor::{Tape, Tensor};

    fn offline(m: &Gcrn<f32>, x: &Tensor<f32>) -> Vec<f32> {
        let mut tape = Tape::new();
        let b: Bound = m.bind(&mut tape, |_| false);
        let xv = tape.leaf(x);
        let y = m.forward(&mut tape, &b, xv, None).unwrap().spec;
        tape.value(y).to_vec()
    }

    #[test]
    fn streaming_matches_offline() {
        let m = Gcrn::<f32>::new(GcrnConfig::tiny(), 4).unwrap();
        let t = 12;
        let x = Tensor::from_fn(&[1, 2, t, 257], |i| ((i * 7919 % 997) as f32 / 498.0 - 1.0) * 3.0);
        let y = offline(&m, &x);
        let mut st = m.stream_state();
        for ti in 0..t {
            let frame: Vec<f32> = (0..2).flat_map(|c| x.data()[(c * t + ti) * 257..(c * t + ti + 1) * 257].to_vec()).collect();
            let out = m.forward_stream(&mut st, &frame, None).unwrap();
            for c in 0..2 {
                for f in 0..257 {
                    let d = (out[c * 257 + f] - y[(c * t + ti) * 257 + f]).abs();
                    assert!(d <= 1e-4, "t={ti} c={c} f={f} diff {d}");
                }
            }
        }
    }

    #[test]
    fn finished_state_is_rejected() {
        let m = Gcrn::<f32>::new(GcrnConfig::tiny(), 4).unwrap();
        let mut st = m.stream_state();
        m.forward_stream(&mut st, &[0.0; 514], None).unwrap();
        st.finish();
        assert!(matches!(m.forward_stream(&mut st, &[0.0; 514], None), Err(ModelError::StreamFinished)));
    }

    #[test]
    fn interleaved_streams_are_independent() {
        let m = Gcrn::<f32>::new(GcrnConfig::tiny(), 4).unwrap();
        let frames: Vec<Vec<f32>> = (0..5).map(|t| (0..514).map(|i| ((i + 31 * t) as f32 * 0.1).sin()).collect()).collect();
        let mut solo = m.stream_state();
        let expected: Vec<Vec<f32>> = frames.iter().map(|f| m.forward_stream(&mut solo, f, None).unwrap()).collect();
        let (mut a, mut b) = (m.stream_state(), m.stream_state());
        for (t, f) in frames.iter().enumerate() {
            let ya = m.forward_stream(&mut a, f, None).unwrap();
            m.forward_stream(&mut b, &vec![1.0; 514], None).unwrap();
            assert_eq!(ya, expected[t]);
        }
    }
}
