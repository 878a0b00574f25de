use serde::{Deserialize, Serialize};

use super::{Float, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adam with bias correction. Moments are kept per parameter in the order the
/// parameters are passed to [`Adam::step`]; that order must not change.
#[derive(Clone, Debug)]
pub struct Adam<T: Float = f32> {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Float> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update and clears the gradients. Every parameter must
    /// carry a gradient.
    pub fn step<'a, I>(&mut self, params: I) -> Result<(), TensorError>
    where
        I: IntoIterator<Item = (&'a str, &'a mut Tensor<T>)>,
    {
        let mut params: Vec<(&str, &mut Tensor<T>)> = params.into_iter().collect();
        if let Some((name, _)) = params.iter().find(|(_, p)| p.grad().is_none()) {
            return Err(TensorError::MissingGrad(name.to_string()));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|(_, p)| vec![T::zero(); p.len()]).collect();
            self.v = self.m.clone();
        } else if self.m.len() != params.len() || self.m.iter().zip(&params).any(|(m, (_, p))| m.len() != p.len()) {
            return Err(super::invalid("adam", "parameter set changed between steps"));
        }
        self.step += 1;
        let c = &self.config;
        let (b1, b2) = (T::of_f64(c.beta1), T::of_f64(c.beta2));
        let one = T::one();
        let bc1 = T::of_f64(1.0 - c.beta1.powi(self.step as i32));
        let bc2 = T::of_f64(1.0 - c.beta2.powi(self.step as i32));
        let lr = T::of_f64(c.lr);
        let eps = T::of_f64(c.epsilon);
        for ((_, p), (m, v)) in params.iter_mut().zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            let g = p.take_grad().expect("checked above");
            let data = p.data_mut();
            for i in 0..data.len() {
                m[i] = b1 * m[i] + (one - b1) * g[i];
                v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                data[i] -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<'a, T: Float + 'a>(params: impl IntoIterator<Item = &'a mut Tensor<T>>, max_norm: f64) -> f64 {
    let mut params: Vec<&mut Tensor<T>> = params.into_iter().collect();
    let total: f64 = params
        .iter()
        .filter_map(|p| p.grad())
        .flat_map(|g| g.iter())
        .map(|&x| {
            let x = x.as_f64();
            x * x
        })
        .sum::<f64>()
        .sqrt();
    if total > max_norm && total.is_finite() {
        let s = T::of_f64(max_norm / total);
        for p in params.iter_mut() {
            if let Some(g) = p.grad_mut() {
                g.iter_mut().for_each(|x| *x *= s);
            }
        }
    }
    total
}
