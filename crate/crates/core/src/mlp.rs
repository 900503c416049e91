//! Fully connected tanh networks `(t, x) -> R^m` with hand-written
//! reverse-mode derivatives, Glorot initialization and Adam.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{CounterRng, Purpose};
use crate::scalar::Real;

pub const DEFAULT_WIDTH: usize = 64;
pub const DEFAULT_HIDDEN: usize = 4;

/// Tanh hidden layers and a linear output layer. Inputs are `t / t_scale`
/// followed by `x_j / x_scale_j`.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp<T: Real = f64> {
    layers: Vec<usize>,
    params: Vec<T>,
    t_scale: T,
    x_scale: Vec<T>,
}

/// Per-layer activations recorded by [`Mlp::forward_tape`].
#[derive(Clone, Debug)]
pub struct Tape<T: Real> {
    /// `acts[0]` is the normalized input, `acts[l]` the output of layer `l`.
    acts: Vec<Vec<T>>,
}

impl<T: Real> Tape<T> {
    pub fn output(&self) -> &[T] {
        self.acts.last().unwrap()
    }
}

impl<T: Real> Mlp<T> {
    /// Zero-initialized network with the given layer sizes.
    pub fn zeros(layers: Vec<usize>, t_scale: T, x_scale: Vec<T>) -> Result<Self> {
        if layers.len() < 2 || layers.contains(&0) {
            return Err(Error::Config("network needs at least input and output layers of positive size".into()));
        }
        if layers[0] != 1 + x_scale.len() {
            return Err(Error::Config(format!(
                "input layer has {} units but time plus state has {}",
                layers[0],
                1 + x_scale.len()
            )));
        }
        if !(t_scale > T::zero()) || x_scale.iter().any(|&s| !(s > T::zero())) {
            return Err(Error::Config("normalization scales must be positive".into()));
        }
        let n = layers.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        Ok(Self { layers, params: vec![T::zero(); n], t_scale, x_scale })
    }

    /// `hidden` tanh layers of `width` units, Glorot-uniform weights, zero biases.
    pub fn glorot(
        state_dim: usize,
        out_dim: usize,
        width: usize,
        hidden: usize,
        t_scale: T,
        x_scale: Vec<T>,
        seed: u64,
    ) -> Result<Self> {
        if x_scale.len() != state_dim {
            return Err(Error::Config("x_scale must have one entry per state dimension".into()));
        }
        let mut layers = vec![1 + state_dim];
        layers.extend(std::iter::repeat_n(width, hidden));
        layers.push(out_dim);
        let mut net = Self::zeros(layers, t_scale, x_scale)?;
        let mut rng = CounterRng::new(seed, Purpose::NetInit).sequential();
        let mut off = 0;
        for w in net.layers.clone().windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for p in &mut net.params[off..off + fan_in * fan_out] {
                *p = T::lit(rng.random_range(-a..a));
            }
            off += fan_in * fan_out + fan_out;
        }
        Ok(net)
    }

    pub fn layers(&self) -> &[usize] {
        &self.layers
    }

    pub fn state_dim(&self) -> usize {
        self.layers[0] - 1
    }

    pub fn output_dim(&self) -> usize {
        *self.layers.last().unwrap()
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    pub fn t_scale(&self) -> T {
        self.t_scale
    }

    pub fn x_scale(&self) -> &[T] {
        &self.x_scale
    }

    fn normalize(&self, t: T, x: &[T]) -> Vec<T> {
        assert_eq!(x.len(), self.state_dim(), "network input dimension mismatch");
        let mut z = Vec::with_capacity(self.layers[0]);
        z.push(t / self.t_scale);
        z.extend(x.iter().zip(&self.x_scale).map(|(&v, &s)| v / s));
        z
    }

    fn dense(&self, off: usize, fan_in: usize, fan_out: usize, input: &[T], tanh: bool) -> Vec<T> {
        let w = &self.params[off..off + fan_in * fan_out];
        let b = &self.params[off + fan_in * fan_out..off + fan_in * fan_out + fan_out];
        (0..fan_out)
            .map(|o| {
                let row = &w[o * fan_in..(o + 1) * fan_in];
                let mut s = b[o];
                for (&wi, &zi) in row.iter().zip(input) {
                    s += wi * zi;
                }
                if tanh {
                    s.tanh()
                } else {
                    s
                }
            })
            .collect()
    }

    pub fn forward(&self, t: T, x: &[T]) -> Vec<T> {
        let mut z = self.normalize(t, x);
        let mut off = 0;
        let last = self.layers.len() - 2;
        for (l, w) in self.layers.windows(2).enumerate() {
            z = self.dense(off, w[0], w[1], &z, l < last);
            off += w[0] * w[1] + w[1];
        }
        z
    }

    pub fn forward_tape(&self, t: T, x: &[T]) -> Tape<T> {
        let mut acts = vec![self.normalize(t, x)];
        let mut off = 0;
        let last = self.layers.len() - 2;
        for (l, w) in self.layers.windows(2).enumerate() {
            let next = self.dense(off, w[0], w[1], acts.last().unwrap(), l < last);
            acts.push(next);
            off += w[0] * w[1] + w[1];
        }
        Tape { acts }
    }

    /// Vector-Jacobian product: adds `(d out / d params)^T dout` into
    /// `grad` (when given) and returns `(d out / d x)^T dout` in raw state
    /// coordinates.
    pub fn backward(&self, tape: &Tape<T>, dout: &[T], mut grad: Option<&mut [T]>) -> Vec<T> {
        let n_layers = self.layers.len() - 1;
        let mut offsets = Vec::with_capacity(n_layers);
        let mut off = 0;
        for w in self.layers.windows(2) {
            offsets.push(off);
            off += w[0] * w[1] + w[1];
        }
        let mut delta = dout.to_vec();
        for l in (0..n_layers).rev() {
            let (fan_in, fan_out) = (self.layers[l], self.layers[l + 1]);
            if l < n_layers - 1 {
                let a = &tape.acts[l + 1];
                for (dv, &av) in delta.iter_mut().zip(a) {
                    *dv *= T::one() - av * av;
                }
            }
            let input = &tape.acts[l];
            let off = offsets[l];
            if let Some(g) = grad.as_deref_mut() {
                for o in 0..fan_out {
                    let row = &mut g[off + o * fan_in..off + (o + 1) * fan_in];
                    for (gi, &zi) in row.iter_mut().zip(input) {
                        *gi += delta[o] * zi;
                    }
                    g[off + fan_in * fan_out + o] += delta[o];
                }
            }
            let w = &self.params[off..off + fan_in * fan_out];
            let mut prev = vec![T::zero(); fan_in];
            for o in 0..fan_out {
                let row = &w[o * fan_in..(o + 1) * fan_in];
                for (p, &wi) in prev.iter_mut().zip(row) {
                    *p += delta[o] * wi;
                }
            }
            delta = prev;
        }
        delta[1..].iter().zip(&self.x_scale).map(|(&v, &s)| v / s).collect()
    }

    pub fn cast<U: Real>(&self) -> Mlp<U> {
        Mlp {
            layers: self.layers.clone(),
            params: self.params.iter().map(|&p| U::lit(p.as_f64())).collect(),
            t_scale: U::lit(self.t_scale.as_f64()),
            x_scale: self.x_scale.iter().map(|&s| U::lit(s.as_f64())).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchJson {
    pub layers: Vec<usize>,
    pub activation: String,
    pub t_scale: f64,
    pub x_scale: Vec<f64>,
}

/// Serialized network: per-layer weights flattened row-major (`out x in`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpJson {
    pub arch: ArchJson,
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl Mlp<f64> {
    pub fn to_json(&self) -> MlpJson {
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        let mut off = 0;
        for w in self.layers.windows(2) {
            weights.push(self.params[off..off + w[0] * w[1]].to_vec());
            off += w[0] * w[1];
            biases.push(self.params[off..off + w[1]].to_vec());
            off += w[1];
        }
        MlpJson {
            arch: ArchJson {
                layers: self.layers.clone(),
                activation: "tanh".into(),
                t_scale: self.t_scale,
                x_scale: self.x_scale.clone(),
            },
            weights,
            biases,
        }
    }

    pub fn from_json(j: &MlpJson) -> Result<Self> {
        if j.arch.activation != "tanh" {
            return Err(Error::UnsupportedSpec(format!("activation `{}`", j.arch.activation)));
        }
        let mut net = Self::zeros(j.arch.layers.clone(), j.arch.t_scale, j.arch.x_scale.clone())?;
        let n_layers = net.layers.len() - 1;
        if j.weights.len() != n_layers || j.biases.len() != n_layers {
            return Err(Error::Data("weights and biases must have one entry per layer".into()));
        }
        let mut off = 0;
        for (l, w) in net.layers.clone().windows(2).enumerate() {
            if j.weights[l].len() != w[0] * w[1] || j.biases[l].len() != w[1] {
                return Err(Error::Data(format!("layer {l} has wrongly sized parameters")));
            }
            net.params[off..off + w[0] * w[1]].copy_from_slice(&j.weights[l]);
            off += w[0] * w[1];
            net.params[off..off + w[1]].copy_from_slice(&j.biases[l]);
            off += w[1];
        }
        if net.params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Data("network parameters must be finite".into()));
        }
        Ok(net)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub step_size: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { step_size: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, clip: 10.0 }
    }
}

#[derive(Clone, Debug)]
pub struct Adam<T: Real = f64> {
    cfg: AdamConfig,
    m: Vec<T>,
    v: Vec<T>,
    t: i32,
}

impl<T: Real> Adam<T> {
    pub fn new(n: usize, cfg: AdamConfig) -> Self {
        Self { cfg, m: vec![T::zero(); n], v: vec![T::zero(); n], t: 0 }
    }

    /// Clips `grad` to global norm `clip`, then takes one Adam step. Returns
    /// the pre-clip gradient norm.
    pub fn step(&mut self, params: &mut [T], grad: &mut [T]) -> T {
        let norm = crate::scalar::norm2(grad);
        let clip = T::lit(self.cfg.clip);
        if norm > clip {
            let s = clip / norm;
            grad.iter_mut().for_each(|g| *g *= s);
        }
        self.t += 1;
        let (b1, b2) = (T::lit(self.cfg.beta1), T::lit(self.cfg.beta2));
        let c1 = T::one() - b1.powi(self.t);
        let c2 = T::one() - b2.powi(self.t);
        let lr = T::lit(self.cfg.step_size);
        let eps = T::lit(self.cfg.eps);
        for ((p, &g), (m, v)) in params.iter_mut().zip(grad.iter()).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            *m = b1 * *m + (T::one() - b1) * g;
            *v = b2 * *v + (T::one() - b2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
        }
        norm
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_network_outputs_zero() {
        let net = Mlp::<f64>::zeros(vec![3, 8, 8, 2], 1.0, vec![1.0, 1.0]).unwrap();
        assert_eq!(net.forward(0.3, &[1.0, -2.0]), vec![0.0, 0.0]);
    }

    #[test]
    fn identity_linear_layer_returns_normalized_state() {
        let mut net = Mlp::<f64>::zeros(vec![3, 2], 5.0, vec![2.0, 4.0]).unwrap();
        let p = net.params_mut();
        p[1] = 1.0;
        p[5] = 1.0;
        assert_eq!(net.forward(1.0, &[1.0, -2.0]), vec![0.5, -0.5]);
    }

    #[test]
    fn backward_matches_directional_difference() {
        let net = Mlp::<f64>::glorot(3, 2, 16, 4, 2.0, vec![1.5, 1.5, 3.0], 11).unwrap();
        let (t, x) = (0.7, [0.3, -0.8, 1.1]);
        let dout = [0.4, -1.3];
        let tape = net.forward_tape(t, &x);
        let mut g = vec![0.0; net.n_params()];
        let gx = net.backward(&tape, &dout, Some(&mut g));
        let dir = [0.2, -0.5, 0.9];
        let h = 1e-6;
        let f = |s: f64| {
            let xs: Vec<f64> = x.iter().zip(&dir).map(|(a, b)| a + s * b).collect();
            let y = net.forward(t, &xs);
            y[0] * dout[0] + y[1] * dout[1]
        };
        let fd = (f(h) - f(-h)) / (2.0 * h);
        let an: f64 = gx.iter().zip(&dir).map(|(a, b)| a * b).sum();
        assert!((fd - an).abs() <= 1e-5 * an.abs().max(1e-3), "{fd} vs {an}");

        let mut pert = net.clone();
        for k in [0, 17, 200, net.n_params() - 1] {
            pert.params_mut()[k] += h;
            let up = pert.forward(t, &x);
            pert.params_mut()[k] -= 2.0 * h;
            let dn = pert.forward(t, &x);
            pert.params_mut()[k] += h;
            let fd = ((up[0] - dn[0]) * dout[0] + (up[1] - dn[1]) * dout[1]) / (2.0 * h);
            assert!((fd - g[k]).abs() <= 1e-6 * g[k].abs().max(1e-3), "param {k}: {fd} vs {}", g[k]);
        }
    }

    #[test]
    fn json_round_trip_is_exact() {
        let net = Mlp::<f64>::glorot(2, 2, 8, 4, 3.0, vec![4.0, 4.0], 5).unwrap();
        let text = serde_json::to_string(&net.to_json()).unwrap();
        let back = Mlp::from_json(&serde_json::from_str(&text).unwrap()).unwrap();
        assert_eq!(back, net);
        assert!(text.starts_with(r#"{"arch":{"layers":[3,8,8,8,8,2],"activation":"tanh","t_scale":3.0"#));
    }

    #[test]
    fn glorot_is_seeded() {
        let a = Mlp::<f64>::glorot(2, 1, 8, 2, 1.0, vec![1.0; 2], 1).unwrap();
        let b = Mlp::<f64>::glorot(2, 1, 8, 2, 1.0, vec![1.0; 2], 1).unwrap();
        let c = Mlp::<f64>::glorot(2, 1, 8, 2, 1.0, vec![1.0; 2], 2).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.params()[..24].iter().all(|p| p.abs() <= (6.0f64 / 11.0).sqrt()));
    }

    #[test]
    fn adam_clips_and_moves_against_gradient() {
        let mut p = vec![1.0f64, -1.0];
        let mut g = vec![300.0, -400.0];
        let mut opt = Adam::new(2, AdamConfig::default());
        let norm = opt.step(&mut p, &mut g);
        assert_eq!(norm, 500.0);
        assert!((g[0] - 6.0).abs() < 1e-12 && (g[1] + 8.0).abs() < 1e-12);
        assert!((p[0] - (1.0 - 1e-3)).abs() < 1e-9 && (p[1] + 1.0 - 1e-3).abs() < 1e-9);
    }

    #[test]
    fn f32_network_agrees_with_f64() {
        let net = Mlp::<f64>::glorot(2, 2, 8, 4, 1.0, vec![1.0; 2], 3).unwrap();
        let small: Mlp<f32> = net.cast();
        let a = net.forward(0.5, &[0.2, -0.4]);
        let b = small.forward(0.5, &[0.2, -0.4]);
        assert!(a.iter().zip(&b).all(|(x, y)| (x - *y as f64).abs() < 1e-5));
    }
}
