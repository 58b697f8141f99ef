//! Layer primitives over the tape: linear, conv, transposed conv, batch
//! norm, layer norm.
//!
//! A layer struct is a *naming convention plus hyperparameters*; the arrays
//! live in a [`ParamStore`] under `<layer name>.<field>`. `init` fills the
//! store, `apply` builds the forward computation against bound graph leaves.
//! Weights draw from a fan-in-scaled uniform distribution; biases start at
//! zero.

use crate::graph::{Graph, Var};
use crate::params::{BoundParams, ParamStore};
use crate::scalar::Scalar;
use ndarray::{ArrayD, IxDyn};
use rand::distributions::{Distribution, Uniform};
use rand_chacha::ChaCha8Rng;

pub const BATCH_NORM_EPS: f64 = 1e-5;
pub const LAYER_NORM_EPS: f64 = 1e-5;
/// Exponential factor for batch-norm running statistics.
pub const BATCH_NORM_MOMENTUM: f64 = 0.1;

/// Uniform tensor on `[-limit, limit]` with `limit = scale / sqrt(fan_in)`.
pub fn fan_in_uniform<F: Scalar>(
    rng: &mut ChaCha8Rng,
    shape: &[usize],
    fan_in: usize,
    scale: f64,
) -> ArrayD<F> {
    let limit = F::c(scale / (fan_in as f64).sqrt());
    let dist = Uniform::new_inclusive(-limit, limit);
    ArrayD::from_shape_simple_fn(IxDyn(shape), || dist.sample(rng))
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub name: String,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(name: impl Into<String>, in_dim: usize, out_dim: usize) -> Self {
        Linear { name: name.into(), in_dim, out_dim }
    }

    pub fn init<F: Scalar>(&self, store: &mut ParamStore<F>, rng: &mut ChaCha8Rng, scale: f64) {
        store.insert(
            format!("{}.w", self.name),
            fan_in_uniform(rng, &[self.out_dim, self.in_dim], self.in_dim, scale),
        );
        store.insert(format!("{}.b", self.name), ArrayD::zeros(IxDyn(&[self.out_dim])));
    }

    /// `[B, in] -> [B, out]`.
    pub fn apply<F: Scalar>(&self, g: &mut Graph<F>, p: &BoundParams, x: Var) -> Var {
        let w = p.get(&format!("{}.w", self.name));
        let b = p.get(&format!("{}.b", self.name));
        let wt = g.transpose(w, &[1, 0]);
        let y = g.matmul(x, wt);
        g.add(y, b)
    }

    /// Apply with an externally supplied weight (spectral normalization
    /// rescales weights before use).
    pub fn apply_with_weight<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        p: &BoundParams,
        w: Var,
        x: Var,
    ) -> Var {
        let b = p.get(&format!("{}.b", self.name));
        let wt = g.transpose(w, &[1, 0]);
        let y = g.matmul(x, wt);
        g.add(y, b)
    }

    pub fn weight_name(&self) -> String {
        format!("{}.w", self.name)
    }
}

#[derive(Debug, Clone)]
pub struct Conv2dLayer {
    pub name: String,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2dLayer {
    pub fn new(name: impl Into<String>, in_ch: usize, out_ch: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        Conv2dLayer { name: name.into(), in_ch, out_ch, kernel, stride, pad }
    }

    pub fn init<F: Scalar>(&self, store: &mut ParamStore<F>, rng: &mut ChaCha8Rng, scale: f64) {
        let fan_in = self.in_ch * self.kernel * self.kernel;
        store.insert(
            format!("{}.w", self.name),
            fan_in_uniform(rng, &[self.out_ch, self.in_ch, self.kernel, self.kernel], fan_in, scale),
        );
        store.insert(format!("{}.b", self.name), ArrayD::zeros(IxDyn(&[self.out_ch])));
    }

    pub fn apply<F: Scalar>(&self, g: &mut Graph<F>, p: &BoundParams, x: Var) -> Var {
        let w = p.get(&format!("{}.w", self.name));
        self.apply_with_weight(g, p, w, x)
    }

    pub fn apply_with_weight<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        p: &BoundParams,
        w: Var,
        x: Var,
    ) -> Var {
        let b = p.get(&format!("{}.b", self.name));
        let y = g.conv2d(x, w, self.stride, self.pad);
        let bb = g.reshape(b, &[1, self.out_ch, 1, 1]);
        g.add(y, bb)
    }

    pub fn weight_name(&self) -> String {
        format!("{}.w", self.name)
    }
}

#[derive(Debug, Clone)]
pub struct ConvT2dLayer {
    pub name: String,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvT2dLayer {
    pub fn new(name: impl Into<String>, in_ch: usize, out_ch: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        ConvT2dLayer { name: name.into(), in_ch, out_ch, kernel, stride, pad }
    }

    pub fn init<F: Scalar>(&self, store: &mut ParamStore<F>, rng: &mut ChaCha8Rng, scale: f64) {
        let fan_in = self.in_ch * self.kernel * self.kernel;
        store.insert(
            format!("{}.w", self.name),
            fan_in_uniform(rng, &[self.in_ch, self.out_ch, self.kernel, self.kernel], fan_in, scale),
        );
        store.insert(format!("{}.b", self.name), ArrayD::zeros(IxDyn(&[self.out_ch])));
    }

    pub fn apply<F: Scalar>(&self, g: &mut Graph<F>, p: &BoundParams, x: Var) -> Var {
        let w = p.get(&format!("{}.w", self.name));
        let b = p.get(&format!("{}.b", self.name));
        let y = g.conv_transpose2d(x, w, self.stride, self.pad);
        let bb = g.reshape(b, &[1, self.out_ch, 1, 1]);
        g.add(y, bb)
    }
}

/// Per-channel batch normalization over `[B,C,H,W]`.
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub name: String,
    pub ch: usize,
}

/// Batch statistics observed during a training-mode forward; feed them to
/// [`BatchNorm2d::update_running`] after the optimizer step.
pub struct BnStats<F: Scalar> {
    pub mean: ArrayD<F>,
    pub var: ArrayD<F>,
}

impl BatchNorm2d {
    pub fn new(name: impl Into<String>, ch: usize) -> Self {
        BatchNorm2d { name: name.into(), ch }
    }

    pub fn init<F: Scalar>(&self, store: &mut ParamStore<F>) {
        store.insert(format!("{}.gamma", self.name), ArrayD::ones(IxDyn(&[self.ch])));
        store.insert(format!("{}.beta", self.name), ArrayD::zeros(IxDyn(&[self.ch])));
        store.insert_buffer(format!("{}.running_mean", self.name), ArrayD::zeros(IxDyn(&[self.ch])));
        store.insert_buffer(format!("{}.running_var", self.name), ArrayD::ones(IxDyn(&[self.ch])));
    }

    /// Training mode normalizes with batch statistics and reports them;
    /// inference mode uses the stored running statistics.
    pub fn apply<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        p: &BoundParams,
        x: Var,
        training: bool,
    ) -> (Var, Option<BnStats<F>>) {
        let gamma = p.get(&format!("{}.gamma", self.name));
        let beta = p.get(&format!("{}.beta", self.name));
        let gamma4 = g.reshape(gamma, &[1, self.ch, 1, 1]);
        let beta4 = g.reshape(beta, &[1, self.ch, 1, 1]);
        if training {
            let mean = g.mean_axes(x, &[0, 2, 3]);
            let xc = g.sub(x, mean);
            let sq = g.square(xc);
            let var = g.mean_axes(sq, &[0, 2, 3]);
            let denom = g.add_scalar(var, BATCH_NORM_EPS);
            let std = g.sqrt(denom);
            let xhat = g.div(xc, std);
            let scaled = g.mul(xhat, gamma4);
            let out = g.add(scaled, beta4);
            let stats = BnStats { mean: g.val(mean).clone(), var: g.val(var).clone() };
            (out, Some(stats))
        } else {
            let rm = p.get(&format!("{}.running_mean", self.name));
            let rv = p.get(&format!("{}.running_var", self.name));
            let rm4 = g.reshape(rm, &[1, self.ch, 1, 1]);
            let rv4 = g.reshape(rv, &[1, self.ch, 1, 1]);
            let xc = g.sub(x, rm4);
            let denom = g.add_scalar(rv4, BATCH_NORM_EPS);
            let std = g.sqrt(denom);
            let xhat = g.div(xc, std);
            let scaled = g.mul(xhat, gamma4);
            (g.add(scaled, beta4), None)
        }
    }

    pub fn update_running<F: Scalar>(&self, store: &mut ParamStore<F>, stats: &BnStats<F>) {
        let m = F::c(BATCH_NORM_MOMENTUM);
        let keep = F::one() - m;
        let mean_flat = stats
            .mean
            .clone()
            .into_shape_with_order(IxDyn(&[self.ch]))
            .expect("bn mean shape");
        let var_flat = stats
            .var
            .clone()
            .into_shape_with_order(IxDyn(&[self.ch]))
            .expect("bn var shape");
        {
            let rm = store.get_mut(&format!("{}.running_mean", self.name));
            *rm = &*rm * keep + &mean_flat * m;
        }
        let rv = store.get_mut(&format!("{}.running_var", self.name));
        *rv = &*rv * keep + &var_flat * m;
    }
}

/// Normalization of each vector along the last axis, with learnable gain
/// and bias.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub name: String,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new(name: impl Into<String>, dim: usize) -> Self {
        LayerNorm { name: name.into(), dim }
    }

    pub fn init<F: Scalar>(&self, store: &mut ParamStore<F>) {
        store.insert(format!("{}.gain", self.name), ArrayD::ones(IxDyn(&[self.dim])));
        store.insert(format!("{}.bias", self.name), ArrayD::zeros(IxDyn(&[self.dim])));
    }

    pub fn apply<F: Scalar>(&self, g: &mut Graph<F>, p: &BoundParams, x: Var) -> Var {
        let gain = p.get(&format!("{}.gain", self.name));
        let bias = p.get(&format!("{}.bias", self.name));
        let last = g.shape(x).len() - 1;
        let mean = g.mean_axes(x, &[last]);
        let xc = g.sub(x, mean);
        let sq = g.square(xc);
        let var = g.mean_axes(sq, &[last]);
        let denom = g.add_scalar(var, LAYER_NORM_EPS);
        let std = g.sqrt(denom);
        let xhat = g.div(xc, std);
        let scaled = g.mul(xhat, gain);
        g.add(scaled, bias)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;
    use crate::rng::stream;
    use ndarray::{ArrayD, IxDyn};

    #[test]
    fn linear_shapes_and_gradients() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = stream(0, "test", 0);
        let layer = Linear::new("fc", 3, 2);
        layer.init(&mut store, &mut rng, 1.0);
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let x = g.constant(ArrayD::from_shape_simple_fn(IxDyn(&[4, 3]), || 0.5));
        let y = layer.apply(&mut g, &p, x);
        assert_eq!(g.shape(y), &[4, 2]);
        let s = g.sum_all(y);
        let grads = g.backward(s);
        assert!(grads.wrt(p.get("fc.w")).is_some());
        assert!(grads.wrt(p.get("fc.b")).is_some());
    }

    #[test]
    fn layer_norm_zero_mean_unit_variance() {
        let mut store = ParamStore::<f64>::new();
        let ln = LayerNorm::new("ln", 8);
        ln.init(&mut store);
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let x = g.constant(ArrayD::from_shape_fn(IxDyn(&[2, 8]), |ix| (ix[1] as f64 - 3.0) * 2.5 + ix[0] as f64));
        let y = ln.apply(&mut g, &p, x);
        for row in g.val(y).rows() {
            let mean: f64 = row.mean().unwrap();
            let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-10, "mean {mean}");
            assert!((var - 1.0).abs() < 1e-3, "var {var}");
        }
    }

    #[test]
    fn batch_norm_train_normalizes_and_updates_running() {
        let mut store = ParamStore::<f64>::new();
        let bn = BatchNorm2d::new("bn", 2);
        bn.init(&mut store);
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let x = g.constant(ArrayD::from_shape_fn(IxDyn(&[3, 2, 2, 2]), |ix| {
            ix[0] as f64 * 2.0 + ix[1] as f64 * 10.0 + ix[2] as f64 * 0.5
        }));
        let (y, stats) = bn.apply(&mut g, &p, x, true);
        let stats = stats.unwrap();
        // channel means of the output are ~0
        let yv = g.val(y);
        for c in 0..2 {
            let mut acc = 0.0;
            let mut n = 0;
            for b in 0..3 {
                for i in 0..2 {
                    for j in 0..2 {
                        acc += yv[[b, c, i, j]];
                        n += 1;
                    }
                }
            }
            assert!((acc / n as f64).abs() < 1e-10);
        }
        bn.update_running(&mut store, &stats);
        let rm = store.get("bn.running_mean");
        assert!(rm[[0]] != 0.0, "running mean moved");
    }
}
