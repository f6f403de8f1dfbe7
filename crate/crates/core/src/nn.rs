//! Minimal batched layers with hand-written backward passes.
//!
//! Every layer keeps its gradient buffers next to its parameters. Forward
//! passes take `&self` and return a cache; backward passes take that cache,
//! accumulate parameter gradients and return the gradient of the input.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Walks named parameter tensors as flat slices.
pub trait Parameters {
    /// Visits `(name, values, grads)` for every tensor, in a fixed order.
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64], &mut [f64]));

    /// Visits `(name, values)` for every tensor, same order as [`Parameters::visit_mut`].
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64]));

    fn zero_grad(&mut self) {
        self.visit_mut("", &mut |_, _, g| g.iter_mut().for_each(|v| *v = 0.0));
    }

    fn n_params(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, v| n += v.len());
        n
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn uniform<R: Rng>(rng: &mut R, shape: (usize, usize), bound: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn(shape, || rng.gen_range(-bound..bound))
}

/// Dense layer `y = x W + b` with `W` stored as `in x out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    grad_weight: Array2<f64>,
    grad_bias: Array1<f64>,
}

impl Linear {
    /// Fan-in scaled uniform initialisation, `U(-1/sqrt(in), 1/sqrt(in))`.
    pub fn new<R: Rng>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (inputs.max(1) as f64).sqrt();
        let weight = uniform(rng, (inputs, outputs), bound);
        let bias = uniform(rng, (1, outputs), bound).into_shape_with_order(outputs).unwrap();
        Self::from_parts(weight, bias)
    }

    pub fn from_parts(weight: Array2<f64>, bias: Array1<f64>) -> Self {
        assert_eq!(weight.ncols(), bias.len());
        let grad_weight = Array2::zeros(weight.raw_dim());
        let grad_bias = Array1::zeros(bias.len());
        Self {
            weight,
            bias,
            grad_weight,
            grad_bias,
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.nrows()
    }

    pub fn outputs(&self) -> usize {
        self.weight.ncols()
    }

    pub fn zero_weights(&mut self) {
        self.weight.fill(0.0);
        self.bias.fill(0.0);
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.weight) + &self.bias
    }

    pub fn backward(&mut self, x: &Array2<f64>, grad_out: &Array2<f64>) -> Array2<f64> {
        self.grad_weight += &x.t().dot(grad_out);
        self.grad_bias += &grad_out.sum_axis(Axis(0));
        grad_out.dot(&self.weight.t())
    }
}

impl Parameters for Linear {
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64], &mut [f64])) {
        f(
            &join(prefix, "weight"),
            self.weight.as_slice_mut().unwrap(),
            self.grad_weight.as_slice_mut().unwrap(),
        );
        f(
            &join(prefix, "bias"),
            self.bias.as_slice_mut().unwrap(),
            self.grad_bias.as_slice_mut().unwrap(),
        );
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64])) {
        f(&join(prefix, "weight"), self.weight.as_slice().unwrap());
        f(&join(prefix, "bias"), self.bias.as_slice().unwrap());
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputActivation {
    Identity,
    Sigmoid,
}

/// Fully connected stack with (leaky) ReLU between layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub output: OutputActivation,
    /// Negative-side slope of the hidden activation; 0 is a plain ReLU.
    pub leak: f64,
}

/// `max(v, 0)` for `leak = 0`, `leak * v` on the negative side otherwise.
pub fn leaky_relu(v: f64, leak: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        leak * v
    }
}

/// Multiplies `g` by the activation slope, read off the activation output `a`.
pub(crate) fn leaky_relu_backward(g: &mut Array2<f64>, a: &Array2<f64>, leak: f64) {
    g.zip_mut_with(a, |g, &a| {
        if a <= 0.0 {
            *g *= leak
        }
    });
}

/// Activations recorded by [`Mlp::forward`].
#[derive(Debug, Clone)]
pub struct MlpCache {
    /// Input of each layer; entry 0 is the network input.
    inputs: Vec<Array2<f64>>,
    pub output: Array2<f64>,
}

impl MlpCache {
    pub fn input(&self) -> &Array2<f64> {
        &self.inputs[0]
    }
}

impl Mlp {
    /// Builds `input -> hidden[0] -> ... -> output`.
    pub fn new<R: Rng>(
        input: usize,
        hidden: &[usize],
        output: usize,
        activation: OutputActivation,
        rng: &mut R,
    ) -> Self {
        let mut sizes = Vec::with_capacity(hidden.len() + 2);
        sizes.push(input);
        sizes.extend_from_slice(hidden);
        sizes.push(output);
        let layers = sizes
            .windows(2)
            .map(|w| Linear::new(w[0], w[1], rng))
            .collect();
        Self {
            layers,
            output: activation,
            leak: 0.0,
        }
    }

    pub fn with_leak(mut self, leak: f64) -> Self {
        self.leak = leak;
        self
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().outputs()
    }

    pub fn last_layer_mut(&mut self) -> &mut Linear {
        self.layers.last_mut().unwrap()
    }

    pub fn forward(&self, x: Array2<f64>) -> MlpCache {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut y = layer.forward(&h);
            if i < last {
                let leak = self.leak;
                y.mapv_inplace(|v| leaky_relu(v, leak));
            } else if self.output == OutputActivation::Sigmoid {
                y.mapv_inplace(sigmoid);
            }
            inputs.push(h);
            h = y;
        }
        MlpCache { inputs, output: h }
    }

    pub fn backward(&mut self, cache: &MlpCache, grad_out: &Array2<f64>) -> Array2<f64> {
        let mut g = grad_out.clone();
        if self.output == OutputActivation::Sigmoid {
            g.zip_mut_with(&cache.output, |g, &y| *g *= y * (1.0 - y));
        }
        for i in (0..self.layers.len()).rev() {
            let x = &cache.inputs[i];
            g = self.layers[i].backward(x, &g);
            if i > 0 {
                leaky_relu_backward(&mut g, x, self.leak);
            }
        }
        g
    }
}

impl Parameters for Mlp {
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64], &mut [f64])) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&join(prefix, &format!("layer{i}")), f);
        }
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64])) {
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&join(prefix, &format!("layer{i}")), f);
        }
    }
}

/// Single-input-channel 1-D convolution with zero "same" padding.
///
/// Input `B x D`, output `B x (channels * D)` laid out channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv1d {
    /// `channels x kernel`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    grad_weight: Array2<f64>,
    grad_bias: Array1<f64>,
}

impl Conv1d {
    pub fn new<R: Rng>(channels: usize, kernel: usize, rng: &mut R) -> Self {
        assert!(kernel % 2 == 1, "kernel size must be odd for same padding");
        let bound = 1.0 / (kernel as f64).sqrt();
        let weight = uniform(rng, (channels, kernel), bound);
        let bias = uniform(rng, (1, channels), bound).into_shape_with_order(channels).unwrap();
        Self {
            grad_weight: Array2::zeros(weight.raw_dim()),
            grad_bias: Array1::zeros(channels),
            weight,
            bias,
        }
    }

    pub fn channels(&self) -> usize {
        self.weight.nrows()
    }

    pub fn kernel(&self) -> usize {
        self.weight.ncols()
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        let (b, d) = x.dim();
        let (ch, k) = self.weight.dim();
        let half = k / 2;
        let mut out = Array2::zeros((b, ch * d));
        for (xrow, mut orow) in x.rows().into_iter().zip(out.rows_mut()) {
            let xs = xrow.as_slice().expect("contiguous rows");
            let os = orow.as_slice_mut().unwrap();
            for c in 0..ch {
                let w = self.weight.row(c);
                let o = &mut os[c * d..(c + 1) * d];
                o.iter_mut().for_each(|v| *v = self.bias[c]);
                for (t, &wt) in w.iter().enumerate() {
                    // o[i] += w[t] * x[i + t - half]
                    let lo = half.saturating_sub(t);
                    let hi = (d + half).saturating_sub(t).min(d);
                    for i in lo..hi {
                        o[i] += wt * xs[i + t - half];
                    }
                }
            }
        }
        out
    }

    pub fn backward(&mut self, x: &Array2<f64>, grad_out: &Array2<f64>) -> Array2<f64> {
        let (_, d) = x.dim();
        let (ch, k) = self.weight.dim();
        let half = k / 2;
        let mut gx = Array2::zeros(x.raw_dim());
        for ((xrow, grow), mut gxrow) in x
            .rows()
            .into_iter()
            .zip(grad_out.rows())
            .zip(gx.rows_mut())
        {
            let xs = xrow.as_slice().expect("contiguous rows");
            let gs = grow.as_slice().expect("contiguous rows");
            let gxs = gxrow.as_slice_mut().unwrap();
            for c in 0..ch {
                let g = &gs[c * d..(c + 1) * d];
                self.grad_bias[c] += g.iter().sum::<f64>();
                for t in 0..k {
                    let lo = half.saturating_sub(t);
                    let hi = (d + half).saturating_sub(t).min(d);
                    let wt = self.weight[[c, t]];
                    let mut acc = 0.0;
                    for i in lo..hi {
                        acc += g[i] * xs[i + t - half];
                        gxs[i + t - half] += g[i] * wt;
                    }
                    self.grad_weight[[c, t]] += acc;
                }
            }
        }
        gx
    }
}

impl Parameters for Conv1d {
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64], &mut [f64])) {
        f(
            &join(prefix, "weight"),
            self.weight.as_slice_mut().unwrap(),
            self.grad_weight.as_slice_mut().unwrap(),
        );
        f(
            &join(prefix, "bias"),
            self.bias.as_slice_mut().unwrap(),
            self.grad_bias.as_slice_mut().unwrap(),
        );
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64])) {
        f(&join(prefix, "weight"), self.weight.as_slice().unwrap());
        f(&join(prefix, "bias"), self.bias.as_slice().unwrap());
    }
}

/// Per-channel max pooling without padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaxPool1d {
    pub kernel: usize,
    pub stride: usize,
}

#[derive(Debug, Clone)]
pub struct MaxPoolCache {
    argmax: Vec<usize>,
    input_cols: usize,
}

impl MaxPool1d {
    pub fn output_len(&self, len: usize) -> usize {
        if len < self.kernel {
            0
        } else {
            (len - self.kernel) / self.stride + 1
        }
    }

    /// `x` is `B x (channels * len)`.
    pub fn forward(&self, x: &Array2<f64>, channels: usize) -> (Array2<f64>, MaxPoolCache) {
        let (b, cols) = x.dim();
        let len = cols / channels;
        let p = self.output_len(len);
        let mut out = Array2::zeros((b, channels * p));
        let mut argmax = Vec::with_capacity(b * channels * p);
        for (xrow, mut orow) in x.rows().into_iter().zip(out.rows_mut()) {
            let xs = xrow.as_slice().expect("contiguous rows");
            for c in 0..channels {
                for q in 0..p {
                    let start = c * len + q * self.stride;
                    let mut best = start;
                    for i in start + 1..start + self.kernel {
                        if xs[i] > xs[best] {
                            best = i;
                        }
                    }
                    orow[c * p + q] = xs[best];
                    argmax.push(best);
                }
            }
        }
        (
            out,
            MaxPoolCache {
                argmax,
                input_cols: cols,
            },
        )
    }

    pub fn backward(&self, cache: &MaxPoolCache, grad_out: &Array2<f64>) -> Array2<f64> {
        let (b, outc) = grad_out.dim();
        let mut gx = Array2::zeros((b, cache.input_cols));
        for (r, grow) in grad_out.rows().into_iter().enumerate() {
            for (q, g) in grow.iter().enumerate() {
                gx[[r, cache.argmax[r * outc + q]]] += g;
            }
        }
        gx
    }
}

/// Adam with bias-corrected moment estimates.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step<P: Parameters + ?Sized>(&mut self, params: &mut P) {
        self.step_scaled(params, |_| 1.0);
    }

    /// Like [`Adam::step`], with the learning rate multiplied by `scale(name)` per tensor.
    pub fn step_scaled<P: Parameters + ?Sized>(&mut self, params: &mut P, scale: impl Fn(&str) -> f64) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, eps, lr) = (self.beta1, self.beta2, self.eps, self.lr);
        let first = &mut self.first;
        let second = &mut self.second;
        let mut slot = 0;
        params.visit_mut("", &mut |name, values, grads| {
            let lr = lr * scale(name);
            if first.len() == slot {
                first.push(vec![0.0; values.len()]);
                second.push(vec![0.0; values.len()]);
            }
            let m = &mut first[slot];
            let v = &mut second[slot];
            for i in 0..values.len() {
                let g = grads[i];
                m[i] = b1 * m[i] + (1.0 - b1) * g;
                v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                values[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
            }
            slot += 1;
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central differences of `loss` with respect to every parameter.
    fn check_params<P: Parameters>(model: &mut P, loss: &dyn Fn(&P) -> f64, analytic: Vec<f64>) {
        let h = 1e-5;
        let mut flat = Vec::new();
        model.visit("", &mut |_, v| flat.extend_from_slice(v));
        assert_eq!(flat.len(), analytic.len());
        for (idx, a) in analytic.iter().enumerate() {
            let set = |m: &mut P, val: f64| {
                let mut k = 0;
                m.visit_mut("", &mut |_, v, _| {
                    if idx >= k && idx < k + v.len() {
                        v[idx - k] = val;
                    }
                    k += v.len();
                });
            };
            set(model, flat[idx] + h);
            let up = loss(model);
            set(model, flat[idx] - h);
            let down = loss(model);
            set(model, flat[idx]);
            let num = (up - down) / (2.0 * h);
            let err = (num - a).abs() / num.abs().max(a.abs()).max(1e-6);
            assert!(err < 1e-4, "param {idx}: numeric {num} analytic {a}");
        }
    }

    fn grads<P: Parameters>(model: &mut P) -> Vec<f64> {
        let mut out = Vec::new();
        model.visit_mut("", &mut |_, _, g| out.extend_from_slice(g));
        out
    }

    #[test]
    fn mlp_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut mlp = Mlp::new(4, &[5, 3], 2, OutputActivation::Sigmoid, &mut rng);
        let x = Array2::from_shape_simple_fn((6, 4), || rng.gen_range(-1.0..1.0));
        let target = Array2::from_shape_simple_fn((6, 2), || rng.gen_range(0.0..1.0));
        let loss = |m: &Mlp| {
            let y = m.forward(x.clone()).output;
            (&y - &target).mapv(|v| v * v).sum()
        };
        mlp.zero_grad();
        let cache = mlp.forward(x.clone());
        let g = (&cache.output - &target) * 2.0;
        mlp.backward(&cache, &g);
        let analytic = grads(&mut mlp);
        check_params(&mut mlp, &loss, analytic);
    }

    #[test]
    fn conv_and_pool_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut conv = Conv1d::new(3, 3, &mut rng);
        let pool = MaxPool1d { kernel: 3, stride: 2 };
        let x = Array2::from_shape_simple_fn((2, 11), || rng.gen_range(-1.0..1.0));
        let wts = Array2::from_shape_simple_fn((2, 3 * pool.output_len(11)), || {
            rng.gen_range(-1.0..1.0)
        });
        let loss_x = |c: &Conv1d, x: &Array2<f64>| {
            let (p, _) = pool.forward(&c.forward(x), 3);
            (&p * &wts).sum()
        };
        conv.zero_grad();
        let y = conv.forward(&x);
        let (_, cache) = pool.forward(&y, 3);
        let gy = pool.backward(&cache, &wts);
        let gx = conv.backward(&x, &gy);
        let analytic = grads(&mut conv);
        check_params(&mut conv, &|c| loss_x(c, &x), analytic);

        let h = 1e-6;
        for i in 0..2 {
            for j in 0..11 {
                let mut xp = x.clone();
                xp[[i, j]] += h;
                let mut xm = x.clone();
                xm[[i, j]] -= h;
                let num = (loss_x(&conv, &xp) - loss_x(&conv, &xm)) / (2.0 * h);
                assert!((num - gx[[i, j]]).abs() < 1e-6, "{num} vs {}", gx[[i, j]]);
            }
        }
    }

    #[test]
    fn conv_same_padding_values() {
        let w = Array2::from_shape_vec((1, 3), vec![1.0, 2.0, 3.0]).unwrap();
        let conv = Conv1d {
            grad_weight: Array2::zeros((1, 3)),
            grad_bias: Array1::zeros(1),
            weight: w,
            bias: Array1::from(vec![0.5]),
        };
        let x = Array2::from_shape_vec((1, 4), vec![1.0, 0.0, 0.0, 2.0]).unwrap();
        // y[i] = b + w0 x[i-1] + w1 x[i] + w2 x[i+1]
        let y = conv.forward(&x);
        assert_eq!(y.row(0).to_vec(), vec![2.5, 1.5, 6.5, 4.5]);
    }

    #[test]
    fn maxpool_picks_window_max() {
        let pool = MaxPool1d { kernel: 3, stride: 2 };
        assert_eq!(pool.output_len(600), 299);
        let x = Array2::from_shape_vec((1, 7), vec![1.0, 5.0, 2.0, 0.0, 3.0, 9.0, 4.0]).unwrap();
        let (y, _) = pool.forward(&x, 1);
        assert_eq!(y.row(0).to_vec(), vec![5.0, 3.0, 9.0]);
    }

    #[test]
    fn adam_minimises_quadratic() {
        let mut lin = Linear::from_parts(
            Array2::from_shape_vec((1, 1), vec![3.0]).unwrap(),
            Array1::from(vec![-2.0]),
        );
        let mut opt = Adam::new(0.05);
        for _ in 0..2000 {
            lin.zero_grad();
            lin.visit_mut("", &mut |_, v, g| {
                for i in 0..v.len() {
                    g[i] = 2.0 * v[i];
                }
            });
            opt.step(&mut lin);
        }
        assert!(lin.weight[[0, 0]].abs() < 1e-2);
        assert!(lin.bias[0].abs() < 1e-2);
    }

    #[test]
    fn sigmoid_is_stable() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-1000.0) >= 0.0 && sigmoid(1000.0) <= 1.0);
        assert!((sigmoid(2.0) + sigmoid(-2.0) - 1.0).abs() < 1e-15);
    }
}
