//! The ISVAE network and the plain VAE baseline.
//!
//! Data flows as `x -> filter bank -> f0 -> encoder -> (mean, log_var) -> z
//! -> decoder -> x_hat`. Everything is batched over rows of an `ndarray`
//! matrix and differentiated by hand.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_len, Error, Result};
use crate::nn::{
    join, leaky_relu, leaky_relu_backward, Conv1d, MaxPool1d, MaxPoolCache, Mlp, MlpCache,
    OutputActivation, Parameters,
};
use crate::spectral::{gaussian_tap, Periodogram, Spectrum};

/// Hidden-activation leak used by the presets.
pub const DEFAULT_RELU_LEAK: f64 = 0.0;
pub const LOG_VAR_MIN: f64 = -10.0;
pub const LOG_VAR_MAX: f64 = 10.0;

const POOL: MaxPool1d = MaxPool1d {
    kernel: 3,
    stride: 2,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderKind {
    Vanilla,
    Attentive,
}

impl DecoderKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            DecoderKind::Vanilla => "vanilla",
            DecoderKind::Attentive => "attentive",
        }
    }
}

/// Layer sizes per dataset family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchitecturePreset {
    Synthetic,
    Har,
    ActiveHar,
    Soda,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d: usize,
    /// Number of filters in the bank.
    pub j: usize,
    /// Filter bandwidth in frequency bins.
    pub sigma: f64,
    /// Latent dimension.
    pub k: usize,
    pub decoder: DecoderKind,
    pub cnn_channels: usize,
    pub cnn_kernel: usize,
    pub attention_hidden: Vec<usize>,
    pub encoder_hidden: Vec<usize>,
    /// Hidden sizes of the vanilla decoder.
    pub decoder_hidden: Vec<usize>,
    /// Hidden sizes of the attentive decoder's `z -> f0_hat` network.
    #[serde(default)]
    pub attentive_f0_hidden: Vec<usize>,
    /// Hidden sizes of the attentive decoder's `(x_filt, z) -> x_hat` network.
    #[serde(default)]
    pub attentive_out_hidden: Vec<usize>,
    /// Hidden sizes of the baseline VAE encoder (full spectrum input).
    #[serde(default)]
    pub vae_encoder_hidden: Vec<usize>,
    /// Fixed output variance of the decoder.
    pub nu: f64,
    /// Negative-side slope of every hidden ReLU; 0 gives the plain ReLU.
    #[serde(default)]
    pub relu_leak: f64,
}

impl ModelConfig {
    pub fn preset(preset: ArchitecturePreset, d: usize, j: usize, k: usize) -> Self {
        let (sigma, attention, dec): (f64, Vec<usize>, Vec<usize>) = match preset {
            ArchitecturePreset::Synthetic => (15.0, vec![36, 20, 10], vec![70, 150, 300]),
            ArchitecturePreset::Har => (6.0, vec![6, 5], vec![50]),
            ArchitecturePreset::ActiveHar => (6.0, vec![6, 5], vec![20, 40, 80]),
            ArchitecturePreset::Soda => (6.0, vec![5, 5], vec![20, 40, 80]),
        };
        let mut decoder_hidden = vec![k];
        decoder_hidden.extend(&dec);
        let mut attentive_out_hidden = vec![j + k];
        attentive_out_hidden.extend(&dec);
        let mut vae_encoder_hidden: Vec<usize> = dec.iter().rev().copied().collect();
        vae_encoder_hidden.push(k);
        Self {
            d,
            j,
            sigma,
            k,
            decoder: DecoderKind::Vanilla,
            cnn_channels: 3,
            cnn_kernel: 3,
            attention_hidden: attention,
            encoder_hidden: vec![j, j],
            decoder_hidden,
            attentive_f0_hidden: vec![k, j, j],
            attentive_out_hidden,
            vae_encoder_hidden,
            nu: 1.0,
            relu_leak: DEFAULT_RELU_LEAK,
        }
    }

    /// The two-filter synthetic setup: D = 600, sigma = 15, K = 2, vanilla decoder.
    pub fn synthetic() -> Self {
        Self::preset(ArchitecturePreset::Synthetic, 600, 2, 2)
    }

    pub fn with_decoder(mut self, decoder: DecoderKind) -> Self {
        self.decoder = decoder;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.j < 1 || self.k < 1 {
            return Err(Error::Config("J and K must be at least 1".into()));
        }
        if !(self.sigma > 0.0) || !(self.nu > 0.0) {
            return Err(Error::Config("sigma and nu must be positive".into()));
        }
        if self.d < POOL.kernel {
            return Err(Error::Config(format!("D must be at least {}", POOL.kernel)));
        }
        if self.cnn_channels < 1 || self.cnn_kernel % 2 == 0 {
            return Err(Error::Config(
                "cnn needs at least one channel and an odd kernel".into(),
            ));
        }
        Ok(())
    }

    fn pooled_len(&self) -> usize {
        self.cnn_channels * POOL.output_len(self.d)
    }
}

/// Posterior mean and diagonal log-variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianPosterior {
    pub mean: Vec<f64>,
    pub log_var: Vec<f64>,
}

impl GaussianPosterior {
    pub fn variance(&self) -> Vec<f64> {
        self.log_var.iter().map(|lv| clamp_log_var(*lv).exp()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ElboTerms {
    pub recon_loglik: f64,
    pub kl: f64,
    pub elbo: f64,
}

/// Branch inputs, filtered spectra and centre frequencies for one signal.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterBankOutput {
    pub f0: Vec<f64>,
    pub residuals: Vec<Spectrum>,
    pub filtered: Vec<Spectrum>,
}

#[inline]
fn clamp_log_var(v: f64) -> f64 {
    v.clamp(LOG_VAR_MIN, LOG_VAR_MAX)
}

/// `z = mean + exp(log_var / 2) * noise`.
pub fn reparameterize(post: &GaussianPosterior, noise: &[f64]) -> Result<Vec<f64>> {
    ensure_len(post.mean.len(), noise.len())?;
    Ok(post
        .mean
        .iter()
        .zip(&post.log_var)
        .zip(noise)
        .map(|((m, lv), e)| m + (0.5 * clamp_log_var(*lv)).exp() * e)
        .collect())
}

/// `KL(N(mean, diag exp(log_var)) || N(0, I))`.
pub fn kl_to_standard_normal(post: &GaussianPosterior) -> f64 {
    0.5 * post
        .mean
        .iter()
        .zip(&post.log_var)
        .map(|(m, lv)| {
            let lv = clamp_log_var(*lv);
            m * m + lv.exp() - 1.0 - lv
        })
        .sum::<f64>()
}

/// Gaussian log-likelihood with fixed variance `nu`.
pub fn gaussian_loglik(x: &[f64], mean: &[f64], nu: f64) -> f64 {
    let sq: f64 = x.iter().zip(mean).map(|(a, b)| (a - b) * (a - b)).sum();
    -sq / (2.0 * nu) - 0.5 * x.len() as f64 * (2.0 * PI * nu).ln()
}

/// Single-sample ELBO estimate for one signal.
pub fn elbo(x: &Spectrum, mean_xhat: &[f64], post: &GaussianPosterior, nu: f64) -> Result<ElboTerms> {
    ensure_len(x.len(), mean_xhat.len())?;
    ensure_len(post.mean.len(), post.log_var.len())?;
    let recon_loglik = gaussian_loglik(x.coefficients(), mean_xhat, nu);
    let kl = kl_to_standard_normal(post);
    Ok(ElboTerms {
        recon_loglik,
        kl,
        elbo: recon_loglik - kl,
    })
}

/// Gaussian taps for a batch of centres: `B x D`.
fn batch_taps(centers: ArrayView2<'_, f64>, col: usize, sigma: f64, d: usize) -> Array2<f64> {
    Array2::from_shape_fn((centers.nrows(), d), |(b, bin)| {
        gaussian_tap(bin, centers[[b, col]], sigma, d)
    })
}

/// `sum_d grad[b, d] * weight[b, d] * dH/df` for every row `b`.
fn taps_center_grad(
    taps: &Array2<f64>,
    centers: ArrayView2<'_, f64>,
    col: usize,
    weighted_grad: &Array2<f64>,
    sigma: f64,
) -> Array1<f64> {
    let d = taps.ncols();
    let scale = d as f64 / (sigma * sigma);
    Array1::from_shape_fn(taps.nrows(), |b| {
        let mu = centers[[b, col]] * d as f64;
        let mut acc = 0.0;
        for bin in 0..d {
            acc += weighted_grad[[b, bin]] * taps[[b, bin]] * (bin as f64 - mu) * scale;
        }
        acc
    })
}

/// One attention branch: CNN -> max-pool -> ReLU -> MLP -> sigmoid scalar.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionBranch {
    pub conv: Conv1d,
    pub mlp: Mlp,
}

struct BranchCache {
    input: Array2<f64>,
    pool: MaxPoolCache,
    mlp: MlpCache,
}

impl AttentionBranch {
    fn new<R: Rng>(config: &ModelConfig, rng: &mut R) -> Self {
        let conv = Conv1d::new(config.cnn_channels, config.cnn_kernel, rng);
        let mlp = Mlp::new(
            config.pooled_len(),
            &config.attention_hidden,
            1,
            OutputActivation::Sigmoid,
            rng,
        ).with_leak(config.relu_leak);
        Self { conv, mlp }
    }

    fn forward(&self, input: Array2<f64>) -> BranchCache {
        let conv = self.conv.forward(&input);
        let (mut pooled, pool) = POOL.forward(&conv, self.conv.channels());
        let leak = self.mlp.leak;
        pooled.mapv_inplace(|v| leaky_relu(v, leak));
        let mlp = self.mlp.forward(pooled);
        BranchCache { input, pool, mlp }
    }

    fn backward(&mut self, cache: &BranchCache, grad_f: &Array2<f64>) -> Array2<f64> {
        let mut g = self.mlp.backward(&cache.mlp, grad_f);
        leaky_relu_backward(&mut g, cache.mlp.input(), self.mlp.leak);
        let g = POOL.backward(&cache.pool, &g);
        self.conv.backward(&cache.input, &g)
    }
}

impl Parameters for AttentionBranch {
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64], &mut [f64])) {
        self.conv.visit_mut(&join(prefix, "conv"), f);
        self.mlp.visit_mut(&join(prefix, "attention"), f);
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64])) {
        self.conv.visit(&join(prefix, "conv"), f);
        self.mlp.visit(&join(prefix, "attention"), f);
    }
}

/// Sequential attentive bank of `J` Gaussian filters.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterBank {
    pub branches: Vec<AttentionBranch>,
    sigma: f64,
    d: usize,
}

/// Everything the backward pass of [`FilterBank`] needs.
pub struct FilterBankCache {
    x: Array2<f64>,
    /// `B x J` centre frequencies.
    pub f0: Array2<f64>,
    /// Taps per branch, each `B x D`.
    pub taps: Vec<Array2<f64>>,
    /// `1 - sum_{k<j} h_k` per branch.
    pass: Vec<Array2<f64>>,
    branches: Vec<BranchCache>,
}

impl FilterBankCache {
    /// Input of branch `j`: `x - sum_{k<j} h_k . x`.
    pub fn residual(&self, j: usize) -> &Array2<f64> {
        &self.branches[j].input
    }
}

impl FilterBank {
    fn new<R: Rng>(config: &ModelConfig, rng: &mut R) -> Self {
        let branches = (0..config.j)
            .map(|_| AttentionBranch::new(config, rng))
            .collect();
        Self {
            branches,
            sigma: config.sigma,
            d: config.d,
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> FilterBankCache {
        let b = x.nrows();
        let j_count = self.branches.len();
        let mut f0 = Array2::zeros((b, j_count));
        let mut taps = Vec::with_capacity(j_count);
        let mut pass = Vec::with_capacity(j_count);
        let mut caches = Vec::with_capacity(j_count);
        let mut remaining = Array2::<f64>::ones(x.raw_dim());
        for (j, branch) in self.branches.iter().enumerate() {
            let input = x * &remaining;
            let cache = branch.forward(input);
            f0.column_mut(j).assign(&cache.mlp.output.column(0));
            let h = batch_taps(f0.view(), j, self.sigma, self.d);
            pass.push(remaining.clone());
            remaining -= &h;
            taps.push(h);
            caches.push(cache);
        }
        FilterBankCache {
            x: x.clone(),
            f0,
            taps,
            pass,
            branches: caches,
        }
    }

    /// Backpropagates `dL/df0` (`B x J`); returns `dL/dx`.
    pub fn backward(&mut self, cache: &FilterBankCache, grad_f0: &Array2<f64>) -> Array2<f64> {
        let mut grad_x = Array2::zeros(cache.x.raw_dim());
        // sum of dL/dx'_j over branches processed so far (all j' > current)
        let mut later = Array2::<f64>::zeros(cache.x.raw_dim());
        for j in (0..self.branches.len()).rev() {
            // dL/dh_j = -later . x
            let grad_h = -(&later * &cache.x);
            let via_taps = taps_center_grad(&cache.taps[j], cache.f0.view(), j, &grad_h, self.sigma);
            let gf = (&grad_f0.column(j) + &via_taps).insert_axis(Axis(1));
            let g_input = self.branches[j].backward(&cache.branches[j], &gf);
            grad_x += &(&g_input * &cache.pass[j]);
            later += &g_input;
        }
        grad_x
    }

    /// Single-signal convenience wrapper around [`FilterBank::forward`].
    pub fn forward_one(&self, spectrum: &Spectrum) -> Result<FilterBankOutput> {
        ensure_len(self.d, spectrum.len())?;
        let x = Array2::from_shape_vec((1, self.d), spectrum.coefficients().to_vec())
            .expect("shape checked");
        let cache = self.forward(&x);
        let residuals = cache
            .branches
            .iter()
            .map(|c| Spectrum::new(c.input.row(0).to_vec()))
            .collect::<Result<Vec<_>>>()?;
        let filtered = cache
            .taps
            .iter()
            .map(|h| Spectrum::new((&h.row(0) * &x.row(0)).to_vec()))
            .collect::<Result<Vec<_>>>()?;
        Ok(FilterBankOutput {
            f0: cache.f0.row(0).to_vec(),
            residuals,
            filtered,
        })
    }
}

impl Parameters for FilterBank {
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64], &mut [f64])) {
        for (j, b) in self.branches.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("branch{j}")), f);
        }
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64])) {
        for (j, b) in self.branches.iter().enumerate() {
            b.visit(&join(prefix, &format!("branch{j}")), f);
        }
    }
}

/// MLP emitting `2K` values split into mean and log-variance.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianEncoder {
    pub mlp: Mlp,
    k: usize,
}

pub struct EncoderCache {
    mlp: MlpCache,
    pub mean: Array2<f64>,
    /// Clamped log-variance.
    pub log_var: Array2<f64>,
}

impl GaussianEncoder {
    fn new<R: Rng>(input: usize, hidden: &[usize], k: usize, leak: f64, rng: &mut R) -> Self {
        Self {
            mlp: Mlp::new(input, hidden, 2 * k, OutputActivation::Identity, rng).with_leak(leak),
            k,
        }
    }

    pub fn forward(&self, x: Array2<f64>) -> EncoderCache {
        let mlp = self.mlp.forward(x);
        let mean = mlp.output.slice(s![.., ..self.k]).to_owned();
        let log_var = mlp.output.slice(s![.., self.k..]).mapv(clamp_log_var);
        EncoderCache { mlp, mean, log_var }
    }

    pub fn backward(
        &mut self,
        cache: &EncoderCache,
        grad_mean: &Array2<f64>,
        grad_log_var: &Array2<f64>,
    ) -> Array2<f64> {
        let mut g = Array2::zeros(cache.mlp.output.raw_dim());
        g.slice_mut(s![.., ..self.k]).assign(grad_mean);
        let raw = cache.mlp.output.slice(s![.., self.k..]);
        let mut glv = grad_log_var.clone();
        glv.zip_mut_with(&raw, |g, &v| {
            if !(LOG_VAR_MIN..=LOG_VAR_MAX).contains(&v) {
                *g = 0.0
            }
        });
        g.slice_mut(s![.., self.k..]).assign(&glv);
        self.mlp.backward(&cache.mlp, &g)
    }
}

/// Attentive decoder: `z -> f0_hat -> sum_j h(f0_hat_j) . p_X`, then
/// `(x_filt, z) -> x_hat`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentiveDecoder {
    pub f0_net: Mlp,
    pub out_net: Mlp,
    periodogram: Array1<f64>,
    sigma: f64,
}

pub struct AttentiveCache {
    f0_net: MlpCache,
    taps: Vec<Array2<f64>>,
    pub x_filt: Array2<f64>,
    out_net: MlpCache,
}

impl AttentiveCache {
    pub fn f0_hat(&self) -> &Array2<f64> {
        &self.f0_net.output
    }

    pub fn output(&self) -> &Array2<f64> {
        &self.out_net.output
    }
}

impl AttentiveDecoder {
    fn new<R: Rng>(config: &ModelConfig, periodogram: &Periodogram, rng: &mut R) -> Self {
        let f0_net = Mlp::new(
            config.k,
            &config.attentive_f0_hidden,
            config.j,
            OutputActivation::Sigmoid,
            rng,
        ).with_leak(config.relu_leak);
        let out_net = Mlp::new(
            config.d + config.k,
            &config.attentive_out_hidden,
            config.d,
            OutputActivation::Identity,
            rng,
        ).with_leak(config.relu_leak);
        Self {
            f0_net,
            out_net,
            periodogram: Array1::from(periodogram.values().to_vec()),
            sigma: config.sigma,
        }
    }

    pub fn periodogram(&self) -> &Array1<f64> {
        &self.periodogram
    }

    pub fn forward(&self, z: &Array2<f64>) -> AttentiveCache {
        let d = self.periodogram.len();
        let f0_net = self.f0_net.forward(z.clone());
        let f0_hat = &f0_net.output;
        let mut x_filt = Array2::zeros((z.nrows(), d));
        let mut taps = Vec::with_capacity(f0_hat.ncols());
        for j in 0..f0_hat.ncols() {
            let h = batch_taps(f0_hat.view(), j, self.sigma, d);
            x_filt += &(&h * &self.periodogram);
            taps.push(h);
        }
        let input = ndarray::concatenate(Axis(1), &[x_filt.view(), z.view()]).unwrap();
        let out_net = self.out_net.forward(input);
        AttentiveCache {
            f0_net,
            taps,
            x_filt,
            out_net,
        }
    }

    pub fn backward(&mut self, cache: &AttentiveCache, grad_out: &Array2<f64>) -> Array2<f64> {
        let d = self.periodogram.len();
        let g_in = self.out_net.backward(&cache.out_net, grad_out);
        let g_filt = g_in.slice(s![.., ..d]).to_owned() * &self.periodogram;
        let mut g_z = g_in.slice(s![.., d..]).to_owned();
        let f0_hat = cache.f0_hat();
        let mut g_f0 = Array2::zeros(f0_hat.raw_dim());
        for j in 0..f0_hat.ncols() {
            let gj = taps_center_grad(&cache.taps[j], f0_hat.view(), j, &g_filt, self.sigma);
            g_f0.column_mut(j).assign(&gj);
        }
        g_z += &self.f0_net.backward(&cache.f0_net, &g_f0);
        g_z
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Decoder {
    Vanilla(Mlp),
    Attentive(AttentiveDecoder),
}

enum DecoderCache {
    Vanilla(MlpCache),
    Attentive(AttentiveCache),
}

impl DecoderCache {
    fn output(&self) -> &Array2<f64> {
        match self {
            DecoderCache::Vanilla(c) => &c.output,
            DecoderCache::Attentive(c) => c.output(),
        }
    }
}

impl Decoder {
    fn forward(&self, z: &Array2<f64>) -> DecoderCache {
        match self {
            Decoder::Vanilla(mlp) => DecoderCache::Vanilla(mlp.forward(z.clone())),
            Decoder::Attentive(dec) => DecoderCache::Attentive(dec.forward(z)),
        }
    }

    fn backward(&mut self, cache: &DecoderCache, grad: &Array2<f64>) -> Array2<f64> {
        match (self, cache) {
            (Decoder::Vanilla(mlp), DecoderCache::Vanilla(c)) => mlp.backward(c, grad),
            (Decoder::Attentive(dec), DecoderCache::Attentive(c)) => dec.backward(c, grad),
            _ => unreachable!("decoder cache kind mismatch"),
        }
    }

    fn last_layer_mut(&mut self) -> &mut crate::nn::Linear {
        match self {
            Decoder::Vanilla(mlp) => mlp.last_layer_mut(),
            Decoder::Attentive(dec) => dec.out_net.last_layer_mut(),
        }
    }
}

impl Parameters for Decoder {
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64], &mut [f64])) {
        match self {
            Decoder::Vanilla(mlp) => mlp.visit_mut(prefix, f),
            Decoder::Attentive(dec) => {
                dec.f0_net.visit_mut(&join(prefix, "f0_net"), f);
                dec.out_net.visit_mut(&join(prefix, "out_net"), f);
            }
        }
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64])) {
        match self {
            Decoder::Vanilla(mlp) => mlp.visit(prefix, f),
            Decoder::Attentive(dec) => {
                dec.f0_net.visit(&join(prefix, "f0_net"), f);
                dec.out_net.visit(&join(prefix, "out_net"), f);
            }
        }
    }
}

/// Per-row results of a forward pass in evaluation mode.
#[derive(Debug, Clone)]
pub struct Evaluation {
    /// `B x J`; `None` for the baseline VAE.
    pub f0: Option<Array2<f64>>,
    pub mean: Array2<f64>,
    pub log_var: Array2<f64>,
    pub z: Array2<f64>,
    pub x_hat: Array2<f64>,
    pub recon_loglik: Array1<f64>,
    pub kl: Array1<f64>,
}

/// Batch totals returned by a training step.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BatchTerms {
    /// Mean negative ELBO over the batch (the minimised loss).
    pub loss: f64,
    pub recon_loglik_sum: f64,
    pub kl_sum: f64,
    pub rows: usize,
}

/// Shared loss head: Gaussian reconstruction and KL, their gradients, and
/// the reparameterisation.
struct LossGrads {
    terms: BatchTerms,
    grad_xhat: Array2<f64>,
}

fn sample_z(mean: &Array2<f64>, log_var: &Array2<f64>, noise: &Array2<f64>) -> Array2<f64> {
    mean + &(log_var.mapv(|v| (0.5 * v).exp()) * noise)
}

fn row_kl(mean: &Array2<f64>, log_var: &Array2<f64>) -> Array1<f64> {
    let per = mean.mapv(|m| m * m) + log_var.mapv(f64::exp) - 1.0 - log_var;
    per.sum_axis(Axis(1)) * 0.5
}

fn row_loglik(x: &Array2<f64>, x_hat: &Array2<f64>, nu: f64) -> Array1<f64> {
    let d = x.ncols() as f64;
    let sq = (x - x_hat).mapv(|v| v * v).sum_axis(Axis(1));
    sq.mapv(|s| -s / (2.0 * nu) - 0.5 * d * (2.0 * PI * nu).ln())
}

fn loss_head(x: &Array2<f64>, x_hat: &Array2<f64>, mean: &Array2<f64>, log_var: &Array2<f64>, nu: f64) -> LossGrads {
    let b = x.nrows() as f64;
    let ll = row_loglik(x, x_hat, nu);
    let kl = row_kl(mean, log_var);
    let recon_sum = ll.sum();
    let kl_sum = kl.sum();
    LossGrads {
        terms: BatchTerms {
            loss: (kl_sum - recon_sum) / b,
            recon_loglik_sum: recon_sum,
            kl_sum,
            rows: x.nrows(),
        },
        grad_xhat: (x_hat - x) / (nu * b),
    }
}

/// Gradients wrt (mean, clamped log_var) given `dL/dz` and the KL term.
fn latent_grads(
    mean: &Array2<f64>,
    log_var: &Array2<f64>,
    noise: &Array2<f64>,
    grad_z: &Array2<f64>,
    batch: f64,
    kl_weight: f64,
) -> (Array2<f64>, Array2<f64>) {
    let std = log_var.mapv(|v| (0.5 * v).exp());
    let w = kl_weight / batch;
    let grad_mean = grad_z + &(mean * w);
    let grad_lv = grad_z * noise * &std * 0.5 + &(log_var.mapv(|v| 0.5 * (v.exp() - 1.0)) * w);
    (grad_mean, grad_lv)
}

/// Operations shared by trainable VAE variants.
pub trait VaeModel: Parameters + Clone + Send + Sync {
    fn config(&self) -> &ModelConfig;

    /// Zeroes gradients, runs forward and backward on a batch and returns
    /// the loss terms. `noise` is `B x K` standard normal.
    fn train_step(&mut self, x: &Array2<f64>, noise: &Array2<f64>) -> BatchTerms {
        self.train_step_weighted(x, noise, 1.0)
    }

    /// As [`VaeModel::train_step`], with the KL gradient scaled by
    /// `kl_weight`. The returned loss is always the unweighted negative ELBO.
    fn train_step_weighted(&mut self, x: &Array2<f64>, noise: &Array2<f64>, kl_weight: f64) -> BatchTerms;

    /// Forward pass without touching gradients.
    fn evaluate(&self, x: &Array2<f64>, noise: &Array2<f64>) -> Evaluation;

    fn to_checkpoint(&self) -> Checkpoint;
}

/// Filter bank + Gaussian encoder on `f0` + vanilla or attentive decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct IsvaeModel {
    config: ModelConfig,
    pub filter_bank: FilterBank,
    pub encoder: GaussianEncoder,
    pub decoder: Decoder,
}

impl IsvaeModel {
    /// The attentive decoder needs the training-set periodogram.
    pub fn new<R: Rng>(
        config: ModelConfig,
        periodogram: Option<&Periodogram>,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let filter_bank = FilterBank::new(&config, rng);
        let encoder = GaussianEncoder::new(config.j, &config.encoder_hidden, config.k, config.relu_leak, rng);
        let decoder = match config.decoder {
            DecoderKind::Vanilla => Decoder::Vanilla(Mlp::new(
                config.k,
                &config.decoder_hidden,
                config.d,
                OutputActivation::Identity,
                rng,
            ).with_leak(config.relu_leak)),
            DecoderKind::Attentive => {
                let p = periodogram.ok_or_else(|| {
                    Error::Config("the attentive decoder requires a periodogram".into())
                })?;
                ensure_len(config.d, p.len())?;
                Decoder::Attentive(AttentiveDecoder::new(&config, p, rng))
            }
        };
        Ok(Self {
            config,
            filter_bank,
            encoder,
            decoder,
        })
    }

    pub fn periodogram(&self) -> Option<&Array1<f64>> {
        match &self.decoder {
            Decoder::Attentive(dec) => Some(dec.periodogram()),
            Decoder::Vanilla(_) => None,
        }
    }

    /// Zeroes the last encoder and decoder layers.
    pub fn zero_output_layers(&mut self) {
        self.encoder.mlp.last_layer_mut().zero_weights();
        self.decoder.last_layer_mut().zero_weights();
    }

    pub fn filter_bank_forward(&self, spectrum: &Spectrum) -> Result<FilterBankOutput> {
        self.filter_bank.forward_one(spectrum)
    }

    pub fn encode(&self, f0: &[f64]) -> Result<GaussianPosterior> {
        ensure_len(self.config.j, f0.len())?;
        let x = Array2::from_shape_vec((1, f0.len()), f0.to_vec()).unwrap();
        let c = self.encoder.forward(x);
        Ok(GaussianPosterior {
            mean: c.mean.row(0).to_vec(),
            log_var: c.log_var.row(0).to_vec(),
        })
    }

    pub fn decode_vanilla(&self, z: &[f64]) -> Result<Vec<f64>> {
        ensure_len(self.config.k, z.len())?;
        match &self.decoder {
            Decoder::Vanilla(mlp) => {
                let z = Array2::from_shape_vec((1, z.len()), z.to_vec()).unwrap();
                Ok(mlp.forward(z).output.row(0).to_vec())
            }
            Decoder::Attentive(_) => Err(Error::Config("model uses the attentive decoder".into())),
        }
    }

    /// Returns `(x_hat, f0_hat)`.
    pub fn decode_attentive(&self, z: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        ensure_len(self.config.k, z.len())?;
        match &self.decoder {
            Decoder::Attentive(dec) => {
                let z = Array2::from_shape_vec((1, z.len()), z.to_vec()).unwrap();
                let c = dec.forward(&z);
                Ok((c.output().row(0).to_vec(), c.f0_hat().row(0).to_vec()))
            }
            Decoder::Vanilla(_) => Err(Error::Config("model uses the vanilla decoder".into())),
        }
    }

    /// Centre frequencies for every row of `x`.
    pub fn f0(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        ensure_len(self.config.d, x.ncols())?;
        Ok(self.filter_bank.forward(x).f0)
    }
}

impl Parameters for IsvaeModel {
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64], &mut [f64])) {
        self.filter_bank.visit_mut(&join(prefix, "filter_bank"), f);
        self.encoder.mlp.visit_mut(&join(prefix, "encoder"), f);
        self.decoder.visit_mut(&join(prefix, "decoder"), f);
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64])) {
        self.filter_bank.visit(&join(prefix, "filter_bank"), f);
        self.encoder.mlp.visit(&join(prefix, "encoder"), f);
        self.decoder.visit(&join(prefix, "decoder"), f);
    }
}

impl VaeModel for IsvaeModel {
    fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn train_step_weighted(&mut self, x: &Array2<f64>, noise: &Array2<f64>, kl_weight: f64) -> BatchTerms {
        self.zero_grad();
        let fb = self.filter_bank.forward(x);
        let enc = self.encoder.forward(fb.f0.clone());
        let z = sample_z(&enc.mean, &enc.log_var, noise);
        let dec = self.decoder.forward(&z);
        let head = loss_head(x, dec.output(), &enc.mean, &enc.log_var, self.config.nu);
        let grad_z = self.decoder.backward(&dec, &head.grad_xhat);
        let (gm, glv) = latent_grads(&enc.mean, &enc.log_var, noise, &grad_z, x.nrows() as f64, kl_weight);
        let grad_f0 = self.encoder.backward(&enc, &gm, &glv);
        self.filter_bank.backward(&fb, &grad_f0);
        head.terms
    }

    fn evaluate(&self, x: &Array2<f64>, noise: &Array2<f64>) -> Evaluation {
        let fb = self.filter_bank.forward(x);
        let enc = self.encoder.forward(fb.f0.clone());
        let z = sample_z(&enc.mean, &enc.log_var, noise);
        let dec = self.decoder.forward(&z);
        let x_hat = dec.output().clone();
        Evaluation {
            recon_loglik: row_loglik(x, &x_hat, self.config.nu),
            kl: row_kl(&enc.mean, &enc.log_var),
            f0: Some(fb.f0),
            mean: enc.mean,
            log_var: enc.log_var,
            z,
            x_hat,
        }
    }

    fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(
            ModelKind::Isvae,
            &self.config,
            self,
            self.periodogram().map(|p| p.to_vec()),
        )
    }
}

/// Baseline VAE: the encoder sees the full spectrum.
#[derive(Debug, Clone, PartialEq)]
pub struct VanillaVae {
    config: ModelConfig,
    pub encoder: GaussianEncoder,
    pub decoder: Mlp,
}

impl VanillaVae {
    pub fn new<R: Rng>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let encoder = GaussianEncoder::new(config.d, &config.vae_encoder_hidden, config.k, config.relu_leak, rng);
        let decoder = Mlp::new(
            config.k,
            &config.decoder_hidden,
            config.d,
            OutputActivation::Identity,
            rng,
        ).with_leak(config.relu_leak);
        Ok(Self {
            config,
            encoder,
            decoder,
        })
    }

    /// Returns `(x_hat, posterior)` using `noise` for the latent sample.
    pub fn forward(&self, x: &Spectrum, noise: &[f64]) -> Result<(Vec<f64>, GaussianPosterior)> {
        ensure_len(self.config.d, x.len())?;
        ensure_len(self.config.k, noise.len())?;
        let xm = Array2::from_shape_vec((1, x.len()), x.coefficients().to_vec()).unwrap();
        let nm = Array2::from_shape_vec((1, noise.len()), noise.to_vec()).unwrap();
        let e = self.evaluate(&xm, &nm);
        Ok((
            e.x_hat.row(0).to_vec(),
            GaussianPosterior {
                mean: e.mean.row(0).to_vec(),
                log_var: e.log_var.row(0).to_vec(),
            },
        ))
    }
}

impl Parameters for VanillaVae {
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64], &mut [f64])) {
        self.encoder.mlp.visit_mut(&join(prefix, "encoder"), f);
        self.decoder.visit_mut(&join(prefix, "decoder"), f);
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64])) {
        self.encoder.mlp.visit(&join(prefix, "encoder"), f);
        self.decoder.visit(&join(prefix, "decoder"), f);
    }
}

impl VaeModel for VanillaVae {
    fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn train_step_weighted(&mut self, x: &Array2<f64>, noise: &Array2<f64>, kl_weight: f64) -> BatchTerms {
        self.zero_grad();
        let enc = self.encoder.forward(x.clone());
        let z = sample_z(&enc.mean, &enc.log_var, noise);
        let dec = self.decoder.forward(z);
        let head = loss_head(x, &dec.output, &enc.mean, &enc.log_var, self.config.nu);
        let grad_z = self.decoder.backward(&dec, &head.grad_xhat);
        let (gm, glv) = latent_grads(&enc.mean, &enc.log_var, noise, &grad_z, x.nrows() as f64, kl_weight);
        self.encoder.backward(&enc, &gm, &glv);
        head.terms
    }

    fn evaluate(&self, x: &Array2<f64>, noise: &Array2<f64>) -> Evaluation {
        let enc = self.encoder.forward(x.clone());
        let z = sample_z(&enc.mean, &enc.log_var, noise);
        let x_hat = self.decoder.forward(z.clone()).output;
        Evaluation {
            recon_loglik: row_loglik(x, &x_hat, self.config.nu),
            kl: row_kl(&enc.mean, &enc.log_var),
            f0: None,
            mean: enc.mean,
            log_var: enc.log_var,
            z,
            x_hat,
        }
    }

    fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(ModelKind::Vae, &self.config, self, None)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Isvae,
    Vae,
}

/// Named flat parameter arrays plus the configuration that shaped them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub kind: ModelKind,
    pub config: ModelConfig,
    pub params: BTreeMap<String, Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub periodogram: Option<Vec<f64>>,
}

impl Checkpoint {
    fn capture<P: Parameters + ?Sized>(
        kind: ModelKind,
        config: &ModelConfig,
        model: &P,
        periodogram: Option<Vec<f64>>,
    ) -> Self {
        let mut params = BTreeMap::new();
        model.visit("", &mut |name, v| {
            params.insert(name.to_string(), v.to_vec());
        });
        Self {
            kind,
            config: config.clone(),
            params,
            periodogram,
        }
    }

    fn restore<P: Parameters + ?Sized>(&self, model: &mut P) -> Result<()> {
        let mut missing = None;
        let mut seen = 0;
        model.visit_mut("", &mut |name, v, _| match self.params.get(name) {
            Some(src) if src.len() == v.len() => {
                v.copy_from_slice(src);
                seen += 1;
            }
            _ => missing = Some(name.to_string()),
        });
        if let Some(name) = missing {
            return Err(Error::validation(format!(
                "checkpoint is missing or mis-sizes parameter `{name}`"
            )));
        }
        if seen != self.params.len() {
            return Err(Error::validation("checkpoint has unexpected extra parameters"));
        }
        Ok(())
    }

    pub fn to_isvae(&self) -> Result<IsvaeModel> {
        if self.kind != ModelKind::Isvae {
            return Err(Error::validation("checkpoint does not hold an ISVAE model"));
        }
        let p = self
            .periodogram
            .clone()
            .map(Periodogram::from_values)
            .transpose()?;
        // Initial values are overwritten by `restore`.
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut model = IsvaeModel::new(self.config.clone(), p.as_ref(), &mut rng)?;
        self.restore(&mut model)?;
        Ok(model)
    }

    pub fn to_vae(&self) -> Result<VanillaVae> {
        if self.kind != ModelKind::Vae {
            return Err(Error::validation("checkpoint does not hold a baseline VAE"));
        }
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut model = VanillaVae::new(self.config.clone(), &mut rng)?;
        self.restore(&mut model)?;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        serde_json::to_writer(std::io::BufWriter::new(file), self)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_reader(std::io::BufReader::new(file))?)
    }
}
