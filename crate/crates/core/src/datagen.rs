//! Datasets: the synthetic sinusoid-mixture generator, CSV ingestion of
//! pre-windowed signals, standard scaling and train/val/test splitting.

use std::f64::consts::PI;
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_len, Error, Result};
use crate::spectral::DctPlan;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Time,
    Spectrum,
}

/// `N` signals of common length `D`, optionally labelled.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub signals: Array2<f64>,
    pub labels: Option<Vec<i64>>,
    pub domain: Domain,
    pub name: String,
}

impl Dataset {
    pub fn new(
        signals: Array2<f64>,
        labels: Option<Vec<i64>>,
        domain: Domain,
        name: impl Into<String>,
    ) -> Result<Self> {
        if signals.nrows() == 0 {
            return Err(Error::validation("dataset must contain at least one signal"));
        }
        if let Some(l) = &labels {
            ensure_len(signals.nrows(), l.len())?;
            if l.iter().any(|v| *v < 0) {
                return Err(Error::validation("labels must be nonnegative integers"));
            }
        }
        if signals.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("dataset contains non-finite values"));
        }
        Ok(Self {
            signals,
            labels,
            domain,
            name: name.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.signals.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.signals.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.signals.ncols()
    }

    /// Number of distinct label values, if labelled.
    pub fn n_classes(&self) -> Option<usize> {
        self.labels.as_ref().map(|l| {
            let mut v = l.clone();
            v.sort_unstable();
            v.dedup();
            v.len()
        })
    }

    /// Rows at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        Dataset {
            signals: self.signals.select(Axis(0), indices),
            labels: self
                .labels
                .as_ref()
                .map(|l| indices.iter().map(|&i| l[i]).collect()),
            domain: self.domain,
            name: self.name.clone(),
        }
    }

    /// Reads `x0,...,x{D-1}[,label]` rows.
    pub fn read_csv(path: impl AsRef<Path>, domain: Domain) -> Result<Dataset> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut reader = csv::Reader::from_reader(file);
        let headers = reader.headers()?.clone();
        let has_label = headers.iter().last() == Some("label");
        let d = headers.len() - usize::from(has_label);
        for (i, h) in headers.iter().take(d).enumerate() {
            if h != format!("x{i}") {
                return Err(Error::validation(format!(
                    "unexpected column `{h}` at position {i}, expected `x{i}`"
                )));
            }
        }
        let mut values = Vec::new();
        let mut labels = Vec::new();
        let mut n = 0;
        for record in reader.records() {
            let record = record?;
            ensure_len(headers.len(), record.len())?;
            for field in record.iter().take(d) {
                let v: f64 = field.trim().parse().map_err(|_| {
                    Error::validation(format!("row {n}: `{field}` is not a number"))
                })?;
                values.push(v);
            }
            if has_label {
                let field = record.get(d).unwrap_or_default().trim();
                let l: i64 = field.parse().map_err(|_| {
                    Error::validation(format!("row {n}: label `{field}` is not an integer"))
                })?;
                labels.push(l);
            }
            n += 1;
        }
        let signals = Array2::from_shape_vec((n, d), values)
            .map_err(|e| Error::validation(e.to_string()))?;
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        Dataset::new(signals, has_label.then_some(labels), domain, name)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path)?;
        let mut header: Vec<String> = (0..self.dim()).map(|i| format!("x{i}")).collect();
        if self.labels.is_some() {
            header.push("label".into());
        }
        w.write_record(&header)?;
        for (i, row) in self.signals.rows().into_iter().enumerate() {
            let mut rec: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            if let Some(l) = &self.labels {
                rec.push(l[i].to_string());
            }
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

/// Frequency components (Hz) of the eight synthetic clusters.
pub const SYNTHETIC_CLUSTER_FREQS: [&[f64]; 8] = [
    &[80.0, 130.0, 495.0],
    &[180.0, 390.0, 596.0],
    &[80.0, 130.0, 230.0, 390.0],
    &[130.0, 230.0, 430.0, 530.0],
    &[80.0, 180.0, 315.0, 495.0],
    &[230.0, 390.0, 495.0, 596.0],
    &[180.0, 230.0, 430.0, 530.0],
    &[80.0, 315.0, 495.0, 596.0],
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub n_signals: usize,
    pub length_d: usize,
    pub sampling_freq: f64,
    pub cluster_freqs: Vec<Vec<f64>>,
    pub noise_mean: f64,
    /// Variance (not standard deviation) of the additive Gaussian noise.
    pub noise_var: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_signals: 1000,
            length_d: 600,
            sampling_freq: 600.0,
            cluster_freqs: SYNTHETIC_CLUSTER_FREQS.iter().map(|f| f.to_vec()).collect(),
            noise_mean: 0.05,
            noise_var: 0.25,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let c = self.cluster_freqs.len();
        if c == 0 {
            return Err(Error::validation("at least one cluster is required"));
        }
        if self.cluster_freqs.iter().any(|f| f.is_empty()) {
            return Err(Error::validation("every cluster needs a frequency"));
        }
        if self.n_signals == 0 || self.n_signals % c != 0 {
            return Err(Error::validation(format!(
                "n_signals ({}) must be a positive multiple of the cluster count ({c})",
                self.n_signals
            )));
        }
        if self.length_d < 2 {
            return Err(Error::validation("length_d must be at least 2"));
        }
        if !(self.sampling_freq > 0.0) {
            return Err(Error::validation("sampling_freq must be positive"));
        }
        if !(self.noise_var >= 0.0) || !self.noise_mean.is_finite() {
            return Err(Error::validation("noise parameters must be finite, variance >= 0"));
        }
        Ok(())
    }

    /// Noise-free signal of cluster `c` (zero-based).
    pub fn prototype(&self, cluster: usize) -> Vec<f64> {
        let freqs = &self.cluster_freqs[cluster];
        (0..self.length_d)
            .map(|n| {
                freqs
                    .iter()
                    .map(|f| (2.0 * PI * f * n as f64 / self.sampling_freq).cos())
                    .sum()
            })
            .collect()
    }
}

/// Generates `n_signals` labelled time-domain signals, cluster-major order.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let n_clusters = spec.cluster_freqs.len();
    let per_cluster = spec.n_signals / n_clusters;
    let d = spec.length_d;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(spec.noise_mean, spec.noise_var.sqrt())
        .map_err(|e| Error::validation(e.to_string()))?;

    let mut signals = Array2::zeros((spec.n_signals, d));
    let mut labels = Vec::with_capacity(spec.n_signals);
    for c in 0..n_clusters {
        let proto = spec.prototype(c);
        for m in 0..per_cluster {
            let mut row = signals.row_mut(c * per_cluster + m);
            for (n, v) in row.iter_mut().enumerate() {
                *v = proto[n] + noise.sample(&mut rng);
            }
            labels.push(c as i64);
        }
    }
    Dataset::new(signals, Some(labels), Domain::Time, "synthetic")
}

/// Row-wise DCT-II of a time-domain dataset.
pub fn to_spectrum(dataset: &Dataset) -> Result<Dataset> {
    if dataset.domain != Domain::Time {
        return Err(Error::validation("dataset is already in the spectral domain"));
    }
    let plan = DctPlan::new(dataset.dim());
    Ok(Dataset {
        signals: plan.transform_rows(dataset.signals.view())?,
        labels: dataset.labels.clone(),
        domain: Domain::Spectrum,
        name: dataset.name.clone(),
    })
}

pub const STD_FLOOR: f64 = 1e-8;

/// Per-dimension standardisation fitted on a training set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StandardScaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl StandardScaler {
    pub fn fit(train: &Dataset) -> Self {
        let mean: Array1<f64> = train
            .signals
            .mean_axis(Axis(0))
            .expect("datasets are nonempty");
        let std = train
            .signals
            .std_axis(Axis(0), 0.0)
            .mapv(|s| if s < STD_FLOOR { STD_FLOOR } else { s });
        Self {
            mean: mean.to_vec(),
            std: std.to_vec(),
        }
    }

    pub fn transform(&self, data: &Dataset) -> Result<Dataset> {
        ensure_len(self.mean.len(), data.dim())?;
        let mean = Array1::from(self.mean.clone());
        let std = Array1::from(self.std.clone());
        let mut out = data.clone();
        out.signals = (&data.signals - &mean) / &std;
        Ok(out)
    }

    pub fn inverse_transform(&self, data: &Dataset) -> Result<Dataset> {
        ensure_len(self.mean.len(), data.dim())?;
        let mean = Array1::from(self.mean.clone());
        let std = Array1::from(self.std.clone());
        let mut out = data.clone();
        out.signals = &data.signals * &std + &mean;
        Ok(out)
    }
}

/// Fits a scaler on `train` and applies it to `train` and every set in `others`.
pub fn standard_scale(
    train: &Dataset,
    others: &[&Dataset],
) -> Result<(Dataset, Vec<Dataset>, StandardScaler)> {
    let scaler = StandardScaler::fit(train);
    let train_scaled = scaler.transform(train)?;
    let others = others
        .iter()
        .map(|d| scaler.transform(d))
        .collect::<Result<Vec<_>>>()?;
    Ok((train_scaled, others, scaler))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitSpec {
    pub train_frac: f64,
    pub test_frac: f64,
    pub val_frac: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train_frac: 0.75,
            test_frac: 0.125,
            val_frac: 0.125,
            seed: 0,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let fracs = [self.train_frac, self.test_frac, self.val_frac];
        if fracs.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return Err(Error::validation("split fractions must lie in [0, 1]"));
        }
        if (fracs.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::validation("split fractions must sum to 1"));
        }
        Ok(())
    }
}

/// Disjoint index partition produced by [`split_indices`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

pub fn split_indices(n: usize, spec: &SplitSpec) -> Result<SplitIndices> {
    spec.validate()?;
    if n < 8 {
        return Err(Error::validation(format!("need at least 8 signals to split, got {n}")));
    }
    let n_val = (n as f64 * spec.val_frac).round() as usize;
    let n_test = (n as f64 * spec.test_frac).round() as usize;
    if n_val + n_test > n {
        return Err(Error::validation("split fractions leave no room for training"));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    let test = idx[..n_test].to_vec();
    let val = idx[n_test..n_test + n_val].to_vec();
    let train = idx[n_test + n_val..].to_vec();
    Ok(SplitIndices { train, val, test })
}

/// Splits into `(train, val, test)`.
pub fn split(dataset: &Dataset, spec: &SplitSpec) -> Result<(Dataset, Dataset, Dataset)> {
    let s = split_indices(dataset.len(), spec)?;
    Ok((
        dataset.select(&s.train),
        dataset.select(&s.val),
        dataset.select(&s.test),
    ))
}
