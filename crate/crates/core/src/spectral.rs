//! DCT-II transform, Gaussian band filters and spectral summaries.
//!
//! All routines here are pure functions. Filter bandwidths are measured in
//! frequency bins: a filter centred at normalised frequency `f` peaks at bin
//! `f * D` and has standard deviation `sigma` bins.

use std::f64::consts::PI;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_len, Error, Result};

fn check_finite(values: &[f64], what: &str) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        None => Ok(()),
        Some(i) => Err(Error::validation(format!(
            "{what} has a non-finite entry at index {i}"
        ))),
    }
}

/// A uniformly sampled real time series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeSignal(Vec<f64>);

impl TimeSignal {
    pub fn new(samples: Vec<f64>) -> Result<Self> {
        if samples.len() < 2 {
            return Err(Error::validation("a time signal needs at least 2 samples"));
        }
        check_finite(&samples, "time signal")?;
        Ok(Self(samples))
    }

    pub fn samples(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// DCT-II coefficients of a [`TimeSignal`], indexed by bin `0..D`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Spectrum(Vec<f64>);

impl Spectrum {
    pub fn new(coefficients: Vec<f64>) -> Result<Self> {
        check_finite(&coefficients, "spectrum")?;
        Ok(Self(coefficients))
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Unnormalised DCT-II: `X[d] = sum_n x[n] cos(pi/D (n + 1/2) d)`.
pub fn dct2(signal: &TimeSignal) -> Spectrum {
    let plan = DctPlan::new(signal.len());
    Spectrum(plan.transform(signal.samples()))
}

/// Precomputed cosine table for repeated DCT-II of a fixed length.
///
/// The transform is the direct O(D^2) sum expressed as a matrix product,
/// so batches of rows go through a single GEMM.
#[derive(Debug, Clone)]
pub struct DctPlan {
    // basis[[n, d]] = cos(pi/D (n + 1/2) d)
    basis: Array2<f64>,
}

impl DctPlan {
    pub fn new(len: usize) -> Self {
        let scale = PI / len as f64;
        let basis =
            Array2::from_shape_fn((len, len), |(n, d)| (scale * (n as f64 + 0.5) * d as f64).cos());
        Self { basis }
    }

    pub fn len(&self) -> usize {
        self.basis.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.basis.nrows() == 0
    }

    pub fn transform(&self, samples: &[f64]) -> Vec<f64> {
        debug_assert_eq!(samples.len(), self.len());
        let x = ndarray::ArrayView1::from(samples);
        x.dot(&self.basis).to_vec()
    }

    /// Row-wise DCT-II of an `N x D` matrix.
    pub fn transform_rows(&self, rows: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        ensure_len(self.len(), rows.ncols())?;
        Ok(rows.dot(&self.basis))
    }
}

/// A Gaussian band-pass filter with no amplitude parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianFilter {
    center: f64,
    sigma: f64,
    taps: Vec<f64>,
}

impl GaussianFilter {
    pub fn center(&self) -> f64 {
        self.center
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn taps(&self) -> &[f64] {
        &self.taps
    }

    pub fn len(&self) -> usize {
        self.taps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.taps.is_empty()
    }

    /// Builds a filter from arbitrary taps. Used for identity and test filters.
    pub fn from_taps(center: f64, sigma: f64, taps: Vec<f64>) -> Result<Self> {
        check_finite(&taps, "filter taps")?;
        Ok(Self {
            center,
            sigma,
            taps,
        })
    }
}

/// Single Gaussian tap at bin `d`.
#[inline]
pub fn gaussian_tap(bin: usize, center: f64, sigma: f64, len: usize) -> f64 {
    let offset = bin as f64 - center * len as f64;
    (-offset * offset / (2.0 * sigma * sigma)).exp()
}

pub fn gaussian_filter(center: f64, sigma: f64, len: usize) -> Result<GaussianFilter> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::validation(format!("sigma must be > 0, got {sigma}")));
    }
    if !(0.0..=1.0).contains(&center) {
        return Err(Error::validation(format!(
            "center must lie in [0, 1], got {center}"
        )));
    }
    if len < 2 {
        return Err(Error::validation("filter length must be at least 2"));
    }
    let taps = (0..len)
        .map(|d| gaussian_tap(d, center, sigma, len))
        .collect();
    Ok(GaussianFilter {
        center,
        sigma,
        taps,
    })
}

pub fn apply_filter(spectrum: &Spectrum, filter: &GaussianFilter) -> Result<Spectrum> {
    ensure_len(spectrum.len(), filter.len())?;
    Ok(Spectrum(
        spectrum
            .0
            .iter()
            .zip(&filter.taps)
            .map(|(x, h)| x * h)
            .collect(),
    ))
}

/// Energy of the spectrum inside the filter's band, `||h . x||^2`.
pub fn band_energy(spectrum: &Spectrum, filter: &GaussianFilter) -> Result<f64> {
    ensure_len(spectrum.len(), filter.len())?;
    Ok(spectrum
        .0
        .iter()
        .zip(&filter.taps)
        .map(|(x, h)| {
            let y = x * h;
            y * y
        })
        .sum())
}

/// Dataset-averaged squared DCT coefficients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Periodogram(Vec<f64>);

impl Periodogram {
    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn from_values(values: Vec<f64>) -> Result<Self> {
        check_finite(&values, "periodogram")?;
        if values.iter().any(|v| *v < 0.0) {
            return Err(Error::validation("periodogram values must be nonnegative"));
        }
        Ok(Self(values))
    }

    /// Periodogram of the rows of an `N x D` spectral matrix.
    pub fn from_rows(rows: ArrayView2<'_, f64>) -> Result<Self> {
        if rows.nrows() == 0 {
            return Err(Error::validation("periodogram of an empty set"));
        }
        let n = rows.nrows() as f64;
        let values = rows
            .columns()
            .into_iter()
            .map(|col| col.iter().map(|v| v * v).sum::<f64>() / n)
            .collect();
        Ok(Self(values))
    }
}

pub fn mean_periodogram(spectra: &[Spectrum]) -> Result<Periodogram> {
    let first = spectra
        .first()
        .ok_or_else(|| Error::validation("periodogram of an empty set"))?;
    let len = first.len();
    let mut acc = vec![0.0; len];
    for s in spectra {
        ensure_len(len, s.len())?;
        for (a, x) in acc.iter_mut().zip(&s.0) {
            *a += x * x;
        }
    }
    let n = spectra.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    Ok(Periodogram(acc))
}
