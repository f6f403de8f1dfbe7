//! ELBO optimisation, the f0-stability stopping rule and per-epoch traces.

use std::path::Path;

use ndarray::{s, Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::clustering::{kmeans, KMeansParams};
use crate::datagen::{Dataset, Domain};
use crate::error::{ensure_len, Error, Result};
use crate::metrics::v_measure;
use crate::model::{Evaluation, IsvaeModel, VaeModel, VanillaVae};
use crate::nn::Adam;
use crate::spectral::gaussian_tap;

const EVAL_CHUNK: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Window (epochs) over which f0 means must be stable.
    pub stop_window: usize,
    /// Largest tolerated max-min range of any f0 mean inside the window.
    pub stop_tol: f64,
    /// Epochs over which the KL gradient weight ramps linearly from 0 to 1
    /// (0 trains on the plain ELBO throughout).
    pub kl_warmup_epochs: usize,
    /// Multiplier on the learning rate of the filter bank parameters.
    pub filter_bank_lr_scale: f64,
    /// Halt as soon as the stopping rule fires.
    pub stop_early: bool,
    /// Log a progress line every this many epochs (0 disables).
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            batch_size: 64,
            learning_rate: 1e-3,
            seed: 0,
            stop_window: 30,
            stop_tol: 0.005,
            kl_warmup_epochs: 0,
            filter_bank_lr_scale: 1.0,
            stop_early: true,
            log_every: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(self.filter_bank_lr_scale > 0.0) {
            return Err(Error::Config("filter_bank_lr_scale must be positive".into()));
        }
        if self.stop_window < 2 {
            return Err(Error::Config("stop_window must be at least 2".into()));
        }
        Ok(())
    }

    /// KL gradient weight used during `epoch` (1-based).
    pub fn kl_weight(&self, epoch: usize) -> f64 {
        if self.kl_warmup_epochs == 0 {
            1.0
        } else {
            ((epoch - 1) as f64 / self.kl_warmup_epochs as f64).min(1.0)
        }
    }
}

/// Statistics of one completed epoch, measured on a frozen pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub elbo: f64,
    pub recon: f64,
    pub kl: f64,
    /// Dataset mean of each centre frequency (empty for the baseline VAE).
    pub f0_mean: Vec<f64>,
    /// Per-class means, rows ordered as [`TrainingTrace::classes`].
    pub f0_class_mean: Option<Vec<Vec<f64>>>,
    pub val_vscore: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingTrace {
    pub classes: Vec<i64>,
    pub epochs: Vec<EpochRecord>,
}

impl TrainingTrace {
    pub fn len(&self) -> usize {
        self.epochs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.epochs.is_empty()
    }

    /// First epoch (1-based) at which [`should_stop`] holds.
    pub fn stop_epoch(&self, window: usize, tol: f64) -> Option<usize> {
        (window..=self.epochs.len()).find_map(|n| {
            let prefix = TrainingTrace {
                classes: Vec::new(),
                epochs: self.epochs[..n].to_vec(),
            };
            should_stop(&prefix, window, tol).then(|| self.epochs[n - 1].epoch)
        })
    }

    /// Epoch with the highest validation V-score; earliest wins ties.
    pub fn best_val_epoch(&self) -> Option<(usize, f64)> {
        self.epochs
            .iter()
            .filter_map(|e| e.val_vscore.map(|v| (e.epoch, v)))
            .fold(None, |best, cur| match best {
                Some((_, bv)) if bv >= cur.1 => best,
                _ => Some(cur),
            })
    }

    /// `epoch,elbo,recon,kl,f0_mean_0..J-1[,val_vscore]`
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let j = self.epochs.first().map_or(0, |e| e.f0_mean.len());
        let has_val = self.epochs.iter().any(|e| e.val_vscore.is_some());
        let mut w = csv::Writer::from_path(path)?;
        let mut header: Vec<String> = ["epoch", "elbo", "recon", "kl"].map(String::from).to_vec();
        header.extend((0..j).map(|i| format!("f0_mean_{i}")));
        if has_val {
            header.push("val_vscore".into());
        }
        w.write_record(&header)?;
        for e in &self.epochs {
            let mut rec = vec![
                e.epoch.to_string(),
                e.elbo.to_string(),
                e.recon.to_string(),
                e.kl.to_string(),
            ];
            rec.extend(e.f0_mean.iter().map(|v| v.to_string()));
            if has_val {
                rec.push(e.val_vscore.map(|v| v.to_string()).unwrap_or_default());
            }
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    /// `epoch,class,f0_mean_0..J-1`; nothing is written without class data.
    pub fn write_class_csv(&self, path: impl AsRef<Path>) -> Result<bool> {
        let path = path.as_ref();
        if self.classes.is_empty() || self.epochs.iter().all(|e| e.f0_class_mean.is_none()) {
            return Ok(false);
        }
        let j = self.epochs.first().map_or(0, |e| e.f0_mean.len());
        let mut w = csv::Writer::from_path(path)?;
        let mut header: Vec<String> = vec!["epoch".into(), "class".into()];
        header.extend((0..j).map(|i| format!("f0_mean_{i}")));
        w.write_record(&header)?;
        for e in &self.epochs {
            if let Some(rows) = &e.f0_class_mean {
                for (c, row) in self.classes.iter().zip(rows) {
                    let mut rec = vec![e.epoch.to_string(), c.to_string()];
                    rec.extend(row.iter().map(|v| v.to_string()));
                    w.write_record(&rec)?;
                }
            }
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(true)
    }
}

/// True when, over the last `window` epochs, every f0 mean moved by less
/// than `tol` (max minus min). Short traces never stop.
pub fn should_stop(trace: &TrainingTrace, window: usize, tol: f64) -> bool {
    let n = trace.epochs.len();
    if window == 0 || n < window {
        return false;
    }
    let tail = &trace.epochs[n - window..];
    let j = tail[0].f0_mean.len();
    if j == 0 {
        return false;
    }
    (0..j).all(|d| {
        let (lo, hi) = tail.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), e| {
            (lo.min(e.f0_mean[d]), hi.max(e.f0_mean[d]))
        });
        hi - lo < tol
    })
}

/// Result of [`train`]: final parameters, the best-validation snapshot and the trace.
#[derive(Debug, Clone)]
pub struct TrainOutcome<M> {
    pub model: M,
    /// `(epoch, model)` with the highest validation V-score, when validation labels exist.
    pub best: Option<(usize, M)>,
    /// `(epoch, model)` at the first epoch where the stopping rule held.
    pub at_stop: Option<(usize, M)>,
    pub trace: TrainingTrace,
}

impl<M> TrainOutcome<M> {
    /// Best-validation model if any, else the final one.
    pub fn selected(&self) -> &M {
        self.best.as_ref().map_or(&self.model, |(_, m)| m)
    }
}

fn noise_matrix(rng: &mut ChaCha8Rng, rows: usize, k: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, k), || rand::Rng::sample(rng, StandardNormal))
}

/// Forward pass over a whole dataset in chunks, without gradient work.
pub fn evaluate_dataset<M: VaeModel>(model: &M, data: &Array2<f64>, rng: &mut ChaCha8Rng) -> Evaluation {
    let k = model.config().k;
    let mut parts = Vec::new();
    let mut start = 0;
    while start < data.nrows() {
        let end = (start + EVAL_CHUNK).min(data.nrows());
        let x = data.slice(s![start..end, ..]).to_owned();
        let noise = noise_matrix(rng, end - start, k);
        parts.push(model.evaluate(&x, &noise));
        start = end;
    }
    let cat = |f: &dyn Fn(&Evaluation) -> ndarray::ArrayView2<'_, f64>| {
        let views: Vec<_> = parts.iter().map(f).collect();
        ndarray::concatenate(Axis(0), &views).expect("equal widths")
    };
    let cat1 = |f: &dyn Fn(&Evaluation) -> ndarray::ArrayView1<'_, f64>| {
        let views: Vec<_> = parts.iter().map(f).collect();
        ndarray::concatenate(Axis(0), &views).expect("1-d")
    };
    Evaluation {
        f0: parts[0]
            .f0
            .is_some()
            .then(|| cat(&|e| e.f0.as_ref().unwrap().view())),
        mean: cat(&|e| e.mean.view()),
        log_var: cat(&|e| e.log_var.view()),
        z: cat(&|e| e.z.view()),
        x_hat: cat(&|e| e.x_hat.view()),
        recon_loglik: cat1(&|e| e.recon_loglik.view()),
        kl: cat1(&|e| e.kl.view()),
    }
}

fn sorted_classes(labels: &[i64]) -> Vec<i64> {
    let mut c = labels.to_vec();
    c.sort_unstable();
    c.dedup();
    c
}

fn class_means(f0: &Array2<f64>, labels: &[i64], classes: &[i64]) -> Vec<Vec<f64>> {
    classes
        .iter()
        .map(|c| {
            let rows: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == *c).collect();
            let sel = f0.select(Axis(0), &rows);
            sel.mean_axis(Axis(0)).expect("class is nonempty").to_vec()
        })
        .collect()
}

/// V-score of k-means (k = number of label values) on the clustering space
/// of `model` over `data`: f0 for ISVAE, the latent sample otherwise.
pub fn validation_vscore<M: VaeModel>(model: &M, data: &Dataset, seed: u64) -> Result<Option<f64>> {
    let Some(labels) = &data.labels else {
        return Ok(None);
    };
    let k = sorted_classes(labels).len();
    if k < 2 || data.len() < k {
        return Ok(None);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eval = evaluate_dataset(model, &data.signals, &mut rng);
    let feats = eval.f0.unwrap_or(eval.z);
    let pred = kmeans(feats.view(), &KMeansParams::new(k, seed))?.assignment.labels;
    Ok(Some(v_measure(labels, &pred)?))
}

/// Minimises the negative ELBO with Adam on mini-batches of `train_set`.
///
/// After every epoch the model is re-evaluated on the whole training set
/// (fixed evaluation noise) to fill the trace; with a labelled `val_set`
/// the validation V-score is recorded as well and the best epoch is kept.
pub fn train<M: VaeModel>(
    mut model: M,
    config: &TrainConfig,
    train_set: &Dataset,
    val_set: Option<&Dataset>,
) -> Result<TrainOutcome<M>> {
    config.validate()?;
    let d = model.config().d;
    let k = model.config().k;
    for (name, set) in std::iter::once(("train", Some(train_set))).chain([("val", val_set)]) {
        if let Some(set) = set {
            if set.domain != Domain::Spectrum {
                return Err(Error::validation(format!("{name} set must be spectral")));
            }
            ensure_len(d, set.dim())?;
        }
    }

    let classes = train_set.labels.as_deref().map(sorted_classes).unwrap_or_default();
    let mut trace = TrainingTrace {
        classes: classes.clone(),
        epochs: Vec::with_capacity(config.epochs),
    };
    let mut best: Option<(usize, f64, M)> = None;
    let mut at_stop = None;
    let mut opt = Adam::new(config.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 1..=config.epochs {
        let kl_weight = config.kl_weight(epoch);
        order.shuffle(&mut rng);
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let x = train_set.signals.select(Axis(0), chunk);
            let noise = noise_matrix(&mut rng, chunk.len(), k);
            let terms = model.train_step_weighted(&x, &noise, kl_weight);
            if !terms.loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: b,
                    detail: format!(
                        "recon {} kl {}",
                        terms.recon_loglik_sum, terms.kl_sum
                    ),
                });
            }
            let fb_scale = config.filter_bank_lr_scale;
            opt.step_scaled(&mut model, |name| {
                if name.starts_with("filter_bank") {
                    fb_scale
                } else {
                    1.0
                }
            });
        }

        let mut eval_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_e7a1);
        let eval = evaluate_dataset(&model, &train_set.signals, &mut eval_rng);
        let recon = eval.recon_loglik.mean().unwrap_or(0.0);
        let kl = eval.kl.mean().unwrap_or(0.0);
        let (f0_mean, f0_class_mean) = match &eval.f0 {
            Some(f0) => (
                f0.mean_axis(Axis(0)).expect("nonempty").to_vec(),
                train_set
                    .labels
                    .as_deref()
                    .map(|l| class_means(f0, l, &classes)),
            ),
            None => (Vec::new(), None),
        };
        let val_vscore = match val_set {
            Some(v) => validation_vscore(&model, v, config.seed)?,
            None => None,
        };
        if !(recon.is_finite() && kl.is_finite()) {
            return Err(Error::NonFiniteLoss {
                epoch,
                batch: usize::MAX,
                detail: "evaluation pass".into(),
            });
        }
        let record = EpochRecord {
            epoch,
            elbo: recon - kl,
            recon,
            kl,
            f0_mean,
            f0_class_mean,
            val_vscore,
        };
        if config.log_every > 0 && epoch % config.log_every == 0 {
            log::info!(
                "epoch {epoch}: elbo {:.4} recon {:.4} kl {:.4} f0 {:?} val_v {:?}",
                record.elbo,
                record.recon,
                record.kl,
                record.f0_mean,
                record.val_vscore
            );
        }
        if let Some(v) = val_vscore {
            if best.as_ref().map_or(true, |(_, bv, _)| v > *bv) {
                best = Some((epoch, v, model.clone()));
            }
        }
        trace.epochs.push(record);
        if at_stop.is_none() && should_stop(&trace, config.stop_window, config.stop_tol) {
            at_stop = Some((epoch, model.clone()));
            if config.stop_early {
                break;
            }
        }
    }

    Ok(TrainOutcome {
        model,
        best: best.map(|(e, _, m)| (e, m)),
        at_stop,
        trace,
    })
}

/// Whether the latent feature is a posterior sample or the posterior mean.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatentExport {
    #[default]
    Sample,
    Mean,
}

/// Clustering spaces derived from a trained ISVAE.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtractedFeatures {
    /// `N x J`
    pub f0: Array2<f64>,
    /// `N x K`
    pub z: Array2<f64>,
    /// `N x 2J`: f0 followed by the energy of the signal in each band.
    pub extended: Array2<f64>,
}

/// Band energies `|h(f0_j) . x|^2` for every row.
pub fn band_energies(spectra: &Array2<f64>, f0: &Array2<f64>, sigma: f64) -> Array2<f64> {
    let d = spectra.ncols();
    Array2::from_shape_fn((spectra.nrows(), f0.ncols()), |(i, j)| {
        (0..d)
            .map(|bin| {
                let y = gaussian_tap(bin, f0[[i, j]], sigma, d) * spectra[[i, bin]];
                y * y
            })
            .sum()
    })
}

/// Basic, extended and latent features from a frozen model.
pub fn extract_features(
    model: &IsvaeModel,
    dataset: &Dataset,
    seed: u64,
    latent: LatentExport,
) -> Result<ExtractedFeatures> {
    if dataset.domain != Domain::Spectrum {
        return Err(Error::validation("feature extraction needs a spectral dataset"));
    }
    ensure_len(model.config().d, dataset.dim())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eval = evaluate_dataset(model, &dataset.signals, &mut rng);
    let f0 = eval.f0.expect("ISVAE evaluation has f0");
    let energies = band_energies(&dataset.signals, &f0, model.config().sigma);
    let extended = ndarray::concatenate(Axis(1), &[f0.view(), energies.view()]).expect("rows match");
    let z = match latent {
        LatentExport::Sample => eval.z,
        LatentExport::Mean => eval.mean,
    };
    Ok(ExtractedFeatures { f0, z, extended })
}

/// Latent features of the baseline VAE.
pub fn extract_latent(model: &VanillaVae, dataset: &Dataset, seed: u64, latent: LatentExport) -> Result<Array2<f64>> {
    if dataset.domain != Domain::Spectrum {
        return Err(Error::validation("feature extraction needs a spectral dataset"));
    }
    ensure_len(model.config().d, dataset.dim())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eval = evaluate_dataset(model, &dataset.signals, &mut rng);
    Ok(match latent {
        LatentExport::Sample => eval.z,
        LatentExport::Mean => eval.mean,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn record(epoch: usize, f0: Vec<f64>) -> EpochRecord {
        EpochRecord {
            epoch,
            elbo: 0.0,
            recon: 0.0,
            kl: 0.0,
            f0_mean: f0,
            f0_class_mean: None,
            val_vscore: None,
        }
    }

    #[test]
    fn stop_rule() {
        let flat = TrainingTrace {
            classes: vec![],
            epochs: (1..=5).map(|e| record(e, vec![0.3, 0.7])).collect(),
        };
        assert!(should_stop(&flat, 5, 0.005));
        assert!(!should_stop(&flat, 6, 0.005));

        let mut drifting = flat.clone();
        drifting.epochs[2].f0_mean[1] = 0.7 + 0.01;
        assert!(!should_stop(&drifting, 5, 0.005));
        assert!(should_stop(&drifting, 2, 0.005));
        assert_eq!(drifting.stop_epoch(3, 0.005), None);
        assert_eq!(drifting.stop_epoch(2, 0.005), Some(2));

        let mut early = flat.clone();
        early.epochs[0].f0_mean[0] = 0.0;
        assert_eq!(early.stop_epoch(3, 0.005), Some(4));
    }

    #[test]
    fn best_epoch_prefers_earliest_tie() {
        let mut t = TrainingTrace::default();
        for (e, v) in [(1, 0.2), (2, 0.9), (3, 0.9), (4, 0.1)] {
            let mut r = record(e, vec![0.5]);
            r.val_vscore = Some(v);
            t.epochs.push(r);
        }
        assert_eq!(t.best_val_epoch(), Some((2, 0.9)));
    }

    #[test]
    fn zero_epochs_leave_model_untouched() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = ModelConfig {
            d: 12,
            ..ModelConfig::preset(crate::model::ArchitecturePreset::Har, 12, 2, 2)
        };
        let model = IsvaeModel::new(cfg, None, &mut rng).unwrap();
        let data = Dataset::new(
            Array2::from_shape_fn((10, 12), |(i, j)| (i * j) as f64 * 0.1),
            None,
            Domain::Spectrum,
            "t",
        )
        .unwrap();
        let tc = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let out = train(model.clone(), &tc, &data, None).unwrap();
        assert!(out.trace.is_empty());
        assert_eq!(out.model.to_checkpoint(), model.to_checkpoint());
        assert!(out.best.is_none());

        let time = Dataset {
            domain: Domain::Time,
            ..data
        };
        assert!(train(model, &tc, &time, None).is_err());
    }

    #[test]
    fn trace_csv_layout() {
        let dir = tempfile::tempdir().unwrap();
        let mut t = TrainingTrace {
            classes: vec![0, 3],
            epochs: vec![],
        };
        for e in 1..=2 {
            let mut r = record(e, vec![0.25, 0.5]);
            r.f0_class_mean = Some(vec![vec![0.1, 0.2], vec![0.3, 0.4]]);
            r.val_vscore = Some(0.5);
            t.epochs.push(r);
        }
        let p = dir.path().join("trace.csv");
        t.write_csv(&p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("epoch,elbo,recon,kl,f0_mean_0,f0_mean_1,val_vscore\n"));
        let q = dir.path().join("classes.csv");
        assert!(t.write_class_csv(&q).unwrap());
        let text = std::fs::read_to_string(&q).unwrap();
        assert_eq!(text.lines().count(), 1 + 2 * 2);
        assert!(text.contains("\n2,3,0.3,0.4\n"));
    }
}
