//! End-to-end experiment protocol: repeated realizations of
//! split, scale, transform, train, select, extract, cluster and score,
//! aggregated into a results table.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use ndarray::{Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clustering::{kmeans, Clusterer, FeatureMatrix, FeatureSpace, KMeansParams};
use crate::datagen::{
    generate_synthetic, split_indices, standard_scale, to_spectrum, Dataset, Domain, SplitSpec, SyntheticSpec,
};
use crate::error::{Error, Result};
use crate::metrics::{self, MetricReport};
use crate::model::{ArchitecturePreset, DecoderKind, IsvaeModel, ModelConfig, VaeModel, VanillaVae};
use crate::spectral::Periodogram;
use crate::training::{extract_features, extract_latent, train, LatentExport, TrainConfig, TrainOutcome};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synthetic(SyntheticSpec),
    Csv { path: PathBuf, domain: Domain },
}

/// Normalisation applied with training-split statistics before the DCT.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scaling {
    None,
    #[default]
    Standard,
}

/// Optional rescaling of the spectra after the DCT, fitted on the training split.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpectrumScaling {
    #[default]
    None,
    /// Divide every coefficient by one scalar: the standard deviation of all
    /// training coefficients. Keeps the spectral shape.
    GlobalStd,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    /// Keep the epoch with the highest validation V-score (needs labels).
    #[default]
    BestValidation,
    /// Keep the parameters at the end of training.
    Final,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub name: String,
    pub data: DataSource,
    pub split: SplitSpec,
    pub scaling: Scaling,
    pub spectrum_scaling: SpectrumScaling,
    /// Realization `r` uses seed `base_seed + r` for its split, init, training and clustering.
    pub base_seed: u64,
    pub n_realizations: usize,
    /// Realizations for the training-free `raw_time` / `raw_dct` rows.
    pub baseline_realizations: usize,
    pub preset: ArchitecturePreset,
    pub j_values: Vec<usize>,
    pub k: usize,
    /// Overrides the preset bandwidth when set.
    pub sigma: Option<f64>,
    /// Overrides the preset hidden-activation leak when set.
    pub relu_leak: Option<f64>,
    pub decoders: Vec<DecoderKind>,
    pub include_vae: bool,
    pub include_raw: bool,
    /// Spaces scored for every ISVAE variant.
    pub feature_spaces: Vec<FeatureSpace>,
    pub clusterers: Vec<Clusterer>,
    pub train: TrainConfig,
    pub selection: Selection,
    pub latent_export: LatentExport,
    /// Cluster count for methods without an explicit `k`; defaults to the number of label values.
    pub n_clusters: Option<usize>,
    pub output_dir: PathBuf,
    /// Worker threads for realizations (0 = rayon default).
    pub threads: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "experiment".into(),
            data: DataSource::Synthetic(SyntheticSpec::default()),
            split: SplitSpec::default(),
            scaling: Scaling::Standard,
            spectrum_scaling: SpectrumScaling::None,
            base_seed: 0,
            n_realizations: 6,
            baseline_realizations: 100,
            preset: ArchitecturePreset::Har,
            j_values: vec![4, 5, 6],
            k: 3,
            sigma: None,
            relu_leak: None,
            decoders: vec![DecoderKind::Vanilla, DecoderKind::Attentive],
            include_vae: true,
            include_raw: true,
            feature_spaces: vec![FeatureSpace::F0, FeatureSpace::F0Extended, FeatureSpace::LatentZ],
            clusterers: vec![Clusterer::kmeans()],
            train: TrainConfig::default(),
            selection: Selection::BestValidation,
            latent_export: LatentExport::Sample,
            n_clusters: None,
            output_dir: PathBuf::from("runs/experiment"),
            threads: 0,
        }
    }
}

impl ExperimentConfig {
    /// The two-filter synthetic setup with a single K-means row per space.
    pub fn synthetic() -> Self {
        Self {
            name: "synthetic".into(),
            scaling: Scaling::None,
            preset: ArchitecturePreset::Synthetic,
            j_values: vec![2],
            k: 2,
            decoders: vec![DecoderKind::Vanilla],
            spectrum_scaling: SpectrumScaling::GlobalStd,
            relu_leak: Some(0.01),
            train: TrainConfig {
                filter_bank_lr_scale: 0.1,
                ..TrainConfig::default()
            },
            output_dir: PathBuf::from("runs/synthetic"),
            ..Self::default()
        }
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.split.validate()?;
        self.train.validate()?;
        if self.n_realizations < 1 {
            return Err(Error::Config("n_realizations must be at least 1".into()));
        }
        if self.clusterers.is_empty() {
            return Err(Error::Config("the clusterer grid is empty".into()));
        }
        let trains_isvae = !self.j_values.is_empty() && !self.decoders.is_empty();
        if trains_isvae && self.feature_spaces.is_empty() {
            return Err(Error::Config("the feature-space grid is empty".into()));
        }
        if !trains_isvae && !self.include_vae && !self.include_raw {
            return Err(Error::Config("no variants to evaluate".into()));
        }
        if self.include_raw && self.baseline_realizations < 1 {
            return Err(Error::Config("baseline_realizations must be at least 1".into()));
        }
        if let Some(s) = self.feature_spaces.iter().find(|s| s.is_raw()) {
            return Err(Error::Config(format!(
                "{} is a baseline row, enable include_raw instead",
                s.as_str()
            )));
        }
        if self.j_values.contains(&0) || self.k == 0 {
            return Err(Error::Config("J and K must be at least 1".into()));
        }
        Ok(())
    }

    /// Model configuration for input dimension `d`, `j` filters and the given decoder.
    pub fn model_config(&self, d: usize, j: usize, decoder: DecoderKind) -> ModelConfig {
        let mut cfg = ModelConfig::preset(self.preset, d, j, self.k).with_decoder(decoder);
        if let Some(s) = self.sigma {
            cfg.sigma = s;
        }
        if let Some(l) = self.relu_leak {
            cfg.relu_leak = l;
        }
        cfg
    }
}

/// Which trained (or untrained) model produced a row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Raw,
    Vae,
    IsvaeVanilla,
    IsvaeAttentive,
}

impl Variant {
    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::Raw => "raw",
            Variant::Vae => "vae",
            Variant::IsvaeVanilla => "isvae_vanilla",
            Variant::IsvaeAttentive => "isvae_attentive",
        }
    }

    /// The ISVAE variant trained with `decoder`.
    pub fn isvae(decoder: DecoderKind) -> Self {
        match decoder {
            DecoderKind::Vanilla => Variant::IsvaeVanilla,
            DecoderKind::Attentive => Variant::IsvaeAttentive,
        }
    }
}

/// Identifies one row of the results table.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RowKey {
    pub variant: Variant,
    pub j: Option<usize>,
    pub feature_space: FeatureSpace,
    pub clusterer: String,
}

/// Test-set scores of one realization for one row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunScore {
    pub realization: usize,
    #[serde(flatten)]
    pub key: RowKey,
    /// Epoch whose parameters were scored (trained variants only).
    pub selected_epoch: Option<usize>,
    pub metrics: MetricReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunFailure {
    pub realization: usize,
    pub variant: Variant,
    pub j: Option<usize>,
    pub feature_space: Option<FeatureSpace>,
    pub clusterer: Option<String>,
    pub message: String,
}

/// Which rows of the full dataset a pipeline stage read.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccessEvent {
    pub realization: usize,
    pub stage: Stage,
    pub rows: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    ScalerFit,
    SpectrumScaleFit,
    Periodogram,
    Training,
    Selection,
    Scoring,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Population standard deviation; 0 for a single value.
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    #[serde(flatten)]
    pub key: RowKey,
    pub n_runs: usize,
    pub v_score: MeanStd,
    pub homogeneity: MeanStd,
    pub completeness: MeanStd,
    pub silhouette: MeanStd,
    pub calinski_harabasz: MeanStd,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ResultsTable {
    pub rows: Vec<ResultRow>,
}

pub const RESULTS_HEADER: [&str; 14] = [
    "variant",
    "J",
    "feature_space",
    "clusterer",
    "v_mean",
    "v_std",
    "h_mean",
    "h_std",
    "c_mean",
    "c_std",
    "sil_mean",
    "sil_std",
    "ch_mean",
    "ch_std",
];

impl ResultsTable {
    /// Groups scores by row key; rows come out in key order.
    pub fn aggregate(scores: &[RunScore]) -> Self {
        let mut groups: BTreeMap<&RowKey, Vec<&MetricReport>> = BTreeMap::new();
        for s in scores {
            groups.entry(&s.key).or_default().push(&s.metrics);
        }
        let rows = groups
            .into_iter()
            .map(|(key, ms)| {
                let col = |f: fn(&MetricReport) -> f64| MeanStd::of(&ms.iter().map(|m| f(m)).collect::<Vec<_>>());
                ResultRow {
                    key: key.clone(),
                    n_runs: ms.len(),
                    v_score: col(|m| m.v_score),
                    homogeneity: col(|m| m.homogeneity),
                    completeness: col(|m| m.completeness),
                    silhouette: col(|m| m.silhouette),
                    calinski_harabasz: col(|m| m.calinski_harabasz),
                }
            })
            .collect();
        Self { rows }
    }

    pub fn row(&self, variant: Variant, j: Option<usize>, space: FeatureSpace, clusterer: &str) -> Option<&ResultRow> {
        self.rows.iter().find(|r| {
            r.key.variant == variant && r.key.j == j && r.key.feature_space == space && r.key.clusterer == clusterer
        })
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(RESULTS_HEADER)?;
        for r in &self.rows {
            let mut rec = vec![
                r.key.variant.as_str().to_string(),
                r.key.j.map(|j| j.to_string()).unwrap_or_default(),
                r.key.feature_space.as_str().to_string(),
                r.key.clusterer.clone(),
            ];
            for m in [&r.v_score, &r.homogeneity, &r.completeness, &r.silhouette, &r.calinski_harabasz] {
                rec.push(m.mean.to_string());
                rec.push(m.std.to_string());
            }
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

/// Everything a run produces besides the files it writes.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExperimentOutput {
    pub table: ResultsTable,
    pub scores: Vec<RunScore>,
    pub failures: Vec<RunFailure>,
    pub audit: Vec<AccessEvent>,
}

/// One realization's prepared partitions.
#[derive(Debug, Clone)]
pub struct Prepared {
    /// Row ids into the full dataset.
    pub rows: crate::datagen::SplitIndices,
    /// Scaled time-domain test rows, when the source is time-domain.
    pub time_test: Option<Dataset>,
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

/// Splits `data` with `seed`, fits scalers on the train rows and converts to spectra.
///
/// `log` receives every stage that reads rows to fit something.
pub fn prepare_splits(cfg: &ExperimentConfig, data: &Dataset, seed: u64, log: &mut dyn FnMut(Stage, &[usize])) -> Result<Prepared> {
    let split = SplitSpec { seed, ..cfg.split.clone() };
    let rows = split_indices(data.len(), &split)?;
    let (train, val, test) = (data.select(&rows.train), data.select(&rows.val), data.select(&rows.test));
    let (train, val, test) = match cfg.scaling {
        Scaling::None => (train, val, test),
        Scaling::Standard => {
            log(Stage::ScalerFit, &rows.train);
            let (train, mut rest, _) = standard_scale(&train, &[&val, &test])?;
            let test = rest.pop().expect("two held-out sets");
            let val = rest.pop().expect("two held-out sets");
            (train, val, test)
        }
    };
    let time_test = (data.domain == Domain::Time).then(|| test.clone());
    let spec = |d: Dataset| match d.domain {
        Domain::Time => to_spectrum(&d),
        Domain::Spectrum => Ok(d),
    };
    let (mut train, mut val, mut test) = (spec(train)?, spec(val)?, spec(test)?);
    if cfg.spectrum_scaling == SpectrumScaling::GlobalStd {
        log(Stage::SpectrumScaleFit, &rows.train);
        let sd = train.signals.std(0.0).max(crate::datagen::STD_FLOOR);
        for d in [&mut train, &mut val, &mut test] {
            d.signals.mapv_inplace(|v| v / sd);
        }
    }
    Ok(Prepared { rows, time_test, train, val, test })
}

struct Ctx<'a> {
    cfg: &'a ExperimentConfig,
    data: &'a Dataset,
    default_k: Option<usize>,
    audit: Mutex<Vec<AccessEvent>>,
}

impl Ctx<'_> {
    fn log(&self, realization: usize, stage: Stage, rows: &[usize]) {
        self.audit.lock().expect("audit lock").push(AccessEvent {
            realization,
            stage,
            rows: rows.to_vec(),
        });
    }

    fn seed(&self, r: usize) -> u64 {
        self.cfg.base_seed.wrapping_add(r as u64)
    }

    fn prepare(&self, r: usize) -> Result<Prepared> {
        prepare_splits(self.cfg, self.data, self.seed(r), &mut |stage, rows| self.log(r, stage, rows))
    }

    fn clusterer_seed(&self, r: usize) -> u64 {
        self.seed(r).wrapping_mul(0x9e37_79b9).wrapping_add(17)
    }

    /// Scores every clusterer on one feature matrix of the test split.
    #[allow(clippy::too_many_arguments)]
    fn score_space(
        &self,
        r: usize,
        variant: Variant,
        j: Option<usize>,
        selected_epoch: Option<usize>,
        space: FeatureSpace,
        features: Array2<f64>,
        prep: &Prepared,
        dir: &Path,
        out: &mut RealizationOutput,
    ) {
        let truth = prep.test.labels.as_deref().expect("labels checked up front");
        self.log(r, Stage::Scoring, &prep.rows.test);
        let tag = match j {
            Some(j) => format!("{}_J{j}", variant.as_str()),
            None => variant.as_str().to_string(),
        };
        let fail = |out: &mut RealizationOutput, clusterer: Option<&str>, e: &Error| {
            log::warn!("realization {r} {tag} {}: {e}", space.as_str());
            out.failures.push(RunFailure {
                realization: r,
                variant,
                j,
                feature_space: Some(space),
                clusterer: clusterer.map(String::from),
                message: e.to_string(),
            });
        };
        if let Err(e) = write_matrix(&dir.join(format!("{tag}_{}.csv", space.as_str())), &features) {
            fail(out, None, &e);
            return;
        }
        let fm = match FeatureMatrix::new(features, space) {
            Ok(fm) => fm,
            Err(e) => return fail(out, None, &e),
        };
        for c in &self.cfg.clusterers {
            let result = c
                .run(&fm, self.default_k, self.clusterer_seed(r))
                .and_then(|a| {
                    a.write_csv(dir.join(format!("{tag}_{}_{}_assign.csv", space.as_str(), c.name())))?;
                    metrics::evaluate(fm.rows.view(), truth, &a.labels)
                });
            match result {
                Ok(metrics) => out.scores.push(RunScore {
                    realization: r,
                    key: RowKey {
                        variant,
                        j,
                        feature_space: space,
                        clusterer: c.name().to_string(),
                    },
                    selected_epoch,
                    metrics,
                }),
                Err(e) => fail(out, Some(c.name()), &e),
            }
        }
    }

    fn train_model<M: VaeModel>(&self, r: usize, model: M, prep: &Prepared) -> Result<(TrainOutcome<M>, M, Option<usize>)> {
        self.log(r, Stage::Training, &prep.rows.train);
        let val = match self.cfg.selection {
            Selection::BestValidation => {
                self.log(r, Stage::Selection, &prep.rows.val);
                Some(&prep.val)
            }
            Selection::Final => None,
        };
        let tc = TrainConfig {
            seed: self.seed(r),
            ..self.cfg.train.clone()
        };
        let outcome = train(model, &tc, &prep.train, val)?;
        let (epoch, chosen) = match (&self.cfg.selection, &outcome.best) {
            (Selection::BestValidation, Some((e, m))) => (Some(*e), m.clone()),
            _ => (outcome.trace.epochs.last().map(|e| e.epoch), outcome.model.clone()),
        };
        Ok((outcome, chosen, epoch))
    }

    fn run_isvae(&self, r: usize, decoder: DecoderKind, j: usize, prep: &Prepared, dir: &Path, out: &mut RealizationOutput) -> Result<()> {
        let variant = Variant::isvae(decoder);
        let mcfg = self.cfg.model_config(prep.train.dim(), j, decoder);
        let periodogram = match decoder {
            DecoderKind::Attentive => {
                self.log(r, Stage::Periodogram, &prep.rows.train);
                Some(Periodogram::from_rows(prep.train.signals.view())?)
            }
            DecoderKind::Vanilla => None,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed(r));
        let model = IsvaeModel::new(mcfg, periodogram.as_ref(), &mut rng)?;
        let (outcome, chosen, epoch) = self.train_model(r, model, prep)?;

        let mdir = dir.join(format!("{}_J{j}", variant.as_str()));
        fs::create_dir_all(&mdir).map_err(|e| Error::io(&mdir, e))?;
        outcome.trace.write_csv(mdir.join("trace.csv"))?;
        outcome.trace.write_class_csv(mdir.join("trace_classes.csv"))?;
        chosen.to_checkpoint().save(mdir.join("checkpoint.json"))?;
        self.write_f0_all(&chosen, prep, &mdir)?;

        let feats = extract_features(&chosen, &prep.test, self.seed(r), self.cfg.latent_export)?;
        for &space in &self.cfg.feature_spaces {
            let m = match space {
                FeatureSpace::F0 => feats.f0.clone(),
                FeatureSpace::F0Extended => feats.extended.clone(),
                FeatureSpace::LatentZ => feats.z.clone(),
                FeatureSpace::RawTime | FeatureSpace::RawDct => unreachable!("rejected by validate"),
            };
            self.score_space(r, variant, Some(j), epoch, space, m, prep, dir, out);
        }
        Ok(())
    }

    /// f0 of every row (all partitions) with K-means labels, for scatter plots.
    fn write_f0_all(&self, model: &IsvaeModel, prep: &Prepared, dir: &Path) -> Result<()> {
        let parts = [("train", &prep.train, &prep.rows.train), ("val", &prep.val, &prep.rows.val), ("test", &prep.test, &prep.rows.test)];
        let f0s: Vec<Array2<f64>> = parts.iter().map(|(_, d, _)| model.f0(&d.signals)).collect::<Result<_>>()?;
        let views: Vec<_> = f0s.iter().map(|a| a.view()).collect();
        let all = ndarray::concatenate(Axis(0), &views).expect("same J");
        let pred = match self.default_k {
            Some(k) if k <= all.nrows() => Some(kmeans(all.view(), &KMeansParams::new(k, self.clusterer_seed(0)))?.assignment.labels),
            _ => None,
        };
        let path = dir.join("f0_all.csv");
        let mut w = csv::Writer::from_path(&path)?;
        let mut header = vec!["index".to_string(), "partition".to_string()];
        header.extend((1..=all.ncols()).map(|i| format!("f_{i}")));
        header.push("true_label".into());
        header.push("pred_label".into());
        w.write_record(&header)?;
        let mut i = 0;
        for (name, d, ids) in parts {
            for (row, &id) in ids.iter().enumerate() {
                let mut rec = vec![id.to_string(), name.to_string()];
                rec.extend(all.row(i).iter().map(|v| v.to_string()));
                rec.push(d.labels.as_ref().map(|l| l[row].to_string()).unwrap_or_default());
                rec.push(pred.as_ref().map(|p| p[i].to_string()).unwrap_or_default());
                w.write_record(&rec)?;
                i += 1;
            }
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        Ok(())
    }

    fn run_vae(&self, r: usize, prep: &Prepared, dir: &Path, out: &mut RealizationOutput) -> Result<()> {
        let j = self.cfg.j_values.first().copied().unwrap_or(1);
        let mcfg = self.cfg.model_config(prep.train.dim(), j, DecoderKind::Vanilla);
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed(r));
        let model = VanillaVae::new(mcfg, &mut rng)?;
        let (outcome, chosen, epoch) = self.train_model(r, model, prep)?;
        let mdir = dir.join(Variant::Vae.as_str());
        fs::create_dir_all(&mdir).map_err(|e| Error::io(&mdir, e))?;
        outcome.trace.write_csv(mdir.join("trace.csv"))?;
        chosen.to_checkpoint().save(mdir.join("checkpoint.json"))?;
        let z = extract_latent(&chosen, &prep.test, self.seed(r), self.cfg.latent_export)?;
        self.score_space(r, Variant::Vae, None, epoch, FeatureSpace::LatentZ, z, prep, dir, out);
        Ok(())
    }

    fn run_raw(&self, r: usize, prep: &Prepared, dir: &Path, out: &mut RealizationOutput) {
        if let Some(t) = &prep.time_test {
            self.score_space(r, Variant::Raw, None, None, FeatureSpace::RawTime, t.signals.clone(), prep, dir, out);
        }
        self.score_space(r, Variant::Raw, None, None, FeatureSpace::RawDct, prep.test.signals.clone(), prep, dir, out);
    }

    fn realization(&self, r: usize) -> RealizationOutput {
        let mut out = RealizationOutput::default();
        let dir = self.cfg.output_dir.join(format!("realization_{r:03}"));
        let fail_all = |out: &mut RealizationOutput, variant, j, e: Error| {
            log::warn!("realization {r} {variant:?} J={j:?} failed: {e}");
            out.failures.push(RunFailure {
                realization: r,
                variant,
                j,
                feature_space: None,
                clusterer: None,
                message: e.to_string(),
            });
        };
        let prep = match fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e)).and_then(|_| self.prepare(r)) {
            Ok(p) => p,
            Err(e) => {
                fail_all(&mut out, Variant::Raw, None, e);
                return out;
            }
        };
        if self.cfg.include_raw && r < self.cfg.baseline_realizations {
            self.run_raw(r, &prep, &dir, &mut out);
        }
        if r < self.cfg.n_realizations {
            if self.cfg.include_vae {
                if let Err(e) = self.run_vae(r, &prep, &dir, &mut out) {
                    fail_all(&mut out, Variant::Vae, None, e);
                }
            }
            for &decoder in &self.cfg.decoders {
                for &j in &self.cfg.j_values {
                    if let Err(e) = self.run_isvae(r, decoder, j, &prep, &dir, &mut out) {
                        fail_all(&mut out, Variant::isvae(decoder), Some(j), e);
                    }
                }
            }
        }
        let json = serde_json::json!({ "realization": r, "scores": out.scores, "failures": out.failures });
        if let Err(e) = write_json(&dir.join("scores.json"), &json) {
            fail_all(&mut out, Variant::Raw, None, e);
        }
        out
    }
}

#[derive(Default)]
struct RealizationOutput {
    scores: Vec<RunScore>,
    failures: Vec<RunFailure>,
}

fn write_matrix(path: &Path, m: &Array2<f64>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let header: Vec<String> = (0..m.ncols()).map(|i| format!("x{i}")).collect();
    w.write_record(&header)?;
    for row in m.rows() {
        w.write_record(row.iter().map(|v| v.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Loads or generates the configured dataset.
pub fn load_data(source: &DataSource) -> Result<Dataset> {
    match source {
        DataSource::Synthetic(spec) => generate_synthetic(spec),
        DataSource::Csv { path, domain } => Dataset::read_csv(path, *domain),
    }
}

/// Runs the full protocol and writes all artifacts under `config.output_dir`.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentOutput> {
    let data = load_data(&config.data)?;
    run_experiment_on(config, &data)
}

/// [`run_experiment`] on an already loaded dataset.
pub fn run_experiment_on(config: &ExperimentConfig, data: &Dataset) -> Result<ExperimentOutput> {
    config.validate()?;
    let Some(labels) = &data.labels else {
        return Err(Error::Config(
            "test scoring and validation-based selection need a labelled dataset".into(),
        ));
    };
    let default_k = config.n_clusters.or_else(|| {
        let mut l = labels.clone();
        l.sort_unstable();
        l.dedup();
        Some(l.len())
    });
    fs::create_dir_all(&config.output_dir).map_err(|e| Error::io(&config.output_dir, e))?;
    write_json(&config.output_dir.join("config.json"), config)?;

    let ctx = Ctx {
        cfg: config,
        data,
        default_k,
        audit: Mutex::new(Vec::new()),
    };
    let total = if config.include_raw {
        config.n_realizations.max(config.baseline_realizations)
    } else {
        config.n_realizations
    };
    let run = || -> Vec<RealizationOutput> { (0..total).into_par_iter().map(|r| ctx.realization(r)).collect() };
    let outputs = if config.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(config.threads)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?
            .install(run)
    } else {
        run()
    };

    let mut scores = Vec::new();
    let mut failures = Vec::new();
    for o in outputs {
        scores.extend(o.scores);
        failures.extend(o.failures);
    }
    if !failures.is_empty() {
        log::warn!("{} run(s) failed and were excluded from the table", failures.len());
    }
    let table = ResultsTable::aggregate(&scores);
    table.write_csv(config.output_dir.join("results.csv"))?;
    write_json(
        &config.output_dir.join("results.json"),
        &serde_json::json!({ "rows": table.rows, "failures": failures }),
    )?;
    let mut audit = ctx.audit.into_inner().expect("audit lock");
    audit.sort_by_key(|e| e.realization);
    Ok(ExperimentOutput {
        table,
        scores,
        failures,
        audit,
    })
}

/// Reads every `realization_*/scores.json` below `run_dir`.
pub fn load_scores(run_dir: impl AsRef<Path>) -> Result<Vec<RunScore>> {
    let run_dir = run_dir.as_ref();
    let mut dirs: Vec<PathBuf> = fs::read_dir(run_dir)
        .map_err(|e| Error::io(run_dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("scores.json").is_file())
        .collect();
    dirs.sort();
    let mut scores = Vec::new();
    for d in dirs {
        let path = d.join("scores.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let v: serde_json::Value = serde_json::from_str(&text)?;
        scores.extend(serde_json::from_value::<Vec<RunScore>>(v["scores"].clone())?);
    }
    Ok(scores)
}

/// Files written by [`emit_plot_data`] for one model directory.
#[derive(Debug, Clone, PartialEq)]
pub struct PlotFiles {
    pub f0_scatter: PathBuf,
    pub filter_evolution: Option<PathBuf>,
}

/// Writes `f0_scatter.csv` and `filter_evolution.csv` next to every
/// `f0_all.csv` found under `run_dir`. Label columns are left out when the
/// run had no labels.
pub fn emit_plot_data(run_dir: impl AsRef<Path>) -> Result<Vec<PlotFiles>> {
    let mut found = Vec::new();
    collect_model_dirs(run_dir.as_ref(), &mut found)?;
    found.sort();
    found.into_iter().map(|d| plot_one(&d)).collect()
}

fn collect_model_dirs(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    if dir.join("f0_all.csv").is_file() {
        out.push(dir.to_path_buf());
    }
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        if p.is_dir() {
            collect_model_dirs(&p, out)?;
        }
    }
    Ok(())
}

fn plot_one(dir: &Path) -> Result<PlotFiles> {
    let mut r = csv::Reader::from_path(dir.join("f0_all.csv"))?;
    let header = r.headers()?.clone();
    let f_cols: Vec<usize> = (0..header.len()).filter(|&i| header[i].starts_with("f_")).collect();
    let rows: Vec<csv::StringRecord> = r.records().collect::<std::result::Result<_, _>>()?;
    let has = |name: &str| {
        let i = header.iter().position(|h| h == name)?;
        rows.iter().all(|rec| !rec[i].is_empty()).then_some(i)
    };
    let truth = has("true_label");
    let pred = has("pred_label");

    let scatter = dir.join("f0_scatter.csv");
    let mut w = csv::Writer::from_path(&scatter)?;
    let mut head = vec!["index".to_string(), "partition".to_string()];
    head.extend(f_cols.iter().map(|&i| header[i].to_string()));
    if truth.is_some() {
        head.push("true_label".into());
    }
    if pred.is_some() {
        head.push("pred_label".into());
    }
    w.write_record(&head)?;
    let mut sorted: Vec<&csv::StringRecord> = rows.iter().collect();
    sorted.sort_by_key(|rec| rec[0].parse::<usize>().unwrap_or(usize::MAX));
    for rec in sorted {
        let mut out = vec![rec[0].to_string(), rec[1].to_string()];
        out.extend(f_cols.iter().map(|&i| rec[i].to_string()));
        out.extend(truth.iter().chain(pred.iter()).map(|&i| rec[i].to_string()));
        w.write_record(&out)?;
    }
    w.flush().map_err(|e| Error::io(&scatter, e))?;

    let classes = dir.join("trace_classes.csv");
    let filter_evolution = if classes.is_file() {
        let mut r = csv::Reader::from_path(&classes)?;
        let h = r.headers()?.clone();
        let path = dir.join("filter_evolution.csv");
        let mut w = csv::Writer::from_path(&path)?;
        let mut head = vec!["epoch".to_string(), "class".to_string()];
        head.extend((1..h.len() - 1).map(|i| format!("f_{i}")));
        w.write_record(&head)?;
        for rec in r.records() {
            w.write_record(&rec?)?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        Some(path)
    } else {
        None
    };
    Ok(PlotFiles {
        f0_scatter: scatter,
        filter_evolution,
    })
}
