use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use isvae_core::datagen::generate_synthetic;
use isvae_core::experiment::{emit_plot_data, run_experiment, ExperimentConfig};
use isvae_core::metrics;
use isvae_core::SyntheticSpec;
use ndarray::Array2;
use serde::Serialize;

#[derive(Parser)]
#[command(name = "isvae", version, about = "ISVAE training and clustering experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment described by a JSON config.
    Run {
        config: PathBuf,
        #[arg(long)]
        output_dir: Option<PathBuf>,
        #[arg(long)]
        realizations: Option<usize>,
        #[arg(long)]
        baseline_realizations: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Write f0_scatter.csv and filter_evolution.csv for a finished run.
    Plotdata { run_dir: PathBuf },
    /// Generate the synthetic sinusoid dataset as CSV.
    GenSynthetic { spec: PathBuf, out: PathBuf },
    /// Score a labelling of a feature matrix.
    ///
    /// The labels file needs a `label` (or `pred_label`) column; a
    /// `true_label` column enables homogeneity, completeness and V-score.
    Score { features: PathBuf, labels: PathBuf },
}

/// Numeric CSV with a header row.
fn read_matrix(path: &Path) -> Result<Array2<f64>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    let cols = r.headers()?.len();
    let mut data = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        for field in rec.iter() {
            let v: f64 = field
                .trim()
                .parse()
                .with_context(|| format!("{}: row {} has a non-numeric value {field:?}", path.display(), i + 1))?;
            data.push(v);
        }
    }
    let rows = if cols == 0 { 0 } else { data.len() / cols };
    Ok(Array2::from_shape_vec((rows, cols), data)?)
}

fn read_labels(path: &Path) -> Result<(Vec<i64>, Option<Vec<i64>>)> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    let h = r.headers()?.clone();
    let col = |name: &str| h.iter().position(|c| c == name);
    let pred_col = col("label")
        .or_else(|| col("pred_label"))
        .context("labels file needs a `label` or `pred_label` column")?;
    let truth_col = col("true_label");
    let mut pred = Vec::new();
    let mut truth = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        pred.push(rec[pred_col].trim().parse::<i64>()?);
        if let Some(t) = truth_col {
            truth.push(rec[t].trim().parse::<i64>()?);
        }
    }
    Ok((pred, truth_col.map(|_| truth)))
}

#[derive(Serialize)]
struct ScoreReport {
    n: usize,
    n_clusters: usize,
    silhouette: Option<f64>,
    calinski_harabasz: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    v_score: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    homogeneity: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    completeness: Option<f64>,
}

fn score(features: &Path, labels: &Path) -> Result<ScoreReport> {
    let x = read_matrix(features)?;
    let rows = x.nrows();
    let (pred, truth) = read_labels(labels)?;
    if pred.len() != rows {
        bail!("{} feature rows but {} labels", rows, pred.len());
    }
    let soft = |r: isvae_core::Result<f64>, name: &str| match r {
        Ok(v) => Some(v),
        Err(e) => {
            log::warn!("{name}: {e}");
            None
        }
    };
    let hcv = truth
        .as_ref()
        .map(|t| metrics::homogeneity_completeness_v(t, &pred))
        .transpose()?;
    let mut distinct = pred.clone();
    distinct.sort_unstable();
    distinct.dedup();
    Ok(ScoreReport {
        n: rows,
        n_clusters: distinct.len(),
        silhouette: soft(metrics::silhouette(x.view(), &pred), "silhouette"),
        calinski_harabasz: soft(metrics::calinski_harabasz(x.view(), &pred), "calinski_harabasz"),
        v_score: hcv.map(|h| h.v_measure),
        homogeneity: hcv.map(|h| h.homogeneity),
        completeness: hcv.map(|h| h.completeness),
    })
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Run {
            config,
            output_dir,
            realizations,
            baseline_realizations,
            epochs,
            seed,
            threads,
        } => {
            let mut cfg = ExperimentConfig::from_json_file(&config)
                .with_context(|| format!("reading {}", config.display()))?;
            if let Some(d) = output_dir {
                cfg.output_dir = d;
            }
            if let Some(n) = realizations {
                cfg.n_realizations = n;
            }
            if let Some(n) = baseline_realizations {
                cfg.baseline_realizations = n;
            }
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            if let Some(s) = seed {
                cfg.base_seed = s;
            }
            if let Some(t) = threads {
                cfg.threads = t;
            }
            let out = run_experiment(&cfg)?;
            println!("variant\tJ\tspace\tclusterer\tV (mean±std)\truns");
            for r in &out.table.rows {
                println!(
                    "{}\t{}\t{}\t{}\t{:.4}±{:.4}\t{}",
                    r.key.variant.as_str(),
                    r.key.j.map(|j| j.to_string()).unwrap_or_else(|| "-".into()),
                    r.key.feature_space.as_str(),
                    r.key.clusterer,
                    r.v_score.mean,
                    r.v_score.std,
                    r.n_runs
                );
            }
            if !out.failures.is_empty() {
                eprintln!("{} run(s) failed; see results.json", out.failures.len());
            }
            println!("results written to {}", cfg.output_dir.display());
        }
        Command::Plotdata { run_dir } => {
            let files = emit_plot_data(&run_dir)?;
            if files.is_empty() {
                bail!("no f0_all.csv found under {}", run_dir.display());
            }
            for f in files {
                println!("{}", f.f0_scatter.display());
                if let Some(e) = f.filter_evolution {
                    println!("{}", e.display());
                }
            }
        }
        Command::GenSynthetic { spec, out } => {
            let text = std::fs::read_to_string(&spec).with_context(|| format!("reading {}", spec.display()))?;
            let spec: SyntheticSpec = serde_json::from_str(&text)?;
            let data = generate_synthetic(&spec)?;
            data.write_csv(&out)?;
            println!("wrote {} signals of length {} to {}", data.len(), data.dim(), out.display());
        }
        Command::Score { features, labels } => {
            let report = score(&features, &labels)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
    }
    Ok(())
}
