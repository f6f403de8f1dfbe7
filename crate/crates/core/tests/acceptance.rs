//! Acceptance report: one PASS/FAIL line per criterion.
//!
//! Lines go straight to stdout so they show without `--nocapture`. The two
//! training-outcome criteria are reported but do not fail the test; every
//! contract criterion does.

#[path = "invariants.rs"]
mod invariants;

use std::collections::HashSet;
use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};

use isvae_core::clustering::{kmeans, FeatureSpace, KMeansParams};
use isvae_core::datagen::generate_synthetic;
use isvae_core::experiment::*;
use isvae_core::metrics::v_measure;
use isvae_core::nn::Parameters;
use isvae_core::training::{extract_features, train, LatentExport, TrainOutcome};
use isvae_core::*;
use ndarray::s;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const SEEDS: u64 = 5;
const V_BAR: f64 = 0.85;
const ALIGN_TOL: f64 = 0.05;

fn report(line: &str) {
    let mut out = std::io::stdout().lock();
    writeln!(out, "{line}").unwrap();
    out.flush().unwrap();
}

fn verdict(ok: bool) -> &'static str {
    if ok {
        "PASS"
    } else {
        "FAIL"
    }
}

/// Runs each named check, returning the names that panicked.
fn run_suite(suite: &[(&str, fn())]) -> Vec<String> {
    suite
        .iter()
        .filter(|(_, f)| catch_unwind(*f).is_err())
        .map(|(name, _)| name.to_string())
        .collect()
}

struct SeedRun {
    seed: u64,
    prep: Prepared,
    outcome: TrainOutcome<IsvaeModel>,
}

impl SeedRun {
    /// Epoch where the stopping rule first held, or the last epoch.
    fn stop_epoch(&self) -> usize {
        self.outcome.at_stop.as_ref().map_or(self.outcome.trace.len(), |(e, _)| *e)
    }

    fn stop_model(&self) -> &IsvaeModel {
        self.outcome.at_stop.as_ref().map_or(&self.outcome.model, |(_, m)| m)
    }

    fn val_v(&self, epoch: usize) -> f64 {
        self.outcome.trace.epochs[epoch - 1].val_vscore.expect("validation labels")
    }

    fn test_v(&self, model: &IsvaeModel) -> (f64, usize) {
        let f = extract_features(model, &self.prep.test, self.seed, LatentExport::Sample).unwrap();
        let labels = kmeans(f.f0.view(), &KMeansParams::new(8, self.seed)).unwrap().assignment.labels;
        let clusters = labels.iter().collect::<HashSet<_>>().len();
        (v_measure(self.prep.test.labels.as_ref().unwrap(), &labels).unwrap(), clusters)
    }
}

fn synthetic_run(cfg: &ExperimentConfig, seed: u64, epochs: usize) -> SeedRun {
    let data = generate_synthetic(&SyntheticSpec { seed, ..Default::default() }).unwrap();
    let prep = prepare_splits(cfg, &data, seed, &mut |_, _| {}).unwrap();
    let mcfg = cfg.model_config(prep.train.dim(), 2, DecoderKind::Vanilla);
    let model = IsvaeModel::new(mcfg, None, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    // run all epochs so the best validation epoch is known; the stop snapshot is kept regardless
    let tc = TrainConfig { seed, epochs, stop_early: false, log_every: 0, ..cfg.train.clone() };
    let outcome = train(model, &tc, &prep.train, Some(&prep.val)).unwrap();
    SeedRun { seed, prep, outcome }
}

fn structural_run(dir: &std::path::Path) -> (ExperimentConfig, ExperimentOutput) {
    let mut cfg = ExperimentConfig::synthetic();
    cfg.n_realizations = 6;
    cfg.baseline_realizations = 6;
    cfg.j_values = vec![2, 3];
    cfg.decoders = vec![DecoderKind::Vanilla, DecoderKind::Attentive];
    cfg.feature_spaces = vec![FeatureSpace::F0, FeatureSpace::F0Extended, FeatureSpace::LatentZ];
    cfg.include_raw = true;
    cfg.include_vae = true;
    cfg.train.epochs = 2;
    cfg.train.log_every = 0;
    cfg.output_dir = dir.to_path_buf();
    let out = run_experiment(&cfg).unwrap();
    (cfg, out)
}

fn table_has_protocol_rows(cfg: &ExperimentConfig, out: &ExperimentOutput) -> Result<usize, String> {
    if !out.failures.is_empty() {
        return Err(format!("{} failed runs", out.failures.len()));
    }
    let mut expected = Vec::new();
    for c in &cfg.clusterers {
        let c = c.name();
        expected.push((Variant::Raw, None, FeatureSpace::RawTime, c));
        expected.push((Variant::Raw, None, FeatureSpace::RawDct, c));
        expected.push((Variant::Vae, None, FeatureSpace::LatentZ, c));
        for &d in &cfg.decoders {
            for &j in &cfg.j_values {
                for &space in &cfg.feature_spaces {
                    expected.push((Variant::isvae(d), Some(j), space, c));
                }
            }
        }
    }
    for (v, j, space, c) in &expected {
        let row = out.table.row(*v, *j, *space, c).ok_or(format!("missing {v:?} J{j:?} {space:?} {c}"))?;
        if row.n_runs != 6 {
            return Err(format!("{v:?} J{j:?} {space:?} averaged {} runs", row.n_runs));
        }
    }
    if out.table.rows.len() != expected.len() {
        return Err(format!("{} rows, expected {}", out.table.rows.len(), expected.len()));
    }
    Ok(expected.len())
}

/// Held-out rows reach only selection and scoring; every fit reads train rows.
fn audit_is_clean(cfg: &ExperimentConfig, out: &ExperimentOutput) -> bool {
    let data = load_data(&cfg.data).unwrap();
    (0..cfg.n_realizations).all(|r| {
        let seed = cfg.base_seed + r as u64;
        let prep = prepare_splits(cfg, &data, seed, &mut |_, _| {}).unwrap();
        out.audit.iter().filter(|e| e.realization == r).all(|e| match e.stage {
            Stage::Scoring => e.rows == prep.rows.test,
            Stage::Selection => e.rows == prep.rows.val,
            _ => e.rows == prep.rows.train,
        })
    })
}

#[test]
fn acceptance() {
    let mut contract_failures = Vec::new();
    let cfg = ExperimentConfig::synthetic();

    // 1 and 2: the synthetic setup, five seeds
    let runs: Vec<SeedRun> = (0..SEEDS).map(|seed| synthetic_run(&cfg, seed, cfg.train.epochs)).collect();
    let mut clusterable = 0;
    let mut aligned = 0;
    for run in &runs {
        let stop = run.stop_epoch();
        let (v_stop, clusters) = run.test_v(run.stop_model());
        let (best_epoch, best_val) = run.outcome.trace.best_val_epoch().unwrap();
        let (v_best, _) = run.test_v(run.outcome.selected());
        let gap = best_val - run.val_v(stop);
        clusterable += (v_stop >= V_BAR && clusters == 8) as usize;
        aligned += (gap <= ALIGN_TOL) as usize;
        report(&format!(
            "  seed {}: stop epoch {stop} ({}), test V {v_stop:.3}; best val V {best_val:.3} at epoch {best_epoch}, test V there {v_best:.3}; gap {gap:.3}",
            run.seed,
            if run.outcome.at_stop.is_some() { "rule" } else { "epoch cap" },
        ));
    }
    report(&format!(
        "{} criterion 1: k-means (k=8) on f0 reaches V >= {V_BAR} in {clusterable}/{SEEDS} seeds (need 3)",
        verdict(clusterable >= 3)
    ));
    report(&format!(
        "{} criterion 2: stop-epoch val V within {ALIGN_TOL} of best val V in {aligned}/{SEEDS} seeds (need 3)",
        verdict(aligned >= 3)
    ));

    // 3: table structure over six realizations
    let dir = tempfile::tempdir().unwrap();
    let (scfg, sout) = structural_run(dir.path());
    let rows = table_has_protocol_rows(&scfg, &sout);
    report(&format!(
        "{} criterion 3: results table has every protocol row over 6 realizations ({})",
        verdict(rows.is_ok()),
        match &rows {
            Ok(n) => format!("{n} rows"),
            Err(e) => e.clone(),
        }
    ));
    if rows.is_err() {
        contract_failures.push(3);
    }

    // 4: oracle suites
    let failed: Vec<String> = run_suite(oracles::SUITE).into_iter().chain(run_suite(gradients::SUITE)).collect();
    let total = oracles::SUITE.len() + gradients::SUITE.len();
    report(&format!(
        "{} criterion 4: {}/{total} oracle checks agree{}",
        verdict(failed.is_empty()),
        total - failed.len(),
        if failed.is_empty() { String::new() } else { format!(", failed: {}", failed.join(" ")) }
    ));
    if !failed.is_empty() {
        contract_failures.push(4);
    }

    // 5: invariant suites, plus checks on the runs above
    let mut failed = run_suite(invariants::SUITE);
    if !runs.iter().all(|r| r.outcome.trace.epochs.iter().all(|e| e.kl >= 0.0)) {
        failed.push("kl_nonnegative_every_logged_epoch".into());
    }
    if !audit_is_clean(&scfg, &sout) {
        failed.push("leakage_audit".into());
    }
    let rerun = || synthetic_run(&cfg, 0, 3).outcome;
    let (a, b) = (rerun(), rerun());
    if a.trace != b.trace || a.model.to_checkpoint() != b.model.to_checkpoint() {
        failed.push("bit_identical_reruns".into());
    }
    let total = invariants::SUITE.len() + 3;
    report(&format!(
        "{} criterion 5: {}/{total} invariants hold{}",
        verdict(failed.is_empty()),
        total - failed.len(),
        if failed.is_empty() { String::new() } else { format!(", failed: {}", failed.join(" ")) }
    ));
    if !failed.is_empty() {
        contract_failures.push(5);
    }

    // 6: extended features from a frozen checkpoint
    let frozen = runs[0].stop_model().clone();
    let ok = catch_unwind(AssertUnwindSafe(|| {
        let mut model = frozen.clone();
        model.zero_grad();
        let before = model.to_checkpoint();
        let feats = extract_features(&model, &runs[0].prep.test, 7, LatentExport::Mean).unwrap();
        let j = model.config().j;
        let mut grads = 0.0;
        model.visit_mut("", &mut |_, _, g| grads += g.iter().map(|v| v.abs()).sum::<f64>());
        model.to_checkpoint() == before
            && grads == 0.0
            && feats.extended.ncols() == 2 * j
            && feats.extended.slice(s![.., ..j]) == feats.f0
            && feats.f0 == model.f0(&runs[0].prep.test.signals).unwrap()
    }))
    .unwrap_or(false);
    report(&format!(
        "{} criterion 6: extended features come from a frozen checkpoint and start with f0",
        verdict(ok)
    ));
    if !ok {
        contract_failures.push(6);
    }

    assert!(contract_failures.is_empty(), "contract criteria failed: {contract_failures:?}");
}
