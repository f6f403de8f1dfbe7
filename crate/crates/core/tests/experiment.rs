//! End-to-end runner contracts on a small synthetic problem.

use std::collections::HashSet;
use std::path::Path;

use isvae_core::clustering::{Clusterer, FeatureSpace};
use isvae_core::datagen::split_indices;
use isvae_core::experiment::*;
use isvae_core::model::ArchitecturePreset;
use isvae_core::*;

fn small_config(out: &Path) -> ExperimentConfig {
    ExperimentConfig {
        name: "small".into(),
        data: DataSource::Synthetic(SyntheticSpec {
            n_signals: 96,
            length_d: 64,
            sampling_freq: 64.0,
            cluster_freqs: vec![vec![5.0], vec![12.0, 20.0], vec![27.0]],
            seed: 3,
            ..Default::default()
        }),
        spectrum_scaling: SpectrumScaling::GlobalStd,
        base_seed: 10,
        n_realizations: 2,
        baseline_realizations: 3,
        preset: ArchitecturePreset::Har,
        j_values: vec![2, 3],
        k: 2,
        sigma: Some(2.0),
        decoders: vec![DecoderKind::Vanilla, DecoderKind::Attentive],
        clusterers: vec![Clusterer::kmeans(), Clusterer::spectral()],
        train: TrainConfig {
            epochs: 3,
            batch_size: 16,
            log_every: 0,
            ..Default::default()
        },
        output_dir: out.to_path_buf(),
        threads: 1,
        ..Default::default()
    }
}

#[test]
fn table_has_every_row_of_the_protocol() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = run_experiment(&cfg).unwrap();
    assert!(out.failures.is_empty(), "{:?}", out.failures);
    // raw_time and raw_dct, the VAE latent, and decoders x J x spaces, each per clusterer
    let expected = (2 + 1 + 2 * 2 * 3) * 2;
    assert_eq!(out.table.rows.len(), expected);
    for c in ["kmeans", "spectral"] {
        for space in [FeatureSpace::RawTime, FeatureSpace::RawDct] {
            assert_eq!(out.table.row(Variant::Raw, None, space, c).unwrap().n_runs, 3);
        }
        assert_eq!(out.table.row(Variant::Vae, None, FeatureSpace::LatentZ, c).unwrap().n_runs, 2);
        for v in [Variant::IsvaeVanilla, Variant::IsvaeAttentive] {
            for j in [2, 3] {
                for space in [FeatureSpace::F0, FeatureSpace::F0Extended, FeatureSpace::LatentZ] {
                    assert_eq!(out.table.row(v, Some(j), space, c).unwrap().n_runs, 2);
                }
            }
        }
    }
    let csv = std::fs::read_to_string(dir.path().join("results.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), RESULTS_HEADER.join(","));
    assert_eq!(csv.lines().count(), expected + 1);

    // the per-realization artifacts reproduce the aggregate
    let reloaded = ResultsTable::aggregate(&load_scores(dir.path()).unwrap());
    assert_eq!(reloaded, out.table);

    // held-out rows never reach fitting, training or model selection
    let n = 96;
    for r in 0..3 {
        let seed = cfg.base_seed + r as u64;
        let rows = split_indices(n, &SplitSpec { seed, ..cfg.split.clone() }).unwrap();
        let test: HashSet<usize> = rows.test.iter().copied().collect();
        let events: Vec<&AccessEvent> = out.audit.iter().filter(|e| e.realization == r).collect();
        assert!(!events.is_empty());
        for e in events {
            let seen: HashSet<usize> = e.rows.iter().copied().collect();
            match e.stage {
                Stage::Scoring => assert_eq!(seen, test),
                Stage::Selection => assert_eq!(e.rows, rows.val),
                _ => {
                    assert!(seen.is_disjoint(&test), "{:?} read test rows", e.stage);
                    assert_eq!(e.rows, rows.train, "{:?}", e.stage);
                }
            }
        }
    }
    let stages: HashSet<Stage> = out.audit.iter().map(|e| e.stage).collect();
    for s in [Stage::SpectrumScaleFit, Stage::ScalerFit, Stage::Periodogram, Stage::Training, Stage::Selection, Stage::Scoring] {
        assert!(stages.contains(&s), "{s:?} never logged");
    }

    // plot data for every trained ISVAE model
    let plots = emit_plot_data(dir.path()).unwrap();
    assert_eq!(plots.len(), 2 * 2 * 2);
    for p in plots {
        let j = if p.f0_scatter.parent().unwrap().ends_with("isvae_vanilla_J2")
            || p.f0_scatter.parent().unwrap().ends_with("isvae_attentive_J2")
        {
            2
        } else {
            3
        };
        let mut r = csv::Reader::from_path(&p.f0_scatter).unwrap();
        assert_eq!(r.headers().unwrap().len(), 4 + j);
        let recs: Vec<csv::StringRecord> = r.records().map(|x| x.unwrap()).collect();
        assert_eq!(recs.len(), n);
        for rec in &recs {
            for i in 2..2 + j {
                let f: f64 = rec[i].parse().unwrap();
                assert!((0.0..=1.0).contains(&f));
            }
        }
        let evo = csv::Reader::from_path(p.filter_evolution.unwrap()).unwrap().into_records().count();
        assert_eq!(evo, cfg.train.epochs * 3);
    }
}

#[test]
fn identical_configs_give_identical_tables() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let mut cfg = small_config(a.path());
    cfg.decoders = vec![DecoderKind::Attentive];
    cfg.j_values = vec![2];
    cfg.threads = 2;
    run_experiment(&cfg).unwrap();
    cfg.output_dir = b.path().to_path_buf();
    run_experiment(&cfg).unwrap();
    let read = |p: &Path| std::fs::read(p.join("results.csv")).unwrap();
    assert_eq!(read(a.path()), read(b.path()));
}

#[test]
fn failed_runs_are_reported_not_averaged() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(dir.path());
    cfg.include_vae = false;
    cfg.decoders = vec![DecoderKind::Vanilla];
    cfg.j_values = vec![2];
    cfg.baseline_realizations = 1;
    cfg.n_realizations = 1;
    // every point is noise, so no metric is defined
    cfg.clusterers = vec![Clusterer::kmeans(), Clusterer::Dbscan { eps: 1e-9, min_pts: 5 }];
    let out = run_experiment(&cfg).unwrap();
    assert!(out.failures.iter().all(|f| f.clusterer.as_deref() == Some("dbscan")));
    assert_eq!(out.failures.len(), 2 + 3);
    assert!(out.table.rows.iter().all(|r| r.key.clusterer == "kmeans"));
}

#[test]
fn unlabelled_data_is_a_configuration_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let mut data = load_data(&cfg.data).unwrap();
    data.labels = None;
    assert!(matches!(run_experiment_on(&cfg, &data), Err(Error::Config(_))));
}
