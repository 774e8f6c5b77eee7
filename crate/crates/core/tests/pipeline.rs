use std::fs;

use nesy_core::dataset::generate_synthetic;
use nesy_core::evaluation::{run_experiment, run_once, ExperimentConfig};
use nesy_core::labelling::{label_filters, label_map, top_activations, LabelConfig};
use nesy_core::pipeline::{cmd_eval, cmd_explain, cmd_extract, cmd_label, cmd_train, PipelineConfig, SyntheticSource};
use nesy_core::rules::{parse_program, FoldConfig};
use nesy_core::training::{Strategy, TrainConfig};

fn short_train(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        patience: epochs / 3,
        ..TrainConfig::desk()
    }
}

#[test]
fn labels_come_from_motif_concepts() {
    let ds = generate_synthetic(3, 20, 32, 1, true).unwrap();
    let cfg = ExperimentConfig {
        train: short_train(20),
        fold: FoldConfig::default(),
    };
    let a = run_once(Strategy::Ts3, "c3", &ds, 0, &cfg).unwrap();
    let labels = label_filters(&a.outcome.model, &ds, a.outcome.thresholds.as_ref(), &a.rules, &LabelConfig::default()).unwrap();
    assert_eq!(labels.len(), a.rules.filters().len());
    for l in &labels {
        let total: f64 = l.concepts.iter().map(|c| c.score).sum();
        assert!(total <= 1.0 + 1e-9, "filter {} scores sum to {total}", l.filter);
        assert!(l.concepts.windows(2).all(|w| w[0].score >= w[1].score));
        assert!(l.concepts.iter().all(|c| ds.class_names.contains(&c.concept)), "{:?}", l.concepts);
        assert!(!l.images.is_empty() && l.images.len() <= 10);
    }
    let map = label_map(&labels);
    let labelled = a.rules.with_labels(map.clone());
    let back = parse_program(&labelled.render(), Some(&map)).unwrap();
    assert_eq!(back.render(), labelled.render());

    let ov = top_activations(&a.outcome.model, &ds.train, 0, 3).unwrap();
    assert_eq!(ov.len(), 3);
    assert!(ov.windows(2).all(|w| w[0].norm >= w[1].norm));
    assert!(ov[0].heatmap.iter().all(|v| (0.0..=1.0 + 1e-6).contains(v)));
}

#[test]
fn labelling_without_masks_is_an_error() {
    let ds = generate_synthetic(2, 10, 16, 0, false).unwrap();
    let cfg = ExperimentConfig {
        train: TrainConfig {
            hidden_channels: vec![4, 4],
            filters: 4,
            ..short_train(3)
        },
        fold: FoldConfig::default(),
    };
    let a = run_once(Strategy::Ts4, "c2", &ds, 0, &cfg).unwrap();
    let err = label_filters(&a.outcome.model, &ds, None, &a.rules, &LabelConfig::default()).unwrap_err();
    assert!(err.to_string().contains("mask"), "{err}");
}

#[test]
fn experiment_writes_one_result_per_seed() {
    let ds = generate_synthetic(2, 10, 16, 0, false).unwrap();
    let cfg = ExperimentConfig {
        train: TrainConfig {
            hidden_channels: vec![4, 4],
            filters: 4,
            ..short_train(6)
        },
        fold: FoldConfig::default(),
    };
    let tmp = tempfile::tempdir().unwrap();
    let report = run_experiment(Strategy::Ts1, "c2", &ds, 2, 10, &cfg, Some(tmp.path())).unwrap();
    let cell = &report.cells[0];
    assert_eq!(cell.runs.iter().map(|r| r.seed).collect::<Vec<_>>(), vec![10, 11]);
    assert!(tmp.path().join("runs/ts1-c2-seed10.json").exists());
    assert!(tmp.path().join("runs/ts1-c2-seed11.json").exists());
    let again = run_experiment(Strategy::Ts1, "c2", &ds, 2, 10, &cfg, None).unwrap();
    assert_eq!(again, report);
}

#[test]
fn checkpoint_commands_chain() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = PipelineConfig {
        synthetic: Some(SyntheticSource::Preset("c3".into())),
        out: Some(tmp.path().to_path_buf()),
        train: short_train(15),
        ..PipelineConfig::default()
    };
    let summary = cmd_train(&cfg).unwrap();
    assert_eq!(summary.epochs, 15);
    let ex = cmd_extract(tmp.path()).unwrap();
    assert_eq!(ex.rows, 84);
    let first = fs::read_to_string(tmp.path().join("rules.lp")).unwrap();
    let report = cmd_eval(tmp.path()).unwrap();
    assert_eq!(report.ruleset_size, ex.ruleset_size);
    assert!((0.0..=100.0).contains(&report.nesy_accuracy));

    let table = fs::read_to_string(tmp.path().join("table.csv")).unwrap();
    let id = table.lines().nth(1).unwrap().split(',').next().unwrap();
    let e = cmd_explain(tmp.path(), id).unwrap();
    assert_eq!(e.image_id, id);
    if let Some(j) = &e.justification {
        assert!(j.depth() <= 4);
    }
    cmd_label(tmp.path()).unwrap();
    cmd_extract(tmp.path()).unwrap();
    assert_eq!(fs::read_to_string(tmp.path().join("rules.lp")).unwrap(), first);
}
