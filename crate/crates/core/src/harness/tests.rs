use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::capsule::{argmax_rows, LayerKind};
use crate::diagnostics::ActivationLedger;
use crate::tensor::gradcheck::check_gradients;
use crate::tensor::{Tape, Tensor};

fn loss_value(acts: Tensor, labels: &[usize], m: f64) -> f64 {
    let tape = Tape::new();
    spread_loss(tape.constant(acts), labels, m).unwrap().item()
}

#[test]
fn spread_loss_examples() {
    let separated = Tensor::new(&[1, 4], vec![0.0, 1.0, 0.0, 0.0]).unwrap();
    assert_eq!(loss_value(separated, &[1], 0.9), 0.0);

    let flat = Tensor::full(&[3, 10], 0.4);
    let l = loss_value(flat, &[0, 5, 9], 0.2);
    assert!((l - 9.0 * 0.04).abs() < 1e-12, "{l}");

    // Only the wrong classes inside the margin count.
    let partial = Tensor::new(&[1, 3], vec![0.9, 0.5, 0.1]).unwrap();
    let expected = (0.5f64 - 0.4).powi(2) + 0.0;
    assert!((loss_value(partial, &[0], 0.5) - expected).abs() < 1e-12);
}

#[test]
fn spread_loss_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let acts = Tensor::from_fn(&[6, 4], |_| rng.random_range(0.0..1.0));
    let labels = [0, 1, 2, 3, 1, 2];
    let r = check_gradients(&[acts], 1e-6, 1e-7, |_, v| {
        spread_loss(v[0], &labels, 0.6).map_err(|e| crate::error::TensorError::Config {
            op: "test",
            reason: e.to_string(),
        })
    })
    .unwrap();
    assert!(r.passes(1e-5), "{r:?}");
}

#[test]
fn spread_loss_contract() {
    let tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    assert!(matches!(spread_loss(a, &[0, 3], 0.5), Err(crate::Error::Contract(_))));
    assert!(matches!(spread_loss(a, &[0], 0.5), Err(crate::Error::Contract(_))));
    assert!(matches!(spread_loss(a, &[0, 1], 1.0), Err(crate::Error::Contract(_))));
    assert!(matches!(spread_loss(a, &[0, 1], 0.0), Err(crate::Error::Contract(_))));
}

#[test]
fn adam_zero_gradient_is_a_no_op() {
    let mut params = vec![Tensor::from_fn(&[3, 2], |i| i as f64 - 2.5), Tensor::scalar(0.7)];
    let before = params.clone();
    let grads: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
    let mut adam = Adam::new(3e-3);
    for _ in 0..5 {
        adam.step(&mut params, &grads);
    }
    assert_eq!(params, before);
    assert_eq!(adam.steps(), 5);
}

#[test]
fn adam_first_step_moves_by_lr() {
    let mut params = vec![Tensor::new(&[2], vec![1.0, -1.0]).unwrap()];
    let grads = vec![Tensor::new(&[2], vec![4.0, -0.5]).unwrap()];
    let mut adam = Adam::new(0.01);
    adam.step(&mut params, &grads);
    let p = params[0].data();
    assert!((p[0] - 0.99).abs() < 1e-8 && (p[1] + 0.99).abs() < 1e-8, "{p:?}");
}

#[test]
fn constant_scores_fall_to_chance() {
    let n = 10;
    let labels: Vec<usize> = (0..1000).map(|i| i % n).collect();
    let preds = argmax_rows(&Tensor::full(&[1000, n], 0.37));
    let acc = preds.iter().zip(&labels).filter(|(p, l)| p == l).count() as f64 / 1000.0;
    assert!((acc - 1.0 / n as f64).abs() <= 0.03, "{acc}");
}

#[test]
fn config_defaults_and_parsing() {
    let d = ExperimentConfig::default();
    assert_eq!(d.depths, (1..=10).collect::<Vec<_>>());
    assert_eq!(d.epochs, 50);
    assert_eq!(d.batch_size, 32);
    assert_eq!(d.lr, 3e-3);
    assert_eq!(d.threshold, 0.01);
    d.validate().unwrap();
    assert_eq!(d.margin_at(0), 0.2);
    assert!((d.margin_at(49) - 0.9).abs() < 1e-12);

    let c = ExperimentConfig::from_toml(
        r#"
        algorithm = "self"
        depths = [1, 3]
        epochs = 4
        [dataset]
        kind = "synthetic"
        image_size = 16
        [model]
        n_caps = 4
        "#,
    )
    .unwrap();
    assert_eq!(c.algorithms, vec![crate::routing::RoutingAlgorithm::SelfRouting]);
    assert_eq!(c.model.n_caps, 4);
    assert_eq!(ExperimentConfig::from_toml(&c.to_toml()).unwrap(), c);

    assert!(ExperimentConfig::from_toml("epoch = 3").unwrap_err().is_config());
    assert!(ExperimentConfig::from_toml("algorithms = [\"nope\"]").unwrap_err().is_config());
    for bad in ["depths = [0]", "epochs = 0", "lr = -1.0", "threshold = 2.0", "margin = [0.5, 0.2]", "algorithms = []"] {
        let cfg = ExperimentConfig::from_toml(bad).unwrap();
        assert!(cfg.validate().unwrap_err().is_config(), "{bad}");
    }
}

fn tiny_config(outdir: &std::path::Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::from_toml(
        r#"
        algorithms = ["self", "em"]
        depths = [1, 2]
        epochs = 2
        batch_size = 8
        micro_batch = 4
        [dataset]
        kind = "synthetic"
        n_classes = 3
        image_size = 8
        samples_per_class = 8
        [model]
        n_caps = 2
        backbone_channels = 4
        routing_iterations = 2
        [split]
        val_fraction = 0.25
        test_fraction = 0.25
        "#,
    )
    .unwrap();
    cfg.outdir = outdir.to_path_buf();
    cfg
}

#[test]
fn training_is_deterministic_and_records_every_epoch() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let splits = cfg.load_splits().unwrap();
    let run = RunSpec {
        algorithm: crate::routing::RoutingAlgorithm::SelfRouting,
        depth: 1,
        seed: 5,
    };
    let a = train_run(&cfg, run, &splits).unwrap();
    let b = train_run(&cfg, run, &splits).unwrap();
    assert_eq!(a.epochs.len(), 2);
    assert!(a.losses().iter().zip(b.losses()).all(|(x, y)| x.to_bits() == y.to_bits()));
    assert_eq!(a.test_accuracy, b.test_accuracy);
    assert!((0.0..=1.0).contains(&a.test_accuracy));
    assert_eq!(a.snapshots.iter().map(|s| s.epoch).collect::<Vec<_>>(), vec![1, 2]);
    assert_eq!(a.epochs[0].margin, 0.2);
    assert!((a.epochs[1].margin - 0.9).abs() < 1e-12);

    let c = train_run(&cfg, RunSpec { seed: 6, ..run }, &splits).unwrap();
    assert_ne!(a.losses(), c.losses());

    let path = dir.path().join("rec.json");
    a.save(&path).unwrap();
    assert_eq!(RunRecord::load(&path).unwrap(), a);
}

#[test]
fn sweep_reports_and_analyze_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = sweep(&cfg).unwrap();
    assert_eq!(out.records.len() + out.failures.len(), 4);
    assert!(out.failures.is_empty(), "{:?}", out.failures);
    let summary = read_summary(dir.path().join(SUMMARY_FILE)).unwrap();
    assert_eq!(summary, out.summary);
    for row in &summary {
        let rec = out
            .records
            .iter()
            .find(|r| r.run.depth == row.depth && r.run.algorithm == row.algorithm)
            .unwrap();
        assert_eq!(row.test_accuracy, rec.test_accuracy);
        assert_eq!(row.avg_dead_fraction, rec.test_report.avg_dead_fraction);
    }
    let charts = ["accuracy_vs_depth.svg", "dead_fraction_vs_depth.svg", "dead_count_vs_depth.svg"];
    let before: Vec<String> = charts.iter().map(|c| std::fs::read_to_string(dir.path().join(c)).unwrap()).collect();
    let grid = std::fs::read_to_string(dir.path().join("grids/em_d02_s0_test.svg")).unwrap();
    for c in charts.iter().chain(["grids/em_d02_s0_test.svg"].iter()) {
        std::fs::remove_file(dir.path().join(c)).unwrap();
    }
    let files = analyze(dir.path()).unwrap();
    assert!(files.len() > 4);
    for (c, b) in charts.iter().zip(&before) {
        assert_eq!(&std::fs::read_to_string(dir.path().join(c)).unwrap(), b, "{c}");
    }
    assert_eq!(std::fs::read_to_string(dir.path().join("grids/em_d02_s0_test.svg")).unwrap(), grid);
}

#[test]
fn unwritable_outdir_fails_before_training() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    std::fs::write(&blocker, b"x").unwrap();
    let mut cfg = tiny_config(&blocker.join("out"));
    // Big enough that training would take noticeably long.
    cfg.epochs = 1000;
    let err = sweep(&cfg).unwrap_err();
    assert!(matches!(err, crate::Error::Io { .. }), "{err}");
}

#[test]
fn emit_reports_needs_records() {
    let dir = tempfile::tempdir().unwrap();
    assert!(emit_reports(&[], dir.path()).is_err());
}

#[test]
fn capsule_grid_has_one_circle_per_capsule() {
    let mut ledger = ActivationLedger::new(3);
    let p = ledger.register(LayerKind::Primary, 16);
    ledger.observe_batch(p, &Tensor::full(&[1, 1, 1, 16], 0.5)).unwrap();
    for _ in 0..3 {
        let id = ledger.register(LayerKind::ConvCaps, 16);
        ledger.observe_batch(id, &Tensor::from_fn(&[1, 1, 1, 16], |i| i as f64 / 15.0)).unwrap();
    }
    let c = ledger.register(LayerKind::ClassCaps, 10);
    ledger.observe_batch(c, &Tensor::full(&[1, 1, 1, 10], 0.1)).unwrap();
    let snap = ledger.finalize(0.01).unwrap().export_snapshot(3);
    let svg = capsule_grid("t", &snap, 0.01);
    assert_eq!(svg.matches("<circle").count(), 48 + 16 + 10);
    assert_eq!(svg.matches(" conv_caps</text>").count(), 3);
    assert_eq!(svg.matches("#ffffff").count(), 3, "A = 0 capsules render white");
    assert_eq!(svg.matches("#08306b").count(), 3, "A = 1 capsules render full fill");
    assert_eq!(intensity_color(0.0), "#ffffff");
    assert_eq!(intensity_color(1.0), "#08306b");
    assert_eq!(intensity_color(f64::NAN), "#ffffff");
}
