use std::sync::OnceLock;

use semcf::diagnosis::{flip_stats, population, run_searches};
use semcf::direction::{probe_relevance, AttributeSpace, Filter, ProbeConfig};
use semcf::engine::SearchConfig;
use semcf::rng::Stream;
use semcf::training::*;
use semcf::world::*;
use semcf::ErrorKind;

struct Battery {
    world: World,
    space: AttributeSpace,
    dataset: LabeledDataset,
    model: TargetModel,
}

/// Ring classifier trained where stripes always accompanies ring.
fn battery() -> &'static Battery {
    static B: OnceLock<Battery> = OnceLock::new();
    B.get_or_init(|| {
        let world = World::new(WorldConfig::default()).unwrap();
        let m = probe_relevance(&world, &ProbeConfig::default()).unwrap();
        let space = AttributeSpace::from_phrases(&world, &m, &["stripes", "checkers", "shading", "drift", "rise"], Filter::OneSided).unwrap();
        let design = DatasetDesign { label: "ring".into(), confound: "stripes".into(), cells: CellCounts::confounded(1000, 0) };
        let dataset = make_dataset(&world, &design, Stream::TrainSet).unwrap();
        let model = train_target(&dataset, ModelKind::Classifier, &TrainHyper::default()).unwrap().model;
        Battery { world, space, dataset, model }
    })
}

fn small_config() -> CTConfig {
    CTConfig {
        rounds: 1,
        batch_size: 60,
        monitor_size: 0,
        eval_size: 20,
        search: SearchConfig { diag_attribute: Some("ring".into()), ..SearchConfig::default() },
        ..CTConfig::default()
    }
}

#[test]
fn zero_rounds_and_keypoint_models_are_rejected() {
    let b = battery();
    let config = CTConfig { rounds: 0, ..small_config() };
    let err = ct_train(&b.world, &b.model, &b.space, &b.dataset, &config).unwrap_err();
    assert_eq!(err.kind(), ErrorKind::Precondition);
    let kp = TargetModel { kind: ModelKind::Keypoint, ..b.model.clone() };
    let err = ct_train(&b.world, &kp, &b.space, &b.dataset, &small_config()).unwrap_err();
    assert_eq!(err.kind(), ErrorKind::Precondition);
    let bad_mix = CTConfig { mix: MixRatio { counterfactual: 1, original: 0 }, ..small_config() };
    assert_eq!(ct_train(&b.world, &b.model, &b.space, &b.dataset, &bad_mix).unwrap_err().kind(), ErrorKind::Config);
}

#[test]
fn labels_are_the_snapshot_predictions_and_no_oracle_is_read() {
    let b = battery();
    let config = small_config();
    let (train, _) = split(&b.dataset, &config.trainer);
    let mut trainer = Trainer::new(b.model.clone(), config.trainer.learning_rate);
    let snapshot = trainer.model().clone();
    let reads = b.world.oracle_reads();
    let out = ct_round(&b.world, &mut trainer, &b.space, &train, &config, 0).unwrap();
    assert_eq!(b.world.oracle_reads(), reads);
    assert_eq!(out.examples.len(), 60);
    assert_eq!(out.stats.n_original, 60);
    for e in &out.examples {
        let original = b.world.render(&e.style).unwrap();
        assert_eq!(e.label.to_bits(), snapshot.predict_scalar(&original).unwrap().to_bits());
        assert!((0.0..=1.0).contains(&e.label));
    }
    // Hard labels only arise where the sigmoid saturates in f64.
    assert!(out.examples.iter().any(|e| e.label > 0.0 && e.label < 1.0));
    assert_ne!(trainer.model(), &snapshot);
}

#[test]
fn self_consistent_round_keeps_accuracy() {
    let b = battery();
    let config = CTConfig {
        search: SearchConfig { step_size: 0.0, iterations: 1, ..small_config().search },
        ..small_config()
    };
    let (train, heldout) = split(&b.dataset, &config.trainer);
    let before = accuracy(&b.model, &heldout).unwrap();
    let mut trainer = Trainer::new(b.model.clone(), config.trainer.learning_rate);
    let out = ct_round(&b.world, &mut trainer, &b.space, &train, &config, 0).unwrap();
    for e in &out.examples {
        assert_eq!(e.pixels, b.world.render(&e.style).unwrap().pixels());
    }
    let after = accuracy(trainer.model(), &heldout).unwrap();
    assert!((after - before).abs() <= 0.01, "{before} -> {after}");
}

#[test]
fn one_round_lowers_the_flip_rate_on_fresh_seeds() {
    let b = battery();
    let config = CTConfig { batch_size: 100, ..small_config() };
    let (train, _) = split(&b.dataset, &config.trainer);
    let mut trainer = Trainer::new(b.model.clone(), config.trainer.learning_rate);
    ct_round(&b.world, &mut trainer, &b.space, &train, &config, 0).unwrap();
    let fresh = population(&b.world, 99, Stream::CtEvaluation, 40);
    let rate = |m: &TargetModel| {
        let results = run_searches(&b.world, m, &b.space, &fresh, &config.search).unwrap();
        flip_stats(&results, 25).unwrap().flip_rate
    };
    let (before, after) = (rate(&b.model), rate(trainer.model()));
    assert!(after <= before, "{before} -> {after}");
}

#[test]
fn reports_reproduce_exactly() {
    let b = battery();
    let config = CTConfig { rounds: 2, batch_size: 20, monitor_size: 10, ..small_config() };
    let a = ct_train(&b.world, &b.model, &b.space, &b.dataset, &config).unwrap();
    let c = ct_train(&b.world, &b.model, &b.space, &b.dataset, &config).unwrap();
    assert_eq!(a, c);
    assert_eq!(a.checkpoints.len(), 2);
    assert_eq!(a.checkpoints[1], a.model);
    let r = &a.report;
    assert_eq!(r.rounds.len(), 2);
    for v in [r.heldout_accuracy_before, r.heldout_accuracy_after, r.fr25_before, r.fr25_after, r.fr100_before, r.fr100_after] {
        assert!((0.0..=1.0).contains(&v));
    }
    assert!(r.fr100_before <= r.fr25_before && r.fr100_after <= r.fr25_after);
    assert_eq!(r.mix, MixRatio { counterfactual: 1, original: 1 });
}
