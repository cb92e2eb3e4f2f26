use semcf::rng::Stream;
use semcf::world::{
    make_dataset, make_keypoint_dataset, train_target, CellCounts, DatasetDesign, ModelKind, TrainHyper, World,
    WorldConfig,
};

fn world() -> World {
    World::new(WorldConfig::default()).unwrap()
}

#[test]
fn balanced_classifier_generalizes() {
    let w = world();
    let design = DatasetDesign { label: "stripes".into(), confound: "ring".into(), cells: CellCounts::balanced(500) };
    let ds = make_dataset(&w, &design, Stream::TrainSet).unwrap();
    let trained = train_target(&ds, ModelKind::Classifier, &TrainHyper::default()).unwrap();
    eprintln!("{:?}", trained.summary);
    assert!(trained.summary.heldout_metric >= 0.95);
}

#[test]
fn keypoint_regressor_is_accurate() {
    let w = world();
    let ds = make_keypoint_dataset(&w, 2000, Stream::TrainSet).unwrap();
    let trained = train_target(&ds, ModelKind::Keypoint, &TrainHyper::default()).unwrap();
    eprintln!("{:?}", trained.summary);
    assert!(trained.summary.heldout_metric <= 0.05);
}

#[test]
fn training_is_deterministic() {
    let w = world();
    let design = DatasetDesign { label: "checkers".into(), confound: "ring".into(), cells: CellCounts::balanced(40) };
    let ds = make_dataset(&w, &design, Stream::TrainSet).unwrap();
    let hyper = TrainHyper { max_epochs: 5, ..Default::default() };
    let a = train_target(&ds, ModelKind::Classifier, &hyper).unwrap();
    let b = train_target(&ds, ModelKind::Classifier, &hyper).unwrap();
    assert_eq!(a, b);
}
