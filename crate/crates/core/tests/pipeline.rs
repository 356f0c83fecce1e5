use std::path::Path;

use hypercol::config::RunConfig;
use hypercol::data::{generate_synthetic, load_manifest, SyntheticConfig};
use hypercol::experiment::{initial_state, prepare, run_seed, Prepared};
use hypercol::train::{evaluate, metrics_csv, Checkpoint, TrainState};

fn tiny_run(epochs: usize) -> RunConfig {
    let text = format!(
        "data.num_classes=3\ndata.contexts_per_class=3\ndata.images_per_context=4\ndata.image_size=32x32\ndata.seed=5\n\
         model.width_multiplier=0.0625\ntaps.reduce_channels=2\ntaps.pool_kernel=8x8\ntaps.pool_stride=8x8\n\
         train.epochs={epochs}\ntrain.batch_size=8\ntrain.lr0=0.01\ntrain.decay_epoch={}\nsplit.holdout=1\n",
        epochs / 2
    );
    RunConfig::parse(&text).unwrap()
}

fn tiny_data(cfg: &RunConfig, dir: &Path) -> Prepared {
    let manifest = generate_synthetic(&cfg.data, dir).unwrap();
    let ds = load_manifest(&manifest).unwrap();
    prepare(cfg, &ds, 0, cfg.holdout).unwrap()
}

fn train_from(cfg: &RunConfig, prepared: &Prepared, state: TrainState) -> (String, TrainState) {
    let run = run_seed(cfg, prepared, state, |_, _| Ok(())).unwrap();
    (metrics_csv(&run.metrics), run.state)
}

#[test]
fn desk_dataset_layout() {
    let cfg = SyntheticConfig { seed: 1, ..SyntheticConfig::default() };
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let manifest = generate_synthetic(&cfg, a.path()).unwrap();
    let ds = load_manifest(&manifest).unwrap();
    assert_eq!(ds.len(), 1200);
    let counts = ds.domain_counts();
    assert_eq!(counts.len(), 24);
    assert!(counts.values().all(|&c| c == 50));
    for s in &ds.samples {
        let bbox = s.bbox.expect("synthetic samples carry a bbox");
        assert!(bbox.area() * 10 >= 64 * 64, "{bbox:?}");
    }

    let again = generate_synthetic(&cfg, b.path()).unwrap();
    assert_eq!(std::fs::read(&manifest).unwrap(), std::fs::read(&again).unwrap());
    for s in ds.samples.iter().step_by(97) {
        let rel = s.path.strip_prefix(a.path()).unwrap();
        assert_eq!(std::fs::read(&s.path).unwrap(), std::fs::read(b.path().join(rel)).unwrap());
    }
}

#[test]
fn zero_epochs_leave_the_model_alone() {
    let cfg = tiny_run(0);
    let dir = tempfile::tempdir().unwrap();
    let prepared = tiny_data(&cfg, dir.path());
    let start = initial_state(&cfg, 3, &prepared).unwrap();
    let run = run_seed(&cfg, &prepared, start.clone(), |_, _| Ok(())).unwrap();
    assert!(run.metrics.is_empty());
    assert_eq!(run.state, start);
}

#[test]
fn training_is_reproducible_and_resumable() {
    let cfg = tiny_run(4);
    let dir = tempfile::tempdir().unwrap();
    let prepared = tiny_data(&cfg, dir.path());
    let (trace_a, a) = train_from(&cfg, &prepared, initial_state(&cfg, 2, &prepared).unwrap());
    let (trace_b, b) = train_from(&cfg, &prepared, initial_state(&cfg, 2, &prepared).unwrap());
    assert_eq!(trace_a, trace_b);
    let blob = cfg.for_seed(2).to_text();
    assert_eq!(Checkpoint::from_state(&a, &blob).encode(), Checkpoint::from_state(&b, &blob).encode());

    // Two epochs, a checkpoint round trip, then the remaining two.
    let half = RunConfig { train: hypercol::train::TrainConfig { epochs: 2, decay_epoch: 2, ..cfg.train.clone() }, ..cfg.clone() };
    let (first, mid) = train_from(&half, &prepared, initial_state(&cfg, 2, &prepared).unwrap());
    let bytes = Checkpoint::from_state(&mid, &blob).encode();
    let restored = Checkpoint::decode(&bytes).unwrap().to_state(&cfg.model_config()).unwrap();
    assert_eq!(restored, mid);
    let (second, resumed) = train_from(&cfg, &prepared, restored);
    assert_eq!(Checkpoint::from_state(&resumed, &blob).encode(), Checkpoint::from_state(&a, &blob).encode());
    let joined = format!("{first}{}", second.split_once('\n').unwrap().1);
    assert_eq!(joined, trace_a);
}

#[test]
fn loss_falls_when_overfitting() {
    let cfg = tiny_run(5);
    let dir = tempfile::tempdir().unwrap();
    let prepared = tiny_data(&cfg, dir.path());
    let run = run_seed(&cfg, &prepared, initial_state(&cfg, 0, &prepared).unwrap(), |_, _| Ok(())).unwrap();
    let first = run.metrics.first().unwrap().train.loss;
    let last = run.metrics.last().unwrap().train.loss;
    assert!(last < first, "{first} -> {last}");
}

#[test]
fn evaluation_does_not_touch_the_model() {
    let cfg = tiny_run(1);
    let dir = tempfile::tempdir().unwrap();
    let prepared = tiny_data(&cfg, dir.path());
    let state = initial_state(&cfg, 1, &prepared).unwrap();
    let before = state.clone();
    let a = evaluate(&state.model, &prepared.test, &state.normalization, 5).unwrap();
    let b = evaluate(&state.model, &prepared.test, &state.normalization, 5).unwrap();
    assert_eq!(a, b);
    assert_eq!(state, before);
    assert!((0.0..=1.0).contains(&a.accuracy));
}

#[test]
fn committed_desk_config_is_the_default() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk_ood.cfg");
    let cfg = RunConfig::parse(&std::fs::read_to_string(path).unwrap()).unwrap();
    assert_eq!(cfg, RunConfig::default());
}
