use ecvit::checkpoint::{Checkpoint, CheckpointError};
use ecvit::data::{synthetic_separable, Split, Variant};
use ecvit::train::{
    check_partition_flag, epoch_checkpoint, evaluate, load_checkpoint, nll, save_checkpoint, select_data, train,
    TrainOptions, TrainState, CSV_HEADER,
};
use ecvit::{Error, ModelConfig};

fn config() -> ModelConfig {
    ModelConfig {
        num_classes: 10,
        ..ModelConfig::micro()
    }
}

fn options() -> TrainOptions {
    TrainOptions {
        epochs: 2,
        batch: 8,
        lr: 0.01,
        seed: 3,
        limit_train: Some(32),
        limit_val: Some(16),
        ..TrainOptions::default()
    }
}

fn data() -> (ecvit::data::Dataset, ecvit::data::Dataset) {
    (
        synthetic_separable(Variant::Cifar10, Split::Train, 64, 20, 1),
        synthetic_separable(Variant::Cifar10, Split::Test, 32, 20, 2),
    )
}

fn run(opts: TrainOptions, dir: &std::path::Path) -> TrainState {
    let (t, v) = data();
    let (t, v) = select_data(&t, &v, &opts);
    let mut s = TrainState::new(&config(), opts).unwrap();
    train(&mut s, &t, &v, dir, None).unwrap();
    s
}

fn param_bits(s: &TrainState) -> Vec<u32> {
    s.model
        .store
        .params()
        .iter()
        .flat_map(|p| p.value.data().iter().map(|v| v.to_bits()))
        .collect()
}

#[test]
fn same_seed_same_run() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let x = run(options(), a.path());
    let y = run(options(), b.path());
    assert_eq!(param_bits(&x), param_bits(&y));
    for (m, n) in x.history.iter().zip(&y.history) {
        assert!(m.same_numbers(n));
    }
}

#[test]
fn resume_is_bitwise() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let full = run(options(), a.path());

    // pick up an interrupted run from its first-epoch checkpoint
    let mut resumed = load_checkpoint(&epoch_checkpoint(a.path(), 1)).unwrap();
    assert_eq!(resumed.epoch, 1);
    let (t, v) = data();
    let (t, v) = select_data(&t, &v, &resumed.options);
    train(&mut resumed, &t, &v, b.path(), None).unwrap();

    assert_eq!(param_bits(&resumed), param_bits(&full));
    assert_eq!(resumed.global_step, full.global_step);
    assert!(resumed.history[1].same_numbers(&full.history[1]));
}

#[test]
fn outputs_on_disk() {
    let dir = tempfile::tempdir().unwrap();
    let s = run(options(), dir.path());
    let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], CSV_HEADER);
    assert_eq!(lines.len(), 3);
    for e in 1..=2 {
        assert!(epoch_checkpoint(dir.path(), e).exists());
    }
    assert!(dir.path().join("best.ckpt").exists());
    assert_eq!(s.global_step, 2 * 4);
}

#[test]
fn checkpoint_save_load_save_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let s = run(TrainOptions { epochs: 1, ..options() }, dir.path());
    let p1 = dir.path().join("a.ckpt");
    let p2 = dir.path().join("b.ckpt");
    save_checkpoint(&s, &p1).unwrap();
    let back = load_checkpoint(&p1).unwrap();
    save_checkpoint(&back, &p2).unwrap();
    assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    assert_eq!(back.options, s.options);
    assert_eq!(back.opt.step, s.opt.step);
}

#[test]
fn checkpoint_faults_are_typed() {
    let s = TrainState::new(&config(), options()).unwrap();
    let mut ck = s.to_checkpoint();
    ck.entries.retain(|e| e.name != "param.head.bias");
    match TrainState::from_checkpoint(&ck) {
        Err(Error::Checkpoint(CheckpointError::NameMismatch { missing, unexpected })) => {
            assert_eq!(missing, vec!["param.head.bias".to_string()]);
            assert!(unexpected.is_empty());
        }
        other => panic!("{other:?}"),
    }

    let mut ck = s.to_checkpoint();
    let e = ck.entries.iter_mut().find(|e| e.name == "param.head.weight").unwrap();
    e.dims.reverse();
    assert!(matches!(
        TrainState::from_checkpoint(&ck),
        Err(Error::Checkpoint(CheckpointError::ShapeMismatch { .. }))
    ));

    let mut ck = s.to_checkpoint();
    ck.config_text = "depths = \"x\"".into();
    assert!(matches!(
        TrainState::from_checkpoint(&ck),
        Err(Error::Checkpoint(CheckpointError::BadConfig(_)))
    ));

    // flipping a dtype tag in the file is caught on read
    let mut bytes = s.to_checkpoint().to_bytes();
    let name = b"param.";
    let at = bytes.windows(name.len()).position(|w| w == name).unwrap();
    let len = u32::from_le_bytes(bytes[at - 4..at].try_into().unwrap()) as usize;
    bytes[at + len] = 9;
    assert!(matches!(
        Checkpoint::from_bytes(&bytes),
        Err(CheckpointError::BadDtype { tag: 9, .. })
    ));

    assert!(check_partition_flag(&s.model.config, Some(2)).is_ok());
    assert!(matches!(
        check_partition_flag(&s.model.config, Some(4)),
        Err(Error::Checkpoint(CheckpointError::ConfigConflict { .. }))
    ));
}

#[test]
fn zero_lr_without_decay_leaves_params() {
    let dir = tempfile::tempdir().unwrap();
    let opts = TrainOptions {
        lr: 0.0,
        weight_decay: 0.0,
        epochs: 1,
        ..options()
    };
    let before = param_bits(&TrainState::new(&config(), opts.clone()).unwrap());
    let after = run(opts, dir.path());
    assert_eq!(param_bits(&after), before);
}

#[test]
fn loss_falls_on_learnable_data() {
    let dir = tempfile::tempdir().unwrap();
    let opts = TrainOptions {
        epochs: 20,
        batch: 8,
        lr: 0.02,
        limit_train: None,
        limit_val: None,
        augment: false,
        ..options()
    };
    let s = run(opts, dir.path());
    let first = s.history[0].train_loss;
    let last = s.history.last().unwrap().train_loss;
    assert!(last < first * 0.8, "{first} -> {last}");
    let acc = s.history.last().unwrap().val_acc;
    assert!(acc > 0.3, "val acc {acc}");
}

#[test]
fn evaluate_matches_recount() {
    let (_, v) = data();
    let s = TrainState::new(&config(), options()).unwrap();
    let m = evaluate(&s.model, &v, 5).unwrap();
    assert_eq!(m.count, v.len());
    let mut loss = 0.0;
    let mut correct = 0;
    for (i, row) in m.logits.chunks(10).enumerate() {
        loss += nll(row, v.label(i));
        let best = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
            .unwrap()
            .0;
        correct += (best == v.label(i)) as usize;
    }
    assert!((m.loss - loss / v.len() as f64).abs() < 1e-12);
    assert_eq!(m.accuracy, correct as f64 / v.len() as f64);
    // batch size does not change eval results beyond float noise
    let m2 = evaluate(&s.model, &v, 32).unwrap();
    assert!((m.loss - m2.loss).abs() < 1e-5);
}

#[test]
fn class_count_mismatch_is_rejected() {
    let (t, v) = data();
    let mut s = TrainState::new(&ModelConfig::micro(), options()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(
        train(&mut s, &t, &v, dir.path(), None),
        Err(Error::Contract(_))
    ));
}

#[test]
fn moving_average_of_loss_falls_every_step() {
    use ecvit::data::preprocess;
    let ds = synthetic_separable(Variant::Cifar10, Split::Train, 16, 20, 4);
    let idx: Vec<usize> = (0..ds.len()).collect();
    let images = preprocess(&ds, &idx, (8, 8), None);
    let labels: Vec<usize> = idx.iter().map(|&i| ds.label(i)).collect();
    let mut s = TrainState::new(&config(), TrainOptions { seed: 5, ..options() }).unwrap();
    let losses: Vec<f64> = (0..50)
        .map(|_| ecvit::train::train_step(&mut s, &images, &labels, 0.005).unwrap().loss)
        .collect();
    let ma: Vec<f64> = losses.windows(10).map(|w| w.iter().sum::<f64>() / 10.0).collect();
    for w in ma.windows(2) {
        assert!(w[1] < w[0], "{ma:?}");
    }
}

#[test]
fn non_finite_loss_aborts_and_keeps_last_good() {
    let dir = tempfile::tempdir().unwrap();
    run(TrainOptions { keep_epoch_checkpoints: false, ..options() }, dir.path());
    let good = std::fs::read(dir.path().join("last.ckpt")).unwrap();

    let mut s = load_checkpoint(&dir.path().join("last.ckpt")).unwrap();
    s.options.epochs = 4;
    s.options.lr = 1e30;
    s.options.warmup = false;
    let (t, v) = data();
    let (t, v) = select_data(&t, &v, &s.options);
    let start = s.global_step;
    match train(&mut s, &t, &v, dir.path(), None) {
        Err(Error::NonFiniteLoss { step }) => assert!(step > start),
        other => panic!("{other:?}"),
    }
    assert_eq!(std::fs::read(dir.path().join("last.ckpt")).unwrap(), good);
}
