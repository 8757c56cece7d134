use awgnn_core::data::{
    build_vocabulary, expand_examples, generate_synthetic, Catalog, ExampleMode, SideInfoTable,
    SynthConfig,
};
use awgnn_core::eval::{encode_all, evaluate, metrics_from_ranks, rank_of_target, EncodedExample};
use awgnn_core::model::{
    load_checkpoint, save_checkpoint, CheckpointError, HyperParams, Model, SideIndex,
};
use awgnn_core::train::{train, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_setup(seed: u64) -> (Vec<EncodedExample>, Catalog, SideIndex) {
    let cfg = SynthConfig {
        item_count: 30,
        block_count: 5,
        session_count: 240,
        ..SynthConfig::default()
    };
    let data = generate_synthetic(&cfg, seed).unwrap();
    let side = data.side_table();
    let exp = expand_examples(
        &data.sessions,
        &data.purchase_map(),
        ExampleMode::PurchaseLabel,
        10,
    )
    .unwrap();
    let catalog = build_vocabulary(&exp.examples, &side);
    let index = SideIndex::new(&catalog, &side);
    (encode_all(&exp.examples, &catalog), catalog, index)
}

fn hyper() -> HyperParams {
    HyperParams {
        dim: 12,
        use_adaptive: true,
        use_msi: true,
        ..HyperParams::default()
    }
}

#[test]
fn same_seed_gives_identical_log_and_parameters() {
    let (examples, catalog, side) = small_setup(1);
    let cfg = TrainConfig {
        epochs: 4,
        batch_size: 32,
        learning_rate: 5e-3,
        ..TrainConfig::default()
    };
    let run = || {
        let model = Model::new(hyper(), catalog.len(), side.pair_count(), 9).unwrap();
        train(model, &examples, &catalog, &side, &cfg, |_| {}).unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.model, b.model);
    assert_eq!(a.log.epochs.len(), b.log.epochs.len());
    for (x, y) in a.log.epochs.iter().zip(&b.log.epochs) {
        assert_eq!(
            (x.epoch, x.loss, x.recall, x.mrr, x.lr),
            (y.epoch, y.loss, y.recall, y.mrr, y.lr)
        );
    }
    assert_eq!(a.log.best_epoch, b.log.best_epoch);
}

#[test]
fn memorises_a_single_example_at_constant_rate() {
    let catalog = Catalog::new(1..=20, []);
    let side = SideIndex::none(20);
    let examples = vec![EncodedExample {
        items: vec![3, 8, 3, 11],
        target: Some(15),
    }];
    let cfg = TrainConfig {
        epochs: 200,
        learning_rate: 1e-2,
        lr_decay_factor: 1.0,
        ..TrainConfig::default()
    };
    let model = Model::new(hyper(), 20, 0, 2).unwrap();
    let out = train(model, &examples, &catalog, &side, &cfg, |_| {}).unwrap();
    assert_eq!(out.log.validation_size, 0);
    assert_eq!(out.log.epochs.len(), 200);
    assert!(out.model.loss(&side, &[3, 8, 3, 11], 15).unwrap() < 1e-3);
}

#[test]
fn early_stopping_keeps_best_validation_epoch() {
    let (examples, catalog, side) = small_setup(2);
    let cfg = TrainConfig {
        epochs: 25,
        batch_size: 16,
        learning_rate: 3e-2,
        lr_decay_factor: 1.0,
        patience: 2,
        ..TrainConfig::default()
    };
    let model = Model::new(hyper(), catalog.len(), side.pair_count(), 4).unwrap();
    let out = train(model, &examples, &catalog, &side, &cfg, |_| {}).unwrap();
    let log = &out.log;
    let best = log
        .epochs
        .iter()
        .map(|e| e.mrr)
        .fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(log.epochs[log.best_epoch - 1].mrr, best);
    let (_, val) = awgnn_core::train::validation_split(&examples, cfg.validation_fraction);
    let report = evaluate(&out.model, val, &catalog, &side, 20).unwrap();
    assert_eq!(report.mrr, best);
    if log.stopped_early {
        assert_eq!(log.epochs.len(), log.best_epoch + cfg.patience);
    }
}

#[test]
fn checkpoint_file_round_trip_and_catalog_guard() {
    let (_, catalog, side) = small_setup(3);
    let model = Model::new(hyper(), catalog.len(), side.pair_count(), 5).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    save_checkpoint(&path, &model, &catalog).unwrap();
    let back = load_checkpoint(&path, Some(catalog.fingerprint())).unwrap();
    assert_eq!(back.model, model);
    assert_eq!(back.catalog, catalog);

    let other = Catalog::new([1, 2, 3], []);
    assert!(matches!(
        load_checkpoint(&path, Some(other.fingerprint())),
        Err(CheckpointError::CatalogMismatch { .. })
    ));

    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
    assert!(matches!(
        load_checkpoint(&path, None),
        Err(CheckpointError::Truncated)
    ));
}

fn naive_rank(scores: &[f64], target: usize) -> usize {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    order.iter().position(|&i| i == target).unwrap() + 1
}

#[test]
fn ranks_agree_with_full_sort_including_ties() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for case in 0..1000 {
        // coarse values force ties in about half the cases
        let levels = if case % 2 == 0 { 5 } else { 1_000_000 };
        let scores: Vec<f64> = (0..50)
            .map(|_| rng.random_range(0..levels) as f64 / levels as f64)
            .collect();
        let target = rng.random_range(0..50);
        assert_eq!(rank_of_target(&scores, target), naive_rank(&scores, target));
        let shifted: Vec<f64> = scores.iter().map(|s| 2.0 * s + 3.0).collect();
        assert_eq!(
            rank_of_target(&shifted, target),
            rank_of_target(&scores, target)
        );
    }
}

#[test]
fn report_invariants_hold_on_trained_model() {
    let (examples, catalog, side) = small_setup(4);
    let model = Model::new(hyper(), catalog.len(), side.pair_count(), 6).unwrap();
    let mut test = examples.clone();
    test.push(EncodedExample {
        items: vec![0, 1],
        target: None,
    });
    let report = evaluate(&model, &test, &catalog, &side, 20).unwrap();
    assert!(report.mrr <= report.recall && report.recall <= 1.0);
    assert_eq!(report.n_unscoreable, 1);
    let sum: usize = report.segments[1..].iter().map(|s| s.n).sum();
    assert_eq!(sum, report.n_examples);

    let ranks: Vec<Option<usize>> = test
        .iter()
        .map(|e| {
            let t = e.target?;
            let s = model.scores(&side, &e.items).unwrap();
            Some(naive_rank(&s, t))
        })
        .collect();
    assert_eq!(metrics_from_ranks(&ranks, 20), (report.recall, report.mrr));
}

#[test]
fn block_markov_data_is_learnable_without_rate_decay() {
    // Same data and width as the acceptance overfit check, but a constant
    // rate of 1e-2 and no early stop. Shows the capacity is there.
    let data = generate_synthetic(
        &SynthConfig {
            item_count: 50,
            session_count: 500,
            ..SynthConfig::default()
        },
        42,
    )
    .unwrap();
    let x = expand_examples(
        &data.sessions,
        &data.purchase_map(),
        ExampleMode::PurchaseLabel,
        10,
    )
    .unwrap();
    let catalog = build_vocabulary(&x.examples, &SideInfoTable::empty());
    let side = SideIndex::none(catalog.len());
    let examples = encode_all(&x.examples, &catalog);
    let cfg = TrainConfig {
        epochs: 30,
        learning_rate: 1e-2,
        lr_decay_factor: 1.0,
        patience: 30,
        ..TrainConfig::default()
    };
    let hyper = HyperParams {
        dim: 32,
        ..HyperParams::default()
    };
    let model = Model::new(hyper, catalog.len(), 0, cfg.seed).unwrap();
    let out = train(model, &examples, &catalog, &side, &cfg, |_| {}).unwrap();
    let report = evaluate(&out.model, &examples, &catalog, &side, 20).unwrap();
    assert!(
        report.recall >= 0.95,
        "training-set recall {}",
        report.recall
    );
}
