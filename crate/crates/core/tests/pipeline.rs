use std::collections::{BTreeMap, BTreeSet};

use awgnn_core::data::{
    build_vocabulary, chronological_split, expand_examples, generate_synthetic, load_item_features,
    load_purchases, load_sessions, take_recent_fraction, truncate_session, ExampleMode,
    FractionSpec, SynthConfig, FEATURES_FILE, PURCHASES_FILE, SESSIONS_FILE,
};

fn files(dir: &std::path::Path) -> Vec<Vec<u8>> {
    [SESSIONS_FILE, PURCHASES_FILE, FEATURES_FILE]
        .iter()
        .map(|f| std::fs::read(dir.join(f)).unwrap())
        .collect()
}

#[test]
fn generator_writes_identical_bytes_per_seed() {
    let cfg = SynthConfig {
        session_count: 400,
        ..SynthConfig::default()
    };
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let c = tempfile::tempdir().unwrap();
    generate_synthetic(&cfg, 5)
        .unwrap()
        .write(a.path())
        .unwrap();
    generate_synthetic(&cfg, 5)
        .unwrap()
        .write(b.path())
        .unwrap();
    generate_synthetic(&cfg, 6)
        .unwrap()
        .write(c.path())
        .unwrap();
    assert_eq!(files(a.path()), files(b.path()));
    assert_ne!(files(a.path()), files(c.path()));
}

#[test]
fn intra_block_mass_matches_concentration() {
    let cfg = SynthConfig::default();
    let data = generate_synthetic(&cfg, 3).unwrap();
    assert_eq!(cfg.item_count / cfg.block_count, 20);

    for from in 1..=cfg.item_count as u64 {
        let mass: f64 = (1..=cfg.item_count as u64)
            .filter(|&to| data.block_of_item(to) == data.block_of_item(from))
            .map(|to| data.transition_prob(from, to))
            .sum();
        assert!(mass >= cfg.concentration - 1e-12, "row {from}: {mass}");
    }

    // tally transitions in the generated clickstream, purchases included
    let purchases = data.purchase_map();
    let (mut inside, mut total) = (0usize, 0usize);
    for s in &data.sessions {
        let mut seq = s.items();
        seq.push(purchases[&s.session_id].item);
        for w in seq.windows(2) {
            total += 1;
            inside += (data.block_of_item(w[0]) == data.block_of_item(w[1])) as usize;
        }
    }
    let frac = inside as f64 / total as f64;
    let sigma = (cfg.concentration * (1.0 - cfg.concentration) / total as f64).sqrt();
    assert!(
        (frac - cfg.concentration).abs() < 4.0 * sigma,
        "{frac} over {total}"
    );
}

#[test]
fn final_day_holds_about_a_thirtieth() {
    let cfg = SynthConfig {
        session_count: 3000,
        day_count: 30,
        ..SynthConfig::default()
    };
    let data = generate_synthetic(&cfg, 1).unwrap();
    let (train, test) = chronological_split(&data.sessions).unwrap();
    assert!((90..=110).contains(&test.len()), "{}", test.len());
    assert_eq!(train.len() + test.len(), 3000);
}

#[test]
fn split_agrees_with_independent_day_bucketing() {
    let data = generate_synthetic(&SynthConfig::default(), 8).unwrap();
    let (train, test) = chronological_split(&data.sessions).unwrap();
    let day = |ms: i64| ms.div_euclid(86_400_000);
    let mut by_day: BTreeMap<i64, BTreeSet<u64>> = BTreeMap::new();
    for s in &data.sessions {
        by_day
            .entry(day(s.end_time))
            .or_default()
            .insert(s.session_id);
    }
    let (&last_day, last_ids) = by_day.iter().next_back().unwrap();
    let test_ids: BTreeSet<u64> = test.iter().map(|s| s.session_id).collect();
    assert_eq!(&test_ids, last_ids);
    let boundary = last_day * 86_400_000;
    assert!(train.iter().all(|s| s.end_time < boundary));
    assert!(test.iter().all(|s| s.end_time >= boundary));
}

#[test]
fn load_reproduces_generated_data() {
    let data = generate_synthetic(
        &SynthConfig {
            session_count: 500,
            ..SynthConfig::default()
        },
        2,
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    data.write(dir.path()).unwrap();
    let sessions = load_sessions(dir.path().join(SESSIONS_FILE)).unwrap();
    assert_eq!(sessions.len(), data.sessions.len());
    for (a, b) in sessions.iter().zip(&data.sessions) {
        assert_eq!(a.session_id, b.session_id);
        assert_eq!(a.items(), b.items());
        assert_eq!(a.events, b.events);
    }
    let universe = |ss: &[awgnn_core::data::Session]| {
        ss.iter().flat_map(|s| s.items()).collect::<BTreeSet<_>>()
    };
    assert_eq!(universe(&sessions), universe(&data.sessions));
    assert_eq!(
        load_purchases(dir.path().join(PURCHASES_FILE)).unwrap(),
        data.purchase_map()
    );
    let features = load_item_features(dir.path().join(FEATURES_FILE)).unwrap();
    assert_eq!(features, data.side_table());
}

#[test]
fn fraction_truncation_and_expansion_compose() {
    let data = generate_synthetic(&SynthConfig::default(), 4).unwrap();
    let (train, _) = chronological_split(&data.sessions).unwrap();
    for k in [1, 4, 8, 32, 64, 128] {
        let frac = take_recent_fraction(&train, FractionSpec::new(k).unwrap());
        assert_eq!(frac.len(), train.len().div_ceil(k));
        assert_eq!(frac.last(), train.last());
    }
    for p in [5, 10, 15, 20] {
        let ex =
            expand_examples(&train, &data.purchase_map(), ExampleMode::PurchaseLabel, p).unwrap();
        assert_eq!(ex.examples.len(), train.len());
        for (e, s) in ex.examples.iter().zip(&train) {
            let items = s.items();
            assert_eq!(e.input_items, items[items.len().saturating_sub(p)..]);
            assert_eq!(
                truncate_session(&e.input_items, p).unwrap(),
                &e.input_items[..]
            );
        }
    }
    let ex = expand_examples(&train, &data.purchase_map(), ExampleMode::NextItem, 10).unwrap();
    let side = data.side_table();
    let catalog = build_vocabulary(&ex.examples, &side);
    assert_eq!(catalog.len(), data.config.item_count);
    assert!(ex.examples.iter().all(|e| e.input_items.len() <= 10));
}
