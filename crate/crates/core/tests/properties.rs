use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::Rng;

use indexflow_core::cohort::{partition_into_fifths, sample_cohort, MembershipCount, GROUP_COUNT};
use indexflow_core::dataset::{
    build_company_dataset, chronological_split, impute_missing, lag_name, normalize_column, DatasetConfig,
    LabeledDataset, IN_INDEX,
};
use indexflow_core::ingest::{
    parse_company_panel, parse_membership_file, resolve_weekly_date, CompanyPanel, PanelRow, TradingDate,
};
use indexflow_core::mlp::{evaluate, forward, init_network, train, TrainOptions};
use indexflow_core::seed::rng;
use indexflow_core::synth::{generate_corpus, SynthConfig};
use indexflow_core::ColumnMeta;

fn date(offset: i64) -> TradingDate {
    TradingDate::from_ymd(2002, 1, 4).unwrap().add_days(offset)
}

proptest! {
    #[test]
    fn resolve_is_idempotent(mut offsets in proptest::collection::btree_set(0i64..400, 1..40), req in 0i64..420) {
        offsets.insert(0);
        let available: Vec<TradingDate> = offsets.iter().map(|o| date(*o)).collect();
        if let Ok(d) = resolve_weekly_date(date(req), &available) {
            prop_assert!(date(req).days_since(d) <= 6 && d <= date(req));
            prop_assert_eq!(resolve_weekly_date(d, &available).unwrap(), d);
        }
    }

    #[test]
    fn snapshot_lag_stays_in_window(gap in 0i64..12) {
        let requested = date(100);
        let file = format!("# effective_date={}\nticker\nAAA\n", requested.add_days(-gap));
        match parse_membership_file(file.as_bytes(), requested, "m.csv") {
            Ok(s) => {
                prop_assert!(gap <= 6);
                prop_assert!((0..=6).contains(&s.requested_date.days_since(s.effective_date)));
            }
            Err(_) => prop_assert!(gap > 6),
        }
    }

    #[test]
    fn panel_round_trip(
        rows in proptest::collection::btree_map(
            0i64..3000,
            proptest::collection::vec(proptest::option::of(-1e6f64..1e6), 3),
            1..30,
        )
    ) {
        let mut panel = CompanyPanel::new("RT", vec!["price".into(), "trades".into(), "sentiment".into()]);
        for (d, values) in rows {
            panel.rows.push(PanelRow { date: date(d), values });
        }
        let mut buf = Vec::new();
        panel.write_csv(&mut buf).unwrap();
        let back = parse_company_panel(&buf, "RT", "rt.csv").unwrap();
        prop_assert_eq!(back, panel);
    }

    #[test]
    fn normalization_is_affine_and_keeps_ranks(
        col in proptest::collection::vec(proptest::option::of(-1e3f64..1e3), 1..60)
    ) {
        prop_assume!(col.iter().any(Option::is_some));
        let norm = normalize_column(&col).unwrap();
        let pairs: Vec<(f64, f64)> = col.iter().zip(&norm.values).filter_map(|(a, b)| Some(((*a)?, (*b)?))).collect();
        for (a, b) in &pairs {
            prop_assert!((0.0..=1.0).contains(b));
            if !norm.degenerate {
                let back = b * (norm.raw_max - norm.raw_min) + norm.raw_min;
                prop_assert!((back - a).abs() <= 1e-9 * (1.0 + a.abs()));
            }
            for (c, d) in &pairs {
                if a < c {
                    prop_assert!(b <= d);
                }
            }
        }
        let filled = impute_missing(&norm.values).unwrap();
        for (orig, new) in norm.values.iter().zip(&filled.values) {
            if let Some(v) = orig {
                prop_assert_eq!(v, new);
            }
        }
    }

    #[test]
    fn partition_properties(counts in proptest::collection::vec(0usize..2000, 1..200)) {
        let counts: Vec<MembershipCount> = counts
            .into_iter()
            .enumerate()
            .map(|(i, count)| MembershipCount { ticker: format!("T{i}"), count })
            .collect();
        let p = partition_into_fifths(&counts).unwrap();
        prop_assert_eq!(p.groups.iter().map(|g| g.members.len()).sum::<usize>(), counts.len());
        let lo = p.boundaries[0];
        let hi = p.boundaries[GROUP_COUNT];
        for c in &counts {
            let g = p.groups.iter().find(|g| g.members.contains(&c.ticker)).unwrap();
            let k = g.group_index;
            let v = c.count as f64;
            prop_assert!(p.boundaries[k] <= v || hi == lo);
            prop_assert!(v < p.boundaries[k + 1] || (k == GROUP_COUNT - 1 && v == hi) || hi == lo);
        }
        let per = 1 + counts.len() % 3;
        let deficient = p.groups.iter().any(|g| g.members.len() < per);
        let s = sample_cohort(&p.groups, per, 9, true).unwrap();
        if !deficient {
            prop_assert_eq!(s.len(), GROUP_COUNT * per);
        }
    }

    #[test]
    fn forward_stays_open(x in proptest::collection::vec(-1e6f64..1e6, 3), seed in 0u64..50) {
        let m = init_network(&[3, 5, 4, 1], seed).unwrap();
        let out = forward(&m, &x).unwrap().output();
        prop_assert!(out > 0.0 && out < 1.0 && out.is_finite());
    }
}

#[test]
fn membership_column_is_characteristic_function() {
    let corpus = generate_corpus(&SynthConfig {
        n_companies: 4,
        n_weeks: 200,
        switch_prob: 0.2,
        ..SynthConfig::default()
    })
    .unwrap();
    for c in &corpus.companies {
        let ds = build_company_dataset(&c.panel, &corpus.snapshots, &DatasetConfig::default())
            .unwrap()
            .dataset;
        let j = ds.feature_names.iter().position(|f| f == IN_INDEX).unwrap();
        for (i, d) in ds.dates.iter().enumerate() {
            let snap = corpus.snapshots.iter().find(|s| s.requested_date == *d).unwrap();
            let want = if snap.constituents.contains(&c.panel.ticker) { 1.0 } else { 0.0 };
            assert_eq!(ds.x[(i, j)], want);
        }
    }
}

fn raw(meta: &ColumnMeta, v: f64) -> f64 {
    v * (meta.raw_max - meta.raw_min) + meta.raw_min
}

#[test]
fn lag_column_is_previous_value() {
    let corpus = generate_corpus(&SynthConfig {
        n_companies: 2,
        n_weeks: 150,
        ..SynthConfig::default()
    })
    .unwrap();
    for c in &corpus.companies {
        let ds = build_company_dataset(&c.panel, &corpus.snapshots, &DatasetConfig::default())
            .unwrap()
            .dataset;
        let f = ds.feature_names.iter().position(|n| n == "total_return").unwrap();
        let l = ds.feature_names.iter().position(|n| *n == lag_name("total_return")).unwrap();
        for t in 1..ds.n_rows() {
            let prev = raw(&ds.column_meta[f], ds.x[(t - 1, f)]);
            let lagged = raw(&ds.column_meta[l], ds.x[(t, l)]);
            assert!((prev - lagged).abs() < 1e-12, "row {t}: {prev} vs {lagged}");
        }
    }
}

#[test]
fn split_keeps_time_order() {
    let corpus = generate_corpus(&SynthConfig {
        n_companies: 1,
        n_weeks: 120,
        ..SynthConfig::default()
    })
    .unwrap();
    let ds = build_company_dataset(&corpus.companies[0].panel, &corpus.snapshots, &DatasetConfig::default())
        .unwrap()
        .dataset;
    for frac in [0.5, 0.8, 0.9] {
        let (tr, te) = chronological_split(&ds, frac).unwrap();
        assert!(tr.dates.iter().max() < te.dates.iter().min());
        assert_eq!(tr.n_rows() + te.n_rows(), ds.n_rows());
    }
}

#[test]
fn generators_are_deterministic() {
    let cfg = SynthConfig {
        n_companies: 3,
        n_weeks: 100,
        missing_prob: 0.1,
        ..SynthConfig::default()
    };
    assert_eq!(generate_corpus(&cfg).unwrap(), generate_corpus(&cfg).unwrap());
    let other = generate_corpus(&SynthConfig { seed: 3, ..cfg.clone() }).unwrap();
    assert_ne!(other.companies[0].panel, generate_corpus(&cfg).unwrap().companies[0].panel);
}

#[test]
fn full_batch_loss_decreases() {
    let corpus = generate_corpus(&SynthConfig {
        n_companies: 1,
        n_weeks: 400,
        ..SynthConfig::default()
    })
    .unwrap();
    let ds = build_company_dataset(&corpus.companies[0].panel, &corpus.snapshots, &DatasetConfig::default())
        .unwrap()
        .dataset;
    let m = init_network(&[ds.n_features(), 8, 1], 11).unwrap();
    let opts = TrainOptions {
        epochs: 50,
        learning_rate: 0.05,
        batch_size: ds.n_rows(),
        seed: 11,
    };
    let (_, history) = train(&m, &ds, &opts).unwrap();
    assert_eq!(history.len(), 50);
    for w in history.windows(2) {
        assert!(w[1] < w[0], "{w:?}");
    }
}

#[test]
fn separable_data_is_learned() {
    let mut r = rng(200);
    let mut rows = Vec::new();
    let mut y = Vec::new();
    while y.len() < 200 {
        let (a, b): (f64, f64) = (r.gen(), r.gen());
        if (a + b - 1.0).abs() < 0.05 {
            continue;
        }
        rows.extend([a, b]);
        y.push(u8::from(a + b > 1.0));
    }
    let ds = LabeledDataset {
        ticker: "SEP".into(),
        dates: (0..200).map(|k| date(7 * k)).collect(),
        feature_names: vec!["a".into(), "b".into()],
        x: DMatrix::from_row_slice(200, 2, &rows),
        y,
        column_meta: ["a", "b"]
            .iter()
            .map(|n| ColumnMeta {
                name: n.to_string(),
                raw_min: 0.0,
                raw_max: 1.0,
                mean_used: 0.5,
                imputed_count: 0,
                degenerate: false,
            })
            .collect(),
    };
    let m = init_network(&[2, 8, 1], 3).unwrap();
    let opts = TrainOptions {
        epochs: 500,
        learning_rate: 0.5,
        batch_size: 32,
        seed: 3,
    };
    let (m, _) = train(&m, &ds, &opts).unwrap();
    let acc = evaluate(&m, &ds, 0.5).unwrap().accuracy;
    assert!(acc >= 0.95, "training accuracy {acc}");
}
