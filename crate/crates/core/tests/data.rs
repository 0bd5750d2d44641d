use mtlc_core::data::{assign_folds, synth_generate, training_subset, DataError, Grouping, SynthConfig};
use proptest::prelude::*;

fn cfg(seed: u64) -> SynthConfig {
    SynthConfig {
        n_rows: 300,
        d: 8,
        groups: vec![vec![0, 2], vec![1, 3, 4]],
        within_group_angle: 0.4,
        label_rate: vec![0.6, 0.3, 0.5, 0.9, 0.2],
        mnar_strength: 0.0,
        noise_sd: 0.5,
        n_row_groups: Some(25),
        seed,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn folds_partition_rows_and_respect_groups(
        seed in 0u64..500, n_folds in 2usize..8, shift in 0usize..10, grouped in any::<bool>(),
    ) {
        let ds = synth_generate(&cfg(seed)).unwrap().dataset;
        let grouping = if grouped { Grouping::Group } else { Grouping::Row };
        let fa = assign_folds(&ds, n_folds, grouping, seed).unwrap().with_shift(shift);
        prop_assert!(fa.fold_of_row.iter().all(|&f| f < n_folds));
        for r in 0..ds.n_rows() {
            prop_assert_eq!(fa.fold_at(fa.position(r)), fa.fold_of_row[r]);
        }
        let test = fa.test_rows();
        prop_assert!(test.iter().all(|&r| fa.fold_of_row[r] == (n_folds - 1 + shift) % n_folds));
        if grouped {
            let g = ds.groups().unwrap();
            for a in 0..ds.n_rows() {
                for b in 0..a {
                    if g[a] == g[b] {
                        prop_assert_eq!(fa.fold_of_row[a], fa.fold_of_row[b]);
                    }
                }
            }
        }
    }

    #[test]
    fn training_subset_selects_exactly_the_requested_labels(
        seed in 0u64..500,
        counts in prop::collection::vec(0usize..=3, 5),
        extra in prop::option::of(0usize..5),
        shift in 0usize..4,
    ) {
        let ds = synth_generate(&cfg(seed)).unwrap().dataset;
        let fa = assign_folds(&ds, 4, Grouping::Row, seed + 1).unwrap().with_shift(shift);
        let result = training_subset(&ds, &fa, &counts, extra);
        if let Some(j) = extra {
            if counts[j] + 1 > 3 {
                prop_assert!(result.is_err());
                return Ok(());
            }
        }
        let sel = result.unwrap();
        let mut want_counts = vec![0usize; 5];
        let mut want_extra = 0;
        let mut want_rows = Vec::new();
        for r in 0..ds.n_rows() {
            let pos = (fa.fold_of_row[r] + 4 - shift % 4) % 4;
            let mut any = false;
            for t in 0..5 {
                let want = ds.is_present(r, t) && (pos < counts[t] || (extra == Some(t) && pos == counts[t]));
                prop_assert_eq!(sel.includes(r, t), want);
                if want {
                    want_counts[t] += 1;
                    any = true;
                    if pos == counts[t] {
                        want_extra += 1;
                    }
                }
            }
            if any {
                want_rows.push(r);
            }
        }
        prop_assert_eq!(&sel.counts, &want_counts);
        prop_assert_eq!(sel.extra_count, want_extra);
        prop_assert_eq!(&sel.rows, &want_rows);
        prop_assert!(sel.rows.iter().all(|&r| fa.position(r) != 3));
    }
}

#[test]
fn synthesis_is_deterministic_per_seed() {
    let a = synth_generate(&cfg(4)).unwrap();
    let b = synth_generate(&cfg(4)).unwrap();
    let c = synth_generate(&cfg(5)).unwrap();
    assert_eq!(a.dataset, b.dataset);
    assert_ne!(a.dataset, c.dataset);
}

#[test]
fn label_rates_are_roughly_respected_without_mnar() {
    let mut c = cfg(1);
    c.n_rows = 20_000;
    let ds = synth_generate(&c).unwrap().dataset;
    for (t, rate) in c.label_rate.iter().enumerate() {
        let observed = ds.present_count(t) as f64 / c.n_rows as f64;
        // Four binomial standard deviations.
        let sd = (rate * (1.0 - rate) / c.n_rows as f64).sqrt();
        assert!((observed - rate).abs() < 4.0 * sd, "task {t}: {observed} vs {rate}");
    }
}

#[test]
fn task_weights_are_unit_vectors_with_the_stated_angle() {
    let out = synth_generate(&cfg(2)).unwrap();
    let d = 8;
    let k = 5;
    for t in 0..k {
        let w = &out.weights[t * d..(t + 1) * d];
        assert!((w.iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-12);
    }
    let sim = |a: usize, b: usize| out.similarity[a * k + b];
    // Same-group tasks share cos(angle) with the group direction, so their
    // similarity is at least cos(2 * angle).
    assert!(sim(0, 2) >= (0.8f64).cos() - 1e-12);
    assert!(sim(1, 3) >= (0.8f64).cos() - 1e-12);
    for a in 0..k {
        assert_eq!(sim(a, a), 1.0);
    }
}

#[test]
fn invalid_configurations_are_rejected() {
    let mut c = cfg(0);
    c.groups = vec![vec![0, 1], vec![1, 2, 3]];
    assert!(matches!(synth_generate(&c), Err(DataError::Config { .. })));
    let mut c = cfg(0);
    c.label_rate[2] = 0.0;
    assert!(synth_generate(&c).is_err());
    let ds = synth_generate(&cfg(0)).unwrap().dataset;
    assert!(assign_folds(&ds, 1, Grouping::Row, 0).is_err());
    let fa = assign_folds(&ds, 4, Grouping::Row, 0).unwrap();
    assert!(training_subset(&ds, &fa, &[4, 0, 0, 0, 0], None).is_err());
}
