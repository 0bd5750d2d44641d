use mtlc_core::data::{assign_folds, training_subset, Dataset, Grouping, Selection};
use mtlc_core::learner::{loss_and_grad, predict, shared_grad, task_losses, train, train_observed, Batch, ModelConfig, Network};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn names(prefix: &str, n: usize) -> Vec<String> {
    (0..n).map(|i| format!("{prefix}{i}")).collect()
}

/// Random dataset with roughly a third of the labels missing.
fn dataset(n: usize, d: usize, k: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let features: Vec<f64> = (0..n * d).map(|_| rng.random_range(-1.5..1.5)).collect();
    let labels: Vec<bool> = (0..n * k).map(|_| rng.random_bool(0.5)).collect();
    let mut present: Vec<bool> = (0..n * k).map(|_| rng.random_bool(0.7)).collect();
    for t in 0..k {
        present[t] = true;
    }
    Dataset::new(features, labels, present, None, names("f", d), names("t", k)).unwrap()
}

fn everything(ds: &Dataset) -> Selection {
    // Every row in the first fold.
    let mut f = assign_folds(ds, 2, Grouping::Row, 0).unwrap();
    f.fold_of_row.iter_mut().for_each(|x| *x = 0);
    training_subset(ds, &f, &vec![1; ds.n_tasks()], None).unwrap()
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Objective computed directly from the parameter layout.
fn oracle_loss(net: &Network, ds: &Dataset, sel: &Selection, rows: &[usize]) -> f64 {
    let (d, r, k) = (net.d, net.r, net.k);
    let p = &net.params;
    let mut total = 0.0;
    for &row in rows {
        let x = ds.row(row);
        let h: Vec<f64> = (0..r)
            .map(|u| (p[r * d + u] + (0..d).map(|i| p[u * d + i] * x[i]).sum::<f64>()).max(0.0))
            .collect();
        for t in 0..k {
            if !sel.includes(row, t) {
                continue;
            }
            let z = p[r * d + r + k * r + t] + (0..r).map(|u| p[r * d + r + t * r + u] * h[u]).sum::<f64>();
            let q = sigmoid(z).clamp(1e-7, 1.0 - 1e-7);
            total -= if ds.label(row, t).unwrap() { q.ln() } else { (1.0 - q).ln() };
        }
    }
    total / rows.len() as f64
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn gradient_matches_central_differences(
        d in 1usize..=6, r in 1usize..=8, k in 1usize..=4, seed in 0u64..1000,
    ) {
        let ds = dataset(12, d, k, seed);
        let sel = everything(&ds);
        let net = Network::init(d, r, k, seed + 1);
        let batch = Batch { ds: &ds, sel: &sel, rows: &sel.rows };
        let (loss, grad) = loss_and_grad(&net, &batch);
        prop_assert!((loss - oracle_loss(&net, &ds, &sel, &sel.rows)).abs() < 1e-10);
        for i in 0..net.params.len() {
            let h = 1e-6;
            let mut up = net.clone();
            up.params[i] += h;
            let mut dn = net.clone();
            dn.params[i] -= h;
            let fd = (oracle_loss(&up, &ds, &sel, &sel.rows) - oracle_loss(&dn, &ds, &sel, &sel.rows)) / (2.0 * h);
            let scale = grad[i].abs().max(fd.abs()).max(1e-3);
            prop_assert!((grad[i] - fd).abs() <= 1e-4 * scale, "param {i}: {} vs {fd}", grad[i]);
        }
    }

    #[test]
    fn unselected_label_bits_do_not_matter(seed in 0u64..1000) {
        let ds = dataset(40, 3, 3, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 7);
        let mut labels = Vec::new();
        let mut present = Vec::new();
        for row in 0..ds.n_rows() {
            for t in 0..3 {
                present.push(ds.is_present(row, t));
                labels.push(ds.label(row, t).unwrap_or_else(|| rng.random_bool(0.5)));
            }
        }
        let flipped = Dataset::new(ds.features().to_vec(), labels, present, None, names("f", 3), names("t", 3)).unwrap();
        let fa = assign_folds(&ds, 4, Grouping::Row, seed).unwrap();
        let cfg = ModelConfig { r: 4, epochs: 3, batch_size: 8, learning_rate: 0.01, seed, ..ModelConfig::default() };
        let a = train(&ds, &training_subset(&ds, &fa, &[2, 1, 3], None).unwrap(), &cfg).unwrap();
        let b = train(&flipped, &training_subset(&flipped, &fa, &[2, 1, 3], None).unwrap(), &cfg).unwrap();
        prop_assert_eq!(a.net.params, b.net.params);
    }
}

#[test]
fn full_batch_loss_decreases_monotonically() {
    let ds = dataset(80, 4, 3, 5);
    let sel = everything(&ds);
    let cfg = ModelConfig {
        r: 8,
        epochs: 50,
        batch_size: 1000,
        learning_rate: 1e-3,
        seed: 2,
        ..ModelConfig::default()
    };
    let mut losses = Vec::new();
    train_observed(&ds, &sel, &cfg, |v| losses.push(loss_and_grad(v.net, &v.batch).0)).unwrap();
    assert_eq!(losses.len(), 50);
    for w in losses.windows(2) {
        assert!(w[1] <= w[0], "{} then {}", w[0], w[1]);
    }
}

#[test]
fn training_is_deterministic_and_seed_dependent() {
    let ds = dataset(60, 3, 2, 1);
    let sel = everything(&ds);
    let cfg = ModelConfig {
        r: 4,
        epochs: 4,
        batch_size: 16,
        learning_rate: 0.01,
        seed: 3,
        ..ModelConfig::default()
    };
    let a = train(&ds, &sel, &cfg).unwrap();
    let b = train(&ds, &sel, &cfg).unwrap();
    assert_eq!(a, b);
    let c = train(&ds, &sel, &ModelConfig { seed: 4, ..cfg }).unwrap();
    assert_ne!(a.net.params, c.net.params);
    assert_eq!(a.config_hash, c.config_hash);
}

#[test]
fn forward_pass_by_hand() {
    // d = 2, r = 2, K = 2.
    let mut net = Network::init(2, 2, 2, 0);
    net.params = vec![
        1.0, -1.0, // trunk row 0
        0.5, 2.0, // trunk row 1
        0.0, -1.0, // trunk bias
        1.0, 2.0, // head 0
        -1.0, 0.5, // head 1
        0.1, -0.2, // head bias
    ];
    let x = [2.0, 1.0];
    // Pre-activations are 2 - 1 + 0 = 1 and 1 + 2 - 1 = 2.
    let h = [1.0, 2.0];
    let z0 = 0.1 + 1.0 * h[0] + 2.0 * h[1];
    let z1 = -0.2 - 1.0 * h[0] + 0.5 * h[1];
    let s = predict(&net, &x).unwrap();
    assert!((s[0] - sigmoid(z0)).abs() < 1e-15);
    assert!((s[1] - sigmoid(z1)).abs() < 1e-15);
}

#[test]
fn shared_grad_ignores_other_heads() {
    let ds = dataset(30, 3, 3, 8);
    let sel = everything(&ds);
    let net = Network::init(3, 5, 3, 4);
    let batch = Batch { ds: &ds, sel: &sel, rows: &sel.rows };
    let g = shared_grad(&net, &batch, 1).unwrap();
    assert_eq!(g.len(), net.trunk_len());
    let mut other = net.clone();
    let head = net.trunk_len();
    for t in [0, 2] {
        for u in 0..5 {
            other.params[head + t * 5 + u] *= -3.0;
        }
        other.params[head + 15 + t] += 1.0;
    }
    assert_eq!(g, shared_grad(&other, &batch, 1).unwrap());
    // Finite differences of the task's mean loss over the trunk.
    for i in (0..net.trunk_len()).step_by(3) {
        let h = 1e-6;
        let mut up = net.clone();
        up.params[i] += h;
        let mut dn = net.clone();
        dn.params[i] -= h;
        let fd = (task_losses(&up, &batch)[1].unwrap() - task_losses(&dn, &batch)[1].unwrap()) / (2.0 * h);
        assert!((g[i] - fd).abs() <= 1e-4 * g[i].abs().max(fd.abs()).max(1e-3), "{i}: {} vs {fd}", g[i]);
    }
}
