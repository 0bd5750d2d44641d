use std::fs;

use mtlc::checkpoint;
use mtlc::exec::{fit_all, run_tag_sweep};
use mtlc::io::{load_dataset, load_folds, save_dataset, save_folds};
use mtlc::tables::{fit_rows, read_fits, read_grid, read_tag, staged_from_rows, write_fits, write_grid, write_tag, FitRow};
use mtlc_core::data::{assign_folds, synth_generate, Dataset, FoldAssignment, Grouping, SynthConfig};
use mtlc_core::fitter::FitOptions;
use mtlc_core::grid::{plan_grid, run_entry, GridObservation, GridPlan, Metric};
use mtlc_core::learner::{train, ModelConfig};
use mtlc_core::tag::TagConfig;

fn setup() -> (Dataset, FoldAssignment, GridPlan) {
    let cfg = SynthConfig {
        n_rows: 500,
        d: 6,
        groups: vec![vec![0, 1], vec![2, 3]],
        within_group_angle: 0.2,
        label_rate: vec![0.5, 0.4, 0.3, 0.6],
        mnar_strength: 0.5,
        noise_sd: 0.3,
        n_row_groups: Some(40),
        seed: 21,
    };
    let ds = synth_generate(&cfg).unwrap().dataset;
    let fa = assign_folds(&ds, 5, Grouping::Group, 4).unwrap();
    let model = ModelConfig {
        r: 6,
        epochs: 3,
        batch_size: 32,
        learning_rate: 0.01,
        ..ModelConfig::default()
    };
    let plan = plan_grid(4, 5, 4, &[0, 1], 13, model, model).unwrap();
    (ds, fa, plan)
}

fn observations(ds: &Dataset, fa: &FoldAssignment, plan: &GridPlan) -> Vec<GridObservation> {
    plan.entries.iter().map(|s| run_entry(plan, s, ds, fa).unwrap()).collect()
}

#[test]
fn dataset_and_folds_round_trip_byte_for_byte() {
    let dir = tempfile::tempdir().unwrap();
    let (ds, fa, _) = setup();
    let p = dir.path().join("dataset.csv");
    save_dataset(&ds, &p).unwrap();
    let back = load_dataset(&p).unwrap();
    // Label bits under missing labels are not stored.
    assert_eq!(back.features(), ds.features());
    assert_eq!(back.groups(), ds.groups());
    for r in 0..ds.n_rows() {
        for t in 0..ds.n_tasks() {
            assert_eq!(back.label(r, t), ds.label(r, t));
        }
    }
    let q = dir.path().join("again.csv");
    save_dataset(&back, &q).unwrap();
    assert_eq!(fs::read(&p).unwrap(), fs::read(&q).unwrap());

    let f = dir.path().join("folds.csv");
    save_folds(&ds, &fa, &f).unwrap();
    assert_eq!(load_folds(&f, 5, Grouping::Group, ds.n_rows()).unwrap(), fa);
}

#[test]
fn malformed_datasets_name_the_line_and_column() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.csv");
    fs::write(&p, "f_0,y_0\n1.0,1\n2.0,2\n").unwrap();
    let msg = load_dataset(&p).unwrap_err().to_string();
    assert!(msg.contains("line 3") && msg.contains("y_0"), "{msg}");
    fs::write(&p, "f_0,label\n1.0,1\n").unwrap();
    assert_eq!(load_dataset(&p).unwrap_err().exit_code(), 2);
}

#[test]
fn grid_table_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let (ds, fa, plan) = setup();
    let obs = observations(&ds, &fa, &plan);
    let p = dir.path().join("grid.csv");
    write_grid(&p, &obs, "00ff00ff00ff00ff").unwrap();
    let back = read_grid(&p, false).unwrap();
    assert_eq!(back.len(), obs.len());
    let mut sorted = obs.clone();
    sorted.sort_by_key(|o| o.spec);
    for ((o, hash), want) in back.iter().zip(&sorted) {
        assert_eq!(hash, "00ff00ff00ff00ff");
        assert_eq!(o, want);
    }

    // A torn final line is skipped when reading leniently.
    let text = fs::read_to_string(&p).unwrap();
    let torn = &text[..text.len() - 10];
    fs::write(&p, torn).unwrap();
    assert!(read_grid(&p, false).is_err());
    let lenient = read_grid(&p, true).unwrap();
    let (last, _) = lenient.last().unwrap();
    assert_eq!(last.records.len() + 1, sorted.last().unwrap().records.len());
}

#[test]
fn fit_and_tag_tables_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (ds, fa, plan) = setup();
    let obs = observations(&ds, &fa, &plan);
    let fits = fit_all(&obs, 4, &FitOptions::default(), 2).unwrap();
    let rows: Vec<FitRow> = fits[&Metric::Auroc].fits.values().flat_map(fit_rows).collect();
    assert!(!rows.is_empty());
    let p = dir.path().join("fits.csv");
    write_fits(&p, &rows).unwrap();
    let back = read_fits(&p).unwrap();
    let q = dir.path().join("fits2.csv");
    write_fits(&q, &back).unwrap();
    assert_eq!(fs::read(&p).unwrap(), fs::read(&q).unwrap());
    let staged = staged_from_rows(&back);
    for (t, fit) in &fits[&Metric::Auroc].fits {
        assert_eq!(staged[t].stage2.params, fit.stage2.params);
        assert_eq!(staged[t].stage3.len(), fit.stage3.len());
    }

    let tag = TagConfig { lookahead_lr: None, every: 3 };
    let sweep = run_tag_sweep(&plan, &ds, &fa, &[0], &tag, 2).unwrap();
    let t = dir.path().join("tag.csv");
    write_tag(&t, &sweep).unwrap();
    let means = read_tag(&t, 4).unwrap();
    assert_eq!(means.len(), sweep.len());
    for (key, s) in &sweep {
        for (a, b) in means[key].iter().zip(&s.mean) {
            assert!(a == b || (a.is_nan() && b.is_nan()));
        }
    }
}

#[test]
fn checkpoints_round_trip_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let (ds, fa, _) = setup();
    let sel = mtlc_core::data::training_subset(&ds, &fa, &[2, 2, 2, 2], None).unwrap();
    let cfg = ModelConfig {
        r: 5,
        epochs: 2,
        learning_rate: 0.01,
        seed: 99,
        ..ModelConfig::default()
    };
    let model = train(&ds, &sel, &cfg).unwrap();
    let p = dir.path().join("m.model");
    checkpoint::save(&model, &p).unwrap();
    assert_eq!(checkpoint::load(&p).unwrap(), model);

    let text = checkpoint::to_string(&model);
    let broken = text.replacen("shape 6 5 4", "shape 6 5 3", 1);
    assert!(checkpoint::parse(&broken).is_err());
    let mut lines: Vec<&str> = text.lines().collect();
    lines.pop();
    assert!(checkpoint::parse(&lines.join("\n")).is_err());
}
