use std::collections::BTreeMap;

use mtlc_core::curves::{eval_curve, CurveArgs, CurveFamily, ParamSet};
use mtlc_core::fitter::{
    average_points, fit_family, fit_staged, prequential_error, FitError, FitOptions, FitPoint, Shortfall,
};
use proptest::prelude::*;

fn points(family: CurveFamily, truth: &ParamSet, args: &[CurveArgs]) -> Vec<FitPoint> {
    args.iter()
        .enumerate()
        .map(|(i, a)| FitPoint::new(*a, eval_curve(family, truth, a).unwrap(), i as u32 + 1))
        .collect()
}

struct Case {
    family: CurveFamily,
    truth: ParamSet,
    train: Vec<CurveArgs>,
    held_out: Vec<CurveArgs>,
}

fn cases() -> Vec<Case> {
    let singles = |ns: &[f64]| ns.iter().map(|&n| CurveArgs::single(n)).collect::<Vec<_>>();
    let sizes: Vec<f64> = (1..=10).map(|i| 100.0 * i as f64).collect();
    let mut pairs = Vec::new();
    for &n in &[100.0, 300.0, 500.0, 800.0] {
        for &s in &[0.0, 1500.0, 4000.0] {
            pairs.push(CurveArgs::pair(n, s));
        }
    }
    let mut triples = Vec::new();
    for &n in &[100.0, 400.0, 900.0] {
        for &s in &[500.0, 3000.0] {
            for &x in &[0.0, 200.0] {
                triples.push(CurveArgs::triple(n, s, x));
            }
        }
    }
    vec![
        Case {
            family: CurveFamily::Exp3_1,
            truth: ParamSet::exp3(2.0, -1.0, 0.9, 1000.0),
            train: singles(&sizes),
            held_out: singles(&[150.0, 1400.0]),
        },
        Case {
            family: CurveFamily::Exp4,
            truth: ParamSet {
                alpha: 0.7,
                ..ParamSet::exp3(1.5, -0.8, 0.92, 1000.0)
            },
            train: singles(&sizes),
            held_out: singles(&[150.0, 1400.0]),
        },
        Case {
            family: CurveFamily::Ilog2,
            truth: ParamSet::exp3(0.4, 0.0, 0.95, 1.0),
            train: singles(&sizes),
            held_out: singles(&[150.0, 1400.0]),
        },
        Case {
            family: CurveFamily::Exp3_2,
            truth: ParamSet {
                a_sigma: 0.3,
                ..ParamSet::exp3(1.2, -1.1, 0.88, 800.0)
            },
            train: pairs,
            held_out: vec![CurveArgs::pair(200.0, 2500.0), CurveArgs::pair(1000.0, 6000.0)],
        },
        Case {
            family: CurveFamily::Exp3_3,
            truth: ParamSet {
                a_sigma: 0.2,
                a_ij: 0.8,
                ..ParamSet::exp3(1.0, -1.0, 0.9, 900.0)
            },
            train: triples,
            held_out: vec![CurveArgs::triple(250.0, 1200.0, 100.0), CurveArgs::triple(1200.0, 4000.0, 300.0)],
        },
    ]
}

#[test]
fn every_family_recovers_noise_free_curves() {
    for case in cases() {
        let pts = points(case.family, &case.truth, &case.train);
        assert!(pts.len() >= 2 * case.family.params().len());
        let fit = fit_family(&pts, case.family, &FitOptions::default()).unwrap();
        assert!(fit.sse < 1e-12, "{}: sse {}", case.family, fit.sse);
        for a in &case.held_out {
            let want = eval_curve(case.family, &case.truth, a).unwrap();
            let got = fit.predict(a).unwrap();
            assert!((want - got).abs() < 1e-6, "{} at {a:?}: {got} vs {want}", case.family);
        }
    }
}

/// STL, MTL and STAG points of one target from a shared ground truth with no
/// pairwise transfer.
fn staged_fixture(a_ij: f64) -> (Vec<FitPoint>, Vec<FitPoint>, BTreeMap<usize, Vec<FitPoint>>, f64) {
    let n_scale = 1000.0;
    let a_i = 1.5;
    let stl_truth = ParamSet::exp3(a_i, -1.0, 0.85, n_scale);
    let mtl_truth = ParamSet {
        a_sigma: 0.25,
        ..ParamSet::exp3(a_i, -1.2, 0.9, n_scale)
    };
    let stag_truth = ParamSet { a_ij, ..mtl_truth };
    let per_fold = 250.0;
    let mut stl = Vec::new();
    let mut mtl = Vec::new();
    let mut stag = Vec::new();
    for m in 1..=4u32 {
        let n_t = per_fold * m as f64;
        let n_sigma = 3.0 * per_fold * m as f64;
        let a = CurveArgs::single(n_t);
        stl.push(FitPoint::new(a, eval_curve(CurveFamily::Exp3_1, &stl_truth, &a).unwrap(), m));
        let a = CurveArgs::pair(n_t, n_sigma);
        mtl.push(FitPoint::new(a, eval_curve(CurveFamily::Exp3_2, &mtl_truth, &a).unwrap(), m));
        // The auxiliary's own labels leave n_sigma.
        let reference = CurveArgs::triple(n_t, n_sigma - per_fold * m as f64, 0.0);
        stag.push(FitPoint::new(
            reference,
            eval_curve(CurveFamily::Exp3_3, &stag_truth, &reference).unwrap(),
            m,
        ));
        if m < 4 {
            let aug = CurveArgs::triple(n_t, n_sigma - per_fold * m as f64, per_fold);
            stag.push(FitPoint::new(aug, eval_curve(CurveFamily::Exp3_3, &stag_truth, &aug).unwrap(), m));
        }
    }
    let mut by_aux = BTreeMap::new();
    by_aux.insert(1, stag);
    (stl, mtl, by_aux, a_i)
}

#[test]
fn staged_fit_finds_no_pairwise_transfer_when_there_is_none() {
    let (stl, mtl, stag, a_i) = staged_fixture(0.0);
    let fit = fit_staged(&stl, &mtl, &stag, 0, &FitOptions::default()).unwrap();
    assert!((fit.stage1.params.a_i - a_i).abs() < 1e-6);
    assert_eq!(fit.stage2.params.a_i, fit.stage1.params.a_i);
    assert!((fit.stage2.params.a_sigma - 0.25).abs() < 1e-6);
    let s3 = fit.stage3[&1];
    assert!(s3.params.a_ij.abs() < 1e-3, "a_ij = {}", s3.params.a_ij);
    assert_eq!(s3.params.a_sigma, fit.stage2.params.a_sigma);
}

#[test]
fn staged_fit_recovers_positive_pairwise_transfer() {
    let (stl, mtl, stag, _) = staged_fixture(0.6);
    let fit = fit_staged(&stl, &mtl, &stag, 0, &FitOptions::default()).unwrap();
    assert!((fit.stage3[&1].params.a_ij - 0.6).abs() < 1e-4);
}

#[test]
fn shortfalls_are_reported() {
    let one = [FitPoint::new(CurveArgs::single(10.0), 0.5, 1)];
    assert_eq!(
        fit_family(&one, CurveFamily::Exp3_1, &FitOptions::default()),
        Err(FitError::UnderDetermined(Shortfall::NeedTwoSizes))
    );
    let two = [
        FitPoint::new(CurveArgs::single(10.0), 0.5, 1),
        FitPoint::new(CurveArgs::single(20.0), 0.6, 2),
    ];
    assert!(matches!(
        fit_family(&two, CurveFamily::Exp3_1, &FitOptions::default()),
        Err(FitError::UnderDetermined(Shortfall::TooFewPoints { points: 2, params: 3 }))
    ));
    let truth = ParamSet::exp3(2.0, -1.0, 0.9, 100.0);
    let pts = points(CurveFamily::Exp3_1, &truth, &[CurveArgs::single(10.0), CurveArgs::single(20.0), CurveArgs::single(30.0), CurveArgs::single(40.0)]);
    assert!(matches!(
        prequential_error(&pts, CurveFamily::Exp4, &FitOptions::default()),
        Err(FitError::UnderDetermined(Shortfall::TooFewFoldCounts { have: 4, need: 5 }))
    ));
}

#[test]
fn points_outside_the_unit_interval_are_rejected() {
    let pts = [
        FitPoint::new(CurveArgs::single(10.0), 1.5, 1),
        FitPoint::new(CurveArgs::single(20.0), 0.6, 2),
        FitPoint::new(CurveArgs::single(30.0), 0.7, 3),
    ];
    assert!(matches!(
        fit_family(&pts, CurveFamily::Exp3_1, &FitOptions::default()),
        Err(FitError::InvalidPoint(_))
    ));
}

#[test]
fn prequential_error_vanishes_on_exact_curves() {
    let truth = ParamSet::exp3(2.0, -1.0, 0.9, 900.0);
    let args: Vec<CurveArgs> = (1..=9).map(|m| CurveArgs::single(100.0 * m as f64)).collect();
    let pts = points(CurveFamily::Exp3_1, &truth, &args);
    let e = prequential_error(&pts, CurveFamily::Exp3_1, &FitOptions::default()).unwrap();
    assert!(e < 1e-12, "{e}");
}

#[test]
fn fits_are_deterministic() {
    let truth = ParamSet::exp3(2.0, -1.0, 0.9, 900.0);
    let args: Vec<CurveArgs> = (1..=6).map(|m| CurveArgs::single(100.0 * m as f64)).collect();
    let mut pts = points(CurveFamily::Exp3_1, &truth, &args);
    pts[2].value += 0.01;
    let a = fit_family(&pts, CurveFamily::Exp4, &FitOptions::default()).unwrap();
    let b = fit_family(&pts, CurveFamily::Exp4, &FitOptions::default()).unwrap();
    assert_eq!(a, b);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn fitted_coefficients_respect_their_bounds(
        noise in prop::collection::vec(-0.03f64..0.03, 8),
        fam in prop::sample::select(vec![CurveFamily::Exp4, CurveFamily::Exp3_1, CurveFamily::Ilog2]),
    ) {
        let truth = ParamSet::exp3(1.5, -1.0, 0.9, 800.0);
        let pts: Vec<FitPoint> = (1..=8)
            .map(|m| {
                let a = CurveArgs::single(100.0 * m as f64);
                let v = eval_curve(CurveFamily::Exp3_1, &truth, &a).unwrap() + noise[m - 1];
                FitPoint::new(a, v.clamp(0.0, 1.0), m as u32)
            })
            .collect();
        let fit = fit_family(&pts, fam, &FitOptions::default()).unwrap();
        prop_assert!(fit.params.a_i >= 0.0);
        prop_assert!((0.0..=1.0).contains(&fit.params.c));
        prop_assert!(fit.sse.is_finite());
    }

    #[test]
    fn averaging_points_averages_values(
        vals in prop::collection::vec((0.0f64..1.0, 0.0f64..1.0), 1..6),
    ) {
        let mut by_shift = BTreeMap::new();
        by_shift.insert(0, vals.iter().enumerate().map(|(i, v)| FitPoint::new(CurveArgs::single(10.0 * (i + 1) as f64), v.0, i as u32 + 1)).collect::<Vec<_>>());
        by_shift.insert(1, vals.iter().enumerate().map(|(i, v)| FitPoint::new(CurveArgs::single(12.0 * (i + 1) as f64), v.1, i as u32 + 1)).collect::<Vec<_>>());
        let avg = average_points(&by_shift);
        prop_assert_eq!(avg.len(), vals.len());
        for (i, p) in avg.iter().enumerate() {
            prop_assert!((p.value - (vals[i].0 + vals[i].1) / 2.0).abs() < 1e-15);
            prop_assert!((p.args.n_t - 11.0 * (i + 1) as f64).abs() < 1e-12);
        }
    }
}
