use std::f64::consts::TAU;

use subwalk::detection::{pdet_bright, pdet_rank1_closed_form};
use subwalk::model::{build_detector, build_nn, custom_json, parse_custom, InitialState};
use subwalk::spectral::{classify, classify_spectrum, ClassifyOptions};
use subwalk::stroboscopic::{fn_series, nbar_truncated, pdet_truncated, SeriesOptions};
use subwalk::sweep::{run_nbar_scan, run_pdet_heatmap, run_table_dark_count, Method, SweepSpec, TauGrid};
use subwalk::vectorized::{
    build_operators, critical_times, divergence_probe, nbar_matrix, pdet_matrix, DIVERGENCE_THRESHOLD,
};

#[test]
fn dark_count_orders_detection_probability() {
    let table = run_table_dark_count(&build_nn(20, 1.0).unwrap(), 1).unwrap();
    let mut rows = table.rows.clone();
    rows.sort_by_key(|r| r.n_dark_total);
    for w in rows.windows(2) {
        assert!(w[1].p_det <= w[0].p_det + 1e-10, "{:?} then {:?}", w[0], w[1]);
    }
    let families = table.families();
    assert_eq!(families.len(), 4);
    assert_eq!(families[0].d2, vec![1, 3, 7, 9, 11, 13, 17, 19]);
    assert_eq!(families[3].d2, vec![10]);
}

#[test]
fn closed_form_rank_one_matches_classification() {
    let model = build_nn(12, 1.0).unwrap();
    let spectrum = model.spectrum().unwrap();
    for d in [0, 5] {
        let c = classify_spectrum(&spectrum, &build_detector(12, &[d]).unwrap()).unwrap();
        for s in 0..12 {
            let closed = pdet_rank1_closed_form(&model, d, s).unwrap();
            let spectral = pdet_bright(&c, &InitialState::localized(12, s).unwrap()).unwrap().p_det;
            assert!((closed - spectral).abs() < 1e-10, "d={d} s={s}");
        }
    }
}

#[test]
fn truncated_mean_matches_matrix_mean() {
    let model = build_nn(10, 1.0).unwrap();
    let phi = InitialState::localized(10, 0).unwrap();
    for sites in [vec![0], vec![0, 1], vec![0, 1, 2]] {
        let det = build_detector(10, &sites).unwrap();
        let series = fn_series(&model, &det, &phi, 1.0, SeriesOptions::fixed(100_000)).unwrap();
        let exact = nbar_matrix(&build_operators(&model, &det, &phi, 1.0).unwrap()).unwrap().value().unwrap();
        assert!((nbar_truncated(&series).unwrap() - exact).abs() < 5e-2, "{sites:?}");
    }
}

#[test]
fn early_stop_is_sound() {
    let model = build_nn(10, 1.0).unwrap();
    for (sites, s) in [(vec![0], 0), (vec![0, 1], 4), (vec![0, 3, 6], 8)] {
        let det = build_detector(10, &sites).unwrap();
        let phi = InitialState::localized(10, s).unwrap();
        let opts = SeriesOptions { n_max: 20_000, conv_tol: 1e-8 };
        let short = fn_series(&model, &det, &phi, 1.0, opts).unwrap();
        assert!(short.converged, "{sites:?} s={s}");
        let long = fn_series(&model, &det, &phi, 1.0, SeriesOptions::fixed(2 * short.len())).unwrap();
        assert!((pdet_truncated(&long) - pdet_truncated(&short)).abs() < 10.0 * 1e-8);
    }
}

/// At a critical period the levels of `U(tau)` merge; a divergent `n̄` goes
/// together with extra dark states that lower `P_det`.
#[test]
fn divergence_matches_phase_regrouping() {
    let model = build_nn(10, 1.0).unwrap();
    let spectrum = model.spectrum().unwrap();
    let crit = critical_times(&model, TAU).unwrap();
    let mut weakest_divergent = f64::INFINITY;
    let mut strongest_finite: f64 = 0.0;
    for (sites, s) in [(vec![0], 1), (vec![0], 3), (vec![0, 1], 3), (vec![0, 1, 2], 3), (vec![0, 9, 8], 3), (vec![7, 8, 9], 3)] {
        let det = build_detector(10, &sites).unwrap();
        let phi = InitialState::localized(10, s).unwrap();
        let generic = pdet_bright(&classify_spectrum(&spectrum, &det).unwrap(), &phi).unwrap().p_det;
        let ops = build_operators(&model, &det, &phi, 1.0).unwrap();
        for tc in crit.taus() {
            let regrouped = classify(&spectrum, &det, &ClassifyOptions::at_tau(tc, true)).unwrap();
            let drops = pdet_bright(&regrouped, &phi).unwrap().p_det < generic - 1e-8;
            let probe = divergence_probe(&ops, tc).unwrap();
            assert_eq!(probe > DIVERGENCE_THRESHOLD, drops, "{sites:?} s={s} tau_c={tc} probe={probe}");
            if drops {
                weakest_divergent = weakest_divergent.min(probe);
            } else {
                strongest_finite = strongest_finite.max(probe);
            }
        }
    }
    assert!(weakest_divergent > 1e6 && strongest_finite < 1e3);
}

#[test]
fn critical_period_is_flagged_at_the_point() {
    let model = build_nn(10, 1.0).unwrap();
    let det = build_detector(10, &[0]).unwrap();
    let phi = InitialState::localized(10, 3).unwrap();
    let ops = build_operators(&model, &det, &phi, TAU / 4.0).unwrap();
    assert!(nbar_matrix(&ops).unwrap().is_divergent());
    let spectrum = model.spectrum().unwrap();
    let c = classify(&spectrum, &det, &ClassifyOptions::at_tau(TAU / 4.0, false)).unwrap();
    assert!(c.is_critical());
}

#[test]
fn heatmap_is_shift_invariant() {
    let spec = SweepSpec {
        rank: Some(2),
        method: Method::Spectral,
        ..Default::default()
    };
    let h = run_pdet_heatmap(&spec).unwrap();
    let model = build_nn(10, 1.0).unwrap();
    let spectrum = model.spectrum().unwrap();
    for c in [1, 4] {
        for (r, sites) in h.detectors.iter().enumerate() {
            let moved: Vec<usize> = sites.iter().map(|x| (x + c) % 10).collect();
            let cl = classify_spectrum(&spectrum, &build_detector(10, &moved).unwrap()).unwrap();
            for s in 0..10 {
                let p = pdet_bright(&cl, &InitialState::localized(10, (s + c) % 10).unwrap()).unwrap().p_det;
                assert!((p - h.cell(r, s)).abs() < 1e-10);
            }
        }
    }
}

#[test]
fn rank_three_heatmap_is_certain() {
    let spec = SweepSpec {
        rank: Some(3),
        ..Default::default()
    };
    let h = run_pdet_heatmap(&spec).unwrap();
    assert_eq!(h.detectors.len(), 36);
    assert!(h.pdet.iter().flatten().all(|p| (p - 1.0).abs() < 1e-8));
    assert!(h.n_dark.iter().all(|&n| n == 0));
}

#[test]
fn custom_file_round_trip() {
    let model = build_nn(8, 1.0).unwrap();
    let custom = parse_custom(&custom_json(model.hamiltonian())).unwrap();
    assert!(!custom.has_analytic_spectrum());
    let det = build_detector(8, &[0, 4]).unwrap();
    let a = classify_spectrum(&model.spectrum().unwrap(), &det).unwrap();
    let b = classify_spectrum(&custom.spectrum().unwrap(), &det).unwrap();
    assert_eq!(a.n_dark_total, b.n_dark_total);
    for s in 0..8 {
        let phi = InitialState::localized(8, s).unwrap();
        let pa = pdet_bright(&a, &phi).unwrap().p_det;
        let pb = pdet_matrix(&build_operators(&custom, &det, &phi, 1.1).unwrap()).unwrap();
        assert!((pa - pb).abs() < 1e-8);
    }
}

#[test]
fn return_scan_is_flat_and_multi_site_return_is_faster() {
    let grid = TauGrid { start: 0.11, stop: 3.0, steps: 40 };
    let flat = run_nbar_scan(&SweepSpec {
        detector: Some(vec![0]),
        initial: Some(vec![0]),
        tau_grid: Some(grid),
        ..Default::default()
    })
    .unwrap();
    for p in &flat.profile.points {
        if let Some(v) = p.nbar.value() {
            assert!((v - 6.0).abs() < 1e-6 || p.nearest_tau_c.is_some_and(|c| (c - p.tau).abs() < 1e-3));
        }
    }
    for s in [0, 1] {
        let scan = run_nbar_scan(&SweepSpec {
            detector: Some(vec![0, 1, 2]),
            initial: Some(vec![s]),
            tau_grid: Some(grid),
            ..Default::default()
        })
        .unwrap();
        let values: Vec<f64> = scan.profile.points.iter().filter_map(|p| p.nbar.value()).collect();
        assert!(values.iter().all(|&v| v < 6.0), "s={s}");
        let spread = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
            - values.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(spread > 0.1, "profile for s={s} should vary with tau");
    }
}

#[test]
fn arrival_far_detector_has_only_zeno_divergence() {
    let scan = run_nbar_scan(&SweepSpec {
        detector: Some(vec![7, 8, 9]),
        initial: Some(vec![3]),
        tau_grid: Some(TauGrid { start: 0.01, stop: TAU, steps: 100 }),
        ..Default::default()
    })
    .unwrap();
    assert!(scan.profile.divergent_critical_times.is_empty());
    assert!(scan.profile.points.iter().all(|p| !p.nbar.is_divergent()));
    assert!(scan.profile.zeno_divergent);
}
