use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use moe_scaling::allocation::{
    flops_ratio_to_match, min_cost_for_bounded_loss, min_loss_for_bounded_cost, moe_loss_optimal, SearchConfig,
};
use moe_scaling::fit::{fit_dense, fit_moe, objective, FitConfig, TrainingRun};
use moe_scaling::inference::{
    max_batch_size, throughput_from_latencies, CostModel, GeometryFit, HardwareConfig, LatencyProfile,
};
use moe_scaling::synth::{reference_params, synth_profile, synth_runs, AffineProfileModel, ProfileGrid, SynthSpec};
use moe_scaling::{ArchitectureConvention, DenseLawParams, ErrorKind};

fn profile() -> LatencyProfile {
    synth_profile(&AffineProfileModel::reference(), &ProfileGrid::default()).unwrap()
}

fn quick_fit() -> FitConfig {
    FitConfig {
        max_starts: 32,
        ..FitConfig::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn batch_shrinks_with_total_params(n_dense in 1e8f64..1e10, extra in 1.01f64..3.0, g in 1u32..=8) {
        let hw = HardwareConfig::default();
        let geom = GeometryFit::reference();
        let small = max_batch_size(n_dense, n_dense, g, &hw, &geom);
        let large = max_batch_size(n_dense * extra, n_dense, g, &hw, &geom);
        if let (Ok(s), Ok(l)) = (&small, &large) {
            prop_assert!(l < s);
        }
        if small.is_err() {
            prop_assert!(large.is_err());
        }
    }

    #[test]
    fn batch_grows_and_feasibility_persists_with_gpus(n_dense in 1e8f64..1e10, e in 1.0f64..64.0, g in 1u32..8) {
        let hw = HardwareConfig::default();
        let geom = GeometryFit::reference();
        let arch = ArchitectureConvention::default();
        let nt = arch.total_params(n_dense, e);
        match max_batch_size(nt, n_dense, g, &hw, &geom) {
            Ok(b) => prop_assert!(max_batch_size(nt, n_dense, g + 1, &hw, &geom).unwrap() > b),
            Err(err) => prop_assert_eq!(err.kind(), ErrorKind::Infeasible),
        }
    }

    #[test]
    fn cost_falls_as_throughput_rises(n in 2e8f64..5e9, e in 1.0f64..32.0) {
        let hw = HardwareConfig::default();
        let geom = GeometryFit::reference();
        let arch = ArchitectureConvention::default();
        let prof = profile();
        let model = CostModel::new(&hw, &geom, &prof, &arch).unwrap();
        let points: Vec<_> = (1..=hw.max_gpus).filter_map(|g| model.serving_point(n, e, g).ok()).collect();
        for p in &points {
            let expected = p.gpus as f64 * hw.cost_per_gpu_second / p.throughput;
            prop_assert!((p.cost_per_token - expected).abs() <= 1e-12 * expected);
        }
    }

    #[test]
    fn throughput_is_positive_and_bounded(b in 1.0f64..1e5, lp in 1e-4f64..1.0, ld in 1e-4f64..1.0) {
        let t = throughput_from_latencies(b, lp, ld);
        prop_assert!(t > 0.0 && t <= b / ld);
    }

    #[test]
    fn objective_is_non_negative(scale in 0.5f64..2.0, shift in -0.2f64..0.2) {
        let runs = synth_runs(&SynthSpec::default()).unwrap();
        let mut p = reference_params();
        p.coef_n *= scale;
        p.alpha += shift / 4.0;
        p.interaction += shift / 100.0;
        prop_assert!(objective(&p, &runs, &FitConfig::default()) >= 0.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn optimal_loss_does_not_rise_with_budget(lb in 19.0f64..23.0, step in 0.01f64..1.0, e in 1.0f64..64.0) {
        let arch = ArchitectureConvention::default();
        let s = SearchConfig::default();
        let p = reference_params();
        let lo = moe_loss_optimal(10f64.powf(lb), e, &p, &arch, &s).unwrap().loss;
        let hi = moe_loss_optimal(10f64.powf(lb + step), e, &p, &arch, &s).unwrap().loss;
        prop_assert!(hi <= lo);
    }

    #[test]
    fn algorithms_hold_their_constraints(lb in 20.0f64..21.5, e_prime in 8.0f64..64.0) {
        let hw = HardwareConfig::default();
        let geom = GeometryFit::reference();
        let arch = ArchitectureConvention::default();
        let prof = profile();
        let model = CostModel::new(&hw, &geom, &prof, &arch).unwrap();
        let s = SearchConfig::default();
        let p = reference_params();
        let budget = 10f64.powf(lb);
        let base = moe_loss_optimal(budget, 4.0, &p, &arch, &s).unwrap();

        let a1 = min_cost_for_bounded_loss(budget, 4.0, e_prime, &p, &model, &s).unwrap();
        prop_assert!(a1.predicted_loss <= base.loss * (1.0 + 10.0 * s.rel_tol));
        prop_assert!(a1.overtrain_ratio <= 1.0 + 10.0 * s.rel_tol);

        let base_cost = min_cost_for_bounded_loss(budget, 4.0, 4.0, &p, &model, &s).unwrap().cost_per_token.unwrap();
        let a2 = min_loss_for_bounded_cost(budget, 4.0, e_prime, &p, &model, &s).unwrap();
        prop_assert!(a2.cost_per_token.unwrap() <= base_cost * (1.0 + 10.0 * s.rel_tol));
    }

    #[test]
    fn more_experts_need_less_compute(lb in 19.0f64..22.0, e_prime in 8.0f64..64.0) {
        let arch = ArchitectureConvention::default();
        let s = SearchConfig::default();
        let ratio = flops_ratio_to_match(10f64.powf(lb), 4.0, e_prime, &reference_params(), &arch, &s).unwrap();
        prop_assert!(ratio > 0.0 && ratio < 1.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(4))]

    #[test]
    fn fit_tracks_loss_rescaling(k in 0.5f64..2.0) {
        let runs = synth_runs(&SynthSpec::default()).unwrap();
        let scaled: Vec<TrainingRun> = runs.iter().map(|r| TrainingRun { val_loss: r.val_loss * k, ..*r }).collect();
        let report = fit_moe(&scaled, &FitConfig::default()).unwrap();
        prop_assert!(report.rmsle_all < 1e-3);
        let p = report.best_params;
        prop_assert!((p.irreducible / (1.5 * k) - 1.0).abs() < 1e-2);
    }

    #[test]
    fn fit_ignores_run_order(seed in 0u64..1000) {
        let runs = synth_runs(&SynthSpec { noise_sigma: 0.002, rng_seed: seed, ..SynthSpec::default() }).unwrap();
        let mut shuffled = runs.clone();
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let a = fit_moe(&runs, &quick_fit()).unwrap();
        let b = fit_moe(&shuffled, &quick_fit()).unwrap();
        prop_assert_eq!(a, b);
    }
}

#[test]
fn fit_is_reproducible() {
    let runs = synth_runs(&SynthSpec {
        noise_sigma: 0.002,
        rng_seed: 1,
        ..SynthSpec::default()
    })
    .unwrap();
    let a = fit_moe(&runs, &quick_fit()).unwrap();
    let b = fit_moe(&runs, &quick_fit()).unwrap();
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
}

#[test]
fn noise_free_design_recovers_constants() {
    let spec = SynthSpec {
        n_values: vec![1e8, 2e8, 4e8, 8e8],
        d_values: vec![2.5e9, 5e9, 1e10, 2e10],
        e_values: vec![1.0, 4.0, 16.0, 32.0],
        ..SynthSpec::default()
    };
    let runs = synth_runs(&spec).unwrap();
    assert_eq!(runs.len(), 64);
    let report = fit_moe(&runs, &FitConfig::default()).unwrap();
    let p = report.best_params;
    let truth = reference_params();
    for (got, want) in [
        (p.alpha, truth.alpha),
        (p.beta, truth.beta),
        (p.gamma, truth.gamma),
        (p.irreducible, truth.irreducible),
        (p.coef_n, truth.coef_n),
        (p.coef_d, truth.coef_d),
        (p.e_max, truth.e_max),
    ] {
        assert!((got / want - 1.0).abs() < 1e-3, "got {got}, want {want}");
    }
    assert!((p.interaction - truth.interaction).abs() < 1e-5);
}

#[test]
fn dense_fit_recovers_dense_law() {
    let truth = DenseLawParams {
        l0: 1.7,
        coef_n: 400.0,
        coef_d: 410.0,
        alpha: 0.34,
        beta: 0.28,
    };
    let mut runs = Vec::new();
    for n in [5e7, 1e8, 2e8, 4e8, 8e8] {
        for d in [1e9, 3e9, 1e10, 3e10] {
            runs.push(TrainingRun {
                n_dense: n,
                d_tokens: d,
                experts: 1.0,
                val_loss: truth.predict_loss(n, d).unwrap(),
            });
        }
    }
    let report = fit_dense(&runs, &FitConfig::default()).unwrap();
    assert!(report.rmsle_all < 1e-6, "rmsle {}", report.rmsle_all);
    assert!((report.best_params.alpha - truth.alpha).abs() < 1e-3);
    assert!((report.best_params.beta - truth.beta).abs() < 1e-3);
}
