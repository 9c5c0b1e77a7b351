//! Per-operation examples checked against oracles computed in this file.

use std::f64::consts::{PI, SQRT_2};
use std::sync::Arc;

use cfdens::data::{make_folds, make_grid, EvalGrid, ObservationTable, QuadratureRule};
use cfdens::distances::DistanceSpec;
use cfdens::effects::{crossfit_effect, crossfit_fixed_candidate};
use cfdens::eif::{gamma_f, phi_a, InfluenceValues, Transform};
use cfdens::models::{clip_to_density, encode_mixture, log_partition, CosineBasis, ModelSpec};
use cfdens::nuisance::{
    fit_propensity, CondDensityLearner, CondDensityMethod, CrossFit, FoldNuisance, NuisanceConfig, PropensityMethod,
    Regressor, DEFAULT_CLIP_EPS,
};
use cfdens::oracle::{dgp, mc_run, rep_rng, Experiment, Target, TrueNuisance};
use cfdens::projection::{crossfit_projection, solve_onestep, SolverMethod, SolverOptions};
use cfdens::selection::{aggregate_linear, select_model, Candidate, SelectionOptions};
use rand::Rng;

fn grid(n: usize) -> EvalGrid {
    make_grid(n, QuadratureRule::Trapezoid).unwrap()
}

fn true_config(name: &str) -> NuisanceConfig {
    let law = Arc::new(dgp(name).unwrap());
    NuisanceConfig {
        propensity: Arc::new(TrueNuisance(law.clone())),
        cond_density: Arc::new(TrueNuisance(law)),
        clip_eps: DEFAULT_CLIP_EPS,
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len().is_multiple_of(2) {
        0.5 * (v[m - 1] + v[m])
    } else {
        v[m]
    }
}

// ---------------------------------------------------------------------------
// models

#[test]
fn single_gaussian_component_mode_value() {
    let g = grid(512);
    let beta = encode_mixture(&[1.0], &[0.5], &[0.1]);
    let m = ModelSpec::GaussianMixture { k: 1 }.at(&beta, &g).unwrap();
    let expected = 1.0 / (2.0 * PI * 0.01f64).sqrt();
    assert!((m.value(0.5) - expected).abs() / expected < 1e-5, "{} vs {expected}", m.value(0.5));
}

#[test]
fn log_partition_derivative_matches_finite_difference() {
    let g = grid(512);
    let model = ModelSpec::ExponentialFamily { dim: 1 };
    let (_, grad) = log_partition(&model, &[0.3], &g).unwrap();
    let h = 1e-5;
    let c = |b: f64| log_partition(&model, &[b], &g).unwrap().0;
    let fd = (c(0.3 + h) - c(0.3 - h)) / (2.0 * h);
    assert!((grad[0] - fd).abs() < 1e-6);
    // Identity with the mean of b under g, computed directly.
    let basis = CosineBasis::new(1);
    let norm = g.integrate_fn(|y| (0.3 * basis.value(1, y)).exp());
    let mean = g.integrate_fn(|y| basis.value(1, y) * (0.3 * basis.value(1, y)).exp()) / norm;
    assert!((grad[0] - mean).abs() < 1e-8);
}

#[test]
fn log_partition_is_invariant_under_reflection() {
    // b_j(1 - y) = (-1)^j b_j(y), so flipping odd coefficients leaves C unchanged.
    let g = grid(513);
    let model = ModelSpec::ExponentialFamily { dim: 4 };
    let beta = [0.4, -0.7, 0.2, 0.9];
    let flipped = [-0.4, -0.7, -0.2, 0.9];
    let a = log_partition(&model, &beta, &g).unwrap().0;
    let b = log_partition(&model, &flipped, &g).unwrap().0;
    assert!((a - b).abs() < 1e-12);
}

#[test]
fn clipping_a_series_with_negative_tail() {
    let g = grid(512);
    let vals = g.tabulate(|y| 1.0 + 1.5 * SQRT_2 * (PI * y).cos());
    assert!(vals.iter().any(|&v| v < 0.0));
    let d = clip_to_density(&vals, &g).unwrap();
    assert!(d.iter().all(|&v| v >= 0.0));
    assert!((g.integrate(&d) - 1.0).abs() < 1e-10);
}

// ---------------------------------------------------------------------------
// nuisance

#[test]
fn conditional_densities_are_valid_at_random_covariates() {
    let g = grid(256);
    let table = dgp("D2").unwrap().sample(1500, &mut rep_rng(11, 0, 0)).unwrap();
    let rows: Vec<usize> = (0..table.n()).collect();
    let mut rng = rep_rng(12, 0, 0);
    for regressor in [Regressor::Knn { k: None }, Regressor::NadarayaWatson, Regressor::Marginal] {
        let method = CondDensityMethod { regressor, ..CondDensityMethod::default() };
        let fit = method.fit(&table, &rows, 1, &g).unwrap();
        let mut out = vec![0.0; g.len()];
        for _ in 0..50 {
            let x = [rng.random::<f64>(), rng.random::<f64>()];
            fit.tabulate(&x, &mut out);
            assert!(out.iter().all(|&v| v >= 0.0));
            assert!((g.integrate(&out) - 1.0).abs() < 1e-6);
        }
    }
}

#[test]
fn propensity_predictions_respect_the_clip() {
    let table = dgp("D2").unwrap().sample(800, &mut rep_rng(13, 0, 0)).unwrap();
    let rows: Vec<usize> = (0..table.n()).collect();
    for method in [PropensityMethod::Logistic, PropensityMethod::Knn { k: Some(3) }, PropensityMethod::Constant { value: 0.0 }] {
        let fit = fit_propensity(&table, &rows, 1, &method, 0.05).unwrap();
        let lowest = rows.iter().map(|&i| fit.predict(table.x(i))).fold(f64::INFINITY, f64::min);
        assert!(lowest >= 0.05, "{method}: {lowest}");
    }
}

#[test]
fn plugin_marginal_error_shrinks_with_n() {
    let law = dgp("D2").unwrap();
    let g = grid(128);
    let truth = law.true_marginal(1, &g);
    let config = NuisanceConfig::default();
    let errs: Vec<f64> = [500usize, 2000, 8000]
        .iter()
        .enumerate()
        .map(|(ni, &n)| {
            median(
                (0..20)
                    .map(|rep| {
                        let t = law.sample(n, &mut rep_rng(14, ni, rep)).unwrap();
                        let cf = CrossFit::fit_all(&t, 2, rep as u64, &[1], &config, &g).unwrap();
                        let p = cf.marginal(1).unwrap();
                        let diff: Vec<f64> = p.iter().zip(&truth).map(|(a, b)| (a - b).powi(2)).collect();
                        g.integrate(&diff).sqrt()
                    })
                    .collect(),
            )
        })
        .collect();
    assert!(errs[0] > errs[1] && errs[1] > errs[2], "{errs:?}");
}

// ---------------------------------------------------------------------------
// eif

#[test]
fn gamma_ignores_the_counterfactual_density_for_l2_and_kl_expfam() {
    let g = grid(256);
    let p = dgp("D2").unwrap().true_marginal(1, &g);
    let perturbed: Vec<f64> = p.iter().zip(g.points()).map(|(v, y)| v * (1.0 + 0.3 * (5.0 * y).sin())).collect();
    for (d, m) in [(DistanceSpec::L2Sq, ModelSpec::TruncatedSeries { dim: 3 }), (DistanceSpec::Kl, ModelSpec::ExponentialFamily { dim: 3 })] {
        let bound = m.at(&[0.2, -0.1, 0.05], &g).unwrap();
        let a = gamma_f(&d, &bound, &p, &g).unwrap();
        let b = gamma_f(&d, &bound, &perturbed, &g).unwrap();
        assert_eq!(a, b, "{d} {m}");
    }
}

#[test]
fn influence_variance_stabilizes_under_true_nuisances() {
    let law = dgp("D2").unwrap();
    let g = grid(128);
    let config = true_config("D2");
    let basis = CosineBasis::new(2);
    let var = |n: usize| {
        let t = law.sample(n, &mut rep_rng(15, n, 0)).unwrap();
        let cf = CrossFit::fit_all(&t, 2, 1, &[1], &config, &g).unwrap();
        let nuis = cf.nuisance(0, 1).unwrap();
        let h = Transform::from_fn(2, &g, &t, &nuis.rows, |y, o| basis.eval_into(y, o)).unwrap();
        phi_a(&t, nuis, &h, &g).unwrap().covariance[0]
    };
    let (a, b) = (var(10_000), var(40_000));
    assert!((a - b).abs() / b < 0.1, "{a} vs {b}");
}

// ---------------------------------------------------------------------------
// projection

/// Six rows, randomized treatment with known propensity 0.5, and a covariate-free
/// conditional density `η̂(y) = 2y`.
fn six_row_fixture(g: &EvalGrid) -> (ObservationTable, FoldNuisance) {
    let ys = vec![0.1, 0.35, 0.5, 0.62, 0.8, 0.95];
    let a = vec![1, 0, 1, 1, 0, 0];
    let table = ObservationTable::from_unit((0..6).map(|i| i as f64).collect(), 1, a, ys).unwrap();
    let eta: Vec<f64> = (0..6).flat_map(|_| g.points().iter().map(|y| 2.0 * y).collect::<Vec<_>>()).collect();
    let nuis = FoldNuisance::from_parts(1, (0..6).collect(), vec![0.5; 6], eta, g.len()).unwrap();
    (table, nuis)
}

#[test]
fn series_closed_form_matches_hand_computed_ipw() {
    let g = make_grid(4097, QuadratureRule::Trapezoid).unwrap();
    let (table, nuis) = six_row_fixture(&g);
    let est = solve_onestep(&DistanceSpec::L2Sq, &ModelSpec::TruncatedSeries { dim: 3 }, &table, &nuis, &g, &SolverOptions::default()).unwrap();
    for j in 1..=3usize {
        let jf = j as f64;
        // ∫ √2 cos(πjy) 2y dy in closed form.
        let mu = 2.0 * SQRT_2 * ((-1f64).powi(j as i32) - 1.0) / (PI * PI * jf * jf);
        let ipw: f64 = (0..6)
            .filter(|&i| table.a(i) == 1)
            .map(|i| (SQRT_2 * (PI * jf * table.y(i)).cos() - mu) / 0.5)
            .sum::<f64>()
            / 6.0;
        let expected = ipw + mu;
        assert!((est.beta_hat[j - 1] - expected).abs() < 1e-6, "j={j}: {} vs {expected}", est.beta_hat[j - 1]);
    }
}

#[test]
fn series_sandwich_is_covariance_of_basis_influence() {
    let g = grid(256);
    let table = dgp("D2").unwrap().sample(1200, &mut rep_rng(16, 0, 0)).unwrap();
    let cf = CrossFit::fit_all(&table, 3, 2, &[1], &NuisanceConfig::default(), &g).unwrap();
    let est = crossfit_projection(&DistanceSpec::L2Sq, &ModelSpec::TruncatedSeries { dim: 3 }, 1, &table, &cf, &g, &SolverOptions::default()).unwrap();
    let basis = CosineBasis::new(3);
    let parts: Vec<InfluenceValues> = (0..3)
        .map(|k| {
            let nuis = cf.nuisance(k, 1).unwrap();
            let h = Transform::from_fn(3, &g, &table, &nuis.rows, |y, o| basis.eval_into(y, o)).unwrap();
            phi_a(&table, nuis, &h, &g).unwrap()
        })
        .collect();
    let n = table.n() as f64;
    let mut values = Vec::new();
    for p in &parts {
        values.extend_from_slice(&p.values);
    }
    for a in 0..3 {
        for b in 0..3 {
            let cov: f64 = (0..table.n()).map(|r| values[r * 3 + a] * values[r * 3 + b]).sum::<f64>() / n / n;
            assert!((est.covariance[a * 3 + b] - cov).abs() < 1e-12, "{a},{b}");
        }
    }
}

#[test]
fn doubling_the_sample_shrinks_intervals_by_root_two() {
    let g = grid(128);
    let table = dgp("D2").unwrap().sample(400, &mut rep_rng(17, 0, 0)).unwrap();
    let rows: Vec<usize> = (0..table.n()).collect();
    let config = true_config("D2");
    let nuis = cfdens::nuisance::NuisanceFit::fit(&table, &[], 1, &config, &g)
        .unwrap()
        .evaluate(&table, &rows, &g)
        .unwrap();
    let model = ModelSpec::TruncatedSeries { dim: 2 };
    let once = solve_onestep(&DistanceSpec::L2Sq, &model, &table, &nuis, &g, &SolverOptions::default()).unwrap();

    let n = table.n();
    let doubled = ObservationTable::from_unit(
        [table.covariates(), table.covariates()].concat(),
        table.dim(),
        [table.treatment(), table.treatment()].concat(),
        [table.outcome(), table.outcome()].concat(),
    )
    .unwrap();
    let nuis2 = FoldNuisance::from_parts(
        1,
        (0..2 * n).collect(),
        [nuis.propensity.clone(), nuis.propensity.clone()].concat(),
        [nuis.eta.clone(), nuis.eta.clone()].concat(),
        g.len(),
    )
    .unwrap();
    let twice = solve_onestep(&DistanceSpec::L2Sq, &model, &doubled, &nuis2, &g, &SolverOptions::default()).unwrap();
    for j in 0..2 {
        let w1 = once.wald_ci[j].1 - once.wald_ci[j].0;
        let w2 = twice.wald_ci[j].1 - twice.wald_ci[j].0;
        assert!((w1 / w2 - SQRT_2).abs() < 1e-9, "{}", w1 / w2);
    }
}

#[test]
fn generic_solutions_carry_a_residual_certificate() {
    let g = grid(256);
    // D6 keeps the series projections away from g = 0, so the sample equations have roots.
    let table = dgp("D6").unwrap().sample(4000, &mut rep_rng(18, 0, 0)).unwrap();
    let cf = CrossFit::fit_all(&table, 3, 4, &[1], &NuisanceConfig::default(), &g).unwrap();
    for d in [DistanceSpec::Hellinger, DistanceSpec::ChiSq, DistanceSpec::Kl] {
        let est = crossfit_projection(&d, &ModelSpec::TruncatedSeries { dim: 3 }, 1, &table, &cf, &g, &SolverOptions::default()).unwrap();
        for r in &est.solver_reports {
            assert_eq!(r.method, SolverMethod::DampedNewton);
            assert!(r.residual_norm < 1e-8 * (1.0 + r.initial_residual), "{d}: {r:?}");
        }
    }
}

#[test]
fn oracle_nuisances_recover_an_in_family_projection() {
    // D6 treated outcomes follow expfam with coefficients (0.5, -0.3).
    let law = dgp("D6").unwrap();
    let g = grid(256);
    let config = true_config("D6");
    let model = ModelSpec::ExponentialFamily { dim: 2 };
    let errs: Vec<f64> = (0..10)
        .map(|rep| {
            let t = law.sample(8000, &mut rep_rng(19, 0, rep)).unwrap();
            let cf = CrossFit::fit_all(&t, 2, rep as u64, &[1], &config, &g).unwrap();
            let est = crossfit_projection(&DistanceSpec::Kl, &model, 1, &t, &cf, &g, &SolverOptions::default()).unwrap();
            (est.beta_hat[0] - 0.5).abs().max((est.beta_hat[1] + 0.3).abs())
        })
        .collect();
    assert!(median(errs.clone()) < 0.03, "{errs:?}");
}

// ---------------------------------------------------------------------------
// effects

#[test]
fn effect_on_the_quarter_law_is_close_to_its_truth() {
    let law = dgp("D5").unwrap();
    assert!((law.true_effect(&DistanceSpec::L2Sq).unwrap() - 0.25).abs() < 1e-6);
    let g = grid(256);
    let t = law.sample(8000, &mut rep_rng(20, 0, 0)).unwrap();
    let cf = CrossFit::fit_all(&t, 5, 1, &[1, 0], &NuisanceConfig::default(), &g).unwrap();
    let est = crossfit_effect(&DistanceSpec::L2Sq, &t, &cf, 1, 0, &g).unwrap();
    assert!((est.psi_hat - 0.25).abs() < 0.05, "{}", est.psi_hat);
    assert!(est.ci_wald.0 <= 0.25 && 0.25 <= est.ci_wald.1, "{:?}", est.ci_wald);
}

#[test]
fn fixed_candidate_divergence_matches_quadrature_truth() {
    // Control outcomes of D5 are uniform; the candidate is the clipped cosine density.
    let law = dgp("D5").unwrap();
    let g = grid(512);
    let cand = clip_to_density(&g.tabulate(|y| 1.0 + 0.5 * SQRT_2 * (PI * y).cos()), &g).unwrap();
    let truth = g.integrate(&cand.iter().map(|v| (v - 1.0).powi(2)).collect::<Vec<_>>());
    let t = law.sample(8000, &mut rep_rng(21, 0, 0)).unwrap();
    let cf = CrossFit::fit_all(&t, 5, 1, &[0], &NuisanceConfig::default(), &g).unwrap();
    let est = crossfit_fixed_candidate(&DistanceSpec::L2Sq, &t, &cf, 0, &cand, &g).unwrap();
    assert!((est.psi_hat - truth).abs() < 3.0 * est.se, "{} vs {truth} (se {})", est.psi_hat, est.se);
}

// ---------------------------------------------------------------------------
// selection

#[test]
fn selection_hits_the_oracle_dimension_more_often_with_more_data() {
    let law = dgp("D5").unwrap();
    let g = grid(64);
    let candidates: Vec<Candidate> = (1..=6).map(|d| Candidate::Model(ModelSpec::TruncatedSeries { dim: d })).collect();
    let config = NuisanceConfig::default();
    let opts = SelectionOptions::default();
    let rate = |ni: usize, n: usize| {
        let hits = (0..30)
            .filter(|&rep| {
                let t = law.sample(n, &mut rep_rng(22, ni, rep)).unwrap();
                let plan = make_folds(n, 2, rep as u64).unwrap();
                let r = select_model(&t, &plan, 1, &candidates, &g, &config, &opts).unwrap();
                r.dims[r.chosen] <= 2
            })
            .count();
        hits as f64 / 30.0
    };
    let rates = [rate(0, 1000), rate(1, 4000), rate(2, 16000)];
    assert!(rates[0] <= rates[1] && rates[1] <= rates[2], "{rates:?}");
}

#[test]
fn aggregate_is_a_valid_density() {
    let g = grid(256);
    let t = dgp("D4").unwrap().sample(1500, &mut rep_rng(23, 0, 0)).unwrap();
    let plan = make_folds(t.n(), 3, 5).unwrap();
    let candidates = vec![
        Candidate::Model(ModelSpec::TruncatedSeries { dim: 3 }),
        Candidate::Model(ModelSpec::ExponentialFamily { dim: 4 }),
        Candidate::Model(ModelSpec::GaussianMixture { k: 2 }),
    ];
    let agg = aggregate_linear(&t, &plan, 1, &candidates, &g, &NuisanceConfig::default(), &SelectionOptions::default(), true).unwrap();
    assert!(agg.density.iter().all(|&v| v >= 0.0));
    assert!((g.integrate(&agg.density) - 1.0).abs() < 1e-10);
    assert_eq!(agg.weights.len(), 3);
}

// ---------------------------------------------------------------------------
// oracle

#[test]
fn d1_quadrature_truth_matches_simulated_outcomes() {
    // 10^6 draws of Y^1 with X ~ U[0,1]^2, binned, against the bin averages of the quadrature truth.
    let law = dgp("D1").unwrap();
    let g = grid(4001);
    let truth = law.true_marginal(1, &g);
    let bins = 100;
    let draws = 1_000_000;
    let mut rng = rep_rng(31, 0, 0);
    let mut counts = vec![0usize; bins];
    for _ in 0..draws {
        let x = [rng.random::<f64>(), rng.random::<f64>()];
        let y = law.sample_outcome(&x, 1, &mut rng);
        counts[((y * bins as f64) as usize).min(bins - 1)] += 1;
    }
    let per = (g.len() - 1) / bins;
    let mut l2 = 0.0;
    for (b, &c) in counts.iter().enumerate() {
        let seg = &truth[b * per..=(b + 1) * per];
        let avg = (seg.iter().sum::<f64>() - 0.5 * (seg[0] + seg[per])) / per as f64;
        let hist = c as f64 * bins as f64 / draws as f64;
        l2 += (hist - avg).powi(2) / bins as f64;
    }
    assert!(l2.sqrt() < 0.02, "L2 distance {}", l2.sqrt());
}

#[test]
fn monte_carlo_runs_are_pure_functions_of_the_descriptor() {
    let mut e = Experiment::new(
        "det",
        dgp("D2").unwrap(),
        Target::Projection { model: ModelSpec::TruncatedSeries { dim: 2 }, distance: DistanceSpec::L2Sq, level: 1 },
    );
    e.ns = vec![300];
    e.reps = 6;
    e.folds = 2;
    e.grid_size = 64;
    let a = mc_run(&e).unwrap();
    let b = mc_run(&e).unwrap();
    assert_eq!(a.rows, b.rows);
    assert_eq!(a.rows_csv(), b.rows_csv());
    assert_eq!(a.summaries, b.summaries);
}

#[test]
fn knn_density_is_a_fallback_regressor_choice() {
    // The marginal regressor ignores covariates, so every row gets the same curve.
    let g = grid(64);
    let t = dgp("D2").unwrap().sample(600, &mut rep_rng(24, 0, 0)).unwrap();
    let method = CondDensityMethod { regressor: Regressor::Marginal, ..CondDensityMethod::default() };
    let fit = method.fit(&t, &(0..t.n()).collect::<Vec<_>>(), 0, &g).unwrap();
    let (mut a, mut b) = (vec![0.0; 64], vec![0.0; 64]);
    fit.tabulate(&[0.1, 0.9], &mut a);
    fit.tabulate(&[0.8, 0.2], &mut b);
    assert_eq!(a, b);
}
