//! Linear aggregation of several fitted candidate densities, with weights
//! estimated on held-out folds and averaged over fold roles.

use cfdens::data::{make_folds, make_grid, QuadratureRule};
use cfdens::models::ModelSpec;
use cfdens::nuisance::NuisanceConfig;
use cfdens::oracle::{dgp, rep_rng};
use cfdens::selection::{aggregate_linear, Candidate, SelectionOptions};

fn main() -> cfdens::error::Result<()> {
    let law = dgp("D4")?;
    let grid = make_grid(256, QuadratureRule::Trapezoid)?;
    let table = law.sample(3000, &mut rep_rng(14, 0, 0))?;
    let plan = make_folds(table.n(), 2, 3)?;
    let candidates = vec![
        Candidate::Model(ModelSpec::TruncatedSeries { dim: 4 }),
        Candidate::Model(ModelSpec::ExponentialFamily { dim: 4 }),
        Candidate::Model(ModelSpec::GaussianMixture { k: 2 }),
    ];
    let agg = aggregate_linear(&table, &plan, 1, &candidates, &grid, &NuisanceConfig::default(), &SelectionOptions::default(), true)?;
    for (label, w) in agg.labels.iter().zip(&agg.weights) {
        println!("{label:<14} weight {w:+.4}");
    }
    let truth = law.true_marginal(1, &grid);
    let err: Vec<f64> = agg.density.iter().zip(&truth).map(|(a, b)| (a - b).powi(2)).collect();
    println!("mass {:.6}, L2 error to the true density {:.4}", grid.integrate(&agg.density), grid.integrate(&err).sqrt());
    Ok(())
}
