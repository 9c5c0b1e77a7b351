//! Choose the dimension of a cosine-series projection by cross-validated
//! pseudo-L2 risk, on a bimodal counterfactual density.

use cfdens::data::{make_folds, make_grid, QuadratureRule};
use cfdens::models::ModelSpec;
use cfdens::nuisance::NuisanceConfig;
use cfdens::oracle::{dgp, rep_rng};
use cfdens::selection::{select_model, Candidate, SelectionOptions};

fn main() -> cfdens::error::Result<()> {
    let grid = make_grid(128, QuadratureRule::Trapezoid)?;
    let table = dgp("D4")?.sample(3000, &mut rep_rng(13, 0, 0))?;
    let plan = make_folds(table.n(), 5, 2)?;
    let candidates: Vec<Candidate> = (1..=8).map(|d| Candidate::Model(ModelSpec::TruncatedSeries { dim: d })).collect();

    let risks = select_model(&table, &plan, 1, &candidates, &grid, &NuisanceConfig::default(), &SelectionOptions::default())?;
    for (j, label) in risks.labels.iter().enumerate() {
        let mark = if j == risks.chosen { "  <- chosen" } else { "" };
        println!("{label:<14} risk {:+.5} (se {:.5}){mark}", risks.risk[j], risks.se[j]);
    }
    Ok(())
}
