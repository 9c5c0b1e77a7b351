//! One-step estimates of the distance between the treated and control
//! counterfactual densities, with Wald and conservative intervals.

use cfdens::data::{make_grid, QuadratureRule};
use cfdens::distances::DistanceSpec;
use cfdens::effects::{crossfit_effect, crossfit_effect_l2_direct};
use cfdens::nuisance::{CrossFit, NuisanceConfig};
use cfdens::oracle::{dgp, rep_rng};

fn main() -> cfdens::error::Result<()> {
    let law = dgp("D5")?;
    let grid = make_grid(256, QuadratureRule::Trapezoid)?;
    let table = law.sample(4000, &mut rep_rng(12, 0, 0))?;
    let crossfit = CrossFit::fit_all(&table, 5, 1, &[0, 1], &NuisanceConfig::default(), &grid)?;

    println!("{:<12} {:>9} {:>9} {:>9}  {:<22} {:<22}", "distance", "truth", "psi", "se", "wald", "conservative");
    for d in DistanceSpec::all() {
        let est = crossfit_effect(&d, &table, &crossfit, 1, 0, &grid)?;
        let (wl, wh) = est.ci_wald;
        let (cl, ch) = est.ci_conservative;
        println!(
            "{:<12} {:>9.5} {:>9.5} {:>9.5}  [{wl:+.4}, {wh:+.4}]     [{cl:+.4}, {ch:+.4}]",
            d.to_string(),
            law.true_effect(&d)?,
            est.psi_hat,
            est.se
        );
    }
    let direct = crossfit_effect_l2_direct(&table, &crossfit, 1, 0, &grid)?;
    println!("\nL2 effect from the direct weighted form: {:.5}", direct.psi_hat);
    Ok(())
}
