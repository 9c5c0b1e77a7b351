//! Reading a CSV whose outcome column uses a missing-value code. Rows with a
//! missing outcome are kept as a separate arm, so the projection for an arm
//! uses the observed rows and adjusts for which outcomes were seen.

use cfdens::data::{make_grid, read_csv, CsvSchema, QuadratureRule, MISSING_LEVEL};
use cfdens::distances::DistanceSpec;
use cfdens::models::ModelSpec;
use cfdens::nuisance::{CrossFit, NuisanceConfig};
use cfdens::oracle::{dgp, rep_rng};
use cfdens::projection::{crossfit_projection, SolverOptions};
use rand::Rng;

fn main() -> cfdens::error::Result<()> {
    // Simulate a study, then hide outcomes more often when x1 is large.
    let table = dgp("D2")?.sample(3000, &mut rep_rng(16, 0, 0))?;
    let mut rng = rep_rng(16, 1, 0);
    let mut text = String::from("x1,x2,a,y\n");
    for i in 0..table.n() {
        let x = table.x(i);
        let y = if rng.random::<f64>() < 0.3 * x[0] { "NA".to_string() } else { format!("{:.6}", table.y(i)) };
        text.push_str(&format!("{:.6},{:.6},{},{y}\n", x[0], x[1], table.a(i)));
    }

    let schema = CsvSchema { x_cols: vec!["x1".into(), "x2".into()], a_col: "a".into(), y_col: "y".into() };
    let data = read_csv(text.as_bytes(), &schema, Some("NA"))?;
    println!(
        "rows {}, treated observed {}, control observed {}, missing {}",
        data.n(),
        data.level_count(1),
        data.level_count(0),
        data.level_count(MISSING_LEVEL)
    );

    let grid = make_grid(256, QuadratureRule::Trapezoid)?;
    let crossfit = CrossFit::fit_all(&data, 5, 1, &[1], &NuisanceConfig::default(), &grid)?;
    let model = ModelSpec::TruncatedSeries { dim: 3 };
    let est = crossfit_projection(&DistanceSpec::L2Sq, &model, 1, &data, &crossfit, &grid, &SolverOptions::default())?;
    for (j, (b, se)) in est.beta_hat.iter().zip(est.se()).enumerate() {
        println!("beta[{}] = {b:+.4} (se {se:.4})", j + 1);
    }
    Ok(())
}
