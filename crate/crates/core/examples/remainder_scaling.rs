//! The bias left after the one-step correction is second order: perturbing the
//! nuisances by eps moves it by about eps^2. Computed by quadrature, no sampling.

use cfdens::data::{make_grid, QuadratureRule};
use cfdens::distances::DistanceSpec;
use cfdens::models::ModelSpec;
use cfdens::oracle::{dgp, effect_remainder, loglog_slope, projection_remainder, Perturbation};

fn main() -> cfdens::error::Result<()> {
    let law = dgp("D2")?;
    let grid = make_grid(256, QuadratureRule::Trapezoid)?;
    let pert = Perturbation::default();
    let eps: Vec<f64> = (0..6).map(|k| 0.02 * 10f64.powf(k as f64 / 5.0)).collect();

    let model = ModelSpec::TruncatedSeries { dim: 3 };
    let proj: Vec<f64> = eps
        .iter()
        .map(|&e| projection_remainder(&law, 1, &model, &DistanceSpec::L2Sq, e, &pert, &grid).map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt()))
        .collect::<cfdens::error::Result<_>>()?;
    println!("series projection, L2: log-log slope {:.2}", loglog_slope(&eps, &proj));

    for d in [DistanceSpec::L2Sq, DistanceSpec::Kl, DistanceSpec::Hellinger] {
        let bias: Vec<f64> = eps.iter().map(|&e| effect_remainder(&law, &d, e, &pert, &grid)).collect::<cfdens::error::Result<_>>()?;
        println!("effect under {d}: log-log slope {:.2}", loglog_slope(&eps, &bias));
    }
    Ok(())
}
