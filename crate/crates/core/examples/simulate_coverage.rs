//! A small Monte-Carlo study of Wald interval coverage for a projection
//! parameter at two sample sizes. Set CFDENS_THREADS to cap parallelism.

use cfdens::distances::DistanceSpec;
use cfdens::models::ModelSpec;
use cfdens::oracle::{dgp, mc_run, Experiment, Target};

fn main() -> cfdens::error::Result<()> {
    let mut exp = Experiment::new(
        "coverage-demo",
        dgp("D2")?,
        Target::Projection { model: ModelSpec::TruncatedSeries { dim: 3 }, distance: DistanceSpec::L2Sq, level: 1 },
    );
    exp.ns = vec![1000, 4000];
    exp.reps = 100;
    exp.seed = 15;
    let result = mc_run(&exp)?;
    println!("population beta: {:?}", result.truth.iter().map(|v| format!("{v:+.4}")).collect::<Vec<_>>());
    for s in &result.summaries {
        println!(
            "n = {:>5}: coverage {:?}  rmse {:?}  failures {}",
            s.n,
            s.coverage.iter().map(|v| format!("{v:.2}")).collect::<Vec<_>>(),
            s.rmse.iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>(),
            s.failures
        );
    }
    Ok(())
}
