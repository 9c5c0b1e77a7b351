//! Divergences between two densities on the unit interval, and the pointwise
//! derivative table that drives the moment conditions and influence functions.

use cfdens::data::{make_grid, QuadratureRule};
use cfdens::distances::{divergence, DistanceSpec};

fn main() -> cfdens::error::Result<()> {
    let grid = make_grid(1025, QuadratureRule::Trapezoid)?;
    // Beta(2, 2) against a tilted linear density.
    let p = grid.tabulate(|y| 6.0 * y * (1.0 - y));
    let q = grid.tabulate(|y| 0.5 + y);

    println!("{:<12} {:>12}", "distance", "D_f(p, q)");
    for d in DistanceSpec::all() {
        println!("{:<12} {:>12.6}", d.to_string(), divergence(&d, &p, &q, &grid)?);
    }

    println!("\nderivatives at (p, q) = (2, 1)");
    println!("{:<12} {:>10} {:>10} {:>10} {:>10}", "distance", "f", "f1", "f2", "f21");
    for d in DistanceSpec::all() {
        println!(
            "{:<12} {:>10.4} {:>10.4} {:>10.4} {:>10.4}",
            d.to_string(),
            d.f(2.0, 1.0)?,
            d.f1(2.0, 1.0)?,
            d.f2(2.0, 1.0)?,
            d.f21(2.0, 1.0)?
        );
    }
    Ok(())
}
