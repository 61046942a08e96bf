//! Stability of non-Euclidean descent on a quadratic: oracle constants, the
//! invariant direction, and the converge/diverge transition at `η = 2/S`.

use eos_core::norms::NormSpec;
use eos_core::objectives::QuadraticObjective;
use eos_core::quadlab::{bisect_threshold, oracle_constants, simulate, stability_diagram, verify_invariant_direction};

fn main() -> eos_core::Result<()> {
    let h = nalgebra::DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.0, 1.0, 3.0, 0.5, 0.0, 0.5, 2.0]);
    let q = QuadraticObjective::new(h)?;
    for norm in [NormSpec::Euclidean, NormSpec::Linf] {
        let case = oracle_constants(&q.dense_hessian(), &norm)?;
        let inv = verify_invariant_direction(&case)?;
        println!(
            "{:>9}: S = {:.6} ({:?}), mu = {:.6}, d̂ = {:?}, fixed-point residual {:.1e}",
            norm.name(),
            case.s,
            case.s_provenance,
            case.mu,
            case.dhat.as_slice(),
            inv.residual
        );

        let eta = 2.2 / case.s;
        let sim = simulate(&case.hessian, &norm, eta, &case.dhat, 5)?;
        let ratios: Vec<f64> = sim.iterates.windows(2).map(|w| w[1].as_slice()[0] / w[0].as_slice()[0]).collect();
        println!("           η = 2.2/S from d̂: per-step factors {ratios:.6?} (1 − ηS = {:.6})", 1.0 - eta * case.s);

        let etas: Vec<f64> = [0.5, 0.99, 1.01, 1.5].iter().map(|r| r * 2.0 / case.s).collect();
        for row in stability_diagram(&case, &etas, 20_000, 0)? {
            println!(
                "           ηS/2 = {:.2}, w0 = {:>6}: {:<11} after {:>5} steps",
                row.eta_ratio,
                row.init.as_str(),
                row.outcome.as_str(),
                row.steps
            );
        }
        let t = bisect_threshold(&case, 1.0 / case.s, 4.0 / case.s, 20_000, 1e-6)?;
        println!("           bisected threshold = (2/S)·{:.6}", t * case.s / 2.0);
    }
    Ok(())
}
