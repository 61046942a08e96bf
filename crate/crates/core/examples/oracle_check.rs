//! Frank–Wolfe sharpness against exact oracles over restart counts and
//! iteration budgets.

use eos_core::harness::commands::{oracle_table, oracle_verdict};
use eos_core::harness::config::{OracleConfig, OracleGeometry};

fn main() -> eos_core::Result<()> {
    for geometry in [OracleGeometry::Linf, OracleGeometry::BlockL12, OracleGeometry::Euclidean] {
        let oc = OracleConfig {
            geometry,
            seeds: 30,
            ..OracleConfig::default()
        };
        let (cells, _) = oracle_table(&oc, 0)?;
        println!("{geometry:?}");
        for c in &cells {
            println!(
                "  M = {:>2}, K = {:>3}: mean rel. error {:.2e}, max {:.2e}, {}/{} in band",
                c.restarts, c.iters, c.mean_rel_err, c.max_rel_err, c.within_band, oc.seeds
            );
        }
        let (pass, msg) = oracle_verdict(&oc, &cells);
        println!("  {} {msg}", if pass { "PASS" } else { "FAIL" });
    }
    Ok(())
}
