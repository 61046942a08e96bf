//! Edge-of-stability training of a small tanh network: generalized sharpness
//! rises to `2/η` and the directional smoothness settles there.
//!
//! `cargo run --release --example train_eos -- [euclidean|linf|block|spectral] [steps]`

use eos_core::data::{gen_synthetic, SyntheticKind};
use eos_core::harness::runlog::{rows_from_run, EosStats};
use eos_core::norms::NormSpec;
use eos_core::objectives::{Activation, MlpObjective, Objective};
use eos_core::optimizers::{run, OptimizerSpec, RunOptions, StepMode};
use eos_core::rng::RngState;
use eos_core::spectra::{sharpness_fw, FwConfig};

fn main() -> eos_core::Result<()> {
    let mut args = std::env::args().skip(1);
    let norm = match args.next().as_deref().unwrap_or("euclidean") {
        "linf" => NormSpec::Linf,
        "block" => NormSpec::block_l12(),
        "spectral" => NormSpec::spectral_max(),
        _ => NormSpec::Euclidean,
    };
    let steps: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(1500);

    let data = gen_synthetic(SyntheticKind::RandomRegression { noise: 1.0 }, 500, 16, 4, 0)?;
    let (x, y, _) = data.into_parts();
    let mlp = MlpObjective::new(&[16, 64, 64, 4], Activation::Tanh, x, y)?;
    let w0 = mlp.init_params(&mut RngState::new(1));

    let s0 = sharpness_fw(mlp.hessian_at(&w0)?.as_ref(), &norm, &FwConfig::default())?.value;
    let eta = 1.0 / s0;
    println!("{}: {} parameters, S0 = {s0:.4}, η = 1/S0 = {eta:.4}, 2/η = {:.4}", norm.name(), w0.len(), 2.0 / eta);

    let spec = OptimizerSpec::new(StepMode::Unnormalized, norm, eta)?;
    let opts = RunOptions {
        steps,
        sharpness_cadence: 50,
        ..RunOptions::default()
    };
    let res = run(&mlp, &w0, &spec, &opts)?;
    for r in res.records.iter().filter(|r| r.sharpness.is_some()) {
        let s = r.sharpness.as_ref().map_or(f64::NAN, |s| s.value);
        println!(
            "step {:>5}  loss {:.4e}  S·η/2 {:.3}  D·η/2 {:.3}",
            r.step,
            r.loss_before,
            s / r.threshold,
            r.dir_smoothness.unwrap_or(f64::NAN) / r.threshold
        );
    }
    let stats = EosStats::from_rows(&rows_from_run(&res, StepMode::Unnormalized), eta);
    println!("{stats:?}");
    Ok(())
}
