//! Curvature along a frozen sharpness maximizer, next to the per-step
//! sharpness, for a network trained into the edge of stability.

use eos_core::data::{gen_synthetic, SyntheticKind};
use eos_core::norms::NormSpec;
use eos_core::objectives::{Activation, MlpObjective, Objective};
use eos_core::optimizers::{run, step, OptimizerSpec, RunOptions, StepMode};
use eos_core::rng::RngState;
use eos_core::spectra::{directional_curvature, sharpness_fw, FwConfig};

fn main() -> eos_core::Result<()> {
    let data = gen_synthetic(SyntheticKind::RandomRegression { noise: 1.0 }, 500, 16, 4, 0)?;
    let (x, y, _) = data.into_parts();
    let mlp = MlpObjective::new(&[16, 64, 64, 4], Activation::Tanh, x, y)?;
    let w0 = mlp.init_params(&mut RngState::new(1));
    let fw = FwConfig::default();
    let s0 = sharpness_fw(mlp.hessian_at(&w0)?.as_ref(), &NormSpec::Euclidean, &fw)?.value;
    let spec = OptimizerSpec::new(StepMode::Unnormalized, NormSpec::Euclidean, 1.0 / s0)?;
    let opts = RunOptions {
        steps: 1000,
        sharpness_cadence: 0,
        ..RunOptions::default()
    };
    let mut w = run(&mlp, &w0, &spec, &opts)?.final_w;
    let est = sharpness_fw(mlp.hessian_at(&w)?.as_ref(), &spec.norm, &fw)?;
    let thr = 2.0 / spec.eta;
    println!("t0 = 1000: S = {:.4}, 2/η = {thr:.4}", est.value);
    let mut sum = 0.0;
    for j in 1..=20 {
        w = step(&mlp, &w, &spec)?.0;
        let c = directional_curvature(&mlp, &w, &est.direction)?;
        sum += c;
        let s = sharpness_fw(mlp.hessian_at(&w)?.as_ref(), &spec.norm, &fw)?.value;
        println!("j = {j:>2}: d̂ᵀHd̂ = {c:.4}, running mean {:.4}, S = {s:.4}", sum / j as f64);
    }
    Ok(())
}
