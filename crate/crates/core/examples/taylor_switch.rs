//! Switching from the network to its frozen quadratic model: before the edge
//! of stability the model tracks training; at the edge it can blow up, depending
//! on how far the frozen sharpness sits above 2/η.

use eos_core::data::{gen_synthetic, SyntheticKind};
use eos_core::norms::NormSpec;
use eos_core::objectives::{Activation, MlpObjective, Objective};
use eos_core::optimizers::{run, OptimizerSpec, RunOptions, StepMode};
use eos_core::quadlab::taylor_switch;
use eos_core::rng::RngState;
use eos_core::spectra::{sharpness_fw, FwConfig};

fn main() -> eos_core::Result<()> {
    let data = gen_synthetic(SyntheticKind::RandomRegression { noise: 1.0 }, 500, 16, 4, 0)?;
    let (x, y, _) = data.into_parts();
    let mlp = MlpObjective::new(&[16, 64, 64, 4], Activation::Tanh, x, y)?;
    let w0 = mlp.init_params(&mut RngState::new(1));
    let s0 = sharpness_fw(mlp.hessian_at(&w0)?.as_ref(), &NormSpec::Euclidean, &FwConfig::default())?.value;
    let spec = OptimizerSpec::new(StepMode::Unnormalized, NormSpec::Euclidean, 1.0 / s0)?;

    let mut w = w0;
    let mut at = 0;
    for t0 in [20, 300, 1000] {
        let opts = RunOptions {
            steps: t0 - at,
            sharpness_cadence: 0,
            ..RunOptions::default()
        };
        w = run(&mlp, &w, &spec, &opts)?.final_w;
        at = t0;
        let s = sharpness_fw(mlp.hessian_at(&w)?.as_ref(), &spec.norm, &FwConfig::default())?.value;
        let curves = taylor_switch(&mlp, &w, &spec, 50, None)?;
        let peak = curves.taylor_loss.iter().fold(0.0f64, |m, &v| m.max(v)) / curves.taylor_loss[0];
        println!(
            "switch at step {t0}: S·η/2 = {:.3}; true loss {:.4e} → {:.4e}; Taylor model peaks at {peak:.3e}× its start",
            s * spec.eta / 2.0,
            curves.true_loss[0],
            curves.true_loss[curves.true_loss.len() - 1]
        );
    }
    Ok(())
}
