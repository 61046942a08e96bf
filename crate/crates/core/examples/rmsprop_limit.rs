//! The RMSprop-style preconditioned step: with `β₂ = 0` and the normalized update it is sign descent;
//! with `β₂ = 0.99` sharpness is measured in the current metric `P_t`.

use eos_core::norms::NormSpec;
use eos_core::objectives::{Objective, QuadraticObjective};
use eos_core::optimizers::{rmsprop_step, run, OptimizerSpec, RmsState, RunOptions, StepMode};
use eos_core::norms::Preconditioner;
use eos_core::param::ParamVector;

fn main() -> eos_core::Result<()> {
    let q = QuadraticObjective::from_diagonal(&[5.0, 1.0, 0.2])?;
    let w = ParamVector::from_slice(&[1.0, -2.0, 3.0]);
    let eta = 0.1;
    let (next, _, rec) =
        rmsprop_step(&q, &w, &RmsState::zeros(w.layout()), 0.0, 1e-12, eta, StepMode::Normalized)?;
    let g = q.grad(&w)?;
    let step: Vec<f64> = next.as_slice().iter().zip(w.as_slice()).map(|(a, b)| (a - b) / eta).collect();
    println!("g = {:?}\nupdate/η = {step:?} (‖g‖* = {:.6})", g.as_slice(), rec.dual_grad_norm);

    let base = NormSpec::preconditioned(Preconditioner::diagonal(vec![1.0; 3])?);
    let spec = OptimizerSpec::new(StepMode::Unnormalized, base, 0.05)?.with_ema(0.99, 1e-8)?;
    let opts = RunOptions {
        steps: 200,
        sharpness_cadence: 50,
        ..RunOptions::default()
    };
    for r in run(&q, &w, &spec, &opts)?.records.iter().filter(|r| r.sharpness.is_some()) {
        let p = r.preconditioner.as_ref().map(|p| p.to_dense().diagonal().as_slice().to_vec());
        println!("step {:>3}: S_P = {:.4}, P_t = {:?}", r.step, r.sharpness.as_ref().unwrap().value, p);
    }
    Ok(())
}
