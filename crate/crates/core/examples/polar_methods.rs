//! Polar factor by SVD, Newton–Schulz and PolarExpress, and the spectral
//! descent direction it defines.

use eos_core::matrixfns::{nuclear_norm, polar_factor, spectral_norm, PolarMethod};
use eos_core::rng::RngState;
use nalgebra::DMatrix;

fn main() -> eos_core::Result<()> {
    let mut rng = RngState::new(3);
    let g = DMatrix::from_fn(32, 16, |_, _| rng.standard_normal());
    let g = &g / spectral_norm(&g)?;
    let exact = polar_factor(&g, &PolarMethod::ExactSvd)?;
    println!("⟨polar(G), G⟩ = {:.12}, ‖G‖_nuc = {:.12}", exact.dot(&g), nuclear_norm(&g)?);
    for (label, method) in [
        ("Newton–Schulz(5)", PolarMethod::newton_schulz(5)),
        ("Newton–Schulz(15)", PolarMethod::newton_schulz(15)),
        ("PolarExpress(5)", PolarMethod::polar_express(5)),
    ] {
        let approx = polar_factor(&g, &method)?;
        let sv = approx.singular_values();
        println!(
            "{label}: ‖U − polar‖_F = {:.3e}, singular values in [{:.4}, {:.4}]",
            (&approx - &exact).norm(),
            sv.min(),
            sv.max()
        );
    }
    Ok(())
}
