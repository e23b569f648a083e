//! Finite-difference gradient checks of every layer and the convolution
//! adjoint identity, as run by `cardioseg gradcheck`.
//!
//! `cargo run --release --example gradcheck -- [seed]`

use cardioseg::tensor::verify::{adjoint_suite, gradient_suite};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let seed: u64 = std::env::args()
        .nth(1)
        .map(|s| s.parse())
        .transpose()?
        .unwrap_or(0);
    for check in gradient_suite(20, seed, 1e-5)? {
        println!(
            "{:<18} {:>3} trials  max rel {:.2e}  {}",
            check.layer,
            check.trials,
            check.max_rel_error,
            if check.passed() { "ok" } else { "FAILED" }
        );
    }
    let cases = adjoint_suite(50, seed)?;
    for c in cases.iter().take(4) {
        println!(
            "{} input {:?} kernel {:?} stride {:?}: <Ax,y> {:+.6} <x,A*y> {:+.6}",
            if c.transposed { "conv_T" } else { "conv  " },
            c.input_shape,
            c.kernel,
            c.stride,
            c.forward,
            c.adjoint
        );
    }
    let worst = cases.iter().map(|c| c.rel_error()).fold(0.0, f64::max);
    println!(
        "adjoint identity over {} cases: max rel {worst:.2e}",
        cases.len()
    );
    Ok(())
}
