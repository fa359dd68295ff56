//! Solves the inner maximization of the HJB bracket at a few states and
//! gradients, and evaluates the exponentially transformed Hamiltonian.

use nalgebra::DVector;
use rsjump::coefficients::{exp_hamiltonian, g_value, optimal_control};
use rsjump::model::ValidatedModel;
use rsjump::reference;

pub fn run_example() -> rsjump::Result<()> {
    let model = ValidatedModel::new(reference::reference_model())?;
    for (x, p) in [(0.0, 0.0), (0.5, -0.3), (-0.5, 0.4)] {
        let x = DVector::from_element(1, x);
        let p = DVector::from_element(1, p);
        let sol = optimal_control(&x, &p, &model)?;
        let g = g_value(&x, &sol.h_star, &model)?;
        println!(
            "x={:+.2} p={:+.2}: h*={:?} bracket={:.6} g={g:.6} ({} Newton steps)",
            x[0],
            p[0],
            sol.h_star.as_slice(),
            sol.value,
            sol.iterations
        );
    }
    let x = DVector::from_element(1, 0.2);
    let ham = exp_hamiltonian(&x, 0.9, &DVector::from_element(1, 0.1), &model)?;
    println!("H(x=0.2, r=0.9, p~=0.1) = {:.8} at h*={:?}", ham.value, ham.inner.h_star.as_slice());
    Ok(())
}

#[allow(dead_code)]
fn main() -> rsjump::Result<()> {
    run_example()
}
