//! Simulates wealth under a constant allocation, estimates the
//! risk-sensitive criterion and checks the Doléans martingale.

use rsjump::model::{ControlVector, ValidatedModel};
use rsjump::reference;
use rsjump::simulate::{doleans_check, estimate_criterion, simulate_physical, SimConfig};

pub fn run_example() -> rsjump::Result<()> {
    let model = ValidatedModel::new(reference::reference_model())?;
    let h = ControlVector::from_slice(&[0.4, -0.2]);
    let cfg = SimConfig { n_paths: 20_000, dt: 1e-2, seed: 42, antithetic: false, record_every: 0 };
    let bundle = simulate_physical(&model, &h, &[0.0], &cfg)?;
    let j = estimate_criterion(&bundle, model.theta())?;
    let chi = doleans_check(&bundle)?;
    let s = bundle.summary();
    println!("E[ln V(T)] = {:.5}, Var[ln V(T)] = {:.5}", s.mean_ln_v, s.var_ln_v);
    println!("J = {:.5} +/- {:.5}", j.value, j.std_error);
    println!("mean chi_T = {:.5} +/- {:.5}", chi.value, chi.std_error);
    Ok(())
}

#[allow(dead_code)]
fn main() -> rsjump::Result<()> {
    run_example()
}
