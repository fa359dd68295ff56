//! Solves the transformed HJB equation on the default grid and prints the
//! value function and the feedback control at t = 0.

use rsjump::pide::{auto_grid, phi_from_tilde, solve_pide};
use rsjump::model::ValidatedModel;
use rsjump::reference;

pub fn run_example() -> rsjump::Result<()> {
    let model = ValidatedModel::new(reference::reference_model())?;
    let spec = auto_grid(&model)?;
    let sol = solve_pide(&model, &spec)?;
    let r = &sol.report;
    println!("{:?} nodes, dt {:.3e} (stable {:.3e}), {} steps, {} clip events", r.nodes, r.dt, r.stable_dt, r.n_steps, r.clips.total());
    let phi = phi_from_tilde(&sol.values)?;
    for j in (0..spec.n_nodes()).step_by(spec.n_nodes() / 8) {
        println!(
            "x={:+.3}: Phi(0,x)={:.6} h*={:?}",
            spec.coords(j)[0],
            phi[0][j],
            sol.policy.controls[0][j].as_slice()
        );
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> rsjump::Result<()> {
    run_example()
}
