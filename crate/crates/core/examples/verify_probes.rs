//! Runs the structural probes (convexity, bounds, monotonicity, comparison,
//! self-convergence) on the reference model.

use rsjump::bounds::{find_bound_controls, zero_beta_policy};
use rsjump::model::ValidatedModel;
use rsjump::pide::{auto_grid, phi_from_tilde, solve_pide, Axis, GridSpec, Scheme};
use rsjump::reference;
use rsjump::verify::{
    probe_bounds, probe_comparison, probe_convexity, probe_monotonicity, self_convergence, Region, VerificationSummary,
};

pub fn run_example() -> rsjump::Result<()> {
    let model = ValidatedModel::new(reference::reference_model())?;
    let spec = auto_grid(&model)?;
    let sol = solve_pide(&model, &spec)?;
    let phi = phi_from_tilde(&sol.values)?;
    let interior = Region::central(&spec, 0.6);
    let bounds = find_bound_controls(&model)?;
    let zb = zero_beta_policy(&model)?;
    let scheme = Scheme::new(&model, &spec)?;
    let mut summary = VerificationSummary::default();
    summary.push(probe_convexity(&spec, &phi, 2_000, 1, Some(&interior)));
    summary.push(probe_bounds(&sol.values, &bounds, Some(&zb), model.risk(), None));
    summary.push(probe_monotonicity(&scheme, &sol.values, 500, 2));
    summary.push(probe_comparison(&model, &spec, 1.0, 1.5)?);
    let coarse = GridSpec::new(vec![Axis::new(-1.5, 1.5, 51)]);
    let conv = self_convergence(&model, &coarse, 3, &Region::central(&coarse, 0.6), 1.7)?;
    summary.push(conv.report);
    println!("{summary}");
    Ok(())
}

#[allow(dead_code)]
fn main() -> rsjump::Result<()> {
    run_example()
}
