//! Zero-beta policy, bound controls and the affine envelope of the
//! transformed value function.

use nalgebra::DVector;
use rsjump::bounds::{envelope_upper_bound, find_bound_controls, global_bound_m, zero_beta_policy, BoundReport};
use rsjump::model::ValidatedModel;
use rsjump::reference;

pub fn run_example() -> rsjump::Result<()> {
    let model = ValidatedModel::new(reference::reference_model())?;
    let zb = zero_beta_policy(&model)?;
    println!("zero-beta control {:?}, g = {:.6}", zb.h_check.as_slice(), zb.g_check);
    let bounds = find_bound_controls(&model)?;
    print!("{}", BoundReport(&bounds));
    for x in [-0.5, 0.0, 0.5] {
        let env = envelope_upper_bound(0.0, &DVector::from_element(1, x), &bounds, model.risk());
        let m = global_bound_m(&zb, 0.0, model.risk());
        println!("t=0 x={x:+.1}: envelope {env:.6}, global bound {m:.6}");
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> rsjump::Result<()> {
    run_example()
}
