//! Checks the modelling assumptions of the reference model and prints the
//! assumption table.

use rsjump::model::{validate_model, ValidatedModel};
use rsjump::reference;

pub fn run_example() -> rsjump::Result<()> {
    let raw = reference::reference_model();
    let report = validate_model(&raw)?;
    println!("{report}");
    let model = ValidatedModel::new(raw)?;
    println!(
        "{} factor(s), {} asset(s), {} jump atom(s), total intensity {}",
        model.n_factors(),
        model.n_assets(),
        model.n_atoms(),
        model.total_intensity()
    );
    Ok(())
}

#[allow(dead_code)]
fn main() -> rsjump::Result<()> {
    run_example()
}
