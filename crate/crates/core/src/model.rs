//! Market model: factor and asset dynamics, the atomic jump measure and the
//! admissible control set.
//!
//! The raw configuration types ([`MarketModel`] and its blocks) mirror the
//! JSON config file. [`ValidatedModel`] is the immutable, checked form every
//! numerical routine consumes; it caches the derived quantities (`â`, `Â`,
//! `ΣΣ'`, `ΛΣ'`, `ΛΛ'`).

use std::fmt;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Relative eigenvalue floor used as the positive-definiteness proxy for `ΣΣ'`.
pub const PD_RELATIVE_FLOOR: f64 = 1e-12;
/// Largest condition number of `B` accepted as "invertible".
pub const MAX_CONDITION_B: f64 = 1e12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskParams {
    pub theta: f64,
    #[serde(rename = "horizon")]
    pub horizon_t: f64,
    #[serde(rename = "initial_wealth")]
    pub initial_wealth_v: f64,
}

impl RiskParams {
    pub fn theta_is_valid(&self) -> bool {
        self.theta.is_finite() && self.theta > -1.0 && self.theta != 0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorModel {
    pub b: Vec<f64>,
    #[serde(rename = "B")]
    pub big_b: Vec<Vec<f64>>,
    #[serde(rename = "Lambda")]
    pub lambda: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssetModel {
    pub a0: f64,
    #[serde(rename = "A0")]
    pub big_a0: Vec<f64>,
    pub a: Vec<f64>,
    #[serde(rename = "A")]
    pub big_a: Vec<Vec<f64>>,
    #[serde(rename = "Sigma")]
    pub sigma: Vec<Vec<f64>>,
}

/// One atom of the jump measure: intensity `λ_k`, factor jump `ξ_k` and
/// asset return jump `γ_k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JumpAtom {
    pub intensity: f64,
    pub xi: Vec<f64>,
    pub gamma: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct JumpMeasure {
    pub atoms: Vec<JumpAtom>,
}

impl JumpMeasure {
    pub fn total_mass(&self) -> f64 {
        self.atoms.iter().map(|a| a.intensity).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarketModel {
    pub factors: FactorModel,
    pub assets: AssetModel,
    #[serde(default)]
    pub jumps: JumpMeasure,
    pub risk: RiskParams,
}

impl MarketModel {
    pub fn from_json_str(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json_str(&text)
    }

    pub fn n_factors(&self) -> usize {
        self.factors.b.len()
    }

    pub fn n_assets(&self) -> usize {
        self.assets.a.len()
    }

    /// SHA-256 of the canonical JSON serialization; ties grids to the model
    /// that produced them.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(self).expect("model serializes");
        hex::encode(Sha256::digest(&json))
    }
}

/// Allocation over the `m` risky assets, as fractions of wealth.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlVector(pub DVector<f64>);

impl ControlVector {
    pub fn zeros(m: usize) -> Self {
        ControlVector(DVector::zeros(m))
    }

    pub fn from_slice(h: &[f64]) -> Self {
        ControlVector(DVector::from_column_slice(h))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        self.0.as_slice()
    }
}

impl From<Vec<f64>> for ControlVector {
    fn from(v: Vec<f64>) -> Self {
        ControlVector(DVector::from_vec(v))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssumptionCheck {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub checks: Vec<AssumptionCheck>,
    pub usable: bool,
}

impl ValidationReport {
    pub fn check(&self, name: &str) -> Option<&AssumptionCheck> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn failures(&self) -> impl Iterator<Item = &AssumptionCheck> {
        self.checks.iter().filter(|c| !c.passed)
    }

    pub fn into_result(self) -> Result<Self> {
        if self.usable {
            Ok(self)
        } else {
            let msg = self
                .failures()
                .map(|c| format!("{} ({})", c.name, c.detail))
                .collect::<Vec<_>>()
                .join("; ");
            Err(Error::Assumption(msg))
        }
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            let status = if c.passed { "PASS" } else { "FAIL" };
            writeln!(f, "{status:4}  {:<28} {}", c.name, c.detail)?;
        }
        write!(f, "model usable: {}", self.usable)
    }
}

pub mod checks {
    pub const RISK: &str = "risk parameters";
    pub const SIGMA_PD: &str = "sigma positive definite";
    pub const B_INVERTIBLE: &str = "factor drift invertible";
    pub const INTENSITIES: &str = "positive finite intensities";
    pub const FINITE_JUMPS: &str = "finite jump sizes";
    pub const UNCORRELATED: &str = "uncorrelated jumps";
    pub const TWO_SIDED: &str = "two-sided asset jumps";
}

fn matrix_from_rows(rows: &[Vec<f64>], nrows: usize, ncols: usize, name: &str) -> Result<DMatrix<f64>> {
    if rows.len() != nrows {
        return Err(Error::Dimension(format!(
            "{name} has {} rows, expected {nrows}",
            rows.len()
        )));
    }
    if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != ncols) {
        return Err(Error::Dimension(format!(
            "{name} row {i} has {} columns, expected {ncols}",
            r.len()
        )));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

fn expect_len(v: &[f64], len: usize, name: &str) -> Result<()> {
    if v.len() != len {
        return Err(Error::Dimension(format!(
            "{name} has length {}, expected {len}",
            v.len()
        )));
    }
    Ok(())
}

struct Blocks {
    b: DVector<f64>,
    big_b: DMatrix<f64>,
    lambda: DMatrix<f64>,
    big_a0: DVector<f64>,
    a: DVector<f64>,
    big_a: DMatrix<f64>,
    sigma: DMatrix<f64>,
}

fn structural_blocks(model: &MarketModel) -> Result<Blocks> {
    let n = model.n_factors();
    let m = model.n_assets();
    if n == 0 || m == 0 {
        return Err(Error::Dimension(format!(
            "factors (n={n}) and assets (m={m}) must both be non-empty"
        )));
    }
    let big_m = n + m;
    let big_b = matrix_from_rows(&model.factors.big_b, n, n, "factors.B")?;
    let lambda = matrix_from_rows(&model.factors.lambda, n, big_m, "factors.Lambda")?;
    expect_len(&model.assets.big_a0, n, "assets.A0")?;
    let big_a = matrix_from_rows(&model.assets.big_a, m, n, "assets.A")?;
    let sigma = matrix_from_rows(&model.assets.sigma, m, big_m, "assets.Sigma")?;
    for (k, atom) in model.jumps.atoms.iter().enumerate() {
        expect_len(&atom.xi, n, &format!("jumps[{k}].xi"))?;
        expect_len(&atom.gamma, m, &format!("jumps[{k}].gamma"))?;
    }
    Ok(Blocks {
        b: DVector::from_column_slice(&model.factors.b),
        big_b,
        lambda,
        big_a0: DVector::from_column_slice(&model.assets.big_a0),
        a: DVector::from_column_slice(&model.assets.a),
        big_a,
        sigma,
    })
}

fn check(name: &str, passed: bool, detail: impl Into<String>) -> AssumptionCheck {
    AssumptionCheck {
        name: name.to_string(),
        passed,
        detail: detail.into(),
    }
}

/// Checks every structural and modelling assumption on a raw model.
///
/// Dimension mismatches are returned as [`Error::Dimension`]; assumption
/// failures are listed in the report, which is then marked unusable.
pub fn validate_model(model: &MarketModel) -> Result<ValidationReport> {
    let blocks = structural_blocks(model)?;
    let mut checks = Vec::new();

    let risk = &model.risk;
    let risk_ok = risk.theta_is_valid()
        && risk.horizon_t.is_finite()
        && risk.horizon_t > 0.0
        && risk.initial_wealth_v.is_finite()
        && risk.initial_wealth_v > 0.0;
    checks.push(check(
        checks::RISK,
        risk_ok,
        format!(
            "theta={} in (-1,0)u(0,inf), T={} > 0, v={} > 0",
            risk.theta, risk.horizon_t, risk.initial_wealth_v
        ),
    ));

    let ss = &blocks.sigma * blocks.sigma.transpose();
    let eig = ss.clone().symmetric_eigen().eigenvalues;
    let (lo, hi) = eig
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &e| (lo.min(e), hi.max(e)));
    checks.push(check(
        checks::SIGMA_PD,
        hi > 0.0 && lo > PD_RELATIVE_FLOOR * hi,
        format!("eigenvalues of Sigma Sigma' in [{lo:.3e}, {hi:.3e}]"),
    ));

    let sv = blocks.big_b.clone().singular_values();
    let smax = sv.max();
    let smin = sv.min();
    let cond = if smin > 0.0 { smax / smin } else { f64::INFINITY };
    checks.push(check(
        checks::B_INVERTIBLE,
        cond.is_finite() && cond < MAX_CONDITION_B,
        format!("condition number of B = {cond:.3e}"),
    ));

    let bad_intensity: Vec<usize> = model
        .jumps
        .atoms
        .iter()
        .enumerate()
        .filter(|(_, a)| !(a.intensity.is_finite() && a.intensity > 0.0))
        .map(|(k, _)| k)
        .collect();
    checks.push(check(
        checks::INTENSITIES,
        bad_intensity.is_empty(),
        if bad_intensity.is_empty() {
            format!("total mass {:.6}", model.jumps.total_mass())
        } else {
            format!("atoms {bad_intensity:?} have non-positive or non-finite intensity")
        },
    ));

    let non_finite: Vec<usize> = model
        .jumps
        .atoms
        .iter()
        .enumerate()
        .filter(|(_, a)| a.xi.iter().chain(&a.gamma).any(|v| !v.is_finite()))
        .map(|(k, _)| k)
        .collect();
    checks.push(check(
        checks::FINITE_JUMPS,
        non_finite.is_empty(),
        if non_finite.is_empty() {
            "all xi and gamma finite".to_string()
        } else {
            format!("atoms {non_finite:?} carry non-finite jump sizes")
        },
    ));

    let mixed: Vec<usize> = model
        .jumps
        .atoms
        .iter()
        .enumerate()
        .filter(|(_, a)| a.xi.iter().any(|&v| v != 0.0) && a.gamma.iter().any(|&v| v != 0.0))
        .map(|(k, _)| k)
        .collect();
    checks.push(check(
        checks::UNCORRELATED,
        mixed.is_empty(),
        if mixed.is_empty() {
            "every atom has xi=0 or gamma=0".to_string()
        } else {
            format!("atoms {mixed:?} jump in both factors and assets")
        },
    ));

    let m = model.n_assets();
    let mut one_sided = Vec::new();
    for i in 0..m {
        let vals: Vec<f64> = model.jumps.atoms.iter().map(|a| a.gamma[i]).collect();
        if vals.iter().all(|&g| g == 0.0) {
            continue;
        }
        let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if !((-1.0..0.0).contains(&lo) && hi > 0.0) {
            one_sided.push(format!("asset {i}: [{lo}, {hi}]"));
        }
    }
    checks.push(check(
        checks::TWO_SIDED,
        one_sided.is_empty(),
        if one_sided.is_empty() {
            "each jumping asset has -1 <= gamma_min < 0 < gamma_max".to_string()
        } else {
            one_sided.join(", ")
        },
    ));

    let usable = checks.iter().all(|c| c.passed);
    Ok(ValidationReport { checks, usable })
}

#[derive(Debug, Clone)]
pub(crate) struct Atom {
    pub intensity: f64,
    pub xi: DVector<f64>,
    pub gamma: DVector<f64>,
    pub has_xi: bool,
    pub has_gamma: bool,
}

/// Immutable, validated market model with its derived coefficient matrices.
#[derive(Debug, Clone)]
pub struct ValidatedModel {
    raw: MarketModel,
    report: ValidationReport,
    pub(crate) n: usize,
    pub(crate) m: usize,
    pub(crate) theta: f64,
    pub(crate) b: DVector<f64>,
    pub(crate) big_b: DMatrix<f64>,
    pub(crate) lambda: DMatrix<f64>,
    pub(crate) a0: f64,
    pub(crate) big_a0: DVector<f64>,
    pub(crate) a_hat: DVector<f64>,
    pub(crate) big_a_hat: DMatrix<f64>,
    pub(crate) sigma: DMatrix<f64>,
    pub(crate) sigma_sigma_t: DMatrix<f64>,
    pub(crate) lambda_sigma_t: DMatrix<f64>,
    pub(crate) lambda_lambda_t: DMatrix<f64>,
    pub(crate) atoms: Vec<Atom>,
}

impl ValidatedModel {
    pub fn new(raw: MarketModel) -> Result<Self> {
        let report = validate_model(&raw)?.into_result()?;
        let blocks = structural_blocks(&raw)?;
        let n = raw.n_factors();
        let m = raw.n_assets();
        let a0 = raw.assets.a0;
        let ones = DVector::from_element(m, 1.0);
        let a_hat = &blocks.a - &ones * a0;
        let big_a_hat = &blocks.big_a - &ones * blocks.big_a0.transpose();
        let sigma_sigma_t = &blocks.sigma * blocks.sigma.transpose();
        let lambda_sigma_t = &blocks.lambda * blocks.sigma.transpose();
        let lambda_lambda_t = &blocks.lambda * blocks.lambda.transpose();
        let atoms = raw
            .jumps
            .atoms
            .iter()
            .map(|a| Atom {
                intensity: a.intensity,
                xi: DVector::from_column_slice(&a.xi),
                gamma: DVector::from_column_slice(&a.gamma),
                has_xi: a.xi.iter().any(|&v| v != 0.0),
                has_gamma: a.gamma.iter().any(|&v| v != 0.0),
            })
            .collect();
        Ok(ValidatedModel {
            theta: raw.risk.theta,
            report,
            n,
            m,
            b: blocks.b,
            big_b: blocks.big_b,
            lambda: blocks.lambda,
            a0,
            big_a0: blocks.big_a0,
            a_hat,
            big_a_hat,
            sigma: blocks.sigma,
            sigma_sigma_t,
            lambda_sigma_t,
            lambda_lambda_t,
            atoms,
            raw,
        })
    }

    pub fn raw(&self) -> &MarketModel {
        &self.raw
    }

    pub fn report(&self) -> &ValidationReport {
        &self.report
    }

    pub fn n_factors(&self) -> usize {
        self.n
    }

    pub fn n_assets(&self) -> usize {
        self.m
    }

    pub fn n_atoms(&self) -> usize {
        self.atoms.len()
    }

    pub fn risk(&self) -> &RiskParams {
        &self.raw.risk
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    pub fn horizon(&self) -> f64 {
        self.raw.risk.horizon_t
    }

    pub fn initial_wealth(&self) -> f64 {
        self.raw.risk.initial_wealth_v
    }

    pub fn a_hat(&self) -> &DVector<f64> {
        &self.a_hat
    }

    pub fn big_a_hat(&self) -> &DMatrix<f64> {
        &self.big_a_hat
    }

    pub fn big_a0(&self) -> &DVector<f64> {
        &self.big_a0
    }

    pub fn big_b(&self) -> &DMatrix<f64> {
        &self.big_b
    }

    pub fn lambda_lambda_t(&self) -> &DMatrix<f64> {
        &self.lambda_lambda_t
    }

    pub fn sigma_sigma_t(&self) -> &DMatrix<f64> {
        &self.sigma_sigma_t
    }

    pub fn total_intensity(&self) -> f64 {
        self.atoms.iter().map(|a| a.intensity).sum()
    }

    /// Returns a copy of this model with a different risk block.
    pub fn with_risk(&self, risk: RiskParams) -> Result<Self> {
        let mut raw = self.raw.clone();
        raw.risk = risk;
        ValidatedModel::new(raw)
    }

    /// `min_k (1 + h'γ_k)`; `+∞` when there are no asset jumps.
    pub(crate) fn min_jump_margin(&self, h: &DVector<f64>) -> f64 {
        self.atoms
            .iter()
            .map(|a| 1.0 + h.dot(&a.gamma))
            .fold(f64::INFINITY, f64::min)
    }

    pub(crate) fn check_control(&self, h: &ControlVector) -> Result<()> {
        if h.len() != self.m {
            return Err(Error::Dimension(format!(
                "control has length {}, model has {} assets",
                h.len(),
                self.m
            )));
        }
        Ok(())
    }

    pub(crate) fn check_state(&self, x: &DVector<f64>) -> Result<()> {
        if x.len() != self.n {
            return Err(Error::Dimension(format!(
                "state has length {}, model has {} factors",
                x.len(),
                self.n
            )));
        }
        Ok(())
    }
}

/// Membership test for the admissible set: `1 + h'γ_k > 0` for every atom.
pub fn is_admissible(h: &ControlVector, model: &ValidatedModel) -> Result<bool> {
    model.check_control(h)?;
    Ok(model.min_jump_margin(&h.0) > 0.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JumpSupport {
    /// `(γ_i^min, γ_i^max)` per asset.
    pub asset: Vec<(f64, f64)>,
    /// `(ξ_i^min, ξ_i^max)` per factor.
    pub factor: Vec<(f64, f64)>,
    /// Set when the measure has no atoms; both lists are then empty.
    pub empty: bool,
}

/// Smallest axis-aligned boxes containing the atoms' asset and factor jumps.
pub fn jump_support_bounds(model: &ValidatedModel) -> JumpSupport {
    if model.atoms.is_empty() {
        return JumpSupport {
            asset: Vec::new(),
            factor: Vec::new(),
            empty: true,
        };
    }
    let span = |get: &dyn Fn(&Atom) -> f64| {
        model.atoms.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), a| {
            let v = get(a);
            (lo.min(v), hi.max(v))
        })
    };
    let asset = (0..model.m).map(|i| span(&|a: &Atom| a.gamma[i])).collect();
    let factor = (0..model.n).map(|i| span(&|a: &Atom| a.xi[i])).collect();
    JumpSupport {
        asset,
        factor,
        empty: false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reference;

    fn one_by_one(atoms: Vec<JumpAtom>) -> MarketModel {
        MarketModel {
            factors: FactorModel {
                b: vec![0.0],
                big_b: vec![vec![-1.0]],
                lambda: vec![vec![0.0, 1.0]],
            },
            assets: AssetModel {
                a0: 0.01,
                big_a0: vec![0.0],
                a: vec![0.05],
                big_a: vec![vec![0.0]],
                sigma: vec![vec![1.0, 0.0]],
            },
            jumps: JumpMeasure { atoms },
            risk: RiskParams {
                theta: 1.0,
                horizon_t: 1.0,
                initial_wealth_v: 1.0,
            },
        }
    }

    fn atom(intensity: f64, xi: f64, gamma: f64) -> JumpAtom {
        JumpAtom {
            intensity,
            xi: vec![xi],
            gamma: vec![gamma],
        }
    }

    #[test]
    fn mixed_atom_fails_uncorrelated_check() {
        let model = one_by_one(vec![atom(1.0, 0.1, 0.05)]);
        let report = validate_model(&model).unwrap();
        assert!(!report.check(checks::UNCORRELATED).unwrap().passed);
        assert!(!report.usable);
        assert!(matches!(ValidatedModel::new(model), Err(Error::Assumption(_))));
    }

    #[test]
    fn pure_diffusion_passes() {
        let report = validate_model(&one_by_one(vec![])).unwrap();
        assert!(report.usable, "{report}");
    }

    #[test]
    fn two_sided_one_by_one_passes() {
        let model = one_by_one(vec![atom(1.0, 0.0, -0.2), atom(1.0, 0.0, 0.3)]);
        let report = validate_model(&model).unwrap();
        for c in &report.checks {
            assert!(c.passed, "{} failed: {}", c.name, c.detail);
        }
    }

    #[test]
    fn one_sided_asset_jumps_fail() {
        let model = one_by_one(vec![atom(1.0, 0.0, -0.2)]);
        let report = validate_model(&model).unwrap();
        assert!(!report.check(checks::TWO_SIDED).unwrap().passed);
    }

    #[test]
    fn degenerate_sigma_fails() {
        let mut model = one_by_one(vec![]);
        model.assets.sigma = vec![vec![0.0, 0.0]];
        let report = validate_model(&model).unwrap();
        assert!(!report.check(checks::SIGMA_PD).unwrap().passed);
    }

    #[test]
    fn ragged_lambda_is_structural() {
        let mut model = one_by_one(vec![]);
        model.factors.lambda = vec![vec![0.0]];
        let err = validate_model(&model).unwrap_err();
        assert!(matches!(err, Error::Dimension(ref s) if s.contains("Lambda")));
    }

    #[test]
    fn admissibility_examples() {
        let m = ValidatedModel::new(one_by_one(vec![atom(1.0, 0.0, -0.5), atom(1.0, 0.0, 0.5)])).unwrap();
        assert!(is_admissible(&ControlVector::zeros(1), &m).unwrap());
        // 1 + 2 * (-0.5) = 0 sits on the hyperplane
        assert!(!is_admissible(&ControlVector::from_slice(&[2.0]), &m).unwrap());

        let m = ValidatedModel::new(one_by_one(vec![atom(1.0, 0.0, -0.2), atom(1.0, 0.0, 0.3)])).unwrap();
        assert!(is_admissible(&ControlVector::from_slice(&[4.0]), &m).unwrap());
        assert!(matches!(
            is_admissible(&ControlVector::zeros(2), &m),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn support_bounds() {
        let m = ValidatedModel::new(one_by_one(vec![atom(1.0, 0.0, -0.2), atom(1.0, 0.0, 0.3)])).unwrap();
        assert_eq!(jump_support_bounds(&m).asset, vec![(-0.2, 0.3)]);

        let m = ValidatedModel::new(one_by_one(vec![])).unwrap();
        assert!(jump_support_bounds(&m).empty);

        let mut raw = one_by_one(vec![]);
        raw.factors = FactorModel {
            b: vec![0.0, 0.0],
            big_b: vec![vec![-1.0, 0.0], vec![0.0, -1.0]],
            lambda: vec![vec![0.1, 0.0, 0.0], vec![0.0, 0.1, 0.0]],
        };
        raw.assets.big_a0 = vec![0.0, 0.0];
        raw.assets.big_a = vec![vec![0.0, 0.0]];
        raw.assets.sigma = vec![vec![0.0, 0.0, 1.0]];
        raw.jumps.atoms = vec![
            JumpAtom { intensity: 1.0, xi: vec![-0.1, 0.0], gamma: vec![0.0] },
            JumpAtom { intensity: 1.0, xi: vec![0.05, 0.2], gamma: vec![0.0] },
        ];
        let m = ValidatedModel::new(raw).unwrap();
        assert_eq!(jump_support_bounds(&m).factor, vec![(-0.1, 0.05), (0.0, 0.2)]);
    }

    #[test]
    fn validation_is_idempotent() {
        let raw = reference::reference_model();
        let a = validate_model(&raw).unwrap();
        let b = validate_model(&raw).unwrap();
        assert_eq!(a, b);
        assert!(a.usable, "{a}");
    }

    #[test]
    fn derived_blocks() {
        let m = ValidatedModel::new(reference::reference_model()).unwrap();
        // a_hat = a - a0 1, A_hat = A - 1 A0'
        assert!((m.a_hat()[0] - 0.05).abs() < 1e-15);
        assert!((m.big_a_hat()[(1, 0)] + 0.3).abs() < 1e-15);
    }

    #[test]
    fn json_round_trip() {
        let raw = reference::reference_model();
        let text = serde_json::to_string_pretty(&raw).unwrap();
        assert!(text.contains("\"Lambda\""));
        assert_eq!(MarketModel::from_json_str(&text).unwrap(), raw);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn admissible_set_is_convex(
                h1 in proptest::collection::vec(-8.0f64..8.0, 2),
                h2 in proptest::collection::vec(-8.0f64..8.0, 2),
                kappa in 0.0f64..=1.0,
            ) {
                let m = ValidatedModel::new(reference::reference_model()).unwrap();
                let c1 = ControlVector::from(h1.clone());
                let c2 = ControlVector::from(h2.clone());
                if is_admissible(&c1, &m).unwrap() && is_admissible(&c2, &m).unwrap() {
                    let mix = ControlVector(&c1.0 * kappa + &c2.0 * (1.0 - kappa));
                    prop_assert!(is_admissible(&mix, &m).unwrap());
                }
            }

            #[test]
            fn admissible_controls_have_bounded_jump_exposure(
                h in proptest::collection::vec(-50.0f64..50.0, 2),
            ) {
                let m = ValidatedModel::new(reference::reference_model()).unwrap();
                let c = ControlVector::from(h);
                if is_admissible(&c, &m).unwrap() {
                    let worst = m.atoms.iter().map(|a| c.0.dot(&a.gamma).abs()).fold(0.0, f64::max);
                    prop_assert!(worst.is_finite());
                }
            }
        }
    }
}
