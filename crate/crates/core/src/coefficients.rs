//! Reward function `g`, tilted drift `f`, jump tilt `G`, and the per-state
//! concave maximization behind the HJB supremum.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ControlVector, ValidatedModel};

/// Controls closer than this to a jump hyperplane `1 + h'γ = 0` are rejected
/// by the inner line search.
pub const FEASIBILITY_MARGIN: f64 = 1e-10;

fn require_admissible(model: &ValidatedModel, h: &ControlVector) -> Result<()> {
    model.check_control(h)?;
    let margin = model.min_jump_margin(&h.0);
    if margin > 0.0 {
        Ok(())
    } else {
        Err(Error::Domain(format!(
            "control {:?} is outside the admissible set (min 1+h'gamma = {margin})",
            h.as_slice()
        )))
    }
}

/// `(1/θ)[(1+u)^{-θ} - 1] + u` for one atom, the jump part of `g`.
fn jump_reward(u: f64, theta: f64) -> f64 {
    ((1.0 + u).powf(-theta) - 1.0) / theta + u
}

/// Instantaneous reward `g(x, h; θ)`.
pub fn g_value(x: &DVector<f64>, h: &ControlVector, model: &ValidatedModel) -> Result<f64> {
    model.check_state(x)?;
    require_admissible(model, h)?;
    Ok(g_unchecked(x, &h.0, model))
}

pub(crate) fn g_unchecked(x: &DVector<f64>, h: &DVector<f64>, model: &ValidatedModel) -> f64 {
    let theta = model.theta;
    let quad = 0.5 * (theta + 1.0) * (h.transpose() * &model.sigma_sigma_t * h)[(0, 0)];
    let growth = &model.a_hat + &model.big_a_hat * x;
    let jumps: f64 = model
        .atoms
        .iter()
        .filter(|a| a.has_gamma)
        .map(|a| a.intensity * jump_reward(h.dot(&a.gamma), theta))
        .sum();
    quad - model.a0 - model.big_a0.dot(x) - h.dot(&growth) + jumps
}

/// Drift `f(x, h; θ)` of the factor process under the tilted measure.
pub fn f_value(x: &DVector<f64>, h: &ControlVector, model: &ValidatedModel) -> Result<DVector<f64>> {
    model.check_state(x)?;
    require_admissible(model, h)?;
    Ok(f_unchecked(x, &h.0, model))
}

pub(crate) fn f_unchecked(x: &DVector<f64>, h: &DVector<f64>, model: &ValidatedModel) -> DVector<f64> {
    let theta = model.theta;
    let mut f = &model.b + &model.big_b * x - &model.lambda_sigma_t * h * theta;
    for a in model.atoms.iter().filter(|a| a.has_xi) {
        let tilt = (1.0 + h.dot(&a.gamma)).powf(-theta) - 1.0;
        if tilt != 0.0 {
            f += &a.xi * (a.intensity * tilt);
        }
    }
    f
}

/// `G(z_k, h; θ) = 1 - (1 + h'γ_k)^{-θ}`, always `< 1` on the admissible set.
pub fn big_g_value(model: &ValidatedModel, atom_index: usize, h: &ControlVector, theta: f64) -> Result<f64> {
    let atom = model.atoms.get(atom_index).ok_or(Error::Index {
        index: atom_index,
        len: model.atoms.len(),
    })?;
    require_admissible(model, h)?;
    Ok(1.0 - (1.0 + h.0.dot(&atom.gamma)).powf(-theta))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InnerConfig {
    pub tolerance: f64,
    pub max_iterations: usize,
    pub feasibility_margin: f64,
}

impl Default for InnerConfig {
    fn default() -> Self {
        InnerConfig {
            tolerance: 1e-10,
            max_iterations: 200,
            feasibility_margin: FEASIBILITY_MARGIN,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InnerSolution {
    pub h_star: ControlVector,
    /// Supremum of the control-dependent bracket.
    pub value: f64,
    pub gradient_norm: f64,
    pub iterations: usize,
}

/// The control-dependent bracket of the HJB supremum at fixed `(x, DΦ)`:
///
/// `ψ(h) = -½(θ+1)h'ΣΣ'h + c'h - (1/θ) Σ_k w_k[(1+h'γ_k)^{-θ} - 1] - Σ_k λ_k h'γ_k`
///
/// with `c = â + Âx - θΣΛ'p` and `w_k = λ_k(1 - θξ_k'p)`.
#[derive(Debug, Clone)]
pub struct InnerObjective<'a> {
    model: &'a ValidatedModel,
    linear: DVector<f64>,
    weights: Vec<(f64, f64, &'a DVector<f64>)>,
}

impl<'a> InnerObjective<'a> {
    pub fn new(x: &DVector<f64>, p: &DVector<f64>, model: &'a ValidatedModel) -> Result<Self> {
        model.check_state(x)?;
        model.check_state(p)?;
        Ok(Self::new_unchecked(x, p, model))
    }

    pub(crate) fn new_unchecked(x: &DVector<f64>, p: &DVector<f64>, model: &'a ValidatedModel) -> Self {
        let theta = model.theta;
        let linear = &model.a_hat + &model.big_a_hat * x - model.lambda_sigma_t.tr_mul(p) * theta;
        let weights = model
            .atoms
            .iter()
            .filter(|a| a.has_gamma)
            .map(|a| (a.intensity * (1.0 - theta * a.xi.dot(p)), a.intensity, &a.gamma))
            .collect();
        InnerObjective { model, linear, weights }
    }

    fn margin(&self, h: &DVector<f64>) -> f64 {
        self.weights
            .iter()
            .map(|(_, _, g)| 1.0 + h.dot(g))
            .fold(f64::INFINITY, f64::min)
    }

    pub fn value(&self, h: &DVector<f64>) -> f64 {
        let theta = self.model.theta;
        let quad = -0.5 * (theta + 1.0) * (h.transpose() * &self.model.sigma_sigma_t * h)[(0, 0)];
        let jumps: f64 = self
            .weights
            .iter()
            .map(|(w, lam, g)| {
                let u = h.dot(g);
                -w * ((1.0 + u).powf(-theta) - 1.0) / theta - lam * u
            })
            .sum();
        quad + self.linear.dot(h) + jumps
    }

    pub fn gradient(&self, h: &DVector<f64>) -> DVector<f64> {
        let theta = self.model.theta;
        let mut grad = &self.linear - &self.model.sigma_sigma_t * h * (theta + 1.0);
        for (w, lam, g) in &self.weights {
            let u = h.dot(g);
            grad += *g * (w * (1.0 + u).powf(-theta - 1.0) - lam);
        }
        grad
    }

    pub fn hessian(&self, h: &DVector<f64>) -> DMatrix<f64> {
        let theta = self.model.theta;
        let mut hess = &self.model.sigma_sigma_t * -(theta + 1.0);
        for (w, _, g) in &self.weights {
            let u = h.dot(g);
            let c = -(theta + 1.0) * w * (1.0 + u).powf(-theta - 2.0);
            hess += *g * g.transpose() * c;
        }
        hess
    }

    /// Damped Newton from `h = 0` with a feasibility-aware backtracking line
    /// search; falls back to gradient ascent when the Newton direction stalls.
    pub fn maximize(&self, cfg: &InnerConfig) -> Result<InnerSolution> {
        let m = self.model.m;
        let mut h = DVector::zeros(m);
        let mut f = self.value(&h);
        let mut grad = self.gradient(&h);
        let mut gnorm = grad.amax();
        let mut iterations = 0;
        while gnorm > cfg.tolerance {
            if iterations >= cfg.max_iterations {
                return Err(Error::numerical(
                    format!("inner optimizer did not converge in {} iterations", cfg.max_iterations),
                    h.as_slice(),
                    gnorm,
                ));
            }
            iterations += 1;
            let neg_hess = -self.hessian(&h);
            let newton = neg_hess.cholesky().map(|c| c.solve(&grad));
            let accepted = newton
                .and_then(|d| self.line_search(&h, f, &grad, &d, cfg))
                .or_else(|| self.line_search(&h, f, &grad, &grad, cfg));
            match accepted {
                Some((h_new, f_new)) => {
                    h = h_new;
                    f = f_new;
                    grad = self.gradient(&h);
                    gnorm = grad.amax();
                }
                None => {
                    return Err(Error::numerical(
                        "inner line search stagnated",
                        h.as_slice(),
                        gnorm,
                    ))
                }
            }
        }
        Ok(InnerSolution {
            h_star: ControlVector(h),
            value: f,
            gradient_norm: gnorm,
            iterations,
        })
    }

    fn line_search(
        &self,
        h: &DVector<f64>,
        f: f64,
        grad: &DVector<f64>,
        dir: &DVector<f64>,
        cfg: &InnerConfig,
    ) -> Option<(DVector<f64>, f64)> {
        let slope = grad.dot(dir);
        if !(slope > 0.0) {
            return None;
        }
        // rounding slack so that steps taken at machine-precision scale are
        // not rejected for a spurious decrease
        let slack = 1e-15 * (1.0 + f.abs());
        let mut step = 1.0;
        for _ in 0..80 {
            let trial = h + dir * step;
            if self.margin(&trial) > cfg.feasibility_margin {
                let ft = self.value(&trial);
                if ft >= f + 1e-4 * step * slope - slack {
                    return Some((trial, ft));
                }
            }
            step *= 0.5;
        }
        None
    }
}

/// Unique maximizer `h*` of the HJB bracket at state `x` and gradient `p = DΦ`.
pub fn optimal_control(x: &DVector<f64>, p: &DVector<f64>, model: &ValidatedModel) -> Result<InnerSolution> {
    optimal_control_with(x, p, model, &InnerConfig::default())
}

pub fn optimal_control_with(
    x: &DVector<f64>,
    p: &DVector<f64>,
    model: &ValidatedModel,
    cfg: &InnerConfig,
) -> Result<InnerSolution> {
    InnerObjective::new(x, p, model)?.maximize(cfg)
}

#[derive(Debug, Clone, PartialEq)]
pub struct HamiltonianValue {
    pub value: f64,
    pub inner: InnerSolution,
}

/// `H(x, r, p̃) = inf_h {(b + Bx - θΛΣ'h)'p̃ + θ g(x,h) r}` for `r > 0`, `θ > 0`.
///
/// The infimum is attained at the same `h*` as [`optimal_control`] with
/// `p = -p̃ / (θ r)`.
pub fn exp_hamiltonian(x: &DVector<f64>, r: f64, p_tilde: &DVector<f64>, model: &ValidatedModel) -> Result<HamiltonianValue> {
    exp_hamiltonian_with(x, r, p_tilde, model, &InnerConfig::default())
}

pub fn exp_hamiltonian_with(
    x: &DVector<f64>,
    r: f64,
    p_tilde: &DVector<f64>,
    model: &ValidatedModel,
    cfg: &InnerConfig,
) -> Result<HamiltonianValue> {
    let theta = model.theta;
    if !(theta > 0.0) {
        return Err(Error::Unsupported(format!(
            "exponentially transformed Hamiltonian requires theta > 0, got {theta}"
        )));
    }
    if !(r > 0.0) {
        return Err(Error::Domain(format!("r must be positive, got {r}")));
    }
    model.check_state(x)?;
    model.check_state(p_tilde)?;
    let p = p_tilde / (-theta * r);
    let inner = InnerObjective::new_unchecked(x, &p, model).maximize(cfg)?;
    let h = &inner.h_star.0;
    let drift = &model.b + &model.big_b * x - &model.lambda_sigma_t * h * theta;
    let value = drift.dot(p_tilde) + theta * g_unchecked(x, h, model) * r;
    Ok(HamiltonianValue { value, inner })
}
