//! Zero-beta policies and exponential-affine upper bounds on the
//! exponentially transformed value function.
//!
//! For a constant control `h̄`, `E^{h̄}[exp(θ∫g ds)]` is exponential-affine in
//! the state, `exp(α(t) + β(t)'x)`, with
//!
//! ```text
//! β'(t) = -B'β(t) + θ(A0 + Â'h̄),          β(T) = 0
//! α'(t) = -q(t),                           α(T) = 0
//! q(t)  = f(0,h̄)'β + ½β'ΛΛ'β + Σ_k λ_k(e^{β'ξ_k} - 1 - ξ_k'β) + θ g(0,h̄)
//! ```
//!
//! so `β(t) = θ(B')⁻¹(I - e^{B'(T-t)})(A0 + Â'h̄)` and `α(t) = ∫_t^T q(s) ds`.

use std::fmt;
use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::coefficients::{f_unchecked, g_unchecked};
use crate::error::{Error, Result};
use crate::model::{ControlVector, RiskParams, ValidatedModel};

/// Composite-Simpson node count for `α`.
pub const ALPHA_NODES: usize = 201;
/// Time samples on which the sign conditions of a bound control are checked.
pub const SIGN_GRID_POINTS: usize = 101;

#[derive(Debug, Clone, PartialEq)]
pub struct ZeroBetaPolicy {
    pub h_check: ControlVector,
    /// Constant value of `g(x, ȟ)`.
    pub g_check: f64,
}

/// Minimum-norm solution of `Â'ȟ = -A0`, which makes `g(·, ȟ)` flat in `x`.
pub fn zero_beta_policy(model: &ValidatedModel) -> Result<ZeroBetaPolicy> {
    let n = model.n;
    let a_hat_t = model.big_a_hat.transpose();
    let svd = a_hat_t.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let rank = svd
        .singular_values
        .iter()
        .filter(|&&s| s > 1e-10 * smax.max(f64::MIN_POSITIVE))
        .count();
    let rhs = -&model.big_a0;
    let h = svd
        .pseudo_inverse(1e-10 * smax.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::Assumption(format!("pseudo-inverse of A_hat' failed: {e}")))?
        * &rhs;
    let residual = (&a_hat_t * &h - &rhs).amax();
    if rank < n && residual > 1e-10 {
        return Err(Error::Assumption(format!(
            "A_hat has rank {rank} < n = {n}; no zero-beta policy solves A_hat' h = -A0 (residual {residual:.3e})"
        )));
    }
    let violated: Vec<usize> = model
        .atoms
        .iter()
        .enumerate()
        .filter(|(_, a)| 1.0 + h.dot(&a.gamma) <= 0.0)
        .map(|(k, _)| k)
        .collect();
    if !violated.is_empty() {
        return Err(Error::Infeasible(format!(
            "minimum-norm zero-beta control {:?} violates 1 + h'gamma > 0 at atoms {violated:?}",
            h.as_slice()
        )));
    }
    let g_check = g_unchecked(&DVector::zeros(n), &h, model);
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    for _ in 0..10 {
        let x = DVector::from_fn(n, |_, _| rng.random_range(-10.0..10.0));
        let g = g_unchecked(&x, &h, model);
        if (g - g_check).abs() > 1e-10 * g_check.abs().max(1.0) {
            return Err(Error::Assumption(format!(
                "g under the zero-beta control varies with the state: {g} vs {g_check}"
            )));
        }
    }
    Ok(ZeroBetaPolicy {
        h_check: ControlVector(h),
        g_check,
    })
}

/// `M̌(t) = exp{θ[ǧ(T-t) - ln v]}`.
pub fn global_bound_m(zero_beta: &ZeroBetaPolicy, t: f64, risk: &RiskParams) -> f64 {
    (risk.theta * (zero_beta.g_check * (risk.horizon_t - t) - risk.initial_wealth_v.ln())).exp()
}

/// Closed-form `β` and quadrature `α` for one constant control.
#[derive(Debug, Clone)]
pub struct AffineProfile {
    theta: f64,
    horizon: f64,
    b_t: DMatrix<f64>,
    b_t_inv: DMatrix<f64>,
    loading: DVector<f64>,
    drift0: DVector<f64>,
    lambda_lambda_t: DMatrix<f64>,
    factor_atoms: Vec<(f64, DVector<f64>)>,
    theta_g0: f64,
}

impl AffineProfile {
    pub fn new(model: &ValidatedModel, h_bar: &ControlVector) -> Result<Self> {
        model.check_control(h_bar)?;
        if !(model.min_jump_margin(&h_bar.0) > 0.0) {
            return Err(Error::Domain(format!(
                "bound control {:?} is not admissible",
                h_bar.as_slice()
            )));
        }
        let b_t = model.big_b.transpose();
        let b_t_inv = b_t
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::Assumption("B is singular; beta has no closed form".into()))?;
        let zero = DVector::zeros(model.n);
        Ok(AffineProfile {
            theta: model.theta,
            horizon: model.horizon(),
            loading: &model.big_a0 + model.big_a_hat.tr_mul(&h_bar.0),
            drift0: f_unchecked(&zero, &h_bar.0, model),
            lambda_lambda_t: model.lambda_lambda_t.clone(),
            factor_atoms: model
                .atoms
                .iter()
                .filter(|a| a.has_xi)
                .map(|a| (a.intensity, a.xi.clone()))
                .collect(),
            theta_g0: model.theta * g_unchecked(&zero, &h_bar.0, model),
            b_t,
            b_t_inv,
        })
    }

    /// `A0 + Â'h̄`, the state loading that drives `β`.
    pub fn loading(&self) -> &DVector<f64> {
        &self.loading
    }

    pub fn beta(&self, t: f64) -> DVector<f64> {
        let n = self.loading.len();
        let decay = (&self.b_t * (self.horizon - t)).exp();
        (&self.b_t_inv * (DMatrix::identity(n, n) - decay) * &self.loading) * self.theta
    }

    pub fn q(&self, t: f64) -> f64 {
        let beta = self.beta(t);
        let drift = self.drift0.dot(&beta);
        let diffusion = 0.5 * (beta.transpose() * &self.lambda_lambda_t * &beta)[(0, 0)];
        let jumps: f64 = self
            .factor_atoms
            .iter()
            .map(|(lam, xi)| {
                let s = beta.dot(xi);
                lam * (s.exp() - 1.0 - s)
            })
            .sum();
        drift + diffusion + jumps + self.theta_g0
    }

    /// `α(t) = ∫_t^T q(s) ds` by composite Simpson on [`ALPHA_NODES`] nodes.
    pub fn alpha(&self, t: f64) -> f64 {
        let span = self.horizon - t;
        if span == 0.0 {
            return 0.0;
        }
        let intervals = ALPHA_NODES - 1;
        let h = span / intervals as f64;
        let mut acc = self.q(t) + self.q(self.horizon);
        for i in 1..intervals {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            acc += w * self.q(t + i as f64 * h);
        }
        acc * h / 3.0
    }
}

pub fn beta_profile(h_bar: &ControlVector, t: f64, model: &ValidatedModel) -> Result<DVector<f64>> {
    check_time(t, model)?;
    Ok(AffineProfile::new(model, h_bar)?.beta(t))
}

pub fn alpha_profile(h_bar: &ControlVector, t: f64, model: &ValidatedModel) -> Result<f64> {
    check_time(t, model)?;
    Ok(AffineProfile::new(model, h_bar)?.alpha(t))
}

fn check_time(t: f64, model: &ValidatedModel) -> Result<()> {
    if (0.0..=model.horizon()).contains(&t) {
        Ok(())
    } else {
        Err(Error::Domain(format!("t={t} outside [0, {}]", model.horizon())))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BoundSign {
    /// `β_i(t) < 0`: the bound decays as `x_i` grows.
    Negative,
    /// `β_i(t) > 0`: the bound decays as `x_i` falls.
    Positive,
}

impl BoundSign {
    fn factor(self) -> f64 {
        match self {
            BoundSign::Negative => -1.0,
            BoundSign::Positive => 1.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AffineBound {
    pub h_bar: ControlVector,
    pub component: usize,
    pub sign: BoundSign,
    pub profile: AffineProfile,
}

impl AffineBound {
    pub fn beta(&self, t: f64) -> DVector<f64> {
        self.profile.beta(t)
    }

    pub fn alpha(&self, t: f64) -> f64 {
        self.profile.alpha(t)
    }

    /// Smallest `σ β_i(t)` over the sign grid, excluding `t = T` where `β`
    /// vanishes by construction.
    pub fn sign_margin(&self) -> f64 {
        let horizon = self.profile.horizon;
        (0..SIGN_GRID_POINTS - 1)
            .map(|j| horizon * j as f64 / (SIGN_GRID_POINTS - 1) as f64)
            .map(|t| self.sign.factor() * self.profile.beta(t)[self.component])
            .fold(f64::INFINITY, f64::min)
    }
}

/// Search settings for [`find_bound_controls`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundSearch {
    pub box_half_width: f64,
    pub coarse_step: f64,
    pub fine_step: f64,
    pub max_passes: usize,
}

impl Default for BoundSearch {
    fn default() -> Self {
        BoundSearch {
            box_half_width: 5.0,
            coarse_step: 0.1,
            fine_step: 0.01,
            max_passes: 20,
        }
    }
}

pub fn find_bound_controls(model: &ValidatedModel) -> Result<Vec<AffineBound>> {
    find_bound_controls_with(model, &BoundSearch::default())
}

/// Searches constant admissible controls for the `2n` bound controls:
/// entry `i` has `β_i < 0` and entry `n + i` has `β_i > 0` on the sign grid.
///
/// `β` is linear in the loading `A0 + Â'h̄`, so each target reduces to
/// maximizing a piecewise-linear margin over a box. Coordinate ascent on a
/// coarse grid finds a feasible control; a fine pass then pulls each
/// coordinate back toward zero while the margin stays positive.
pub fn find_bound_controls_with(model: &ValidatedModel, search: &BoundSearch) -> Result<Vec<AffineBound>> {
    let theta = model.theta;
    if !(theta > 0.0) {
        return Err(Error::Unsupported(format!("bound search requires theta > 0, got {theta}")));
    }
    let n = model.n;
    let m = model.m;
    let horizon = model.horizon();
    let b_t = model.big_b.transpose();
    let b_t_inv = b_t
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Assumption("B is singular; beta has no closed form".into()))?;
    // β(t) = K(t) (A0 + Â'h̄) with K(t) = θ(B')⁻¹(I - e^{B'(T-t)})
    let kernels: Vec<DMatrix<f64>> = (0..SIGN_GRID_POINTS - 1)
        .map(|j| horizon * j as f64 / (SIGN_GRID_POINTS - 1) as f64)
        .map(|t| &b_t_inv * (DMatrix::identity(n, n) - (&b_t * (horizon - t)).exp()) * theta)
        .collect();

    let margin_of = |h: &DVector<f64>, comp: usize, sign: f64| -> f64 {
        if model.min_jump_margin(h) <= 1e-10 {
            return f64::NEG_INFINITY;
        }
        let loading = &model.big_a0 + model.big_a_hat.tr_mul(h);
        kernels
            .iter()
            .map(|k| sign * k.row(comp).dot(&loading.transpose()))
            .fold(f64::INFINITY, f64::min)
    };

    let coarse: Vec<f64> = grid_values(search.box_half_width, search.coarse_step);
    let mut out = Vec::with_capacity(2 * n);
    for sign in [BoundSign::Negative, BoundSign::Positive] {
        for comp in 0..n {
            let s = sign.factor();
            let mut h = DVector::zeros(m);
            let mut best = margin_of(&h, comp, s);
            let mut pass = 0;
            while best <= 0.0 && pass < search.max_passes {
                pass += 1;
                let before = best;
                for c in 0..m {
                    let current = h[c];
                    let mut best_v = current;
                    for &v in &coarse {
                        h[c] = v;
                        let score = margin_of(&h, comp, s);
                        if score > best || (score == best && v.abs() < best_v.abs()) {
                            best = score;
                            best_v = v;
                        }
                    }
                    h[c] = best_v;
                }
                if best <= before {
                    break;
                }
            }
            if !(best > 0.0) {
                return Err(Error::Assumption(format!(
                    "no constant admissible control in [-{w}, {w}]^{m} gives beta_{comp} {sign:?} on the sign grid (best margin {best:.3e})",
                    w = search.box_half_width
                )));
            }
            // shrink toward zero on the fine grid while the sign condition holds
            for c in 0..m {
                loop {
                    let v = h[c];
                    if v.abs() < search.fine_step / 2.0 {
                        break;
                    }
                    h[c] = ((v.abs() - search.fine_step) / search.fine_step).round() * search.fine_step * v.signum();
                    if margin_of(&h, comp, s) > 0.0 {
                        continue;
                    }
                    h[c] = v;
                    break;
                }
            }
            let h_bar = ControlVector(h);
            out.push(AffineBound {
                profile: AffineProfile::new(model, &h_bar)?,
                h_bar,
                component: comp,
                sign,
            });
        }
    }
    Ok(out)
}

fn grid_values(half_width: f64, step: f64) -> Vec<f64> {
    let k = (half_width / step).round() as i64;
    (-k..=k).map(|i| i as f64 * step).collect()
}

/// `min_k exp(α^k(t) + β^k(t)'x - θ ln v)`; `+∞` for an empty bound list.
pub fn envelope_upper_bound(t: f64, x: &DVector<f64>, bounds: &[AffineBound], risk: &RiskParams) -> f64 {
    let offset = -risk.theta * risk.initial_wealth_v.ln();
    bounds
        .iter()
        .map(|b| (b.alpha(t) + b.beta(t).dot(x) + offset).exp())
        .fold(f64::INFINITY, f64::min)
}

/// `α^k(t)` and `β^k(t)` for every bound at one time, for evaluating the
/// envelope over many states.
#[derive(Debug, Clone)]
pub struct EnvelopeSlice {
    pub t: f64,
    terms: Vec<(f64, DVector<f64>)>,
    offset: f64,
}

impl EnvelopeSlice {
    pub fn new(t: f64, bounds: &[AffineBound], risk: &RiskParams) -> Self {
        EnvelopeSlice {
            t,
            terms: bounds.iter().map(|b| (b.alpha(t), b.beta(t))).collect(),
            offset: -risk.theta * risk.initial_wealth_v.ln(),
        }
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.terms
            .iter()
            .map(|(a, b)| (a + b.iter().zip(x).map(|(u, v)| u * v).sum::<f64>() + self.offset).exp())
            .fold(f64::INFINITY, f64::min)
    }
}

/// Profiles as CSV: `t, alpha_k, beta_k_j...` for each bound `k`.
pub fn write_profiles_csv<W: Write>(bounds: &[AffineBound], times: &[f64], mut w: W) -> std::io::Result<()> {
    write!(w, "t")?;
    for (k, b) in bounds.iter().enumerate() {
        write!(w, ",alpha_{k}")?;
        for j in 0..b.profile.loading.len() {
            write!(w, ",beta_{k}_{j}")?;
        }
    }
    writeln!(w)?;
    for &t in times {
        write!(w, "{t}")?;
        for b in bounds {
            write!(w, ",{}", b.alpha(t))?;
            for v in b.beta(t).iter() {
                write!(w, ",{v}")?;
            }
        }
        writeln!(w)?;
    }
    Ok(())
}

/// Text summary of a bound search.
pub struct BoundReport<'a>(pub &'a [AffineBound]);

impl fmt::Display for BoundReport<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, b) in self.0.iter().enumerate() {
            writeln!(
                f,
                "bound {k}: component {} {:?}, h_bar = {:?}, loading = {:?}, sign margin = {:.6e}, alpha(0) = {:.6e}",
                b.component,
                b.sign,
                b.h_bar.as_slice(),
                b.profile.loading.as_slice(),
                b.sign_margin(),
                b.alpha(0.0)
            )?;
        }
        Ok(())
    }
}
