//! Explicit monotone finite-difference solver for the exponentially
//! transformed HJB equation
//!
//! ```text
//! ∂Φ̃/∂t + ½tr(ΛΛ'D²Φ̃) + H(x, Φ̃, DΦ̃) + Σ_k λ_k[Φ̃(x+ξ_k) - Φ̃(x) - ξ_k'DΦ̃] = 0
//! Φ̃(T, x) = v^{-θ}
//! ```
//!
//! on a truncated tensor grid with at most two factors.
//!
//! Each backward step evaluates `h*` from the central gradient, then applies
//! an upwind discretization of the drift under `h*`. The jump compensator
//! `-Σλξ'DΦ̃` is folded into that upwinded drift, so every off-diagonal weight
//! of the update is nonnegative once `dt` respects [`stable_dt`]. Off-grid
//! points (ghost nodes and jump targets) are clamped to the box.

use std::io::Write;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bounds::{global_bound_m, zero_beta_policy, ZeroBetaPolicy};
use crate::coefficients::{exp_hamiltonian_with, g_unchecked, optimal_control_with, InnerConfig, InnerSolution};
use crate::error::{Error, Result};
use crate::model::{ControlVector, ValidatedModel};
use crate::simulate::Policy;

/// Lower clip for `Φ̃`, keeping `ln Φ̃` finite.
pub const VALUE_FLOOR: f64 = 1e-300;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Axis {
    pub x_min: f64,
    pub x_max: f64,
    pub nodes: usize,
}

impl Axis {
    pub fn new(x_min: f64, x_max: f64, nodes: usize) -> Self {
        Axis { x_min, x_max, nodes }
    }

    pub fn step(&self) -> f64 {
        (self.x_max - self.x_min) / (self.nodes - 1) as f64
    }

    pub fn coord(&self, i: usize) -> f64 {
        if i + 1 == self.nodes {
            self.x_max
        } else {
            self.x_min + i as f64 * self.step()
        }
    }

    pub fn nearest(&self, x: f64) -> usize {
        let s = ((x - self.x_min) / self.step()).round();
        s.clamp(0.0, (self.nodes - 1) as f64) as usize
    }

    /// Lower node and weight of the upper node for linear interpolation,
    /// clamped to the axis.
    fn bracket(&self, x: f64) -> (usize, f64) {
        let s = ((x - self.x_min) / self.step()).clamp(0.0, (self.nodes - 1) as f64);
        let i = (s.floor() as usize).min(self.nodes - 2);
        (i, s - i as f64)
    }
}

/// Treatment of the exterior of the truncated box.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Truncation {
    /// Constant extrapolation from the nearest boundary node.
    #[default]
    Clamp,
}

fn default_cfl_safety() -> f64 {
    0.9
}

fn default_store_every() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub axes: Vec<Axis>,
    /// Explicit time step; `None` picks `cfl_safety * stable_dt`.
    #[serde(default)]
    pub dt: Option<f64>,
    #[serde(default = "default_cfl_safety")]
    pub cfl_safety: f64,
    /// Keep every k-th time slice (the first and last are always kept).
    #[serde(default = "default_store_every")]
    pub store_every: usize,
    #[serde(default)]
    pub truncation: Truncation,
    /// Settings of the per-node concave solve.
    #[serde(default)]
    pub inner: InnerConfig,
}

impl GridSpec {
    pub fn new(axes: Vec<Axis>) -> Self {
        GridSpec {
            axes,
            dt: None,
            cfl_safety: default_cfl_safety(),
            store_every: default_store_every(),
            truncation: Truncation::Clamp,
            inner: InnerConfig::default(),
        }
    }

    pub fn validate(&self, n_factors: usize) -> Result<()> {
        let dims = self.axes.len();
        if !(1..=2).contains(&dims) {
            return Err(Error::Unsupported(format!("grid solver supports 1 or 2 factors, got {dims}")));
        }
        if dims != n_factors {
            return Err(Error::Dimension(format!("grid has {dims} axes, model has {n_factors} factors")));
        }
        for (d, a) in self.axes.iter().enumerate() {
            if !(a.x_min.is_finite() && a.x_max.is_finite() && a.x_min < a.x_max) {
                return Err(Error::Config(format!("axis {d}: need finite x_min < x_max, got [{}, {}]", a.x_min, a.x_max)));
            }
            if a.nodes < 3 {
                return Err(Error::Config(format!("axis {d}: need at least 3 nodes, got {}", a.nodes)));
            }
        }
        if let Some(dt) = self.dt {
            if !(dt > 0.0 && dt.is_finite()) {
                return Err(Error::Config(format!("dt must be positive, got {dt}")));
            }
        }
        if !(self.cfl_safety > 0.0 && self.cfl_safety <= 1.0) {
            return Err(Error::Config(format!("cfl_safety must lie in (0, 1], got {}", self.cfl_safety)));
        }
        if self.store_every == 0 {
            return Err(Error::Config("store_every must be at least 1".into()));
        }
        Ok(())
    }

    pub fn n_dims(&self) -> usize {
        self.axes.len()
    }

    pub fn n_nodes(&self) -> usize {
        self.axes.iter().map(|a| a.nodes).product()
    }

    /// Multi-index of a flat node index; axis 0 varies fastest.
    pub fn multi_index(&self, node: usize) -> [usize; 2] {
        let n0 = self.axes[0].nodes;
        [node % n0, node / n0]
    }

    pub fn node_of(&self, idx: [usize; 2]) -> usize {
        idx[0] + self.axes[0].nodes * idx[1]
    }

    pub fn coords(&self, node: usize) -> Vec<f64> {
        let idx = self.multi_index(node);
        self.axes.iter().enumerate().map(|(d, a)| a.coord(idx[d])).collect()
    }

    pub fn nearest_node(&self, x: &[f64]) -> usize {
        let mut idx = [0usize; 2];
        for (d, a) in self.axes.iter().enumerate() {
            idx[d] = a.nearest(x[d]);
        }
        self.node_of(idx)
    }

    /// Clamped neighbor `s` steps away along axis `d`.
    fn shifted(&self, node: usize, d: usize, s: isize) -> usize {
        let mut idx = self.multi_index(node);
        let last = self.axes[d].nodes as isize - 1;
        idx[d] = (idx[d] as isize + s).clamp(0, last) as usize;
        self.node_of(idx)
    }

    fn shifted2(&self, node: usize, s0: isize, s1: isize) -> usize {
        self.shifted(self.shifted(node, 0, s0), 1, s1)
    }

    /// Multilinear interpolation weights at `x`, clamped to the box.
    fn interpolation(&self, x: &[f64]) -> Vec<(usize, f64)> {
        let (i0, w0) = self.axes[0].bracket(x[0]);
        if self.n_dims() == 1 {
            return vec![(i0, 1.0 - w0), (i0 + 1, w0)];
        }
        let (i1, w1) = self.axes[1].bracket(x[1]);
        vec![
            (self.node_of([i0, i1]), (1.0 - w0) * (1.0 - w1)),
            (self.node_of([i0 + 1, i1]), w0 * (1.0 - w1)),
            (self.node_of([i0, i1 + 1]), (1.0 - w0) * w1),
            (self.node_of([i0 + 1, i1 + 1]), w0 * w1),
        ]
    }

    /// Multilinear interpolation of a slice at `x`, clamped to the box.
    pub fn interpolate(&self, slice: &[f64], x: &[f64]) -> f64 {
        self.interpolation(x).iter().map(|&(j, w)| w * slice[j]).sum()
    }

    /// Same spacing on every axis, with `2k` extra intervals per axis where
    /// `k` is `nodes * (factor - 1) / 2` rounded, so the box grows about its
    /// centre.
    pub fn enlarged(&self, factor: f64) -> GridSpec {
        let axes = self
            .axes
            .iter()
            .map(|a| {
                let k = (((a.nodes - 1) as f64) * (factor - 1.0) / 2.0).round() as usize;
                let h = a.step();
                Axis::new(a.x_min - k as f64 * h, a.x_max + k as f64 * h, a.nodes + 2 * k)
            })
            .collect();
        GridSpec { axes, ..self.clone() }
    }

    /// Halves every spacing; an explicit `dt` is dropped so it is re-derived.
    pub fn refined(&self) -> GridSpec {
        let axes = self.axes.iter().map(|a| Axis::new(a.x_min, a.x_max, 2 * a.nodes - 1)).collect();
        GridSpec { axes, dt: None, ..self.clone() }
    }
}

/// Default box: centred on `-B⁻¹b` with half-width `max(1, 6σ_d)`, where
/// `σ_d² = (ΛΛ' + Σλξξ')_dd / (2|B_dd|)`; 201 nodes for one factor and
/// 81 per axis for two.
pub fn auto_grid(model: &ValidatedModel) -> Result<GridSpec> {
    let n = model.n;
    if n > 2 {
        return Err(Error::Unsupported(format!("grid solver supports 1 or 2 factors, got {n}")));
    }
    let centre = model
        .big_b
        .clone()
        .lu()
        .solve(&(-&model.b))
        .ok_or_else(|| Error::Assumption("B is singular".into()))?;
    let nodes = if n == 1 { 201 } else { 81 };
    let axes = (0..n)
        .map(|d| {
            let jump_var: f64 = model.atoms.iter().map(|a| a.intensity * a.xi[d] * a.xi[d]).sum();
            let var = (model.lambda_lambda_t[(d, d)] + jump_var) / (2.0 * model.big_b[(d, d)].abs().max(1e-3));
            let half = (6.0 * var.sqrt()).max(1.0);
            Axis::new(centre[d] - half, centre[d] + half, nodes)
        })
        .collect();
    Ok(GridSpec::new(axes))
}

/// Closed-form data when growth rates ignore the factor and the factor does
/// not jump: `Φ̃(t, x) = v^{-θ} e^{θ g*(T-t)}` and `Φ(t, x) = ln v - g*(T-t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct StateIndependent {
    pub h_star: ControlVector,
    pub g_star: f64,
}

pub fn state_independent_solution(model: &ValidatedModel) -> Result<Option<StateIndependent>> {
    if model.big_a0.amax() != 0.0 || model.big_a_hat.amax() != 0.0 || model.atoms.iter().any(|a| a.has_xi) {
        return Ok(None);
    }
    let zero = DVector::zeros(model.n);
    let sol = optimal_control_with(&zero, &zero, model, &InnerConfig::default())?;
    let g_star = g_unchecked(&zero, &sol.h_star.0, model);
    Ok(Some(StateIndependent {
        h_star: sol.h_star,
        g_star,
    }))
}

/// Max relative error of the grid `Φ(0, ·)` against `ln v - g*T`.
pub fn closed_form_error(vg: &ValueGrid, exact: &StateIndependent) -> Result<f64> {
    let phi = phi_from_tilde(vg)?;
    let horizon = *vg.times.last().expect("value grid has slices");
    let target = vg.initial_wealth.ln() - exact.g_star * (horizon - vg.times[0]);
    Ok(phi[0]
        .iter()
        .map(|p| ((p - target) / target.abs().max(f64::MIN_POSITIVE)).abs())
        .fold(0.0, f64::max))
}

/// Central-difference gradient with clamped ghost nodes.
pub fn central_gradient(spec: &GridSpec, slice: &[f64], node: usize) -> Vec<f64> {
    spec.axes
        .iter()
        .enumerate()
        .map(|(d, a)| (slice[spec.shifted(node, d, 1)] - slice[spec.shifted(node, d, -1)]) / (2.0 * a.step()))
        .collect()
}

/// `Σ_k λ_k[Φ̃(x+ξ_k) - Φ̃(x) - ξ_k'DΦ̃]` over factor-jump atoms; off-grid
/// targets are interpolated and clamped.
pub fn nonlocal_quadrature(spec: &GridSpec, slice: &[f64], node: usize, gradient: &[f64], model: &ValidatedModel) -> f64 {
    let x = spec.coords(node);
    model
        .atoms
        .iter()
        .filter(|a| a.has_xi)
        .map(|a| {
            let target: Vec<f64> = x.iter().zip(a.xi.iter()).map(|(u, v)| u + v).collect();
            let slope: f64 = a.xi.iter().zip(gradient).map(|(u, v)| u * v).sum();
            a.intensity * (spec.interpolate(slice, &target) - slice[node] - slope)
        })
        .sum()
}

/// Largest explicit step with nonnegative update weights,
/// `1 / (Σ_d [(ΛΛ')_dd/Δ_d² + max|μ_d|/Δ_d] + ν(Z) + θ max|g|)`.
///
/// Drift and reward maxima run over every node and a probe set of controls:
/// `0`, the zero-beta control when it exists, and the pointwise minimizer of
/// `g` at each node.
pub fn stable_dt(spec: &GridSpec, model: &ValidatedModel) -> Result<f64> {
    spec.validate(model.n)?;
    let geometry = Geometry::new(spec, model)?;
    Ok(geometry.stable_dt(model))
}

/// Node-independent pieces of the scheme.
struct Geometry {
    spec: GridSpec,
    coords: Vec<DVector<f64>>,
    /// `b + Bx - Σ_k λ_k ξ_k` per node.
    base_drift: Vec<DVector<f64>>,
    /// Combined `λ_k`-weighted interpolation stencils of the jump targets.
    jump_stencils: Vec<Vec<(usize, f64)>>,
    jump_rate: f64,
    diag_diffusion: Vec<f64>,
    cross_diffusion: f64,
}

impl Geometry {
    fn new(spec: &GridSpec, model: &ValidatedModel) -> Result<Self> {
        let n_nodes = spec.n_nodes();
        let coords: Vec<DVector<f64>> = (0..n_nodes).map(|j| DVector::from_vec(spec.coords(j))).collect();
        let compensator = model
            .atoms
            .iter()
            .filter(|a| a.has_xi)
            .fold(DVector::zeros(model.n), |acc, a| acc + &a.xi * a.intensity);
        let base_drift = coords
            .iter()
            .map(|x| &model.b + &model.big_b * x - &compensator)
            .collect();
        let jump_rate = model.atoms.iter().filter(|a| a.has_xi).map(|a| a.intensity).sum();
        let jump_stencils = coords
            .iter()
            .map(|x| {
                let mut stencil: Vec<(usize, f64)> = Vec::new();
                for a in model.atoms.iter().filter(|a| a.has_xi) {
                    let target: Vec<f64> = (x + &a.xi).iter().copied().collect();
                    for (j, w) in spec.interpolation(&target) {
                        if w == 0.0 {
                            continue;
                        }
                        match stencil.iter_mut().find(|(k, _)| *k == j) {
                            Some(e) => e.1 += a.intensity * w,
                            None => stencil.push((j, a.intensity * w)),
                        }
                    }
                }
                stencil
            })
            .collect();
        let diag_diffusion: Vec<f64> = (0..model.n).map(|d| model.lambda_lambda_t[(d, d)]).collect();
        let cross_diffusion = if model.n == 2 { model.lambda_lambda_t[(0, 1)] } else { 0.0 };
        if model.n == 2 {
            let (h0, h1) = (spec.axes[0].step(), spec.axes[1].step());
            let c = cross_diffusion.abs() / (h0 * h1);
            if diag_diffusion[0] / (h0 * h0) < c || diag_diffusion[1] / (h1 * h1) < c {
                return Err(Error::Config(format!(
                    "cross-diffusion {cross_diffusion} is too large for a monotone stencil with spacings ({h0}, {h1})"
                )));
            }
        }
        Ok(Geometry {
            spec: spec.clone(),
            coords,
            base_drift,
            jump_stencils,
            jump_rate,
            diag_diffusion,
            cross_diffusion,
        })
    }

    fn drift(&self, model: &ValidatedModel, node: usize, h: &DVector<f64>) -> DVector<f64> {
        &self.base_drift[node] - &model.lambda_sigma_t * h * model.theta
    }

    fn stable_dt(&self, model: &ValidatedModel) -> f64 {
        let mut probes: Vec<DVector<f64>> = vec![DVector::zeros(model.m)];
        if let Ok(zb) = zero_beta_policy(model) {
            probes.push(zb.h_check.0);
        }
        let zero_p = DVector::zeros(model.n);
        let cfg = InnerConfig::default();
        let n = model.n;
        let (max_drift, max_g) = (0..self.coords.len())
            .into_par_iter()
            .map(|j| {
                let x = &self.coords[j];
                let mut drift = vec![0.0f64; n];
                let mut g_abs = 0.0f64;
                let own = optimal_control_with(x, &zero_p, model, &cfg).ok().map(|s| s.h_star.0);
                for h in probes.iter().chain(own.iter()) {
                    let mu = self.drift(model, j, h);
                    for d in 0..n {
                        drift[d] = drift[d].max(mu[d].abs());
                    }
                    g_abs = g_abs.max(g_unchecked(x, h, model).abs());
                }
                (drift, g_abs)
            })
            .reduce(
                || (vec![0.0; n], 0.0),
                |(a, ga), (b, gb)| (a.iter().zip(&b).map(|(u, v)| u.max(*v)).collect(), ga.max(gb)),
            );
        let mut rate = model.total_intensity() + model.theta.abs() * max_g;
        for (d, axis) in self.spec.axes.iter().enumerate() {
            let h = axis.step();
            rate += self.diag_diffusion[d] / (h * h) + max_drift[d] / h;
        }
        if rate > 0.0 {
            1.0 / rate
        } else {
            f64::INFINITY
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ClipCounts {
    pub floor: usize,
    pub ceiling: usize,
}

impl ClipCounts {
    pub fn total(&self) -> usize {
        self.floor + self.ceiling
    }
}

/// `Φ̃` on stored time slices; `values[k][node]` at `times[k]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueGrid {
    pub spec: GridSpec,
    pub times: Vec<f64>,
    pub values: Vec<Vec<f64>>,
    pub fingerprint: String,
    pub theta: f64,
    pub initial_wealth: f64,
    pub dt: f64,
    pub n_steps: usize,
}

impl ValueGrid {
    pub fn n_nodes(&self) -> usize {
        self.spec.n_nodes()
    }

    /// Stored slice closest to `t`.
    pub fn nearest_time_index(&self, t: f64) -> usize {
        let k = self.times.partition_point(|&s| s < t);
        if k == 0 {
            0
        } else if k == self.times.len() || (t - self.times[k - 1]) <= (self.times[k] - t) {
            k - 1
        } else {
            k
        }
    }

    pub fn initial_slice(&self) -> &[f64] {
        &self.values[0]
    }

    pub fn terminal_slice(&self) -> &[f64] {
        self.values.last().expect("value grid has at least one slice")
    }
}

/// `h*` on the same stored slices as the [`ValueGrid`] it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyField {
    pub times: Vec<f64>,
    pub controls: Vec<Vec<ControlVector>>,
    /// Nodes whose inner solve failed and took a neighbor's control.
    pub substituted: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub nodes: Vec<usize>,
    pub dt: f64,
    pub stable_dt: f64,
    pub n_steps: usize,
    pub clips: ClipCounts,
    pub inner_substitutions: usize,
    /// Node updates whose own-node weight came out negative.
    pub negative_weight_events: usize,
    pub min_diagonal_weight: f64,
    /// Whether the zero-beta ceiling `M̌(t)` was available for clipping.
    pub ceiling_active: bool,
}

#[derive(Debug, Clone)]
pub struct PideSolution {
    pub values: ValueGrid,
    pub policy: PolicyField,
    pub report: SolveReport,
}

/// Outcome of one node update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NodeUpdate {
    pub value: f64,
    pub diagonal_weight: f64,
    pub clipped_floor: bool,
    pub clipped_ceiling: bool,
}

/// The explicit scheme for one model and grid.
pub struct Scheme<'a> {
    model: &'a ValidatedModel,
    geometry: Geometry,
    zero_beta: Option<ZeroBetaPolicy>,
    inner: InnerConfig,
    stable_dt: f64,
    dt: f64,
    n_steps: usize,
}

impl<'a> Scheme<'a> {
    pub fn new(model: &'a ValidatedModel, spec: &GridSpec) -> Result<Self> {
        let theta = model.theta;
        if !(theta > 0.0) {
            return Err(Error::Unsupported(format!("the grid solver requires theta > 0, got {theta}")));
        }
        spec.validate(model.n)?;
        let geometry = Geometry::new(spec, model)?;
        let stable = geometry.stable_dt(model);
        let horizon = model.horizon();
        let (n_steps, dt) = match spec.dt {
            Some(dt) => {
                if dt > stable * (1.0 + 1e-12) {
                    return Err(Error::Unstable { dt, stable_dt: stable });
                }
                let n = ((horizon / dt) - 1e-9).ceil().max(1.0) as usize;
                (n, horizon / n as f64)
            }
            None => {
                let n = (horizon / (spec.cfl_safety * stable)).ceil().max(1.0) as usize;
                (n, horizon / n as f64)
            }
        };
        Ok(Scheme {
            model,
            geometry,
            zero_beta: zero_beta_policy(model).ok(),
            inner: spec.inner,
            stable_dt: stable,
            dt,
            n_steps,
        })
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn stable_dt(&self) -> f64 {
        self.stable_dt
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn spec(&self) -> &GridSpec {
        &self.geometry.spec
    }

    pub fn time(&self, step: usize) -> f64 {
        if step == self.n_steps {
            self.model.horizon()
        } else {
            step as f64 * self.dt
        }
    }

    /// `M̌(t)`, or `+∞` without a zero-beta control.
    pub fn ceiling(&self, t: f64) -> f64 {
        match &self.zero_beta {
            Some(zb) => global_bound_m(zb, t, self.model.risk()),
            None => f64::INFINITY,
        }
    }

    /// Nodes other than `node` whose previous values enter its update.
    pub fn stencil(&self, node: usize) -> Vec<usize> {
        let spec = &self.geometry.spec;
        let mut out: Vec<usize> = Vec::new();
        for d in 0..spec.n_dims() {
            out.push(spec.shifted(node, d, 1));
            out.push(spec.shifted(node, d, -1));
        }
        if spec.n_dims() == 2 {
            for (a, b) in [(1, 1), (-1, -1), (1, -1), (-1, 1)] {
                out.push(spec.shifted2(node, a, b));
            }
        }
        out.extend(self.geometry.jump_stencils[node].iter().map(|&(j, _)| j));
        out.sort_unstable();
        out.dedup();
        out.retain(|&j| j != node);
        out
    }

    /// `h*` at a node from the central gradient of `slice`.
    pub fn node_control(&self, slice: &[f64], node: usize) -> Result<InnerSolution> {
        let p = DVector::from_vec(central_gradient(&self.geometry.spec, slice, node));
        let x = &self.geometry.coords[node];
        Ok(exp_hamiltonian_with(x, slice[node], &p, self.model, &self.inner)?.inner)
    }

    /// `h*` at every node, with failed nodes replaced by the nearest success.
    pub fn slice_controls(&self, slice: &[f64]) -> Result<(Vec<ControlVector>, usize)> {
        let solved: Vec<Option<ControlVector>> = (0..slice.len())
            .into_par_iter()
            .map(|j| self.node_control(slice, j).ok().map(|s| s.h_star))
            .collect();
        let failed = solved.iter().filter(|s| s.is_none()).count();
        if failed == 0 {
            return Ok((solved.into_iter().map(Option::unwrap).collect(), 0));
        }
        if failed == solved.len() {
            return Err(Error::numerical("inner solve failed at every node of a slice", &[], f64::NAN));
        }
        let spec = &self.geometry.spec;
        let dist = |a: usize, b: usize| {
            let (ia, ib) = (spec.multi_index(a), spec.multi_index(b));
            let d0 = ia[0] as f64 - ib[0] as f64;
            let d1 = ia[1] as f64 - ib[1] as f64;
            d0 * d0 + d1 * d1
        };
        let out = (0..solved.len())
            .map(|j| match &solved[j] {
                Some(h) => h.clone(),
                None => {
                    let k = (0..solved.len())
                        .filter(|&k| solved[k].is_some())
                        .min_by(|&a, &b| dist(j, a).total_cmp(&dist(j, b)))
                        .expect("at least one node succeeded");
                    solved[k].clone().unwrap()
                }
            })
            .collect();
        Ok((out, failed))
    }

    /// One explicit update of `node` from `prev` under control `h`, clipped
    /// to `[VALUE_FLOOR, M̌(t_new)]`.
    pub fn update_node(&self, prev: &[f64], node: usize, h: &ControlVector, t_new: f64) -> NodeUpdate {
        let g = &self.geometry;
        let spec = &g.spec;
        let model = self.model;
        let dt = self.dt;
        let phi = prev[node];
        let mu = g.drift(model, node, &h.0);
        let mut acc = 0.0;
        let mut diag = 0.0;
        for (d, axis) in spec.axes.iter().enumerate() {
            let step = axis.step();
            let up = prev[spec.shifted(node, d, 1)];
            let down = prev[spec.shifted(node, d, -1)];
            let a = 0.5 * g.diag_diffusion[d] / (step * step);
            acc += a * (up - 2.0 * phi + down);
            diag -= 2.0 * a;
            let m = mu[d];
            if m > 0.0 {
                acc += m * (up - phi) / step;
            } else {
                acc += m * (phi - down) / step;
            }
            diag -= m.abs() / step;
        }
        if spec.n_dims() == 2 && g.cross_diffusion != 0.0 {
            let c = g.cross_diffusion.abs() / (2.0 * spec.axes[0].step() * spec.axes[1].step());
            let s = if g.cross_diffusion > 0.0 { 1 } else { -1 };
            let corners = prev[spec.shifted2(node, 1, s)] + prev[spec.shifted2(node, -1, -s)];
            let edges = prev[spec.shifted(node, 0, 1)]
                + prev[spec.shifted(node, 0, -1)]
                + prev[spec.shifted(node, 1, 1)]
                + prev[spec.shifted(node, 1, -1)];
            acc += c * (corners - edges + 2.0 * phi);
            diag += 2.0 * c;
        }
        let reward = model.theta * g_unchecked(&g.coords[node], &h.0, model);
        acc += reward * phi;
        diag += reward;
        let jumps: f64 = g.jump_stencils[node].iter().map(|&(j, w)| w * prev[j]).sum();
        acc += jumps - g.jump_rate * phi;
        diag -= g.jump_rate;

        let raw = phi + dt * acc;
        let ceiling = self.ceiling(t_new);
        let mut out = NodeUpdate {
            value: raw,
            diagonal_weight: 1.0 + dt * diag,
            clipped_floor: false,
            clipped_ceiling: false,
        };
        if raw > ceiling {
            out.value = ceiling;
            out.clipped_ceiling = true;
        } else if !(raw >= VALUE_FLOOR) {
            out.value = VALUE_FLOOR;
            out.clipped_floor = true;
        }
        out
    }

    /// Backward march from `Φ̃(T) = v^{-θ}` to `t = 0`.
    pub fn solve(&self) -> Result<PideSolution> {
        let spec = &self.geometry.spec;
        let n_nodes = spec.n_nodes();
        let terminal = self.model.initial_wealth().powf(-self.model.theta);
        let stored = |k: usize| k == 0 || k == self.n_steps || k.is_multiple_of(spec.store_every);

        let mut current = vec![terminal; n_nodes];
        let mut times = vec![self.time(self.n_steps)];
        let mut values = vec![current.clone()];
        let mut controls = Vec::new();
        let mut clips = ClipCounts::default();
        let mut substituted = 0;
        let mut negative = 0;
        let mut min_diag = f64::INFINITY;

        for step in (0..self.n_steps).rev() {
            let (policy, failed) = self.slice_controls(&current)?;
            substituted += failed;
            let t_new = self.time(step);
            let updates: Vec<NodeUpdate> = (0..n_nodes)
                .into_par_iter()
                .map(|j| self.update_node(&current, j, &policy[j], t_new))
                .collect();
            if stored(step + 1) {
                controls.push(policy);
            }
            for (j, u) in updates.iter().enumerate() {
                if !u.value.is_finite() {
                    return Err(Error::numerical(
                        format!("non-finite value at node {j}, t={t_new}"),
                        &spec.coords(j),
                        f64::NAN,
                    ));
                }
                clips.floor += u.clipped_floor as usize;
                clips.ceiling += u.clipped_ceiling as usize;
                if u.diagonal_weight < 0.0 {
                    negative += 1;
                }
                min_diag = min_diag.min(u.diagonal_weight);
                current[j] = u.value;
            }
            if stored(step) {
                times.push(t_new);
                values.push(current.clone());
            }
        }
        let (policy, failed) = self.slice_controls(&current)?;
        substituted += failed;
        controls.push(policy);

        times.reverse();
        values.reverse();
        controls.reverse();
        let report = SolveReport {
            nodes: spec.axes.iter().map(|a| a.nodes).collect(),
            dt: self.dt,
            stable_dt: self.stable_dt,
            n_steps: self.n_steps,
            clips,
            inner_substitutions: substituted,
            negative_weight_events: negative,
            min_diagonal_weight: min_diag,
            ceiling_active: self.zero_beta.is_some(),
        };
        Ok(PideSolution {
            policy: PolicyField {
                times: times.clone(),
                controls,
                substituted,
            },
            values: ValueGrid {
                spec: spec.clone(),
                times,
                values,
                fingerprint: self.model.raw().fingerprint(),
                theta: self.model.theta,
                initial_wealth: self.model.initial_wealth(),
                dt: self.dt,
                n_steps: self.n_steps,
            },
            report,
        })
    }
}

pub fn solve_pide(model: &ValidatedModel, grid: &GridSpec) -> Result<PideSolution> {
    Scheme::new(model, grid)?.solve()
}

/// `Φ = -(1/θ) ln Φ̃` on every stored slice.
pub fn phi_from_tilde(vg: &ValueGrid) -> Result<Vec<Vec<f64>>> {
    vg.values
        .iter()
        .enumerate()
        .map(|(k, slice)| {
            slice
                .iter()
                .enumerate()
                .map(|(j, &v)| {
                    if v > 0.0 {
                        Ok(-v.ln() / vg.theta)
                    } else {
                        Err(Error::numerical(
                            format!("nonpositive transformed value {v} at slice {k}, node {j}"),
                            &vg.spec.coords(j),
                            f64::NAN,
                        ))
                    }
                })
                .collect()
        })
        .collect()
}

/// Recomputes `h*` on every stored slice of a solved grid.
pub fn extract_policy(vg: &ValueGrid, model: &ValidatedModel) -> Result<PolicyField> {
    if model.raw().fingerprint() != vg.fingerprint {
        return Err(Error::Config("value grid was solved for a different model".into()));
    }
    let spec = GridSpec { dt: Some(vg.dt), ..vg.spec.clone() };
    let scheme = Scheme {
        model,
        geometry: Geometry::new(&spec, model)?,
        zero_beta: None,
        inner: vg.spec.inner,
        stable_dt: f64::NAN,
        dt: vg.dt,
        n_steps: vg.n_steps,
    };
    let mut substituted = 0;
    let mut controls = Vec::with_capacity(vg.values.len());
    for slice in &vg.values {
        let (c, failed) = scheme.slice_controls(slice)?;
        substituted += failed;
        controls.push(c);
    }
    Ok(PolicyField {
        times: vg.times.clone(),
        controls,
        substituted,
    })
}

/// Piecewise-constant feedback built from a [`PolicyField`]: on
/// `[t_k, t_{k+1})` the control stored at `t_{k+1}` (the one the backward
/// step to `t_k` used), at the nearest node.
pub struct GridPolicy<'a> {
    spec: &'a GridSpec,
    field: &'a PolicyField,
    tolerance: f64,
}

impl<'a> GridPolicy<'a> {
    pub fn new(spec: &'a GridSpec, field: &'a PolicyField) -> Self {
        let span = field.times.last().copied().unwrap_or(1.0) - field.times.first().copied().unwrap_or(0.0);
        GridPolicy {
            spec,
            field,
            tolerance: 1e-9 * span.abs().max(1e-300),
        }
    }
}

impl Policy for GridPolicy<'_> {
    fn control(&self, t: f64, x: &[f64]) -> ControlVector {
        let k = self
            .field
            .times
            .partition_point(|&s| s <= t + self.tolerance)
            .min(self.field.times.len() - 1);
        self.field.controls[k][self.spec.nearest_node(x)].clone()
    }
}

/// Grid as CSV: `t, x.., phi_tilde, phi, h..` for every stored slice.
pub fn write_grid_csv<W: Write>(vg: &ValueGrid, policy: Option<&PolicyField>, mut w: W) -> Result<()> {
    if let Some(p) = policy {
        if p.times.len() != vg.times.len() {
            return Err(Error::Config("policy field and value grid have different time slices".into()));
        }
    }
    let phi = phi_from_tilde(vg)?;
    write!(w, "t")?;
    for d in 0..vg.spec.n_dims() {
        write!(w, ",x{d}")?;
    }
    write!(w, ",phi_tilde,phi")?;
    if let Some(p) = policy {
        for i in 0..p.controls[0][0].len() {
            write!(w, ",h{i}")?;
        }
    }
    writeln!(w)?;
    for (k, t) in vg.times.iter().enumerate() {
        for j in 0..vg.n_nodes() {
            write!(w, "{t}")?;
            for x in vg.spec.coords(j) {
                write!(w, ",{x}")?;
            }
            write!(w, ",{},{}", vg.values[k][j], phi[k][j])?;
            if let Some(p) = policy {
                for h in p.controls[k][j].as_slice() {
                    write!(w, ",{h}")?;
                }
            }
            writeln!(w)?;
        }
    }
    Ok(())
}
