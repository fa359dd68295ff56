//! Property probes that check solver and simulator output against the
//! structural facts the value function must satisfy.
//!
//! Every probe is deterministic given its seed and returns a [`ProbeReport`].

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bounds::{global_bound_m, AffineBound, EnvelopeSlice, ZeroBetaPolicy};
use crate::error::{Error, Result};
use crate::model::{ControlVector, RiskParams, ValidatedModel};
use crate::pide::{phi_from_tilde, solve_pide, GridPolicy, GridSpec, PideSolution, Scheme, ValueGrid};
use crate::simulate::{estimate_criterion, estimate_tilde_i, simulate_physical, Policy, SimConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub name: String,
    pub points: usize,
    pub violations: usize,
    /// Smallest `allowed - observed` seen; negative when something failed.
    pub worst_margin: f64,
    pub passed: bool,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub detail: String,
}

impl ProbeReport {
    fn from_margins(name: &str, margins: impl IntoIterator<Item = f64>) -> Self {
        let mut points = 0;
        let mut violations = 0;
        let mut worst = f64::INFINITY;
        for m in margins {
            points += 1;
            if !(m >= 0.0) {
                violations += 1;
            }
            worst = worst.min(m);
        }
        ProbeReport {
            name: name.to_string(),
            points,
            violations,
            worst_margin: worst,
            passed: violations == 0,
            detail: String::new(),
        }
    }

    fn with_detail(mut self, detail: impl Into<String>) -> Self {
        self.detail = detail.into();
        self
    }
}

impl fmt::Display for ProbeReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<24} {} points={} violations={} worst_margin={:.3e}",
            self.name,
            if self.passed { "PASS" } else { "FAIL" },
            self.points,
            self.violations,
            self.worst_margin
        )?;
        if !self.detail.is_empty() {
            write!(f, " ({})", self.detail)?;
        }
        Ok(())
    }
}

/// Box of states on which a probe is evaluated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Region {
    pub fn full(spec: &GridSpec) -> Self {
        Region {
            lower: spec.axes.iter().map(|a| a.x_min).collect(),
            upper: spec.axes.iter().map(|a| a.x_max).collect(),
        }
    }

    /// The central `fraction` of each axis.
    pub fn central(spec: &GridSpec, fraction: f64) -> Self {
        let half = |a: &crate::pide::Axis| 0.5 * fraction * (a.x_max - a.x_min);
        let mid = |a: &crate::pide::Axis| 0.5 * (a.x_max + a.x_min);
        Region {
            lower: spec.axes.iter().map(|a| mid(a) - half(a)).collect(),
            upper: spec.axes.iter().map(|a| mid(a) + half(a)).collect(),
        }
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter()
            .zip(self.lower.iter().zip(&self.upper))
            .all(|(v, (lo, hi))| *v >= lo - 1e-12 && *v <= hi + 1e-12)
    }

    /// Node index range `[first, last]` inside the region along one axis.
    fn index_range(&self, spec: &GridSpec, d: usize) -> Option<(usize, usize)> {
        let a = &spec.axes[d];
        let inside: Vec<usize> = (0..a.nodes)
            .filter(|&i| {
                let x = a.coord(i);
                x >= self.lower[d] - 1e-12 && x <= self.upper[d] + 1e-12
            })
            .collect();
        Some((*inside.first()?, *inside.last()?))
    }
}

/// Convexity of `Φ` along grid lines: for on-grid triples `x₁ < x_m < x₂`
/// on one line with `x_m = κx₁ + (1-κ)x₂`, checks
/// `Φ(x_m) ≤ κΦ(x₁) + (1-κ)Φ(x₂) + 10⁻⁴·scale`, where `scale` is the largest
/// `|Φ|` on the lattice.
pub fn probe_convexity(spec: &GridSpec, phi: &[Vec<f64>], samples: usize, seed: u64, region: Option<&Region>) -> ProbeReport {
    let scale = phi
        .iter()
        .flat_map(|s| s.iter())
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(f64::MIN_POSITIVE);
    let tol = 1e-4 * scale;
    let full = Region::full(spec);
    let region = region.unwrap_or(&full);
    let ranges: Option<Vec<(usize, usize)>> = (0..spec.n_dims()).map(|d| region.index_range(spec, d)).collect();
    let Some(ranges) = ranges else {
        return ProbeReport::from_margins("convexity", []).with_detail("empty region");
    };
    let line_axes: Vec<usize> = (0..spec.n_dims()).filter(|&d| ranges[d].1 >= ranges[d].0 + 2).collect();
    if line_axes.is_empty() {
        return ProbeReport::from_margins("convexity", []).with_detail("region too small");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let margins: Vec<f64> = (0..samples)
        .map(|_| {
            let k = rng.random_range(0..phi.len());
            let d = line_axes[rng.random_range(0..line_axes.len())];
            let mut idx = [0usize; 2];
            for (e, r) in ranges.iter().enumerate() {
                idx[e] = rng.random_range(r.0..=r.1);
            }
            let (lo, hi) = ranges[d];
            let i1 = rng.random_range(lo..=hi - 2);
            let i2 = rng.random_range(i1 + 2..=hi);
            let im = rng.random_range(i1 + 1..i2);
            let at = |i: usize| {
                let mut j = idx;
                j[d] = i;
                phi[k][spec.node_of(j)]
            };
            let kappa = (i2 - im) as f64 / (i2 - i1) as f64;
            kappa * at(i1) + (1.0 - kappa) * at(i2) + tol - at(im)
        })
        .collect();
    ProbeReport::from_margins("convexity", margins).with_detail(format!("tolerance {tol:.3e}"))
}

/// `0 < Φ̃ ≤ M̌(t) + 10⁻⁸` and `Φ̃ ≤ envelope + 10⁻⁸` at every node in
/// the region.
pub fn probe_bounds(
    vg: &ValueGrid,
    bounds: &[AffineBound],
    zero_beta: Option<&ZeroBetaPolicy>,
    risk: &RiskParams,
    region: Option<&Region>,
) -> ProbeReport {
    const TOL: f64 = 1e-8;
    let nodes: Vec<(usize, Vec<f64>)> = (0..vg.n_nodes())
        .map(|j| (j, vg.spec.coords(j)))
        .filter(|(_, x)| region.is_none_or(|r| r.contains(x)))
        .collect();
    let mut margins = Vec::with_capacity(vg.times.len() * nodes.len());
    let mut worst_envelope = f64::INFINITY;
    for (k, &t) in vg.times.iter().enumerate() {
        let ceiling = zero_beta.map(|zb| global_bound_m(zb, t, risk));
        let envelope = (!bounds.is_empty()).then(|| EnvelopeSlice::new(t, bounds, risk));
        for (j, x) in &nodes {
            let v = vg.values[k][*j];
            let mut m = if v > 0.0 { f64::INFINITY } else { -1.0 };
            if let Some(c) = ceiling {
                m = m.min(c + TOL - v);
            }
            if let Some(env) = &envelope {
                let e = env.eval(x) + TOL - v;
                worst_envelope = worst_envelope.min(e);
                m = m.min(e);
            }
            margins.push(m);
        }
    }
    let detail = format!(
        "ceiling={}, envelope bounds={}, worst envelope margin={worst_envelope:.3e}",
        zero_beta.is_some(),
        bounds.len()
    );
    ProbeReport::from_margins("bounds", margins).with_detail(detail)
}

/// Raising one neighbor of a node never lowers the node's update. Each
/// sample picks a stored slice, a node and one member of its stencil, bumps
/// that value by `10⁻³` relative, and recomputes `h*` and the update.
pub fn probe_monotonicity(scheme: &Scheme<'_>, vg: &ValueGrid, samples: usize, seed: u64) -> ProbeReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if vg.values.len() < 2 {
        return ProbeReport::from_margins("monotonicity", []).with_detail("need two slices");
    }
    let mut failures = 0;
    let margins: Vec<f64> = (0..samples)
        .map(|_| {
            let k = rng.random_range(0..vg.values.len() - 1);
            let prev = &vg.values[k + 1];
            let t_new = vg.times[k + 1] - scheme.dt();
            let node = rng.random_range(0..prev.len());
            let stencil = scheme.stencil(node);
            let nb = stencil[rng.random_range(0..stencil.len())];
            let update = |slice: &[f64]| -> Option<f64> {
                let h = scheme.node_control(slice, node).ok()?.h_star;
                Some(scheme.update_node(slice, node, &h, t_new).value)
            };
            let mut bumped = prev.clone();
            bumped[nb] += 1e-3 * prev[nb];
            match (update(prev), update(&bumped)) {
                (Some(base), Some(up)) => up - base + 1e-13 * base.abs(),
                _ => {
                    failures += 1;
                    -1.0
                }
            }
        })
        .collect();
    let report = ProbeReport::from_margins("monotonicity", margins);
    if failures > 0 {
        report.with_detail(format!("{failures} inner-solve failures"))
    } else {
        report
    }
}

/// Discrete comparison: terminal data `v_low^{-θ} ≥ v_high^{-θ}` give
/// `Φ̃_low ≥ Φ̃_high` at every node and stored time.
pub fn probe_comparison(model: &ValidatedModel, spec: &GridSpec, v_low: f64, v_high: f64) -> Result<ProbeReport> {
    if !(v_low > 0.0 && v_low <= v_high) {
        return Err(Error::Domain(format!("need 0 < v_low <= v_high, got {v_low}, {v_high}")));
    }
    let risk = model.risk();
    let low = model.with_risk(RiskParams { initial_wealth_v: v_low, ..risk.clone() })?;
    let high = model.with_risk(RiskParams { initial_wealth_v: v_high, ..risk.clone() })?;
    let spec = GridSpec { store_every: 1, ..spec.clone() };
    let a = solve_pide(&low, &spec)?;
    let b = solve_pide(&high, &spec)?;
    if a.values.times.len() != b.values.times.len() {
        return Err(Error::numerical("comparison runs used different time grids", &[], f64::NAN));
    }
    let margins = a
        .values
        .values
        .iter()
        .zip(&b.values.values)
        .flat_map(|(u, w)| u.iter().zip(w).map(|(x, y)| x - y).collect::<Vec<_>>());
    Ok(ProbeReport::from_margins("comparison", margins))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub nodes: Vec<usize>,
    pub dt: Vec<f64>,
    /// Max `|Φ_fine - Φ_coarse|` at `t = 0` on shared nodes in the region.
    pub differences: Vec<f64>,
    pub factors: Vec<f64>,
    pub report: ProbeReport,
}

/// Solves on `levels` nested grids (each refinement halves the spacing and
/// re-derives `dt`) and checks that successive changes in `Φ(0, ·)` shrink by
/// at least `min_factor`.
pub fn self_convergence(
    model: &ValidatedModel,
    spec: &GridSpec,
    levels: usize,
    region: &Region,
    min_factor: f64,
) -> Result<ConvergenceReport> {
    if levels < 3 {
        return Err(Error::Config("self-convergence needs at least 3 levels".into()));
    }
    let mut specs = vec![GridSpec { store_every: usize::MAX, ..spec.clone() }];
    for _ in 1..levels {
        specs.push(specs.last().unwrap().refined());
    }
    let mut phis = Vec::with_capacity(levels);
    let mut dts = Vec::with_capacity(levels);
    for s in &specs {
        let sol = solve_pide(model, s)?;
        dts.push(sol.values.dt);
        phis.push(phi_from_tilde(&sol.values)?.swap_remove(0));
    }
    let coarse = &specs[0];
    let shared: Vec<usize> = (0..coarse.n_nodes()).filter(|&j| region.contains(&coarse.coords(j))).collect();
    let mut differences = Vec::with_capacity(levels - 1);
    for l in 1..levels {
        let scale_c = 1usize << (l - 1);
        let scale_f = 1usize << l;
        let diff = shared
            .iter()
            .map(|&j| {
                let idx = coarse.multi_index(j);
                let jc = specs[l - 1].node_of([idx[0] * scale_c, idx[1] * scale_c]);
                let jf = specs[l].node_of([idx[0] * scale_f, idx[1] * scale_f]);
                (phis[l][jf] - phis[l - 1][jc]).abs()
            })
            .fold(0.0, f64::max);
        differences.push(diff);
    }
    let factors: Vec<f64> = differences.windows(2).map(|w| w[0] / w[1]).collect();
    // changes already at rounding level count as converged
    let margins = differences
        .windows(2)
        .zip(&factors)
        .map(|(w, f)| if w[0] <= 1e-12 { 0.0 } else { f - min_factor });
    let report = ProbeReport::from_margins("self_convergence", margins)
        .with_detail(format!("factors {factors:?}"));
    Ok(ConvergenceReport {
        nodes: specs.iter().map(|s| s.axes[0].nodes).collect(),
        dt: dts,
        differences,
        factors,
        report,
    })
}

/// Max relative change of `Φ̃(0, ·)` on the region when the box is enlarged
/// by `factor` at fixed spacing.
pub fn boundary_sensitivity(model: &ValidatedModel, spec: &GridSpec, factor: f64, region: &Region) -> Result<f64> {
    let base_spec = GridSpec { store_every: usize::MAX, ..spec.clone() };
    let big_spec = base_spec.enlarged(factor);
    let base = solve_pide(model, &base_spec)?;
    let big = solve_pide(model, &big_spec)?;
    Ok((0..base_spec.n_nodes())
        .map(|j| base_spec.coords(j))
        .filter(|x| region.contains(x))
        .map(|x| {
            let a = base_spec.interpolate(base.values.initial_slice(), &x);
            let b = big_spec.interpolate(big.values.initial_slice(), &x);
            ((a - b) / b).abs()
        })
        .fold(0.0, f64::max))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossRow {
    pub t: f64,
    pub x: Vec<f64>,
    pub grid: f64,
    pub mc_policy: f64,
    pub se_policy: f64,
    pub mc_zero: f64,
    pub se_zero: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossValidation {
    pub rows: Vec<CrossRow>,
    /// Extracted policy: `|Ĩ_MC - Φ̃| ≤ 2%·Φ̃ + 3 SE`.
    pub agreement: ProbeReport,
    /// `h = 0`: `Ĩ_MC ≥ Φ̃ - 3 SE - scheme_tol`.
    pub dominance: ProbeReport,
}

/// Tilted Monte Carlo estimates of `Ĩ` under the extracted grid policy and
/// under `h = 0`, compared with the grid value at each `(t, x)`.
pub fn cross_validate(
    model: &ValidatedModel,
    solution: &PideSolution,
    points: &[(f64, Vec<f64>)],
    cfg: &SimConfig,
    scheme_tol: f64,
) -> Result<CrossValidation> {
    if !(model.theta() > 0.0) {
        return Err(Error::Unsupported("cross-validation requires theta > 0".into()));
    }
    let vg = &solution.values;
    let policy = GridPolicy::new(&vg.spec, &solution.policy);
    let zero = ControlVector::zeros(model.n_assets());
    let mut rows = Vec::with_capacity(points.len());
    for (i, (t, x)) in points.iter().enumerate() {
        let k = vg.nearest_time_index(*t);
        let grid = vg.spec.interpolate(&vg.values[k], x);
        let run_cfg = SimConfig { seed: cfg.seed.wrapping_add(2 * i as u64), ..cfg.clone() };
        let opt = estimate_tilde_i(model, &policy, vg.times[k], x, &run_cfg)?;
        let run_cfg = SimConfig { seed: cfg.seed.wrapping_add(2 * i as u64 + 1), ..cfg.clone() };
        let z = estimate_tilde_i(model, &zero, vg.times[k], x, &run_cfg)?;
        rows.push(CrossRow {
            t: vg.times[k],
            x: x.clone(),
            grid,
            mc_policy: opt.value,
            se_policy: opt.std_error,
            mc_zero: z.value,
            se_zero: z.std_error,
        });
    }
    let agreement = ProbeReport::from_margins(
        "cross_validate_policy",
        rows.iter().map(|r| 0.02 * r.grid + 3.0 * r.se_policy - (r.mc_policy - r.grid).abs()),
    );
    let dominance = ProbeReport::from_margins(
        "cross_validate_zero",
        rows.iter().map(|r| r.mc_zero - r.grid + 3.0 * r.se_zero + scheme_tol),
    );
    Ok(CrossValidation { rows, agreement, dominance })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaylorRow {
    pub theta: f64,
    pub criterion: f64,
    pub std_error: f64,
    /// `E[ln V] - (θ/2) Var[ln V]`.
    pub mean_variance: f64,
    pub residual: f64,
    pub scaled_residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaylorReport {
    pub mean_ln_v: f64,
    pub var_ln_v: f64,
    pub rows: Vec<TaylorRow>,
    pub report: ProbeReport,
}

/// Compares `J(θ)` with its mean-variance expansion `E - (θ/2)Var` of
/// `ln V(T)` on one physical bundle. Passes when every residual is within
/// 3 SE, or when `residual/θ²` stays within a factor 3 across `thetas`.
pub fn taylor_probe<P: Policy + ?Sized>(
    model: &ValidatedModel,
    policy: &P,
    x0: &[f64],
    thetas: &[f64],
    cfg: &SimConfig,
) -> Result<TaylorReport> {
    if thetas.is_empty() || thetas.iter().any(|&t| !(t > 0.0 && t <= 0.2)) {
        return Err(Error::Domain(format!("taylor probe needs thetas in (0, 0.2], got {thetas:?}")));
    }
    let bundle = simulate_physical(model, policy, x0, cfg)?;
    let summary = bundle.summary();
    let (mean, var) = (summary.mean_ln_v, summary.var_ln_v);
    let rows: Vec<TaylorRow> = thetas
        .iter()
        .map(|&theta| {
            let j = estimate_criterion(&bundle, theta)?;
            let mv = mean - 0.5 * theta * var;
            let residual = j.value - mv;
            Ok(TaylorRow {
                theta,
                criterion: j.value,
                std_error: j.std_error,
                mean_variance: mv,
                residual,
                scaled_residual: residual / (theta * theta),
            })
        })
        .collect::<Result<_>>()?;
    let within_se = rows
        .iter()
        .all(|r| r.residual.abs() <= 3.0 * r.std_error + 1e-12 * (1.0 + r.mean_variance.abs()));
    let scaled: Vec<f64> = rows.iter().map(|r| r.scaled_residual.abs()).collect();
    let lo = scaled.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = scaled.iter().cloned().fold(0.0, f64::max);
    let stable = hi <= 3.0 * lo;
    let margin = if within_se || stable { 0.0 } else { -1.0 };
    let report = ProbeReport::from_margins("taylor", [margin]).with_detail(format!(
        "within 3 SE: {within_se}, residual/theta^2 range [{lo:.3e}, {hi:.3e}]"
    ));
    Ok(TaylorReport {
        mean_ln_v: mean,
        var_ln_v: var,
        rows,
        report,
    })
}

/// All probe reports of one verification run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct VerificationSummary {
    pub probes: Vec<ProbeReport>,
}

impl VerificationSummary {
    pub fn push(&mut self, report: ProbeReport) {
        self.probes.push(report);
    }

    pub fn passed(&self) -> bool {
        self.probes.iter().all(|p| p.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &ProbeReport> {
        self.probes.iter().filter(|p| !p.passed)
    }
}

impl fmt::Display for VerificationSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for p in &self.probes {
            writeln!(f, "{p}")?;
        }
        write!(f, "overall: {}", if self.passed() { "PASS" } else { "FAIL" })
    }
}
