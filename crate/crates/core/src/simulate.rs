//! Monte Carlo simulation of factor, wealth and Doléans-exponential paths
//! under the physical measure and under the control-tilted measure.
//!
//! Diffusion parts are stepped with Euler–Maruyama; jumps are exact in law
//! (independent Poisson counts per atom and step). Wealth is evolved in log
//! space. Each path owns a ChaCha stream keyed by `(seed, path id)`, so a
//! bundle is bit-identical regardless of how rayon schedules the work.

use std::io::Write;

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ControlVector, ValidatedModel};

/// Control rule evaluated along simulated paths.
pub trait Policy: Sync {
    fn control(&self, t: f64, x: &[f64]) -> ControlVector;

    /// A policy that never changes lets the simulator hoist all
    /// control-dependent coefficients out of the time loop.
    fn constant(&self) -> Option<&ControlVector> {
        None
    }
}

impl Policy for ControlVector {
    fn control(&self, _t: f64, _x: &[f64]) -> ControlVector {
        self.clone()
    }

    fn constant(&self) -> Option<&ControlVector> {
        Some(self)
    }
}

/// Wraps a closure `(t, x) -> h` as a state-feedback policy.
pub struct FeedbackPolicy<F>(pub F);

impl<F> Policy for FeedbackPolicy<F>
where
    F: Fn(f64, &[f64]) -> ControlVector + Sync,
{
    fn control(&self, t: f64, x: &[f64]) -> ControlVector {
        (self.0)(t, x)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub n_paths: usize,
    pub dt: f64,
    pub seed: u64,
    #[serde(default)]
    pub antithetic: bool,
    /// Store the state every `record_every` steps; `0` keeps terminal values only.
    #[serde(default)]
    pub record_every: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            n_paths: 10_000,
            dt: 1e-2,
            seed: 0,
            antithetic: false,
            record_every: 0,
        }
    }
}

impl SimConfig {
    fn validate(&self, span: f64) -> Result<()> {
        if self.n_paths == 0 {
            return Err(Error::Config("n_paths must be at least 1".into()));
        }
        if !(self.dt > 0.0) || self.dt > span.max(0.0) + 1e-12 && span > 0.0 {
            return Err(Error::Config(format!(
                "dt={} must lie in (0, {span}]",
                self.dt
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Measure {
    Physical,
    Tilted,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JumpEvent {
    pub t: f64,
    pub atom: usize,
}

/// Recorded states of one path on the bundle's time grid.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trajectory {
    /// Row-major `(record time, factor)`.
    pub x: Vec<f64>,
    pub ln_v: Vec<f64>,
    pub ln_chi: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PathRecord {
    pub x_terminal: Vec<f64>,
    pub ln_v: f64,
    pub ln_chi: f64,
    /// Left-endpoint quadrature of `∫ g(X_s, h_s) ds`.
    pub int_g: f64,
    pub jumps: Vec<JumpEvent>,
    pub trajectory: Option<Trajectory>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PathBundle {
    pub measure: Measure,
    pub t0: f64,
    pub horizon: f64,
    pub x0: Vec<f64>,
    pub theta: f64,
    pub initial_wealth: f64,
    pub seed: u64,
    pub antithetic: bool,
    pub dt: f64,
    pub n_steps: usize,
    /// Times at which trajectories were recorded (empty when not recording).
    pub times: Vec<f64>,
    pub paths: Vec<PathRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub std_error: f64,
}

/// Summary record for a bundle, written next to the per-path CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleSummary {
    pub measure: Measure,
    pub n_paths: usize,
    pub n_steps: usize,
    pub dt: f64,
    pub seed: u64,
    pub mean_ln_v: f64,
    pub var_ln_v: f64,
    pub mean_chi: Estimate,
    pub mean_jumps: f64,
    pub mean_x_terminal: Vec<f64>,
}

/// Coefficients that depend only on the current control.
struct ControlTerms {
    sigma_t_h: Vec<f64>,
    v_drift_const: f64,
    v_drift_x: Vec<f64>,
    ln_1pu: Vec<f64>,
    g_const: f64,
    chi_drift: f64,
    poisson: Vec<Option<Poisson<f64>>>,
}

impl ControlTerms {
    fn new(model: &ValidatedModel, h: &DVector<f64>, dt: f64, measure: Measure) -> Self {
        let theta = model.theta;
        let hsh = (h.transpose() * &model.sigma_sigma_t * h)[(0, 0)];
        let sigma_t_h = model.sigma.tr_mul(h).as_slice().to_vec();
        let us: Vec<f64> = model.atoms.iter().map(|a| h.dot(&a.gamma)).collect();
        let ln_1pu: Vec<f64> = us.iter().map(|u| u.ln_1p()).collect();
        let tilt: Vec<f64> = us.iter().map(|u| (1.0 + u).powf(-theta)).collect();
        let comp: f64 = model.atoms.iter().zip(&us).map(|(a, u)| a.intensity * u).sum();
        let v_drift_const = model.a0 + h.dot(&model.a_hat) - 0.5 * hsh - comp;
        let v_drift_x = (&model.big_a0 + model.big_a_hat.tr_mul(h)).as_slice().to_vec();
        let jump_reward: f64 = model
            .atoms
            .iter()
            .zip(us.iter().zip(&tilt))
            .map(|(a, (u, t))| a.intensity * ((t - 1.0) / theta + u))
            .sum();
        let g_const = 0.5 * (theta + 1.0) * hsh - model.a0 - h.dot(&model.a_hat) + jump_reward;
        let chi_drift = -0.5 * theta * theta * hsh
            + model
                .atoms
                .iter()
                .zip(&tilt)
                .map(|(a, t)| a.intensity * (1.0 - t))
                .sum::<f64>();
        let poisson = model
            .atoms
            .iter()
            .zip(&tilt)
            .map(|(a, t)| {
                let rate = match measure {
                    Measure::Physical => a.intensity,
                    Measure::Tilted => a.intensity * t,
                } * dt;
                if rate > 0.0 {
                    Poisson::new(rate).ok()
                } else {
                    None
                }
            })
            .collect();
        ControlTerms {
            sigma_t_h,
            v_drift_const,
            v_drift_x,
            ln_1pu,
            g_const,
            chi_drift,
            poisson,
        }
    }
}

/// Dense copies of the model blocks used in the inner loop.
struct Kernel<'a> {
    model: &'a ValidatedModel,
    n: usize,
    big_m: usize,
    b: Vec<f64>,
    big_b: Vec<f64>,
    lambda: Vec<f64>,
    xi: Vec<Vec<f64>>,
    intensity: Vec<f64>,
}

impl<'a> Kernel<'a> {
    fn new(model: &'a ValidatedModel) -> Self {
        let n = model.n;
        let big_m = model.lambda.ncols();
        let row_major = |mat: &nalgebra::DMatrix<f64>| {
            let mut out = Vec::with_capacity(mat.len());
            for i in 0..mat.nrows() {
                for j in 0..mat.ncols() {
                    out.push(mat[(i, j)]);
                }
            }
            out
        };
        Kernel {
            model,
            n,
            big_m,
            b: model.b.as_slice().to_vec(),
            big_b: row_major(&model.big_b),
            lambda: row_major(&model.lambda),
            xi: model.atoms.iter().map(|a| a.xi.as_slice().to_vec()).collect(),
            intensity: model.atoms.iter().map(|a| a.intensity).collect(),
        }
    }
}

struct PathTask<'a, P: Policy + ?Sized> {
    kernel: &'a Kernel<'a>,
    policy: &'a P,
    measure: Measure,
    t0: f64,
    x0: &'a [f64],
    dt: f64,
    n_steps: usize,
    record_every: usize,
    seed: u64,
    antithetic: bool,
    constant: Option<ControlTerms>,
}

impl<'a, P: Policy + ?Sized> PathTask<'a, P> {
    fn run(&self, path: usize) -> Result<PathRecord> {
        let k = self.kernel;
        let model = k.model;
        let theta = model.theta;
        let (stream, sign) = if self.antithetic {
            (path as u64 / 2, if path.is_multiple_of(2) { 1.0 } else { -1.0 })
        } else {
            (path as u64, 1.0)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);

        let n = k.n;
        let sqrt_dt = self.dt.sqrt();
        let mut x = self.x0.to_vec();
        let mut x_next = vec![0.0; n];
        let mut dw = vec![0.0; k.big_m];
        let mut counts = vec![0u64; k.intensity.len()];
        let mut ln_v = 0.0;
        let mut ln_chi = 0.0;
        let mut int_g = 0.0;
        let mut jumps = Vec::new();
        let mut trajectory = (self.record_every > 0).then(Trajectory::default);
        if let Some(tr) = trajectory.as_mut() {
            tr.x.extend_from_slice(&x);
            tr.ln_v.push(ln_v);
            tr.ln_chi.push(ln_chi);
        }

        let mut local_terms;
        for step in 0..self.n_steps {
            let t = self.t0 + step as f64 * self.dt;
            let terms = match &self.constant {
                Some(c) => c,
                None => {
                    let h = self.policy.control(t, &x);
                    let margin = model.min_jump_margin(&h.0);
                    if h.len() != model.m || !(margin > 0.0) {
                        return Err(Error::InadmissiblePolicy {
                            path,
                            t,
                            x: x.clone(),
                            h: h.as_slice().to_vec(),
                        });
                    }
                    local_terms = ControlTerms::new(model, &h.0, self.dt, self.measure);
                    &local_terms
                }
            };

            for w in dw.iter_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *w = sign * sqrt_dt * z;
            }
            // the sampled increments are Brownian under the simulation measure;
            // convert to physical-measure increments for wealth and χ
            if self.measure == Measure::Tilted {
                for (w, s) in dw.iter_mut().zip(&terms.sigma_t_h) {
                    *w -= theta * s * self.dt;
                }
            }
            for (c, dist) in counts.iter_mut().zip(&terms.poisson) {
                *c = match dist {
                    Some(d) => d.sample(&mut rng) as u64,
                    None => 0,
                };
            }

            let gx: f64 = terms.v_drift_x.iter().zip(&x).map(|(a, b)| a * b).sum();
            int_g += (terms.g_const - gx) * self.dt;
            let h_sigma_dw: f64 = terms.sigma_t_h.iter().zip(&dw).map(|(a, b)| a * b).sum();
            let mut jump_ln_v = 0.0;
            for (k_atom, &c) in counts.iter().enumerate() {
                if c > 0 {
                    jump_ln_v += c as f64 * terms.ln_1pu[k_atom];
                    for _ in 0..c {
                        jumps.push(JumpEvent { t: t + self.dt, atom: k_atom });
                    }
                }
            }
            ln_v += (terms.v_drift_const + gx) * self.dt + h_sigma_dw + jump_ln_v;
            ln_chi += -theta * h_sigma_dw + terms.chi_drift * self.dt - theta * jump_ln_v;

            // dX = (b + BX)dt + Λ dW + Σ_k ξ_k (dN_k - λ_k dt) in physical
            // increments; under the tilted measure this is exactly
            // f dt + Λ dW^h + ξ dÑ^h
            for i in 0..n {
                let mut drift = k.b[i];
                for j in 0..n {
                    drift += k.big_b[i * n + j] * x[j];
                }
                let mut diff = 0.0;
                for j in 0..k.big_m {
                    diff += k.lambda[i * k.big_m + j] * dw[j];
                }
                let mut jump = 0.0;
                for (a, &c) in counts.iter().enumerate() {
                    let xi = k.xi[a][i];
                    if xi != 0.0 {
                        jump += xi * (c as f64 - k.intensity[a] * self.dt);
                    }
                }
                x_next[i] = x[i] + drift * self.dt + diff + jump;
            }
            std::mem::swap(&mut x, &mut x_next);

            if let Some(tr) = trajectory.as_mut() {
                if (step + 1) % self.record_every == 0 || step + 1 == self.n_steps {
                    tr.x.extend_from_slice(&x);
                    tr.ln_v.push(ln_v);
                    tr.ln_chi.push(ln_chi);
                }
            }
        }

        Ok(PathRecord {
            x_terminal: x,
            ln_v: ln_v + model.initial_wealth().ln(),
            ln_chi,
            int_g,
            jumps,
            trajectory,
        })
    }
}

fn step_grid(span: f64, dt: f64) -> (usize, f64) {
    if span <= 0.0 {
        return (0, dt);
    }
    let n = ((span / dt) - 1e-9).ceil().max(1.0) as usize;
    (n, span / n as f64)
}

/// Simulates `cfg.n_paths` paths on `[t0, T]` from `x0` under `measure`.
pub fn simulate_from<P: Policy + ?Sized>(
    model: &ValidatedModel,
    policy: &P,
    t0: f64,
    x0: &[f64],
    cfg: &SimConfig,
    measure: Measure,
) -> Result<PathBundle> {
    let horizon = model.horizon();
    if !(0.0..=horizon).contains(&t0) {
        return Err(Error::Domain(format!("t0={t0} outside [0, {horizon}]")));
    }
    if x0.len() != model.n {
        return Err(Error::Dimension(format!(
            "initial state has length {}, model has {} factors",
            x0.len(),
            model.n
        )));
    }
    cfg.validate(horizon)?;
    let (n_steps, dt) = step_grid(horizon - t0, cfg.dt);

    let constant = match policy.constant() {
        Some(h) => {
            model.check_control(h)?;
            if !(model.min_jump_margin(&h.0) > 0.0) {
                return Err(Error::InadmissiblePolicy {
                    path: 0,
                    t: t0,
                    x: x0.to_vec(),
                    h: h.as_slice().to_vec(),
                });
            }
            Some(ControlTerms::new(model, &h.0, dt, measure))
        }
        None => None,
    };
    let kernel = Kernel::new(model);
    let task = PathTask {
        kernel: &kernel,
        policy,
        measure,
        t0,
        x0,
        dt,
        n_steps,
        record_every: cfg.record_every,
        seed: cfg.seed,
        antithetic: cfg.antithetic,
        constant,
    };
    let paths = (0..cfg.n_paths)
        .into_par_iter()
        .map(|p| task.run(p))
        .collect::<Result<Vec<_>>>()?;

    let times = if cfg.record_every > 0 {
        let mut times = vec![t0];
        for step in 1..=n_steps {
            if step % cfg.record_every == 0 || step == n_steps {
                times.push(t0 + step as f64 * dt);
            }
        }
        times
    } else {
        Vec::new()
    };

    Ok(PathBundle {
        measure,
        t0,
        horizon,
        x0: x0.to_vec(),
        theta: model.theta,
        initial_wealth: model.initial_wealth(),
        seed: cfg.seed,
        antithetic: cfg.antithetic,
        dt,
        n_steps,
        times,
        paths,
    })
}

/// Paths on `[0, T]` under the physical measure.
pub fn simulate_physical<P: Policy + ?Sized>(
    model: &ValidatedModel,
    policy: &P,
    x0: &[f64],
    cfg: &SimConfig,
) -> Result<PathBundle> {
    simulate_from(model, policy, 0.0, x0, cfg, Measure::Physical)
}

/// Paths on `[0, T]` under the measure tilted by the policy's Doléans exponential.
pub fn simulate_tilted<P: Policy + ?Sized>(
    model: &ValidatedModel,
    policy: &P,
    x0: &[f64],
    cfg: &SimConfig,
) -> Result<PathBundle> {
    simulate_from(model, policy, 0.0, x0, cfg, Measure::Tilted)
}

/// Per-atom jump intensities under the tilted measure, `λ_k (1 + h'γ_k)^{-θ}`.
pub fn tilted_intensities(model: &ValidatedModel, h: &ControlVector) -> Result<Vec<f64>> {
    model.check_control(h)?;
    if !(model.min_jump_margin(&h.0) > 0.0) {
        return Err(Error::Domain("control outside the admissible set".into()));
    }
    Ok(model
        .atoms
        .iter()
        .map(|a| a.intensity * (1.0 + h.0.dot(&a.gamma)).powf(-model.theta))
        .collect())
}

impl PathBundle {
    /// Groups samples so antithetic pairs count as one observation.
    fn grouped(&self, sample: impl Fn(&PathRecord) -> f64) -> Vec<f64> {
        if self.antithetic {
            self.paths
                .chunks(2)
                .map(|c| c.iter().map(&sample).sum::<f64>() / c.len() as f64)
                .collect()
        } else {
            self.paths.iter().map(sample).collect()
        }
    }

    pub fn summary(&self) -> BundleSummary {
        let n = self.paths.len() as f64;
        let lv: Vec<f64> = self.paths.iter().map(|p| p.ln_v).collect();
        let (mean_ln_v, var_ln_v) = mean_var(&lv);
        let dim = self.x0.len();
        let mut mean_x = vec![0.0; dim];
        for p in &self.paths {
            for (m, x) in mean_x.iter_mut().zip(&p.x_terminal) {
                *m += x / n;
            }
        }
        BundleSummary {
            measure: self.measure,
            n_paths: self.paths.len(),
            n_steps: self.n_steps,
            dt: self.dt,
            seed: self.seed,
            mean_ln_v,
            var_ln_v,
            mean_chi: mean_with_se(&self.grouped(|p| p.ln_chi.exp())),
            mean_jumps: self.paths.iter().map(|p| p.jumps.len() as f64).sum::<f64>() / n,
            mean_x_terminal: mean_x,
        }
    }

    /// Per-path terminal values as CSV.
    pub fn write_terminal_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        write!(w, "path")?;
        for i in 0..self.x0.len() {
            write!(w, ",x{i}")?;
        }
        writeln!(w, ",ln_v,ln_chi,int_g,n_jumps")?;
        for (id, p) in self.paths.iter().enumerate() {
            write!(w, "{id}")?;
            for x in &p.x_terminal {
                write!(w, ",{x}")?;
            }
            writeln!(w, ",{},{},{},{}", p.ln_v, p.ln_chi, p.int_g, p.jumps.len())?;
        }
        Ok(())
    }

    /// Recorded trajectories in long format: one row per `(path, time)`.
    pub fn write_trajectories_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        write!(w, "path,t")?;
        for i in 0..self.x0.len() {
            write!(w, ",x{i}")?;
        }
        writeln!(w, ",ln_v,ln_chi")?;
        let dim = self.x0.len();
        let ln_v0 = self.initial_wealth.ln();
        for (id, p) in self.paths.iter().enumerate() {
            let Some(tr) = &p.trajectory else { continue };
            for (r, t) in self.times.iter().enumerate() {
                write!(w, "{id},{t}")?;
                for x in &tr.x[r * dim..(r + 1) * dim] {
                    write!(w, ",{x}")?;
                }
                writeln!(w, ",{},{}", tr.ln_v[r] + ln_v0, tr.ln_chi[r])?;
            }
        }
        Ok(())
    }
}

pub(crate) fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var)
}

pub(crate) fn mean_with_se(xs: &[f64]) -> Estimate {
    let (mean, var) = mean_var(xs);
    Estimate {
        value: mean,
        std_error: (var / xs.len() as f64).sqrt(),
    }
}

/// `J = -(1/θ) ln E[exp(-θ ln V(T))]` with a delta-method standard error.
pub fn estimate_criterion(bundle: &PathBundle, theta: f64) -> Result<Estimate> {
    if theta == 0.0 || !theta.is_finite() {
        return Err(Error::Domain(format!("theta must be finite and nonzero, got {theta}")));
    }
    if bundle.paths.is_empty() {
        return Err(Error::Config("empty bundle".into()));
    }
    let exps: Vec<f64> = bundle.paths.iter().map(|p| -theta * p.ln_v).collect();
    let shift = exps.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let scaled = |p: &PathRecord| (-theta * p.ln_v - shift).exp();
    let est = mean_with_se(&bundle.grouped(scaled));
    let value = -(shift + est.value.ln()) / theta;
    let std_error = est.std_error / (est.value * theta.abs());
    Ok(Estimate { value, std_error })
}

/// Monte Carlo estimate of the exponentially transformed criterion
/// `Ĩ = E^{h,θ}_{t,x}[exp(θ ∫_t^T g ds - θ ln v)]`.
pub fn estimate_tilde_i<P: Policy + ?Sized>(
    model: &ValidatedModel,
    policy: &P,
    t: f64,
    x: &[f64],
    cfg: &SimConfig,
) -> Result<Estimate> {
    let theta = model.theta;
    let ln_v = model.initial_wealth().ln();
    if (model.horizon() - t).abs() <= 1e-15 {
        return Ok(Estimate {
            value: (-theta * ln_v).exp(),
            std_error: 0.0,
        });
    }
    let bundle = simulate_from(model, policy, t, x, cfg, Measure::Tilted)?;
    let samples = bundle.grouped(|p| (theta * p.int_g - theta * ln_v).exp());
    Ok(mean_with_se(&samples))
}

/// Sample mean of `χ_T`, which must be 1 for an admissible control.
pub fn doleans_check(bundle: &PathBundle) -> Result<Estimate> {
    if bundle.measure != Measure::Physical {
        return Err(Error::Config("Doléans check needs a physical-measure bundle".into()));
    }
    Ok(mean_with_se(&bundle.grouped(|p| p.ln_chi.exp())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{AssetModel, FactorModel, JumpAtom, JumpMeasure, MarketModel, RiskParams};
    use crate::reference;

    fn money_market_only() -> ValidatedModel {
        ValidatedModel::new(MarketModel {
            factors: FactorModel { b: vec![0.0], big_b: vec![vec![-1.0]], lambda: vec![vec![0.3, 0.0]] },
            assets: AssetModel {
                a0: 0.01,
                big_a0: vec![0.0],
                a: vec![0.05],
                big_a: vec![vec![0.0]],
                sigma: vec![vec![0.0, 0.2]],
            },
            jumps: JumpMeasure::default(),
            risk: RiskParams { theta: 1.0, horizon_t: 1.0, initial_wealth_v: 1.0 },
        })
        .unwrap()
    }

    fn synthetic(ln_v: &[f64]) -> PathBundle {
        PathBundle {
            measure: Measure::Physical,
            t0: 0.0,
            horizon: 1.0,
            x0: vec![0.0],
            theta: 1.0,
            initial_wealth: 1.0,
            seed: 0,
            antithetic: false,
            dt: 1.0,
            n_steps: 1,
            times: vec![],
            paths: ln_v
                .iter()
                .map(|&l| PathRecord {
                    x_terminal: vec![0.0],
                    ln_v: l,
                    ln_chi: 0.0,
                    int_g: 0.0,
                    jumps: vec![],
                    trajectory: None,
                })
                .collect(),
        }
    }

    #[test]
    fn zero_control_grows_at_money_market_rate() {
        let m = money_market_only();
        let cfg = SimConfig { n_paths: 64, dt: 0.01, seed: 3, ..Default::default() };
        let b = simulate_physical(&m, &ControlVector::zeros(1), &[0.0], &cfg).unwrap();
        for p in &b.paths {
            assert!((p.ln_v - 0.01).abs() < 1e-13);
            assert_eq!(p.ln_chi, 0.0);
        }
    }

    #[test]
    fn zero_control_has_unit_doleans_exponential_with_jumps() {
        let m = ValidatedModel::new(reference::reference_model()).unwrap();
        let cfg = SimConfig { n_paths: 200, dt: 0.01, seed: 1, ..Default::default() };
        let b = simulate_physical(&m, &ControlVector::zeros(2), &[0.05], &cfg).unwrap();
        assert!(b.paths.iter().all(|p| p.ln_chi == 0.0));
        let est = doleans_check(&b).unwrap();
        assert_eq!(est.value, 1.0);
        assert_eq!(est.std_error, 0.0);
    }

    #[test]
    fn jump_counts_match_poisson_mean() {
        let m = ValidatedModel::new(reference::reference_model()).unwrap();
        // total intensity 1.8 here; the Poisson oracle is mean λT, sd sqrt(λT / N)
        let total = m.total_intensity();
        let n = 100_000;
        let cfg = SimConfig { n_paths: n, dt: 0.05, seed: 11, ..Default::default() };
        let b = simulate_physical(&m, &ControlVector::zeros(2), &[0.05], &cfg).unwrap();
        let mean = b.summary().mean_jumps;
        assert!((mean - total).abs() < 3.0 * (total / n as f64).sqrt(), "{mean} vs {total}");
    }

    #[test]
    fn tilted_intensity_values() {
        let m = ValidatedModel::new(reference::reference_model()).unwrap();
        let phys: Vec<f64> = m.atoms.iter().map(|a| a.intensity).collect();
        assert_eq!(tilted_intensities(&m, &ControlVector::zeros(2)).unwrap(), phys);
        // h'γ_0 = -0.1 with θ = 1 gives 0.5 / 0.9
        let h = ControlVector::from_slice(&[1.0, 1.0]);
        let lam = tilted_intensities(&m, &h).unwrap();
        assert!((lam[0] - 0.5 / 0.9).abs() < 1e-15);
    }

    #[test]
    fn criterion_on_synthetic_bundles() {
        let b = synthetic(&[0.01; 5]);
        for theta in [0.5, 1.0, 3.0, -0.5] {
            let j = estimate_criterion(&b, theta).unwrap();
            assert!((j.value - 0.01).abs() < 1e-15);
            assert_eq!(j.std_error, 0.0);
        }
        let b = synthetic(&[0.0, 0.2]);
        let j = estimate_criterion(&b, 1.0).unwrap();
        let expected = -((1.0 + (-0.2f64).exp()) / 2.0).ln();
        assert!((j.value - expected).abs() < 1e-15);
        assert!((j.value - 0.095_008).abs() < 1e-6);

        let b = synthetic(&[-0.3, 0.0, 0.1, 0.25, 0.6]);
        let js: Vec<f64> = [0.1, 1.0, 2.0].iter().map(|&t| estimate_criterion(&b, t).unwrap().value).collect();
        assert!(js[0] >= js[1] && js[1] >= js[2], "{js:?}");
    }

    #[test]
    fn criterion_survives_extreme_exponents() {
        let b = synthetic(&[800.0, 801.0]);
        let j = estimate_criterion(&b, -0.9).unwrap();
        assert!(j.value.is_finite());
        assert!(j.value > 800.0 && j.value < 801.0);
    }

    #[test]
    fn tilde_i_at_horizon() {
        let mut raw = reference::reference_model();
        raw.risk.initial_wealth_v = 2.0;
        let m = ValidatedModel::new(raw).unwrap();
        let est = estimate_tilde_i(&m, &ControlVector::zeros(2), 1.0, &[0.0], &SimConfig::default()).unwrap();
        assert_eq!(est.value, 2.0f64.powf(-1.0));
        assert_eq!(est.std_error, 0.0);
    }

    #[test]
    fn tilde_i_state_independent_is_deterministic() {
        let m = ValidatedModel::new(reference::state_independent_model()).unwrap();
        let h = ControlVector::from_slice(&[0.6, 0.2]);
        let g = crate::coefficients::g_value(&DVector::from_element(1, 0.0), &h, &m).unwrap();
        let cfg = SimConfig { n_paths: 500, dt: 0.01, seed: 5, ..Default::default() };
        let est = estimate_tilde_i(&m, &h, 0.25, &[0.3], &cfg).unwrap();
        let exact = (m.theta() * g * 0.75).exp();
        assert!((est.value - exact).abs() < 1e-12 * exact);
    }

    #[test]
    fn inadmissible_feedback_aborts() {
        let m = ValidatedModel::new(reference::reference_model()).unwrap();
        let policy = FeedbackPolicy(|t: f64, _x: &[f64]| {
            if t > 0.5 {
                ControlVector::from_slice(&[10.0, 0.0])
            } else {
                ControlVector::zeros(2)
            }
        });
        let cfg = SimConfig { n_paths: 4, dt: 0.1, seed: 0, ..Default::default() };
        let err = simulate_physical(&m, &policy, &[0.0], &cfg).unwrap_err();
        assert!(matches!(err, Error::InadmissiblePolicy { t, .. } if t > 0.5));
    }

    #[test]
    fn seed_determinism() {
        let m = ValidatedModel::new(reference::reference_model()).unwrap();
        let cfg = SimConfig { n_paths: 300, dt: 0.02, seed: 42, antithetic: true, record_every: 5 };
        let h = ControlVector::from_slice(&[0.5, 0.3]);
        let a = simulate_physical(&m, &h, &[0.05], &cfg).unwrap();
        let b = simulate_physical(&m, &h, &[0.05], &cfg).unwrap();
        assert_eq!(a, b);
        let mut csv_a = Vec::new();
        let mut csv_b = Vec::new();
        a.write_trajectories_csv(&mut csv_a).unwrap();
        b.write_trajectories_csv(&mut csv_b).unwrap();
        assert_eq!(csv_a, csv_b);
        assert_eq!(a.times.len(), 11);
    }

    #[test]
    fn wealth_stays_positive_and_log_space_consistent() {
        let m = ValidatedModel::new(reference::reference_model()).unwrap();
        let h = ControlVector::from_slice(&[4.0, 3.0]);
        assert!(m.min_jump_margin(&h.0) > 0.0);
        let cfg = SimConfig { n_paths: 200, dt: 0.01, seed: 9, record_every: 1, ..Default::default() };
        let b = simulate_physical(&m, &h, &[0.05], &cfg).unwrap();
        for p in &b.paths {
            let tr = p.trajectory.as_ref().unwrap();
            assert!(tr.ln_v.iter().all(|l| l.exp() > 0.0 && l.is_finite()));
            assert_eq!(tr.ln_chi[0], 0.0);
        }
    }

    #[test]
    fn change_of_measure_identity_holds_pathwise() {
        // -θ ln V(T) = -θ ln v + θ ∫g + ln χ_T holds exactly on the grid
        let m = ValidatedModel::new(reference::reference_model()).unwrap();
        let h = ControlVector::from_slice(&[0.8, -0.4]);
        let cfg = SimConfig { n_paths: 50, dt: 0.01, seed: 2, ..Default::default() };
        let b = simulate_physical(&m, &h, &[0.1], &cfg).unwrap();
        for p in &b.paths {
            let lhs = -p.ln_v;
            let rhs = p.int_g + p.ln_chi;
            assert!((lhs - rhs).abs() < 1e-12, "{lhs} vs {rhs}");
        }
    }

    #[test]
    fn jump_only_atom_paths_record_events() {
        let mut raw = reference::reference_model();
        raw.jumps.atoms.push(JumpAtom { intensity: 5.0, xi: vec![0.01], gamma: vec![0.0, 0.0] });
        let m = ValidatedModel::new(raw).unwrap();
        let cfg = SimConfig { n_paths: 10, dt: 0.01, seed: 0, ..Default::default() };
        let b = simulate_physical(&m, &ControlVector::zeros(2), &[0.0], &cfg).unwrap();
        assert!(b.paths.iter().any(|p| p.jumps.iter().any(|e| e.atom == 4)));
        for p in &b.paths {
            assert!(p.jumps.windows(2).all(|w| w[0].t <= w[1].t));
        }
    }
}
