//! Conditional probability paths and target fields on `R^d` and on the flat
//! torus, an explicit Euler integrator, and the trajectory-integrated variance
//! score.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, ensure_same_len, Error, Result};
use crate::geometry::{check_unit_time, torus_exp, torus_log, wrap_unchecked, Angle, Scheduler};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EuclideanFlowConfig {
    /// Spread of the conditional Gaussian path. Zero gives the straight interpolant.
    pub sigma: f64,
    pub n_steps: usize,
}

impl Default for EuclideanFlowConfig {
    fn default() -> Self {
        Self { sigma: 0.0, n_steps: 500 }
    }
}

impl EuclideanFlowConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma.is_finite() && self.sigma >= 0.0) {
            return Err(Error::Config(format!("sigma must be >= 0, got {}", self.sigma)));
        }
        if self.n_steps == 0 {
            return Err(Error::Config("n_steps must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TorusFlowConfig {
    pub k: u32,
    pub n_steps: usize,
}

impl Default for TorusFlowConfig {
    fn default() -> Self {
        Self { k: 3, n_steps: 500 }
    }
}

impl TorusFlowConfig {
    pub fn validate(&self) -> Result<()> {
        Scheduler::new(self.k)?;
        if self.n_steps == 0 {
            return Err(Error::Config("n_steps must be >= 1".into()));
        }
        Ok(())
    }
}

/// Draws `x_t = t x1 + (1 − t) x0 + σ ε`.
pub fn euclid_path_sample<R: Rng + ?Sized>(
    x0: &[f64],
    x1: &[f64],
    t: f64,
    sigma: f64,
    rng: &mut R,
) -> Result<Vec<f64>> {
    ensure_same_len(x0.len(), x1.len())?;
    check_unit_time(t)?;
    Ok(x0
        .iter()
        .zip(x1)
        .map(|(a, b)| {
            let mean = t * b + (1.0 - t) * a;
            if sigma > 0.0 {
                mean + sigma * rng.sample::<f64, _>(StandardNormal)
            } else {
                mean
            }
        })
        .collect())
}

/// Constant conditional velocity `x1 − x0`.
pub fn euclid_target_field(x0: &[f64], x1: &[f64]) -> Result<Vec<f64>> {
    ensure_same_len(x0.len(), x1.len())?;
    Ok(x0.iter().zip(x1).map(|(a, b)| b - a).collect())
}

/// Geodesic interpolant `exp_{x0}((1 − κ(t)) log_{x0}(x1))`.
pub fn torus_path(x0: Angle, x1: Angle, t: f64, k: u32) -> Result<Angle> {
    let kappa = Scheduler::new(k)?.kappa(t)?;
    if kappa == 0.0 {
        return Ok(x1);
    }
    torus_exp(x0, (1.0 - kappa) * torus_log(x0, x1))
}

/// Time derivative of [`torus_path`]: `−κ̇(t) log_{x0}(x1)`.
pub fn torus_target_field(x0: Angle, x1: Angle, t: f64, k: u32) -> Result<f64> {
    let kd = Scheduler::new(k)?.kappa_dot(t)?;
    Ok(-kd * torus_log(x0, x1))
}

/// Joint state advanced by the integrator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct FlowState {
    pub euclid: Vec<f64>,
    pub torus: Vec<Angle>,
}

/// Velocity returned by a field function, optionally with per-channel σ².
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FieldEval {
    pub euclid: Vec<f64>,
    pub torus: Vec<f64>,
    pub variance: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<FlowState>,
    /// One row per time in `times`; empty when the field reports no variance.
    pub per_step_variance: Vec<Vec<f64>>,
}

impl Trajectory {
    pub fn last(&self) -> &FlowState {
        self.states.last().expect("trajectory always holds the initial state")
    }
}

/// Uniform grid `0, 1/n, …, 1`.
pub fn uniform_grid(n_steps: usize) -> Vec<f64> {
    (0..=n_steps).map(|i| i as f64 / n_steps as f64).collect()
}

fn check_state(state: &FlowState, step: usize) -> Result<()> {
    if state.euclid.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Diverged(format!("non-finite state after step {step}")))
    }
}

/// Explicit Euler on the uniform grid. Torus components are wrapped after every
/// update. When the field reports variances, the field is also evaluated at
/// `t = 1` so the variance record covers the closed interval.
pub fn integrate_ode<F>(state0: FlowState, mut field: F, n_steps: usize) -> Result<Trajectory>
where
    F: FnMut(f64, &FlowState) -> Result<FieldEval>,
{
    if n_steps == 0 {
        return Err(Error::Config("n_steps must be >= 1".into()));
    }
    check_state(&state0, 0)?;
    let times = uniform_grid(n_steps);
    let dt = 1.0 / n_steps as f64;
    let mut states = Vec::with_capacity(n_steps + 1);
    let mut variance = Vec::new();
    let mut x = state0;
    for (step, &t) in times[..n_steps].iter().enumerate() {
        let f = field(t, &x)?;
        ensure_same_len(x.euclid.len(), f.euclid.len())?;
        ensure_same_len(x.torus.len(), f.torus.len())?;
        if let Some(v) = f.variance {
            variance.push(v);
        }
        let mut next = x.clone();
        for (xi, vi) in next.euclid.iter_mut().zip(&f.euclid) {
            *xi += dt * vi;
        }
        for (ai, vi) in next.torus.iter_mut().zip(&f.torus) {
            let raw = ai.value() + dt * vi;
            ensure_finite(raw, "torus state").map_err(|_| Error::Diverged(format!("non-finite angle after step {step}")))?;
            *ai = Angle::new(wrap_unchecked(raw))?;
        }
        check_state(&next, step + 1)?;
        states.push(std::mem::replace(&mut x, next));
    }
    if !variance.is_empty() {
        if let Some(v) = field(1.0, &x)?.variance {
            variance.push(v);
        }
        if variance.len() != times.len() {
            return Err(Error::DimensionMismatch { expected: times.len(), found: variance.len() });
        }
    }
    states.push(x);
    Ok(Trajectory { times, states, per_step_variance: variance })
}

/// `sqrt(∫ σ² dt)` by the trapezoid rule over `times`.
pub fn sigma_tot_series(times: &[f64], variance: &[f64]) -> Result<f64> {
    if variance.is_empty() {
        return Err(Error::Empty("variance record"));
    }
    ensure_same_len(times.len(), variance.len())?;
    if let Some(v) = variance.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
        return Err(Error::Domain(format!("variance {v} must be finite and >= 0")));
    }
    if times.len() == 1 {
        return Ok(variance[0].sqrt());
    }
    let integral: f64 = times
        .windows(2)
        .zip(variance.windows(2))
        .map(|(t, v)| 0.5 * (t[1] - t[0]) * (v[0] + v[1]))
        .sum();
    Ok(integral.max(0.0).sqrt())
}

/// Per-channel σ̂_tot for a recorded trajectory.
pub fn sigma_tot(trajectory: &Trajectory) -> Result<Vec<f64>> {
    let rows = &trajectory.per_step_variance;
    let first = rows.first().ok_or(Error::Empty("variance record"))?;
    let times = &trajectory.times[..rows.len()];
    (0..first.len())
        .map(|c| {
            let series: Vec<f64> = rows.iter().map(|r| r[c]).collect();
            sigma_tot_series(times, &series)
        })
        .collect()
}

/// Euler–Maruyama with isotropic diffusion `g(t)` on the Euclidean channels.
/// Diagnostic only: generation uses the deterministic integrator.
pub fn euler_maruyama<F, G, R>(
    state0: FlowState,
    mut field: F,
    diffusion: G,
    n_steps: usize,
    rng: &mut R,
) -> Result<Trajectory>
where
    F: FnMut(f64, &FlowState) -> Result<FieldEval>,
    G: Fn(f64) -> f64,
    R: Rng + ?Sized,
{
    let mut g_noise = |t: f64, x: &FlowState| -> Result<FieldEval> {
        let mut f = field(t, x)?;
        let dt = 1.0 / n_steps as f64;
        // Euler update is x + dt·v, so folding the noise into v needs a 1/sqrt(dt) scale.
        let scale = diffusion(t) / dt.sqrt();
        for v in f.euclid.iter_mut() {
            *v += scale * rng.sample::<f64, _>(StandardNormal);
        }
        f.variance = None;
        Ok(f)
    };
    integrate_ode(state0, &mut g_noise, n_steps)
}
