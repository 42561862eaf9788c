//! Markov bridges for categorical variables pinned at a start state `z0` and an
//! end state `y`.
//!
//! States are category indices; one-hot vectors appear only in the matrix
//! constructors. Matrices are column-stochastic: `Q[i][j]` is the probability
//! of moving to `i` from `j`.
//!
//! Grid index `i` corresponds to time `i / N`. The marginal at index `i ≥ 1`
//! is `Cat(Q̄_{(i−1)/N} z0)` with `β̄(s) = 1 − s`, and the final transition is
//! pinned (`β = 0`) so every chain ends at `y`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, ensure_same_len, Error, Result};

/// Floor used inside logarithms.
pub const LOG_EPS: f64 = 1e-12;
/// Value reported when the loss would otherwise exceed it.
pub const LOSS_CAP: f64 = 1e6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Categorical {
    probs: Vec<f64>,
}

impl Categorical {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.len() < 2 {
            return Err(Error::Domain(format!("categorical needs K >= 2, got {}", probs.len())));
        }
        if probs.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(Error::Domain("probabilities must be finite and >= 0".into()));
        }
        let s: f64 = probs.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(Error::Domain(format!("probabilities sum to {s}")));
        }
        Ok(Self { probs })
    }

    pub fn point_mass(k: usize, idx: usize) -> Result<Self> {
        check_index(idx, k)?;
        let mut p = vec![0.0; k];
        p[idx] = 1.0;
        Self::new(p)
    }

    pub fn uniform(k: usize) -> Result<Self> {
        Self::new(vec![1.0 / k as f64; k])
    }

    /// Normalises nonnegative weights.
    pub fn from_weights(w: &[f64]) -> Result<Self> {
        let s: f64 = w.iter().sum();
        if !(s > 0.0 && s.is_finite()) {
            return Err(Error::Domain("weights must have a positive finite sum".into()));
        }
        Self::new(w.iter().map(|v| v / s).collect())
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn k(&self) -> usize {
        self.probs.len()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        sample_index(&self.probs, rng)
    }
}

pub(crate) fn sample_index<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // roundoff: fall back to the last category with mass
    probs.iter().rposition(|p| *p > 0.0).unwrap_or(probs.len() - 1)
}

fn check_index(idx: usize, k: usize) -> Result<()> {
    if k < 2 {
        return Err(Error::Domain(format!("K must be >= 2, got {k}")));
    }
    if idx >= k {
        return Err(Error::Domain(format!("category {idx} out of range for K={k}")));
    }
    Ok(())
}

fn check_beta(beta: f64) -> Result<()> {
    ensure_finite(beta, "beta")?;
    if (0.0..=1.0).contains(&beta) {
        Ok(())
    } else {
        Err(Error::Domain(format!("beta {beta} outside [0, 1]")))
    }
}

fn absorbing_matrix(y: usize, k: usize, beta: f64) -> Result<Vec<Vec<f64>>> {
    check_index(y, k)?;
    check_beta(beta)?;
    Ok((0..k)
        .map(|i| {
            (0..k)
                .map(|j| {
                    let eye = if i == j { beta } else { 0.0 };
                    let pull = if i == y { 1.0 - beta } else { 0.0 };
                    eye + pull
                })
                .collect()
        })
        .collect())
}

/// `Q = β I + (1 − β) y 1ᵀ`.
pub fn transition_matrix(y: usize, k: usize, beta: f64) -> Result<Vec<Vec<f64>>> {
    absorbing_matrix(y, k, beta)
}

/// `Q̄ = β̄ I + (1 − β̄) y 1ᵀ`.
pub fn cumulative_matrix(y: usize, k: usize, beta_bar: f64) -> Result<Vec<Vec<f64>>> {
    absorbing_matrix(y, k, beta_bar)
}

/// Matrix-vector product for column-stochastic matrices.
pub fn apply(m: &[Vec<f64>], v: &[f64]) -> Result<Vec<f64>> {
    ensure_same_len(m.len(), v.len())?;
    Ok(m.iter().map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum()).collect())
}

/// Linear `β̄(s) = 1 − s` on an `N`-step grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BridgeSchedule {
    pub n_steps: usize,
}

impl BridgeSchedule {
    pub fn new(n_steps: usize) -> Result<Self> {
        if n_steps < 1 {
            return Err(Error::Config("bridge needs at least one step".into()));
        }
        Ok(Self { n_steps })
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.n_steps as f64
    }

    pub fn beta_bar(&self, s: f64) -> f64 {
        1.0 - s
    }

    /// Grid index of `t`, or an off-grid error.
    pub fn index_of(&self, t: f64) -> Result<usize> {
        let x = t * self.n_steps as f64;
        let i = x.round();
        if !(t.is_finite() && (x - i).abs() < 1e-9 && i >= 0.0 && i <= self.n_steps as f64) {
            return Err(Error::OffGrid(t));
        }
        Ok(i as usize)
    }

    pub fn time_of(&self, i: usize) -> f64 {
        i as f64 / self.n_steps as f64
    }

    /// Probability of still sitting at `z0` (when `z0 ≠ y`) at grid index `i`.
    pub fn marginal_beta_bar(&self, i: usize) -> f64 {
        if i == 0 {
            1.0
        } else if i >= self.n_steps {
            0.0
        } else {
            self.beta_bar((i - 1) as f64 / self.n_steps as f64)
        }
    }

    /// `β` of the transition from index `i` to `i + 1`; the last one is pinned to 0.
    pub fn step_beta(&self, i: usize) -> f64 {
        if i + 1 >= self.n_steps {
            0.0
        } else {
            self.marginal_beta_bar(i + 1) / self.marginal_beta_bar(i)
        }
    }
}

/// Closed-form `p(z_t | z0, y)`.
pub fn bridge_marginal(z0: usize, y: usize, k: usize, t: f64, schedule: &BridgeSchedule) -> Result<Categorical> {
    check_index(z0, k)?;
    check_index(y, k)?;
    let bb = schedule.marginal_beta_bar(schedule.index_of(t)?);
    let mut p = vec![0.0; k];
    p[z0] += bb;
    p[y] += 1.0 - bb;
    Categorical::new(p)
}

/// Draws `z_{t+Δt} ~ Cat(Q_t z_t)`.
pub fn bridge_step_sample<R: Rng + ?Sized>(
    z_t: usize,
    y: usize,
    k: usize,
    t: f64,
    schedule: &BridgeSchedule,
    rng: &mut R,
) -> Result<usize> {
    check_index(z_t, k)?;
    check_index(y, k)?;
    let i = schedule.index_of(t)?;
    if i >= schedule.n_steps {
        return Err(Error::Domain("no transition out of t = 1".into()));
    }
    let beta = schedule.step_beta(i);
    if z_t == y || beta == 1.0 {
        return Ok(z_t);
    }
    if beta == 0.0 {
        return Ok(y);
    }
    Ok(if rng.gen::<f64>() < beta { z_t } else { y })
}

/// Next-step distribution `β z_t + (1 − β) ŷ`, the transition kernel averaged over
/// a distribution of end states.
pub fn mixed_kernel(z_t: usize, y_probs: &[f64], beta: f64) -> Vec<f64> {
    let mut q: Vec<f64> = y_probs.iter().map(|p| (1.0 - beta) * p).collect();
    q[z_t] += beta;
    q
}

/// Draws the next state using a predicted end-state distribution.
pub fn predicted_step_sample<R: Rng + ?Sized>(
    z_t: usize,
    y_probs: &[f64],
    t: f64,
    schedule: &BridgeSchedule,
    rng: &mut R,
) -> Result<usize> {
    check_index(z_t, y_probs.len())?;
    let i = schedule.index_of(t)?;
    if i >= schedule.n_steps {
        return Err(Error::Domain("no transition out of t = 1".into()));
    }
    Ok(sample_index(&mixed_kernel(z_t, y_probs, schedule.step_beta(i)), rng))
}

/// `KL(p ‖ q)` in nats with the `LOG_EPS` floor; terms with `p = 0` vanish.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    ensure_same_len(p.len(), q.len())?;
    Ok(p
        .iter()
        .zip(q)
        .filter(|(pi, _)| **pi > 0.0)
        .map(|(pi, qi)| pi * (pi.max(LOG_EPS).ln() - qi.max(LOG_EPS).ln()))
        .sum::<f64>()
        .max(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MbmLoss {
    pub value: f64,
    /// True when the raw value exceeded `LOSS_CAP` and was clipped.
    pub capped: bool,
}

/// `N · KL(p(z_{t+Δt} | z_t, y) ‖ q_θ(z_{t+Δt} | z_t))`.
pub fn mbm_loss(
    predicted: &Categorical,
    z_t: usize,
    y_true: usize,
    t: f64,
    schedule: &BridgeSchedule,
) -> Result<MbmLoss> {
    let k = predicted.k();
    check_index(z_t, k)?;
    check_index(y_true, k)?;
    let i = schedule.index_of(t)?;
    if i >= schedule.n_steps {
        return Err(Error::Domain("no transition out of t = 1".into()));
    }
    let beta = schedule.step_beta(i);
    let mut y1 = vec![0.0; k];
    y1[y_true] = 1.0;
    let p = mixed_kernel(z_t, &y1, beta);
    let q = mixed_kernel(z_t, predicted.probs(), beta);
    let raw = schedule.n_steps as f64 * kl_divergence(&p, &q)?;
    Ok(if raw > LOSS_CAP {
        MbmLoss { value: LOSS_CAP, capped: true }
    } else {
        MbmLoss { value: raw, capped: false }
    })
}
