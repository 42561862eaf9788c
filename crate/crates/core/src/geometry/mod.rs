//! Flat-torus arithmetic, the polynomial time scheduler, and internal
//! coordinate (NERF) conversions.
//!
//! Angles live on `[-π, π)`. The wrap convention is half-open, so `π` maps to
//! `-π`. Tangent vectors are plain reals; the log map returns the signed
//! shortest displacement in `(-π, π]`.

mod nerf;
pub mod vec3;

pub use nerf::{
    chain_to_coords, coords_to_angles, measure_angle, measure_dihedral, nerf_place_atom,
    AngleChain, LinkGeometry, COLLINEAR_TOL,
};
pub use vec3::Point3;

use serde::{Deserialize, Serialize};
use std::f64::consts::{PI, TAU};

use crate::error::{ensure_finite, Error, Result};

/// A point on the circle, stored in `[-π, π)`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Angle(f64);

impl Angle {
    /// Wraps an arbitrary finite real onto the circle.
    pub fn new(alpha: f64) -> Result<Self> {
        wrap(alpha)
    }

    pub fn value(self) -> f64 {
        self.0
    }

    pub const ZERO: Angle = Angle(0.0);
}

impl TryFrom<f64> for Angle {
    type Error = Error;

    fn try_from(value: f64) -> Result<Self> {
        wrap(value)
    }
}

impl From<Angle> for f64 {
    fn from(a: Angle) -> f64 {
        a.0
    }
}

/// `((alpha + π) mod 2π) − π`. Values already in range are returned untouched,
/// which makes the map exactly idempotent.
pub fn wrap(alpha: f64) -> Result<Angle> {
    ensure_finite(alpha, "angle")?;
    Ok(Angle(wrap_unchecked(alpha)))
}

#[inline]
pub(crate) fn wrap_unchecked(alpha: f64) -> f64 {
    if (-PI..PI).contains(&alpha) {
        return alpha;
    }
    let r = (alpha + PI).rem_euclid(TAU) - PI;
    // rem_euclid may round up to exactly 2π
    if r >= PI {
        -PI
    } else {
        r
    }
}

/// Log map of the flat torus: the signed shortest displacement from `x` to `y`.
pub fn torus_log(x: Angle, y: Angle) -> f64 {
    torus_log_raw(x.0, y.0)
}

#[inline]
pub(crate) fn torus_log_raw(x: f64, y: f64) -> f64 {
    let d = y - x;
    d.sin().atan2(d.cos())
}

/// Exp map of the flat torus: `wrap(x + u)`.
pub fn torus_exp(x: Angle, u: f64) -> Result<Angle> {
    ensure_finite(u, "tangent vector")?;
    Ok(Angle(wrap_unchecked(x.0 + u)))
}

/// Geodesic distance on the circle.
pub fn geodesic_distance(x: Angle, y: Angle) -> f64 {
    torus_log(x, y).abs()
}

/// `κ(t) = (1 − t)^k`.
pub fn kappa(t: f64, k: u32) -> Result<f64> {
    Scheduler::new(k)?.kappa(t)
}

/// Polynomial scheduler controlling how quickly the geodesic distance to the
/// endpoint shrinks. `κ(0) = 1` and `κ(1) = 0` hold exactly for every `k ≥ 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scheduler {
    pub k: u32,
}

impl Default for Scheduler {
    fn default() -> Self {
        Self { k: 3 }
    }
}

impl Scheduler {
    pub fn new(k: u32) -> Result<Self> {
        if k == 0 {
            return Err(Error::Domain("scheduler exponent k must be >= 1".into()));
        }
        Ok(Self { k })
    }

    pub fn kappa(&self, t: f64) -> Result<f64> {
        check_unit_time(t)?;
        Ok((1.0 - t).powi(self.k as i32))
    }

    /// `dκ/dt = −k (1 − t)^{k−1}`.
    pub fn kappa_dot(&self, t: f64) -> Result<f64> {
        check_unit_time(t)?;
        Ok(-(self.k as f64) * (1.0 - t).powi(self.k as i32 - 1))
    }
}

pub(crate) fn check_unit_time(t: f64) -> Result<()> {
    if (0.0..=1.0).contains(&t) {
        Ok(())
    } else {
        Err(Error::Domain(format!("time {t} outside [0, 1]")))
    }
}
