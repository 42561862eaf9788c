//! Natural Extension Reference Frame: placing points from (bond length,
//! bond angle, torsion) internal coordinates and measuring them back.

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use super::vec3::{self, Point3};
use super::{wrap_unchecked, Angle};
use crate::error::{ensure_finite, ensure_same_len, Error, Result};

/// Minimum normalised cross-product norm for a usable frame.
pub const COLLINEAR_TOL: f64 = 1e-10;

/// Fixed per-link geometry: distance from the previous point and the angle
/// at the previous point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkGeometry {
    pub bond_length: f64,
    pub bond_angle: f64,
}

impl LinkGeometry {
    pub fn new(bond_length: f64, bond_angle: f64) -> Result<Self> {
        let g = Self { bond_length, bond_angle };
        g.validate()?;
        Ok(g)
    }

    fn validate(&self) -> Result<()> {
        if !(self.bond_length.is_finite() && self.bond_length > 0.0) {
            return Err(Error::Domain(format!("bond length {} must be positive", self.bond_length)));
        }
        if !(self.bond_angle > 0.0 && self.bond_angle < PI) {
            return Err(Error::Domain(format!("bond angle {} outside (0, π)", self.bond_angle)));
        }
        Ok(())
    }
}

/// A masked chain of torsion angles with the geometry needed to rebuild it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AngleChain {
    pub angles: Vec<Angle>,
    pub mask: Vec<bool>,
    pub links: Vec<LinkGeometry>,
}

impl AngleChain {
    pub fn new(angles: Vec<Angle>, mask: Vec<bool>, links: Vec<LinkGeometry>) -> Result<Self> {
        let chain = Self { angles, mask, links };
        chain.validate()?;
        Ok(chain)
    }

    pub fn validate(&self) -> Result<()> {
        ensure_same_len(self.angles.len(), self.mask.len())?;
        ensure_same_len(self.angles.len(), self.links.len())?;
        self.links.iter().try_for_each(LinkGeometry::validate)
    }

    pub fn len(&self) -> usize {
        self.angles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.angles.is_empty()
    }

    /// Torsion actually used for reconstruction; masked entries contribute 0.
    pub fn effective_torsion(&self, i: usize) -> f64 {
        if self.mask[i] {
            self.angles[i].value()
        } else {
            0.0
        }
    }

    pub fn n_active(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }
}

fn frame_basis(a: Point3, b: Point3, c: Point3) -> Result<(Point3, Point3, Point3)> {
    let ab = vec3::sub(b, a);
    let bc = vec3::sub(c, b);
    let (lab, lbc) = (vec3::norm(ab), vec3::norm(bc));
    if lab < COLLINEAR_TOL || lbc < COLLINEAR_TOL {
        return Err(Error::DegenerateFrame(0.0));
    }
    let n = vec3::cross(ab, bc);
    let ln = vec3::norm(n);
    let normalised = ln / (lab * lbc);
    if !(normalised > COLLINEAR_TOL) {
        return Err(Error::DegenerateFrame(normalised));
    }
    let bc_hat = vec3::scale(bc, 1.0 / lbc);
    let n_hat = vec3::scale(n, 1.0 / ln);
    let m_hat = vec3::cross(n_hat, bc_hat);
    Ok((bc_hat, m_hat, n_hat))
}

/// Places `d` so that `|d − c| = r`, `∠(b, c, d) = theta` and the dihedral
/// `(a, b, c, d) = phi`.
pub fn nerf_place_atom(a: Point3, b: Point3, c: Point3, r: f64, theta: f64, phi: f64) -> Result<Point3> {
    ensure_finite(r, "bond length")?;
    ensure_finite(theta, "bond angle")?;
    ensure_finite(phi, "torsion")?;
    let (bc_hat, m_hat, n_hat) = frame_basis(a, b, c)?;
    let local = [
        -r * theta.cos(),
        r * theta.sin() * phi.cos(),
        r * theta.sin() * phi.sin(),
    ];
    let offset = vec3::add(
        vec3::add(vec3::scale(bc_hat, local[0]), vec3::scale(m_hat, local[1])),
        vec3::scale(n_hat, local[2]),
    );
    Ok(vec3::add(c, offset))
}

/// Angle at `b` between `a − b` and `c − b`.
pub fn measure_angle(a: Point3, b: Point3, c: Point3) -> f64 {
    let u = vec3::sub(a, b);
    let v = vec3::sub(c, b);
    let cos = vec3::dot(u, v) / (vec3::norm(u) * vec3::norm(v));
    vec3::norm(vec3::cross(u, v)).atan2(cos * vec3::norm(u) * vec3::norm(v))
}

/// Signed dihedral of `(a, b, c, d)` in `(-π, π]`.
pub fn measure_dihedral(a: Point3, b: Point3, c: Point3, d: Point3) -> f64 {
    let b1 = vec3::sub(b, a);
    let b2 = vec3::sub(c, b);
    let b3 = vec3::sub(d, c);
    let n1 = vec3::cross(b1, b2);
    let n2 = vec3::cross(b2, b3);
    let y = vec3::norm(b2) * vec3::dot(b1, n2);
    let x = vec3::dot(n1, n2);
    y.atan2(x)
}

/// Rebuilds Cartesian points for a chain starting from a three-point seed frame.
/// Output has one point per chain entry.
pub fn chain_to_coords(chain: &AngleChain, frame: &[Point3; 3]) -> Result<Vec<Point3>> {
    chain.validate()?;
    let mut out = Vec::with_capacity(chain.len());
    let [mut a, mut b, mut c] = *frame;
    for i in 0..chain.len() {
        let link = chain.links[i];
        let d = nerf_place_atom(a, b, c, link.bond_length, link.bond_angle, chain.effective_torsion(i))?;
        out.push(d);
        (a, b, c) = (b, c, d);
    }
    Ok(out)
}

/// Measures lengths, angles and torsions of `points` against the seed frame.
/// Every entry of the returned chain is unmasked.
pub fn coords_to_angles(points: &[Point3], frame: &[Point3; 3]) -> Result<AngleChain> {
    let mut angles = Vec::with_capacity(points.len());
    let mut links = Vec::with_capacity(points.len());
    let [mut a, mut b, mut c] = *frame;
    for &d in points {
        // the same degeneracy rule as placement
        frame_basis(a, b, c)?;
        let r = vec3::dist(c, d);
        if r < COLLINEAR_TOL {
            return Err(Error::DegenerateFrame(r));
        }
        let theta = measure_angle(b, c, d);
        if !(theta > 0.0 && theta < PI) {
            return Err(Error::DegenerateFrame(theta));
        }
        angles.push(Angle(wrap_unchecked(measure_dihedral(a, b, c, d))));
        links.push(LinkGeometry { bond_length: r, bond_angle: theta });
        (a, b, c) = (b, c, d);
    }
    let mask = vec![true; angles.len()];
    Ok(AngleChain { angles, mask, links })
}
