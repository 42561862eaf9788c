//! Synthetic pocket/ligand complexes and toy property oracles.
//!
//! Each complex has `m` context points on a sphere of radius `R = 2.6 + 0.1 m`
//! around a random center. The ligand size depends on `m`, atoms are Gaussian
//! around the center (rejecting clashes with the context), atom types follow
//! the radial position and bond types follow pairwise distance. Every context
//! point carries a torsion chain drawn from a label-specific wrapped-Gaussian
//! mixture.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::f64::consts::TAU;

use crate::error::{Error, Result};
use crate::geometry::vec3::{self, Point3};
use crate::geometry::{wrap_unchecked, Angle, AngleChain, LinkGeometry};
use crate::molecule::{no_bonds, ContextChain, PointCloudMolecule, Vocabulary};
use crate::stream_rng;

pub const LINK_LENGTH: f64 = 1.5;
pub const LINK_ANGLE: f64 = 1.95;
/// Spread of each torsion mixture component.
pub const MODE_SIGMA: f64 = 0.15;
/// Spread of ligand atoms relative to the pocket radius.
pub const LIGAND_SPREAD: f64 = 0.3;
/// Frame offsets used to seed context chains.
const FRAME_OFFSET: f64 = 1.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyDatasetConfig {
    pub n_complexes: usize,
    pub m_min: usize,
    pub m_max: usize,
    pub n_atom_types: usize,
    pub n_bond_types: usize,
    pub n_context_labels: usize,
    pub angle_modes: usize,
    pub clash_radius: f64,
    pub max_retries: usize,
    pub seed: u64,
}

impl Default for ToyDatasetConfig {
    fn default() -> Self {
        Self {
            n_complexes: 2000,
            m_min: 8,
            m_max: 16,
            n_atom_types: 4,
            n_bond_types: 3,
            n_context_labels: 4,
            angle_modes: 3,
            clash_radius: 1.2,
            max_retries: 1000,
            seed: 0,
        }
    }
}

impl ToyDatasetConfig {
    pub fn validate(&self) -> Result<()> {
        self.vocabulary().validate()?;
        if self.n_bond_types > 3 {
            return Err(Error::Config("bond bands support at most 3 bond types".into()));
        }
        if self.m_min < 3 || self.m_min > self.m_max {
            return Err(Error::Config(format!("invalid context size range [{}, {}]", self.m_min, self.m_max)));
        }
        if !(1..=4).contains(&self.angle_modes) {
            return Err(Error::Config("angle_modes must be in 1..=4".into()));
        }
        if !(self.clash_radius.is_finite() && self.clash_radius >= 0.0) {
            return Err(Error::Config("clash_radius must be >= 0".into()));
        }
        Ok(())
    }

    pub fn vocabulary(&self) -> Vocabulary {
        Vocabulary {
            n_atom_types: self.n_atom_types,
            n_bond_types: self.n_bond_types,
            n_context_labels: self.n_context_labels,
            chain_len: (0..self.n_context_labels).map(chain_len_for).max().unwrap_or(1),
        }
    }
}

/// Active torsions for a context label: 1, 2, 2, 3, 3, ...
pub fn chain_len_for(label: usize) -> usize {
    (1 + (label + 1) / 2).min(3)
}

pub fn pocket_radius(m: usize) -> f64 {
    2.6 + 0.1 * m as f64
}

/// Center of mixture component `mode` for torsion `slot` of `label`.
pub fn angle_mode(label: usize, mode: usize, slot: usize, n_modes: usize) -> f64 {
    wrap_unchecked(-2.4 + TAU / n_modes as f64 * mode as f64 + 0.9 * slot as f64 + 0.7 * label as f64)
}

/// Mixture weights proportional to `n_modes − j`.
pub fn mode_weights(n_modes: usize) -> Vec<f64> {
    let total: usize = (1..=n_modes).sum();
    (0..n_modes).map(|j| (n_modes - j) as f64 / total as f64).collect()
}

/// Radial thresholds (in units of the ligand spread) separating real atom types.
pub fn type_thresholds(n_real: usize) -> Vec<f64> {
    (0..n_real.saturating_sub(1)).map(|j| 0.9 + 0.6 * j as f64).collect()
}

/// Upper distance limit for bond type `b ≥ 1`; the band of `b` is
/// `[cutoff(b + 1), cutoff(b))` with `cutoff(K_b) = 0`.
pub fn bond_cutoff(b: usize, n_bond_types: usize) -> f64 {
    if b >= n_bond_types {
        return 0.0;
    }
    1.5 * (n_bond_types - b) as f64 / (n_bond_types - 1) as f64
}

pub fn bond_type_for_distance(d: f64, n_bond_types: usize) -> usize {
    (1..n_bond_types).rev().find(|&b| d < bond_cutoff(b, n_bond_types)).unwrap_or(0)
}

fn gaussian3<R: Rng + ?Sized>(rng: &mut R) -> Point3 {
    [rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal)]
}

fn unit_perpendicular(n: Point3) -> Point3 {
    let mut t = vec3::cross(n, [0.0, 0.0, 1.0]);
    if vec3::norm(t) < 1e-6 {
        t = vec3::cross(n, [1.0, 0.0, 0.0]);
    }
    vec3::scale(t, 1.0 / vec3::norm(t))
}

/// Seed frame for a chain rooted at `p`, pointing away from `center`.
pub fn chain_frame(p: Point3, center: Point3) -> [Point3; 3] {
    let out = vec3::sub(p, center);
    let out = vec3::scale(out, 1.0 / vec3::norm(out).max(1e-12));
    let b = vec3::add(p, vec3::scale(out, FRAME_OFFSET));
    let a = vec3::add(b, vec3::scale(unit_perpendicular(out), FRAME_OFFSET));
    [a, b, p]
}

pub fn sample_chain<R: Rng + ?Sized>(label: usize, vocab: &Vocabulary, n_modes: usize, rng: &mut R) -> Result<(AngleChain, usize)> {
    let active = chain_len_for(label);
    let weights = mode_weights(n_modes);
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut mode = n_modes - 1;
    for (j, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            mode = j;
            break;
        }
    }
    let mut angles = Vec::with_capacity(vocab.chain_len);
    for slot in 0..vocab.chain_len {
        if slot < active {
            let e: f64 = rng.sample(StandardNormal);
            angles.push(Angle::new(angle_mode(label, mode, slot, n_modes) + MODE_SIGMA * e)?);
        } else {
            angles.push(Angle::ZERO);
        }
    }
    let mask = (0..vocab.chain_len).map(|s| s < active).collect();
    let links = vec![LinkGeometry::new(LINK_LENGTH, LINK_ANGLE)?; vocab.chain_len];
    Ok((AngleChain::new(angles, mask, links)?, mode))
}

/// Number of rejected placements while building a complex.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlacementStats {
    pub rejections: usize,
}

/// Builds complex `index` from its own RNG stream.
pub fn generate_complex(cfg: &ToyDatasetConfig, index: u64) -> Result<(PointCloudMolecule, PlacementStats)> {
    let vocab = cfg.vocabulary();
    let mut rng = stream_rng(cfg.seed, index);
    let m = rng.gen_range(cfg.m_min..=cfg.m_max);
    let radius = pocket_radius(m);
    let center: Point3 = [rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)];
    let mut context = Vec::with_capacity(m);
    let mut labels = Vec::with_capacity(m);
    let mut chains = Vec::with_capacity(m);
    for _ in 0..m {
        let d = gaussian3(&mut rng);
        let dir = vec3::scale(d, 1.0 / vec3::norm(d).max(1e-12));
        let p = vec3::add(center, vec3::scale(dir, radius));
        let label = rng.gen_range(0..cfg.n_context_labels);
        let (chain, _) = sample_chain(label, &vocab, cfg.angle_modes, &mut rng)?;
        chains.push(ContextChain { frame: chain_frame(p, center), chain });
        context.push(p);
        labels.push(label);
    }

    let noise: f64 = rng.sample(StandardNormal);
    let n = ((0.75 * m as f64 + 1.0 + 0.8 * noise).round() as i64).clamp(3, 16) as usize;
    let spread = LIGAND_SPREAD * radius;
    let thresholds = type_thresholds(vocab.n_real_types());
    let mut stats = PlacementStats::default();
    let mut coords = Vec::with_capacity(n);
    let mut types = Vec::with_capacity(n);
    for _ in 0..n {
        let mut placed = None;
        for _ in 0..cfg.max_retries {
            let x = vec3::add(center, vec3::scale(gaussian3(&mut rng), spread));
            let clash = context.iter().any(|c| vec3::dist(*c, x) < cfg.clash_radius);
            if clash {
                stats.rejections += 1;
            } else {
                placed = Some(x);
                break;
            }
        }
        let x = placed.ok_or_else(|| Error::Config(format!("complex {index}: atom placement failed after {} retries", cfg.max_retries)))?;
        let r = vec3::dist(x, center) / spread;
        types.push(thresholds.iter().filter(|&&t| t <= r).count());
        coords.push(x);
    }
    let mut bonds = no_bonds(n);
    for i in 0..n {
        for j in i + 1..n {
            let b = bond_type_for_distance(vec3::dist(coords[i], coords[j]), cfg.n_bond_types);
            bonds[i][j] = b;
            bonds[j][i] = b;
        }
    }
    let mol = PointCloudMolecule {
        id: index,
        coords,
        atom_types: types,
        bonds,
        context,
        context_labels: labels,
        context_chains: Some(chains),
    };
    Ok((mol, stats))
}

pub fn generate_dataset(cfg: &ToyDatasetConfig) -> Result<Vec<PointCloudMolecule>> {
    cfg.validate()?;
    (0..cfg.n_complexes as u64).map(|i| generate_complex(cfg, i).map(|(m, _)| m)).collect()
}

/// Copy with context points (and chain frames) scaled about their centroid.
pub fn scale_context(mol: &PointCloudMolecule, factor: f64) -> PointCloudMolecule {
    let c = mol.context_center();
    let mut out = mol.clone();
    out.context = mol.context.iter().map(|p| vec3::add(c, vec3::scale(vec3::sub(*p, c), factor))).collect();
    if let Some(chains) = &mut out.context_chains {
        for (ch, p) in chains.iter_mut().zip(&out.context) {
            ch.frame = chain_frame(*p, c);
        }
    }
    out
}

pub fn radius_of_gyration(coords: &[Point3]) -> f64 {
    match vec3::centroid(coords) {
        None => 0.0,
        Some(c) => (coords.iter().map(|p| vec3::dot(vec3::sub(*p, c), vec3::sub(*p, c))).sum::<f64>() / coords.len() as f64).sqrt(),
    }
}

/// Negative radius of gyration of the real atoms.
pub fn compactness(mol: &PointCloudMolecule) -> f64 {
    -radius_of_gyration(&mol.coords)
}

/// `−(ln K − H)` over real atom types; 0 for a uniform histogram.
pub fn type_balance(mol: &PointCloudMolecule, vocab: &Vocabulary) -> f64 {
    let k = vocab.n_real_types();
    let mut counts = vec![0.0f64; k];
    let mut n = 0.0f64;
    for &t in &mol.atom_types {
        if t < k {
            counts[t] += 1.0;
            n += 1.0;
        }
    }
    if n == 0.0 {
        return -(k as f64).ln();
    }
    let h: f64 = counts.iter().filter(|c| **c > 0.0).map(|c: &f64| -(c / n) * (c / n).ln()).sum();
    -((k as f64).ln() - h)
}

/// Fraction of atoms closer than `clash_radius` to any context point.
pub fn clash_score(mol: &PointCloudMolecule, clash_radius: f64) -> f64 {
    if mol.coords.is_empty() {
        return 0.0;
    }
    let hits = mol
        .coords
        .iter()
        .filter(|x| mol.context.iter().any(|c| vec3::dist(*c, **x) < clash_radius))
        .count();
    hits as f64 / mol.coords.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Properties {
    pub compactness: f64,
    pub type_balance: f64,
    pub clash_score: f64,
}

impl Properties {
    pub fn default_names() -> [&'static str; 3] {
        ["compactness", "type_balance", "clash_score"]
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        match name {
            "compactness" => Some(self.compactness),
            "type_balance" => Some(self.type_balance),
            "clash_score" => Some(self.clash_score),
            _ => None,
        }
    }
}

pub fn property_oracles(mol: &PointCloudMolecule, vocab: &Vocabulary, clash_radius: f64) -> Properties {
    Properties {
        compactness: compactness(mol),
        type_balance: type_balance(mol, vocab),
        clash_score: clash_score(mol, clash_radius),
    }
}

/// Structural validity: at least one atom, no clashes, and every pair's bond type
/// consistent with its distance band up to `tol`.
pub fn is_valid(mol: &PointCloudMolecule, vocab: &Vocabulary, clash_radius: f64, tol: f64) -> bool {
    if mol.coords.is_empty() || clash_score(mol, clash_radius) > 0.0 {
        return false;
    }
    let kb = vocab.n_bond_types;
    for i in 0..mol.n_atoms() {
        for j in i + 1..mol.n_atoms() {
            let d = vec3::dist(mol.coords[i], mol.coords[j]);
            let b = mol.bonds[i][j];
            let hi = if b == 0 { f64::INFINITY } else { bond_cutoff(b, kb) };
            let lo = bond_cutoff(b + 1, kb);
            if d < lo - tol || d >= hi + tol {
                return false;
            }
        }
    }
    true
}

/// Index of the mixture component closest to `angles` over active slots, and
/// the largest per-slot deviation from it.
pub fn nearest_mode(label: usize, chain: &AngleChain, n_modes: usize) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for mode in 0..n_modes {
        let dev = (0..chain.len())
            .filter(|&s| chain.mask[s])
            .map(|s| {
                let d = chain.angles[s].value() - angle_mode(label, mode, s, n_modes);
                d.sin().atan2(d.cos()).abs()
            })
            .fold(0.0, f64::max);
        if dev < best.1 {
            best = (mode, dev);
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(n: usize) -> ToyDatasetConfig {
        ToyDatasetConfig { n_complexes: n, ..Default::default() }
    }

    #[test]
    fn deterministic() {
        let a = serde_json::to_string(&generate_dataset(&small(20)).unwrap()).unwrap();
        let b = serde_json::to_string(&generate_dataset(&small(20)).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn molecules_satisfy_invariants() {
        let cfg = small(300);
        let vocab = cfg.vocabulary();
        for m in generate_dataset(&cfg).unwrap() {
            m.validate(&vocab).unwrap();
            assert!((3..=16).contains(&m.n_atoms()));
            assert_eq!(clash_score(&m, cfg.clash_radius), 0.0);
            assert!(is_valid(&m, &vocab, cfg.clash_radius, 0.0));
            assert!(m.atom_types.iter().all(|&t| t < vocab.virtual_type()));
        }
    }

    #[test]
    fn zero_clash_radius_never_rejects() {
        let cfg = ToyDatasetConfig { clash_radius: 0.0, ..small(50) };
        for i in 0..50 {
            assert_eq!(generate_complex(&cfg, i).unwrap().1.rejections, 0);
        }
    }

    #[test]
    fn infeasible_placement_is_config_error() {
        let cfg = ToyDatasetConfig { clash_radius: 50.0, max_retries: 10, ..small(1) };
        assert!(matches!(generate_complex(&cfg, 0), Err(Error::Config(_))));
    }

    #[test]
    fn size_correlates_with_context() {
        let cfg = small(10_000);
        let data = generate_dataset(&cfg).unwrap();
        let n: Vec<f64> = data.iter().map(|m| m.n_atoms() as f64).collect();
        let m: Vec<f64> = data.iter().map(|m| m.n_context() as f64).collect();
        let (mn, mm) = (crate::evaluation::mean(&n), crate::evaluation::mean(&m));
        let cov: f64 = n.iter().zip(&m).map(|(a, b)| (a - mn) * (b - mm)).sum();
        let vn: f64 = n.iter().map(|a| (a - mn).powi(2)).sum();
        let vm: f64 = m.iter().map(|b| (b - mm).powi(2)).sum();
        assert!(cov / (vn * vm).sqrt() > 0.5);
    }

    #[test]
    fn property_examples() {
        let vocab = small(1).vocabulary();
        let mut m = generate_complex(&small(1), 0).unwrap().0;
        m.coords = vec![[1.0, 2.0, 3.0]];
        m.atom_types = vec![0];
        m.bonds = no_bonds(1);
        assert_eq!(compactness(&m), 0.0);
        m.coords = vec![[0.0; 3], [2.0, 0.0, 0.0]];
        m.atom_types = vec![0, 1];
        m.bonds = no_bonds(2);
        assert!((radius_of_gyration(&m.coords) - 1.0).abs() < 1e-15);
        m.atom_types = vec![0, 1, 2];
        assert!(type_balance(&m, &vocab).abs() < 1e-15);
        m.atom_types = vec![0, 0, 0];
        assert!((type_balance(&m, &vocab) + 3f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn modes_are_separated() {
        for label in 0..4 {
            for s in 0..3 {
                for a in 0..3 {
                    for b in a + 1..3 {
                        let d = angle_mode(label, a, s, 3) - angle_mode(label, b, s, 3);
                        assert!(d.sin().atan2(d.cos()).abs() > 2.0);
                    }
                }
            }
        }
        assert!(mode_weights(3).iter().sum::<f64>() - 1.0 < 1e-15);
    }

    #[test]
    fn chains_come_from_their_modes() {
        let cfg = small(50);
        let vocab = cfg.vocabulary();
        for mol in generate_dataset(&cfg).unwrap() {
            for (c, &l) in mol.context_chains.as_ref().unwrap().iter().zip(&mol.context_labels) {
                assert_eq!(c.chain.n_active(), chain_len_for(l));
                let (_, dev) = nearest_mode(l, &c.chain, cfg.angle_modes);
                assert!(dev < 6.0 * MODE_SIGMA);
                assert_eq!(c.chain.len(), vocab.chain_len);
            }
        }
    }

    #[test]
    fn bond_bands() {
        assert_eq!(bond_type_for_distance(0.5, 3), 2);
        assert_eq!(bond_type_for_distance(1.0, 3), 1);
        assert_eq!(bond_type_for_distance(1.6, 3), 0);
        assert_eq!(bond_type_for_distance(1.0, 2), 1);
    }
}
