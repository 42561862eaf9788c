//! Virtual-node augmentation, the size histogram `p(N|M)`, and prior category
//! distributions.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bridges::sample_index;
use crate::error::{Error, Result};
use crate::geometry::vec3;
use crate::molecule::{PointCloudMolecule, Vocabulary};

/// Appends `n_virt ~ U{0..n_max}` virtual atoms at the ligand centroid with no bonds.
/// Returns the augmented sample and `n_virt`.
pub fn add_virtual_nodes<R: Rng + ?Sized>(
    sample: &PointCloudMolecule,
    vocab: &Vocabulary,
    n_max: usize,
    rng: &mut R,
) -> (PointCloudMolecule, usize) {
    if n_max == 0 {
        return (sample.clone(), 0);
    }
    let k = rng.gen_range(0..=n_max);
    (with_virtual_nodes(sample, vocab, k), k)
}

/// Appends exactly `k` virtual atoms.
pub fn with_virtual_nodes(sample: &PointCloudMolecule, vocab: &Vocabulary, k: usize) -> PointCloudMolecule {
    let mut out = sample.clone();
    if k == 0 {
        return out;
    }
    let com = vec3::centroid(&sample.coords).unwrap_or_else(|| sample.context_center());
    let n = sample.n_atoms() + k;
    for row in &mut out.bonds {
        row.resize(n, 0);
    }
    out.bonds.resize(n, vec![0; n]);
    out.coords.extend(std::iter::repeat(com).take(k));
    out.atom_types.extend(std::iter::repeat(vocab.virtual_type()).take(k));
    out
}

/// Empirical `p(N | M)` of ligand size given context size.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SizeHistogram {
    /// `counts[m][n]`
    pub counts: BTreeMap<usize, BTreeMap<usize, u64>>,
}

impl SizeHistogram {
    pub fn from_dataset(data: &[PointCloudMolecule]) -> Self {
        let mut h = Self::default();
        for mol in data {
            h.add(mol.n_context(), mol.n_atoms());
        }
        h
    }

    pub fn add(&mut self, m: usize, n: usize) {
        *self.counts.entry(m).or_default().entry(n).or_default() += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.values().flat_map(|r| r.values()).sum()
    }

    /// Row for `m`, or the marginal over all context sizes when `m` was never seen.
    pub fn conditional(&self, m: usize) -> Result<BTreeMap<usize, u64>> {
        if let Some(row) = self.counts.get(&m).filter(|r| r.values().sum::<u64>() > 0) {
            return Ok(row.clone());
        }
        let mut marginal = BTreeMap::new();
        for row in self.counts.values() {
            for (&n, &c) in row {
                *marginal.entry(n).or_default() += c;
            }
        }
        if marginal.values().sum::<u64>() == 0 {
            return Err(Error::Config("size histogram is empty".into()));
        }
        Ok(marginal)
    }

    pub fn sample<R: Rng + ?Sized>(&self, m: usize, rng: &mut R) -> Result<usize> {
        let row = self.conditional(m)?;
        let total: u64 = row.values().sum();
        let probs: Vec<f64> = row.values().map(|&c| c as f64 / total as f64).collect();
        let sizes: Vec<usize> = row.keys().copied().collect();
        Ok(sizes[sample_index(&probs, rng)])
    }
}

/// Node count for generation: `N ~ p(N | m)` plus `n_max / 2` virtual slack.
pub fn sample_size<R: Rng + ?Sized>(m: usize, hist: &SizeHistogram, n_max: usize, rng: &mut R) -> Result<usize> {
    Ok(hist.sample(m, rng)? + n_max / 2)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorKind {
    Uniform,
    #[default]
    Marginal,
}

/// Start distributions of the type and bond bridges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryPriors {
    pub atom: Vec<f64>,
    pub bond: Vec<f64>,
}

impl CategoryPriors {
    pub fn uniform(vocab: &Vocabulary) -> Self {
        Self {
            atom: vec![1.0 / vocab.n_atom_types as f64; vocab.n_atom_types],
            bond: vec![1.0 / vocab.n_bond_types as f64; vocab.n_bond_types],
        }
    }

    /// Type and bond frequencies over the training set, each molecule padded
    /// with the expected `n_max / 2` virtual atoms. Every category keeps a
    /// pseudo-count of one.
    pub fn marginal(data: &[PointCloudMolecule], vocab: &Vocabulary, n_max: usize) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::Empty("training set"));
        }
        let mut atom = vec![1.0; vocab.n_atom_types];
        let mut bond = vec![1.0; vocab.n_bond_types];
        for mol in data {
            let padded = with_virtual_nodes(mol, vocab, n_max / 2);
            for &t in &padded.atom_types {
                atom[t] += 1.0;
            }
            for i in 0..padded.n_atoms() {
                for j in i + 1..padded.n_atoms() {
                    bond[padded.bonds[i][j]] += 1.0;
                }
            }
        }
        let norm = |v: &mut Vec<f64>| {
            let s: f64 = v.iter().sum();
            v.iter_mut().for_each(|x| *x /= s);
        };
        norm(&mut atom);
        norm(&mut bond);
        Ok(Self { atom, bond })
    }

    pub fn build(kind: PriorKind, data: &[PointCloudMolecule], vocab: &Vocabulary, n_max: usize) -> Result<Self> {
        match kind {
            PriorKind::Uniform => Ok(Self::uniform(vocab)),
            PriorKind::Marginal => Self::marginal(data, vocab, n_max),
        }
    }

    pub fn validate(&self, vocab: &Vocabulary) -> Result<()> {
        for (p, k) in [(&self.atom, vocab.n_atom_types), (&self.bond, vocab.n_bond_types)] {
            crate::bridges::Categorical::new(p.clone())?;
            if p.len() != k {
                return Err(Error::DimensionMismatch { expected: k, found: p.len() });
            }
        }
        Ok(())
    }
}
