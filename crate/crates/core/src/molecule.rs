//! Point-cloud complexes: a ligand (coordinates, atom types, bond matrix) and
//! the context points it is conditioned on.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_same_len, Error, Result};
use crate::geometry::vec3::{self, Point3};
use crate::geometry::AngleChain;

/// Category counts shared by the data, the model and the samplers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    /// Atom types including the trailing virtual type.
    pub n_atom_types: usize,
    /// Bond types including "None" at index 0.
    pub n_bond_types: usize,
    pub n_context_labels: usize,
    /// Torsion slots per context chain.
    pub chain_len: usize,
}

impl Vocabulary {
    pub fn virtual_type(&self) -> usize {
        self.n_atom_types - 1
    }

    pub fn n_real_types(&self) -> usize {
        self.n_atom_types - 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_atom_types < 3 {
            return Err(Error::Config("need at least 3 atom types (two real plus virtual)".into()));
        }
        if self.n_bond_types < 2 {
            return Err(Error::Config("need at least 2 bond types (None plus one)".into()));
        }
        if self.n_context_labels == 0 || self.chain_len == 0 {
            return Err(Error::Config("context labels and chain length must be >= 1".into()));
        }
        Ok(())
    }
}

/// Torsion chain hanging off one context point, with its NERF seed frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextChain {
    pub frame: [Point3; 3],
    pub chain: AngleChain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointCloudMolecule {
    pub id: u64,
    pub coords: Vec<Point3>,
    pub atom_types: Vec<usize>,
    /// Symmetric `n × n` bond categories, zero diagonal.
    pub bonds: Vec<Vec<usize>>,
    pub context: Vec<Point3>,
    pub context_labels: Vec<usize>,
    /// One chain per context point when present.
    #[serde(default)]
    pub context_chains: Option<Vec<ContextChain>>,
}

impl PointCloudMolecule {
    pub fn n_atoms(&self) -> usize {
        self.coords.len()
    }

    pub fn n_context(&self) -> usize {
        self.context.len()
    }

    pub fn context_center(&self) -> Point3 {
        vec3::centroid(&self.context).unwrap_or([0.0; 3])
    }

    pub fn validate(&self, vocab: &Vocabulary) -> Result<()> {
        let n = self.n_atoms();
        ensure_same_len(n, self.atom_types.len())?;
        ensure_same_len(n, self.bonds.len())?;
        ensure_same_len(self.context.len(), self.context_labels.len())?;
        if self.coords.iter().chain(&self.context).flatten().any(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("complex {}: non-finite coordinate", self.id)));
        }
        if let Some(&t) = self.atom_types.iter().find(|&&t| t >= vocab.n_atom_types) {
            return Err(Error::Domain(format!("complex {}: atom type {t} out of range", self.id)));
        }
        if let Some(&l) = self.context_labels.iter().find(|&&l| l >= vocab.n_context_labels) {
            return Err(Error::Domain(format!("complex {}: context label {l} out of range", self.id)));
        }
        let virt = vocab.virtual_type();
        for i in 0..n {
            ensure_same_len(n, self.bonds[i].len())?;
            if self.bonds[i][i] != 0 {
                return Err(Error::Domain(format!("complex {}: nonzero bond diagonal", self.id)));
            }
            for j in 0..n {
                let b = self.bonds[i][j];
                if b >= vocab.n_bond_types {
                    return Err(Error::Domain(format!("complex {}: bond type {b} out of range", self.id)));
                }
                if b != self.bonds[j][i] {
                    return Err(Error::Domain(format!("complex {}: asymmetric bonds", self.id)));
                }
                if b != 0 && (self.atom_types[i] == virt || self.atom_types[j] == virt) {
                    return Err(Error::Domain(format!("complex {}: bonded virtual atom", self.id)));
                }
            }
        }
        if let Some(chains) = &self.context_chains {
            ensure_same_len(self.context.len(), chains.len())?;
            for c in chains {
                c.chain.validate()?;
                ensure_same_len(vocab.chain_len, c.chain.len())?;
            }
        }
        Ok(())
    }

    /// Removes virtual atoms together with their bond rows and columns.
    /// Returns the stripped molecule and the number of removed atoms.
    pub fn strip_virtual(&self, vocab: &Vocabulary) -> (PointCloudMolecule, usize) {
        let keep: Vec<usize> = (0..self.n_atoms()).filter(|&i| self.atom_types[i] != vocab.virtual_type()).collect();
        let removed = self.n_atoms() - keep.len();
        let out = PointCloudMolecule {
            id: self.id,
            coords: keep.iter().map(|&i| self.coords[i]).collect(),
            atom_types: keep.iter().map(|&i| self.atom_types[i]).collect(),
            bonds: keep.iter().map(|&i| keep.iter().map(|&j| self.bonds[i][j]).collect()).collect(),
            context: self.context.clone(),
            context_labels: self.context_labels.clone(),
            context_chains: self.context_chains.clone(),
        };
        (out, removed)
    }

    /// Copy with every coordinate (ligand, context and chain frames) shifted.
    pub fn translated(&self, shift: Point3) -> PointCloudMolecule {
        let mut m = self.clone();
        m.coords.iter_mut().for_each(|p| *p = vec3::add(*p, shift));
        m.context.iter_mut().for_each(|p| *p = vec3::add(*p, shift));
        if let Some(chains) = &mut m.context_chains {
            for c in chains {
                c.frame.iter_mut().for_each(|p| *p = vec3::add(*p, shift));
            }
        }
        m
    }

    /// Lengths of bonded pairs `i < j`, grouped by bond type (index 0 unused).
    pub fn bond_lengths(&self, n_bond_types: usize) -> Vec<Vec<f64>> {
        let mut out = vec![Vec::new(); n_bond_types];
        for i in 0..self.n_atoms() {
            for j in i + 1..self.n_atoms() {
                let b = self.bonds[i][j];
                if b != 0 && b < n_bond_types {
                    out[b].push(vec3::dist(self.coords[i], self.coords[j]));
                }
            }
        }
        out
    }
}

/// Empty symmetric bond matrix.
pub fn no_bonds(n: usize) -> Vec<Vec<usize>> {
    vec![vec![0; n]; n]
}
