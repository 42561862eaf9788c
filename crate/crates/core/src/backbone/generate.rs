//! Joint sampling: Euler steps for coordinates and torsions and bridge steps for
//! types and bonds on one shared time grid.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::loss::ObjectiveConfig;
use super::model::{softmax, upper_pairs, BackboneModel, NoisyState, SelfCondition};
use super::nodes::{sample_size, CategoryPriors, SizeHistogram};
use crate::bridges::{bridge_step_sample, predicted_step_sample, sample_index, BridgeSchedule};
use crate::error::{Error, Result};
use crate::flows::sigma_tot_series;
use crate::geometry::vec3::{self, Point3};
use crate::geometry::{wrap, Angle};
use crate::molecule::PointCloudMolecule;
use crate::stream_rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SizeMode {
    /// `N ~ p(N | m)` plus half the training virtual-node maximum.
    #[default]
    Histogram,
    /// The reference ligand's size plus this many extra nodes.
    TruePlus(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub n_steps: usize,
    pub size: SizeMode,
    /// Drive the ligand with its true field and end states; only torsions are sampled.
    pub fixed_ligand: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { n_steps: 500, size: SizeMode::Histogram, fixed_ligand: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedMolecule {
    /// Virtual atoms already stripped.
    pub molecule: PointCloudMolecule,
    /// Trajectory-integrated predicted spread per surviving atom.
    pub sigma_tot: Vec<f64>,
    /// Computational nodes before stripping.
    pub n_nodes: usize,
    pub removed: usize,
}

/// Read-only bundle of everything sampling needs.
#[derive(Debug, Clone, Copy)]
pub struct Generator<'a> {
    pub model: &'a BackboneModel,
    pub priors: &'a CategoryPriors,
    pub sizes: &'a SizeHistogram,
    pub objective: &'a ObjectiveConfig,
}

impl<'a> Generator<'a> {
    pub fn from_checkpoint(ck: &'a super::checkpoint::Checkpoint) -> Self {
        Self { model: &ck.model, priors: &ck.priors, sizes: &ck.size_histogram, objective: &ck.objective }
    }

    /// One molecule for the context of `reference`. The reference ligand is read
    /// only in fixed-ligand mode and for [`SizeMode::TruePlus`].
    pub fn generate<R: Rng + ?Sized>(&self, reference: &PointCloudMolecule, cfg: &SamplerConfig, rng: &mut R) -> Result<GeneratedMolecule> {
        let model = self.model;
        let vocab = &model.vocab;
        if cfg.n_steps == 0 {
            return Err(Error::Config("sampler needs at least one step".into()));
        }
        reference.validate(vocab)?;
        let schedule = BridgeSchedule::new(cfg.n_steps)?;
        let dt = schedule.dt();
        let n = if cfg.fixed_ligand {
            reference.n_atoms()
        } else {
            match cfg.size {
                SizeMode::Histogram => sample_size(reference.n_context(), self.sizes, self.objective.n_max_virtual, rng)?,
                SizeMode::TruePlus(k) => reference.n_atoms() + k,
            }
        };
        if n == 0 {
            return Err(Error::Empty("generated node set"));
        }
        let center = reference.context_center();
        let mut coords: Vec<Point3> = (0..n)
            .map(|_| {
                let mut p = center;
                for v in &mut p {
                    let e: f64 = rng.sample(StandardNormal);
                    *v += self.objective.prior_std * e;
                }
                p
            })
            .collect();
        let x0 = coords.clone();
        let mut types: Vec<usize> = (0..n).map(|_| sample_index(&self.priors.atom, rng)).collect();
        let mut bonds = vec![vec![0; n]; n];
        let pairs = upper_pairs(n);
        for &(i, j) in &pairs {
            let b = sample_index(&self.priors.bond, rng);
            bonds[i][j] = b;
            bonds[j][i] = b;
        }
        let mut chains = reference.context_chains.clone().unwrap_or_default();
        for c in &mut chains {
            for slot in 0..c.chain.len() {
                c.chain.angles[slot] = if c.chain.mask[slot] {
                    Angle::new(rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI))?
                } else {
                    Angle::ZERO
                };
            }
        }

        let mut variances: Vec<Vec<f64>> = vec![Vec::with_capacity(cfg.n_steps + 1); n];
        let mut prev: Option<SelfCondition> = None;
        for step in 0..=cfg.n_steps {
            let t = schedule.time_of(step);
            let state = NoisyState {
                coords: coords.clone(),
                atom_types: types.clone(),
                bonds: bonds.clone(),
                t,
                context: reference.context.clone(),
                context_labels: reference.context_labels.clone(),
                chains: chains.clone(),
            };
            let out = model.forward(&state, if model.config.self_conditioning { prev.as_ref() } else { None })?;
            for (v, lv) in variances.iter_mut().zip(&out.logvar) {
                v.push(lv.exp());
            }
            if step == cfg.n_steps {
                break;
            }
            for i in 0..n {
                let v = if cfg.fixed_ligand { vec3::sub(reference.coords[i], x0[i]) } else { out.velocity[i] };
                coords[i] = vec3::add(coords[i], vec3::scale(v, dt));
            }
            for (c, av) in chains.iter_mut().zip(&out.angle_velocity) {
                for slot in 0..c.chain.len() {
                    if c.chain.mask[slot] {
                        c.chain.angles[slot] = wrap(c.chain.angles[slot].value() + dt * av[slot])?;
                    }
                }
            }
            for i in 0..n {
                types[i] = if cfg.fixed_ligand {
                    bridge_step_sample(types[i], reference.atom_types[i], vocab.n_atom_types, t, &schedule, rng)?
                } else {
                    predicted_step_sample(types[i], &softmax(&out.type_logits[i]), t, &schedule, rng)?
                };
            }
            for (k, &(i, j)) in pairs.iter().enumerate() {
                let b = if cfg.fixed_ligand {
                    bridge_step_sample(bonds[i][j], reference.bonds[i][j], vocab.n_bond_types, t, &schedule, rng)?
                } else {
                    predicted_step_sample(bonds[i][j], &softmax(&out.bond_logits[k]), t, &schedule, rng)?
                };
                bonds[i][j] = b;
                bonds[j][i] = b;
            }
            if coords.iter().flatten().any(|x| !x.is_finite()) {
                return Err(Error::Diverged(format!("non-finite coordinate at t = {t}")));
            }
            prev = Some(SelfCondition { type_probs: out.type_logits.iter().map(|l| softmax(l)).collect(), logvar: out.logvar });
        }

        // virtual atoms cannot carry bonds
        let virt = vocab.virtual_type();
        for i in 0..n {
            if types[i] == virt {
                for j in 0..n {
                    bonds[i][j] = 0;
                    bonds[j][i] = 0;
                }
            }
        }
        let times: Vec<f64> = (0..=cfg.n_steps).map(|s| schedule.time_of(s)).collect();
        let sigma: Vec<f64> = variances.iter().map(|v| sigma_tot_series(&times, v)).collect::<Result<_>>()?;
        let full = PointCloudMolecule {
            id: reference.id,
            coords,
            atom_types: types,
            bonds,
            context: reference.context.clone(),
            context_labels: reference.context_labels.clone(),
            context_chains: reference.context_chains.as_ref().map(|_| chains),
        };
        let (molecule, removed) = full.strip_virtual(vocab);
        let sigma_tot = (0..n).filter(|&i| full.atom_types[i] != virt).map(|i| sigma[i]).collect();
        Ok(GeneratedMolecule { molecule, sigma_tot, n_nodes: n, removed })
    }

    /// `per_context` molecules for each reference, in order. Sample `k` of
    /// reference `r` uses stream `r · per_context + k` of `seed`.
    pub fn generate_many(
        &self,
        references: &[PointCloudMolecule],
        per_context: usize,
        cfg: &SamplerConfig,
        seed: u64,
    ) -> Result<Vec<GeneratedMolecule>> {
        let jobs: Vec<(usize, usize)> = (0..references.len()).flat_map(|r| (0..per_context).map(move |k| (r, k))).collect();
        crate::with_thread_pool(|| {
            jobs.par_iter()
                .map(|&(r, k)| {
                    let mut rng: ChaCha8Rng = stream_rng(seed, (r * per_context + k) as u64);
                    self.generate(&references[r], cfg, &mut rng)
                })
                .collect()
        })
    }
}

#[cfg(test)]
mod tests {
    use super::super::model::ModelConfig;
    use super::*;
    use crate::toydata::{generate_dataset, ToyDatasetConfig};

    fn fixture() -> (Vec<PointCloudMolecule>, BackboneModel, CategoryPriors, SizeHistogram) {
        let cfg = ToyDatasetConfig { n_complexes: 8, ..Default::default() };
        let data = generate_dataset(&cfg).unwrap();
        let v = cfg.vocabulary();
        let priors = CategoryPriors::marginal(&data, &v, 10).unwrap();
        let sizes = SizeHistogram::from_dataset(&data);
        (data, BackboneModel::new(ModelConfig::tiny(), v, 5).unwrap(), priors, sizes)
    }

    #[test]
    fn seeded_samples_are_reproducible_and_well_formed() {
        let (data, model, priors, sizes) = fixture();
        let obj = ObjectiveConfig::default();
        let g = Generator { model: &model, priors: &priors, sizes: &sizes, objective: &obj };
        let cfg = SamplerConfig { n_steps: 20, ..Default::default() };
        let a = g.generate_many(&data[..3], 2, &cfg, 7).unwrap();
        let b = g.generate_many(&data[..3], 2, &cfg, 7).unwrap();
        assert_eq!(a, b);
        for s in &a {
            s.molecule.validate(&model.vocab).unwrap();
            assert!(s.molecule.atom_types.iter().all(|&t| t != model.vocab.virtual_type()));
            assert_eq!(s.sigma_tot.len(), s.molecule.n_atoms());
            assert_eq!(s.molecule.n_atoms() + s.removed, s.n_nodes);
            assert!(s.sigma_tot.iter().all(|x| x.is_finite() && *x >= 0.0));
        }
    }

    #[test]
    fn translating_the_context_translates_the_sample() {
        let (data, model, priors, sizes) = fixture();
        let obj = ObjectiveConfig::default();
        let g = Generator { model: &model, priors: &priors, sizes: &sizes, objective: &obj };
        let cfg = SamplerConfig { n_steps: 20, ..Default::default() };
        let shift = [10.0, -4.0, 2.5];
        let a = g.generate(&data[0], &cfg, &mut stream_rng(1, 1)).unwrap();
        let b = g.generate(&data[0].translated(shift), &cfg, &mut stream_rng(1, 1)).unwrap();
        assert_eq!(a.molecule.atom_types, b.molecule.atom_types);
        assert_eq!(a.molecule.bonds, b.molecule.bonds);
        for (p, q) in a.molecule.coords.iter().zip(&b.molecule.coords) {
            assert!(vec3::dist(vec3::add(*p, shift), *q) < 1e-8);
        }
    }

    #[test]
    fn fixed_ligand_reproduces_the_reference() {
        let (data, model, priors, sizes) = fixture();
        let obj = ObjectiveConfig::default();
        let g = Generator { model: &model, priors: &priors, sizes: &sizes, objective: &obj };
        let cfg = SamplerConfig { n_steps: 25, fixed_ligand: true, ..Default::default() };
        let s = g.generate(&data[1], &cfg, &mut stream_rng(3, 0)).unwrap();
        assert_eq!(s.removed, 0);
        assert_eq!(s.molecule.atom_types, data[1].atom_types);
        assert_eq!(s.molecule.bonds, data[1].bonds);
        for (p, q) in s.molecule.coords.iter().zip(&data[1].coords) {
            assert!(vec3::dist(*p, *q) < 1e-9);
        }
        assert_eq!(s.molecule.context_chains.as_ref().unwrap().len(), data[1].n_context());
    }

    #[test]
    fn extra_nodes_set_the_node_count() {
        let (data, model, priors, sizes) = fixture();
        let obj = ObjectiveConfig::default();
        let g = Generator { model: &model, priors: &priors, sizes: &sizes, objective: &obj };
        let cfg = SamplerConfig { n_steps: 10, size: SizeMode::TruePlus(5), fixed_ligand: false };
        let s = g.generate(&data[2], &cfg, &mut stream_rng(0, 0)).unwrap();
        assert_eq!(s.n_nodes, data[2].n_atoms() + 5);
    }
}
