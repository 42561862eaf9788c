//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion.
//!
//! Criteria 4 to 8 share one trained model, cached under the cargo target
//! tmpdir and keyed by the training configuration and the model sources. Set
//! `FLOWBRIDGE_ACCEPTANCE_RETRAIN=1` to ignore the cache and
//! `FLOWBRIDGE_ACCEPTANCE_STRICT=1` to exit non-zero when any criterion fails.

use std::f64::consts::{LN_2, PI};
use std::path::PathBuf;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal, Uniform};

use flowbridge_core::alignment::{
    align, draw_pair, finetune, mdpa_loss, mdpa_loss_and_grad, pair_samples, scaled_threshold, winners, AlignmentConfig,
    MdpaWeights, PreferencePair, PropertyCriterion, SelectionConfig,
};
use flowbridge_core::backbone::{
    draw_noise, evaluate_draw, loss_and_grad, train, BackboneModel, CategoryPriors, Checkpoint, GeneratedMolecule,
    Generator, LossWeights, ModelConfig, ObjectiveConfig, OptimConfig, SamplerConfig, SizeHistogram, SizeMode,
    TrainState,
};
use flowbridge_core::bridges::{bridge_marginal, bridge_step_sample, BridgeSchedule, Categorical};
use flowbridge_core::evaluation::{
    bootstrap_metric, frechet_gaussian, jsd_categorical, jsd_joint_histogram, label_histogram, mann_whitney_u, mean,
    two_sample_ttest, wasserstein1, SampleTable,
};
use flowbridge_core::flows::{integrate_ode, torus_path, torus_target_field, FieldEval, FlowState};
use flowbridge_core::geometry::vec3::{self, Point3};
use flowbridge_core::geometry::{
    chain_to_coords, coords_to_angles, geodesic_distance, kappa, torus_log, Angle, AngleChain, LinkGeometry,
};
use flowbridge_core::molecule::{PointCloudMolecule, Vocabulary};
use flowbridge_core::toydata::{
    angle_mode, compactness, generate_dataset, nearest_mode, scale_context, type_balance, ToyDatasetConfig,
};

type Res<T> = std::result::Result<T, Box<dyn std::error::Error>>;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Res<Outcome> {
    Ok(Outcome { pass, detail: detail.into() })
}

/// Sampling steps for every generation run below.
const SAMPLE_STEPS: usize = 100;
const GEN_SEED: u64 = 7;
const TRAIN_BUDGET_SECS: f64 = 600.0;

fn sampler(size: SizeMode) -> SamplerConfig {
    SamplerConfig { n_steps: SAMPLE_STEPS, size, fixed_ligand: false }
}

/// Central differences of `f` around `p`.
fn fd_gradient(p: &[f64], h: f64, f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut q = p.to_vec();
    (0..p.len())
        .map(|i| {
            let orig = q[i];
            q[i] = orig + h;
            let up = f(&q);
            q[i] = orig - h;
            let down = f(&q);
            q[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Largest `|a − n| / max(|a|, |n|, 1e-3 · scale)`, with `scale` the largest magnitude seen.
fn max_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = analytic.iter().chain(numeric).fold(0.0f64, |m, v| m.max(v.abs())).max(1e-8);
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-3 * scale))
        .fold(0.0, f64::max)
}

fn wrapped_diff(a: f64, b: f64) -> f64 {
    let d = a - b;
    d.sin().atan2(d.cos())
}

// ---------------------------------------------------------------- criterion 1

fn bridge_marginals() -> Res<Outcome> {
    let start = Instant::now();
    let (k, n_steps, n_chains) = (5, 50, 100_000);
    let schedule = BridgeSchedule::new(n_steps)?;
    let end_dist = Categorical::new(vec![0.1, 0.3, 0.2, 0.25, 0.15])?;
    let probes: Vec<usize> = [0.25f64, 0.5, 0.75].iter().map(|t| (t * n_steps as f64).round() as usize).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut empirical = vec![vec![0.0; k]; probes.len()];
    let mut closed = vec![vec![0.0; k]; probes.len()];
    let mut off_target = 0usize;
    for _ in 0..n_chains {
        let z0 = rng.gen_range(0..k);
        let y = end_dist.sample(&mut rng);
        for (p, &i) in probes.iter().enumerate() {
            let m = bridge_marginal(z0, y, k, schedule.time_of(i), &schedule)?;
            for (c, v) in closed[p].iter_mut().zip(m.probs()) {
                *c += v / n_chains as f64;
            }
        }
        let mut z = z0;
        for i in 0..n_steps {
            if let Some(p) = probes.iter().position(|&q| q == i) {
                empirical[p][z] += 1.0 / n_chains as f64;
            }
            z = bridge_step_sample(z, y, k, schedule.time_of(i), &schedule, &mut rng)?;
        }
        if z != y {
            off_target += 1;
        }
    }
    let tv: Vec<f64> = empirical
        .iter()
        .zip(&closed)
        .map(|(e, c)| 0.5 * e.iter().zip(c).map(|(a, b)| (a - b).abs()).sum::<f64>())
        .collect();
    let secs = start.elapsed().as_secs_f64();
    let worst = tv.iter().copied().fold(0.0, f64::max);
    let times: Vec<f64> = probes.iter().map(|&i| schedule.time_of(i)).collect();
    outcome(
        worst < 0.01 && off_target == 0 && secs < 30.0,
        format!("TV at t={times:?}: {tv:.4?} (< 0.01); chains off target: {off_target}; {secs:.1}s (< 30s)"),
    )
}

// ---------------------------------------------------------------- criterion 2

fn flow_paths() -> Res<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let normal = Normal::new(0.0, 3.0)?;
    let mut euclid_err = 0.0f64;
    for _ in 0..100 {
        let x0: Vec<f64> = (0..30).map(|_| normal.sample(&mut rng)).collect();
        let x1: Vec<f64> = (0..30).map(|_| normal.sample(&mut rng)).collect();
        let v: Vec<f64> = x1.iter().zip(&x0).map(|(a, b)| a - b).collect();
        let traj = integrate_ode(
            FlowState { euclid: x0.clone(), torus: vec![] },
            |_, _| Ok(FieldEval { euclid: v.clone(), torus: vec![], variance: None }),
            100,
        )?;
        for (a, b) in traj.last().euclid.iter().zip(&x1) {
            euclid_err = euclid_err.max((a - b).abs());
        }
    }

    let angle = Uniform::new(-PI, PI);
    let (mut dist_err, mut field_err) = (0.0f64, 0.0f64);
    let h = 1e-5;
    for n in 0..10_000 {
        let k = 1 + (n % 4) as u32;
        let x0 = Angle::new(angle.sample(&mut rng))?;
        let x1 = Angle::new(angle.sample(&mut rng))?;
        let t = rng.gen_range(0.0..1.0);
        let xt = torus_path(x0, x1, t, k)?;
        let lhs = geodesic_distance(xt, x1);
        let rhs = kappa(t, k)? * geodesic_distance(x0, x1);
        dist_err = dist_err.max((lhs - rhs).abs());

        let tc = rng.gen_range(2.0 * h..1.0 - 2.0 * h);
        let numeric = torus_log(torus_path(x0, x1, tc - h, k)?, torus_path(x0, x1, tc + h, k)?) / (2.0 * h);
        field_err = field_err.max((numeric - torus_target_field(x0, x1, tc, k)?).abs());
    }
    outcome(
        euclid_err < 1e-9 && dist_err < 1e-12 && field_err < 1e-6,
        format!(
            "euclidean endpoint error {euclid_err:.1e} (< 1e-9); torus distance identity {dist_err:.1e} (< 1e-12); torus field vs numeric derivative {field_err:.1e} (< 1e-6)"
        ),
    )
}

// ---------------------------------------------------------------- criterion 3

fn small_molecule(vocab: &Vocabulary) -> Res<PointCloudMolecule> {
    let cfg = ToyDatasetConfig { n_complexes: 40, seed: 3, ..Default::default() };
    let data = generate_dataset(&cfg)?;
    let mol = data.iter().min_by_key(|m| m.n_atoms()).ok_or("empty dataset")?.clone();
    mol.validate(vocab)?;
    Ok(mol)
}

fn gradients() -> Res<Outcome> {
    let start = Instant::now();
    let vocab = ToyDatasetConfig::default().vocabulary();
    let mol = small_molecule(&vocab)?;
    let model = BackboneModel::new(ModelConfig::tiny(), vocab, 11)?;
    if model.n_params() > 1000 {
        return outcome(false, format!("test model has {} parameters", model.n_params()));
    }
    let priors = CategoryPriors::uniform(&vocab);
    let h = 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(3);

    let check_loss = |objective: &ObjectiveConfig, rng: &mut ChaCha8Rng| -> Res<f64> {
        let draw = draw_noise(&mol, &vocab, &priors, objective, rng)?;
        let (_, grad) = loss_and_grad(&model, &draw, objective)?;
        let numeric = fd_gradient(&model.params, h, |p| {
            let m = BackboneModel { params: p.to_vec(), ..model.clone() };
            evaluate_draw(&m, &draw, objective).map(|(l, _)| l.total).unwrap_or(f64::NAN)
        });
        Ok(max_rel_error(&grad, &numeric))
    };

    let combined = ObjectiveConfig { n_steps: 50, ..Default::default() };
    let e_combined = check_loss(&combined, &mut rng)?;
    let fm_ood = ObjectiveConfig {
        n_steps: 50,
        uncertainty: true,
        weights: LossWeights { lambda_coord: 1.0, ..LossWeights::zero() },
        ..Default::default()
    };
    let e_fm = check_loss(&fm_ood, &mut rng)?;

    // preference loss of a perturbed copy against the initial model
    let mut aligned = model.clone();
    for p in &mut aligned.params {
        *p += 0.05 * rng.sample::<f64, _>(StandardNormal);
    }
    let mut loser = mol.clone();
    for c in &mut loser.coords {
        c[0] += 0.4;
    }
    let pair = PreferencePair {
        context_id: mol.id,
        winner: mol.clone(),
        loser,
        winner_properties: Default::default(),
        loser_properties: Default::default(),
    };
    let weights = MdpaWeights { beta: 2.0, ..Default::default() };
    let draw = draw_pair(&pair, &vocab, &priors, &combined, &mut rng)?;
    let (_, grad) = mdpa_loss_and_grad(&aligned, &model, &draw, &combined, &weights)?;
    let numeric = fd_gradient(&aligned.params, h, |p| {
        let m = BackboneModel { params: p.to_vec(), ..aligned.clone() };
        mdpa_loss(&m, &model, &draw, &combined, &weights).map(|b| b.total).unwrap_or(f64::NAN)
    });
    let e_mdpa = max_rel_error(&grad, &numeric);
    let secs = start.elapsed().as_secs_f64();
    outcome(
        e_combined < 1e-4 && e_fm < 1e-4 && e_mdpa < 1e-4 && secs < 60.0,
        format!(
            "{} params; max rel error combined {e_combined:.1e}, fm-ood {e_fm:.1e}, preference {e_mdpa:.1e} (< 1e-4); {secs:.1}s (< 60s)",
            model.n_params()
        ),
    )
}

// ---------------------------------------------------------------- shared model

struct Shared {
    data: Vec<PointCloudMolecule>,
    vocab: Vocabulary,
    checkpoint: Checkpoint,
    train_secs: f64,
    cached: bool,
}

impl Shared {
    fn generator(&self) -> Generator<'_> {
        Generator::from_checkpoint(&self.checkpoint)
    }

    fn half_a(&self) -> &[PointCloudMolecule] {
        &self.data[..self.data.len() / 2]
    }

    fn half_b(&self) -> &[PointCloudMolecule] {
        &self.data[self.data.len() / 2..]
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf29ce484222325u64, |h, b| (h ^ *b as u64).wrapping_mul(0x100000001b3))
}

const MODEL_SOURCES: &[&str] = &[
    include_str!("../src/backbone/model.rs"),
    include_str!("../src/backbone/loss.rs"),
    include_str!("../src/backbone/train.rs"),
    include_str!("../src/backbone/nodes.rs"),
    include_str!("../src/tape.rs"),
    include_str!("../src/bridges.rs"),
    include_str!("../src/toydata.rs"),
    include_str!("../src/geometry/mod.rs"),
];

fn shared_optim() -> OptimConfig {
    OptimConfig {
        epochs: 90,
        batch_size: 16,
        lr: 0.01,
        momentum: 0.9,
        grad_clip: 5.0,
        seed: 0,
        fixed_noise: false,
        lr_final_frac: 0.05,
        log_every: 0,
    }
}

fn shared_model() -> Res<Shared> {
    let data_cfg = ToyDatasetConfig::default();
    let data = generate_dataset(&data_cfg)?;
    let vocab = data_cfg.vocabulary();
    let model_cfg = ModelConfig::default();
    let objective = ObjectiveConfig::default();
    let optim = shared_optim();

    let key_src = serde_json::to_string(&(&data_cfg, &model_cfg, &objective, &optim))? + &MODEL_SOURCES.concat();
    let path = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join(format!("acceptance-model-{:016x}.json", fnv1a(key_src.as_bytes())));
    let retrain = std::env::var("FLOWBRIDGE_ACCEPTANCE_RETRAIN").is_ok_and(|v| v == "1");
    if !retrain {
        if let Ok(text) = std::fs::read_to_string(&path) {
            let v: serde_json::Value = serde_json::from_str(&text)?;
            let checkpoint: Checkpoint = serde_json::from_value(v["checkpoint"].clone())?;
            checkpoint.check()?;
            let train_secs = v["train_seconds"].as_f64().ok_or("cache without training time")?;
            return Ok(Shared { data, vocab, checkpoint, train_secs, cached: true });
        }
    }

    let priors = CategoryPriors::marginal(&data, &vocab, objective.n_max_virtual)?;
    let sizes = SizeHistogram::from_dataset(&data);
    let start = Instant::now();
    let mut model = BackboneModel::new(model_cfg, vocab, 0)?;
    let mut state = TrainState::new(model.n_params());
    train(&mut model, &mut state, &data, &priors, &objective, &optim)?;
    let train_secs = start.elapsed().as_secs_f64();
    let mut checkpoint = Checkpoint::new(model, objective, optim, priors, sizes);
    checkpoint.state = state;
    let blob = serde_json::json!({ "train_seconds": train_secs, "checkpoint": &checkpoint });
    std::fs::write(&path, serde_json::to_string(&blob)?)?;
    Ok(Shared { data, vocab, checkpoint, train_secs, cached: false })
}

// ---------------------------------------------------------------- criterion 4

type Column = (&'static str, Box<dyn Fn(&PointCloudMolecule) -> Vec<f64>>);

fn columns(vocab: Vocabulary) -> Vec<Column> {
    let mut cols: Vec<Column> = vec![
        ("compactness", Box::new(|m: &PointCloudMolecule| vec![compactness(m)])),
        ("type_balance", Box::new(move |m: &PointCloudMolecule| vec![type_balance(m, &vocab)])),
    ];
    let names = ["bond_length_1", "bond_length_2", "bond_length_3"];
    for b in 1..vocab.n_bond_types {
        let kb = vocab.n_bond_types;
        cols.push((names[b - 1], Box::new(move |m: &PointCloudMolecule| m.bond_lengths(kb)[b].clone())));
    }
    cols
}

fn pooled(mols: &[PointCloudMolecule], f: &dyn Fn(&PointCloudMolecule) -> Vec<f64>) -> Vec<f64> {
    mols.iter().flat_map(f).collect()
}

fn type_histogram(mols: &[PointCloudMolecule], k: usize) -> Res<Vec<f64>> {
    let labels: Vec<usize> = mols.iter().flat_map(|m| m.atom_types.iter().copied()).collect();
    Ok(label_histogram(&labels, k)?)
}

fn distribution_learning(shared: &Shared, generated: &[GeneratedMolecule]) -> Res<Outcome> {
    let (a, b) = (shared.half_a(), shared.half_b());
    let gen: Vec<PointCloudMolecule> = generated.iter().map(|g| g.molecule.clone()).collect();
    let mut pass = shared.train_secs < TRAIN_BUDGET_SECS;
    let mut parts = vec![format!(
        "training {:.0}s{} (< {TRAIN_BUDGET_SECS:.0}s)",
        shared.train_secs,
        if shared.cached { ", cached" } else { "" }
    )];
    for (name, f) in columns(shared.vocab) {
        let self_w1 = wasserstein1(&pooled(a, f.as_ref()), &pooled(b, f.as_ref()))?;
        let gen_w1 = wasserstein1(&pooled(&gen, f.as_ref()), &pooled(a, f.as_ref()))?;
        let ratio = gen_w1 / self_w1;
        pass &= ratio < 2.0;
        parts.push(format!("{name} W1 {gen_w1:.4} vs self {self_w1:.4} (ratio {ratio:.2}, < 2)"));
    }
    let k = shared.vocab.n_atom_types;
    let jsd = jsd_categorical(&type_histogram(&gen, k)?, &type_histogram(a, k)?)?;
    pass &= jsd < 0.05;
    parts.push(format!("atom-type JSD {jsd:.4} (< 0.05)"));
    outcome(pass, parts.join("; "))
}

// ---------------------------------------------------------------- criterion 5

fn molecule_sigma(g: &GeneratedMolecule) -> Option<f64> {
    (!g.sigma_tot.is_empty()).then(|| mean(&g.sigma_tot))
}

fn uncertainty(shared: &Shared, generated: &[GeneratedMolecule]) -> Res<Outcome> {
    let n = 250;
    let ood: Vec<PointCloudMolecule> = shared.half_b()[..n].iter().map(|m| scale_context(m, 1.6)).collect();
    let ood_gen = shared.generator().generate_many(&ood, 1, &sampler(SizeMode::Histogram), GEN_SEED)?;
    let in_sigma: Vec<f64> = generated[..n].iter().filter_map(molecule_sigma).collect();
    let ood_sigma: Vec<f64> = ood_gen.iter().filter_map(molecule_sigma).collect();
    let (m_in, m_ood) = (mean(&in_sigma), mean(&ood_sigma));
    let p = mann_whitney_u(&ood_sigma, &in_sigma)?;
    outcome(
        m_ood > m_in && p < 0.01 && in_sigma.len() >= 200 && ood_sigma.len() >= 200,
        format!(
            "mean sigma_tot in-distribution {m_in:.4} (n={}), scaled contexts {m_ood:.4} (n={}); Mann-Whitney p {p:.2e} (< 0.01)",
            in_sigma.len(),
            ood_sigma.len()
        ),
    )
}

// ---------------------------------------------------------------- criterion 6

fn virtual_nodes(shared: &Shared) -> Res<Outcome> {
    let g = shared.generator();
    let mean_removed = |samples: &[GeneratedMolecule]| mean(&samples.iter().map(|s| s.removed as f64).collect::<Vec<_>>());
    let plus5 = g.generate_many(&shared.half_b()[..1000], 1, &sampler(SizeMode::TruePlus(5)), GEN_SEED)?;
    let plus20 = g.generate_many(&shared.half_b()[..300], 1, &sampler(SizeMode::TruePlus(20)), GEN_SEED)?;
    let (r5, r20) = (mean_removed(&plus5), mean_removed(&plus20));
    outcome(
        (4.0..=6.0).contains(&r5) && r20 < 15.0,
        format!("+5 nodes: mean removed {r5:.2} over {} samples (in [4, 6]); +20 nodes: mean removed {r20:.2} over {} samples (< 15)", plus5.len(), plus20.len()),
    )
}

// ---------------------------------------------------------------- criterion 7

fn mode_occupancy<'a>(chains: impl Iterator<Item = (usize, &'a AngleChain)>, n_modes: usize) -> Vec<f64> {
    let mut counts = vec![0.0; n_modes];
    let mut total = 0.0;
    for (label, chain) in chains {
        counts[nearest_mode(label, chain, n_modes).0] += 1.0;
        total += 1.0;
    }
    counts.iter().map(|c| c / total).collect()
}

fn labelled_chains(mols: &[PointCloudMolecule]) -> Vec<(usize, &AngleChain)> {
    mols.iter()
        .flat_map(|m| {
            m.context_labels.iter().copied().zip(m.context_chains.iter().flatten().map(|c| &c.chain))
        })
        .collect()
}

fn torsion_modes(shared: &Shared) -> Res<Outcome> {
    let n_modes = ToyDatasetConfig::default().angle_modes;
    let cfg = SamplerConfig { n_steps: SAMPLE_STEPS, size: SizeMode::Histogram, fixed_ligand: true };
    let samples = shared.generator().generate_many(&shared.half_b()[..300], 1, &cfg, GEN_SEED)?;
    let gen: Vec<PointCloudMolecule> = samples.into_iter().map(|s| s.molecule).collect();
    let gen_chains = labelled_chains(&gen);
    let (mut near, mut total) = (0usize, 0usize);
    for &(label, chain) in &gen_chains {
        let (mode, _) = nearest_mode(label, chain, n_modes);
        for s in (0..chain.len()).filter(|&s| chain.mask[s]) {
            total += 1;
            if wrapped_diff(chain.angles[s].value(), angle_mode(label, mode, s, n_modes)).abs() <= 0.35 {
                near += 1;
            }
        }
    }
    let frac = near as f64 / total.max(1) as f64;
    let occ_gen = mode_occupancy(gen_chains.into_iter(), n_modes);
    let occ_train = mode_occupancy(labelled_chains(&shared.data).into_iter(), n_modes);
    let gap = occ_gen.iter().zip(&occ_train).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    outcome(
        frac >= 0.9 && gap <= 0.1,
        format!(
            "{near}/{total} angles within 0.35 rad of their mode ({:.1}%, >= 90%); occupancy {occ_gen:.3?} vs training {occ_train:.3?} (max gap {gap:.3}, <= 0.1)",
            100.0 * frac
        ),
    )
}

// ---------------------------------------------------------------- criterion 8

fn compactness_of(samples: &[GeneratedMolecule]) -> Vec<f64> {
    samples.iter().filter(|s| s.molecule.n_atoms() > 0).map(|s| compactness(&s.molecule)).collect()
}

fn alignment(shared: &Shared, generated: &[GeneratedMolecule]) -> Res<Outcome> {
    let ck = &shared.checkpoint;
    let reference = &ck.model;
    let g = shared.generator();
    let (n_ctx, per_context, clash_radius) = (150, 6, 1.2);
    let contexts = &shared.half_a()[..n_ctx];
    let validation = &shared.half_a()[n_ctx..n_ctx + 50];
    let samples = g.generate_many(contexts, per_context, &sampler(SizeMode::Histogram), GEN_SEED + 1)?;
    let mols: Vec<PointCloudMolecule> = samples.into_iter().map(|s| s.molecule).filter(|m| m.n_atoms() > 0).collect();
    let criterion = PropertyCriterion {
        name: "compactness".into(),
        higher_is_better: true,
        threshold: scaled_threshold(&mols, "compactness", &shared.vocab, clash_radius)?,
    };
    let mut pairs = Vec::new();
    for ctx in contexts {
        let group: Vec<PointCloudMolecule> = mols.iter().filter(|m| m.id == ctx.id).cloned().collect();
        pairs.extend(pair_samples(ctx.id, &group, std::slice::from_ref(&criterion), &shared.vocab, clash_radius)?);
    }
    if pairs.is_empty() {
        return outcome(false, "no preference pairs");
    }

    let optim = OptimConfig { epochs: 3, batch_size: 16, lr: 0.002, momentum: 0.9, grad_clip: 5.0, seed: 5, fixed_noise: false, lr_final_frac: 1.0, log_every: 0 };
    let selection = SelectionConfig { per_context: 2, sampler: sampler(SizeMode::Histogram), clash_radius, tol: 0.1, seed: 9 };
    let cfg = AlignmentConfig { weights: MdpaWeights::default(), optim, selection: Some(selection) };
    let aligned = align(reference, &pairs, &ck.priors, &ck.size_histogram, &ck.objective, &cfg, validation)?;
    let (tuned, _) = finetune(reference, &winners(&pairs), &ck.priors, &ck.objective, &optim)?;

    let eval = &shared.half_b()[..200];
    let gen_with = |m: &BackboneModel| {
        Generator { model: m, priors: &ck.priors, sizes: &ck.size_histogram, objective: &ck.objective }
            .generate_many(eval, 1, &sampler(SizeMode::Histogram), GEN_SEED)
    };
    let c_ref = compactness_of(&generated[..eval.len()]);
    let c_al = compactness_of(&gen_with(&aligned.model)?);
    let c_ft = compactness_of(&gen_with(&tuned)?);
    let (m_ref, m_al, m_ft) = (mean(&c_ref), mean(&c_al), mean(&c_ft));
    let p = mann_whitney_u(&c_al, &c_ref)?;

    // fine-tuning weights: the preference loss collapses to the winner loss
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut bitwise = true;
    for pair in pairs.iter().take(20) {
        let draw = draw_pair(pair, &shared.vocab, &ck.priors, &ck.objective, &mut rng)?;
        let (b, grad) = mdpa_loss_and_grad(&aligned.model, reference, &draw, &ck.objective, &MdpaWeights::finetune())?;
        let (plain, plain_grad) = loss_and_grad(&aligned.model, &draw.winner, &ck.objective)?;
        bitwise &= b.total.to_bits() == plain.total.to_bits()
            && grad.iter().zip(&plain_grad).all(|(x, y)| x.to_bits() == y.to_bits());
    }
    let (shift_al, shift_ft) = (m_al - m_ref, m_ft - m_ref);
    outcome(
        shift_al > 0.0 && p < 0.01 && shift_al > shift_ft && bitwise,
        format!(
            "{} pairs; mean compactness reference {m_ref:.4}, aligned {m_al:.4} (epoch {:?}), fine-tuned {m_ft:.4}; aligned vs reference p {p:.2e} (< 0.01); shift {shift_al:+.4} vs fine-tune {shift_ft:+.4}; fine-tune weights bitwise equal: {bitwise}",
            pairs.len(),
            aligned.selected_epoch
        ),
    )
}

// ---------------------------------------------------------------- criterion 9

fn table(cols: &[(&str, Vec<f64>)]) -> SampleTable {
    let mut t = SampleTable::default();
    for (name, v) in cols {
        t.continuous.insert(name.to_string(), v.clone());
    }
    t
}

fn metric_suite() -> Res<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut failures: Vec<String> = Vec::new();
    let mut check = |ok: bool, what: String| {
        if !ok {
            failures.push(what);
        }
    };

    let xs: Vec<f64> = (0..100).map(|_| rng.gen()).collect();
    let mut shuffled = xs.clone();
    shuffled.reverse();
    check(wasserstein1(&xs, &shuffled)? == 0.0, "W1 identical multisets".into());
    check(wasserstein1(&[0.0], &[5.0])? == 5.0, "W1 single points".into());
    let u: Vec<f64> = (0..10_000).map(|_| rng.gen()).collect();
    let v: Vec<f64> = (0..10_000).map(|_| rng.gen::<f64>() + 1.0).collect();
    let w = wasserstein1(&u, &v)?;
    check((w - 1.0).abs() <= 0.02, format!("W1 shifted uniforms {w}"));

    let p = [0.2, 0.3, 0.5];
    check(jsd_categorical(&p, &p)? == 0.0, "JSD p = q".into());
    let d = jsd_categorical(&[1.0, 0.0], &[0.0, 1.0])?;
    check((d - LN_2).abs() < 1e-12, format!("JSD disjoint {d}"));
    let brute = 0.5 * (0.5 * (0.5f64 / 0.75).ln() + 0.5 * (0.5f64 / 0.25).ln()) + 0.5 * (1.0f64 / 0.75).ln();
    let j = jsd_categorical(&[0.5, 0.5], &[1.0, 0.0])?;
    check((j - brute).abs() < 1e-12, format!("JSD half vs point mass {j} vs {brute}"));

    let a = table(&[("x", xs.clone()), ("y", shuffled.clone())]);
    check(jsd_joint_histogram(&a, &a, &["x", "y"], 10)? == 0.0, "joint JSD a = b".into());
    // bins 0 and 9 against bins 4 and 5
    let ends = table(&[("x", vec![0.0, 0.1])]);
    let middle = table(&[("x", vec![0.045, 0.055])]);
    let jd = jsd_joint_histogram(&ends, &middle, &["x"], 10)?;
    check((jd - LN_2).abs() < 1e-12, format!("joint JSD disjoint clusters {jd}"));
    // 2×2 bins over [0, 1]²: reference in (0,0),(1,1); other in (0,0),(0,1)
    let r = table(&[("x", vec![0.0, 1.0]), ("y", vec![0.0, 1.0])]);
    let o = table(&[("x", vec![0.1, 0.2]), ("y", vec![0.1, 0.9])]);
    let jh = jsd_joint_histogram(&r, &o, &["x", "y"], 2)?;
    check((jh - 0.5 * LN_2).abs() < 1e-12, format!("joint JSD hand-binned {jh}"));

    let feats: Vec<Vec<f64>> = (0..200).map(|_| (0..3).map(|_| rng.sample(StandardNormal)).collect()).collect();
    let f0 = frechet_gaussian(&feats, &feats)?;
    check(f0.abs() < 1e-8, format!("Frechet a = b {f0}"));
    let n01: Vec<Vec<f64>> = (0..100_000).map(|_| vec![rng.sample(StandardNormal)]).collect();
    let n11: Vec<Vec<f64>> = (0..100_000).map(|_| vec![1.0 + rng.sample::<f64, _>(StandardNormal)]).collect();
    let n04: Vec<Vec<f64>> = (0..100_000).map(|_| vec![2.0 * rng.sample::<f64, _>(StandardNormal)]).collect();
    let fm = frechet_gaussian(&n01, &n11)?;
    let fc = frechet_gaussian(&n01, &n04)?;
    check((fm - 1.0).abs() <= 0.05, format!("Frechet mean shift {fm}"));
    check((fc - 1.0).abs() <= 0.05, format!("Frechet covariance shift {fc}"));

    let w1 = |a: &[f64], b: &[f64]| wasserstein1(a, b);
    let boot = |seed| bootstrap_metric(w1, &u, &v, 20, 500, &mut ChaCha8Rng::seed_from_u64(seed));
    let (b1, b2) = (boot(4)?, boot(4)?);
    check(b1 == b2 && b1.std >= 0.0, "bootstrap seed-fixed reproducibility".into());
    let flat = bootstrap_metric(|_: &[f64], _: &[f64]| Ok(3.0), &u, &v, 20, 500, &mut rng)?;
    check(flat.std == 0.0 && flat.mean == 3.0, "bootstrap constant metric".into());

    let big: Vec<f64> = (0..1000).map(|_| rng.sample(StandardNormal)).collect();
    check(two_sample_ttest(&big, &big)? > 0.9, "t-test identical".into());
    let g0: Vec<f64> = (0..100).map(|_| rng.sample(StandardNormal)).collect();
    let g5: Vec<f64> = (0..100).map(|_| 5.0 + rng.sample::<f64, _>(StandardNormal)).collect();
    check(two_sample_ttest(&g0, &g5)? < 1e-10, "t-test separated".into());
    check(two_sample_ttest(&g0, &g5)? == two_sample_ttest(&g5, &g0)?, "t-test symmetry".into());
    let low: Vec<f64> = (0..50).map(|i| i as f64).collect();
    let high: Vec<f64> = (0..50).map(|i| 100.0 + i as f64).collect();
    check(mann_whitney_u(&low, &high)? < 1e-10, "Mann-Whitney separated".into());
    check(mann_whitney_u(&g0, &g0)? > 0.9, "Mann-Whitney identical".into());
    let exp = |s: &[f64]| s.iter().map(|x| x.exp()).collect::<Vec<_>>();
    check(mann_whitney_u(&g0, &big)? == mann_whitney_u(&exp(&g0), &exp(&big))?, "Mann-Whitney monotone invariance".into());

    outcome(failures.is_empty(), if failures.is_empty() { "all metric examples hold".into() } else { format!("failed: {}", failures.join(", ")) })
}

// ---------------------------------------------------------------- criterion 10

fn random_frame(rng: &mut ChaCha8Rng) -> [Point3; 3] {
    loop {
        let f: [Point3; 3] = std::array::from_fn(|_| std::array::from_fn(|_| 2.0 * rng.sample::<f64, _>(StandardNormal)));
        let n = vec3::norm(vec3::cross(vec3::sub(f[1], f[0]), vec3::sub(f[2], f[1])));
        if n > 0.5 && vec3::dist(f[0], f[1]) > 0.5 && vec3::dist(f[1], f[2]) > 0.5 {
            return f;
        }
    }
}

fn nerf() -> Res<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let (mut round_trip, mut equivariance) = (0.0f64, 0.0f64);
    for _ in 0..1000 {
        let len = rng.gen_range(1..=8);
        let links: Vec<LinkGeometry> =
            (0..len).map(|_| LinkGeometry::new(rng.gen_range(0.8..2.0), rng.gen_range(1.2..2.8))).collect::<Result<_, _>>()?;
        let angles: Vec<Angle> = (0..len).map(|_| Angle::new(rng.gen_range(-PI..PI))).collect::<Result<_, _>>()?;
        let chain = AngleChain::new(angles, vec![true; len], links)?;
        let frame = random_frame(&mut rng);
        let pts = chain_to_coords(&chain, &frame)?;
        let back = coords_to_angles(&pts, &frame)?;
        for i in 0..len {
            round_trip = round_trip
                .max(wrapped_diff(back.angles[i].value(), chain.angles[i].value()).abs())
                .max((back.links[i].bond_length - chain.links[i].bond_length).abs())
                .max((back.links[i].bond_angle - chain.links[i].bond_angle).abs());
        }
        let q: [f64; 4] = std::array::from_fn(|_| rng.sample(StandardNormal));
        let rot = vec3::rotation_from_quaternion(q);
        let shift: Point3 = std::array::from_fn(|_| rng.gen_range(-10.0..10.0));
        let moved = |p: Point3| vec3::add(vec3::mat_apply(&rot, p), shift);
        let moved_frame = frame.map(moved);
        for (a, b) in chain_to_coords(&chain, &moved_frame)?.iter().zip(&pts) {
            equivariance = equivariance.max(vec3::dist(*a, moved(*b)));
        }
    }
    outcome(
        round_trip < 1e-9 && equivariance < 1e-9,
        format!("1000 chains: round-trip error {round_trip:.1e} (< 1e-9); rigid-motion error {equivariance:.1e} (< 1e-9)"),
    )
}

// ---------------------------------------------------------------- driver

fn report(results: &mut Vec<(usize, bool)>, id: usize, title: &str, r: Res<Outcome>) {
    let (pass, detail) = match r {
        Ok(o) => (o.pass, o.detail),
        Err(e) => (false, format!("error: {e}")),
    };
    println!("{} criterion {id:>2} {title}: {detail}", if pass { "PASS" } else { "FAIL" });
    results.push((id, pass));
}

fn main() {
    // `cargo test -- --list` and filters come through here too
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let mut results = Vec::new();
    report(&mut results, 1, "bridge marginals", bridge_marginals());
    report(&mut results, 2, "flow paths", flow_paths());
    report(&mut results, 3, "autodiff", gradients());
    report(&mut results, 9, "metric suite", metric_suite());
    report(&mut results, 10, "NERF", nerf());

    match shared_model() {
        Ok(shared) => {
            let generated = shared
                .generator()
                .generate_many(shared.half_b(), 1, &sampler(SizeMode::Histogram), GEN_SEED);
            match generated {
                Ok(generated) => {
                    report(&mut results, 4, "distribution learning", distribution_learning(&shared, &generated));
                    report(&mut results, 5, "uncertainty", uncertainty(&shared, &generated));
                    report(&mut results, 6, "virtual nodes", virtual_nodes(&shared));
                    report(&mut results, 7, "torsion modes", torsion_modes(&shared));
                    report(&mut results, 8, "preference alignment", alignment(&shared, &generated));
                }
                Err(e) => {
                    for (id, title) in [(4, "distribution learning"), (5, "uncertainty"), (8, "preference alignment")] {
                        report(&mut results, id, title, Err(format!("sampling failed: {e}").into()));
                    }
                    report(&mut results, 6, "virtual nodes", virtual_nodes(&shared));
                    report(&mut results, 7, "torsion modes", torsion_modes(&shared));
                }
            }
        }
        Err(e) => {
            for (id, title) in [(4, "distribution learning"), (5, "uncertainty"), (6, "virtual nodes"), (7, "torsion modes"), (8, "preference alignment")] {
                report(&mut results, id, title, Err(format!("training failed: {e}").into()));
            }
        }
    }

    results.sort();
    let failed: Vec<usize> = results.iter().filter(|r| !r.1).map(|r| r.0).collect();
    println!("acceptance: {} passed, {} failed {failed:?}", results.len() - failed.len(), failed.len());
    if !failed.is_empty() && std::env::var("FLOWBRIDGE_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}
