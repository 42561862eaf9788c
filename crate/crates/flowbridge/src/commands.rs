use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use flowbridge_core::alignment::{self, PreferencePair, PropertyCriterion};
use flowbridge_core::backbone::{
    self, BackboneModel, CategoryPriors, Checkpoint, Generator, SizeHistogram, SizeMode, TrainState,
};
use flowbridge_core::evaluation::{
    bootstrap_metric, jsd_histogram_1d, jsd_joint_histogram, jsd_labels, mann_whitney_u, two_sample_ttest, wasserstein1,
    MetricReport, PValueEntry, SampleTable, TableSchema,
};
use flowbridge_core::io::{read_json, read_jsonl, write_json, write_jsonl};
use flowbridge_core::molecule::{PointCloudMolecule, Vocabulary};
use flowbridge_core::toydata::{generate_dataset, is_valid, property_oracles};

use crate::config::{load, AlignRunConfig, EvalRunConfig, GenDataConfig, SampleRunConfig, TrainRunConfig};
use crate::error::CliError;
use crate::tables::{read_table, write_history, RowWriter};
use crate::CommonArgs;

type Result<T> = std::result::Result<T, CliError>;

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Sidecar written next to every dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetStats {
    pub n_rows: usize,
    pub vocabulary: Vocabulary,
    /// `p(N | m)` counts: context size → ligand size → count.
    pub size_histogram: SizeHistogram,
    pub atom_type_counts: Vec<u64>,
    pub bond_type_counts: Vec<u64>,
}

fn dataset_stats(data: &[PointCloudMolecule], vocab: Vocabulary) -> DatasetStats {
    let mut atoms = vec![0; vocab.n_atom_types];
    let mut bonds = vec![0; vocab.n_bond_types];
    for m in data {
        for &t in &m.atom_types {
            atoms[t] += 1;
        }
        for i in 0..m.n_atoms() {
            for j in i + 1..m.n_atoms() {
                bonds[m.bonds[i][j]] += 1;
            }
        }
    }
    DatasetStats { n_rows: data.len(), vocabulary: vocab, size_histogram: SizeHistogram::from_dataset(data), atom_type_counts: atoms, bond_type_counts: bonds }
}

const PROPERTY_HEADER: [&str; 4] = ["compactness", "type_balance", "clash_score", "valid"];

fn property_cells(mol: &PointCloudMolecule, vocab: &Vocabulary, clash_radius: f64, tol: f64) -> Vec<String> {
    let p = property_oracles(mol, vocab, clash_radius);
    vec![
        p.compactness.to_string(),
        p.type_balance.to_string(),
        p.clash_score.to_string(),
        is_valid(mol, vocab, clash_radius, tol).to_string(),
    ]
}

pub fn gen_data(args: &CommonArgs) -> Result<()> {
    let mut cfg: GenDataConfig = load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.dataset.seed = seed;
    }
    cfg.dataset.validate()?;
    let data = generate_dataset(&cfg.dataset)?;
    let vocab = cfg.dataset.vocabulary();
    write_jsonl(&cfg.output, &data)?;
    let stats_path = cfg.stats.clone().unwrap_or_else(|| with_suffix(&cfg.output, ".stats.json"));
    write_json(&stats_path, &dataset_stats(&data, vocab))?;
    if let Some(path) = &cfg.table {
        let mut header = vec!["context_id", "n_atoms"];
        header.extend(PROPERTY_HEADER);
        let mut w = RowWriter::create(path, &header)?;
        for m in &data {
            let mut cells = vec![m.id.to_string(), m.n_atoms().to_string()];
            cells.extend(property_cells(m, &vocab, cfg.dataset.clash_radius, 0.0));
            w.row(&cells)?;
        }
        w.finish()?;
    }
    log::info!("wrote {} complexes to {}", data.len(), cfg.output.display());
    Ok(())
}

fn read_data(path: &Path) -> Result<Vec<PointCloudMolecule>> {
    Ok(read_jsonl(path)?)
}

fn vocabulary_for(cfg: &TrainRunConfig) -> Result<Vocabulary> {
    if let Some(v) = cfg.vocabulary {
        return Ok(v);
    }
    let sidecar = with_suffix(&cfg.data, ".stats.json");
    if !sidecar.exists() {
        return Err(CliError::Config(format!("no `vocabulary` given and no stats sidecar at {}", sidecar.display())));
    }
    let stats: DatasetStats = read_json(&sidecar)?;
    Ok(stats.vocabulary)
}

pub fn train(args: &CommonArgs) -> Result<()> {
    let mut cfg: TrainRunConfig = load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.train.optim.seed = seed;
        cfg.train.init_seed = seed;
    }
    cfg.train.validate()?;
    let data = read_data(&cfg.data)?;
    let mut ck = match &cfg.resume {
        Some(path) => {
            let mut ck = Checkpoint::load(path)?;
            if ck.model.config != cfg.train.model || ck.objective != cfg.train.objective {
                return Err(flowbridge_core::Error::CheckpointMismatch(
                    "resumed checkpoint was trained with a different model or objective".into(),
                )
                .into());
            }
            ck.optim = cfg.train.optim;
            ck
        }
        None => {
            let vocab = vocabulary_for(&cfg)?;
            let t = &cfg.train;
            let priors = CategoryPriors::build(t.prior, &data, &vocab, t.objective.n_max_virtual)?;
            let model = BackboneModel::new(t.model, vocab, t.init_seed)?;
            Checkpoint::new(model, t.objective, t.optim, priors, SizeHistogram::from_dataset(&data))
        }
    };
    let result = backbone::train(&mut ck.model, &mut ck.state, &data, &ck.priors, &ck.objective, &ck.optim);
    if let Some(h) = &cfg.history {
        write_history(h, &ck.state.history)?;
    }
    result?;
    ck.save(&cfg.output)?;
    log::info!("trained to step {}; checkpoint {}", ck.state.step, cfg.output.display());
    Ok(())
}

fn criteria_for(cfg: &AlignRunConfig, samples: &[PointCloudMolecule], vocab: &Vocabulary) -> Result<Vec<PropertyCriterion>> {
    if cfg.criteria.is_empty() {
        return Err(CliError::Config("at least one pairing criterion is required".into()));
    }
    cfg.criteria
        .iter()
        .map(|c| {
            let t = match c.threshold {
                Some(t) => t,
                None => alignment::scaled_threshold(samples, &c.name, vocab, cfg.clash_radius)?,
            };
            let crit = c.resolve(t);
            crit.validate()?;
            Ok(crit)
        })
        .collect()
}

fn preference_pairs(cfg: &AlignRunConfig, ck: &Checkpoint, seed: u64) -> Result<Vec<PreferencePair>> {
    if let Some(path) = &cfg.pairs {
        return Ok(read_jsonl(path)?);
    }
    let Some(ctx_path) = &cfg.contexts else {
        return Err(CliError::Config("either `pairs` or `contexts` is required".into()));
    };
    let mut contexts = read_data(ctx_path)?;
    if let Some(n) = cfg.max_contexts {
        contexts.truncate(n);
    }
    let samples = Generator::from_checkpoint(ck).generate_many(&contexts, cfg.per_context, &cfg.sampler, seed)?;
    let mols: Vec<PointCloudMolecule> = samples.into_iter().map(|s| s.molecule).collect();
    let nonempty: Vec<PointCloudMolecule> = mols.iter().filter(|m| m.n_atoms() > 0).cloned().collect();
    let criteria = criteria_for(cfg, &nonempty, &ck.model.vocab)?;
    let mut pairs = Vec::new();
    for (ctx, chunk) in contexts.iter().zip(mols.chunks(cfg.per_context.max(1))) {
        let group: Vec<PointCloudMolecule> = chunk.iter().filter(|m| m.n_atoms() > 0).cloned().collect();
        let found = alignment::pair_samples(ctx.id, &group, &criteria, &ck.model.vocab, cfg.clash_radius)?;
        if found.is_empty() {
            log::warn!("context {}: no qualifying preference pair, skipped", ctx.id);
        }
        pairs.extend(found);
    }
    if let Some(out) = &cfg.pairs_output {
        write_jsonl(out, &pairs)?;
    }
    log::info!("{} preference pairs from {} contexts", pairs.len(), contexts.len());
    Ok(pairs)
}

fn load_align(args: &CommonArgs) -> Result<(AlignRunConfig, Checkpoint, Vec<PreferencePair>)> {
    let mut cfg: AlignRunConfig = load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
        cfg.alignment.optim.seed = seed;
    }
    cfg.alignment.optim.validate()?;
    cfg.alignment.weights.validate()?;
    let ck = Checkpoint::load(&cfg.checkpoint)?;
    let pairs = preference_pairs(&cfg, &ck, cfg.seed)?;
    if pairs.is_empty() {
        return Err(CliError::Config("no preference pairs".into()));
    }
    Ok((cfg, ck, pairs))
}

fn save_tuned(cfg: &AlignRunConfig, reference: &Checkpoint, model: BackboneModel, state: TrainState) -> Result<()> {
    if let Some(h) = &cfg.history {
        write_history(h, &state.history)?;
    }
    let ck = Checkpoint { model, state, optim: cfg.alignment.optim, ..reference.clone() };
    ck.save(&cfg.output)?;
    Ok(())
}

pub fn align(args: &CommonArgs) -> Result<()> {
    let (cfg, ck, pairs) = load_align(args)?;
    let validation = match &cfg.validation {
        Some(p) => read_data(p)?,
        None => Vec::new(),
    };
    let out = alignment::align(&ck.model, &pairs, &ck.priors, &ck.size_histogram, &ck.objective, &cfg.alignment, &validation)?;
    if let Some(e) = out.selected_epoch {
        log::info!("kept epoch {e} (validity {:?})", out.validity);
    }
    save_tuned(&cfg, &ck, out.model, out.state)
}

pub fn finetune(args: &CommonArgs) -> Result<()> {
    let (cfg, ck, pairs) = load_align(args)?;
    let (model, state) = alignment::finetune(&ck.model, &alignment::winners(&pairs), &ck.priors, &ck.objective, &cfg.alignment.optim)?;
    save_tuned(&cfg, &ck, model, state)
}

#[derive(Debug, Serialize)]
struct SampleRecord<'a> {
    context_id: u64,
    sample: usize,
    removed: usize,
    n_nodes: usize,
    sigma_tot: &'a [f64],
    molecule: &'a PointCloudMolecule,
}

pub fn sample(args: &CommonArgs, fixed_ligand: bool, extra_nodes: Option<usize>) -> Result<()> {
    let mut cfg: SampleRunConfig = load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if fixed_ligand {
        cfg.sampler.fixed_ligand = true;
    }
    if let Some(k) = extra_nodes {
        cfg.sampler.size = SizeMode::TruePlus(k);
    }
    let ck = Checkpoint::load(&cfg.checkpoint)?;
    let mut contexts = read_data(&cfg.contexts)?;
    if let Some(n) = cfg.max_contexts {
        contexts.truncate(n);
    }
    let samples = Generator::from_checkpoint(&ck).generate_many(&contexts, cfg.n_per_context, &cfg.sampler, cfg.seed)?;
    let vocab = ck.model.vocab;
    let per = cfg.n_per_context.max(1);
    let records: Vec<SampleRecord> = samples
        .iter()
        .enumerate()
        .map(|(i, s)| SampleRecord {
            context_id: contexts[i / per].id,
            sample: i % per,
            removed: s.removed,
            n_nodes: s.n_nodes,
            sigma_tot: &s.sigma_tot,
            molecule: &s.molecule,
        })
        .collect();
    write_jsonl(&cfg.output, &records)?;

    let table = cfg.table.clone().unwrap_or_else(|| with_suffix(&cfg.output, ".csv"));
    let mut header = vec!["context_id", "sample", "n_atoms", "n_nodes", "removed", "sigma_tot"];
    header.extend(PROPERTY_HEADER);
    let mut w = RowWriter::create(&table, &header)?;
    for (r, s) in records.iter().zip(&samples) {
        let sigma = if s.sigma_tot.is_empty() { 0.0 } else { s.sigma_tot.iter().sum::<f64>() / s.sigma_tot.len() as f64 };
        let mut cells = vec![
            r.context_id.to_string(),
            r.sample.to_string(),
            s.molecule.n_atoms().to_string(),
            s.n_nodes.to_string(),
            s.removed.to_string(),
            sigma.to_string(),
        ];
        cells.extend(property_cells(&s.molecule, &vocab, cfg.clash_radius, cfg.tol));
        w.row(&cells)?;
    }
    w.finish()?;
    log::info!("wrote {} samples to {}", records.len(), cfg.output.display());
    Ok(())
}

/// Metric of `rows` of `other` against the full reference.
type RowMetric<'a> = Box<dyn Fn(&SampleTable) -> flowbridge_core::Result<f64> + 'a>;

fn row_metrics<'a>(reference: &'a SampleTable, cfg: &'a EvalRunConfig, schema: &'a TableSchema) -> Vec<(String, RowMetric<'a>)> {
    let mut out: Vec<(String, RowMetric<'a>)> = Vec::new();
    for c in &schema.continuous {
        out.push((format!("w1/{c}"), Box::new(move |t: &SampleTable| wasserstein1(reference.column(c)?, t.column(c)?))));
        out.push((
            format!("jsd/{c}"),
            Box::new(move |t: &SampleTable| jsd_histogram_1d(reference.column(c)?, t.column(c)?, cfg.hist_bins)),
        ));
    }
    for c in &schema.categorical {
        out.push((format!("jsd/{c}"), Box::new(move |t: &SampleTable| jsd_labels(&reference.categorical[c], &t.categorical[c]))));
    }
    if !cfg.joint_columns.is_empty() {
        out.push((
            "joint_jsd".into(),
            Box::new(move |t: &SampleTable| {
                let cols: Vec<&str> = cfg.joint_columns.iter().map(String::as_str).collect();
                jsd_joint_histogram(reference, t, &cols, cfg.joint_bins)
            }),
        ));
    }
    out
}

pub fn eval(args: &CommonArgs) -> Result<()> {
    let mut cfg: EvalRunConfig = load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let schema: TableSchema = load(&cfg.schema)?;
    for c in &cfg.joint_columns {
        if !schema.continuous.contains(c) {
            return Err(CliError::Schema(format!("joint column `{c}` is not a continuous schema column")));
        }
    }
    let reference = read_table(&cfg.reference, &schema)?;
    let mut groups: BTreeMap<String, SampleTable> = BTreeMap::new();
    groups.insert("samples".into(), read_table(&cfg.samples, &schema)?);
    for (name, path) in &cfg.others {
        if name == "samples" || name == "reference" {
            return Err(CliError::Config(format!("group name `{name}` is reserved")));
        }
        groups.insert(name.clone(), read_table(path, &schema)?);
    }
    if reference.n_rows() == 0 || groups.values().any(|g| g.n_rows() == 0) {
        return Err(CliError::Schema("every table needs at least one row".into()));
    }

    let mut report = MetricReport::default();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let metrics = row_metrics(&reference, &cfg, &schema);
    for (group, table) in &groups {
        let rows: Vec<usize> = (0..table.n_rows()).collect();
        for (name, metric) in &metrics {
            let value = metric(table)?;
            let boot = bootstrap_metric(|_: &[usize], b: &[usize]| metric(&table.select(b)), &[], &rows, cfg.n_boot, cfg.boot_size, &mut rng)?;
            let label = if group == "samples" { name.clone() } else { format!("{name}@{group}") };
            report.push(label, value, Some(boot));
        }
    }

    let mut all: Vec<(&str, &SampleTable)> = vec![("reference", &reference)];
    all.extend(groups.iter().map(|(k, v)| (k.as_str(), v)));
    for c in &schema.continuous {
        for i in 0..all.len() {
            for j in i + 1..all.len() {
                let (x, y) = (all[i].1.column(c)?, all[j].1.column(c)?);
                for (test, p) in [("mann_whitney", mann_whitney_u(x, y)?), ("t_test", if x.len() >= 2 && y.len() >= 2 { two_sample_ttest(x, y)? } else { 1.0 })] {
                    for (a, b) in [(all[i].0, all[j].0), (all[j].0, all[i].0)] {
                        report.p_values.push(PValueEntry { metric: c.clone(), group_a: a.into(), group_b: b.into(), test: test.into(), p_value: p });
                    }
                }
            }
        }
    }
    report.validate()?;
    write_json(&cfg.output_json, &report)?;

    let mut w = RowWriter::create(&cfg.output_csv, &["kind", "name", "group_a", "group_b", "value", "bootstrap_mean", "bootstrap_std"])?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for m in &report.metrics {
        w.row(&["metric".into(), m.name.clone(), String::new(), String::new(), m.value.to_string(), opt(m.bootstrap_mean), opt(m.bootstrap_std)])?;
    }
    for p in &report.p_values {
        w.row(&["p_value".into(), format!("{}/{}", p.test, p.metric), p.group_a.clone(), p.group_b.clone(), p.p_value.to_string(), String::new(), String::new()])?;
    }
    w.finish()?;
    Ok(())
}
