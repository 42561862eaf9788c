//! Preference pairs, the multi-domain preference loss, and the alignment and
//! fine-tuning loops.
//!
//! For a pair `(w, l)` scored at a shared time `t`,
//! `Δ_c = ℒ_c(φ) − ℒ_c(θ)` per domain `c ∈ {coord, atom, bond}` and
//! `ℒ = λ_mdpa · softplus(β t Σ_c λ_c (Δ_c^w − Δ_c^l)) + λ_w ℒ^w(φ) + λ_l ℒ^l(φ)`,
//! where `softplus(x) = −log σ(−x)`.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::loss::{draw_noise_at, evaluate_draw, record_loss, LossBreakdown, LossVars, NoiseDraw, ObjectiveConfig};
use crate::backbone::train::{run_epochs, train, ItemLoss, OptimConfig, TrainState};
use crate::backbone::{BackboneModel, CategoryPriors, Generator, SamplerConfig};
use crate::error::{Error, Result};
use crate::evaluation::variance;
use crate::molecule::{PointCloudMolecule, Vocabulary};
use crate::tape::{Tape, Var};
use crate::toydata::{is_valid, property_oracles};

/// One toy property used for pairing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PropertyCriterion {
    /// `compactness`, `type_balance` or `clash_score`.
    pub name: String,
    pub higher_is_better: bool,
    /// Minimum gap in the preferred direction.
    pub threshold: f64,
}

impl PropertyCriterion {
    pub fn validate(&self) -> Result<()> {
        if crate::toydata::Properties::default_names().iter().all(|n| *n != self.name) {
            return Err(Error::Config(format!("unknown property `{}`", self.name)));
        }
        if !(self.threshold.is_finite() && self.threshold >= 0.0) {
            return Err(Error::Config("pairing threshold must be >= 0".into()));
        }
        Ok(())
    }

    /// Signed gap `a − b` in the preferred direction.
    fn gap(&self, a: &BTreeMap<String, f64>, b: &BTreeMap<String, f64>) -> f64 {
        let d = a[&self.name] - b[&self.name];
        if self.higher_is_better {
            d
        } else {
            -d
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub context_id: u64,
    pub winner: PointCloudMolecule,
    pub loser: PointCloudMolecule,
    pub winner_properties: BTreeMap<String, f64>,
    pub loser_properties: BTreeMap<String, f64>,
}

/// Named toy property values of `mol`.
pub fn property_map(mol: &PointCloudMolecule, vocab: &Vocabulary, clash_radius: f64) -> BTreeMap<String, f64> {
    let p = property_oracles(mol, vocab, clash_radius);
    crate::toydata::Properties::default_names().iter().map(|n| (n.to_string(), p.get(n).unwrap_or(f64::NAN))).collect()
}

/// `0.25 ·` sample standard deviation of `name` over `samples`.
pub fn scaled_threshold(samples: &[PointCloudMolecule], name: &str, vocab: &Vocabulary, clash_radius: f64) -> Result<f64> {
    let values: Vec<f64> = samples.iter().map(|m| property_map(m, vocab, clash_radius)[name]).collect();
    if values.len() < 2 {
        return Err(Error::Empty("need two samples for a spread"));
    }
    Ok(0.25 * variance(&values).sqrt())
}

/// Every unordered pair of samples from one context in which one member beats the
/// other by more than the threshold on every criterion. A single criterion gives
/// the single-property mode; several give the combined mode.
pub fn pair_samples(
    context_id: u64,
    samples: &[PointCloudMolecule],
    criteria: &[PropertyCriterion],
    vocab: &Vocabulary,
    clash_radius: f64,
) -> Result<Vec<PreferencePair>> {
    if criteria.is_empty() {
        return Err(Error::Config("at least one pairing criterion is required".into()));
    }
    for c in criteria {
        c.validate()?;
    }
    let props: Vec<_> = samples.iter().map(|m| property_map(m, vocab, clash_radius)).collect();
    let mut out = Vec::new();
    for a in 0..samples.len() {
        for b in a + 1..samples.len() {
            let gaps: Vec<f64> = criteria.iter().map(|c| c.gap(&props[a], &props[b])).collect();
            let (w, l) = if gaps.iter().zip(criteria).all(|(g, c)| *g > c.threshold) {
                (a, b)
            } else if gaps.iter().zip(criteria).all(|(g, c)| -*g > c.threshold) {
                (b, a)
            } else {
                continue;
            };
            out.push(PreferencePair {
                context_id,
                winner: samples[w].clone(),
                loser: samples[l].clone(),
                winner_properties: props[w].clone(),
                loser_properties: props[l].clone(),
            });
        }
    }
    Ok(out)
}

/// Samples `per_context` molecules from the reference for each context and pairs
/// them. Contexts without a qualifying pair are skipped with a warning.
pub fn build_preference_dataset(
    generator: &Generator,
    contexts: &[PointCloudMolecule],
    per_context: usize,
    sampler: &SamplerConfig,
    criteria: &[PropertyCriterion],
    clash_radius: f64,
    seed: u64,
) -> Result<Vec<PreferencePair>> {
    let samples = generator.generate_many(contexts, per_context, sampler, seed)?;
    let mut out = Vec::new();
    for (ctx, chunk) in contexts.iter().zip(samples.chunks(per_context.max(1))) {
        let mols: Vec<_> = chunk.iter().map(|g| g.molecule.clone()).collect();
        let pairs = pair_samples(ctx.id, &mols, criteria, &generator.model.vocab, clash_radius)?;
        if pairs.is_empty() {
            log::warn!("context {}: no qualifying preference pair, skipped", ctx.id);
        }
        out.extend(pairs);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MdpaWeights {
    pub beta: f64,
    pub lambda_coord: f64,
    pub lambda_atom: f64,
    pub lambda_bond: f64,
    pub lambda_w: f64,
    pub lambda_l: f64,
    pub lambda_mdpa: f64,
}

impl Default for MdpaWeights {
    fn default() -> Self {
        Self { beta: 100.0, lambda_coord: 1.0, lambda_atom: 0.5, lambda_bond: 0.5, lambda_w: 1.0, lambda_l: 0.2, lambda_mdpa: 1.0 }
    }
}

impl MdpaWeights {
    /// Weights under which the loss is plain fine-tuning on winners.
    pub fn finetune() -> Self {
        Self { lambda_mdpa: 0.0, lambda_l: 0.0, lambda_w: 1.0, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.beta, self.lambda_coord, self.lambda_atom, self.lambda_bond, self.lambda_w, self.lambda_l, self.lambda_mdpa];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config("alignment weights must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// Validity-based checkpoint selection during alignment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SelectionConfig {
    pub per_context: usize,
    pub sampler: SamplerConfig,
    pub clash_radius: f64,
    /// Slack on the bond distance bands.
    pub tol: f64,
    pub seed: u64,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self { per_context: 2, sampler: SamplerConfig { n_steps: 100, ..Default::default() }, clash_radius: 1.2, tol: 0.1, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlignmentConfig {
    pub weights: MdpaWeights,
    pub optim: OptimConfig,
    /// Pick the epoch whose samples on the validation contexts are most often valid.
    pub selection: Option<SelectionConfig>,
}

impl Default for AlignmentConfig {
    fn default() -> Self {
        Self { weights: MdpaWeights::default(), optim: OptimConfig::default(), selection: None }
    }
}

/// Noise for both members of a pair at one shared time.
#[derive(Debug, Clone, PartialEq)]
pub struct PairDraw {
    pub winner: NoiseDraw,
    pub loser: NoiseDraw,
}

impl PairDraw {
    pub fn t(&self) -> f64 {
        self.winner.t()
    }
}

pub fn draw_pair<R: Rng + ?Sized>(
    pair: &PreferencePair,
    vocab: &Vocabulary,
    priors: &CategoryPriors,
    objective: &ObjectiveConfig,
    rng: &mut R,
) -> Result<PairDraw> {
    let t_index = rng.gen_range(0..objective.n_steps);
    let winner = draw_noise_at(&pair.winner, vocab, priors, objective, Some(t_index), rng)?;
    let loser = draw_noise_at(&pair.loser, vocab, priors, objective, Some(t_index), rng)?;
    Ok(PairDraw { winner, loser })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MdpaBreakdown {
    pub total: f64,
    /// Argument of the softplus, `β t Σ_c λ_c (Δ_c^w − Δ_c^l)`.
    pub preference_logit: f64,
    /// `[coord, atom, bond]`
    pub delta_winner: [f64; 3],
    pub delta_loser: [f64; 3],
    pub winner: LossBreakdown,
    pub loser: LossBreakdown,
}

fn domains(l: &LossVars) -> [Var; 3] {
    [l.coord, l.atom, l.bond]
}

fn domain_values(l: &LossBreakdown) -> [f64; 3] {
    [l.coord, l.atom, l.bond]
}

struct MdpaVars {
    total: Var,
    logit: Var,
    delta_w: [Var; 3],
    delta_l: [Var; 3],
    winner: LossVars,
    loser: LossVars,
}

fn record_mdpa(
    tape: &mut Tape,
    aligned: &BackboneModel,
    reference: &BackboneModel,
    draw: &PairDraw,
    objective: &ObjectiveConfig,
    w: &MdpaWeights,
) -> Result<MdpaVars> {
    let (_, lw) = record_loss(tape, aligned, &draw.winner, objective)?;
    let (_, ll) = record_loss(tape, aligned, &draw.loser, objective)?;
    let rw = domain_values(&evaluate_draw(reference, &draw.winner, objective)?.0);
    let rl = domain_values(&evaluate_draw(reference, &draw.loser, objective)?.0);
    let lambdas = [w.lambda_coord, w.lambda_atom, w.lambda_bond];
    let mut delta_w = [lw.coord; 3];
    let mut delta_l = [ll.coord; 3];
    let mut sum = tape.scalar_const(0.0);
    for c in 0..3 {
        let ref_w = tape.scalar_const(rw[c]);
        let ref_l = tape.scalar_const(rl[c]);
        delta_w[c] = tape.sub(domains(&lw)[c], ref_w)?;
        delta_l[c] = tape.sub(domains(&ll)[c], ref_l)?;
        let diff = tape.sub(delta_w[c], delta_l[c])?;
        let term = tape.scale(diff, lambdas[c]);
        sum = tape.add(sum, term)?;
    }
    let logit = tape.scale(sum, w.beta * draw.t());
    let pref = tape.softplus(logit);
    let pref = tape.scale(pref, w.lambda_mdpa);
    let win = tape.scale(lw.total, w.lambda_w);
    let lose = tape.scale(ll.total, w.lambda_l);
    let total = tape.add(pref, win)?;
    let total = tape.add(total, lose)?;
    Ok(MdpaVars { total, logit, delta_w, delta_l, winner: lw, loser: ll })
}

fn read_mdpa(tape: &Tape, v: &MdpaVars) -> MdpaBreakdown {
    MdpaBreakdown {
        total: tape.scalar(v.total),
        preference_logit: tape.scalar(v.logit),
        delta_winner: v.delta_w.map(|x| tape.scalar(x)),
        delta_loser: v.delta_l.map(|x| tape.scalar(x)),
        winner: v.winner.read(tape),
        loser: v.loser.read(tape),
    }
}

/// Loss of `aligned` against the frozen `reference` on one pair draw.
pub fn mdpa_loss(
    aligned: &BackboneModel,
    reference: &BackboneModel,
    draw: &PairDraw,
    objective: &ObjectiveConfig,
    weights: &MdpaWeights,
) -> Result<MdpaBreakdown> {
    check_compatible(aligned, reference)?;
    let mut tape = Tape::new(&aligned.params);
    let v = record_mdpa(&mut tape, aligned, reference, draw, objective, weights)?;
    Ok(read_mdpa(&tape, &v))
}

/// [`mdpa_loss`] with its gradient with respect to the aligned parameters.
pub fn mdpa_loss_and_grad(
    aligned: &BackboneModel,
    reference: &BackboneModel,
    draw: &PairDraw,
    objective: &ObjectiveConfig,
    weights: &MdpaWeights,
) -> Result<(MdpaBreakdown, Vec<f64>)> {
    check_compatible(aligned, reference)?;
    let mut tape = Tape::new(&aligned.params);
    let v = record_mdpa(&mut tape, aligned, reference, draw, objective, weights)?;
    let grad = tape.backward(v.total)?;
    Ok((read_mdpa(&tape, &v), grad))
}

fn check_compatible(a: &BackboneModel, b: &BackboneModel) -> Result<()> {
    if a.config != b.config || a.vocab != b.vocab || a.params.len() != b.params.len() {
        return Err(Error::CheckpointMismatch("aligned and reference models differ in architecture".into()));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignOutcome {
    pub model: BackboneModel,
    pub state: TrainState,
    /// Validity fraction after each epoch when selection is on.
    pub validity: Vec<f64>,
    /// Epoch whose parameters were kept; `None` means the final parameters.
    pub selected_epoch: Option<usize>,
}

/// Fraction of molecules sampled by `generator` on `contexts` that pass [`is_valid`].
pub fn validity_fraction(generator: &Generator, contexts: &[PointCloudMolecule], sel: &SelectionConfig) -> Result<f64> {
    let samples = generator.generate_many(contexts, sel.per_context, &sel.sampler, sel.seed)?;
    if samples.is_empty() {
        return Ok(0.0);
    }
    let vocab = &generator.model.vocab;
    let ok = samples.iter().filter(|s| is_valid(&s.molecule, vocab, sel.clash_radius, sel.tol)).count();
    Ok(ok as f64 / samples.len() as f64)
}

/// Trains a copy of `reference` on the preference loss. The reference itself is
/// never modified.
#[allow(clippy::too_many_arguments)]
pub fn align(
    reference: &BackboneModel,
    pairs: &[PreferencePair],
    priors: &CategoryPriors,
    sizes: &crate::backbone::SizeHistogram,
    objective: &ObjectiveConfig,
    cfg: &AlignmentConfig,
    validation: &[PointCloudMolecule],
) -> Result<AlignOutcome> {
    cfg.weights.validate()?;
    if pairs.is_empty() {
        return Err(Error::Empty("preference pairs"));
    }
    let mut model = reference.clone();
    let mut state = TrainState::new(model.n_params());
    let mut validity = Vec::new();
    let mut best: Option<(f64, usize, Vec<f64>)> = None;
    let item = |i: usize, rng: &mut ChaCha8Rng, m: &BackboneModel| -> Result<ItemLoss> {
        let draw = draw_pair(&pairs[i], &m.vocab, priors, objective, rng)?;
        let (b, grad) = mdpa_loss_and_grad(m, reference, &draw, objective, &cfg.weights)?;
        let loss = LossBreakdown { total: b.total, ..b.winner };
        Ok(ItemLoss { loss, grad, sigma2_sum: 0.0, n_atoms: 0 })
    };
    let mut on_epoch = |epoch: usize, m: &BackboneModel| -> Result<()> {
        if let Some(sel) = &cfg.selection {
            if !validation.is_empty() {
                let g = Generator { model: m, priors, sizes, objective };
                let v = validity_fraction(&g, validation, sel)?;
                log::info!("alignment epoch {epoch}: validity {v:.3}");
                validity.push(v);
                if best.as_ref().map_or(true, |(b, _, _)| v >= *b) {
                    best = Some((v, epoch, m.params.clone()));
                }
            }
        }
        Ok(())
    };
    run_epochs(&mut model, &mut state, pairs.len(), &cfg.optim, item, &mut on_epoch)?;
    let selected_epoch = match best {
        Some((_, epoch, params)) => {
            model.params = params;
            Some(epoch)
        }
        None => None,
    };
    Ok(AlignOutcome { model, state, validity, selected_epoch })
}

/// Fine-tuning baseline: standard training of a copy of `reference` on winners only.
pub fn finetune(
    reference: &BackboneModel,
    winners: &[PointCloudMolecule],
    priors: &CategoryPriors,
    objective: &ObjectiveConfig,
    optim: &OptimConfig,
) -> Result<(BackboneModel, TrainState)> {
    let mut model = reference.clone();
    let mut state = TrainState::new(model.n_params());
    train(&mut model, &mut state, winners, priors, objective, optim)?;
    Ok((model, state))
}

pub fn winners(pairs: &[PreferencePair]) -> Vec<PointCloudMolecule> {
    pairs.iter().map(|p| p.winner.clone()).collect()
}
