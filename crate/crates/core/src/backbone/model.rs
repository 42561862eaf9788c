//! Distance-feature network with a difference-vector velocity head.
//!
//! All inputs reach the dense layers through distances, type one-hots and time
//! features, so every head except velocity is invariant to rigid motions. The
//! velocity of atom `i` is
//! `Σ_j w_ij (x_j − x_i) / n + Σ_c u_ic (p_c − x_i) / m`
//! with scalar weights from pair networks, which makes it rotation-equivariant
//! and translation-invariant by construction.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_same_len, Error, Result};
use crate::geometry::vec3::{self, Point3};
use crate::geometry::chain_to_coords;
use crate::molecule::{ContextChain, Vocabulary};
use crate::stream_rng;
use crate::tape::{Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub hidden: usize,
    pub pair_hidden: usize,
    pub angle_hidden: usize,
    pub n_rbf: usize,
    pub rbf_max: f64,
    pub self_conditioning: bool,
    /// Largest node count the model accepts.
    pub max_nodes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: 32,
            pair_hidden: 32,
            angle_hidden: 32,
            n_rbf: 24,
            rbf_max: 6.0,
            self_conditioning: false,
            max_nodes: 64,
        }
    }
}

impl ModelConfig {
    /// Architecture small enough for exhaustive finite-difference checks.
    pub fn tiny() -> Self {
        Self { hidden: 4, pair_hidden: 4, angle_hidden: 4, n_rbf: 3, rbf_max: 6.0, self_conditioning: false, max_nodes: 64 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.pair_hidden == 0 || self.angle_hidden == 0 || self.n_rbf < 2 {
            return Err(Error::Config("layer widths must be >= 1 and n_rbf >= 2".into()));
        }
        if !(self.rbf_max > 0.0 && self.rbf_max.is_finite()) {
            return Err(Error::Config("rbf_max must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Block {
    offset: usize,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Layout {
    node_w1: Block,
    node_b1: Block,
    node_w2: Block,
    node_b2: Block,
    type_w: Block,
    type_b: Block,
    logvar_w: Block,
    logvar_b: Block,
    pair_wa: Block,
    pair_wb: Block,
    pair_wf: Block,
    pair_b1: Block,
    pair_w2: Block,
    pair_b2: Block,
    bond_w: Block,
    bond_b: Block,
    vel_w: Block,
    vel_b: Block,
    ctx_wa: Block,
    ctx_wf: Block,
    ctx_b1: Block,
    ctx_u_w: Block,
    ctx_u_b: Block,
    ang_w1: Block,
    ang_pool: Block,
    ang_b1: Block,
    ang_w2: Block,
    ang_b2: Block,
    ang_out_w: Block,
    ang_out_b: Block,
    total: usize,
    /// Blocks whose initial values are drawn (weights), as opposed to zeroed biases.
    weights: Vec<(Block, usize)>,
}

/// Feature widths derived from the configuration.
#[derive(Debug, Clone, Copy)]
struct Dims {
    node: usize,
    pair: usize,
    ctx: usize,
    angle: usize,
}

fn dims(cfg: &ModelConfig, v: &Vocabulary) -> Dims {
    let sc = if cfg.self_conditioning { v.n_atom_types + 2 } else { 0 };
    Dims {
        node: v.n_atom_types + 3 + 3 * cfg.n_rbf + v.n_bond_types + 2 + v.n_atom_types + sc,
        pair: cfg.n_rbf + 1 + v.n_bond_types,
        ctx: cfg.n_rbf + 1 + v.n_context_labels,
        angle: 3 * v.chain_len + v.n_context_labels + 3 + cfg.n_rbf,
    }
}

fn build_layout(cfg: &ModelConfig, v: &Vocabulary) -> Layout {
    let d = dims(cfg, v);
    let (h, p, a, l) = (cfg.hidden, cfg.pair_hidden, cfg.angle_hidden, v.chain_len);
    let mut offset = 0;
    let mut weights = Vec::new();
    let mut block = |rows: usize, cols: usize, fan_in: Option<usize>| {
        let b = Block { offset, rows, cols };
        offset += rows * cols;
        if let Some(f) = fan_in {
            weights.push((b, f));
        }
        b
    };
    let node_w1 = block(d.node, h, Some(d.node));
    let node_b1 = block(1, h, None);
    let node_w2 = block(h, h, Some(h));
    let node_b2 = block(1, h, None);
    let type_w = block(h, v.n_atom_types, Some(h));
    let type_b = block(1, v.n_atom_types, None);
    let logvar_w = block(h, 1, Some(h));
    let logvar_b = block(1, 1, None);
    let pair_fan = 2 * h + d.pair;
    let pair_wa = block(h, p, Some(pair_fan));
    let pair_wb = block(h, p, Some(pair_fan));
    let pair_wf = block(d.pair, p, Some(pair_fan));
    let pair_b1 = block(1, p, None);
    let pair_w2 = block(p, p, Some(p));
    let pair_b2 = block(1, p, None);
    let bond_w = block(p, v.n_bond_types, Some(p));
    let bond_b = block(1, v.n_bond_types, None);
    let vel_w = block(p, 1, Some(p));
    let vel_b = block(1, 1, None);
    let ctx_fan = h + d.ctx;
    let ctx_wa = block(h, p, Some(ctx_fan));
    let ctx_wf = block(d.ctx, p, Some(ctx_fan));
    let ctx_b1 = block(1, p, None);
    let ctx_u_w = block(p, 1, Some(p));
    let ctx_u_b = block(1, 1, None);
    let ang_fan = d.angle + h;
    let ang_w1 = block(d.angle, a, Some(ang_fan));
    let ang_pool = block(h, a, Some(ang_fan));
    let ang_b1 = block(1, a, None);
    let ang_w2 = block(a, a, Some(a));
    let ang_b2 = block(1, a, None);
    let ang_out_w = block(a, l, Some(a));
    let ang_out_b = block(1, l, None);
    Layout {
        node_w1,
        node_b1,
        node_w2,
        node_b2,
        type_w,
        type_b,
        logvar_w,
        logvar_b,
        pair_wa,
        pair_wb,
        pair_wf,
        pair_b1,
        pair_w2,
        pair_b2,
        bond_w,
        bond_b,
        vel_w,
        vel_b,
        ctx_wa,
        ctx_wf,
        ctx_b1,
        ctx_u_w,
        ctx_u_b,
        ang_w1,
        ang_pool,
        ang_b1,
        ang_w2,
        ang_b2,
        ang_out_w,
        ang_out_b,
        total: offset,
        weights,
    }
}

/// Network state for one noisy complex at time `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisyState {
    pub coords: Vec<Point3>,
    pub atom_types: Vec<usize>,
    pub bonds: Vec<Vec<usize>>,
    pub t: f64,
    pub context: Vec<Point3>,
    pub context_labels: Vec<usize>,
    /// Current torsions; empty when the complex has no context chains.
    pub chains: Vec<ContextChain>,
}

/// Previous predictions fed back when self-conditioning is on.
#[derive(Debug, Clone, PartialEq)]
pub struct SelfCondition {
    pub type_probs: Vec<Vec<f64>>,
    pub logvar: Vec<f64>,
}

/// Tape handles of every head.
#[derive(Debug, Clone, Copy)]
pub struct HeadVars {
    /// `n × 3`
    pub velocity: Var,
    /// `n × K_a`
    pub type_logits: Var,
    /// `n × 1`
    pub logvar: Var,
    /// `n(n−1)/2 × K_b`, symmetric by construction, pairs `i < j` in row-major order.
    pub bond_logits: Var,
    /// `m × L`, zero on masked slots; `None` without context chains.
    pub angle_velocity: Option<Var>,
}

/// Plain values of every head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadOutput {
    pub velocity: Vec<Point3>,
    pub type_logits: Vec<Vec<f64>>,
    pub logvar: Vec<f64>,
    /// Upper-triangle pairs `i < j`, row-major.
    pub bond_logits: Vec<Vec<f64>>,
    pub angle_velocity: Vec<Vec<f64>>,
}

/// Pairs `(i, j)` with `i < j` in row-major order.
pub fn upper_pairs(n: usize) -> Vec<(usize, usize)> {
    (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

pub fn time_features(t: f64) -> [f64; 3] {
    [t, t * t, (std::f64::consts::PI * t).sin()]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneModel {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub params: Vec<f64>,
}

impl BackboneModel {
    /// Weights drawn from `N(0, 1/fan_in)`, biases zero.
    pub fn new(config: ModelConfig, vocab: Vocabulary, seed: u64) -> Result<Self> {
        config.validate()?;
        vocab.validate()?;
        let layout = build_layout(&config, &vocab);
        let mut params = vec![0.0; layout.total];
        let mut rng = stream_rng(seed, 0);
        for (b, fan_in) in &layout.weights {
            let scale = 1.0 / (*fan_in as f64).sqrt();
            for v in &mut params[b.offset..b.offset + b.rows * b.cols] {
                let e: f64 = rng.sample(StandardNormal);
                *v = scale * e;
            }
        }
        Ok(Self { config, vocab, params })
    }

    pub fn zeros(config: ModelConfig, vocab: Vocabulary) -> Result<Self> {
        let mut m = Self::new(config, vocab, 0)?;
        m.params.iter_mut().for_each(|p| *p = 0.0);
        Ok(m)
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    /// Parameter count implied by the architecture.
    pub fn expected_params(config: &ModelConfig, vocab: &Vocabulary) -> usize {
        build_layout(config, vocab).total
    }

    pub fn check_consistent(&self) -> Result<()> {
        let want = Self::expected_params(&self.config, &self.vocab);
        if want != self.params.len() {
            return Err(Error::CheckpointMismatch(format!(
                "architecture needs {want} parameters, found {}",
                self.params.len()
            )));
        }
        Ok(())
    }

    fn rbf(&self, d: f64, out: &mut [f64]) {
        let r = self.config.n_rbf;
        let spacing = self.config.rbf_max / (r - 1) as f64;
        for (k, o) in out.iter_mut().enumerate() {
            let z = (d - spacing * k as f64) / spacing;
            *o = (-0.5 * z * z).exp();
        }
    }

    fn validate_state(&self, s: &NoisyState) -> Result<()> {
        let n = s.coords.len();
        if n > self.config.max_nodes {
            return Err(Error::DimensionMismatch { expected: self.config.max_nodes, found: n });
        }
        ensure_same_len(n, s.atom_types.len())?;
        ensure_same_len(n, s.bonds.len())?;
        ensure_same_len(s.context.len(), s.context_labels.len())?;
        crate::geometry::check_unit_time(s.t)?;
        if s.context.is_empty() {
            return Err(Error::Empty("context points"));
        }
        if s.atom_types.iter().any(|&t| t >= self.vocab.n_atom_types)
            || s.bonds.iter().flatten().any(|&b| b >= self.vocab.n_bond_types)
            || s.context_labels.iter().any(|&l| l >= self.vocab.n_context_labels)
        {
            return Err(Error::Domain("category index out of range".into()));
        }
        if !s.chains.is_empty() {
            ensure_same_len(s.context.len(), s.chains.len())?;
            for c in &s.chains {
                ensure_same_len(self.vocab.chain_len, c.chain.len())?;
            }
        }
        Ok(())
    }

    /// Records the forward pass on `tape` (which must borrow `self.params`).
    pub fn forward_graph(&self, tape: &mut Tape, s: &NoisyState, prev: Option<&SelfCondition>) -> Result<HeadVars> {
        self.validate_state(s)?;
        ensure_same_len(self.params.len(), tape.n_params())?;
        let lay = build_layout(&self.config, &self.vocab);
        let d = dims(&self.config, &self.vocab);
        let v = &self.vocab;
        let r = self.config.n_rbf;
        let (n, m) = (s.coords.len(), s.context.len());
        let p = |tape: &mut Tape, b: Block| tape.param(b.offset, b.rows, b.cols);
        let center = vec3::centroid(&s.context).unwrap_or([0.0; 3]);
        let tf = time_features(s.t);

        // node features
        let mut mean_types = vec![0.0; v.n_atom_types];
        for &t in &s.atom_types {
            mean_types[t] += 1.0 / n.max(1) as f64;
        }
        let mut feats = vec![0.0; n * d.node];
        let mut buf = vec![0.0; r];
        for i in 0..n {
            let row = &mut feats[i * d.node..(i + 1) * d.node];
            let mut k = 0;
            row[s.atom_types[i]] = 1.0;
            k += v.n_atom_types;
            row[k..k + 3].copy_from_slice(&tf);
            k += 3;
            self.rbf(vec3::dist(s.coords[i], center), &mut buf);
            row[k..k + r].copy_from_slice(&buf);
            k += r;
            if n > 1 {
                for j in (0..n).filter(|&j| j != i) {
                    self.rbf(vec3::dist(s.coords[i], s.coords[j]), &mut buf);
                    for q in 0..r {
                        row[k + q] += buf[q] / (n - 1) as f64;
                    }
                }
            }
            k += r;
            for c in &s.context {
                self.rbf(vec3::dist(s.coords[i], *c), &mut buf);
                for q in 0..r {
                    row[k + q] += buf[q] / m as f64;
                }
            }
            k += r;
            if n > 1 {
                for j in (0..n).filter(|&j| j != i) {
                    row[k + s.bonds[i][j]] += 1.0 / (n - 1) as f64;
                }
            }
            k += v.n_bond_types;
            row[k] = n as f64 / 10.0;
            row[k + 1] = m as f64 / 10.0;
            k += 2;
            row[k..k + v.n_atom_types].copy_from_slice(&mean_types);
            k += v.n_atom_types;
            if self.config.self_conditioning {
                if let Some(sc) = prev {
                    ensure_same_len(n, sc.type_probs.len())?;
                    ensure_same_len(n, sc.logvar.len())?;
                    ensure_same_len(v.n_atom_types, sc.type_probs[i].len())?;
                    row[k..k + v.n_atom_types].copy_from_slice(&sc.type_probs[i]);
                    row[k + v.n_atom_types] = sc.logvar[i];
                    row[k + v.n_atom_types + 1] = 1.0;
                }
                k += v.n_atom_types + 2;
            }
            debug_assert_eq!(k, d.node);
        }
        let x = tape.constant(n, d.node, feats)?;
        let w1 = p(tape, lay.node_w1)?;
        let b1 = p(tape, lay.node_b1)?;
        let h = tape.matmul(x, w1)?;
        let h = tape.add_row(h, b1)?;
        let h = tape.silu(h);
        let w2 = p(tape, lay.node_w2)?;
        let b2 = p(tape, lay.node_b2)?;
        let h = tape.matmul(h, w2)?;
        let h = tape.add_row(h, b2)?;
        let h = tape.silu(h);

        let tw = p(tape, lay.type_w)?;
        let tb = p(tape, lay.type_b)?;
        let type_logits = tape.matmul(h, tw)?;
        let type_logits = tape.add_row(type_logits, tb)?;
        let lw = p(tape, lay.logvar_w)?;
        let lb = p(tape, lay.logvar_b)?;
        let logvar = tape.matmul(h, lw)?;
        let logvar = tape.add_row(logvar, lb)?;

        // ordered ligand pairs i ≠ j
        let ordered: Vec<(usize, usize)> = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).collect();
        let np = ordered.len();
        let mut pf = vec![0.0; np * d.pair];
        let mut dlig = vec![0.0; np * 3];
        for (k, &(i, j)) in ordered.iter().enumerate() {
            let row = &mut pf[k * d.pair..(k + 1) * d.pair];
            let dij = vec3::dist(s.coords[i], s.coords[j]);
            self.rbf(dij, &mut buf);
            row[..r].copy_from_slice(&buf);
            row[r] = dij / self.config.rbf_max;
            row[r + 1 + s.bonds[i][j]] = 1.0;
            dlig[k * 3..k * 3 + 3].copy_from_slice(&vec3::sub(s.coords[j], s.coords[i]));
        }
        let pfv = tape.constant(np, d.pair, pf)?;
        let wa = p(tape, lay.pair_wa)?;
        let wb = p(tape, lay.pair_wb)?;
        let wf = p(tape, lay.pair_wf)?;
        let pb1 = p(tape, lay.pair_b1)?;
        let ha = tape.matmul(h, wa)?;
        let hb = tape.matmul(h, wb)?;
        let ga = tape.gather(ha, ordered.iter().map(|e| e.0).collect())?;
        let gb = tape.gather(hb, ordered.iter().map(|e| e.1).collect())?;
        let fe = tape.matmul(pfv, wf)?;
        let e = tape.add(ga, gb)?;
        let e = tape.add(e, fe)?;
        let e = tape.add_row(e, pb1)?;
        let e = tape.silu(e);
        let pw2 = p(tape, lay.pair_w2)?;
        let pb2 = p(tape, lay.pair_b2)?;
        let e = tape.matmul(e, pw2)?;
        let e = tape.add_row(e, pb2)?;
        let e = tape.silu(e);

        let bw = p(tape, lay.bond_w)?;
        let bb = p(tape, lay.bond_b)?;
        let o = tape.matmul(e, bw)?;
        let o = tape.add_row(o, bb)?;
        let index_of = |i: usize, j: usize| i * (n - 1) + if j > i { j - 1 } else { j };
        let upper = upper_pairs(n);
        let oij = tape.gather(o, upper.iter().map(|&(i, j)| index_of(i, j)).collect())?;
        let oji = tape.gather(o, upper.iter().map(|&(i, j)| index_of(j, i)).collect())?;
        let bond_logits = tape.add(oij, oji)?;
        let bond_logits = tape.scale(bond_logits, 0.5);

        let vw = p(tape, lay.vel_w)?;
        let vb = p(tape, lay.vel_b)?;
        let w = tape.matmul(e, vw)?;
        let w = tape.add_row(w, vb)?;
        let dl = tape.constant(np, 3, dlig)?;
        let lig_term = tape.mul_col(dl, w)?;
        let lig_term = tape.segment_sum(lig_term, ordered.iter().map(|e| e.0).collect(), n)?;
        let lig_term = tape.scale(lig_term, 1.0 / n.max(1) as f64);

        // ligand-context pairs
        let nq = n * m;
        let mut cf = vec![0.0; nq * d.ctx];
        let mut dctx = vec![0.0; nq * 3];
        for i in 0..n {
            for (c, pc) in s.context.iter().enumerate() {
                let k = i * m + c;
                let row = &mut cf[k * d.ctx..(k + 1) * d.ctx];
                let dic = vec3::dist(s.coords[i], *pc);
                self.rbf(dic, &mut buf);
                row[..r].copy_from_slice(&buf);
                row[r] = dic / self.config.rbf_max;
                row[r + 1 + s.context_labels[c]] = 1.0;
                dctx[k * 3..k * 3 + 3].copy_from_slice(&vec3::sub(*pc, s.coords[i]));
            }
        }
        let cfv = tape.constant(nq, d.ctx, cf)?;
        let cwa = p(tape, lay.ctx_wa)?;
        let cwf = p(tape, lay.ctx_wf)?;
        let cb1 = p(tape, lay.ctx_b1)?;
        let hc = tape.matmul(h, cwa)?;
        let seg: Vec<usize> = (0..nq).map(|k| k / m).collect();
        let gc = tape.gather(hc, seg.clone())?;
        let fc = tape.matmul(cfv, cwf)?;
        let ec = tape.add(gc, fc)?;
        let ec = tape.add_row(ec, cb1)?;
        let ec = tape.silu(ec);
        let uw = p(tape, lay.ctx_u_w)?;
        let ub = p(tape, lay.ctx_u_b)?;
        let u = tape.matmul(ec, uw)?;
        let u = tape.add_row(u, ub)?;
        let dc = tape.constant(nq, 3, dctx)?;
        let ctx_term = tape.mul_col(dc, u)?;
        let ctx_term = tape.segment_sum(ctx_term, seg, n)?;
        let ctx_term = tape.scale(ctx_term, 1.0 / m as f64);
        let velocity = tape.add(lig_term, ctx_term)?;

        let angle_velocity = if s.chains.is_empty() { None } else { Some(self.angle_head(tape, &lay, &d, s, h)?) };

        Ok(HeadVars { velocity, type_logits, logvar, bond_logits, angle_velocity })
    }

    fn angle_head(&self, tape: &mut Tape, lay: &Layout, d: &Dims, s: &NoisyState, h: Var) -> Result<Var> {
        let v = &self.vocab;
        let (l, r) = (v.chain_len, self.config.n_rbf);
        let (n, m) = (s.coords.len(), s.context.len());
        let tf = time_features(s.t);
        let mut feats = vec![0.0; m * d.angle];
        let mut mask = vec![0.0; m * l];
        let mut buf = vec![0.0; r];
        for (c, ch) in s.chains.iter().enumerate() {
            let row = &mut feats[c * d.angle..(c + 1) * d.angle];
            for slot in 0..l {
                let (a, on) = (ch.chain.angles[slot].value(), ch.chain.mask[slot]);
                if on {
                    row[2 * slot] = a.sin();
                    row[2 * slot + 1] = a.cos();
                    row[2 * l + slot] = 1.0;
                    mask[c * l + slot] = 1.0;
                }
            }
            let mut k = 3 * l;
            row[k + s.context_labels[c]] = 1.0;
            k += v.n_context_labels;
            row[k..k + 3].copy_from_slice(&tf);
            k += 3;
            if n > 0 && ch.chain.n_active() > 0 {
                let pts = chain_to_coords(&ch.chain, &ch.frame)?;
                let last = (0..l).rev().find(|&q| ch.chain.mask[q]).unwrap_or(0);
                for x in &s.coords {
                    self.rbf(vec3::dist(pts[last], *x), &mut buf);
                    for q in 0..r {
                        row[k + q] += buf[q] / n as f64;
                    }
                }
            }
        }
        let p = |tape: &mut Tape, b: Block| tape.param(b.offset, b.rows, b.cols);
        let fv = tape.constant(m, d.angle, feats)?;
        let w1 = p(tape, lay.ang_w1)?;
        let pool_w = p(tape, lay.ang_pool)?;
        let b1 = p(tape, lay.ang_b1)?;
        let a = tape.matmul(fv, w1)?;
        let pooled = tape.segment_sum(h, vec![0; n], 1)?;
        let pooled = tape.scale(pooled, 1.0 / n.max(1) as f64);
        let pooled = tape.matmul(pooled, pool_w)?;
        let a = tape.add_row(a, pooled)?;
        let a = tape.add_row(a, b1)?;
        let a = tape.silu(a);
        let w2 = p(tape, lay.ang_w2)?;
        let b2 = p(tape, lay.ang_b2)?;
        let a = tape.matmul(a, w2)?;
        let a = tape.add_row(a, b2)?;
        let a = tape.silu(a);
        let ow = p(tape, lay.ang_out_w)?;
        let ob = p(tape, lay.ang_out_b)?;
        let out = tape.matmul(a, ow)?;
        let out = tape.add_row(out, ob)?;
        let mv = tape.constant(m, l, mask)?;
        tape.mul(out, mv)
    }

    /// Values of every head.
    pub fn forward(&self, s: &NoisyState, prev: Option<&SelfCondition>) -> Result<HeadOutput> {
        let mut tape = Tape::new(&self.params);
        let vars = self.forward_graph(&mut tape, s, prev)?;
        Ok(read_heads(&tape, &vars, &self.vocab))
    }
}

fn rows_of(values: &[f64], cols: usize) -> Vec<Vec<f64>> {
    if cols == 0 {
        return Vec::new();
    }
    values.chunks(cols).map(<[f64]>::to_vec).collect()
}

pub fn read_heads(tape: &Tape, vars: &HeadVars, vocab: &Vocabulary) -> HeadOutput {
    HeadOutput {
        velocity: tape.value(vars.velocity).chunks(3).map(|c| [c[0], c[1], c[2]]).collect(),
        type_logits: rows_of(tape.value(vars.type_logits), vocab.n_atom_types),
        logvar: tape.value(vars.logvar).to_vec(),
        bond_logits: rows_of(tape.value(vars.bond_logits), vocab.n_bond_types),
        angle_velocity: vars.angle_velocity.map(|a| rows_of(tape.value(a), vocab.chain_len)).unwrap_or_default(),
    }
}
