//! Self-supervised pretraining: masked text reconstruction plus link
//! prediction on the three forward relations.
//!
//! Each batch seeds a sampled subgraph with text nodes, masks a random subset
//! of its texts, encodes it, and minimizes
//! `alpha * recon + (1 - alpha) * mean(edge losses)`.

use std::collections::HashSet;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::commembed::MembershipMap;
use crate::error::{GastonError, Result};
use crate::hetgraph::{Fanouts, HetGraph, NodeRef, NodeType, Relation, Subgraph};
use crate::hgt::{decode, encode, input_vars, sample_mask, HgtParams, HgtVars};
use crate::numerics::{grad_check, Adam, AdamState, GradCheckReport, Tape, Tensor2, Var};
use crate::textenc::EmbeddingTable;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub alpha: f64,
    pub mask_rate: f64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    /// Neighbors kept per node, relation and layer when sampling.
    pub fanout: usize,
    /// Negative targets drawn per positive edge.
    pub negatives: usize,
    pub rng_seed: u64,
    pub freeze_communities: bool,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            alpha: 0.5,
            mask_rate: 0.15,
            batch_size: 128,
            learning_rate: 1e-4,
            epochs: 6,
            fanout: 10,
            negatives: 5,
            rng_seed: 0,
            freeze_communities: false,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(GastonError::Config(m.into()));
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad("pretrain alpha must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.mask_rate) {
            return bad("pretrain mask_rate must lie in [0, 1]");
        }
        if self.batch_size == 0 {
            return bad("pretrain batch_size must be at least 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("pretrain learning_rate must be positive");
        }
        if self.negatives == 0 {
            return bad("pretrain negatives must be at least 1");
        }
        Ok(())
    }
}

/// Labeled source/target pairs of one relation, in subgraph-local indices.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeBatch {
    pub relation: Relation,
    pub src: Vec<usize>,
    pub dst: Vec<usize>,
    pub labels: Vec<f64>,
}

/// Every positive edge of `r` in `sub`, each followed by `k` negative
/// targets drawn uniformly from the subgraph's nodes of the target type that
/// are not positives of the same source. Sources linked to every candidate
/// target contribute positives only. Returns `None` when the relation has no
/// positives, or when `k > 0` and no negative exists for any source.
pub fn sample_edge_batch(sub: &Subgraph, r: Relation, k: usize, rng: &mut impl Rng) -> Option<EdgeBatch> {
    let positives = sub.edges(r);
    if positives.is_empty() {
        return None;
    }
    let n_dst = sub.count(r.dst_type());
    let mut pos_of: Vec<HashSet<usize>> = vec![HashSet::new(); sub.count(r.src_type())];
    for &(s, d) in positives {
        pos_of[s].insert(d);
    }
    let mut b = EdgeBatch {
        relation: r,
        src: Vec::new(),
        dst: Vec::new(),
        labels: Vec::new(),
    };
    let mut any_negative = false;
    for &(s, d) in positives {
        b.src.push(s);
        b.dst.push(d);
        b.labels.push(1.0);
        if pos_of[s].len() >= n_dst {
            continue;
        }
        for _ in 0..k {
            let neg = loop {
                let c = rng.random_range(0..n_dst);
                if !pos_of[s].contains(&c) {
                    break c;
                }
            };
            b.src.push(s);
            b.dst.push(neg);
            b.labels.push(0.0);
            any_negative = true;
        }
    }
    if k > 0 && !any_negative {
        return None;
    }
    Some(b)
}

/// Everything random about one training step, fixed up front.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchPlan {
    pub sub: Subgraph,
    /// Masked text nodes, subgraph-local.
    pub masked: Vec<usize>,
    pub edges: Vec<EdgeBatch>,
    /// Forward relations left out of the edge loss for this batch.
    pub skipped: Vec<Relation>,
}

pub fn plan_batch(
    g: &HetGraph,
    seeds: &[NodeRef],
    layers: usize,
    cfg: &PretrainConfig,
    rng: &mut impl Rng,
) -> Result<BatchPlan> {
    let sub = g.sample_subgraph(seeds, &Fanouts::uniform(layers, cfg.fanout), rng.random())?;
    let masked = sample_mask(sub.count(NodeType::Text), cfg.mask_rate, rng)?;
    let mut edges = Vec::new();
    let mut skipped = Vec::new();
    for r in Relation::FORWARD {
        match sample_edge_batch(&sub, r, cfg.negatives, rng) {
            Some(b) => edges.push(b),
            None => skipped.push(r),
        }
    }
    Ok(BatchPlan {
        sub,
        masked,
        edges,
        skipped,
    })
}

/// `(1/|M|) * sum ||x_hat - x||²` over the rows of `x_hat`.
pub fn recon_loss(tape: &mut Tape, x_hat: Var, x: &Tensor2) -> Result<Var> {
    let n = x.rows();
    if n == 0 {
        return Err(GastonError::arg("reconstruction loss over zero rows"));
    }
    let target = tape.constant(x.clone());
    let diff = tape.sub(x_hat, target)?;
    let ss = tape.sum_squares(diff);
    Ok(tape.scale(ss, 1.0 / n as f64))
}

/// Binary cross-entropy of `sigmoid(<h_src, h_dst>)` over the batch pairs.
pub fn edge_loss(tape: &mut Tape, h_src: Var, h_dst: Var, b: &EdgeBatch) -> Result<Var> {
    let s = tape.gather_rows(h_src, &b.src)?;
    let d = tape.gather_rows(h_dst, &b.dst)?;
    let z = tape.row_dot(s, d)?;
    tape.bce_with_logits(z, &b.labels)
}

/// Unweighted mean of the edge losses, or 0 when there are none.
pub fn mean_edge_loss(edges: &[f64]) -> f64 {
    if edges.is_empty() {
        return 0.0;
    }
    let mut sum = edges[0];
    for &e in &edges[1..] {
        sum += e;
    }
    sum * (1.0 / edges.len() as f64)
}

/// `alpha * recon + (1 - alpha) * mean(edges)`, with the same operation
/// order as the taped objective.
pub fn combined_loss(recon: f64, edges: &[f64], alpha: f64) -> f64 {
    recon * alpha + mean_edge_loss(edges) * (1.0 - alpha)
}

/// Loss components of one batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchLoss {
    pub recon: f64,
    /// Per forward relation, `None` when skipped.
    pub edges: [Option<f64>; 3],
    pub total: f64,
}

/// Taped loss of one batch.
#[derive(Debug, Clone)]
pub struct Objective {
    pub recon: Var,
    pub edges: Vec<(Relation, Var)>,
    pub total: Var,
}

impl Objective {
    pub fn values(&self, tape: &Tape) -> BatchLoss {
        let mut edges = [None; 3];
        for &(r, v) in &self.edges {
            edges[r.index()] = Some(tape.scalar(v));
        }
        BatchLoss {
            recon: tape.scalar(self.recon),
            edges,
            total: tape.scalar(self.total),
        }
    }
}

/// Records the full objective for `plan` on `tape`. With no masked texts
/// the reconstruction term is the constant 0.
#[allow(clippy::too_many_arguments)]
pub fn batch_objective(
    tape: &mut Tape,
    plan: &BatchPlan,
    texts: &EmbeddingTable,
    communities: Var,
    membership: &MembershipMap,
    vars: &HgtVars,
    heads: usize,
    alpha: f64,
) -> Result<Objective> {
    let sub = &plan.sub;
    let inputs = input_vars(tape, sub, texts, communities, membership, Some((&plan.masked, vars.mask)))?;
    let h = encode(tape, sub, inputs, vars, heads)?;

    let recon = if plan.masked.is_empty() {
        tape.constant(Tensor2::scalar(0.0))
    } else {
        let hm = tape.gather_rows(h[NodeType::Text.index()], &plan.masked)?;
        let x_hat = decode(tape, hm, vars)?;
        let globals: Vec<usize> = plan.masked.iter().map(|&l| sub.nodes(NodeType::Text)[l]).collect();
        recon_loss(tape, x_hat, &texts.gather(&globals))?
    };

    let mut edges = Vec::with_capacity(plan.edges.len());
    for b in &plan.edges {
        let r = b.relation;
        let v = edge_loss(tape, h[r.src_type().index()], h[r.dst_type().index()], b)?;
        edges.push((r, v));
    }
    let mean = match edges.split_first() {
        None => tape.constant(Tensor2::scalar(0.0)),
        Some((&(_, first), rest)) => {
            let mut sum = first;
            for &(_, v) in rest {
                sum = tape.add(sum, v)?;
            }
            tape.scale(sum, 1.0 / edges.len() as f64)
        }
    };
    let a = tape.scale(recon, alpha);
    let b = tape.scale(mean, 1.0 - alpha);
    let total = tape.add(a, b)?;
    Ok(Objective { recon, edges, total })
}

/// One row of the loss history.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss: BatchLoss,
}

pub fn write_history<W: Write>(history: &[LossRecord], mut w: W) -> Result<()> {
    write!(w, "step,epoch,recon")?;
    for r in Relation::FORWARD {
        write!(w, ",edge_{}", r.name())?;
    }
    writeln!(w, ",total")?;
    for rec in history {
        write!(w, "{},{},{}", rec.step, rec.epoch, rec.loss.recon)?;
        for e in rec.loss.edges {
            match e {
                Some(x) => write!(w, ",{x}")?,
                None => write!(w, ",")?,
            }
        }
        writeln!(w, ",{}", rec.loss.total)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainOutcome {
    pub params: HgtParams,
    pub communities: Tensor2,
    pub history: Vec<LossRecord>,
    /// Batches that happened to mask no text.
    pub empty_mask_batches: usize,
    /// Relation slots dropped from batch edge losses.
    pub skipped_relations: usize,
}

impl PretrainOutcome {
    /// Mean total loss of each epoch.
    pub fn epoch_means(&self) -> Vec<f64> {
        let epochs = self.history.last().map_or(0, |r| r.epoch + 1);
        (0..epochs)
            .map(|e| {
                let v: Vec<f64> = self.history.iter().filter(|r| r.epoch == e).map(|r| r.loss.total).collect();
                v.iter().sum::<f64>() / v.len() as f64
            })
            .collect()
    }
}

/// Compares the gradient of one batch's combined loss, with respect to every
/// encoder tensor and the community matrix, against central differences of
/// step `h`. The batch is seeded with every text node. Also returns the
/// smallest distance of any ReLU input from its kink, since differences
/// taken across a kink are meaningless.
pub fn check_objective_gradients(
    g: &HetGraph,
    texts: &EmbeddingTable,
    communities: &Tensor2,
    params: &HgtParams,
    cfg: &PretrainConfig,
    h: f64,
) -> Result<(GradCheckReport, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let seeds: Vec<NodeRef> = (0..g.count(NodeType::Text)).map(NodeRef::text).collect();
    let plan = plan_batch(g, &seeds, params.config.layers, cfg, &mut rng)?;
    let membership = MembershipMap::from_graph(g);
    let layers = params.config.layers;
    let margin = std::cell::Cell::new(f64::INFINITY);
    let f = |ps: &[Tensor2], want: bool| -> Result<(f64, Option<Vec<Tensor2>>)> {
        let (w, c) = ps.split_at(ps.len() - 1);
        let weights = crate::hgt::Weights::from_flat(layers, w.to_vec())?;
        let mut tape = Tape::new();
        let vars = weights.map(|t| tape.param(t.clone()));
        let comm = tape.param(c[0].clone());
        let obj = batch_objective(&mut tape, &plan, texts, comm, &membership, &vars, params.config.heads, cfg.alpha)?;
        margin.set(margin.get().min(tape.relu_margin()));
        let grads = if want {
            let gr = tape.backward(obj.total)?;
            let mut out: Vec<Tensor2> = vars.flat().iter().zip(w).map(|(&&v, p)| gr.get_or_zeros(v, p)).collect();
            out.push(gr.get_or_zeros(comm, &c[0]));
            Some(out)
        } else {
            None
        };
        Ok((tape.scalar(obj.total), grads))
    };
    let mut ps: Vec<Tensor2> = params.weights.flat().into_iter().cloned().collect();
    ps.push(communities.clone());
    let report = grad_check(&ps, h, f)?;
    Ok((report, margin.get()))
}

/// Trains `params` and, unless frozen, the community matrix with Adam.
pub fn pretrain(
    g: &HetGraph,
    texts: &EmbeddingTable,
    communities: &Tensor2,
    params: HgtParams,
    cfg: &PretrainConfig,
) -> Result<PretrainOutcome> {
    cfg.validate()?;
    let n_text = g.count(NodeType::Text);
    if texts.count() != n_text {
        return Err(GastonError::arg(format!("{} text embeddings for {n_text} text nodes", texts.count())));
    }
    let c = &params.config;
    let (d_user, d_text, d_comm) = (c.d_in[0], c.d_in[1], c.d_in[2]);
    if d_text != texts.dim() || d_user != communities.cols() || d_comm != communities.cols() {
        return Err(GastonError::arg("encoder input widths do not match the feature tables"));
    }
    if communities.rows() != g.count(NodeType::Community) {
        return Err(GastonError::arg("community matrix rows differ from community count"));
    }

    let membership = MembershipMap::from_graph(g);
    let mut out = PretrainOutcome {
        params,
        communities: communities.clone(),
        history: Vec::new(),
        empty_mask_batches: 0,
        skipped_relations: 0,
    };
    if cfg.epochs == 0 {
        return Ok(out);
    }
    if n_text == 0 {
        return Err(GastonError::arg("pretraining needs at least one text node"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let adam = Adam::new(cfg.learning_rate);
    let (mut state_w, mut state_c) = (AdamState::new(), AdamState::new());
    let (layers, heads) = (out.params.config.layers, out.params.config.heads);
    let mut order: Vec<usize> = (0..n_text).collect();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let seeds: Vec<NodeRef> = chunk.iter().map(|&t| NodeRef::text(t)).collect();
            let plan = plan_batch(g, &seeds, layers, cfg, &mut rng)?;
            if plan.masked.is_empty() {
                out.empty_mask_batches += 1;
            }
            out.skipped_relations += plan.skipped.len();

            let mut tape = Tape::new();
            let vars = out.params.register(&mut tape, true);
            let comm = if cfg.freeze_communities {
                tape.constant(out.communities.clone())
            } else {
                tape.param(out.communities.clone())
            };
            let obj = batch_objective(&mut tape, &plan, texts, comm, &membership, &vars, heads, cfg.alpha)?;
            let loss = obj.values(&tape);
            if !loss.total.is_finite() {
                return Err(GastonError::Training {
                    step,
                    reason: format!("non-finite pretraining loss {}", loss.total),
                });
            }
            let grads = tape.backward(obj.total)?;
            let flat_vars = vars.flat();
            let mut weights = out.params.weights.flat_mut();
            let gw: Vec<Tensor2> = flat_vars.iter().zip(&weights).map(|(&&v, p)| grads.get_or_zeros(v, p)).collect();
            adam.step(&mut weights, &gw, &mut state_w)?;
            if !cfg.freeze_communities {
                let gc = grads.get_or_zeros(comm, &out.communities);
                adam.step(&mut [&mut out.communities], &[gc], &mut state_c)?;
            }
            out.history.push(LossRecord { step, epoch, loss });
            step += 1;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::community_corpus;
    use crate::hgt::HgtConfig;
    use crate::numerics::sigmoid;
    use std::f64::consts::LN_2;

    #[test]
    fn recon_anchors() {
        let mut tape = Tape::new();
        let x = Tensor2::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let same = tape.constant(x.clone());
        let v = recon_loss(&mut tape, same, &x).unwrap();
        assert_eq!(tape.scalar(v), 0.0);
        let zero = tape.constant(Tensor2::zeros(1, 2));
        let v = recon_loss(&mut tape, zero, &x).unwrap();
        assert_eq!(tape.scalar(v), 1.0);
        let x2 = Tensor2::from_rows(&[vec![1.0, 1.0], vec![2.0, 0.0]]).unwrap();
        let zero2 = tape.constant(Tensor2::zeros(2, 2));
        let v = recon_loss(&mut tape, zero2, &x2).unwrap();
        assert_eq!(tape.scalar(v), 3.0);
    }

    fn pairs(tape: &mut Tape, s: &[Vec<f64>], d: &[Vec<f64>], labels: &[f64]) -> f64 {
        let hs = tape.constant(Tensor2::from_rows(s).unwrap());
        let hd = tape.constant(Tensor2::from_rows(d).unwrap());
        let n = labels.len();
        let b = EdgeBatch {
            relation: Relation::TextPostedByUser,
            src: (0..n).collect(),
            dst: (0..n).collect(),
            labels: labels.to_vec(),
        };
        let v = edge_loss(tape, hs, hd, &b).unwrap();
        tape.scalar(v)
    }

    #[test]
    fn edge_anchors() {
        let mut tape = Tape::new();
        let l = pairs(&mut tape, &[vec![1.0, 0.0]], &[vec![0.0, 1.0]], &[1.0]);
        assert!((l - LN_2).abs() < 1e-12);
        let l = pairs(
            &mut tape,
            &[vec![4.0, 2.0], vec![4.0, 2.0]],
            &[vec![4.0, 2.0], vec![-4.0, -2.0]],
            &[1.0, 0.0],
        );
        assert!(l < 1e-8);
    }

    #[test]
    fn edge_loss_matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let (g, _) = community_corpus(3, 12, 40, 6, 2, 4);
        let sub = Subgraph::full(&g);
        for r in Relation::FORWARD {
            let b = sample_edge_batch(&sub, r, 3, &mut rng).unwrap();
            let hs = Tensor2::random_normal(sub.count(r.src_type()), 5, 1.0, &mut rng);
            let hd = Tensor2::random_normal(sub.count(r.dst_type()), 5, 1.0, &mut rng);
            let mut tape = Tape::new();
            let (vs, vd) = (tape.constant(hs.clone()), tape.constant(hd.clone()));
            let v = edge_loss(&mut tape, vs, vd, &b).unwrap();
            let mut want = 0.0;
            for i in 0..b.labels.len() {
                let y_hat = sigmoid(crate::numerics::dot(hs.row(b.src[i]), hd.row(b.dst[i])));
                let y = b.labels[i];
                want -= y * y_hat.ln() + (1.0 - y) * (1.0 - y_hat).ln();
            }
            want /= b.labels.len() as f64;
            assert!((tape.scalar(v) - want).abs() < 1e-12);
        }
    }

    #[test]
    fn negatives_never_hit_positives() {
        let (g, _) = community_corpus(5, 15, 60, 6, 2, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let sub = g.sample_subgraph(&[NodeRef::text(0), NodeRef::text(9)], &Fanouts::uniform(2, 4), 1).unwrap();
        for r in Relation::FORWARD {
            let Some(b) = sample_edge_batch(&sub, r, 5, &mut rng) else { continue };
            let pos: HashSet<(usize, usize)> = sub.edges(r).iter().copied().collect();
            assert_eq!(b.labels.iter().filter(|&&y| y == 1.0).count(), pos.len());
            for i in 0..b.labels.len() {
                assert_eq!(pos.contains(&(b.src[i], b.dst[i])), b.labels[i] == 1.0);
            }
        }
    }

    #[test]
    fn saturated_relation_is_skipped() {
        // both texts posted in the only community: no negatives are possible
        let g = HetGraph::build(
            [0, 2, 1],
            &[
                (Relation::TextPostedInCommunity, 0, 0),
                (Relation::TextPostedInCommunity, 1, 0),
            ],
        )
        .unwrap();
        let sub = Subgraph::full(&g);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_edge_batch(&sub, Relation::TextPostedInCommunity, 5, &mut rng).is_none());
        assert!(sample_edge_batch(&sub, Relation::TextPostedByUser, 5, &mut rng).is_none());
        let b = sample_edge_batch(&sub, Relation::TextPostedInCommunity, 0, &mut rng).unwrap();
        assert_eq!(b.labels, vec![1.0, 1.0]);
    }

    #[test]
    fn combined_anchors() {
        assert_eq!(combined_loss(2.0, &[4.0, 4.0, 4.0], 0.5), 3.0);
        let edges = [0.31, 0.77, 1.13];
        assert_eq!(combined_loss(1.7, &edges, 1.0), 1.7);
        assert_eq!(combined_loss(1.7, &edges, 0.0), mean_edge_loss(&edges));
    }

    fn small_setup(seed: u64) -> (HetGraph, EmbeddingTable, Tensor2, HgtParams) {
        let (g, x) = community_corpus(seed, 40, 250, 10, 2, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let comm = Tensor2::random_normal(10, 6, 0.5, &mut rng);
        let params = HgtParams::new(
            HgtConfig {
                d: 16,
                layers: 2,
                heads: 2,
                d_in: [6, 8, 6],
            },
            seed,
        )
        .unwrap();
        (g, x, comm, params)
    }

    fn test_cfg() -> PretrainConfig {
        PretrainConfig {
            batch_size: 16,
            learning_rate: 5e-3,
            epochs: 5,
            fanout: 5,
            rng_seed: 9,
            ..PretrainConfig::default()
        }
    }

    #[test]
    fn zero_epochs_and_freezing() {
        let (g, x, comm, params) = small_setup(1);
        let cfg = PretrainConfig { epochs: 0, ..test_cfg() };
        let out = pretrain(&g, &x, &comm, params.clone(), &cfg).unwrap();
        assert_eq!(out.params, params);
        assert_eq!(out.communities, comm);
        assert!(out.history.is_empty());

        let cfg = PretrainConfig {
            epochs: 1,
            freeze_communities: true,
            ..test_cfg()
        };
        let out = pretrain(&g, &x, &comm, params.clone(), &cfg).unwrap();
        assert_eq!(out.communities, comm);
        assert_ne!(out.params, params);
        let cfg = PretrainConfig {
            freeze_communities: false,
            ..cfg
        };
        assert_ne!(pretrain(&g, &x, &comm, params, &cfg).unwrap().communities, comm);
    }

    #[test]
    fn objective_matches_combined_formula() {
        let (g, x, comm, params) = small_setup(2);
        let membership = MembershipMap::from_graph(&g);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let seeds: Vec<NodeRef> = (0..16).map(NodeRef::text).collect();
        let plan = plan_batch(&g, &seeds, 2, &test_cfg(), &mut rng).unwrap();
        for alpha in [0.0, 0.25, 0.5, 1.0] {
            let mut tape = Tape::new();
            let vars = params.register(&mut tape, true);
            let c = tape.param(comm.clone());
            let obj = batch_objective(&mut tape, &plan, &x, c, &membership, &vars, 2, alpha).unwrap();
            let l = obj.values(&tape);
            let edges: Vec<f64> = l.edges.iter().flatten().copied().collect();
            assert_eq!(l.total, combined_loss(l.recon, &edges, alpha));
            if alpha == 1.0 {
                assert_eq!(l.total, l.recon);
            }
            if alpha == 0.0 {
                assert_eq!(l.total, mean_edge_loss(&edges));
            }
        }
    }

    #[test]
    fn history_is_deterministic_and_loss_falls() {
        let (g, x, comm, params) = small_setup(3);
        let a = pretrain(&g, &x, &comm, params.clone(), &test_cfg()).unwrap();
        let b = pretrain(&g, &x, &comm, params, &test_cfg()).unwrap();
        assert_eq!(a.history, b.history);
        let means = a.epoch_means();
        assert_eq!(means.len(), 5);
        assert!(means[4] < 0.7 * means[0], "{means:?}");

        let mut csv = Vec::new();
        write_history(&a.history, &mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert_eq!(text.lines().count(), a.history.len() + 1);
        assert!(text.starts_with("step,epoch,recon,edge_text_posted_in_community,"));
    }
}
