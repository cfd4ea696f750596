//! Downstream heads over encoder outputs: text classification, text
//! regression and user-community edge ranking.
//!
//! Examples are split at the user level (a text belongs to its author), so
//! no user contributes to more than one split. The head is selected on the
//! validation split and the test split is scored once, at the end.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::io::BufRead;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::commembed::MembershipMap;
use crate::error::{GastonError, Result};
use crate::hetgraph::{HetGraph, NodeType, Relation, Subgraph};
use crate::hgt::{encode, encode_values, input_vars, HgtParams};
use crate::ingest::{split_users, IdMap, Split};
use crate::metrics::{accuracy_and_macro_f1, mrr_at_k, ndcg_at_k, pearson_r, rmse, MetricReport, RankedList};
use crate::numerics::{log_softmax, Adam, AdamState, Tape, Tensor2, Var};
use crate::textenc::EmbeddingTable;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    Classification,
    Regression,
    EdgeRanking,
}

/// What the head sees for each text.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureSource {
    /// Final encoder states.
    Encoder,
    /// The raw text embeddings, bypassing the graph.
    TextOnly,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodeLabel<T> {
    pub text: usize,
    pub value: T,
    pub split: Option<Split>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EdgeLabel {
    pub user: usize,
    pub community: usize,
    pub split: Option<Split>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Labels {
    /// Class indices into `names`.
    Classes {
        rows: Vec<NodeLabel<usize>>,
        names: Vec<String>,
    },
    Values(Vec<NodeLabel<f64>>),
    Edges(Vec<EdgeLabel>),
}

impl Labels {
    pub fn kind(&self) -> TaskKind {
        match self {
            Labels::Classes { .. } => TaskKind::Classification,
            Labels::Values(_) => TaskKind::Regression,
            Labels::Edges(_) => TaskKind::EdgeRanking,
        }
    }
}

fn parse_split(s: &str) -> Option<Split> {
    match s.to_ascii_lowercase().as_str() {
        "train" => Some(Split::Train),
        "val" | "dev" | "validation" => Some(Split::Val),
        "test" => Some(Split::Test),
        _ => None,
    }
}

fn resolve(id: &str, t: NodeType, count: usize, ids: Option<&IdMap>, line: usize) -> Result<usize> {
    let idx = match ids {
        Some(map) => map
            .ids(t)
            .iter()
            .position(|s| s == id)
            .ok_or_else(|| GastonError::Data(format!("labels line {line}: unknown {t} id {id:?}")))?,
        None => id
            .parse()
            .map_err(|_| GastonError::Data(format!("labels line {line}: {t} index {id:?} is not a number")))?,
    };
    if idx >= count {
        return Err(GastonError::Bounds(format!("labels line {line}: {t} {idx} >= {count}")));
    }
    Ok(idx)
}

/// Reads tab-separated labels. Node ids are looked up in `ids` when given,
/// otherwise read as dense indices. An optional third column names a
/// predefined split (`train`, `val` or `test`).
pub fn read_labels<R: BufRead>(r: R, kind: TaskKind, g: &HetGraph, ids: Option<&IdMap>) -> Result<Labels> {
    let mut raw = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if !(2..=3).contains(&cols.len()) {
            return Err(GastonError::Format(format!("labels line {}: expected 2 or 3 columns", i + 1)));
        }
        let split = match cols.get(2) {
            Some(s) => Some(
                parse_split(s.trim())
                    .ok_or_else(|| GastonError::Format(format!("labels line {}: unknown split {s:?}", i + 1)))?,
            ),
            None => None,
        };
        raw.push((i + 1, cols[0].trim().to_string(), cols[1].trim().to_string(), split));
    }
    let n_text = g.count(NodeType::Text);
    match kind {
        TaskKind::Classification => {
            let distinct: BTreeSet<&str> = raw.iter().map(|r| r.2.as_str()).collect();
            let mut names: Vec<String> = distinct.into_iter().map(String::from).collect();
            if names.iter().all(|n| n.parse::<i64>().is_ok()) {
                names.sort_by_key(|n| n.parse::<i64>().expect("checked"));
            }
            let mut rows = Vec::with_capacity(raw.len());
            for (line, id, label, split) in &raw {
                rows.push(NodeLabel {
                    text: resolve(id, NodeType::Text, n_text, ids, *line)?,
                    value: names.iter().position(|n| n == label).expect("label is in names"),
                    split: *split,
                });
            }
            Ok(Labels::Classes { rows, names })
        }
        TaskKind::Regression => {
            let mut rows = Vec::with_capacity(raw.len());
            for (line, id, value, split) in &raw {
                let v: f64 = value
                    .parse()
                    .map_err(|_| GastonError::Data(format!("labels line {line}: {value:?} is not a number")))?;
                if !v.is_finite() {
                    return Err(GastonError::Data(format!("labels line {line}: non-finite target")));
                }
                rows.push(NodeLabel {
                    text: resolve(id, NodeType::Text, n_text, ids, *line)?,
                    value: v,
                    split: *split,
                });
            }
            Ok(Labels::Values(rows))
        }
        TaskKind::EdgeRanking => {
            let mut rows = Vec::with_capacity(raw.len());
            for (line, u, c, split) in &raw {
                rows.push(EdgeLabel {
                    user: resolve(u, NodeType::User, g.count(NodeType::User), ids, *line)?,
                    community: resolve(c, NodeType::Community, g.count(NodeType::Community), ids, *line)?,
                    split: *split,
                });
            }
            Ok(Labels::Edges(rows))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    pub labels: Labels,
    pub class_weighting: bool,
    /// Train the encoder together with the head.
    pub tune_encoder: bool,
    pub features: FeatureSource,
}

impl TaskSpec {
    pub fn new(labels: Labels) -> Self {
        TaskSpec {
            labels,
            class_weighting: true,
            tune_encoder: false,
            features: FeatureSource::Encoder,
        }
    }

    pub fn kind(&self) -> TaskKind {
        self.labels.kind()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    /// Learning rate for encoder weights when they are tuned.
    pub encoder_learning_rate: f64,
    /// Sampled negative communities per positive edge.
    pub negatives: usize,
    /// Train, validation and test fractions of users.
    pub split: [f64; 3],
    /// Fraction of training users moved to validation when the labels carry
    /// a predefined split without validation rows.
    pub val_fraction: f64,
    /// Ranking cutoff.
    pub k: usize,
    pub rng_seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            epochs: 100,
            learning_rate: 1e-2,
            encoder_learning_rate: 1e-3,
            negatives: 5,
            split: [0.8, 0.1, 0.1],
            val_fraction: 0.15,
            k: 10,
            rng_seed: 0,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.encoder_learning_rate > 0.0) {
            return Err(GastonError::Config("finetune learning rates must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(GastonError::Config("finetune val_fraction must lie in [0, 1)".into()));
        }
        if self.k == 0 {
            return Err(GastonError::Config("finetune k must be at least 1".into()));
        }
        Ok(())
    }
}

/// `N / (C * n_c)` per class.
pub fn class_weights(labels: &[usize], n_classes: usize) -> Result<Vec<f64>> {
    let mut counts = vec![0usize; n_classes];
    for &y in labels {
        if y >= n_classes {
            return Err(GastonError::arg(format!("label {y} >= {n_classes} classes")));
        }
        counts[y] += 1;
    }
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(GastonError::arg(format!("class {c} has no examples")));
    }
    let n = labels.len() as f64;
    Ok(counts.iter().map(|&k| n / (n_classes as f64 * k as f64)).collect())
}

/// Mean over rows of `weights[y] * -log softmax(logits)[y]`.
pub fn weighted_ce_loss(logits: &Tensor2, labels: &[usize], weights: &[f64]) -> Result<f64> {
    if logits.rows() != labels.len() || labels.is_empty() || weights.len() != logits.cols() {
        return Err(GastonError::arg("weighted cross-entropy shapes disagree"));
    }
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        total += weights[y] * -log_softmax(logits.row(i))[y];
    }
    Ok(total / labels.len() as f64)
}

/// Softmax decision. With two classes, class 1 is chosen only when its
/// probability exceeds 0.5; otherwise the first maximal logit wins.
pub fn predict_class(logits: &[f64]) -> usize {
    if logits.len() == 2 {
        let p1 = log_softmax(logits)[1].exp();
        return usize::from(p1 > 0.5);
    }
    let mut best = 0;
    for (c, &z) in logits.iter().enumerate() {
        if z > logits[best] {
            best = c;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub enum Head {
    /// `logits = h Wᵀ + b`.
    Linear { w: Tensor2, b: Tensor2 },
    /// `score(u, c) = (P h_u) · h_c`.
    Bilinear { p: Tensor2 },
}

impl Head {
    pub fn to_extras(&self) -> Vec<(String, Tensor2)> {
        match self {
            Head::Linear { w, b } => vec![("head.w".into(), w.clone()), ("head.b".into(), b.clone())],
            Head::Bilinear { p } => vec![("head.p".into(), p.clone())],
        }
    }

    pub fn from_extras(extras: &[(String, Tensor2)]) -> Result<Self> {
        let get = |n: &str| extras.iter().find(|(k, _)| k == n).map(|(_, t)| t.clone());
        match (get("head.w"), get("head.b"), get("head.p")) {
            (Some(w), Some(b), None) => Ok(Head::Linear { w, b }),
            (None, None, Some(p)) => Ok(Head::Bilinear { p }),
            _ => Err(GastonError::Format("checkpoint holds no complete head".into())),
        }
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor2> {
        match self {
            Head::Linear { w, b } => vec![w, b],
            Head::Bilinear { p } => vec![p],
        }
    }

    fn linear_rows(&self, h: &Tensor2) -> Result<Tensor2> {
        let Head::Linear { w, b } = self else {
            return Err(GastonError::arg("expected a linear head"));
        };
        let mut z = h.matmul_nt(w)?;
        for r in 0..z.rows() {
            for (x, bb) in z.row_mut(r).iter_mut().zip(b.data()) {
                *x += bb;
            }
        }
        Ok(z)
    }
}

/// Examples with their resolved splits.
#[derive(Debug, Clone, PartialEq)]
enum Examples {
    Classes { nodes: Vec<usize>, y: Vec<usize>, n_classes: usize },
    Values { nodes: Vec<usize>, y: Vec<f64> },
    Edges { edges: Vec<(usize, usize)>, observed: Vec<HashSet<usize>>, dropped_overlap: usize },
}

#[derive(Debug, Clone, PartialEq)]
struct Prepared {
    examples: Examples,
    split: Vec<Split>,
}

impl Prepared {
    fn indices(&self, s: Split) -> Vec<usize> {
        (0..self.split.len()).filter(|&i| self.split[i] == s).collect()
    }
}

fn author_key(g: &HetGraph, text: usize) -> String {
    match g.csr(Relation::TextPostedByUser).neighbors(text).first() {
        Some(u) => format!("u{u}"),
        None => format!("t{text}"),
    }
}

/// Assigns every example the split of its user and rejects users that end
/// up in more than one split.
fn assign_splits(users: &[String], predefined: &[Option<Split>], cfg: &FinetuneConfig) -> Result<Vec<Split>> {
    let given = predefined.iter().filter(|s| s.is_some()).count();
    let split: Vec<Split> = if given == 0 {
        let a = split_users(users, (cfg.split[0], cfg.split[1], cfg.split[2]), cfg.rng_seed)?;
        users.iter().map(|u| a.get(u).expect("every user is assigned")).collect()
    } else if given == predefined.len() {
        let mut split: Vec<Split> = predefined.iter().map(|s| s.expect("all given")).collect();
        if !split.contains(&Split::Val) {
            let train_users: Vec<&str> = users
                .iter()
                .zip(&split)
                .filter(|(_, &s)| s == Split::Train)
                .map(|(u, _)| u.as_str())
                .collect();
            let carve = split_users(&train_users, (1.0 - cfg.val_fraction, cfg.val_fraction, 0.0), cfg.rng_seed)?;
            for (s, u) in split.iter_mut().zip(users) {
                if *s == Split::Train && carve.get(u) == Some(Split::Val) {
                    *s = Split::Val;
                }
            }
        }
        split
    } else {
        return Err(GastonError::Data("labels mix rows with and without a split column".into()));
    };

    let mut seen: BTreeMap<&str, Split> = BTreeMap::new();
    for (u, &s) in users.iter().zip(&split) {
        if let Some(&prev) = seen.get(u.as_str()) {
            if prev != s {
                return Err(GastonError::Leakage(format!(
                    "user {u} appears in both {} and {}",
                    prev.name(),
                    s.name()
                )));
            }
        }
        seen.insert(u, s);
    }
    Ok(split)
}

fn prepare(task: &TaskSpec, g: &HetGraph, cfg: &FinetuneConfig) -> Result<Prepared> {
    match &task.labels {
        Labels::Classes { rows, names } => {
            let users: Vec<String> = rows.iter().map(|r| author_key(g, r.text)).collect();
            let pre: Vec<Option<Split>> = rows.iter().map(|r| r.split).collect();
            Ok(Prepared {
                split: assign_splits(&users, &pre, cfg)?,
                examples: Examples::Classes {
                    nodes: rows.iter().map(|r| r.text).collect(),
                    y: rows.iter().map(|r| r.value).collect(),
                    n_classes: names.len(),
                },
            })
        }
        Labels::Values(rows) => {
            let users: Vec<String> = rows.iter().map(|r| author_key(g, r.text)).collect();
            let pre: Vec<Option<Split>> = rows.iter().map(|r| r.split).collect();
            Ok(Prepared {
                split: assign_splits(&users, &pre, cfg)?,
                examples: Examples::Values {
                    nodes: rows.iter().map(|r| r.text).collect(),
                    y: rows.iter().map(|r| r.value).collect(),
                },
            })
        }
        Labels::Edges(rows) => {
            // interactions already present in the pretraining graph are dropped
            let mut kept: Vec<&EdgeLabel> = Vec::new();
            let mut seen = HashSet::new();
            let mut dropped = 0;
            for r in rows {
                if g.contains_edge(Relation::UserActiveInCommunity, r.user, r.community) {
                    dropped += 1;
                } else if seen.insert((r.user, r.community)) {
                    kept.push(r);
                }
            }
            let users: Vec<String> = kept.iter().map(|r| format!("u{}", r.user)).collect();
            let pre: Vec<Option<Split>> = kept.iter().map(|r| r.split).collect();
            let split = assign_splits(&users, &pre, cfg)?;
            let membership = MembershipMap::from_graph(g);
            let mut observed: Vec<HashSet<usize>> =
                (0..g.count(NodeType::User)).map(|u| membership.of(u).iter().copied().collect()).collect();
            for (r, &s) in kept.iter().zip(&split) {
                if s == Split::Train {
                    observed[r.user].insert(r.community);
                }
            }
            Ok(Prepared {
                split,
                examples: Examples::Edges {
                    edges: kept.iter().map(|r| (r.user, r.community)).collect(),
                    observed,
                    dropped_overlap: dropped,
                },
            })
        }
    }
}

/// Read-only inputs shared by training and evaluation.
#[derive(Debug, Clone, Copy)]
pub struct EncoderInputs<'a> {
    pub graph: &'a HetGraph,
    pub texts: &'a EmbeddingTable,
    pub communities: &'a Tensor2,
}

fn fixed_features(ctx: &EncoderInputs, params: &HgtParams, source: FeatureSource) -> Result<[Tensor2; 3]> {
    match source {
        FeatureSource::Encoder => encode_values(
            &Subgraph::full(ctx.graph),
            ctx.texts,
            ctx.communities,
            &MembershipMap::from_graph(ctx.graph),
            params,
        ),
        FeatureSource::TextOnly => {
            let w = ctx.texts.dim();
            Ok([
                Tensor2::zeros(ctx.graph.count(NodeType::User), w),
                ctx.texts.to_tensor(),
                Tensor2::zeros(ctx.graph.count(NodeType::Community), w),
            ])
        }
    }
}

fn gather(t: &Tensor2, idx: &[usize]) -> Tensor2 {
    let mut out = Tensor2::zeros(idx.len(), t.cols());
    for (i, &j) in idx.iter().enumerate() {
        out.row_mut(i).copy_from_slice(t.row(j));
    }
    out
}

/// Metrics on one split, or `None` when the split is empty. The first value
/// is the selection score, higher is better.
fn evaluate(
    prep: &Prepared,
    h: &[Tensor2; 3],
    head: &Head,
    split: Split,
    k: usize,
    log: &mut Vec<Split>,
) -> Result<Option<(f64, MetricReport)>> {
    let idx = prep.indices(split);
    if idx.is_empty() {
        return Ok(None);
    }
    log.push(split);
    let p = split.name();
    let mut rep = MetricReport::new();
    let score = match &prep.examples {
        Examples::Classes { nodes, y, .. } => {
            let rows: Vec<usize> = idx.iter().map(|&i| nodes[i]).collect();
            let z = head.linear_rows(&gather(&h[NodeType::Text.index()], &rows))?;
            let pred: Vec<usize> = (0..z.rows()).map(|r| predict_class(z.row(r))).collect();
            let truth: Vec<usize> = idx.iter().map(|&i| y[i]).collect();
            let (acc, f1) = accuracy_and_macro_f1(&pred, &truth)?;
            rep.push(format!("{p}_accuracy"), acc);
            rep.push(format!("{p}_macro_f1"), f1);
            f1
        }
        Examples::Values { nodes, y } => {
            let rows: Vec<usize> = idx.iter().map(|&i| nodes[i]).collect();
            let z = head.linear_rows(&gather(&h[NodeType::Text.index()], &rows))?;
            let pred: Vec<f64> = (0..z.rows()).map(|r| z.get(r, 0)).collect();
            let truth: Vec<f64> = idx.iter().map(|&i| y[i]).collect();
            let e = rmse(&pred, &truth)?;
            rep.push(format!("{p}_rmse"), e);
            if let Ok(r) = pearson_r(&pred, &truth) {
                rep.push(format!("{p}_pearson"), r);
            }
            -e
        }
        Examples::Edges { edges, observed, .. } => {
            let Head::Bilinear { p: pm } = head else {
                return Err(GastonError::arg("edge ranking needs a bilinear head"));
            };
            let mut relevant: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
            for &i in &idx {
                relevant.entry(edges[i].0).or_default().push(edges[i].1);
            }
            let (hu, hc) = (&h[NodeType::User.index()], &h[NodeType::Community.index()]);
            let mut lists = Vec::new();
            for (u, rel) in relevant {
                let pu = Tensor2::row_vector(hu.row(u)).matmul_nt(pm)?;
                let scored: Vec<(usize, f64)> = (0..hc.rows())
                    .filter(|c| !observed[u].contains(c))
                    .map(|c| (c, crate::numerics::dot(pu.data(), hc.row(c))))
                    .collect();
                if !scored.is_empty() {
                    lists.push(RankedList::from_scores(scored, rel));
                }
            }
            if lists.is_empty() {
                return Ok(None);
            }
            let mrr = mrr_at_k(&lists, k)?;
            rep.push(format!("{p}_mrr@{k}"), mrr);
            rep.push(format!("{p}_ndcg@{k}"), ndcg_at_k(&lists, k)?);
            mrr
        }
    };
    Ok(Some((score, rep)))
}

/// Taped training loss on the training split.
fn train_loss(
    tape: &mut Tape,
    prep: &Prepared,
    h: &[Var; 3],
    head: &[Var],
    class_w: &[f64],
    cfg: &FinetuneConfig,
    rng: &mut impl Rng,
) -> Result<Option<Var>> {
    let idx = prep.indices(Split::Train);
    if idx.is_empty() {
        return Ok(None);
    }
    let ht = h[NodeType::Text.index()];
    match &prep.examples {
        Examples::Classes { nodes, y, .. } => {
            let rows: Vec<usize> = idx.iter().map(|&i| nodes[i]).collect();
            let x = tape.gather_rows(ht, &rows)?;
            let z = tape.matmul_nt(x, head[0])?;
            let z = tape.add_bias(z, head[1])?;
            let truth: Vec<usize> = idx.iter().map(|&i| y[i]).collect();
            Ok(Some(tape.softmax_ce(z, &truth, class_w)?))
        }
        Examples::Values { nodes, y } => {
            let rows: Vec<usize> = idx.iter().map(|&i| nodes[i]).collect();
            let x = tape.gather_rows(ht, &rows)?;
            let z = tape.matmul_nt(x, head[0])?;
            let z = tape.add_bias(z, head[1])?;
            let truth = Tensor2::from_vec(idx.len(), 1, idx.iter().map(|&i| y[i]).collect())?;
            let t = tape.constant(truth);
            let diff = tape.sub(z, t)?;
            let ss = tape.sum_squares(diff);
            Ok(Some(tape.scale(ss, 1.0 / idx.len() as f64)))
        }
        Examples::Edges { edges, observed, .. } => {
            let n_c = tape.value(h[NodeType::Community.index()]).rows();
            let (mut us, mut cs, mut labels) = (Vec::new(), Vec::new(), Vec::new());
            for &i in &idx {
                let (u, c) = edges[i];
                us.push(u);
                cs.push(c);
                labels.push(1.0);
                if observed[u].len() >= n_c {
                    continue;
                }
                for _ in 0..cfg.negatives {
                    let neg = loop {
                        let x = rng.random_range(0..n_c);
                        if !observed[u].contains(&x) {
                            break x;
                        }
                    };
                    us.push(u);
                    cs.push(neg);
                    labels.push(0.0);
                }
            }
            let hu = tape.gather_rows(h[NodeType::User.index()], &us)?;
            let pu = tape.matmul_nt(hu, head[0])?;
            let hc = tape.gather_rows(h[NodeType::Community.index()], &cs)?;
            let z = tape.row_dot(pu, hc)?;
            Ok(Some(tape.bce_with_logits(z, &labels)?))
        }
    }
}

/// Per-epoch record: training loss and validation selection score.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: Option<f64>,
    pub val_score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneOutcome {
    pub head: Head,
    /// Encoder weights the head was selected with.
    pub params: HgtParams,
    pub report: MetricReport,
    /// Splits whose labels were scored, in order.
    pub access_log: Vec<Split>,
    pub history: Vec<EpochRecord>,
}

fn init_head(prep: &Prepared, width: usize, rng: &mut impl Rng) -> Head {
    match &prep.examples {
        Examples::Classes { n_classes, .. } => Head::Linear {
            w: Tensor2::glorot(*n_classes, width, rng),
            b: Tensor2::zeros(1, *n_classes),
        },
        Examples::Values { .. } => Head::Linear {
            w: Tensor2::glorot(1, width, rng),
            b: Tensor2::zeros(1, 1),
        },
        Examples::Edges { .. } => Head::Bilinear { p: Tensor2::identity(width) },
    }
}

fn split_sizes(prep: &Prepared, rep: &mut MetricReport) {
    for s in [Split::Train, Split::Val, Split::Test] {
        rep.push(format!("n_{}", s.name()), prep.indices(s).len() as f64);
    }
    if let Examples::Edges { dropped_overlap, .. } = &prep.examples {
        rep.push("dropped_overlap", *dropped_overlap as f64);
    }
}

/// Trains a head on the training split, keeps the epoch with the best
/// validation score, and scores the test split once with it.
pub fn train_downstream(
    task: &TaskSpec,
    ctx: &EncoderInputs,
    params: &HgtParams,
    cfg: &FinetuneConfig,
) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    if task.kind() == TaskKind::EdgeRanking && task.features == FeatureSource::TextOnly {
        return Err(GastonError::arg("edge ranking needs encoder features"));
    }
    let prep = prepare(task, ctx.graph, cfg)?;
    let tune = task.tune_encoder && task.features == FeatureSource::Encoder;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let width = match task.features {
        FeatureSource::Encoder => params.config.d,
        FeatureSource::TextOnly => ctx.texts.dim(),
    };
    let mut head = init_head(&prep, width, &mut rng);
    let class_w = match &prep.examples {
        Examples::Classes { y, n_classes, .. } => {
            let train: Vec<usize> = prep.indices(Split::Train).iter().map(|&i| y[i]).collect();
            if task.class_weighting && !train.is_empty() {
                class_weights(&train, *n_classes)?
            } else {
                vec![1.0; *n_classes]
            }
        }
        _ => Vec::new(),
    };

    let frozen = if tune { None } else { Some(fixed_features(ctx, params, task.features)?) };
    let full = Subgraph::full(ctx.graph);
    let membership = MembershipMap::from_graph(ctx.graph);
    let mut enc = params.clone();
    let (adam_head, adam_enc) = (Adam::new(cfg.learning_rate), Adam::new(cfg.encoder_learning_rate));
    let (mut state_head, mut state_enc) = (AdamState::new(), AdamState::new());
    let mut log = Vec::new();
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, Head, HgtParams, MetricReport)> = None;

    for epoch in 0..=cfg.epochs {
        let mut tape = Tape::new();
        let (h, enc_vars) = match &frozen {
            Some(f) => (f.clone().map(|t| tape.constant(t)), None),
            None => {
                let vars = enc.register(&mut tape, true);
                let c = tape.constant(ctx.communities.clone());
                let inputs = input_vars(&mut tape, &full, ctx.texts, c, &membership, None)?;
                (encode(&mut tape, &full, inputs, &vars, enc.config.heads)?, Some(vars))
            }
        };
        let values = h.map(|v| tape.value(v).clone());
        let val = evaluate(&prep, &values, &head, Split::Val, cfg.k, &mut log)?;
        let improved = match (&best, &val) {
            (None, _) => true,
            (Some((b, ..)), Some((s, _))) => s > b,
            (Some(_), None) => true,
        };
        if improved {
            let (score, rep) = val.clone().unwrap_or((f64::NEG_INFINITY, MetricReport::new()));
            best = Some((score, epoch, head.clone(), enc.clone(), rep));
        }
        let mut record = EpochRecord {
            epoch,
            train_loss: None,
            val_score: val.map(|v| v.0),
        };
        if epoch == cfg.epochs {
            history.push(record);
            break;
        }

        let head_vars: Vec<Var> = head.tensors_mut().into_iter().map(|t| tape.param(t.clone())).collect();
        let Some(loss) = train_loss(&mut tape, &prep, &h, &head_vars, &class_w, cfg, &mut rng)? else {
            history.push(record);
            continue;
        };
        let lv = tape.scalar(loss);
        if !lv.is_finite() {
            return Err(GastonError::Training {
                step: epoch,
                reason: format!("non-finite fine-tuning loss {lv}"),
            });
        }
        record.train_loss = Some(lv);
        history.push(record);
        let grads = tape.backward(loss)?;
        let mut ht = head.tensors_mut();
        let gh: Vec<Tensor2> = head_vars.iter().zip(&ht).map(|(&v, p)| grads.get_or_zeros(v, p)).collect();
        adam_head.step(&mut ht, &gh, &mut state_head)?;
        if let Some(vars) = enc_vars {
            let mut wt = enc.weights.flat_mut();
            let gw: Vec<Tensor2> = vars.flat().iter().zip(&wt).map(|(&&v, p)| grads.get_or_zeros(v, p)).collect();
            adam_enc.step(&mut wt, &gw, &mut state_enc)?;
        }
    }

    let (_, best_epoch, head, enc, val_rep) = best.expect("epoch 0 always records a candidate");
    let h = match frozen {
        Some(f) => f,
        None => fixed_features(ctx, &enc, FeatureSource::Encoder)?,
    };
    let mut report = MetricReport::new();
    if let Some((_, test_rep)) = evaluate(&prep, &h, &head, Split::Test, cfg.k, &mut log)? {
        for (n, v) in test_rep.entries() {
            report.push(n.clone(), *v);
        }
    }
    for (n, v) in val_rep.entries() {
        report.push(n.clone(), *v);
    }
    report.push("best_epoch", best_epoch as f64);
    split_sizes(&prep, &mut report);
    Ok(FinetuneOutcome {
        head,
        params: enc,
        report,
        access_log: log,
        history,
    })
}

/// Test-split metrics for an already trained head.
pub fn evaluate_test(
    task: &TaskSpec,
    ctx: &EncoderInputs,
    params: &HgtParams,
    head: &Head,
    cfg: &FinetuneConfig,
) -> Result<MetricReport> {
    let prep = prepare(task, ctx.graph, cfg)?;
    let h = fixed_features(ctx, params, task.features)?;
    let mut log = Vec::new();
    let mut report = evaluate(&prep, &h, head, Split::Test, cfg.k, &mut log)?
        .map(|(_, r)| r)
        .unwrap_or_default();
    split_sizes(&prep, &mut report);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::commembed::{train_bpr, BprConfig};
    use crate::fixtures::context_xor;
    use crate::hgt::HgtConfig;
    use proptest::prelude::*;
    use rand::Rng;
    use std::f64::consts::LN_2;

    #[test]
    fn class_weight_anchors() {
        assert_eq!(class_weights(&[0, 1, 0, 1], 2).unwrap(), vec![1.0, 1.0]);
        let mut y = vec![0; 90];
        y.extend([1; 10]);
        let w = class_weights(&y, 2).unwrap();
        assert!((w[0] - 100.0 / 180.0).abs() < 1e-15);
        assert_eq!(w[1], 5.0);
        assert!(class_weights(&[0, 0], 2).is_err());
    }

    #[test]
    fn ce_anchors() {
        let z = Tensor2::from_rows(&[vec![0.3, 0.3]]).unwrap();
        assert!((weighted_ce_loss(&z, &[1], &[1.0, 1.0]).unwrap() - LN_2).abs() < 1e-12);
        let z = Tensor2::from_rows(&[vec![60.0, -60.0]]).unwrap();
        assert!(weighted_ce_loss(&z, &[0], &[1.0, 1.0]).unwrap() < 1e-12);
    }

    #[test]
    fn ce_matches_tape_and_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let n = rng.random_range(1..10);
            let z = Tensor2::random_normal(n, 3, 2.0, &mut rng);
            let y: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
            let w: Vec<f64> = (0..3).map(|_| rng.random_range(0.1..3.0)).collect();
            let got = weighted_ce_loss(&z, &y, &w).unwrap();
            let mut want = 0.0;
            for i in 0..n {
                let denom: f64 = z.row(i).iter().map(|v| v.exp()).sum();
                want += w[y[i]] * -(z.get(i, y[i]).exp() / denom).ln();
            }
            assert!((got - want / n as f64).abs() < 1e-12);
            let mut tape = Tape::new();
            let zv = tape.constant(z.clone());
            let v = tape.softmax_ce(zv, &y, &w).unwrap();
            assert_eq!(tape.scalar(v), got);
            let ones = weighted_ce_loss(&z, &y, &[1.0; 3]).unwrap();
            let plain: f64 = (0..n).map(|i| -log_softmax(z.row(i))[y[i]]).sum::<f64>() / n as f64;
            assert_eq!(ones, plain);
        }
    }

    #[test]
    fn binary_threshold_ties_to_negative() {
        assert_eq!(predict_class(&[0.4, 0.4]), 0);
        assert_eq!(predict_class(&[0.4, 0.41]), 1);
        assert_eq!(predict_class(&[1.0, 3.0, 3.0]), 1);
    }

    fn labels_text(rows: &[(&str, &str)]) -> String {
        rows.iter().map(|(a, b)| format!("{a}\t{b}\n")).collect()
    }

    #[test]
    fn label_parsing() {
        let g = HetGraph::build([2, 3, 2], &[(Relation::TextPostedByUser, 0, 0)]).unwrap();
        let l = read_labels(labels_text(&[("0", "1"), ("2", "0")]).as_bytes(), TaskKind::Classification, &g, None).unwrap();
        let Labels::Classes { rows, names } = l else { panic!() };
        assert_eq!(names, vec!["0", "1"]);
        assert_eq!(rows[0].value, 1);
        assert!(read_labels(&b"5\t1\n"[..], TaskKind::Classification, &g, None).is_err());
        assert!(read_labels(&b"x\t0.5\n"[..], TaskKind::Regression, &g, None).is_err());
        let e = read_labels(&b"1\t0\ttest\n"[..], TaskKind::EdgeRanking, &g, None).unwrap();
        assert_eq!(
            e,
            Labels::Edges(vec![EdgeLabel {
                user: 1,
                community: 0,
                split: Some(Split::Test)
            }])
        );
    }

    #[test]
    fn shared_user_across_predefined_splits_is_leakage() {
        let users = vec!["u0".to_string(), "u0".to_string(), "u1".to_string()];
        let pre = vec![Some(Split::Train), Some(Split::Test), Some(Split::Val)];
        assert!(matches!(
            assign_splits(&users, &pre, &FinetuneConfig::default()),
            Err(GastonError::Leakage(_))
        ));
        let pre = vec![Some(Split::Train), None, Some(Split::Val)];
        assert!(assign_splits(&users, &pre, &FinetuneConfig::default()).is_err());
    }

    #[test]
    fn predefined_split_carves_validation_from_train() {
        let users: Vec<String> = (0..100).map(|i| format!("u{i}")).collect();
        let mut pre = vec![Some(Split::Train); 80];
        pre.extend(vec![Some(Split::Test); 20]);
        let s = assign_splits(&users, &pre, &FinetuneConfig::default()).unwrap();
        assert_eq!(s.iter().filter(|&&x| x == Split::Val).count(), 12);
        assert_eq!(s.iter().filter(|&&x| x == Split::Test).count(), 20);
    }

    struct Setup {
        corpus: crate::fixtures::LabeledCorpus,
        communities: Tensor2,
        params: HgtParams,
    }

    fn xor_setup(seed: u64) -> Setup {
        let corpus = context_xor(seed, 200, 10, 3, 32);
        let bpr = train_bpr(
            &corpus.graph,
            &BprConfig {
                dim: 8,
                steps: 4000,
                rng_seed: seed,
                ..BprConfig::default()
            },
        )
        .unwrap();
        let params = HgtParams::new(
            HgtConfig {
                d: 32,
                layers: 2,
                heads: 4,
                d_in: [8, 32, 8],
            },
            seed,
        )
        .unwrap();
        Setup {
            corpus,
            communities: bpr.communities,
            params,
        }
    }

    fn class_labels(c: &crate::fixtures::LabeledCorpus) -> Labels {
        Labels::Classes {
            rows: c
                .labels
                .iter()
                .map(|&(t, y)| NodeLabel {
                    text: t,
                    value: y,
                    split: None,
                })
                .collect(),
            names: vec!["0".into(), "1".into()],
        }
    }

    #[test]
    fn zero_epochs_is_near_chance_and_test_is_scored_once() {
        let s = xor_setup(1);
        let ctx = EncoderInputs {
            graph: &s.corpus.graph,
            texts: &s.corpus.texts,
            communities: &s.communities,
        };
        let cfg = FinetuneConfig {
            epochs: 0,
            ..FinetuneConfig::default()
        };
        let out = train_downstream(&TaskSpec::new(class_labels(&s.corpus)), &ctx, &s.params, &cfg).unwrap();
        let acc = out.report.get("test_accuracy").unwrap();
        assert!((0.4..=0.6).contains(&acc), "{acc}");
        assert_eq!(out.access_log.iter().filter(|&&x| x == Split::Test).count(), 1);
        assert_eq!(out.access_log.last(), Some(&Split::Test));
        assert_eq!(out.report.get("n_train").unwrap() + out.report.get("n_val").unwrap() + out.report.get("n_test").unwrap(), 2000.0);
    }

    #[test]
    fn separable_labels_reach_full_accuracy() {
        // labels are the side of a random hyperplane, keeping only texts at least 0.2 away from it
        let s = xor_setup(2);
        let x = s.corpus.texts.to_tensor();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let v: Vec<f64> = (0..x.cols()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let rows: Vec<NodeLabel<usize>> = (0..x.rows())
            .filter_map(|t| {
                let m = crate::numerics::dot(x.row(t), &v);
                (m.abs() >= 0.2).then(|| NodeLabel {
                    text: t,
                    value: usize::from(m > 0.0),
                    split: None,
                })
            })
            .collect();
        assert!(rows.len() > 1000);
        let labels = Labels::Classes {
            rows,
            names: vec!["0".into(), "1".into()],
        };
        let ctx = EncoderInputs {
            graph: &s.corpus.graph,
            texts: &s.corpus.texts,
            communities: &s.communities,
        };
        let mut task = TaskSpec::new(labels);
        task.features = FeatureSource::TextOnly;
        let cfg = FinetuneConfig {
            epochs: 600,
            learning_rate: 1e-1,
            ..FinetuneConfig::default()
        };
        let out = train_downstream(&task, &ctx, &s.params, &cfg).unwrap();
        assert_eq!(out.report.get("test_accuracy"), Some(1.0));
        let again = evaluate_test(&task, &ctx, &out.params, &out.head, &cfg).unwrap();
        assert_eq!(again.get("test_accuracy"), Some(1.0));
    }

    #[test]
    fn edge_ranking_excludes_observed_edges() {
        let s = xor_setup(3);
        let g = &s.corpus.graph;
        // every user gets one new cross-block community, plus one duplicate of a pretraining edge
        let mut rows = Vec::new();
        for u in 0..g.count(NodeType::User) {
            rows.push(EdgeLabel {
                user: u,
                community: ((u % 2) ^ 1) * 3 + u % 3,
                split: None,
            });
            rows.push(EdgeLabel {
                user: u,
                community: (u % 2) * 3,
                split: None,
            });
        }
        let task = TaskSpec::new(Labels::Edges(rows));
        let ctx = EncoderInputs {
            graph: g,
            texts: &s.corpus.texts,
            communities: &s.communities,
        };
        let cfg = FinetuneConfig {
            epochs: 30,
            ..FinetuneConfig::default()
        };
        let out = train_downstream(&task, &ctx, &s.params, &cfg).unwrap();
        assert_eq!(out.report.get("dropped_overlap"), Some(200.0));
        let mrr = out.report.get("test_mrr@10").unwrap();
        // 3 candidates remain per user once its own block is excluded
        assert!((1.0 / 3.0..=1.0).contains(&mrr));
        let prep = prepare(&task, g, &cfg).unwrap();
        let Examples::Edges { observed, edges, .. } = &prep.examples else { panic!() };
        for (i, &(u, c)) in edges.iter().enumerate() {
            assert!(!g.contains_edge(Relation::UserActiveInCommunity, u, c));
            if prep.split[i] == Split::Train {
                assert!(observed[u].contains(&c));
            }
        }
    }

    proptest! {
        #[test]
        fn weights_reweight_to_n(y in proptest::collection::vec(0usize..4, 4..60)) {
            let present: BTreeSet<usize> = y.iter().copied().collect();
            prop_assume!(present.len() == 4);
            let w = class_weights(&y, 4).unwrap();
            let total: f64 = y.iter().map(|&c| w[c]).sum();
            prop_assert!((total - y.len() as f64).abs() < 1e-9);
        }
    }
}
