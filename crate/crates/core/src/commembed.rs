//! Community embedding initialization and user aggregation.
//!
//! Two initializers are provided: a BPR ranking model trained on
//! user-community membership, and the mean of each community's text
//! embeddings. Users never get their own parameters downstream; their
//! features are the mean of their communities' rows.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GastonError, Result};
use crate::hetgraph::{HetGraph, NodeType, Relation};
use crate::numerics::{dot, sigmoid, softplus, Tensor2};
use crate::textenc::EmbeddingTable;

/// Sorted community indices per user, mirroring the active-in relation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MembershipMap {
    lists: Vec<Vec<usize>>,
    n_communities: usize,
}

impl MembershipMap {
    pub fn from_graph(g: &HetGraph) -> Self {
        let csr = g.csr(Relation::UserActiveInCommunity);
        MembershipMap {
            lists: (0..g.count(NodeType::User)).map(|u| csr.neighbors(u).to_vec()).collect(),
            n_communities: g.count(NodeType::Community),
        }
    }

    pub fn of(&self, u: usize) -> &[usize] {
        &self.lists[u]
    }

    pub fn n_users(&self) -> usize {
        self.lists.len()
    }

    pub fn n_communities(&self) -> usize {
        self.n_communities
    }

    pub fn is_member(&self, u: usize, c: usize) -> bool {
        self.lists[u].binary_search(&c).is_ok()
    }

    /// Membership lists for the given users, in order.
    pub fn lists_for(&self, users: &[usize]) -> Vec<Vec<usize>> {
        users.iter().map(|&u| self.lists[u].clone()).collect()
    }
}

/// Mean of `u`'s community rows; zero for users without memberships.
pub fn aggregate_user(u: usize, communities: &Tensor2, m: &MembershipMap) -> Vec<f64> {
    let mut out = vec![0.0; communities.cols()];
    let list = m.of(u);
    if list.is_empty() {
        return out;
    }
    for &c in list {
        for (o, x) in out.iter_mut().zip(communities.row(c)) {
            *o += x;
        }
    }
    let n = list.len() as f64;
    out.iter_mut().for_each(|o| *o /= n);
    out
}

pub fn aggregate_users(users: &[usize], communities: &Tensor2, m: &MembershipMap) -> Tensor2 {
    let mut t = Tensor2::zeros(users.len(), communities.cols());
    for (i, &u) in users.iter().enumerate() {
        t.row_mut(i).copy_from_slice(&aggregate_user(u, communities, m));
    }
    t
}

/// Per-community mean of the embeddings of texts posted there. Communities
/// without texts get the zero vector.
pub fn init_communities_average(g: &HetGraph, texts: &EmbeddingTable) -> Result<Tensor2> {
    if texts.count() != g.count(NodeType::Text) {
        return Err(GastonError::arg(format!(
            "embedding table has {} rows but graph has {} texts",
            texts.count(),
            g.count(NodeType::Text)
        )));
    }
    let n_c = g.count(NodeType::Community);
    let mut out = Tensor2::zeros(n_c, texts.dim());
    let csr = g.csr(Relation::CommunityContainsText);
    for c in 0..n_c {
        let members = csr.neighbors(c);
        if members.is_empty() {
            continue;
        }
        let row = out.row_mut(c);
        for &t in members {
            for (o, &x) in row.iter_mut().zip(texts.row(t)) {
                *o += f64::from(x);
            }
        }
        let n = members.len() as f64;
        row.iter_mut().for_each(|o| *o /= n);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BprConfig {
    pub dim: usize,
    pub learning_rate: f64,
    pub l2_lambda: f64,
    pub steps: usize,
    pub negatives_per_positive: usize,
    pub rng_seed: u64,
}

impl Default for BprConfig {
    fn default() -> Self {
        BprConfig {
            dim: 64,
            learning_rate: 0.05,
            l2_lambda: 1e-4,
            steps: 20_000,
            negatives_per_positive: 1,
            rng_seed: 0,
        }
    }
}

impl BprConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(GastonError::Config("bpr dim must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(GastonError::Config("bpr learning_rate must be positive".into()));
        }
        if !(self.l2_lambda >= 0.0 && self.l2_lambda.is_finite()) {
            return Err(GastonError::Config("bpr l2_lambda must be non-negative".into()));
        }
        if self.negatives_per_positive == 0 {
            return Err(GastonError::Config("bpr negatives_per_positive must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BprParams {
    pub users: Tensor2,
    pub communities: Tensor2,
}

impl BprParams {
    /// Entries drawn i.i.d. from N(0, 0.1²).
    pub fn init(n_users: usize, n_communities: usize, dim: usize, rng: &mut impl Rng) -> Self {
        let users = Tensor2::random_normal(n_users, dim, 0.1, rng);
        let communities = Tensor2::random_normal(n_communities, dim, 0.1, rng);
        BprParams { users, communities }
    }
}

/// A training triple: the user, a community they belong to, and one they do
/// not.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Triple {
    pub user: usize,
    pub pos: usize,
    pub neg: usize,
}

/// Uniform sampler over membership edges with rejection-sampled negatives.
#[derive(Debug, Clone)]
pub struct BprSampler {
    edges: Vec<(usize, usize)>,
    membership: MembershipMap,
}

impl BprSampler {
    pub fn new(g: &HetGraph) -> Result<Self> {
        let edges: Vec<(usize, usize)> = g.edges(Relation::UserActiveInCommunity).collect();
        if edges.is_empty() {
            return Err(GastonError::arg("bpr sampling needs at least one membership edge"));
        }
        let membership = MembershipMap::from_graph(g);
        let n_c = membership.n_communities();
        if edges.iter().all(|&(u, _)| membership.of(u).len() == n_c) {
            return Err(GastonError::arg("every user belongs to every community; no negatives exist"));
        }
        Ok(BprSampler { edges, membership })
    }

    pub fn membership(&self) -> &MembershipMap {
        &self.membership
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Triple {
        let n_c = self.membership.n_communities();
        loop {
            let (user, pos) = self.edges[rng.random_range(0..self.edges.len())];
            if self.membership.of(user).len() == n_c {
                continue;
            }
            loop {
                let neg = rng.random_range(0..n_c);
                if !self.membership.is_member(user, neg) {
                    return Triple { user, pos, neg };
                }
            }
        }
    }
}

pub fn bpr_sample(g: &HetGraph, rng: &mut impl Rng) -> Result<Triple> {
    Ok(BprSampler::new(g)?.sample(rng))
}

/// Gradients for the three rows a triple touches.
#[derive(Debug, Clone, PartialEq)]
pub struct TripleGrad {
    pub user: Vec<f64>,
    pub pos: Vec<f64>,
    pub neg: Vec<f64>,
}

/// `softplus(-(s_pos - s_neg)) + λ(|e_u|² + |e_pos|² + |e_neg|²)` with dot
/// product scores, and its exact gradient.
pub fn bpr_loss_and_grad(p: &BprParams, t: Triple, l2_lambda: f64) -> (f64, TripleGrad) {
    let eu = p.users.row(t.user);
    let ep = p.communities.row(t.pos);
    let en = p.communities.row(t.neg);
    let margin = dot(eu, ep) - dot(eu, en);
    let sq = |v: &[f64]| dot(v, v);
    let loss = softplus(-margin) + l2_lambda * (sq(eu) + sq(ep) + sq(en));
    // d softplus(-x)/dx = -sigmoid(-x)
    let g = -sigmoid(-margin);
    let two_l = 2.0 * l2_lambda;
    let grad = TripleGrad {
        user: eu
            .iter()
            .zip(ep.iter().zip(en))
            .map(|(u, (p, n))| g * (p - n) + two_l * u)
            .collect(),
        pos: eu.iter().zip(ep).map(|(u, p)| g * u + two_l * p).collect(),
        neg: eu.iter().zip(en).map(|(u, n)| -g * u + two_l * n).collect(),
    };
    (loss, grad)
}

/// Plain SGD on sampled triples. `steps` counts positives; each positive is
/// paired with `negatives_per_positive` negatives.
pub fn train_bpr(g: &HetGraph, cfg: &BprConfig) -> Result<BprParams> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let mut p = BprParams::init(g.count(NodeType::User), g.count(NodeType::Community), cfg.dim, &mut rng);
    if cfg.steps == 0 {
        return Ok(p);
    }
    let sampler = BprSampler::new(g)?;
    let lr = cfg.learning_rate;
    for step in 0..cfg.steps {
        for _ in 0..cfg.negatives_per_positive {
            let t = sampler.sample(&mut rng);
            let (loss, grad) = bpr_loss_and_grad(&p, t, cfg.l2_lambda);
            if !loss.is_finite() {
                return Err(GastonError::Training {
                    step,
                    reason: format!("non-finite bpr loss {loss}"),
                });
            }
            let update = |row: &mut [f64], g: &[f64]| row.iter_mut().zip(g).for_each(|(x, d)| *x -= lr * d);
            update(p.users.row_mut(t.user), &grad.user);
            update(p.communities.row_mut(t.pos), &grad.pos);
            update(p.communities.row_mut(t.neg), &grad.neg);
        }
    }
    Ok(p)
}
