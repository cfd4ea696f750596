//! Small synthetic graphs with known structure, shared by the test suites
//! and the `selftest` command.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::hetgraph::{HetGraph, Relation};
use crate::numerics::Tensor2;
use crate::textenc::{encode_texts, EmbeddingTable};

/// `blocks` disjoint groups, each with `users_per_block` users who are
/// members of all `comms_per_block` communities of their own group and no
/// others. User `u` and community `c` are in block `u / users_per_block`
/// and `c / comms_per_block`. There are no text nodes.
pub fn planted_blocks(blocks: usize, users_per_block: usize, comms_per_block: usize) -> HetGraph {
    let mut edges = Vec::new();
    for b in 0..blocks {
        for u in 0..users_per_block {
            for c in 0..comms_per_block {
                edges.push((
                    Relation::UserActiveInCommunity,
                    b * users_per_block + u,
                    b * comms_per_block + c,
                ));
            }
        }
    }
    HetGraph::build([blocks * users_per_block, 0, blocks * comms_per_block], &edges)
        .expect("block indices are in range")
}

/// A random graph with `n_edges` forward edges drawn uniformly over
/// relations and endpoints. Duplicate draws collapse.
pub fn random_graph(seed: u64, counts: [usize; 3], n_edges: usize) -> HetGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let edges: Vec<_> = (0..n_edges)
        .map(|_| {
            let r = Relation::FORWARD[rng.random_range(0..3)];
            (
                r,
                rng.random_range(0..counts[r.src_type().index()]),
                rng.random_range(0..counts[r.dst_type().index()]),
            )
        })
        .collect();
    HetGraph::build(counts, &edges).expect("indices are in range")
}

/// Users, texts and communities where text content follows the community.
///
/// Communities are split into `blocks` groups. Each user picks a home block
/// and joins two of its communities. Each text is written by a random user
/// in one of that user's communities, and its embedding is the community's
/// random prototype plus Gaussian noise of scale 0.3.
pub fn community_corpus(
    seed: u64,
    n_users: usize,
    n_texts: usize,
    n_comms: usize,
    blocks: usize,
    dim: usize,
) -> (HetGraph, EmbeddingTable) {
    assert!(blocks >= 1 && n_comms >= 2 * blocks && n_users >= 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let per_block = n_comms / blocks;
    let prototypes = Tensor2::random_normal(n_comms, dim, 1.0, &mut rng);
    let mut member: Vec<Vec<usize>> = Vec::with_capacity(n_users);
    let mut edges = Vec::new();
    for u in 0..n_users {
        let b = u % blocks;
        let a = b * per_block + rng.random_range(0..per_block);
        let mut c = b * per_block + rng.random_range(0..per_block);
        if c == a {
            c = b * per_block + (c - b * per_block + 1) % per_block;
        }
        for x in [a, c] {
            edges.push((Relation::UserActiveInCommunity, u, x));
        }
        member.push(vec![a, c]);
    }
    let noise = Tensor2::random_normal(n_texts, dim, 0.3, &mut rng);
    let mut data = Vec::with_capacity(n_texts * dim);
    for t in 0..n_texts {
        let u = rng.random_range(0..n_users);
        let c = member[u][rng.random_range(0..2)];
        edges.push((Relation::TextPostedByUser, t, u));
        edges.push((Relation::TextPostedInCommunity, t, c));
        data.extend(prototypes.row(c).iter().zip(noise.row(t)).map(|(p, e)| (p + e) as f32));
    }
    let g = HetGraph::build([n_users, n_texts, n_comms], &edges).expect("indices are in range");
    (g, EmbeddingTable::new(dim, data).expect("finite"))
}

/// A graph with text embeddings and one class label per text.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledCorpus {
    pub graph: HetGraph,
    pub texts: EmbeddingTable,
    pub bodies: Vec<String>,
    /// `(text index, class)` for every text.
    pub labels: Vec<(usize, usize)>,
}

/// Two blocks of communities. User `u` belongs to block `u % 2` and joins
/// every community of it. Each text opens with the token `alpha` or `beta`
/// followed by three random filler words, and its label is the token bit
/// XOR the block of the community it was posted in. Token and block are
/// independent, so the text alone carries no information about the label.
pub fn context_xor(seed: u64, n_users: usize, texts_per_user: usize, comms_per_block: usize, dim: usize) -> LabeledCorpus {
    assert!(n_users >= 2 && comms_per_block >= 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut edges = Vec::new();
    for u in 0..n_users {
        for j in 0..comms_per_block {
            edges.push((Relation::UserActiveInCommunity, u, (u % 2) * comms_per_block + j));
        }
    }
    let mut bodies = Vec::new();
    let mut labels = Vec::new();
    for u in 0..n_users {
        for _ in 0..texts_per_user {
            let t = bodies.len();
            let block = u % 2;
            let c = block * comms_per_block + rng.random_range(0..comms_per_block);
            let bit = rng.random_range(0..2usize);
            let filler: Vec<String> = (0..3).map(|_| format!("w{}", rng.random_range(0..50))).collect();
            bodies.push(format!("{} {}", if bit == 1 { "alpha" } else { "beta" }, filler.join(" ")));
            labels.push((t, bit ^ block));
            edges.push((Relation::TextPostedByUser, t, u));
            edges.push((Relation::TextPostedInCommunity, t, c));
        }
    }
    let graph = HetGraph::build([n_users, bodies.len(), 2 * comms_per_block], &edges).expect("indices are in range");
    let texts = encode_texts(&bodies, dim).expect("dim is large enough");
    LabeledCorpus {
        graph,
        texts,
        bodies,
        labels,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hetgraph::NodeType;

    #[test]
    fn block_sizes() {
        let g = planted_blocks(2, 20, 5);
        assert_eq!(g.counts(), [40, 0, 10]);
        assert_eq!(g.edge_count(Relation::UserActiveInCommunity), 200);
        assert!(g.contains_edge(Relation::UserActiveInCommunity, 25, 7));
        assert!(!g.contains_edge(Relation::UserActiveInCommunity, 25, 2));
        assert_eq!(g.count(NodeType::Text), 0);
    }

    #[test]
    fn corpus_shapes() {
        let (g, x) = community_corpus(1, 40, 250, 10, 2, 8);
        assert_eq!(g.counts(), [40, 250, 10]);
        assert_eq!(x.count(), 250);
        assert_eq!(g.edge_count(Relation::TextPostedByUser), 250);
        assert_eq!(g.edge_count(Relation::UserActiveInCommunity), 80);
        assert_eq!(community_corpus(1, 40, 250, 10, 2, 8).1, x);
    }

    #[test]
    fn xor_labels_follow_token_and_block() {
        let f = context_xor(2, 10, 4, 3, 32);
        assert_eq!(f.graph.counts(), [10, 40, 6]);
        for &(t, y) in &f.labels {
            let bit = usize::from(f.bodies[t].starts_with("alpha"));
            let c = f.graph.csr(Relation::TextPostedInCommunity).neighbors(t)[0];
            assert_eq!(y, bit ^ (c / 3));
        }
    }
}
