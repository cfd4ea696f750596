//! Layer-wise neighbor sampling.

use std::collections::HashMap;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{GastonError, Result};
use crate::hetgraph::{HetGraph, NodeRef, NodeType, Relation};

/// Per-layer, per-relation caps on sampled neighbors.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fanouts(pub Vec<[usize; 6]>);

impl Fanouts {
    pub fn uniform(layers: usize, k: usize) -> Self {
        Fanouts(vec![[k; 6]; layers])
    }

    pub fn layers(&self) -> usize {
        self.0.len()
    }

    pub fn get(&self, layer: usize, r: Relation) -> usize {
        self.0[layer][r.index()]
    }
}

/// Sampled node set plus every graph edge between sampled nodes.
///
/// Local indices are dense per type; seeds occupy the first local slots of
/// their type in the order given.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Subgraph {
    seeds: Vec<NodeRef>,
    nodes: [Vec<usize>; 3],
    lookup: [HashMap<usize, usize>; 3],
    edges: [Vec<(usize, usize)>; 6],
}

impl Subgraph {
    fn with_nodes(g: &HetGraph, seeds: Vec<NodeRef>, nodes: [Vec<usize>; 3], lookup: [HashMap<usize, usize>; 3]) -> Self {
        let mut edges: [Vec<(usize, usize)>; 6] = Default::default();
        for r in Relation::ALL {
            let (st, dt) = (r.src_type().index(), r.dst_type().index());
            let csr = g.csr(r);
            for (ls, &s) in nodes[st].iter().enumerate() {
                for d in csr.neighbors(s) {
                    if let Some(&ld) = lookup[dt].get(d) {
                        edges[r.index()].push((ls, ld));
                    }
                }
            }
        }
        Subgraph {
            seeds,
            nodes,
            lookup,
            edges,
        }
    }

    /// Every node and edge of `g`, with local index = global index.
    pub fn full(g: &HetGraph) -> Self {
        let nodes = NodeType::ALL.map(|t| (0..g.count(t)).collect::<Vec<_>>());
        let lookup = NodeType::ALL.map(|t| (0..g.count(t)).map(|i| (i, i)).collect());
        Self::with_nodes(g, Vec::new(), nodes, lookup)
    }

    /// Breadth-wise expansion from `seeds`: at layer `l` each newly reached
    /// node keeps at most `fanouts[l][r]` of its `r`-neighbors, drawn
    /// uniformly without replacement. Deterministic in `rng_seed`.
    pub fn sample(g: &HetGraph, seeds: &[NodeRef], fanouts: &Fanouts, rng_seed: u64) -> Result<Self> {
        if seeds.is_empty() {
            return Err(GastonError::arg("neighbor sampling needs at least one seed"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        let mut nodes: [Vec<usize>; 3] = Default::default();
        let mut lookup: [HashMap<usize, usize>; 3] = Default::default();
        let mut seed_list = Vec::with_capacity(seeds.len());
        let mut frontier = Vec::new();

        let insert = |v: NodeRef, nodes: &mut [Vec<usize>; 3], lookup: &mut [HashMap<usize, usize>; 3]| {
            let t = v.node_type.index();
            if lookup[t].contains_key(&v.index) {
                return false;
            }
            lookup[t].insert(v.index, nodes[t].len());
            nodes[t].push(v.index);
            true
        };

        for &s in seeds {
            if s.index >= g.count(s.node_type) {
                return Err(GastonError::Bounds(format!(
                    "seed {} {} >= {}",
                    s.node_type,
                    s.index,
                    g.count(s.node_type)
                )));
            }
            if insert(s, &mut nodes, &mut lookup) {
                seed_list.push(s);
                frontier.push(s);
            }
        }

        for layer in 0..fanouts.layers() {
            let mut next = Vec::new();
            for &v in &frontier {
                for r in Relation::ALL {
                    if r.src_type() != v.node_type {
                        continue;
                    }
                    let nbrs = g.csr(r).neighbors(v.index);
                    let k = fanouts.get(layer, r);
                    let dt = r.dst_type();
                    let mut take = |i: usize| {
                        let u = NodeRef::new(dt, nbrs[i]);
                        if insert(u, &mut nodes, &mut lookup) {
                            next.push(u);
                        }
                    };
                    if nbrs.len() <= k {
                        (0..nbrs.len()).for_each(&mut take);
                    } else {
                        let mut picked = index::sample(&mut rng, nbrs.len(), k).into_vec();
                        picked.sort_unstable();
                        picked.into_iter().for_each(&mut take);
                    }
                }
            }
            frontier = next;
        }

        Ok(Self::with_nodes(g, seed_list, nodes, lookup))
    }

    pub fn seeds(&self) -> &[NodeRef] {
        &self.seeds
    }

    /// Global indices of sampled nodes of type `t`, in local order.
    pub fn nodes(&self, t: NodeType) -> &[usize] {
        &self.nodes[t.index()]
    }

    pub fn count(&self, t: NodeType) -> usize {
        self.nodes[t.index()].len()
    }

    pub fn counts(&self) -> [usize; 3] {
        NodeType::ALL.map(|t| self.count(t))
    }

    /// Edges of `r` in local indices.
    pub fn edges(&self, r: Relation) -> &[(usize, usize)] {
        &self.edges[r.index()]
    }

    pub fn local(&self, v: NodeRef) -> Option<usize> {
        self.lookup[v.node_type.index()].get(&v.index).copied()
    }

    pub fn global(&self, t: NodeType, local: usize) -> NodeRef {
        NodeRef::new(t, self.nodes[t.index()][local])
    }
}

impl HetGraph {
    pub fn sample_subgraph(&self, seeds: &[NodeRef], fanouts: &Fanouts, rng_seed: u64) -> Result<Subgraph> {
        Subgraph::sample(self, seeds, fanouts, rng_seed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use std::collections::BTreeSet;

    fn random_graph(seed: u64, counts: [usize; 3], n_edges: usize) -> HetGraph {
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
        HetGraph::build(counts, &edges).unwrap()
    }

    /// All nodes within `hops` of the seeds, by plain BFS.
    fn bfs(g: &HetGraph, seeds: &[NodeRef], hops: usize) -> BTreeSet<NodeRef> {
        let mut seen: BTreeSet<NodeRef> = seeds.iter().copied().collect();
        let mut frontier: Vec<NodeRef> = seeds.to_vec();
        for _ in 0..hops {
            let mut next = Vec::new();
            for v in frontier {
                for r in Relation::ALL.into_iter().filter(|r| r.src_type() == v.node_type) {
                    for u in g.neighbors(v, r).unwrap() {
                        if seen.insert(u) {
                            next.push(u);
                        }
                    }
                }
            }
            frontier = next;
        }
        seen
    }

    fn node_set(s: &Subgraph) -> BTreeSet<NodeRef> {
        NodeType::ALL
            .into_iter()
            .flat_map(|t| s.nodes(t).iter().map(move |&i| NodeRef::new(t, i)))
            .collect()
    }

    #[test]
    fn unbounded_fanout_gives_full_neighborhood() {
        let g = random_graph(1, [10, 30, 5], 60);
        let seeds = [NodeRef::text(0), NodeRef::text(7)];
        let s = g.sample_subgraph(&seeds, &Fanouts::uniform(2, usize::MAX), 9).unwrap();
        assert_eq!(node_set(&s), bfs(&g, &seeds, 2));
    }

    #[test]
    fn isolated_seed() {
        let g = HetGraph::build([1, 2, 1], &[(Relation::TextPostedByUser, 0, 0)]).unwrap();
        let s = g.sample_subgraph(&[NodeRef::text(1)], &Fanouts::uniform(3, 10), 0).unwrap();
        assert_eq!(s.counts(), [0, 1, 0]);
        assert!(Relation::ALL.iter().all(|&r| s.edges(r).is_empty()));
        assert_eq!(s.seeds(), &[NodeRef::text(1)]);
    }

    #[test]
    fn fanout_truncates_and_is_deterministic() {
        let edges: Vec<_> = (0..5).map(|c| (Relation::UserActiveInCommunity, 0, c)).collect();
        let g = HetGraph::build([1, 0, 5], &edges).unwrap();
        let mut f = Fanouts::uniform(1, 10);
        f.0[0][Relation::UserActiveInCommunity.index()] = 2;
        let a = g.sample_subgraph(&[NodeRef::user(0)], &f, 42).unwrap();
        let b = g.sample_subgraph(&[NodeRef::user(0)], &f, 42).unwrap();
        assert_eq!(a.count(NodeType::Community), 2);
        let distinct: BTreeSet<_> = a.nodes(NodeType::Community).iter().collect();
        assert_eq!(distinct.len(), 2);
        assert_eq!(a, b);
    }

    #[test]
    fn empty_seeds_rejected() {
        let g = HetGraph::empty();
        assert!(matches!(
            g.sample_subgraph(&[], &Fanouts::uniform(1, 1), 0),
            Err(GastonError::Argument(_))
        ));
    }

    #[test]
    fn full_subgraph_mirrors_graph() {
        let g = random_graph(4, [5, 12, 3], 20);
        let s = Subgraph::full(&g);
        for r in Relation::ALL {
            let expected: Vec<_> = g.edges(r).collect();
            assert_eq!(s.edges(r), &expected[..]);
        }
    }

    proptest! {
        #[test]
        fn sampled_subgraph_is_a_subgraph(seed in 0u64..500, k in 1usize..4, layers in 1usize..3) {
            let g = random_graph(seed, [8, 25, 4], 50);
            let seeds = [NodeRef::text((seed % 25) as usize), NodeRef::user((seed % 8) as usize)];
            let s = g.sample_subgraph(&seeds, &Fanouts::uniform(layers, k), seed).unwrap();
            for &sd in &seeds {
                prop_assert!(s.local(sd).is_some());
            }
            for r in Relation::ALL {
                for &(ls, ld) in s.edges(r) {
                    let gs = s.global(r.src_type(), ls);
                    let gd = s.global(r.dst_type(), ld);
                    prop_assert!(g.contains_edge(r, gs.index, gd.index));
                }
            }
            for t in NodeType::ALL {
                let uniq: BTreeSet<_> = s.nodes(t).iter().collect();
                prop_assert_eq!(uniq.len(), s.count(t));
            }
            let again = g.sample_subgraph(&seeds, &Fanouts::uniform(layers, k), seed).unwrap();
            prop_assert_eq!(s, again);
        }
    }
}
