use crate::error::{GastonError, Result};
use crate::hetgraph::{NodeRef, NodeType, Relation};

/// Compressed sparse row adjacency: the out-neighbors of `v` are
/// `targets[offsets[v]..offsets[v + 1]]`, sorted ascending.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Csr {
    pub offsets: Vec<usize>,
    pub targets: Vec<usize>,
}

impl Csr {
    /// `edges` must be sorted by (src, dst) and free of duplicates.
    fn from_sorted(n_src: usize, edges: &[(usize, usize)]) -> Self {
        let mut offsets = vec![0usize; n_src + 1];
        for &(s, _) in edges {
            offsets[s + 1] += 1;
        }
        for i in 0..n_src {
            offsets[i + 1] += offsets[i];
        }
        Csr {
            offsets,
            targets: edges.iter().map(|&(_, t)| t).collect(),
        }
    }

    #[inline]
    pub fn neighbors(&self, v: usize) -> &[usize] {
        &self.targets[self.offsets[v]..self.offsets[v + 1]]
    }

    #[inline]
    pub fn degree(&self, v: usize) -> usize {
        self.offsets[v + 1] - self.offsets[v]
    }

    pub fn edge_count(&self) -> usize {
        self.targets.len()
    }

    pub fn contains(&self, src: usize, dst: usize) -> bool {
        self.neighbors(src).binary_search(&dst).is_ok()
    }
}

/// Immutable heterogeneous graph. Safe to share across threads.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HetGraph {
    counts: [usize; 3],
    adjacency: [Csr; 6],
}

impl HetGraph {
    /// Builds the graph from forward or reverse edges `(relation, src, dst)`.
    /// Each edge's reverse is added and duplicates are merged.
    pub fn build(counts: [usize; 3], edges: &[(Relation, usize, usize)]) -> Result<HetGraph> {
        let mut per_rel: [Vec<(usize, usize)>; 6] = Default::default();
        for &(r, s, d) in edges {
            let (st, dt) = (r.src_type(), r.dst_type());
            if s >= counts[st.index()] {
                return Err(GastonError::Bounds(format!(
                    "{r}: source {st} {s} >= {}",
                    counts[st.index()]
                )));
            }
            if d >= counts[dt.index()] {
                return Err(GastonError::Bounds(format!(
                    "{r}: target {dt} {d} >= {}",
                    counts[dt.index()]
                )));
            }
            per_rel[r.index()].push((s, d));
            per_rel[r.reverse().index()].push((d, s));
        }
        let adjacency = Relation::ALL.map(|r| {
            let list = &mut per_rel[r.index()];
            list.sort_unstable();
            list.dedup();
            Csr::from_sorted(counts[r.src_type().index()], list)
        });
        Ok(HetGraph { counts, adjacency })
    }

    /// Like [`HetGraph::build`] but with typed endpoints, rejecting edges
    /// whose endpoint types do not match the relation.
    pub fn build_typed(counts: [usize; 3], edges: &[(Relation, NodeRef, NodeRef)]) -> Result<HetGraph> {
        let mut raw = Vec::with_capacity(edges.len());
        for &(r, s, d) in edges {
            if s.node_type != r.src_type() || d.node_type != r.dst_type() {
                return Err(GastonError::Schema(format!(
                    "{r} expects {} -> {}, got {} -> {}",
                    r.src_type(),
                    r.dst_type(),
                    s.node_type,
                    d.node_type
                )));
            }
            raw.push((r, s.index, d.index));
        }
        Self::build(counts, &raw)
    }

    pub fn empty() -> HetGraph {
        HetGraph::build([0, 0, 0], &[]).expect("empty graph is valid")
    }

    #[inline]
    pub fn count(&self, t: NodeType) -> usize {
        self.counts[t.index()]
    }

    pub fn counts(&self) -> [usize; 3] {
        self.counts
    }

    #[inline]
    pub fn csr(&self, r: Relation) -> &Csr {
        &self.adjacency[r.index()]
    }

    pub fn edge_count(&self, r: Relation) -> usize {
        self.adjacency[r.index()].edge_count()
    }

    pub fn total_edges(&self) -> usize {
        self.adjacency.iter().map(Csr::edge_count).sum()
    }

    pub fn contains_edge(&self, r: Relation, src: usize, dst: usize) -> bool {
        src < self.count(r.src_type()) && self.adjacency[r.index()].contains(src, dst)
    }

    fn validate(&self, v: NodeRef, r: Relation) -> Result<()> {
        if v.node_type != r.src_type() {
            return Err(GastonError::Schema(format!(
                "{r} starts at {} nodes, not {}",
                r.src_type(),
                v.node_type
            )));
        }
        if v.index >= self.count(v.node_type) {
            return Err(GastonError::Bounds(format!(
                "{} {} >= {}",
                v.node_type,
                v.index,
                self.count(v.node_type)
            )));
        }
        Ok(())
    }

    /// Out-neighbor indices of `v` under `r`, ascending.
    pub fn neighbor_indices(&self, v: NodeRef, r: Relation) -> Result<&[usize]> {
        self.validate(v, r)?;
        Ok(self.adjacency[r.index()].neighbors(v.index))
    }

    pub fn neighbors(&self, v: NodeRef, r: Relation) -> Result<Vec<NodeRef>> {
        let dt = r.dst_type();
        Ok(self
            .neighbor_indices(v, r)?
            .iter()
            .map(|&i| NodeRef::new(dt, i))
            .collect())
    }

    /// All edges of `r` as `(src, dst)` pairs in CSR order.
    pub fn edges(&self, r: Relation) -> impl Iterator<Item = (usize, usize)> + '_ {
        let csr = &self.adjacency[r.index()];
        (0..csr.offsets.len() - 1).flat_map(move |s| csr.neighbors(s).iter().map(move |&d| (s, d)))
    }
}
