//! `HGG1` binary graph files.
//!
//! Layout, all integers little-endian `u64`:
//!
//! ```text
//! "HGG1" | n_user n_text n_community
//! for each forward relation (posted-in, active-in, posted-by):
//!     edge_count | (src dst) * edge_count
//! ```
//!
//! Reverse relations are not stored; they are rebuilt on load.

use std::io::{Read, Write};

use crate::error::{GastonError, Result};
use crate::hetgraph::{HetGraph, Relation};

pub const GRAPH_MAGIC: &[u8; 4] = b"HGG1";

pub fn write_graph<W: Write>(g: &HetGraph, mut w: W) -> Result<()> {
    w.write_all(GRAPH_MAGIC)?;
    for c in g.counts() {
        w.write_all(&(c as u64).to_le_bytes())?;
    }
    for r in Relation::FORWARD {
        w.write_all(&(g.edge_count(r) as u64).to_le_bytes())?;
        for (s, d) in g.edges(r) {
            w.write_all(&(s as u64).to_le_bytes())?;
            w.write_all(&(d as u64).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_u64<R: Read>(r: &mut R, what: &str) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)
        .map_err(|e| GastonError::Format(format!("truncated graph file reading {what}: {e}")))?;
    Ok(u64::from_le_bytes(buf))
}

pub fn read_graph<R: Read>(mut r: R) -> Result<HetGraph> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| GastonError::Format("missing graph magic".into()))?;
    if &magic != GRAPH_MAGIC {
        return Err(GastonError::Format(format!("bad graph magic {magic:?}")));
    }
    let mut counts = [0usize; 3];
    for c in &mut counts {
        *c = read_u64(&mut r, "node count")? as usize;
    }
    let mut edges = Vec::new();
    for rel in Relation::FORWARD {
        let n = read_u64(&mut r, "edge count")?;
        for _ in 0..n {
            let s = read_u64(&mut r, "edge source")? as usize;
            let d = read_u64(&mut r, "edge target")? as usize;
            edges.push((rel, s, d));
        }
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(GastonError::Format("trailing bytes after graph data".into()));
    }
    HetGraph::build(counts, &edges)
}
