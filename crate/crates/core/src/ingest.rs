//! Archive parsing, thread-quality filtering, graph construction and
//! user-level splitting.
//!
//! Input is one JSON object per line with the fields `id`, `author`,
//! `subreddit` (or `community`), optional `parent_id`, `score`, `body` (or
//! `selftext`) and `created_utc`. Parent ids may carry the usual `t1_`/`t3_`
//! kind prefix.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

use crate::error::{GastonError, Result};
use crate::hetgraph::{HetGraph, NodeType, Relation};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Record {
    pub id: String,
    pub author: String,
    pub community: String,
    pub parent_id: Option<String>,
    pub score: i64,
    pub body: String,
    pub created_utc: i64,
}

/// A line that could not be turned into a [`Record`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Reject {
    /// 1-based line number.
    pub line: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ParseOutcome {
    pub records: Vec<Record>,
    pub rejects: Vec<Reject>,
}

impl ParseOutcome {
    /// One `line<TAB>reason` row per reject.
    pub fn write_rejects<W: Write>(&self, mut w: W) -> Result<()> {
        for r in &self.rejects {
            writeln!(w, "{}\t{}", r.line, r.reason.replace(['\t', '\n'], " "))?;
        }
        Ok(())
    }
}

fn str_field(obj: &serde_json::Map<String, Value>, names: &[&str]) -> std::result::Result<String, String> {
    for n in names {
        match obj.get(*n) {
            Some(Value::String(s)) => return Ok(s.clone()),
            Some(Value::Null) | None => continue,
            Some(other) => return Err(format!("field `{n}` is not a string: {other}")),
        }
    }
    Err(format!("missing field `{}`", names[0]))
}

fn int_field(obj: &serde_json::Map<String, Value>, name: &str) -> std::result::Result<i64, String> {
    match obj.get(name) {
        Some(Value::Number(n)) => n
            .as_i64()
            .or_else(|| n.as_f64().filter(|f| f.fract() == 0.0).map(|f| f as i64))
            .ok_or_else(|| format!("field `{name}` is not an integer: {n}")),
        Some(Value::String(s)) => s
            .trim()
            .parse::<i64>()
            .map_err(|_| format!("field `{name}` is not an integer: {s:?}")),
        Some(other) => Err(format!("field `{name}` is not an integer: {other}")),
        None => Err(format!("missing field `{name}`")),
    }
}

fn parse_line(line: &str) -> std::result::Result<Record, String> {
    let value: Value = serde_json::from_str(line).map_err(|e| format!("malformed JSON: {e}"))?;
    let Value::Object(obj) = value else {
        return Err("line is not a JSON object".into());
    };
    let id = str_field(&obj, &["id"])?;
    if id.is_empty() {
        return Err("empty `id`".into());
    }
    let parent_id = match obj.get("parent_id") {
        None | Some(Value::Null) => None,
        Some(Value::String(s)) if s.is_empty() => None,
        Some(Value::String(s)) => Some(s.clone()),
        Some(other) => return Err(format!("field `parent_id` is not a string: {other}")),
    };
    Ok(Record {
        id,
        author: str_field(&obj, &["author"])?,
        community: str_field(&obj, &["subreddit", "community"])?,
        parent_id,
        score: int_field(&obj, "score")?,
        body: str_field(&obj, &["body", "selftext"])?,
        created_utc: int_field(&obj, "created_utc")?,
    })
}

/// Parses newline-delimited JSON. Bad lines are reported, not fatal; blank
/// lines are skipped.
pub fn parse_archive<R: BufRead>(reader: R) -> Result<ParseOutcome> {
    let mut out = ParseOutcome::default();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match parse_line(&line) {
            Ok(r) => out.records.push(r),
            Err(reason) => out.rejects.push(Reject { line: i + 1, reason }),
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FilterConfig {
    /// Minimum score of a thread's root submission.
    pub min_score: i64,
    /// Deepest comment kept; the root is depth 0 and its direct replies depth 1.
    pub max_depth: usize,
    /// When set, only records from these communities are kept.
    pub communities: Option<BTreeSet<String>>,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            min_score: 25,
            max_depth: 4,
            communities: None,
        }
    }
}

fn base_id(id: &str) -> &str {
    let b = id.as_bytes();
    if b.len() > 3 && b[0] == b't' && b[1].is_ascii_digit() && b[2] == b'_' {
        &id[3..]
    } else {
        id
    }
}

/// Thread root and depth of every record. Records whose parent is absent from
/// the input are their own roots at depth 0.
fn thread_positions(records: &[Record]) -> Result<Vec<(usize, usize)>> {
    let mut by_id: HashMap<&str, usize> = HashMap::with_capacity(records.len());
    for (i, r) in records.iter().enumerate() {
        by_id.entry(base_id(&r.id)).or_insert(i);
    }
    let parent: Vec<Option<usize>> = records
        .iter()
        .map(|r| r.parent_id.as_deref().and_then(|p| by_id.get(base_id(p)).copied()))
        .collect();

    const UNSEEN: u8 = 0;
    const ACTIVE: u8 = 1;
    const DONE: u8 = 2;
    let mut state = vec![UNSEEN; records.len()];
    let mut pos = vec![(0usize, 0usize); records.len()];
    for start in 0..records.len() {
        if state[start] == DONE {
            continue;
        }
        let mut chain = Vec::new();
        let mut cur = start;
        let base = loop {
            match state[cur] {
                DONE => break Some(pos[cur]),
                ACTIVE => {
                    let at = chain.iter().position(|&c| c == cur).unwrap_or(0);
                    let ids: Vec<&str> = chain[at..].iter().map(|&c: &usize| records[c].id.as_str()).collect();
                    return Err(GastonError::Data(format!("parent cycle: {}", ids.join(" -> "))));
                }
                _ => {}
            }
            state[cur] = ACTIVE;
            chain.push(cur);
            match parent[cur] {
                Some(p) => cur = p,
                None => break None,
            }
        };
        let (root, mut depth) = match base {
            Some((root, d)) => (root, d + 1),
            None => (*chain.last().expect("chain is nonempty"), 0),
        };
        for &c in chain.iter().rev() {
            pos[c] = (root, depth);
            state[c] = DONE;
            depth += 1;
        }
    }
    Ok(pos)
}

/// Keeps root submissions scoring at least `min_score` and the comments
/// under them down to `max_depth`. Order is preserved.
pub fn filter_records(records: &[Record], cfg: &FilterConfig) -> Result<Vec<Record>> {
    let pos = thread_positions(records)?;
    let root_ok: Vec<bool> = records.iter().map(|r| r.score >= cfg.min_score).collect();
    Ok(records
        .iter()
        .zip(&pos)
        .filter(|(r, &(root, depth))| {
            root_ok[root]
                && depth <= cfg.max_depth
                && cfg.communities.as_ref().is_none_or(|allow| allow.contains(&r.community))
        })
        .map(|(r, _)| r.clone())
        .collect())
}

pub fn is_deleted_author(author: &str) -> bool {
    let a = author.trim();
    a.is_empty() || a == "[deleted]" || a == "[removed]"
}

/// A graph built from records, with the original ids of every node.
#[derive(Debug, Clone, PartialEq)]
pub struct Interaction {
    pub graph: HetGraph,
    pub users: Vec<String>,
    pub communities: Vec<String>,
    /// Record id per text node.
    pub texts: Vec<String>,
    /// Body per text node.
    pub bodies: Vec<String>,
    /// Records skipped because their author was deleted.
    pub dropped_deleted: usize,
}

impl Interaction {
    pub fn id_map(&self) -> IdMap {
        IdMap {
            ids: [self.users.clone(), self.texts.clone(), self.communities.clone()],
        }
    }
}

fn intern(map: &mut HashMap<String, usize>, names: &mut Vec<String>, key: &str) -> usize {
    if let Some(&i) = map.get(key) {
        return i;
    }
    map.insert(key.to_string(), names.len());
    names.push(key.to_string());
    names.len() - 1
}

/// One text node per record, one user per author, one community per
/// community name, in order of first appearance. A user is active in a
/// community when they have at least one record there.
pub fn build_interaction_graph(records: &[Record]) -> Result<Interaction> {
    let (mut users, mut communities, mut texts, mut bodies) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let (mut user_ix, mut comm_ix) = (HashMap::new(), HashMap::new());
    let mut edges = Vec::new();
    let mut dropped = 0;
    for r in records {
        if is_deleted_author(&r.author) {
            dropped += 1;
            continue;
        }
        let u = intern(&mut user_ix, &mut users, &r.author);
        let c = intern(&mut comm_ix, &mut communities, &r.community);
        let t = texts.len();
        texts.push(r.id.clone());
        bodies.push(r.body.clone());
        edges.push((Relation::TextPostedByUser, t, u));
        edges.push((Relation::TextPostedInCommunity, t, c));
        edges.push((Relation::UserActiveInCommunity, u, c));
    }
    let graph = HetGraph::build([users.len(), texts.len(), communities.len()], &edges)?;
    Ok(Interaction {
        graph,
        users,
        communities,
        texts,
        bodies,
        dropped_deleted: dropped,
    })
}

/// Original ids per node type, indexed by dense node index.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct IdMap {
    ids: [Vec<String>; 3],
}

impl IdMap {
    pub fn ids(&self, t: NodeType) -> &[String] {
        &self.ids[t.index()]
    }

    pub fn lookup(&self, t: NodeType) -> HashMap<&str, usize> {
        self.ids[t.index()]
            .iter()
            .enumerate()
            .map(|(i, s)| (s.as_str(), i))
            .collect()
    }

    /// `node_type<TAB>index<TAB>original_id` per node.
    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        for t in NodeType::ALL {
            for (i, id) in self.ids[t.index()].iter().enumerate() {
                writeln!(w, "{}\t{i}\t{id}", t.name())?;
            }
        }
        Ok(())
    }

    pub fn read<R: BufRead>(r: R) -> Result<IdMap> {
        let mut ids: [BTreeMap<usize, String>; 3] = Default::default();
        for (n, line) in r.lines().enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let mut parts = line.splitn(3, '\t');
            let (Some(t), Some(i), Some(id)) = (parts.next(), parts.next(), parts.next()) else {
                return Err(GastonError::Format(format!("id map line {}: expected 3 fields", n + 1)));
            };
            let t = NodeType::from_name(t)
                .ok_or_else(|| GastonError::Format(format!("id map line {}: unknown node type {t:?}", n + 1)))?;
            let i: usize = i
                .parse()
                .map_err(|_| GastonError::Format(format!("id map line {}: bad index {i:?}", n + 1)))?;
            ids[t.index()].insert(i, id.to_string());
        }
        let mut out = IdMap::default();
        for t in NodeType::ALL {
            let m = &ids[t.index()];
            if m.keys().enumerate().any(|(pos, &k)| pos != k) {
                return Err(GastonError::Format(format!("id map indices for {t} are not dense")));
            }
            out.ids[t.index()] = m.values().cloned().collect();
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// Every user assigned to exactly one split.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SplitAssignment {
    map: BTreeMap<String, Split>,
}

impl SplitAssignment {
    pub fn from_map(map: BTreeMap<String, Split>) -> Self {
        SplitAssignment { map }
    }

    pub fn get(&self, user: &str) -> Option<Split> {
        self.map.get(user).copied()
    }

    pub fn users(&self, split: Split) -> impl Iterator<Item = &str> {
        self.map
            .iter()
            .filter(move |(_, &s)| s == split)
            .map(|(u, _)| u.as_str())
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn sizes(&self) -> [usize; 3] {
        let mut s = [0; 3];
        for v in self.map.values() {
            s[*v as usize] += 1;
        }
        s
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        for (u, s) in &self.map {
            writeln!(w, "{u}\t{}", s.name())?;
        }
        Ok(())
    }
}

/// Shuffles the distinct users with `rng_seed` and cuts the list by
/// cumulative ratio. Validation and test sizes are floored; the remainder
/// goes to training.
pub fn split_users<S: AsRef<str>>(users: &[S], ratios: (f64, f64, f64), rng_seed: u64) -> Result<SplitAssignment> {
    let (tr, va, te) = ratios;
    if [tr, va, te].iter().any(|r| !(0.0..=1.0).contains(r)) || (tr + va + te - 1.0).abs() > 1e-9 {
        return Err(GastonError::arg(format!(
            "split ratios ({tr}, {va}, {te}) must be non-negative and sum to 1"
        )));
    }
    let mut uniq: Vec<&str> = users.iter().map(AsRef::as_ref).collect::<BTreeSet<_>>().into_iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    uniq.shuffle(&mut rng);
    let n = uniq.len();
    let n_val = ((n as f64) * va + 1e-9).floor() as usize;
    let n_test = ((n as f64) * te + 1e-9).floor() as usize;
    let n_train = n - n_val - n_test;
    let map = uniq
        .into_iter()
        .enumerate()
        .map(|(i, u)| {
            let s = if i < n_train {
                Split::Train
            } else if i < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
            (u.to_string(), s)
        })
        .collect();
    Ok(SplitAssignment { map })
}

/// User-level split over the authors of `records`.
pub fn split_by_user(records: &[Record], ratios: (f64, f64, f64), rng_seed: u64) -> Result<SplitAssignment> {
    let authors: Vec<&str> = records
        .iter()
        .map(|r| r.author.as_str())
        .filter(|a| !is_deleted_author(a))
        .collect();
    split_users(&authors, ratios, rng_seed)
}
