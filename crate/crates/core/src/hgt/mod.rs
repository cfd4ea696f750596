//! Heterogeneous graph transformer encoder.
//!
//! Every node type has its own input projection into the shared hidden size
//! `d`. Each layer holds query, key, value and output matrices per relation.
//! A target node attends over all of its in-edges at once, whichever
//! relation they belong to, with one softmax per head. The relation-wise
//! aggregates go through their output matrices, are summed, added to the
//! node's state and passed through ReLU.
//!
//! Text masking replaces input rows with a learned vector before projection.
//! The decoder maps hidden states back to the text input space.

mod checkpoint;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CHECKPOINT_MAGIC};

use crate::commembed::MembershipMap;
use crate::error::{GastonError, Result};
use crate::hetgraph::{NodeType, Relation, Subgraph};
use crate::numerics::{Tape, Tensor2, Var};
use crate::textenc::EmbeddingTable;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HgtConfig {
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    /// Input width per node type, indexed by [`NodeType::index`].
    pub d_in: [usize; 3],
}

impl HgtConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return Err(GastonError::Config(format!(
                "hidden size {} must be a positive multiple of heads {}",
                self.d, self.heads
            )));
        }
        if self.d_in.contains(&0) {
            return Err(GastonError::Config("input widths must be positive".into()));
        }
        Ok(())
    }
}

/// Weights of one layer, indexed by [`Relation::index`].
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights<T> {
    pub query: [T; 6],
    pub key: [T; 6],
    pub value: [T; 6],
    pub out: [T; 6],
}

/// Every encoder tensor. Instantiated with [`Tensor2`] for storage and with
/// [`Var`] once registered on a tape.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights<T> {
    /// `d x d_in[t]` per node type.
    pub proj_w: [T; 3],
    /// `1 x d` per node type.
    pub proj_b: [T; 3],
    pub layers: Vec<LayerWeights<T>>,
    /// `1 x d_in[Text]`.
    pub mask: T,
    /// `d_in[Text] x d`.
    pub decoder_w: T,
    /// `1 x d_in[Text]`.
    pub decoder_b: T,
}

pub type HgtVars = Weights<Var>;

fn take<T, const N: usize>(it: &mut impl Iterator<Item = T>) -> Option<[T; N]> {
    it.by_ref().take(N).collect::<Vec<_>>().try_into().ok()
}

impl<T> Weights<T> {
    /// All tensors in a fixed order shared by [`Weights::names`].
    pub fn flat(&self) -> Vec<&T> {
        let mut v: Vec<&T> = self.proj_w.iter().chain(&self.proj_b).collect();
        for l in &self.layers {
            v.extend(l.query.iter().chain(&l.key).chain(&l.value).chain(&l.out));
        }
        v.extend([&self.mask, &self.decoder_w, &self.decoder_b]);
        v
    }

    pub fn flat_mut(&mut self) -> Vec<&mut T> {
        let mut v: Vec<&mut T> = self.proj_w.iter_mut().chain(self.proj_b.iter_mut()).collect();
        for l in &mut self.layers {
            v.extend(
                l.query
                    .iter_mut()
                    .chain(l.key.iter_mut())
                    .chain(l.value.iter_mut())
                    .chain(l.out.iter_mut()),
            );
        }
        v.extend([&mut self.mask, &mut self.decoder_w, &mut self.decoder_b]);
        v
    }

    /// Inverse of [`Weights::flat`].
    pub fn from_flat(layers: usize, items: Vec<T>) -> Result<Self> {
        let expected = Self::tensor_count(layers);
        if items.len() != expected {
            return Err(GastonError::arg(format!("expected {expected} tensors, got {}", items.len())));
        }
        let mut it = items.into_iter();
        let bad = || GastonError::arg("tensor list ended early");
        let proj_w = take(&mut it).ok_or_else(bad)?;
        let proj_b = take(&mut it).ok_or_else(bad)?;
        let mut ls = Vec::with_capacity(layers);
        for _ in 0..layers {
            ls.push(LayerWeights {
                query: take(&mut it).ok_or_else(bad)?,
                key: take(&mut it).ok_or_else(bad)?,
                value: take(&mut it).ok_or_else(bad)?,
                out: take(&mut it).ok_or_else(bad)?,
            });
        }
        let mut next = || it.next().ok_or_else(bad);
        Ok(Weights {
            proj_w,
            proj_b,
            layers: ls,
            mask: next()?,
            decoder_w: next()?,
            decoder_b: next()?,
        })
    }

    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> Weights<U> {
        let flat: Vec<U> = self.flat().into_iter().map(&mut f).collect();
        Weights::from_flat(self.layers.len(), flat).expect("same layout")
    }

    pub fn tensor_count(layers: usize) -> usize {
        6 + 24 * layers + 3
    }

    /// Stable tensor names in [`Weights::flat`] order.
    pub fn names(layers: usize) -> Vec<String> {
        let mut v: Vec<String> = NodeType::ALL.iter().map(|t| format!("proj_w.{}", t.name())).collect();
        v.extend(NodeType::ALL.iter().map(|t| format!("proj_b.{}", t.name())));
        for l in 0..layers {
            for kind in ["query", "key", "value", "out"] {
                v.extend(Relation::ALL.iter().map(|r| format!("layer{l}.{kind}.{}", r.name())));
            }
        }
        v.extend(["mask".to_string(), "decoder_w".into(), "decoder_b".into()]);
        v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HgtParams {
    pub config: HgtConfig,
    pub weights: Weights<Tensor2>,
}

impl HgtParams {
    /// Glorot-uniform matrices, zero biases, zero mask vector.
    pub fn new(config: HgtConfig, rng_seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        let (d, d_text) = (config.d, config.d_in[NodeType::Text.index()]);
        let proj_w = config.d_in.map(|di| Tensor2::glorot(d, di, &mut rng));
        let proj_b = [(); 3].map(|_| Tensor2::zeros(1, d));
        let square = |rng: &mut ChaCha8Rng| [(); 6].map(|_| Tensor2::glorot(d, d, rng));
        let layers = (0..config.layers)
            .map(|_| LayerWeights {
                query: square(&mut rng),
                key: square(&mut rng),
                value: square(&mut rng),
                out: square(&mut rng),
            })
            .collect();
        let weights = Weights {
            proj_w,
            proj_b,
            layers,
            mask: Tensor2::zeros(1, d_text),
            decoder_w: Tensor2::glorot(d_text, d, &mut rng),
            decoder_b: Tensor2::zeros(1, d_text),
        };
        Ok(HgtParams { config, weights })
    }

    /// Checks every tensor against the shapes implied by the config.
    pub fn from_weights(config: HgtConfig, weights: Weights<Tensor2>) -> Result<Self> {
        config.validate()?;
        if weights.layers.len() != config.layers {
            return Err(GastonError::arg(format!(
                "{} layers of weights for a {}-layer config",
                weights.layers.len(),
                config.layers
            )));
        }
        let expected = Self::shapes(&config);
        for ((name, t), want) in Weights::<()>::names(config.layers).iter().zip(weights.flat()).zip(expected) {
            if t.shape() != want {
                return Err(GastonError::arg(format!("{name} has shape {:?}, expected {want:?}", t.shape())));
            }
        }
        Ok(HgtParams { config, weights })
    }

    fn shapes(c: &HgtConfig) -> Vec<(usize, usize)> {
        let d_text = c.d_in[NodeType::Text.index()];
        let mut v: Vec<(usize, usize)> = c.d_in.iter().map(|&di| (c.d, di)).collect();
        v.extend([(1, c.d); 3]);
        v.extend(std::iter::repeat_n((c.d, c.d), 24 * c.layers));
        v.extend([(1, d_text), (d_text, c.d), (1, d_text)]);
        v
    }

    pub fn names(&self) -> Vec<String> {
        Weights::<()>::names(self.config.layers)
    }

    /// Puts every tensor on the tape, as trainable leaves or as constants.
    pub fn register(&self, tape: &mut Tape, trainable: bool) -> HgtVars {
        self.weights.map(|t| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        })
    }
}

/// `W_t x + b_t`.
pub fn project_node(x: &[f64], t: NodeType, p: &HgtParams) -> Result<Vec<f64>> {
    let w = &p.weights.proj_w[t.index()];
    if x.len() != w.cols() {
        return Err(GastonError::arg(format!("{t} input has {} values, expected {}", x.len(), w.cols())));
    }
    let out = Tensor2::row_vector(x).matmul_nt(w)?;
    Ok(out.data().iter().zip(p.weights.proj_b[t.index()].data()).map(|(a, b)| a + b).collect())
}

/// `D h + bias`.
pub fn decode_text(h: &[f64], p: &HgtParams) -> Result<Vec<f64>> {
    let w = &p.weights.decoder_w;
    if h.len() != w.cols() {
        return Err(GastonError::arg(format!("hidden vector has {} values, expected {}", h.len(), w.cols())));
    }
    let out = Tensor2::row_vector(h).matmul_nt(w)?;
    Ok(out.data().iter().zip(p.weights.decoder_b.data()).map(|(a, b)| a + b).collect())
}

/// Picks each of `n` rows independently with probability `rate`. Returns
/// the sorted row indices.
pub fn sample_mask(n: usize, rate: f64, rng: &mut impl Rng) -> Result<Vec<usize>> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(GastonError::arg(format!("mask rate {rate} outside [0, 1]")));
    }
    Ok((0..n).filter(|_| rng.random_bool(rate)).collect())
}

/// Replaces a random subset of rows of `features` by `mask_vector`.
pub fn apply_mask(
    features: &Tensor2,
    rate: f64,
    mask_vector: &[f64],
    rng: &mut impl Rng,
) -> Result<(Tensor2, Vec<usize>)> {
    if mask_vector.len() != features.cols() {
        return Err(GastonError::arg("mask vector width differs from feature width"));
    }
    let set = sample_mask(features.rows(), rate, rng)?;
    let mut out = features.clone();
    for &i in &set {
        out.row_mut(i).copy_from_slice(mask_vector);
    }
    Ok((out, set))
}

/// Text input rows with `masked` rows replaced by the mask leaf. The mask
/// vector receives the gradient of every masked row.
pub fn masked_text_input(tape: &mut Tape, x: &Tensor2, masked: &[usize], mask: Var) -> Result<Var> {
    if masked.is_empty() {
        return Ok(tape.constant(x.clone()));
    }
    let mut kept = x.clone();
    for &i in masked {
        kept.row_mut(i).iter_mut().for_each(|v| *v = 0.0);
    }
    let base = tape.constant(kept);
    let rows = tape.gather_rows(mask, &vec![0; masked.len()])?;
    let placed = tape.scatter_add_rows(rows, masked, x.rows())?;
    tape.add(base, placed)
}

/// Encoder inputs for a subgraph: text embeddings (optionally masked),
/// users as the mean of their communities' rows, and communities as rows
/// of `communities`. Membership lists cover the whole graph, not just the
/// sampled communities.
pub fn input_vars(
    tape: &mut Tape,
    sub: &Subgraph,
    texts: &EmbeddingTable,
    communities: Var,
    membership: &MembershipMap,
    mask: Option<(&[usize], Var)>,
) -> Result<[Var; 3]> {
    let x_text = texts.gather(sub.nodes(NodeType::Text));
    let text = match mask {
        Some((set, m)) => masked_text_input(tape, &x_text, set, m)?,
        None => tape.constant(x_text),
    };
    let user = tape.gather_mean(communities, membership.lists_for(sub.nodes(NodeType::User)))?;
    let community = tape.gather_rows(communities, sub.nodes(NodeType::Community))?;
    Ok([user, text, community])
}

/// Per-type input projection.
pub fn project(tape: &mut Tape, inputs: [Var; 3], vars: &HgtVars) -> Result<[Var; 3]> {
    let mut out = inputs;
    for t in NodeType::ALL {
        let i = t.index();
        let xw = tape.matmul_nt(inputs[i], vars.proj_w[i])?;
        out[i] = tape.add_bias(xw, vars.proj_b[i])?;
    }
    Ok(out)
}

/// One attention layer over the edges of `sub`.
pub fn hgt_layer(tape: &mut Tape, sub: &Subgraph, h: [Var; 3], layer: &LayerWeights<Var>, heads: usize) -> Result<[Var; 3]> {
    let d = tape.value(h[0]).cols();
    for &v in &h {
        if tape.value(v).cols() != d {
            return Err(GastonError::arg("hidden states differ in width across node types"));
        }
    }
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(GastonError::arg(format!("hidden size {d} not divisible into {heads} heads")));
    }
    let scale = 1.0 / ((d / heads) as f64).sqrt();
    let mut out = h;
    for t in NodeType::ALL {
        let ti = t.index();
        let n_t = sub.count(t);
        let incoming: Vec<Relation> = Relation::ALL
            .into_iter()
            .filter(|r| r.dst_type() == t && !sub.edges(*r).is_empty())
            .collect();
        if n_t == 0 || incoming.is_empty() {
            out[ti] = tape.relu(h[ti]);
            continue;
        }

        let mut logits = Vec::with_capacity(incoming.len());
        let mut values = Vec::with_capacity(incoming.len());
        let mut targets: Vec<Vec<usize>> = Vec::with_capacity(incoming.len());
        for &r in &incoming {
            let ri = r.index();
            let (src, dst): (Vec<usize>, Vec<usize>) = sub.edges(r).iter().copied().unzip();
            let hs = h[r.src_type().index()];
            let q_nodes = tape.matmul_nt(h[ti], layer.query[ri])?;
            let k_nodes = tape.matmul_nt(hs, layer.key[ri])?;
            let v_nodes = tape.matmul_nt(hs, layer.value[ri])?;
            let q = tape.gather_rows(q_nodes, &dst)?;
            let k = tape.gather_rows(k_nodes, &src)?;
            logits.push(tape.head_dot(q, k, heads, scale)?);
            values.push(tape.gather_rows(v_nodes, &src)?);
            targets.push(dst);
        }

        let all_logits = tape.concat_rows(&logits)?;
        let segments: Vec<usize> = targets.concat();
        let attn = tape.segment_softmax(all_logits, &segments, n_t)?;

        let mut acc = h[ti];
        let mut offset = 0;
        for (j, &r) in incoming.iter().enumerate() {
            let n_e = targets[j].len();
            let rows: Vec<usize> = (offset..offset + n_e).collect();
            offset += n_e;
            let a = tape.gather_rows(attn, &rows)?;
            let msg = tape.head_scale(values[j], a, heads)?;
            let agg = tape.scatter_add_rows(msg, &targets[j], n_t)?;
            let projected = tape.matmul_nt(agg, layer.out[r.index()])?;
            acc = tape.add(acc, projected)?;
        }
        out[ti] = tape.relu(acc);
    }
    Ok(out)
}

/// Projection followed by every layer.
pub fn encode(tape: &mut Tape, sub: &Subgraph, inputs: [Var; 3], vars: &HgtVars, heads: usize) -> Result<[Var; 3]> {
    let mut h = project(tape, inputs, vars)?;
    for layer in &vars.layers {
        h = hgt_layer(tape, sub, h, layer, heads)?;
    }
    Ok(h)
}

/// Decoder applied to rows of `h`.
pub fn decode(tape: &mut Tape, h: Var, vars: &HgtVars) -> Result<Var> {
    let z = tape.matmul_nt(h, vars.decoder_w)?;
    tape.add_bias(z, vars.decoder_b)
}

/// Final hidden states for every node of `sub`, computed without masking.
pub fn encode_values(
    sub: &Subgraph,
    texts: &EmbeddingTable,
    communities: &Tensor2,
    membership: &MembershipMap,
    p: &HgtParams,
) -> Result<[Tensor2; 3]> {
    let mut tape = Tape::new();
    let vars = p.register(&mut tape, false);
    let c = tape.constant(communities.clone());
    let inputs = input_vars(&mut tape, sub, texts, c, membership, None)?;
    let h = encode(&mut tape, sub, inputs, &vars, p.config.heads)?;
    Ok(h.map(|v| tape.value(v).clone()))
}
