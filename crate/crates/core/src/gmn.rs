//! Graph matching network over pairs of slice graphs.
//!
//! Each round, a node receives the sum of intra-graph messages from its
//! in-neighbours and a cross-graph term `μ_i = Σ_j a_ji (h_i − h_j)` where
//! `a_ji` is the softmax over the other graph's nodes of the cosine
//! similarity between `h_i` and `h_j`. A GRU consumes both sums. A gated
//! sum turns final node states into a graph vector, and pairs are compared
//! by squared Euclidean distance.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graphbuild::{FlowType, SliceGraph};
use crate::nn::layers::{GruCell, Linear, Mlp};
use crate::nn::{load_checkpoint, save_checkpoint, Adam, CheckpointError, Optimizer, ParamStore, Tape, Tensor, Var};

#[derive(Debug, Error)]
pub enum GmnError {
    #[error("graph has no nodes")]
    EmptyGraph,
    #[error("node features have {got} columns, model expects {expected}")]
    FeatureDim { expected: usize, got: usize },
    #[error("training pairs need both positive and negative examples ({positives} positive, {negatives} negative)")]
    Unbalanced { positives: usize, negatives: usize },
    #[error("invalid gmn config: {0}")]
    Config(String),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("checkpoint header: {0}")]
    Header(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmnConfig {
    /// Propagation rounds `T`.
    pub rounds: usize,
    pub hidden: usize,
    pub edge_dim: usize,
    /// Margin `γ` of the pair loss.
    pub margin: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// When false, `μ` is zero and the model is a plain message-passing net.
    pub cross_attention: bool,
    /// Flow types whose edge feature is replaced by the all-ones vector.
    pub dropped_flows: Vec<FlowType>,
}

impl Default for GmnConfig {
    fn default() -> Self {
        Self {
            rounds: 5,
            hidden: 32,
            edge_dim: 8,
            margin: 0.5,
            lr: 1e-3,
            batch_size: 20,
            epochs: 10,
            cross_attention: true,
            dropped_flows: Vec::new(),
        }
    }
}

impl GmnConfig {
    pub fn validate(&self) -> Result<(), GmnError> {
        if self.rounds == 0 {
            return Err(GmnError::Config("rounds must be at least 1".into()));
        }
        if !(self.margin > 0.0) {
            return Err(GmnError::Config("margin must be positive".into()));
        }
        if self.hidden == 0 || self.edge_dim == 0 {
            return Err(GmnError::Config("dimensions must be positive".into()));
        }
        Ok(())
    }

    pub fn edge_feature(&self, flow: FlowType) -> [f64; FlowType::COUNT] {
        if self.dropped_flows.contains(&flow) {
            [1.0; FlowType::COUNT]
        } else {
            flow.one_hot()
        }
    }
}

/// A graph prepared for matching: one feature row per node.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphInput {
    pub features: Tensor,
    pub edges: Vec<(usize, usize, FlowType)>,
    pub texts: Vec<String>,
}

impl GraphInput {
    pub fn new(features: Tensor, edges: Vec<(usize, usize, FlowType)>) -> Self {
        let texts = (0..features.rows).map(|i| format!("n{i}")).collect();
        Self { features, edges, texts }
    }

    pub fn from_graph(g: &SliceGraph, features: Tensor) -> Self {
        assert_eq!(features.rows, g.len(), "one feature row per node");
        Self {
            features,
            edges: g.indexed_edges(),
            texts: g.nodes.iter().map(|n| n.text.clone()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.features.rows
    }

    pub fn is_empty(&self) -> bool {
        self.features.rows == 0
    }
}

#[derive(Debug, Clone)]
struct Net {
    node_enc: Mlp,
    edge_enc: Mlp,
    message: Mlp,
    gru: GruCell,
    gate: Linear,
    transform: Linear,
    out: Mlp,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: GmnConfig,
    input_dim: usize,
}

#[derive(Debug, Clone)]
pub struct MatchModel {
    pub cfg: GmnConfig,
    pub input_dim: usize,
    pub store: ParamStore,
    net: Net,
}

/// Forward result for one pair.
#[derive(Debug, Clone)]
pub struct Propagation {
    pub h_g1: Vec<f64>,
    pub h_g2: Vec<f64>,
    /// Per round, `|G1|×|G2|` attention of G1 nodes over G2 nodes.
    pub attention_12: Vec<Tensor>,
    /// Per round, `|G2|×|G1|` attention of G2 nodes over G1 nodes.
    pub attention_21: Vec<Tensor>,
}

struct PairVars {
    h_g1: Var,
    h_g2: Var,
    att12: Vec<Var>,
    att21: Vec<Var>,
}

impl MatchModel {
    pub fn new(cfg: GmnConfig, input_dim: usize, seed: u64) -> Result<Self, GmnError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let h = cfg.hidden;
        let net = Net {
            node_enc: Mlp::new(&mut store, "node_enc", &[input_dim, h, h], &mut rng),
            edge_enc: Mlp::new(&mut store, "edge_enc", &[FlowType::COUNT, cfg.edge_dim], &mut rng),
            message: Mlp::new(&mut store, "message", &[2 * h + cfg.edge_dim, h, h], &mut rng),
            gru: GruCell::new(&mut store, "gru", 2 * h, h, &mut rng),
            gate: Linear::new(&mut store, "agg.gate", h, h, &mut rng),
            transform: Linear::new(&mut store, "agg.transform", h, h, &mut rng),
            out: Mlp::new(&mut store, "agg.out", &[h, h], &mut rng),
        };
        Ok(Self {
            cfg,
            input_dim,
            store,
            net,
        })
    }

    fn check(&self, g: &GraphInput) -> Result<(), GmnError> {
        if g.is_empty() {
            return Err(GmnError::EmptyGraph);
        }
        if g.features.cols != self.input_dim {
            return Err(GmnError::FeatureDim {
                expected: self.input_dim,
                got: g.features.cols,
            });
        }
        Ok(())
    }

    fn messages(&self, tape: &mut Tape, h: Var, g: &GraphInput, edge_vecs: Option<Var>) -> Var {
        let n = g.len();
        let Some(e) = edge_vecs else {
            return tape.leaf(Tensor::zeros(n, self.cfg.hidden));
        };
        let src: Vec<usize> = g.edges.iter().map(|e| e.0).collect();
        let dst: Vec<usize> = g.edges.iter().map(|e| e.1).collect();
        let hs = tape.gather(h, &src);
        let hd = tape.gather(h, &dst);
        let cat = tape.hcat(&[hs, hd, e]);
        let m = self.net.message.forward(tape, cat);
        tape.scatter_add(m, &dst, n)
    }

    fn edge_vectors(&self, tape: &mut Tape, g: &GraphInput) -> Option<Var> {
        if g.edges.is_empty() {
            return None;
        }
        let data = g.edges.iter().flat_map(|e| self.cfg.edge_feature(e.2)).collect();
        let feats = tape.leaf(Tensor::from_vec(g.edges.len(), FlowType::COUNT, data));
        Some(self.net.edge_enc.forward(tape, feats))
    }

    /// Softmax over `other`'s nodes of cosine similarities, and the
    /// resulting `μ = h − A·h_other`.
    fn cross(&self, tape: &mut Tape, h: Var, other: Var) -> (Var, Var) {
        let a = tape.normalize_rows(h);
        let b = tape.normalize_rows(other);
        let s = tape.matmul_nt(a, b);
        let att = tape.softmax_rows(s);
        let pulled = tape.matmul(att, other);
        (tape.sub(h, pulled), att)
    }

    /// Gated-sum readout: `MLP(Σ σ(gate(h_i)) ∘ transform(h_i))`.
    pub fn aggregate_on_tape(&self, tape: &mut Tape, h: Var) -> Var {
        let pre = self.gated_sum(tape, h);
        self.net.out.forward(tape, pre)
    }

    /// The node sum inside the readout, before the output MLP.
    pub fn gated_sum(&self, tape: &mut Tape, h: Var) -> Var {
        let g = self.net.gate.forward(tape, h);
        let g = tape.sigmoid(g);
        let t = self.net.transform.forward(tape, h);
        let gt = tape.mul(g, t);
        tape.sum_rows(gt)
    }

    fn forward_pair(&self, tape: &mut Tape, g1: &GraphInput, g2: &GraphInput) -> PairVars {
        let x1 = tape.leaf(g1.features.clone());
        let x2 = tape.leaf(g2.features.clone());
        let mut h1 = self.net.node_enc.forward(tape, x1);
        let mut h2 = self.net.node_enc.forward(tape, x2);
        let e1 = self.edge_vectors(tape, g1);
        let e2 = self.edge_vectors(tape, g2);
        let mut att12 = Vec::with_capacity(self.cfg.rounds);
        let mut att21 = Vec::with_capacity(self.cfg.rounds);
        for _ in 0..self.cfg.rounds {
            let m1 = self.messages(tape, h1, g1, e1);
            let m2 = self.messages(tape, h2, g2, e2);
            let (u1, a12) = self.cross(tape, h1, h2);
            let (u2, a21) = self.cross(tape, h2, h1);
            att12.push(a12);
            att21.push(a21);
            let (u1, u2) = if self.cfg.cross_attention {
                (u1, u2)
            } else {
                let z1 = tape.leaf(Tensor::zeros(g1.len(), self.cfg.hidden));
                let z2 = tape.leaf(Tensor::zeros(g2.len(), self.cfg.hidden));
                (z1, z2)
            };
            let in1 = tape.hcat(&[m1, u1]);
            let in2 = tape.hcat(&[m2, u2]);
            let n1 = self.net.gru.forward(tape, in1, h1);
            let n2 = self.net.gru.forward(tape, in2, h2);
            h1 = n1;
            h2 = n2;
        }
        let h_g1 = self.aggregate_on_tape(tape, h1);
        let h_g2 = self.aggregate_on_tape(tape, h2);
        PairVars { h_g1, h_g2, att12, att21 }
    }

    pub fn propagate_pair(&self, g1: &GraphInput, g2: &GraphInput) -> Result<Propagation, GmnError> {
        self.check(g1)?;
        self.check(g2)?;
        let mut tape = Tape::with_params(&self.store);
        let v = self.forward_pair(&mut tape, g1, g2);
        Ok(Propagation {
            h_g1: tape.value(v.h_g1).data.clone(),
            h_g2: tape.value(v.h_g2).data.clone(),
            attention_12: v.att12.iter().map(|&a| tape.value(a).clone()).collect(),
            attention_21: v.att21.iter().map(|&a| tape.value(a).clone()).collect(),
        })
    }

    /// Records the pair loss for label `t ∈ {+1, −1}` on `tape`.
    pub fn pair_loss_on_tape(&self, tape: &mut Tape, g1: &GraphInput, g2: &GraphInput, t: i8) -> Var {
        let v = self.forward_pair(tape, g1, g2);
        let diff = tape.sub(v.h_g1, v.h_g2);
        let sq = tape.mul(diff, diff);
        let d = tape.sum(sq);
        // max(0, γ − t(1 − d)) = max(0, t·d + γ − t)
        let t = f64::from(t.signum());
        let td = tape.scale(d, t);
        let inner = tape.add_scalar(td, self.cfg.margin - t);
        tape.relu(inner)
    }

    /// Squared Euclidean distance between the two graph vectors.
    pub fn score(&self, g1: &GraphInput, g2: &GraphInput) -> Result<f64, GmnError> {
        let p = self.propagate_pair(g1, g2)?;
        Ok(squared_distance(&p.h_g1, &p.h_g2))
    }

    /// Distance plus the cosine similarity of the same graph vectors.
    pub fn score_detail(&self, g1: &GraphInput, g2: &GraphInput) -> Result<Score, GmnError> {
        let p = self.propagate_pair(g1, g2)?;
        Ok(Score {
            distance: squared_distance(&p.h_g1, &p.h_g2),
            cosine: crate::nn::cosine_similarity(&p.h_g1, &p.h_g2),
        })
    }

    pub fn to_checkpoint(&self) -> Vec<u8> {
        let header = serde_json::to_string(&Header {
            config: self.cfg.clone(),
            input_dim: self.input_dim,
        })
        .expect("header serializes");
        save_checkpoint(&header, &self.store)
    }

    pub fn from_checkpoint(bytes: &[u8]) -> Result<Self, GmnError> {
        let ck = load_checkpoint(bytes)?;
        let header: Header = serde_json::from_str(&ck.header).map_err(|e| GmnError::Header(e.to_string()))?;
        let mut m = Self::new(header.config, header.input_dim, 0)?;
        m.store.load_entries(&ck.entries)?;
        Ok(m)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub distance: f64,
    pub cosine: f64,
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `max(0, γ − t(1 − d))`
pub fn pair_loss(d: f64, t: i8, margin: f64) -> f64 {
    (margin - f64::from(t.signum()) * (1.0 - d)).max(0.0)
}

/// Index pair into a graph list with label `t ∈ {+1, −1}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledPair {
    pub a: usize,
    pub b: usize,
    pub t: i8,
}

/// Mean pair loss over shuffled mini-batches. Returns per-epoch mean loss.
pub fn train(
    model: &mut MatchModel,
    graphs: &[GraphInput],
    pairs: &[LabeledPair],
    seed: u64,
) -> Result<Vec<f64>, GmnError> {
    let positives = pairs.iter().filter(|p| p.t > 0).count();
    let negatives = pairs.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(GmnError::Unbalanced { positives, negatives });
    }
    for g in graphs {
        model.check(g)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut opt = Adam::new(model.cfg.lr);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut losses = Vec::with_capacity(model.cfg.epochs);
    for epoch in 0..model.cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(model.cfg.batch_size.max(1)) {
            let mut grads = model.store.zeros_like();
            {
                let mut tape = Tape::with_params(&model.store);
                let terms: Vec<Var> = chunk
                    .iter()
                    .map(|&i| {
                        let p = pairs[i];
                        model.pair_loss_on_tape(&mut tape, &graphs[p.a], &graphs[p.b], p.t)
                    })
                    .collect();
                let cat = tape.vcat(&terms);
                let sum = tape.sum(cat);
                total += tape.value(sum).item();
                let mean = tape.scale(sum, 1.0 / chunk.len() as f64);
                tape.backward(mean).accumulate_into(&mut grads);
            }
            opt.step(&mut model.store, &grads).expect("gradient shapes follow the store");
        }
        let mean = total / pairs.len() as f64;
        log::info!("gmn epoch {}: loss {mean:.4}", epoch + 1);
        losses.push(mean);
    }
    Ok(losses)
}

/// Per-round attention of a pair in a serializable form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionExport {
    pub g1_nodes: Vec<String>,
    pub g2_nodes: Vec<String>,
    /// `rounds[t][i][j]`: attention of G1 node `i` on G2 node `j`.
    pub rounds: Vec<Vec<Vec<f64>>>,
}

impl AttentionExport {
    pub fn new(g1: &GraphInput, g2: &GraphInput, p: &Propagation) -> Self {
        Self {
            g1_nodes: g1.texts.clone(),
            g2_nodes: g2.texts.clone(),
            rounds: p
                .attention_12
                .iter()
                .map(|a| (0..a.rows).map(|r| a.row(r).to_vec()).collect())
                .collect(),
        }
    }

    /// Both graphs side by side with cross edges of the last round, pen
    /// width proportional to attention. Edges under `min_weight` are left out.
    pub fn to_dot(&self, min_weight: f64) -> String {
        let esc = |s: &str| s.replace('\\', "\\\\").replace('"', "\\\"");
        let mut out = String::from("digraph attention {\n  rankdir=LR;\n  node [shape=box, fontname=monospace];\n");
        for (tag, nodes) in [("a", &self.g1_nodes), ("b", &self.g2_nodes)] {
            out.push_str(&format!("  subgraph cluster_{tag} {{\n    label=\"G{}\";\n", if tag == "a" { 1 } else { 2 }));
            for (i, t) in nodes.iter().enumerate() {
                out.push_str(&format!("    {tag}{i} [label=\"{}\"];\n", esc(t)));
            }
            out.push_str("  }\n");
        }
        if let Some(last) = self.rounds.last() {
            for (i, row) in last.iter().enumerate() {
                for (j, &w) in row.iter().enumerate() {
                    if w >= min_weight {
                        out.push_str(&format!(
                            "  a{i} -> b{j} [dir=none, color=red, penwidth={:.3}, label=\"{w:.2}\"];\n",
                            (w * 8.0).max(0.1)
                        ));
                    }
                }
            }
        }
        out.push_str("}\n");
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model(rounds: usize, input: usize) -> MatchModel {
        let cfg = GmnConfig {
            rounds,
            hidden: 6,
            edge_dim: 3,
            ..GmnConfig::default()
        };
        MatchModel::new(cfg, input, 5).unwrap()
    }

    fn graph(rows: &[&[f64]], edges: &[(usize, usize, FlowType)]) -> GraphInput {
        let cols = rows[0].len();
        GraphInput::new(
            Tensor::from_vec(rows.len(), cols, rows.iter().flat_map(|r| r.iter().copied()).collect()),
            edges.to_vec(),
        )
    }

    #[test]
    fn loss_table() {
        assert_eq!(pair_loss(0.0, 1, 0.5), 0.0);
        assert_eq!(pair_loss(0.0, -1, 0.5), 1.5);
        assert_eq!(pair_loss(1.0, 1, 0.5), 0.5);
    }

    #[test]
    fn identical_graphs_score_zero() {
        let m = model(3, 2);
        let g = graph(&[&[0.1, 0.2], &[0.3, -0.4], &[1.0, 0.0]], &[(0, 1, FlowType::Sequential), (1, 2, FlowType::DataDependence)]);
        let p = m.propagate_pair(&g, &g).unwrap();
        assert_eq!(p.h_g1, p.h_g2);
        assert_eq!(m.score(&g, &g).unwrap(), 0.0);
    }

    #[test]
    fn score_is_symmetric() {
        let m = model(2, 2);
        let a = graph(&[&[0.1, 0.2], &[0.3, -0.4]], &[(0, 1, FlowType::Jump)]);
        let b = graph(&[&[0.5, 0.2], &[0.0, 0.9], &[-0.2, 0.1]], &[(2, 0, FlowType::SeqParallel)]);
        assert_eq!(m.score(&a, &b).unwrap(), m.score(&b, &a).unwrap());
    }

    #[test]
    fn attention_rows_are_distributions() {
        let m = model(2, 2);
        let a = graph(&[&[0.1, 0.2], &[0.3, -0.4]], &[]);
        let b = graph(&[&[0.5, 0.2], &[0.0, 0.9], &[-0.2, 0.1]], &[(0, 1, FlowType::JumpParallel)]);
        let p = m.propagate_pair(&a, &b).unwrap();
        for att in p.attention_12.iter().chain(&p.attention_21) {
            for r in 0..att.rows {
                assert!((att.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-6);
                assert!(att.row(r).iter().all(|&v| v >= 0.0));
            }
        }
    }

    #[test]
    fn empty_graph_rejected() {
        let m = model(1, 2);
        let e = GraphInput::new(Tensor::zeros(0, 2), vec![]);
        let g = graph(&[&[0.1, 0.2]], &[]);
        assert!(matches!(m.score(&e, &g), Err(GmnError::EmptyGraph)));
        let wrong = graph(&[&[0.1, 0.2, 0.3]], &[]);
        assert!(matches!(m.score(&wrong, &g), Err(GmnError::FeatureDim { .. })));
    }

    #[test]
    fn dropped_flow_feature_is_all_ones() {
        let cfg = GmnConfig {
            dropped_flows: vec![FlowType::Jump],
            ..GmnConfig::default()
        };
        assert_eq!(cfg.edge_feature(FlowType::Jump), [1.0; 5]);
        assert_eq!(cfg.edge_feature(FlowType::Sequential), FlowType::Sequential.one_hot());
    }

    #[test]
    fn train_requires_both_labels() {
        let mut m = model(1, 2);
        let g = vec![graph(&[&[0.1, 0.2]], &[])];
        let pairs = [LabeledPair { a: 0, b: 0, t: 1 }];
        assert!(matches!(train(&mut m, &g, &pairs, 0), Err(GmnError::Unbalanced { .. })));
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = model(2, 3);
        let again = MatchModel::from_checkpoint(&m.to_checkpoint()).unwrap();
        assert_eq!(again.to_checkpoint(), m.to_checkpoint());
        assert_eq!(again.cfg, m.cfg);
    }
}
