//! Slice encoder: a small transformer over normalized slice tokens,
//! pretrained with masked-token prediction and fine-tuned as a Siamese
//! network on same-line slice pairs from different builds.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::RwLock;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::layers::{Embedding, LayerNorm, Linear, TransformerBlock};
use crate::nn::{
    load_checkpoint, save_checkpoint, Adam, CheckpointError, Optimizer, ParamStore, Tape, Tensor, Var,
};
use crate::sir::{FunctionIR, JumpKind, SourceLine};
use crate::slicer::Slice;
use crate::tokenize::{Token, Vocab, MASK};

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("invalid encoder config: {0}")]
    Config(String),
    #[error("slice has no tokens")]
    EmptyTokens,
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error("no fine-tuning pairs")]
    NoPairs,
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("checkpoint header: {0}")]
    Header(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_dim: usize,
    /// Includes the leading CLS position.
    pub max_len: usize,
    pub mask_frac: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            layers: 2,
            heads: 4,
            ff_dim: 128,
            max_len: 64,
            mask_frac: 0.15,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), EncoderError> {
        let bad = |m: &str| Err(EncoderError::Config(m.to_string()));
        if !(self.mask_frac > 0.0 && self.mask_frac < 1.0) {
            return bad("mask fraction must lie in (0, 1)");
        }
        if self.heads == 0 || self.d_model == 0 || self.d_model % self.heads != 0 {
            return bad("d_model must be a positive multiple of heads");
        }
        if self.max_len < 2 {
            return bad("max_len must leave room for at least one token");
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Net {
    tok: Embedding,
    pos: Embedding,
    ln: LayerNorm,
    blocks: Vec<TransformerBlock>,
    head_dense: Linear,
    head_ln: LayerNorm,
    head_out: Linear,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: EncoderConfig,
    vocab: String,
}

pub struct EncoderModel {
    pub cfg: EncoderConfig,
    pub vocab: Vocab,
    pub store: ParamStore,
    net: Net,
    cache: RwLock<HashMap<Vec<u32>, Vec<f64>>>,
}

impl Clone for EncoderModel {
    fn clone(&self) -> Self {
        Self {
            cfg: self.cfg.clone(),
            vocab: self.vocab.clone(),
            store: self.store.clone(),
            net: self.net.clone(),
            cache: RwLock::new(HashMap::new()),
        }
    }
}

impl EncoderModel {
    pub fn new(cfg: EncoderConfig, vocab: Vocab, seed: u64) -> Result<Self, EncoderError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = cfg.d_model;
        let v = vocab.len();
        let net = Net {
            tok: Embedding::new(&mut store, "tok", v, d, &mut rng),
            pos: Embedding::new(&mut store, "pos", cfg.max_len, d, &mut rng),
            ln: LayerNorm::new(&mut store, "emb_ln", d),
            blocks: (0..cfg.layers)
                .map(|i| TransformerBlock::new(&mut store, &format!("block{i}"), d, cfg.heads, cfg.ff_dim, &mut rng))
                .collect(),
            head_dense: Linear::new(&mut store, "mlm.dense", d, d, &mut rng),
            head_ln: LayerNorm::new(&mut store, "mlm.ln", d),
            head_out: Linear::new(&mut store, "mlm.out", d, v, &mut rng),
        };
        // A zero output projection starts the masked-token head at the
        // uniform distribution over the vocabulary.
        let out_w = net.head_out.w;
        store.get_mut(out_w).data.iter_mut().for_each(|w| *w = 0.0);
        Ok(Self {
            cfg,
            vocab,
            store,
            net,
            cache: RwLock::new(HashMap::new()),
        })
    }

    /// Hidden states (one row per position) for an encoded id sequence.
    fn hidden(&self, tape: &mut Tape, ids: &[u32]) -> Var {
        let idx: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        let positions: Vec<usize> = (0..ids.len()).collect();
        let t = self.net.tok.forward(tape, &idx);
        let p = self.net.pos.forward(tape, &positions);
        let x = tape.add(t, p);
        let mut h = self.net.ln.forward(tape, x);
        for b in &self.net.blocks {
            h = b.forward(tape, h);
        }
        h
    }

    fn mlm_logits(&self, tape: &mut Tape, rows: Var) -> Var {
        let h = self.net.head_dense.forward(tape, rows);
        let h = tape.gelu(h);
        let h = self.net.head_ln.forward(tape, h);
        self.net.head_out.forward(tape, h)
    }

    fn cls(&self, tape: &mut Tape, ids: &[u32]) -> Var {
        let h = self.hidden(tape, ids);
        tape.gather(h, &[0])
    }

    /// `[CLS] + ids`, truncated to `max_len` with a warning.
    pub fn encode_tokens(&self, tokens: &[Token]) -> Vec<u32> {
        if tokens.len() + 1 > self.cfg.max_len {
            log::warn!(
                "slice of {} tokens truncated to max length {}",
                tokens.len(),
                self.cfg.max_len
            );
        }
        self.vocab.encode(tokens, self.cfg.max_len)
    }

    /// CLS-position output for a token sequence, cached by encoded ids.
    pub fn embed_slice(&self, tokens: &[Token]) -> Result<Vec<f64>, EncoderError> {
        if tokens.is_empty() {
            return Err(EncoderError::EmptyTokens);
        }
        let ids = self.encode_tokens(tokens);
        if let Some(v) = self.cache.read().expect("cache lock").get(&ids) {
            return Ok(v.clone());
        }
        let mut tape = Tape::with_params(&self.store);
        let c = self.cls(&mut tape, &ids);
        let v = tape.value(c).data.clone();
        self.cache.write().expect("cache lock").insert(ids, v.clone());
        Ok(v)
    }

    pub fn cache_len(&self) -> usize {
        self.cache.read().expect("cache lock").len()
    }

    fn invalidate(&mut self) {
        self.cache.get_mut().expect("cache lock").clear();
    }

    pub fn to_checkpoint(&self) -> Vec<u8> {
        let header = serde_json::to_string(&Header {
            config: self.cfg.clone(),
            vocab: self.vocab.to_tsv(),
        })
        .expect("header serializes");
        save_checkpoint(&header, &self.store)
    }

    pub fn from_checkpoint(bytes: &[u8]) -> Result<Self, EncoderError> {
        let ck = load_checkpoint(bytes)?;
        let header: Header = serde_json::from_str(&ck.header).map_err(|e| EncoderError::Header(e.to_string()))?;
        let vocab = Vocab::from_tsv(&header.vocab).map_err(|e| EncoderError::Header(e.to_string()))?;
        let mut m = Self::new(header.config, vocab, 0)?;
        m.store.load_entries(&ck.entries)?;
        Ok(m)
    }
}

/// Token ids with some positions replaced by MASK.
#[derive(Debug, Clone, PartialEq)]
pub struct MlmBatch {
    pub inputs: Vec<Vec<u32>>,
    /// `(sequence, position)` of every masked token.
    pub positions: Vec<(usize, usize)>,
    /// Original ids at `positions`.
    pub targets: Vec<u32>,
}

/// Masks `floor(frac × candidates)` positions (at least one) chosen
/// uniformly among all non-CLS positions of the batch.
pub fn make_mlm_batch<R: Rng>(seqs: &[Vec<u32>], frac: f64, rng: &mut R) -> MlmBatch {
    let candidates: Vec<(usize, usize)> = seqs
        .iter()
        .enumerate()
        .flat_map(|(s, ids)| (1..ids.len()).map(move |p| (s, p)))
        .collect();
    let mut inputs = seqs.to_vec();
    if candidates.is_empty() {
        return MlmBatch {
            inputs,
            positions: Vec::new(),
            targets: Vec::new(),
        };
    }
    let k = ((frac * candidates.len() as f64).floor() as usize).clamp(1, candidates.len());
    let mut chosen: Vec<(usize, usize)> = rand::seq::index::sample(rng, candidates.len(), k)
        .into_iter()
        .map(|i| candidates[i])
        .collect();
    chosen.sort_unstable();
    let targets = chosen.iter().map(|&(s, p)| seqs[s][p]).collect();
    for &(s, p) in &chosen {
        inputs[s][p] = MASK;
    }
    MlmBatch {
        inputs,
        positions: chosen,
        targets,
    }
}

fn mlm_loss(model: &EncoderModel, tape: &mut Tape, batch: &MlmBatch) -> Option<Var> {
    if batch.positions.is_empty() {
        return None;
    }
    let mut rows = Vec::new();
    for (s, ids) in batch.inputs.iter().enumerate() {
        let pos: Vec<usize> = batch.positions.iter().filter(|(q, _)| *q == s).map(|&(_, p)| p).collect();
        if pos.is_empty() {
            continue;
        }
        let h = model.hidden(tape, ids);
        rows.push(tape.gather(h, &pos));
    }
    let all = tape.vcat(&rows);
    let logits = model.mlm_logits(tape, all);
    let targets: Vec<usize> = batch.targets.iter().map(|&t| t as usize).collect();
    Some(tape.cross_entropy(logits, &targets))
}

/// Mean masked-token cross-entropy of one batch without updating anything.
pub fn mlm_batch_loss(model: &EncoderModel, batch: &MlmBatch) -> f64 {
    let mut tape = Tape::with_params(&model.store);
    mlm_loss(model, &mut tape, batch).map(|l| tape.value(l).item()).unwrap_or(0.0)
}

/// Fraction of masked positions whose arg-max prediction is the original id.
pub fn masked_accuracy(model: &EncoderModel, batch: &MlmBatch) -> f64 {
    if batch.positions.is_empty() {
        return 1.0;
    }
    let mut tape = Tape::with_params(&model.store);
    let mut correct = 0;
    for (k, &(s, p)) in batch.positions.iter().enumerate() {
        let h = model.hidden(&mut tape, &batch.inputs[s]);
        let row = tape.gather(h, &[p]);
        let logits = model.mlm_logits(&mut tape, row);
        let l = tape.value(logits);
        let best = (0..l.cols)
            .max_by(|&a, &b| l.data[a].total_cmp(&l.data[b]).then(b.cmp(&a)))
            .unwrap_or(0);
        correct += usize::from(best as u32 == batch.targets[k]);
    }
    correct as f64 / batch.positions.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            batch_size: 16,
            lr: 1e-3,
            seed: 0,
        }
    }
}

/// Masked-token pretraining. Returns the mean loss of every epoch.
pub fn pretrain(
    model: &mut EncoderModel,
    corpus: &[Vec<Token>],
    train: &TrainConfig,
) -> Result<Vec<f64>, EncoderError> {
    let seqs: Vec<Vec<u32>> = corpus
        .iter()
        .filter(|t| !t.is_empty())
        .map(|t| model.encode_tokens(t))
        .collect();
    if seqs.is_empty() {
        return Err(EncoderError::EmptyCorpus);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
    let mut opt = Adam::new(train.lr);
    let mut order: Vec<usize> = (0..seqs.len()).collect();
    let mut losses = Vec::with_capacity(train.epochs);
    for epoch in 0..train.epochs {
        order.shuffle(&mut rng);
        let (mut total, mut batches) = (0.0, 0usize);
        for chunk in order.chunks(train.batch_size.max(1)) {
            let batch_seqs: Vec<Vec<u32>> = chunk.iter().map(|&i| seqs[i].clone()).collect();
            let batch = make_mlm_batch(&batch_seqs, model.cfg.mask_frac, &mut rng);
            let mut grads = model.store.zeros_like();
            {
                let mut tape = Tape::with_params(&model.store);
                let Some(loss) = mlm_loss(model, &mut tape, &batch) else { continue };
                total += tape.value(loss).item();
                tape.backward(loss).accumulate_into(&mut grads);
            }
            opt.step(&mut model.store, &grads).expect("gradient shapes follow the store");
            batches += 1;
        }
        let mean = total / batches.max(1) as f64;
        log::info!("pretrain epoch {}: loss {mean:.4}", epoch + 1);
        losses.push(mean);
    }
    model.invalidate();
    Ok(losses)
}

/// One labeled slice pair for fine-tuning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FineTunePair {
    pub a: Vec<Token>,
    pub b: Vec<Token>,
    pub y: u8,
    /// Source line of a positive pair; for negatives, both lines joined by `|`.
    pub line: String,
}

/// `y·d² + (1 − y)·max(m − d, 0)²`
pub fn contrastive_loss(d: f64, y: u8, margin: f64) -> f64 {
    if y == 1 {
        d * d
    } else {
        (margin - d).max(0.0).powi(2)
    }
}

/// Cosine distance `1 − cos(a, b)`.
pub fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    1.0 - crate::nn::cosine_similarity(a, b)
}

/// Records the contrastive loss of one pair on `tape`.
pub fn pair_loss_on_tape(model: &EncoderModel, tape: &mut Tape, pair: &FineTunePair, margin: f64) -> Var {
    let va = model.cls(tape, &model.encode_tokens(&pair.a));
    let vb = model.cls(tape, &model.encode_tokens(&pair.b));
    let cos = tape.cosine(va, vb);
    let neg = tape.scale(cos, -1.0);
    let d = tape.add_scalar(neg, 1.0);
    if pair.y == 1 {
        tape.mul(d, d)
    } else {
        let md = tape.scale(d, -1.0);
        let md = tape.add_scalar(md, margin);
        let h = tape.relu(md);
        tape.mul(h, h)
    }
}

/// Siamese fine-tuning with one shared encoder. Returns per-epoch mean loss.
pub fn finetune(
    model: &mut EncoderModel,
    pairs: &[FineTunePair],
    margin: f64,
    train: &TrainConfig,
) -> Result<Vec<f64>, EncoderError> {
    let pairs: Vec<&FineTunePair> = pairs.iter().filter(|p| !p.a.is_empty() && !p.b.is_empty()).collect();
    if pairs.is_empty() {
        return Err(EncoderError::NoPairs);
    }
    let positives = pairs.iter().filter(|p| p.y == 1).count();
    if positives == 0 || positives == pairs.len() {
        log::warn!("fine-tuning pairs are all {}", if positives == 0 { "negative" } else { "positive" });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
    let mut opt = Adam::new(train.lr);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut losses = Vec::with_capacity(train.epochs);
    for epoch in 0..train.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(train.batch_size.max(1)) {
            let mut grads = model.store.zeros_like();
            {
                let mut tape = Tape::with_params(&model.store);
                let terms: Vec<Var> = chunk
                    .iter()
                    .map(|&i| pair_loss_on_tape(model, &mut tape, pairs[i], margin))
                    .collect();
                let cat = tape.vcat(&terms);
                let sum = tape.sum(cat);
                let mean = tape.scale(sum, 1.0 / chunk.len() as f64);
                total += tape.value(sum).item();
                tape.backward(mean).accumulate_into(&mut grads);
            }
            opt.step(&mut model.store, &grads).expect("gradient shapes follow the store");
        }
        let mean = total / pairs.len() as f64;
        log::info!("finetune epoch {}: loss {mean:.4}", epoch + 1);
        losses.push(mean);
    }
    model.invalidate();
    Ok(losses)
}

/// Slices of one function built under one configuration.
#[derive(Debug, Clone)]
pub struct ConfigSlices<'a> {
    pub config: String,
    pub function: &'a FunctionIR,
    pub slices: &'a [Slice],
}

/// Line shared by the most member instructions; ties go to the lowest line.
pub fn dominant_line(f: &FunctionIR, slice: &Slice) -> Option<SourceLine> {
    let block = f.block(slice.block)?;
    let mut counts: BTreeMap<&SourceLine, usize> = BTreeMap::new();
    for &i in &slice.instr_indices {
        if let Some(l) = block.instructions.get(i).and_then(|ins| ins.source_line.as_ref()) {
            *counts.entry(l).or_default() += 1;
        }
    }
    let best = counts.values().copied().max()?;
    counts.into_iter().find(|(_, n)| *n == best).map(|(l, _)| l.clone())
}

/// Builds positive pairs from slices of different configurations that share
/// a dominant source line (every branch line, plus a seeded `non_branch_rate`
/// share of the other lines) and as many seeded random cross-line negatives.
pub fn make_pairs(items: &[ConfigSlices<'_>], non_branch_rate: f64, seed: u64) -> Vec<FineTunePair> {
    let mut branch_lines: BTreeSet<SourceLine> = BTreeSet::new();
    for it in items {
        for b in it.function.blocks.values() {
            for ins in &b.instructions {
                if ins.jump == JumpKind::Conditional {
                    if let Some(l) = &ins.source_line {
                        branch_lines.insert(l.clone());
                    }
                }
            }
        }
    }
    // line -> (config -> slice tokens)
    let mut by_line: BTreeMap<SourceLine, BTreeMap<&str, Vec<&[Token]>>> = BTreeMap::new();
    let mut annotated: Vec<(SourceLine, &[Token])> = Vec::new();
    for it in items {
        for s in it.slices {
            if s.tokens.is_empty() {
                continue;
            }
            if let Some(line) = dominant_line(it.function, s) {
                by_line
                    .entry(line.clone())
                    .or_default()
                    .entry(it.config.as_str())
                    .or_default()
                    .push(&s.tokens);
                annotated.push((line, &s.tokens));
            }
        }
    }
    let shared: Vec<&SourceLine> = by_line.iter().filter(|(_, c)| c.len() >= 2).map(|(l, _)| l).collect();
    if shared.is_empty() {
        log::warn!("no source line is shared across configurations; no pairs made");
        return Vec::new();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (branch, mut other): (Vec<&SourceLine>, Vec<&SourceLine>) =
        shared.into_iter().partition(|l| branch_lines.contains(*l));
    other.shuffle(&mut rng);
    let take = (non_branch_rate.clamp(0.0, 1.0) * other.len() as f64).ceil() as usize;
    let mut selected: Vec<&SourceLine> = branch.into_iter().chain(other.into_iter().take(take)).collect();
    selected.sort();

    let mut pairs = Vec::new();
    for line in selected {
        let configs: Vec<&Vec<&[Token]>> = by_line[line].values().collect();
        for i in 0..configs.len() {
            for j in i + 1..configs.len() {
                for a in configs[i] {
                    for b in configs[j] {
                        pairs.push(FineTunePair {
                            a: a.to_vec(),
                            b: b.to_vec(),
                            y: 1,
                            line: line.to_string(),
                        });
                    }
                }
            }
        }
    }
    let wanted = pairs.len();
    let mut negatives = 0;
    let mut attempts = 0;
    while negatives < wanted && attempts < wanted * 100 && annotated.len() >= 2 {
        attempts += 1;
        let i = rng.gen_range(0..annotated.len());
        let j = rng.gen_range(0..annotated.len());
        if annotated[i].0 == annotated[j].0 {
            continue;
        }
        pairs.push(FineTunePair {
            a: annotated[i].1.to_vec(),
            b: annotated[j].1.to_vec(),
            y: 0,
            line: format!("{}|{}", annotated[i].0, annotated[j].0),
        });
        negatives += 1;
    }
    pairs
}

pub fn pairs_to_jsonl(pairs: &[FineTunePair]) -> String {
    pairs
        .iter()
        .map(|p| serde_json::to_string(p).expect("pair serializes") + "\n")
        .collect()
}

pub fn pairs_from_jsonl(text: &str) -> Result<Vec<FineTunePair>, serde_json::Error> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect()
}

/// Tokens of every slice, handy as a pretraining corpus.
pub fn slice_corpus<'a>(slices: impl IntoIterator<Item = &'a Slice>) -> Vec<Vec<Token>> {
    slices.into_iter().map(|s| s.tokens.clone()).filter(|t| !t.is_empty()).collect()
}

/// Embeds every slice of a list; empty slices map to a zero vector.
pub fn embed_all(model: &EncoderModel, slices: &[Slice]) -> Vec<Vec<f64>> {
    slices
        .iter()
        .map(|s| model.embed_slice(&s.tokens).unwrap_or_else(|_| vec![0.0; model.cfg.d_model]))
        .collect()
}

/// Node-feature matrix for a slice list.
pub fn embedding_matrix(model: &EncoderModel, slices: &[Slice]) -> Tensor {
    let rows = embed_all(model, slices);
    let d = model.cfg.d_model;
    Tensor::from_vec(rows.len(), d, rows.into_iter().flatten().collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sir::parse_sir;
    use crate::slicer::slice_function;

    fn tokens(text: &str) -> Vec<Token> {
        text.split_whitespace().map(|t| t.parse().unwrap()).collect()
    }

    fn tiny_model(corpus: &[Vec<Token>]) -> EncoderModel {
        let vocab = Vocab::build(corpus.iter().map(Vec::as_slice), 0).unwrap();
        let cfg = EncoderConfig {
            d_model: 16,
            layers: 1,
            heads: 2,
            ff_dim: 32,
            max_len: 16,
            mask_frac: 0.15,
        };
        EncoderModel::new(cfg, vocab, 3).unwrap()
    }

    #[test]
    fn config_validation() {
        let mut c = EncoderConfig::default();
        assert!(c.validate().is_ok());
        c.mask_frac = 1.0;
        assert!(c.validate().is_err());
        c.mask_frac = 0.15;
        c.heads = 5;
        assert!(c.validate().is_err());
    }

    #[test]
    fn mask_count_is_floor_of_fraction() {
        let seqs: Vec<Vec<u32>> = (0..10).map(|_| (0..11).map(|i| 20 + i).collect()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = make_mlm_batch(&seqs, 0.15, &mut rng);
        assert_eq!(b.positions.len(), 15);
        for (&(s, p), &t) in b.positions.iter().zip(&b.targets) {
            assert_eq!(b.inputs[s][p], MASK);
            assert_eq!(seqs[s][p], t);
            assert_ne!(p, 0);
        }
        let masked = b.inputs.iter().flatten().filter(|&&i| i == MASK).count();
        assert_eq!(masked, 15);
    }

    #[test]
    fn contrastive_values() {
        assert_eq!(contrastive_loss(0.0, 1, 1.0), 0.0);
        assert_eq!(contrastive_loss(1.3, 0, 1.0), 0.0);
        assert!((contrastive_loss(0.4, 0, 1.0) - 0.36).abs() < 1e-12);
    }

    #[test]
    fn embedding_is_deterministic_and_cached() {
        let corpus = vec![tokens("mov r:rax r:rbx"), tokens("call fn:free r:rdi")];
        let m = tiny_model(&corpus);
        let a = m.embed_slice(&corpus[0]).unwrap();
        assert_eq!(a.len(), 16);
        assert_eq!(m.cache_len(), 1);
        let b = m.embed_slice(&corpus[0]).unwrap();
        assert_eq!(a, b);
        assert!(matches!(m.embed_slice(&[]), Err(EncoderError::EmptyTokens)));
        let again = EncoderModel::from_checkpoint(&m.to_checkpoint()).unwrap();
        assert_eq!(again.to_checkpoint(), m.to_checkpoint());
    }

    #[test]
    fn dominant_line_prefers_majority_then_lowest() {
        let f = parse_sir(
            "func f\nblock 0\n  mov #1, , r:rax ; line=a.c:9\n  add r:rax, #1, r:rax ; line=a.c:3\n  mov r:rax, , g:x ; line=a.c:9\nendfunc\n",
        )
        .unwrap()
        .remove(0);
        let s = slice_function(&f);
        assert_eq!(dominant_line(&f, &s[0]).unwrap().line, 9);
        let g = parse_sir("func f\nblock 0\n  mov #1, , r:rax ; line=a.c:9\n  mov r:rax, , g:x ; line=a.c:3\nendfunc\n")
            .unwrap()
            .remove(0);
        assert_eq!(dominant_line(&g, &slice_function(&g)[0]).unwrap().line, 3);
    }

    #[test]
    fn single_config_gives_no_pairs() {
        let f = parse_sir("func f\nblock 0\n  jz r:rdi, #0 ; line=a.c:1\nendfunc\n").unwrap().remove(0);
        let s = slice_function(&f);
        let items = [ConfigSlices { config: "O0".into(), function: &f, slices: &s }];
        assert!(make_pairs(&items, 0.1, 0).is_empty());
    }

    #[test]
    fn pair_jsonl_round_trip() {
        let p = FineTunePair {
            a: tokens("mov r:rax n:num"),
            b: tokens("jz r:rbx"),
            y: 1,
            line: "a.c:4".into(),
        };
        let text = pairs_to_jsonl(&[p.clone()]);
        assert!(text.starts_with("{\"a\":[\"mov\",\"r:rax\",\"n:num\"]"), "{text}");
        assert_eq!(pairs_from_jsonl(&text).unwrap(), vec![p]);
    }
}
