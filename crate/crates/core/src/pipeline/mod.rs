//! End-to-end assembly: synthetic corpora, graph construction, training of
//! the encoder and matching network, ablations and retrieval evaluation.

pub mod corpus;
pub mod metrics;
pub mod perturb;
pub mod tasks;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::{
    embedding_matrix, finetune, make_pairs, pretrain, ConfigSlices, EncoderConfig, EncoderError, EncoderModel,
    TrainConfig,
};
use crate::gmn::{self, GmnConfig, GmnError, GraphInput, LabeledPair, MatchModel};
use crate::graphbuild::{build_graph, merge_duplicates, FlowType, SliceGraph};
use crate::preprocess::{prune, ArchTable};
use crate::sir::FunctionIR;
use crate::slicer::{slice_function, whole_blocks};
use crate::tokenize::Vocab;

use corpus::{generate_program, lower, BuildConfig};
use perturb::perturb;
use tasks::{build_queries, run_queries, Manifest, ManifestEntry, RetrievalTask, TaskError, TaskReport};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("unknown ablation {0:?}")]
    UnknownAblation(String),
    #[error("unknown architecture {0:?}")]
    UnknownArch(String),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Gmn(#[from] GmnError),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error("vocabulary: {0}")]
    Vocab(#[from] crate::tokenize::VocabError),
    #[error("corpus has no function with two configurations to pair")]
    NoPairs,
}

/// Pipeline variants for ablation runs.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Ablation {
    #[default]
    Full,
    /// The flow type's edge feature becomes the constant all-ones vector.
    DropFlow(FlowType),
    NoFinetune,
    /// Nodes are whole blocks; edges are control flow plus data dependence.
    NoSlicing,
    NoCrossAttention,
}

impl Ablation {
    pub fn slicing(self) -> bool {
        self != Ablation::NoSlicing
    }

    pub fn finetune(self) -> bool {
        self != Ablation::NoFinetune
    }

    /// Applies the switch to a matching-network configuration.
    pub fn configure(self, mut cfg: GmnConfig) -> GmnConfig {
        match self {
            Ablation::DropFlow(f) => {
                if !cfg.dropped_flows.contains(&f) {
                    cfg.dropped_flows.push(f);
                }
            }
            Ablation::NoCrossAttention => cfg.cross_attention = false,
            _ => {}
        }
        cfg
    }

    pub fn all() -> Vec<Ablation> {
        let mut v = vec![Ablation::Full];
        v.extend(FlowType::ALL.iter().map(|&f| Ablation::DropFlow(f)));
        v.extend([Ablation::NoFinetune, Ablation::NoSlicing, Ablation::NoCrossAttention]);
        v
    }
}

impl FromStr for Ablation {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let unknown = || PipelineError::UnknownAblation(s.to_string());
        match s {
            "full" => Ok(Ablation::Full),
            "no-finetune" => Ok(Ablation::NoFinetune),
            "no-slicing" => Ok(Ablation::NoSlicing),
            "no-cross-attention" => Ok(Ablation::NoCrossAttention),
            _ => {
                let name = s.strip_prefix("drop-flow:").ok_or_else(unknown)?;
                FlowType::from_name(name).map(Ablation::DropFlow).ok_or_else(unknown)
            }
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Ablation::Full => write!(f, "full"),
            Ablation::DropFlow(flow) => write!(f, "drop-flow:{}", flow.name()),
            Ablation::NoFinetune => write!(f, "no-finetune"),
            Ablation::NoSlicing => write!(f, "no-slicing"),
            Ablation::NoCrossAttention => write!(f, "no-cross-attention"),
        }
    }
}

/// Parses an ablation switch.
pub fn ablate(switch: &str) -> Result<Ablation, PipelineError> {
    switch.parse()
}

/// One generated function under one configuration.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusFunction {
    pub function_id: String,
    pub source_id: String,
    pub config: BuildConfig,
    pub function: FunctionIR,
}

/// `functions` random programs, each lowered under every configuration and
/// perturbed with that configuration's profile.
pub fn generate_corpus(functions: usize, configs: &[BuildConfig], seed: u64) -> Vec<CorpusFunction> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(functions * configs.len());
    for i in 0..functions {
        let prog = generate_program(i, &mut rng);
        for cfg in configs {
            let function_id = format!("{}@{}", prog.id, cfg);
            let lowered = lower(&prog, cfg, &function_id);
            let f = perturb(&lowered, rng.gen(), cfg.perturb_ops());
            out.push(CorpusFunction {
                function_id,
                source_id: prog.id.clone(),
                config: cfg.clone(),
                function: f,
            });
        }
    }
    out
}

/// Manifest for a corpus whose functions are stored as `<dir>/<id>.sir`.
pub fn corpus_manifest(corpus: &[CorpusFunction], dir: &str) -> Manifest {
    let entries = corpus
        .iter()
        .map(|c| ManifestEntry {
            function_id: c.function_id.clone(),
            sir_path: format!("{dir}/{}", sir_file_name(&c.function_id)),
            arch: c.config.arch.clone(),
            compiler: c.config.compiler.clone(),
            opt: c.config.opt.clone(),
            source_id: c.source_id.clone(),
        })
        .collect();
    Manifest { entries }
}

pub fn sir_file_name(function_id: &str) -> String {
    let safe: String = function_id.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect();
    format!("{safe}.sir")
}

/// Prune, slice (or take whole blocks), connect and merge.
pub fn build_slice_graph(f: &FunctionIR, arg_regs: &[String], slicing: bool) -> SliceGraph {
    let pruned = prune(f, arg_regs);
    if slicing {
        let slices = slice_function(&pruned);
        merge_duplicates(&build_graph(&pruned, &slices))
    } else {
        build_graph(&pruned, &whole_blocks(&pruned))
    }
}

/// Hyperparameters of a full training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub encoder: EncoderConfig,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    pub finetune_margin: f64,
    /// Share of non-branch source lines that yield fine-tuning pairs.
    pub non_branch_rate: f64,
    pub min_count: usize,
    pub gmn: GmnConfig,
    /// Random negatives per positive matching-network pair.
    pub negatives_per_positive: usize,
    pub seed: u64,
}

impl PipelineConfig {
    /// Settings sized for a single laptop core and a few hundred functions.
    pub fn desk(seed: u64) -> Self {
        let mut cfg = Self {
            seed,
            ..Self::default()
        };
        cfg.pretrain = TrainConfig { epochs: 3, seed, ..TrainConfig::default() };
        cfg.finetune = TrainConfig { epochs: 6, seed, ..TrainConfig::default() };
        cfg.gmn.epochs = 20;
        cfg.gmn.lr = 3e-3;
        cfg
    }
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            pretrain: TrainConfig::default(),
            finetune: TrainConfig::default(),
            finetune_margin: 1.0,
            non_branch_rate: 0.5,
            min_count: crate::tokenize::DEFAULT_MIN_COUNT,
            gmn: GmnConfig::default(),
            negatives_per_positive: 1,
            seed: 0,
        }
    }
}

/// A function prepared for training: its graph and the pruned IR the
/// graph's slices index into.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub config: String,
    pub source_id: String,
    pub pruned: FunctionIR,
    pub graph: SliceGraph,
}

pub fn prepare(items: &[CorpusFunction], table: &ArchTable, ablation: Ablation) -> Result<Vec<Prepared>, PipelineError> {
    let one = |c: &CorpusFunction| -> Result<Prepared, PipelineError> {
        let args = table.args(&c.config.arch).ok_or_else(|| PipelineError::UnknownArch(c.config.arch.clone()))?;
        let pruned = prune(&c.function, args);
        let graph = if ablation.slicing() {
            merge_duplicates(&build_graph(&pruned, &slice_function(&pruned)))
        } else {
            build_graph(&pruned, &whole_blocks(&pruned))
        };
        Ok(Prepared {
            config: c.config.to_string(),
            source_id: c.source_id.clone(),
            pruned,
            graph,
        })
    };
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        items.par_iter().map(one).collect()
    }
    #[cfg(not(feature = "parallel"))]
    items.iter().map(one).collect()
}

/// Builds the vocabulary, pretrains and (unless ablated) fine-tunes.
pub fn train_encoder(prepared: &[Prepared], cfg: &PipelineConfig, ablation: Ablation) -> Result<EncoderModel, PipelineError> {
    let mut model = pretrain_encoder(prepared, cfg)?;
    if ablation.finetune() {
        finetune_encoder(&mut model, prepared, cfg)?;
    }
    Ok(model)
}

/// Vocabulary over every graph node plus masked-token pretraining.
pub fn pretrain_encoder(prepared: &[Prepared], cfg: &PipelineConfig) -> Result<EncoderModel, PipelineError> {
    let corpus: Vec<&[crate::tokenize::Token]> =
        prepared.iter().flat_map(|p| p.graph.nodes.iter().map(|n| n.tokens.as_slice())).collect();
    let vocab = Vocab::build(corpus.iter().copied(), cfg.min_count)?;
    log::info!("vocabulary: {} entries from {} slices", vocab.len(), corpus.len());
    let mut model = EncoderModel::new(cfg.encoder.clone(), vocab, cfg.seed)?;
    let seqs: Vec<Vec<crate::tokenize::Token>> = corpus.iter().filter(|t| !t.is_empty()).map(|t| t.to_vec()).collect();
    pretrain(&mut model, &seqs, &cfg.pretrain)?;
    Ok(model)
}

/// Siamese fine-tuning on line-matched slice pairs. Returns the pairs used.
pub fn finetune_encoder(
    model: &mut EncoderModel,
    prepared: &[Prepared],
    cfg: &PipelineConfig,
) -> Result<Vec<crate::encoder::FineTunePair>, PipelineError> {
    let pairs = finetune_pairs(prepared, cfg.non_branch_rate, cfg.seed);
    log::info!("fine-tuning on {} slice pairs", pairs.len());
    finetune(model, &pairs, cfg.finetune_margin, &cfg.finetune)?;
    Ok(pairs)
}

pub fn finetune_pairs(prepared: &[Prepared], non_branch_rate: f64, seed: u64) -> Vec<crate::encoder::FineTunePair> {
    let items: Vec<ConfigSlices<'_>> = prepared
        .iter()
        .map(|p| ConfigSlices {
            config: p.config.clone(),
            function: &p.pruned,
            slices: &p.graph.nodes,
        })
        .collect();
    make_pairs(&items, non_branch_rate, seed)
}

pub fn graph_input(encoder: &EncoderModel, graph: &SliceGraph) -> GraphInput {
    GraphInput::from_graph(graph, embedding_matrix(encoder, &graph.nodes))
}

/// Positives between configurations of one source, plus seeded random
/// cross-source negatives.
pub fn gmn_pairs(prepared: &[Prepared], negatives_per_positive: usize, seed: u64) -> Vec<LabeledPair> {
    let mut by_source: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, p) in prepared.iter().enumerate() {
        by_source.entry(p.source_id.as_str()).or_default().push(i);
    }
    let mut pairs = Vec::new();
    for members in by_source.values() {
        for (k, &a) in members.iter().enumerate() {
            for &b in &members[k + 1..] {
                pairs.push(LabeledPair { a, b, t: 1 });
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let wanted = pairs.len() * negatives_per_positive;
    let mut made = 0;
    let mut attempts = 0;
    while made < wanted && attempts < wanted * 100 {
        attempts += 1;
        let a = rng.gen_range(0..prepared.len());
        let b = rng.gen_range(0..prepared.len());
        if prepared[a].source_id == prepared[b].source_id {
            continue;
        }
        pairs.push(LabeledPair { a, b, t: -1 });
        made += 1;
    }
    pairs.shuffle(&mut rng);
    pairs
}

/// Trained encoder and matching network for one ablation setting.
#[derive(Clone)]
pub struct Pipeline {
    pub encoder: EncoderModel,
    pub gmn: MatchModel,
    pub ablation: Ablation,
    pub arch_table: ArchTable,
}

impl Pipeline {
    pub fn graph(&self, f: &FunctionIR, arch: &str) -> Result<SliceGraph, PipelineError> {
        let args = self.arch_table.args(arch).ok_or_else(|| PipelineError::UnknownArch(arch.to_string()))?;
        Ok(build_slice_graph(f, args, self.ablation.slicing()))
    }

    pub fn graph_input(&self, f: &FunctionIR, arch: &str) -> Result<GraphInput, PipelineError> {
        Ok(graph_input(&self.encoder, &self.graph(f, arch)?))
    }

    pub fn distance(&self, a: &GraphInput, b: &GraphInput) -> Result<f64, PipelineError> {
        Ok(self.gmn.score(a, b)?)
    }

    /// Graph inputs for a list of (function, arch) pairs.
    pub fn inputs(&self, functions: &[(&FunctionIR, &str)]) -> Result<Vec<GraphInput>, PipelineError> {
        let one = |(f, arch): &(&FunctionIR, &str)| self.graph_input(f, arch);
        #[cfg(feature = "parallel")]
        {
            use rayon::prelude::*;
            functions.par_iter().map(one).collect()
        }
        #[cfg(not(feature = "parallel"))]
        functions.iter().map(one).collect()
    }

    /// Runs a retrieval task over manifest entries whose IR is `functions`
    /// (same order as the manifest).
    pub fn evaluate(
        &self,
        manifest: &Manifest,
        functions: &[FunctionIR],
        task: &RetrievalTask,
        mrr_cutoff: Option<usize>,
    ) -> Result<TaskReport, PipelineError> {
        let queries = build_queries(manifest, task)?;
        let pairs: Vec<(&FunctionIR, &str)> =
            functions.iter().zip(&manifest.entries).map(|(f, e)| (f, e.arch.as_str())).collect();
        let inputs = self.inputs(&pairs)?;
        Ok(run_queries(manifest, task.kind, &queries, mrr_cutoff, |a, b| {
            self.gmn.score(&inputs[a], &inputs[b]).map_err(|e| e.to_string())
        })?)
    }
}

/// Trains every stage on `items` under one ablation setting.
pub fn train_pipeline(items: &[CorpusFunction], cfg: &PipelineConfig, ablation: Ablation) -> Result<Pipeline, PipelineError> {
    let table = ArchTable::default();
    let prepared = prepare(items, &table, ablation)?;
    let encoder = train_encoder(&prepared, cfg, ablation)?;
    let gmn = train_gmn(&encoder, &prepared, cfg, ablation)?;
    Ok(Pipeline {
        encoder,
        gmn,
        ablation,
        arch_table: table,
    })
}

pub fn train_gmn(
    encoder: &EncoderModel,
    prepared: &[Prepared],
    cfg: &PipelineConfig,
    ablation: Ablation,
) -> Result<MatchModel, PipelineError> {
    let inputs: Vec<GraphInput> = prepared.iter().map(|p| graph_input(encoder, &p.graph)).collect();
    let pairs = gmn_pairs(prepared, cfg.negatives_per_positive, cfg.seed);
    if !pairs.iter().any(|p| p.t > 0) {
        return Err(PipelineError::NoPairs);
    }
    let mut model = MatchModel::new(ablation.configure(cfg.gmn.clone()), encoder.cfg.d_model, cfg.seed)?;
    log::info!("training matching network on {} pairs", pairs.len());
    gmn::train(&mut model, &inputs, &pairs, cfg.seed)?;
    Ok(model)
}

/// Opcode histogram of the raw IR.
pub fn bag_of_opcodes(f: &FunctionIR) -> BTreeMap<String, f64> {
    let mut out = BTreeMap::new();
    for i in f.blocks.values().flat_map(|b| &b.instructions) {
        *out.entry(i.opcode.clone()).or_insert(0.0) += 1.0;
    }
    out
}

/// `1 − cos` between two opcode histograms.
pub fn bag_distance(a: &BTreeMap<String, f64>, b: &BTreeMap<String, f64>) -> f64 {
    let dot: f64 = a.iter().filter_map(|(k, x)| b.get(k).map(|y| x * y)).sum();
    let na: f64 = a.values().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.values().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 1.0;
    }
    1.0 - dot / (na * nb)
}

/// Bag-of-opcodes cosine baseline on the same task.
pub fn evaluate_baseline(
    manifest: &Manifest,
    functions: &[FunctionIR],
    task: &RetrievalTask,
    mrr_cutoff: Option<usize>,
) -> Result<TaskReport, PipelineError> {
    let queries = build_queries(manifest, task)?;
    let bags: Vec<BTreeMap<String, f64>> = functions.iter().map(bag_of_opcodes).collect();
    Ok(run_queries(manifest, task.kind, &queries, mrr_cutoff, |a, b| Ok(bag_distance(&bags[a], &bags[b])))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use corpus::variant_configs;

    #[test]
    fn ablation_names_round_trip() {
        for a in Ablation::all() {
            assert_eq!(a.to_string().parse::<Ablation>().unwrap(), a);
        }
        assert!(ablate("drop-flow:Nope").is_err());
        assert!(ablate("fast").is_err());
    }

    #[test]
    fn ablations_configure_the_matcher() {
        let c = Ablation::DropFlow(FlowType::Sequential).configure(GmnConfig::default());
        assert_eq!(c.dropped_flows, vec![FlowType::Sequential]);
        assert!(!Ablation::NoCrossAttention.configure(GmnConfig::default()).cross_attention);
    }

    #[test]
    fn no_slicing_graph_has_one_node_per_block() {
        let corpus = generate_corpus(6, &variant_configs(2), 1);
        let table = ArchTable::default();
        for c in &corpus {
            let args = table.args(&c.config.arch).unwrap();
            let g = build_slice_graph(&c.function, args, false);
            let pruned = prune(&c.function, args);
            assert_eq!(g.len(), pruned.blocks.values().filter(|b| !b.instructions.is_empty()).count());
            assert!(g.edges.iter().all(|e| matches!(e.flow, FlowType::Sequential | FlowType::Jump | FlowType::DataDependence)));
        }
    }

    #[test]
    fn corpus_is_seeded_and_manifest_valid() {
        let a = generate_corpus(4, &variant_configs(3), 7);
        assert_eq!(a, generate_corpus(4, &variant_configs(3), 7));
        let m = corpus_manifest(&a, "sir");
        m.validate().unwrap();
        assert_eq!(m.sources().len(), 4);
        for c in &a {
            c.function.validate().unwrap();
        }
    }

    #[test]
    fn gmn_pairs_are_balanced() {
        let corpus = generate_corpus(5, &variant_configs(2), 2);
        let prepared = prepare(&corpus, &ArchTable::default(), Ablation::Full).unwrap();
        let pairs = gmn_pairs(&prepared, 1, 0);
        let pos = pairs.iter().filter(|p| p.t > 0).count();
        assert_eq!(pos, 5);
        assert_eq!(pairs.len(), 10);
        for p in pairs {
            assert_eq!(prepared[p.a].source_id == prepared[p.b].source_id, p.t > 0);
        }
    }

    #[test]
    fn bag_distance_values() {
        let mut a = BTreeMap::new();
        a.insert("mov".to_string(), 1.0);
        let mut b = BTreeMap::new();
        b.insert("add".to_string(), 2.0);
        assert_eq!(bag_distance(&a, &a), 0.0);
        assert_eq!(bag_distance(&a, &b), 1.0);
    }
}
