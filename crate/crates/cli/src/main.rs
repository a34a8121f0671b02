use std::collections::hash_map::DefaultHasher;
use std::fs;
use std::hash::{Hash, Hasher};
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use slicegraph::encoder::{pairs_to_jsonl, EncoderConfig, EncoderModel, TrainConfig};
use slicegraph::gmn::{AttentionExport, GmnConfig, GraphInput, MatchModel};
use slicegraph::graphbuild::{build_graph, merge_duplicates, SliceGraph};
use slicegraph::pipeline::corpus::{variant_configs, BuildConfig};
use slicegraph::pipeline::tasks::{build_queries, default_cutoff, run_queries, Manifest, RetrievalTask, TaskKind, TaskReport};
use slicegraph::pipeline::{
    corpus_manifest, evaluate_baseline, finetune_encoder, generate_corpus, graph_input, pretrain_encoder, prepare,
    sir_file_name, train_gmn, Ablation, CorpusFunction, Pipeline, PipelineConfig, Prepared,
};
use slicegraph::preprocess::{prune, ArchTable};
use slicegraph::sir::{parse_sir, print_sir, FunctionIR};
use slicegraph::slicer::{slice_function, whole_blocks};

#[derive(Parser)]
#[command(name = "slicegraph", version, about = "Slice-graph binary function similarity")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse SIR and print one JSON summary per function
    Parse {
        file: PathBuf,
        /// Echo the functions back in canonical SIR instead
        #[arg(long)]
        print: bool,
    },
    /// Slice every block and print one JSON object per slice
    Slice {
        file: PathBuf,
        #[command(flatten)]
        graph: GraphOpts,
    },
    /// Build the slice graph of every function as JSON lines or DOT
    Graph {
        file: PathBuf,
        #[command(flatten)]
        graph: GraphOpts,
        #[arg(long)]
        dot: bool,
        /// Keep duplicate slices unmerged
        #[arg(long)]
        no_merge: bool,
    },
    /// Masked-token pretraining of the slice encoder over a manifest
    Pretrain {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        dim: usize,
        #[arg(long, default_value_t = 2)]
        layers: usize,
        #[arg(long, default_value_t = 4)]
        heads: usize,
        #[arg(long, default_value_t = 3)]
        epochs: usize,
        #[arg(long, default_value_t = 0.15)]
        mask_frac: f64,
        #[arg(long, default_value_t = 10)]
        min_count: usize,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "full")]
        ablation: Ablation,
    },
    /// Siamese fine-tuning on slice pairs matched by source line
    Finetune {
        #[arg(long)]
        encoder: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
        #[arg(long, default_value_t = 6)]
        epochs: usize,
        #[arg(long, default_value_t = 1.0)]
        margin: f64,
        /// Share of non-branch source lines that also yield pairs
        #[arg(long, default_value_t = 0.5)]
        extra_pairs: f64,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write the generated pairs as JSON lines
        #[arg(long)]
        pairs_out: Option<PathBuf>,
        #[arg(long, default_value = "full")]
        ablation: Ablation,
    },
    /// Train the graph matching network on function pairs of a manifest
    TrainGmn {
        #[arg(long)]
        encoder: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        epochs: usize,
        #[arg(long, default_value_t = 5)]
        rounds: usize,
        #[arg(long, default_value_t = 32)]
        hidden: usize,
        #[arg(long, default_value_t = 3e-3)]
        lr: f64,
        #[arg(long, default_value_t = 0.5)]
        margin: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "full")]
        ablation: Ablation,
    },
    /// Distance between two functions
    Score {
        a: PathBuf,
        b: PathBuf,
        #[command(flatten)]
        models: ModelOpts,
        #[arg(long, default_value = "x64")]
        arch_a: String,
        #[arg(long, default_value = "x64")]
        arch_b: String,
    },
    /// Rank a manifest's functions against a query function (CSV)
    Search {
        #[arg(long)]
        query: PathBuf,
        #[arg(long)]
        pool: PathBuf,
        #[arg(long, default_value_t = 10)]
        k: usize,
        #[arg(long, default_value = "x64")]
        arch: String,
        #[command(flatten)]
        models: ModelOpts,
    },
    /// Run a retrieval task; writes ranks and recall CSVs, prints a JSON summary
    Eval {
        #[arg(long)]
        task: TaskKind,
        #[arg(long, default_value_t = 100)]
        poolsize: usize,
        #[arg(long)]
        queries: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        manifest: PathBuf,
        /// Use the raw mean reciprocal rank without the top-10 truncation
        #[arg(long)]
        no_cutoff: bool,
        /// Score with the bag-of-opcodes baseline instead of trained models
        #[arg(long)]
        baseline: bool,
        /// Prefix for `<prefix>.ranks.csv` and `<prefix>.recall.csv`
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        models: ModelOpts,
    },
    /// Cross-graph attention of a function pair as JSON and DOT
    ExportAttention {
        a: PathBuf,
        b: PathBuf,
        #[command(flatten)]
        models: ModelOpts,
        #[arg(long, default_value = "x64")]
        arch_a: String,
        #[arg(long, default_value = "x64")]
        arch_b: String,
        /// Writes `<out>.json` and `<out>.dot`
        #[arg(long, short)]
        out: PathBuf,
        /// Attention edges below this weight are left out of the DOT file
        #[arg(long, default_value_t = 0.1)]
        min_weight: f64,
    },
    /// Generate a synthetic corpus: SIR files plus manifest.jsonl
    GenCorpus {
        #[arg(long)]
        functions: usize,
        #[arg(long, default_value_t = 2)]
        variants: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, short, default_value = "corpus")]
        out: PathBuf,
    },
}

#[derive(Args)]
struct GraphOpts {
    #[arg(long, default_value = "x64")]
    arch: String,
    /// Skip pruning
    #[arg(long)]
    no_prune: bool,
    /// One node per whole block
    #[arg(long)]
    no_slicing: bool,
}

#[derive(Args)]
struct ModelOpts {
    #[arg(long)]
    encoder: Option<PathBuf>,
    #[arg(long)]
    gmn: Option<PathBuf>,
    #[arg(long, default_value = "full")]
    ablation: Ablation,
    /// Cache directory for slice graphs
    #[arg(long, env = "SLICEGRAPH_CACHE")]
    cache: Option<PathBuf>,
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    match cli.command {
        Command::Parse { file, print } => {
            let functions = read_sir(&file)?;
            if print {
                write!(out, "{}", print_sir(&functions))?;
            } else {
                for f in &functions {
                    let edges: usize = f.blocks.values().map(|b| b.out_edges.len()).sum();
                    let summary = serde_json::json!({
                        "function": f.name,
                        "blocks": f.blocks.len(),
                        "instructions": f.instruction_count(),
                        "edges": edges,
                        "valid": f.validate().err(),
                    });
                    writeln!(out, "{summary}")?;
                }
            }
        }
        Command::Slice { file, graph } => {
            let table = ArchTable::default();
            for f in read_sir(&file)? {
                let f = maybe_prune(&f, &graph, &table)?;
                let slices = if graph.no_slicing { whole_blocks(&f) } else { slice_function(&f) };
                for s in slices {
                    let row = serde_json::json!({
                        "function": f.name,
                        "block": s.block,
                        "slice_id": s.id,
                        "instruction_indices": s.instr_indices,
                        "text": s.text,
                    });
                    writeln!(out, "{row}")?;
                }
            }
        }
        Command::Graph { file, graph, dot, no_merge } => {
            let table = ArchTable::default();
            for f in read_sir(&file)? {
                let f = maybe_prune(&f, &graph, &table)?;
                let slices = if graph.no_slicing { whole_blocks(&f) } else { slice_function(&f) };
                let mut g = build_graph(&f, &slices);
                if !no_merge && !graph.no_slicing {
                    g = merge_duplicates(&g);
                }
                if dot {
                    write!(out, "{}", g.to_dot())?;
                } else {
                    writeln!(out, "{}", g.to_json())?;
                }
            }
        }
        Command::Pretrain {
            manifest,
            out: path,
            dim,
            layers,
            heads,
            epochs,
            mask_frac,
            min_count,
            lr,
            seed,
            ablation,
        } => {
            let prepared = prepare_manifest(&manifest, ablation)?;
            let mut cfg = PipelineConfig::desk(seed);
            cfg.encoder = EncoderConfig {
                d_model: dim,
                layers,
                heads,
                ff_dim: 2 * dim,
                mask_frac,
                ..EncoderConfig::default()
            };
            cfg.min_count = min_count;
            cfg.pretrain = TrainConfig { epochs, lr, seed, ..TrainConfig::default() };
            let model = pretrain_encoder(&prepared, &cfg)?;
            write_file(&path, &model.to_checkpoint())?;
            log::info!("encoder written to {}", path.display());
        }
        Command::Finetune {
            encoder,
            manifest,
            out: path,
            epochs,
            margin,
            extra_pairs,
            lr,
            seed,
            pairs_out,
            ablation,
        } => {
            let mut model = load_encoder(&encoder)?;
            let prepared = prepare_manifest(&manifest, ablation)?;
            let mut cfg = PipelineConfig::desk(seed);
            cfg.finetune = TrainConfig { epochs, lr, seed, ..TrainConfig::default() };
            cfg.finetune_margin = margin;
            cfg.non_branch_rate = extra_pairs;
            let pairs = finetune_encoder(&mut model, &prepared, &cfg)?;
            if let Some(p) = pairs_out {
                write_file(&p, pairs_to_jsonl(&pairs).as_bytes())?;
            }
            write_file(&path, &model.to_checkpoint())?;
            log::info!("fine-tuned encoder written to {}", path.display());
        }
        Command::TrainGmn {
            encoder,
            manifest,
            out: path,
            epochs,
            rounds,
            hidden,
            lr,
            margin,
            seed,
            ablation,
        } => {
            let enc = load_encoder(&encoder)?;
            let prepared = prepare_manifest(&manifest, ablation)?;
            let mut cfg = PipelineConfig::desk(seed);
            cfg.gmn = GmnConfig {
                rounds,
                hidden,
                lr,
                margin,
                epochs,
                ..GmnConfig::default()
            };
            let model = train_gmn(&enc, &prepared, &cfg, ablation)?;
            write_file(&path, &model.to_checkpoint())?;
            log::info!("matching network written to {}", path.display());
        }
        Command::Score { a, b, models, arch_a, arch_b } => {
            let p = load_pipeline(&models)?;
            let fa = single_function(&a)?;
            let fb = single_function(&b)?;
            let ga = input_for(&p, &fa, &arch_a, models.cache.as_deref())?;
            let gb = input_for(&p, &fb, &arch_b, models.cache.as_deref())?;
            let s = p.gmn.score_detail(&ga, &gb)?;
            let row = serde_json::json!({"a": fa.name, "b": fb.name, "distance": s.distance, "cosine": s.cosine});
            writeln!(out, "{row}")?;
        }
        Command::Search { query, pool, k, arch, models } => {
            let p = load_pipeline(&models)?;
            let q = single_function(&query)?;
            let gq = input_for(&p, &q, &arch, models.cache.as_deref())?;
            let (m, functions) = load_manifest(&pool)?;
            let mut scored = Vec::with_capacity(functions.len());
            for (e, f) in m.entries.iter().zip(&functions) {
                let g = input_for(&p, f, &e.arch, models.cache.as_deref())?;
                scored.push((p.gmn.score(&gq, &g)?, e));
            }
            scored.sort_by(|(da, a), (db, b)| da.total_cmp(db).then_with(|| a.function_id.cmp(&b.function_id)));
            writeln!(out, "rank,function_id,source_id,config,distance")?;
            for (i, (d, e)) in scored.iter().take(k).enumerate() {
                writeln!(out, "{},{},{},{},{d:.6}", i + 1, e.function_id, e.source_id, e.config())?;
            }
        }
        Command::Eval {
            task,
            poolsize,
            queries,
            seed,
            manifest,
            no_cutoff,
            baseline,
            out: prefix,
            models,
        } => {
            let (m, functions) = load_manifest(&manifest)?;
            let t = RetrievalTask { kind: task, poolsize, queries, seed };
            let cutoff = default_cutoff(no_cutoff);
            let report = if baseline {
                evaluate_baseline(&m, &functions, &t, cutoff)?
            } else {
                let p = load_pipeline(&models)?;
                let inputs = m
                    .entries
                    .iter()
                    .zip(&functions)
                    .map(|(e, f)| input_for(&p, f, &e.arch, models.cache.as_deref()))
                    .collect::<Result<Vec<_>>>()?;
                let qs = build_queries(&m, &t)?;
                run_queries(&m, t.kind, &qs, cutoff, |a, b| {
                    p.gmn.score(&inputs[a], &inputs[b]).map_err(|e| e.to_string())
                })?
            };
            if let Some(prefix) = prefix {
                write_file(&with_suffix(&prefix, ".ranks.csv"), report.ranks_csv().as_bytes())?;
                write_file(&with_suffix(&prefix, ".recall.csv"), report.recall_csv().as_bytes())?;
            }
            writeln!(out, "{}", summary(&report))?;
        }
        Command::ExportAttention {
            a,
            b,
            models,
            arch_a,
            arch_b,
            out: prefix,
            min_weight,
        } => {
            let p = load_pipeline(&models)?;
            let ga = input_for(&p, &single_function(&a)?, &arch_a, models.cache.as_deref())?;
            let gb = input_for(&p, &single_function(&b)?, &arch_b, models.cache.as_deref())?;
            let prop = p.gmn.propagate_pair(&ga, &gb)?;
            let export = AttentionExport::new(&ga, &gb, &prop);
            write_file(&with_suffix(&prefix, ".json"), serde_json::to_string_pretty(&export)?.as_bytes())?;
            write_file(&with_suffix(&prefix, ".dot"), export.to_dot(min_weight).as_bytes())?;
        }
        Command::GenCorpus { functions, variants, seed, out: dir } => {
            if variants < 2 {
                bail!("--variants must be at least 2 so every source has a match");
            }
            let configs = variant_configs(variants);
            let corpus = generate_corpus(functions, &configs, seed);
            let sir_dir = dir.join("sir");
            fs::create_dir_all(&sir_dir).with_context(|| format!("creating {}", sir_dir.display()))?;
            for c in &corpus {
                let text = print_sir(std::slice::from_ref(&c.function));
                write_file(&sir_dir.join(sir_file_name(&c.function_id)), text.as_bytes())?;
            }
            let m = corpus_manifest(&corpus, "sir");
            write_file(&dir.join("manifest.jsonl"), m.to_jsonl().as_bytes())?;
            let summary = serde_json::json!({
                "functions": functions,
                "configs": configs.iter().map(BuildConfig::to_string).collect::<Vec<_>>(),
                "entries": m.entries.len(),
                "manifest": dir.join("manifest.jsonl"),
            });
            writeln!(out, "{summary}")?;
        }
    }
    Ok(())
}

fn summary(r: &TaskReport) -> serde_json::Value {
    serde_json::json!({
        "task": r.kind.to_string(),
        "queries": r.ranks.len(),
        "recall@1": r.recall_at(1),
        "recall@5": r.recall_at(5),
        "recall@10": r.recall_at(10),
        "mrr": r.mrr,
        "mrr_cutoff": r.mrr_cutoff,
    })
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn read_sir(path: &Path) -> Result<Vec<FunctionIR>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse_sir(&text).with_context(|| format!("parsing {}", path.display()))
}

fn single_function(path: &Path) -> Result<FunctionIR> {
    let mut fs = read_sir(path)?;
    match fs.len() {
        1 => Ok(fs.remove(0)),
        n => bail!("{} holds {n} functions; expected exactly one", path.display()),
    }
}

fn maybe_prune(f: &FunctionIR, opts: &GraphOpts, table: &ArchTable) -> Result<FunctionIR> {
    if opts.no_prune {
        return Ok(f.clone());
    }
    let args = table.args(&opts.arch).with_context(|| format!("unknown architecture {:?}", opts.arch))?;
    Ok(prune(f, args))
}

/// Manifest plus its functions; SIR paths resolve against the manifest's
/// directory.
fn load_manifest(path: &Path) -> Result<(Manifest, Vec<FunctionIR>)> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let m = Manifest::from_jsonl(&text)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut functions = Vec::with_capacity(m.entries.len());
    for e in &m.entries {
        let sir = base.join(&e.sir_path);
        let found = read_sir(&sir)?;
        let f = match found.iter().position(|f| f.name == e.function_id) {
            Some(i) => found[i].clone(),
            None if found.len() == 1 => found[0].clone(),
            None => bail!("{} has no function named {}", sir.display(), e.function_id),
        };
        functions.push(f);
    }
    Ok((m, functions))
}

fn prepare_manifest(path: &Path, ablation: Ablation) -> Result<Vec<Prepared>> {
    let (m, functions) = load_manifest(path)?;
    let items: Vec<CorpusFunction> = m
        .entries
        .iter()
        .zip(functions)
        .map(|(e, function)| CorpusFunction {
            function_id: e.function_id.clone(),
            source_id: e.source_id.clone(),
            config: e.config(),
            function,
        })
        .collect();
    Ok(prepare(&items, &ArchTable::default(), ablation)?)
}

fn load_encoder(path: &Path) -> Result<EncoderModel> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    EncoderModel::from_checkpoint(&bytes).with_context(|| format!("loading encoder {}", path.display()))
}

fn load_pipeline(models: &ModelOpts) -> Result<Pipeline> {
    let (Some(enc), Some(gmn)) = (&models.encoder, &models.gmn) else {
        bail!("--encoder and --gmn checkpoints are required");
    };
    let encoder = load_encoder(enc)?;
    let bytes = fs::read(gmn).with_context(|| format!("reading {}", gmn.display()))?;
    let gmn = MatchModel::from_checkpoint(&bytes).with_context(|| format!("loading matcher {}", gmn.display()))?;
    Ok(Pipeline {
        encoder,
        gmn,
        ablation: models.ablation,
        arch_table: ArchTable::default(),
    })
}

/// Slice graph for `f`, reused from the cache directory when present.
fn cached_graph(p: &Pipeline, f: &FunctionIR, arch: &str, cache: Option<&Path>) -> Result<SliceGraph> {
    let Some(dir) = cache else {
        return Ok(p.graph(f, arch)?);
    };
    let mut h = DefaultHasher::new();
    print_sir(std::slice::from_ref(f)).hash(&mut h);
    arch.hash(&mut h);
    p.ablation.slicing().hash(&mut h);
    let path = dir.join("graphs").join(format!("{:016x}.json", h.finish()));
    if let Ok(text) = fs::read_to_string(&path) {
        if let Ok(g) = SliceGraph::from_json(&text) {
            return Ok(g);
        }
        log::warn!("ignoring unreadable cache entry {}", path.display());
    }
    let g = p.graph(f, arch)?;
    write_file(&path, g.to_json().as_bytes())?;
    Ok(g)
}

fn input_for(p: &Pipeline, f: &FunctionIR, arch: &str, cache: Option<&Path>) -> Result<GraphInput> {
    let g = cached_graph(p, f, arch, cache)?;
    Ok(graph_input(&p.encoder, &g))
}
