//! Manifests, retrieval pools and ranking.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::corpus::BuildConfig;
use super::metrics::{mrr, recall_at_k, recall_curve, MetricError, MRR_CUTOFF};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub function_id: String,
    pub sir_path: String,
    pub arch: String,
    pub compiler: String,
    pub opt: String,
    pub source_id: String,
}

impl ManifestEntry {
    pub fn config(&self) -> BuildConfig {
        BuildConfig::new(&self.arch, &self.compiler, &self.opt)
    }
}

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("manifest line {line}: {source}")]
    Json { line: usize, source: serde_json::Error },
    #[error("duplicate entry for function {function_id} under {config}")]
    Duplicate { function_id: String, config: String },
    #[error("manifest is empty")]
    Empty,
}

/// Corpus index, one JSON object per line.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn new(entries: Vec<ManifestEntry>) -> Result<Self, ManifestError> {
        let m = Self { entries };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<(), ManifestError> {
        if self.entries.is_empty() {
            return Err(ManifestError::Empty);
        }
        let mut seen = BTreeSet::new();
        for e in &self.entries {
            if !seen.insert((e.function_id.as_str(), e.config())) {
                return Err(ManifestError::Duplicate {
                    function_id: e.function_id.clone(),
                    config: e.config().to_string(),
                });
            }
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        self.entries
            .iter()
            .map(|e| serde_json::to_string(e).expect("entry serializes") + "\n")
            .collect()
    }

    pub fn from_jsonl(text: &str) -> Result<Self, ManifestError> {
        let entries = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| serde_json::from_str(l).map_err(|source| ManifestError::Json { line: i + 1, source }))
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(entries)
    }

    pub fn sources(&self) -> BTreeMap<&str, Vec<usize>> {
        let mut out: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, e) in self.entries.iter().enumerate() {
            out.entry(e.source_id.as_str()).or_default().push(i);
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TaskKind {
    XO,
    XC,
    XA,
    XM,
}

impl TaskKind {
    /// Whether `b` varies from `a` the way this task asks: XO, XC and XA
    /// change only the optimization level, compiler or architecture; XM
    /// takes any different configuration.
    pub fn admits(self, a: &BuildConfig, b: &BuildConfig) -> bool {
        let (arch, comp, opt) = (a.arch == b.arch, a.compiler == b.compiler, a.opt == b.opt);
        match self {
            TaskKind::XO => arch && comp && !opt,
            TaskKind::XC => arch && !comp && opt,
            TaskKind::XA => !arch && comp && opt,
            TaskKind::XM => a != b,
        }
    }
}

impl FromStr for TaskKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "XO" => Ok(TaskKind::XO),
            "XC" => Ok(TaskKind::XC),
            "XA" => Ok(TaskKind::XA),
            "XM" => Ok(TaskKind::XM),
            _ => Err(format!("unknown task {s:?} (expected XO, XC, XA or XM)")),
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetrievalTask {
    pub kind: TaskKind,
    pub poolsize: usize,
    /// Upper bound on the number of queries; `None` uses every feasible one.
    pub queries: Option<usize>,
    pub seed: u64,
}

/// One query with its pool, as manifest indices. `pool[truth_pos]` is the
/// ground truth.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Query {
    pub query: usize,
    pub truth: usize,
    pub pool: Vec<usize>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TaskError {
    #[error("no query has a ground truth for task {0}")]
    NoFeasibleQuery(TaskKind),
    #[error("query {query}: only {available} candidates satisfy {kind}, pool size {poolsize} requested")]
    PoolTooSmall {
        query: String,
        kind: TaskKind,
        available: usize,
        poolsize: usize,
    },
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("scoring failed: {0}")]
    Score(String),
}

/// Seeded pools: each holds the query's one ground truth plus
/// `poolsize − 1` functions of other sources, every member's configuration
/// varying from the query's as the task prescribes (one per source).
pub fn build_queries(m: &Manifest, task: &RetrievalTask) -> Result<Vec<Query>, TaskError> {
    let mut rng = ChaCha8Rng::seed_from_u64(task.seed);
    let configs: Vec<BuildConfig> = m.entries.iter().map(ManifestEntry::config).collect();
    let sources = m.sources();
    let mut candidates: Vec<(usize, Vec<usize>)> = Vec::new();
    for (q, e) in m.entries.iter().enumerate() {
        let truths: Vec<usize> = sources[e.source_id.as_str()]
            .iter()
            .copied()
            .filter(|&t| task.kind.admits(&configs[q], &configs[t]))
            .collect();
        if !truths.is_empty() {
            candidates.push((q, truths));
        }
    }
    if candidates.is_empty() {
        return Err(TaskError::NoFeasibleQuery(task.kind));
    }
    candidates.shuffle(&mut rng);
    if let Some(n) = task.queries {
        candidates.truncate(n);
    }
    candidates.sort_by_key(|(q, _)| *q);

    let mut out = Vec::with_capacity(candidates.len());
    for (q, truths) in candidates {
        let truth = *truths.choose(&mut rng).expect("non-empty");
        let query_source = m.entries[q].source_id.as_str();
        let mut distractors: Vec<usize> = Vec::new();
        for (src, members) in &sources {
            if *src == query_source {
                continue;
            }
            let ok: Vec<usize> = members.iter().copied().filter(|&d| task.kind.admits(&configs[q], &configs[d])).collect();
            if let Some(&d) = ok.choose(&mut rng) {
                distractors.push(d);
            }
        }
        let need = task.poolsize.saturating_sub(1);
        if distractors.len() < need {
            return Err(TaskError::PoolTooSmall {
                query: m.entries[q].function_id.clone(),
                kind: task.kind,
                available: distractors.len() + 1,
                poolsize: task.poolsize,
            });
        }
        distractors.shuffle(&mut rng);
        distractors.truncate(need);
        let mut pool = distractors;
        pool.push(truth);
        pool.sort_unstable();
        out.push(Query { query: q, truth, pool });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRank {
    pub query: String,
    pub truth: String,
    pub rank: usize,
    pub poolsize: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskReport {
    pub kind: TaskKind,
    pub ranks: Vec<QueryRank>,
    /// `(k, Recall@k)` for k up to the pool size (at most 50).
    pub recall: Vec<(usize, f64)>,
    pub mrr: f64,
    pub mrr_cutoff: Option<usize>,
}

impl TaskReport {
    pub fn recall_at(&self, k: usize) -> f64 {
        let ranks: Vec<usize> = self.ranks.iter().map(|r| r.rank).collect();
        recall_at_k(&ranks, k).unwrap_or(0.0)
    }

    pub fn ranks_csv(&self) -> String {
        let mut out = String::from("query,truth,rank,poolsize\n");
        for r in &self.ranks {
            out.push_str(&format!("{},{},{},{}\n", r.query, r.truth, r.rank, r.poolsize));
        }
        out
    }

    pub fn recall_csv(&self) -> String {
        let mut out = String::from("k,recall\n");
        for (k, r) in &self.recall {
            out.push_str(&format!("{k},{r:.6}\n"));
        }
        out
    }
}

/// Sorts a pool by ascending distance, ties by function id.
pub fn rank_pool(m: &Manifest, pool: &[usize], distances: &[f64]) -> Vec<usize> {
    let mut order: Vec<(usize, f64)> = pool.iter().copied().zip(distances.iter().copied()).collect();
    order.sort_by(|(a, da), (b, db)| {
        da.total_cmp(db)
            .then_with(|| m.entries[*a].function_id.cmp(&m.entries[*b].function_id))
            .then(a.cmp(b))
    });
    order.into_iter().map(|(i, _)| i).collect()
}

/// Scores every pool member against its query with `distance` (smaller is
/// closer) and reports ranks and metrics. Queries run in parallel when the
/// `parallel` feature is on.
pub fn run_queries<D>(
    m: &Manifest,
    kind: TaskKind,
    queries: &[Query],
    mrr_cutoff: Option<usize>,
    distance: D,
) -> Result<TaskReport, TaskError>
where
    D: Fn(usize, usize) -> Result<f64, String> + Sync,
{
    let one = |q: &Query| -> Result<QueryRank, TaskError> {
        let d = q.pool.iter().map(|&p| distance(q.query, p)).collect::<Result<Vec<f64>, String>>().map_err(TaskError::Score)?;
        let ranked = rank_pool(m, &q.pool, &d);
        let rank = super::metrics::rank_of(&ranked, &q.truth).ok_or(MetricError::MissingTruth(q.query))?;
        Ok(QueryRank {
            query: m.entries[q.query].function_id.clone(),
            truth: m.entries[q.truth].function_id.clone(),
            rank,
            poolsize: q.pool.len(),
        })
    };
    #[cfg(feature = "parallel")]
    let ranks: Vec<QueryRank> = {
        use rayon::prelude::*;
        queries.par_iter().map(one).collect::<Result<_, _>>()?
    };
    #[cfg(not(feature = "parallel"))]
    let ranks: Vec<QueryRank> = queries.iter().map(one).collect::<Result<_, _>>()?;

    let raw: Vec<usize> = ranks.iter().map(|r| r.rank).collect();
    let max_k = queries.iter().map(|q| q.pool.len()).max().unwrap_or(1).min(50);
    Ok(TaskReport {
        kind,
        recall: recall_curve(&raw, max_k)?,
        mrr: mrr(&raw, mrr_cutoff)?,
        mrr_cutoff,
        ranks,
    })
}

pub fn default_cutoff(no_cutoff: bool) -> Option<usize> {
    (!no_cutoff).then_some(MRR_CUTOFF)
}
