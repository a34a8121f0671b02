//! Browser bindings: slice a SIR snippet, draw its slice graph, and look at
//! cross-graph attention between two snippets.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use slicegraph::gmn::{AttentionExport, GmnConfig, GraphInput, MatchModel};
use slicegraph::graphbuild::{build_graph, merge_duplicates, SliceGraph};
use slicegraph::nn::Tensor;
use slicegraph::preprocess::{prune, ArchTable};
use slicegraph::sir::{parse_sir, FunctionIR};
use slicegraph::slicer::slice_function;
use slicegraph::tokenize::Token;

/// Width of the hashed token features fed to the untrained matcher.
const FEATURE_DIM: usize = 32;

#[derive(Serialize)]
struct SliceRow {
    function: String,
    block: u32,
    slice_id: usize,
    instruction_indices: Vec<usize>,
    text: String,
}

#[derive(Serialize)]
struct GraphView {
    json: SliceGraph,
    dot: String,
}

fn first_function(text: &str) -> Result<FunctionIR, JsValue> {
    let mut fs = parse_sir(text).map_err(|e| JsValue::from_str(&e.to_string()))?;
    if fs.is_empty() {
        return Err(JsValue::from_str("no function found"));
    }
    Ok(fs.swap_remove(0))
}

fn pruned(text: &str, arch: &str) -> Result<FunctionIR, JsValue> {
    let f = first_function(text)?;
    let table = ArchTable::default();
    let args = table
        .args(arch)
        .ok_or_else(|| JsValue::from_str(&format!("unknown architecture {arch:?}")))?;
    Ok(prune(&f, args))
}

fn graph_of(text: &str, arch: &str, merge: bool) -> Result<SliceGraph, JsValue> {
    let f = pruned(text, arch)?;
    let g = build_graph(&f, &slice_function(&f));
    Ok(if merge { merge_duplicates(&g) } else { g })
}

fn to_json<T: Serialize>(v: &T) -> Result<String, JsValue> {
    serde_json::to_string(v).map_err(|e| JsValue::from_str(&e.to_string()))
}

/// Slices of the first function, as a JSON array.
#[wasm_bindgen]
pub fn slice_sir(text: &str, arch: &str) -> Result<String, JsValue> {
    let f = pruned(text, arch)?;
    let rows: Vec<SliceRow> = slice_function(&f)
        .into_iter()
        .map(|s| SliceRow {
            function: f.name.clone(),
            block: s.block,
            slice_id: s.id,
            instruction_indices: s.instr_indices,
            text: s.text,
        })
        .collect();
    to_json(&rows)
}

/// `{json, dot}` for the slice graph of the first function.
#[wasm_bindgen]
pub fn graph_sir(text: &str, arch: &str, merge: bool) -> Result<String, JsValue> {
    let g = graph_of(text, arch, merge)?;
    let dot = g.to_dot();
    to_json(&GraphView { json: g, dot })
}

fn hashed_features(g: &SliceGraph) -> Tensor {
    let mut t = Tensor::zeros(g.len(), FEATURE_DIM);
    for (i, n) in g.nodes.iter().enumerate() {
        for tok in &n.tokens {
            let row = t.row_mut(i);
            row[bucket(tok)] += 1.0;
        }
        let row = t.row_mut(i);
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        row.iter_mut().for_each(|x| *x /= norm);
    }
    t
}

/// FNV-1a over the token's text.
fn bucket(tok: &Token) -> usize {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tok.to_string().bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    (h % FEATURE_DIM as u64) as usize
}

/// Last-round attention between two snippets under a seeded, untrained
/// matcher over hashed token features: `{export, dot, distance}`.
#[wasm_bindgen]
pub fn attention_sir(a: &str, b: &str, arch: &str, rounds: usize, seed: u32) -> Result<String, JsValue> {
    let ga = graph_of(a, arch, true)?;
    let gb = graph_of(b, arch, true)?;
    if ga.is_empty() || gb.is_empty() {
        return Err(JsValue::from_str("both snippets need at least one instruction"));
    }
    let cfg = GmnConfig {
        rounds: rounds.clamp(1, 20),
        ..GmnConfig::default()
    };
    let model = MatchModel::new(cfg, FEATURE_DIM, u64::from(seed)).map_err(|e| JsValue::from_str(&e.to_string()))?;
    let ia = GraphInput::from_graph(&ga, hashed_features(&ga));
    let ib = GraphInput::from_graph(&gb, hashed_features(&gb));
    let prop = model.propagate_pair(&ia, &ib).map_err(|e| JsValue::from_str(&e.to_string()))?;
    let distance = slicegraph::gmn::squared_distance(&prop.h_g1, &prop.h_g2);
    let export = AttentionExport::new(&ia, &ib, &prop);
    let dot = export.to_dot(0.1);
    #[derive(Serialize)]
    struct View {
        export: AttentionExport,
        dot: String,
        distance: f64,
    }
    to_json(&View { export, dot, distance })
}
