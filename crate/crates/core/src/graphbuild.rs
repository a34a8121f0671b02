//! Slice graph construction: flow-typed edges between slices and merging of
//! duplicated nodes.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::sir::{def_use, BlockId, EdgeKind, FunctionIR};
use crate::slicer::Slice;
use crate::tokenize::Token;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum FlowType {
    Sequential,
    Jump,
    DataDependence,
    SeqParallel,
    JumpParallel,
}

impl FlowType {
    pub const ALL: [FlowType; 5] = [
        FlowType::Sequential,
        FlowType::Jump,
        FlowType::DataDependence,
        FlowType::SeqParallel,
        FlowType::JumpParallel,
    ];
    pub const COUNT: usize = 5;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn one_hot(self) -> [f64; Self::COUNT] {
        let mut v = [0.0; Self::COUNT];
        v[self.index()] = 1.0;
        v
    }

    pub fn name(self) -> &'static str {
        match self {
            FlowType::Sequential => "sequential",
            FlowType::Jump => "jump",
            FlowType::DataDependence => "data-dependence",
            FlowType::SeqParallel => "seq-parallel",
            FlowType::JumpParallel => "jump-parallel",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|f| f.name() == name)
    }

    fn dot_color(self) -> &'static str {
        match self {
            FlowType::Sequential => "black",
            FlowType::Jump => "red",
            FlowType::DataDependence => "blue",
            FlowType::SeqParallel => "darkgreen",
            FlowType::JumpParallel => "orange",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct GraphEdge {
    pub src: usize,
    pub dst: usize,
    pub flow: FlowType,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SliceGraph {
    pub function: String,
    pub nodes: Vec<Slice>,
    /// Sorted and free of duplicates.
    pub edges: Vec<GraphEdge>,
}

impl SliceGraph {
    pub fn node_index(&self, id: usize) -> Option<usize> {
        self.nodes.iter().position(|n| n.id == id)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Edges as `(src position, dst position, flow)` over `nodes`.
    pub fn indexed_edges(&self) -> Vec<(usize, usize, FlowType)> {
        let pos: BTreeMap<usize, usize> = self.nodes.iter().enumerate().map(|(i, n)| (n.id, i)).collect();
        self.edges.iter().map(|e| (pos[&e.src], pos[&e.dst], e.flow)).collect()
    }

    pub fn validate(&self) -> Result<(), String> {
        let ids: BTreeSet<usize> = self.nodes.iter().map(|n| n.id).collect();
        if ids.len() != self.nodes.len() {
            return Err("duplicate node id".into());
        }
        let block_of: BTreeMap<usize, BlockId> = self.nodes.iter().map(|n| (n.id, n.block)).collect();
        for e in &self.edges {
            if e.src == e.dst {
                return Err(format!("self-loop on {}", e.src));
            }
            let (Some(bs), Some(bd)) = (block_of.get(&e.src), block_of.get(&e.dst)) else {
                return Err(format!("edge {}->{} references a missing node", e.src, e.dst));
            };
            if e.flow == FlowType::DataDependence && bs == bd {
                return Err(format!("data dependence inside block {bs}"));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("graph serializes")
    }

    pub fn from_json(text: &str) -> serde_json::Result<Self> {
        serde_json::from_str(text)
    }

    /// Graphviz rendering, one color per flow type.
    pub fn to_dot(&self) -> String {
        let mut out = format!("digraph \"{}\" {{\n  node [shape=box, fontname=monospace];\n", escape_dot(&self.function));
        for n in &self.nodes {
            let _ = writeln!(
                out,
                "  n{} [label=\"#{} bb{}\\l{}\\l\"];",
                n.id,
                n.id,
                n.block,
                escape_dot(&n.text).replace("; ", "\\l")
            );
        }
        for e in &self.edges {
            let _ = writeln!(
                out,
                "  n{} -> n{} [color={}, label=\"{}\"];",
                e.src,
                e.dst,
                e.flow.dot_color(),
                e.flow.name()
            );
        }
        out.push_str("}\n");
        out
    }
}

pub(crate) fn escape_dot(s: &str) -> String {
    s.replace('\\', "\\\\").replace('"', "\\\"")
}

/// Definition sites `(block, instruction)` reaching the entry of each block.
pub fn reaching_definitions(f: &FunctionIR) -> BTreeMap<BlockId, BTreeSet<(BlockId, usize)>> {
    let mut gen: BTreeMap<BlockId, Vec<(String, BlockId, usize)>> = BTreeMap::new();
    let mut killed_names: BTreeMap<BlockId, BTreeSet<String>> = BTreeMap::new();
    let mut def_name: BTreeMap<(BlockId, usize), Vec<String>> = BTreeMap::new();
    for (&id, block) in &f.blocks {
        let mut last: BTreeMap<String, usize> = BTreeMap::new();
        for (i, instr) in block.instructions.iter().enumerate() {
            let defs = def_use(instr).defs;
            for d in &defs {
                last.insert(d.clone(), i);
            }
            def_name.insert((id, i), defs.into_iter().collect());
        }
        killed_names.insert(id, last.keys().cloned().collect());
        gen.insert(id, last.into_iter().map(|(n, i)| (n, id, i)).collect());
    }
    let preds = f.predecessors();
    let mut reach_in: BTreeMap<BlockId, BTreeSet<(BlockId, usize)>> =
        f.blocks.keys().map(|&id| (id, BTreeSet::new())).collect();
    let mut reach_out = reach_in.clone();
    let mut changed = true;
    while changed {
        changed = false;
        for &id in f.blocks.keys() {
            let inn: BTreeSet<(BlockId, usize)> =
                preds[&id].iter().flat_map(|p| reach_out[p].iter().copied()).collect();
            let kills = &killed_names[&id];
            let mut out: BTreeSet<(BlockId, usize)> = inn
                .iter()
                .filter(|site| !def_name[site].iter().any(|n| kills.contains(n)))
                .copied()
                .collect();
            out.extend(gen[&id].iter().map(|(_, b, i)| (*b, *i)));
            reach_in.insert(id, inn);
            if out != reach_out[&id] {
                reach_out.insert(id, out);
                changed = true;
            }
        }
    }
    reach_in
}

/// Cross-block `(def site, use site)` pairs: a definition in one block
/// reaching an upward-exposed use in another.
pub fn cross_block_def_use(f: &FunctionIR) -> BTreeSet<((BlockId, usize), (BlockId, usize))> {
    let reach_in = reaching_definitions(f);
    let mut out = BTreeSet::new();
    for (&id, block) in &f.blocks {
        let mut defined_here: BTreeSet<String> = BTreeSet::new();
        for (j, instr) in block.instructions.iter().enumerate() {
            let du = def_use(instr);
            for u in du.uses.iter().filter(|u| !defined_here.contains(*u)) {
                for &(db, di) in &reach_in[&id] {
                    if db == id {
                        continue;
                    }
                    if def_use(&f.blocks[&db].instructions[di]).defs.contains(u) {
                        out.insert(((db, di), (id, j)));
                    }
                }
            }
            defined_here.extend(du.defs);
        }
    }
    out
}

/// Connects slices with flow-typed edges.
///
/// For a CFG edge between two single-slice blocks the slices are joined by a
/// sequential (unconditional) or jump (conditional) edge. Otherwise an
/// unconditional edge fans out from every slice of the source block to every
/// slice of the target, and a conditional edge fans out from the slice that
/// holds the jump only. Data-dependence edges follow reaching definitions
/// across blocks.
pub fn build_graph(f: &FunctionIR, slices: &[Slice]) -> SliceGraph {
    let mut by_block: BTreeMap<BlockId, Vec<&Slice>> = BTreeMap::new();
    for s in slices {
        by_block.entry(s.block).or_default().push(s);
    }
    let mut edges: BTreeSet<GraphEdge> = BTreeSet::new();
    let mut add = |src: usize, dst: usize, flow| {
        if src != dst {
            edges.insert(GraphEdge { src, dst, flow });
        }
    };
    for (&id, block) in &f.blocks {
        let Some(from) = by_block.get(&id) else { continue };
        for &(target, kind) in &block.out_edges {
            let Some(to) = by_block.get(&target) else { continue };
            if from.len() == 1 && to.len() == 1 {
                let flow = match kind {
                    EdgeKind::Unconditional => FlowType::Sequential,
                    EdgeKind::Conditional => FlowType::Jump,
                };
                add(from[0].id, to[0].id, flow);
                continue;
            }
            match kind {
                EdgeKind::Unconditional => {
                    for s in from {
                        for t in to {
                            add(s.id, t.id, FlowType::SeqParallel);
                        }
                    }
                }
                EdgeKind::Conditional => {
                    let jump_at = block.instructions.len().saturating_sub(1);
                    for s in from.iter().filter(|s| s.contains(jump_at)) {
                        for t in to {
                            add(s.id, t.id, FlowType::JumpParallel);
                        }
                    }
                }
            }
        }
    }
    for ((db, di), (ub, uj)) in cross_block_def_use(f) {
        let (Some(ds), Some(us)) = (by_block.get(&db), by_block.get(&ub)) else { continue };
        for d in ds.iter().filter(|s| s.contains(di)) {
            for u in us.iter().filter(|s| s.contains(uj)) {
                add(d.id, u.id, FlowType::DataDependence);
            }
        }
    }
    SliceGraph {
        function: f.name.clone(),
        nodes: slices.to_vec(),
        edges: edges.into_iter().collect(),
    }
}

type Profile = Vec<(usize, FlowType)>;

/// Merges nodes with equal token sequences and equal typed predecessor and
/// successor multisets, repeating until no pair qualifies. The smallest id
/// of each group survives.
pub fn merge_duplicates(g: &SliceGraph) -> SliceGraph {
    let mut g = g.clone();
    loop {
        let mut preds: BTreeMap<usize, Profile> = BTreeMap::new();
        let mut succs: BTreeMap<usize, Profile> = BTreeMap::new();
        for e in &g.edges {
            preds.entry(e.dst).or_default().push((e.src, e.flow));
            succs.entry(e.src).or_default().push((e.dst, e.flow));
        }
        let mut groups: BTreeMap<(&[Token], Profile, Profile), Vec<usize>> = BTreeMap::new();
        for n in &g.nodes {
            let mut p = preds.remove(&n.id).unwrap_or_default();
            let mut s = succs.remove(&n.id).unwrap_or_default();
            p.sort_unstable();
            s.sort_unstable();
            groups.entry((n.tokens.as_slice(), p, s)).or_default().push(n.id);
        }
        let mut rename: BTreeMap<usize, usize> = BTreeMap::new();
        for ids in groups.values().filter(|ids| ids.len() > 1) {
            let keep = *ids.iter().min().expect("non-empty");
            for &other in ids.iter().filter(|&&i| i != keep) {
                rename.insert(other, keep);
            }
        }
        if rename.is_empty() {
            return g;
        }
        g.nodes.retain(|n| !rename.contains_key(&n.id));
        let edges: BTreeSet<GraphEdge> = g
            .edges
            .iter()
            .map(|e| GraphEdge {
                src: *rename.get(&e.src).unwrap_or(&e.src),
                dst: *rename.get(&e.dst).unwrap_or(&e.dst),
                flow: e.flow,
            })
            .filter(|e| e.src != e.dst)
            .collect();
        g.edges = edges.into_iter().collect();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sir::parse_sir;
    use crate::slicer::slice_function;

    fn graph(text: &str) -> SliceGraph {
        let f = parse_sir(text).unwrap().remove(0);
        build_graph(&f, &slice_function(&f))
    }

    fn typed(g: &SliceGraph) -> Vec<(usize, usize, FlowType)> {
        g.edges.iter().map(|e| (e.src, e.dst, e.flow)).collect()
    }

    #[test]
    fn single_slice_blocks_sequential() {
        let g = graph("func f\nblock 0\n  goto\nblock 1\n  ret\nedge 0 -> 1 uncond\nendfunc\n");
        assert_eq!(typed(&g), vec![(0, 1, FlowType::Sequential)]);
    }

    #[test]
    fn single_block_has_no_edges() {
        let g = graph("func f\nblock 0\n  mov #1, , g:a\n  mov #2, , g:b\nendfunc\n");
        assert_eq!(g.nodes.len(), 2);
        assert!(g.edges.is_empty());
    }

    #[test]
    fn data_dependence_across_blocks() {
        let g = graph(
            "func f\nblock 0\n  mov #1, , r:rbx\n  mov #2, , g:a\n  goto\nblock 1\n  ret r:rbx\nedge 0 -> 1 uncond\nendfunc\n",
        );
        // block 0 slices: {0} rbx (unused in block), {1}, {2}; block 1: {3}
        assert!(typed(&g).contains(&(0, 3, FlowType::DataDependence)));
        assert!(typed(&g).contains(&(1, 3, FlowType::SeqParallel)));
        assert!(!typed(&g).contains(&(1, 3, FlowType::DataDependence)));
        g.validate().unwrap();
    }

    #[test]
    fn merge_identical_neighborhoods() {
        let mut g = graph(
            "func f\nblock 0\n  goto\nblock 1\n  mov #1, , g:a\n  mov #1, , g:a\n  goto\nblock 2\n  ret\nedge 0 -> 1 uncond\nedge 1 -> 2 uncond\nendfunc\n",
        );
        assert_eq!(g.nodes.len(), 5);
        let merged = merge_duplicates(&g);
        assert_eq!(merged.nodes.len(), 4);
        assert_eq!(merge_duplicates(&merged), merged);
        // different edge types keep them apart
        g.edges.retain(|e| !(e.src == 0 && e.dst == 2));
        g.edges.push(GraphEdge { src: 0, dst: 2, flow: FlowType::JumpParallel });
        g.edges.sort();
        assert_eq!(merge_duplicates(&g), g);
    }

    #[test]
    fn distinct_chain_unchanged() {
        let g = graph(
            "func f\nblock 0\n  mov #1, , g:a\n  goto\nblock 1\n  mov #2, , g:b\n  goto\nblock 2\n  ret\nedge 0 -> 1 uncond\nedge 1 -> 2 uncond\nendfunc\n",
        );
        assert_eq!(merge_duplicates(&g), g);
    }

    #[test]
    fn dot_and_json() {
        let g = graph("func f\nblock 0\n  goto\nblock 1\n  ret\nedge 0 -> 1 uncond\nendfunc\n");
        assert!(g.to_dot().contains("n0 -> n1 [color=black"));
        assert_eq!(SliceGraph::from_json(&g.to_json()).unwrap(), g);
    }
}
