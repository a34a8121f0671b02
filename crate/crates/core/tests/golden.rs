//! Fixture functions against hand-derived golden files.

use std::fs;
use std::path::PathBuf;

use slicegraph::graphbuild::{build_graph, merge_duplicates, FlowType, SliceGraph};
use slicegraph::preprocess::{prune, ArchTable};
use slicegraph::sir::{parse_sir, FunctionIR};
use slicegraph::slicer::{slice_block, slice_function, slice_oracle};

fn fixture(name: &str) -> String {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name);
    fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn function(name: &str) -> FunctionIR {
    parse_sir(&fixture(name)).unwrap().remove(0)
}

fn x64() -> Vec<String> {
    ArchTable::default().args("x64").unwrap().to_vec()
}

fn edge_lines(g: &SliceGraph) -> Vec<String> {
    let mut v: Vec<String> = g.edges.iter().map(|e| format!("{} {} {}", e.src, e.dst, e.flow.name())).collect();
    v.sort();
    v
}

fn golden_lines(name: &str) -> Vec<String> {
    let mut v: Vec<String> = fixture(name).lines().filter(|l| !l.trim().is_empty()).map(str::to_string).collect();
    v.sort();
    v
}

fn graph(name: &str) -> SliceGraph {
    let f = prune(&function(name), &x64());
    build_graph(&f, &slice_function(&f))
}

#[test]
fn options_prune_matches_golden() {
    let pruned = prune(&function("options.sir"), &x64());
    let mut text = String::new();
    for b in pruned.blocks.values() {
        text.push_str(&format!("block {}\n", b.id));
        for i in &b.instructions {
            text.push_str(&i.text());
            text.push('\n');
        }
    }
    assert_eq!(text, fixture("options.pruned.txt"));
}

#[test]
fn options_slices_match_golden() {
    let f = prune(&function("options.sir"), &x64());
    let got: Vec<String> = slice_function(&f)
        .iter()
        .map(|s| {
            let idx: Vec<String> = s.instr_indices.iter().map(usize::to_string).collect();
            format!("{} {} {}", s.id, s.block, idx.join(","))
        })
        .collect();
    let want: Vec<String> = fixture("options.slices.txt").lines().map(str::to_string).collect();
    assert_eq!(got, want);
}

#[test]
fn options_edges_match_golden() {
    assert_eq!(edge_lines(&graph("options.sir")), golden_lines("options.edges.txt"));
}

#[test]
fn loop_slices_match_golden_and_oracle() {
    let f = function("loop_o3.sir");
    let block = &f.blocks[&1];
    let got: Vec<String> = slice_block(block)
        .iter()
        .map(|s| {
            let idx: Vec<String> = s.instr_indices.iter().map(usize::to_string).collect();
            format!("{} {}", s.block, idx.join(","))
        })
        .collect();
    let mut got = got;
    got.sort();
    assert_eq!(got, golden_lines("loop_o3.slices.txt"));
    assert_eq!(slice_block(block), slice_oracle(block).unwrap());
}

#[test]
fn rule_fixture_covers_every_flow_type() {
    let g = graph("rules.sir");
    assert_eq!(edge_lines(&g), golden_lines("rules.edges.txt"));
    for flow in FlowType::ALL {
        assert!(g.edges.iter().any(|e| e.flow == flow), "{} missing", flow.name());
    }
}

#[test]
fn merge_fixture_matches_golden() {
    let merged = merge_duplicates(&graph("merge.sir"));
    assert_eq!(edge_lines(&merged), golden_lines("merge.edges.txt"));
    assert_eq!(merge_duplicates(&merged), merged);
}

#[test]
fn same_text_under_different_edges_stays_apart() {
    // the two `mov r:rdi, , g:a` slices sit in different blocks with
    // different incoming flow types
    let f = parse_sir(
        "func f\nblock 0\n  jz r:rdi, #0\nblock 1\n  mov r:rdi, , g:a\n  mov r:rsi, , g:b\nblock 2\n  mov r:rdi, , g:a\n  ret\nedge 0 -> 1 cond\nedge 0 -> 2 uncond\nedge 1 -> 2 uncond\nendfunc\n",
    )
    .unwrap()
    .remove(0);
    let g = build_graph(&f, &slice_function(&f));
    let merged = merge_duplicates(&g);
    assert_eq!(merged.len(), g.len());
}

#[test]
fn graph_json_round_trips() {
    let g = graph("rules.sir");
    assert_eq!(SliceGraph::from_json(&g.to_json()).unwrap(), g);
    assert!(g.to_dot().contains("digraph"));
}
