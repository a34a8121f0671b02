//! Seeded random SIR generators shared by the property and acceptance tests.
#![allow(dead_code)]

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use slicegraph::sir::{parse_sir, BasicBlock, FunctionIR};

const DEF_CANDIDATES: [&str; 9] = [
    "r:rax", "r:rbx", "r:rcx", "r:rdi", "r:rsi", "e:zf", "g:total", "l:var_8", "s:arg_0",
];
const READ_ONLY: [&str; 3] = ["r:rdx", "g:stdin", "#4"];
const BINOPS: [&str; 5] = ["add", "sub", "xor", "and", "imul"];
const CALLEES: [&str; 4] = ["free", "strlen", "puts", "malloc"];

fn pick<'a, R: Rng>(rng: &mut R, xs: &[&'a str]) -> &'a str {
    xs.choose(rng).copied().expect("non-empty")
}

/// One instruction line writing one of `defs`.
fn instruction<R: Rng>(rng: &mut R, defs: &[&str]) -> String {
    let src = |rng: &mut R| {
        if rng.gen_bool(0.6) {
            pick(rng, defs).to_string()
        } else {
            pick(rng, &READ_ONLY).to_string()
        }
    };
    let dest = pick(rng, defs);
    match rng.gen_range(0..10) {
        0..=3 => format!("{} {}, {}, {dest}", pick(rng, &BINOPS), src(rng), src(rng)),
        4..=6 => format!("mov {}, , {dest}", src(rng)),
        7 => format!("cmp {}, {}, {dest}", src(rng), src(rng)),
        8 => format!("call fn:{}({}), , {dest}", pick(rng, &CALLEES), src(rng)),
        _ => format!("mov #{}, , {dest}", rng.gen_range(0..4)),
    }
}

fn def_pool<R: Rng>(rng: &mut R, size: usize) -> Vec<&'static str> {
    let mut pool = DEF_CANDIDATES.to_vec();
    pool.shuffle(rng);
    pool.truncate(size);
    pool
}

/// A lone block of up to `max_len` instructions writing at most `max_defs`
/// distinct names.
pub fn random_block(seed: u64, max_len: usize, max_defs: usize) -> BasicBlock {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = rng.gen_range(1..=max_defs);
    let defs = def_pool(&mut rng, size);
    let n = rng.gen_range(0..=max_len);
    let mut text = String::from("func b\nblock 0\n");
    for _ in 0..n {
        text.push_str("  ");
        text.push_str(&instruction(&mut rng, &defs));
        text.push('\n');
    }
    text.push_str("endfunc\n");
    let mut f = parse_sir(&text).expect("generated block parses").remove(0);
    f.blocks.remove(&0).expect("block 0")
}

/// A function of 1..=`max_blocks` blocks with random conditional and
/// unconditional edges (loops included) and up to `max_len` instructions
/// per block.
pub fn random_function(seed: u64, max_blocks: u32, max_len: usize) -> FunctionIR {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let defs = def_pool(&mut rng, 6);
    let n = rng.gen_range(1..=max_blocks);
    let mut text = format!("func rand{seed}\n");
    let mut edges = Vec::new();
    for b in 0..n {
        text.push_str(&format!("block {b} line=rand.c:{}\n", 10 + b));
        for _ in 0..rng.gen_range(0..=max_len) {
            text.push_str(&format!("  {} ; line=rand.c:{}\n", instruction(&mut rng, &defs), 10 + b));
        }
        if b + 1 == n && rng.gen_bool(0.5) {
            text.push_str("  ret r:rax\n");
            continue;
        }
        if rng.gen_bool(0.5) {
            let flag = *defs.iter().find(|d| d.starts_with("e:")).unwrap_or(&"r:rax");
            text.push_str(&format!("  jz {flag}, #0\n"));
            edges.push(format!("edge {b} -> {} cond", rng.gen_range(0..n)));
        }
        let next = if b + 1 < n && rng.gen_bool(0.8) { b + 1 } else { rng.gen_range(0..n) };
        edges.push(format!("edge {b} -> {next} uncond"));
    }
    for e in edges {
        text.push_str(&e);
        text.push('\n');
    }
    text.push_str("endfunc\n");
    let f = parse_sir(&text).expect("generated function parses").remove(0);
    f.validate().expect("generated function is valid");
    f
}

/// Distinct names written by the block.
pub fn defined_names(block: &BasicBlock) -> BTreeSet<String> {
    block.instructions.iter().flat_map(|i| i.def_use().defs).collect()
}
