//! Invariants checked on seeded random functions against brute-force oracles.

mod common;

use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;

use common::{defined_names, random_block, random_function};
use slicegraph::graphbuild::{build_graph, merge_duplicates, reaching_definitions};
use slicegraph::pipeline::corpus::{generate_program, lower, BuildConfig};
use slicegraph::pipeline::perturb::{perturb, perturb_with_log, PerturbOps};
use slicegraph::preprocess::{liveness, prune, ArchTable};
use slicegraph::sir::{def_use, BlockId, FunctionIR};
use slicegraph::slicer::{slice_block, slice_function, slice_oracle};

fn x64() -> Vec<String> {
    ArchTable::default().args("x64").unwrap().to_vec()
}

/// Is `name` read before being redefined on some path starting right after
/// instruction `i` of block `b`?
fn live_by_search(f: &FunctionIR, b: BlockId, i: usize, name: &str) -> bool {
    let scan = |block: BlockId, from: usize| -> Option<bool> {
        for instr in &f.blocks[&block].instructions[from..] {
            let du = def_use(instr);
            if du.uses.contains(name) {
                return Some(true);
            }
            if du.defs.contains(name) {
                return Some(false);
            }
        }
        None
    };
    if let Some(answer) = scan(b, i + 1) {
        return answer;
    }
    let mut seen = BTreeSet::new();
    let mut stack: Vec<BlockId> = f.blocks[&b].successors().collect();
    while let Some(next) = stack.pop() {
        if !seen.insert(next) {
            continue;
        }
        match scan(next, 0) {
            Some(true) => return true,
            Some(false) => {}
            None => stack.extend(f.blocks[&next].successors()),
        }
    }
    false
}

/// Sites whose definition reaches the entry of each block, by path search.
fn reaching_by_search(f: &FunctionIR) -> BTreeMap<BlockId, BTreeSet<(BlockId, usize)>> {
    let mut out: BTreeMap<BlockId, BTreeSet<(BlockId, usize)>> =
        f.blocks.keys().map(|&b| (b, BTreeSet::new())).collect();
    for (&b, block) in &f.blocks {
        for (i, instr) in block.instructions.iter().enumerate() {
            for name in def_use(instr).defs {
                let redefined_later = block.instructions[i + 1..]
                    .iter()
                    .any(|later| def_use(later).defs.contains(&name));
                if redefined_later {
                    continue;
                }
                let mut seen = BTreeSet::new();
                let mut stack: Vec<BlockId> = block.successors().collect();
                while let Some(c) = stack.pop() {
                    if !seen.insert(c) {
                        continue;
                    }
                    out.get_mut(&c).unwrap().insert((b, i));
                    let kills = c != b && defined_names(&f.blocks[&c]).contains(&name);
                    if !kills {
                        stack.extend(f.blocks[&c].successors());
                    }
                }
            }
        }
    }
    out
}

fn slice_texts(f: &FunctionIR) -> BTreeSet<(BlockId, String)> {
    slice_function(f).into_iter().map(|s| (s.block, s.text)).collect()
}

fn lowered(seed: u64, cfg: &str) -> FunctionIR {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let prog = generate_program(seed as usize, &mut rng);
    lower(&prog, &cfg.parse::<BuildConfig>().unwrap(), "f")
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn slicer_agrees_with_subset_oracle(seed in any::<u64>()) {
        let b = random_block(seed, 12, 4);
        prop_assert!(defined_names(&b).len() <= 4);
        prop_assert_eq!(slice_block(&b), slice_oracle(&b).unwrap());
    }

    #[test]
    fn slices_partition_nothing_twice_and_cover_sinks(seed in any::<u64>()) {
        let b = random_block(seed, 16, 6);
        let slices = slice_block(&b);
        for s in &slices {
            prop_assert!(s.instr_indices.windows(2).all(|w| w[0] < w[1]));
            prop_assert!(s.instr_indices.iter().all(|&i| i < b.instructions.len()));
        }
        // every instruction belongs to some slice
        let covered: BTreeSet<usize> = slices.iter().flat_map(|s| s.instr_indices.iter().copied()).collect();
        prop_assert_eq!(covered.len(), b.instructions.len());
    }

    #[test]
    fn liveness_agrees_with_path_search(seed in any::<u64>()) {
        let f = random_function(seed, 5, 6);
        let live = liveness(&f);
        let names: BTreeSet<String> = f.blocks.values().flat_map(|b| {
            b.instructions.iter().flat_map(|i| { let du = def_use(i); du.defs.into_iter().chain(du.uses) })
        }).collect();
        for (&b, block) in &f.blocks {
            for i in 0..block.instructions.len() {
                for name in &names {
                    prop_assert_eq!(
                        live.live_after[&b][i].contains(name),
                        live_by_search(&f, b, i, name),
                        "{} after {}:{}", name, b, i
                    );
                }
            }
        }
    }

    #[test]
    fn prune_is_idempotent_and_removes_only_dead_defs(seed in any::<u64>()) {
        let f = random_function(seed, 6, 8);
        let once = prune(&f, &x64());
        prop_assert_eq!(prune(&once, &x64()), once.clone());
        prop_assert!(once.validate().is_ok());
        // survivors keep their relative order within each block
        for (id, block) in &once.blocks {
            let original: Vec<String> = f.blocks[id].instructions.iter().map(|i| i.text()).collect();
            let mut cursor = original.iter();
            for instr in &block.instructions {
                let text = instr.text();
                prop_assert!(cursor.any(|t| *t == text));
            }
        }
    }

    #[test]
    fn reaching_definitions_agree_with_path_search(seed in any::<u64>()) {
        let f = random_function(seed, 6, 6);
        prop_assert_eq!(reaching_definitions(&f), reaching_by_search(&f));
    }

    #[test]
    fn merge_is_idempotent_and_never_grows(seed in any::<u64>()) {
        let f = prune(&random_function(seed, 6, 6), &x64());
        let g = build_graph(&f, &slice_function(&f));
        prop_assert!(g.validate().is_ok());
        let m = merge_duplicates(&g);
        prop_assert!(m.len() <= g.len());
        prop_assert!(m.edges.len() <= g.edges.len());
        prop_assert!(m.validate().is_ok());
        prop_assert_eq!(merge_duplicates(&m), m);
    }

    #[test]
    fn dead_flags_are_pruned_away(seed in any::<u64>(), prog in 0u64..500) {
        let f = prune(&lowered(prog, "x64-gcc-O1"), &x64());
        let noisy = perturb(&f, seed, PerturbOps::parse("c").unwrap());
        prop_assert_eq!(prune(&noisy, &x64()), prune(&f, &x64()));
    }

    #[test]
    fn swaps_keep_every_slice(seed in any::<u64>(), prog in 0u64..500) {
        let f = lowered(prog, "x64-clang-O2");
        let swapped = perturb(&f, seed, PerturbOps::parse("a").unwrap());
        let mut before: Vec<(BlockId, String)> = slice_function(&f).into_iter().map(|s| (s.block, s.text)).collect();
        let mut after: Vec<(BlockId, String)> = slice_function(&swapped).into_iter().map(|s| (s.block, s.text)).collect();
        before.sort();
        after.sort();
        prop_assert_eq!(before, after);
    }

    #[test]
    fn duplicates_add_copies_of_existing_slices(seed in any::<u64>(), prog in 0u64..500) {
        let f = lowered(prog, "x64-gcc-O3");
        let (dup, log) = perturb_with_log(&f, seed, PerturbOps::parse("d").unwrap());
        prop_assert_eq!(slice_texts(&dup), slice_texts(&f));
        prop_assert!(slice_function(&dup).len() >= slice_function(&f).len() + log.duplicated);
    }

    #[test]
    fn renames_preserve_graph_shape(seed in any::<u64>(), prog in 0u64..500) {
        let f = lowered(prog, "x64-gcc-O2");
        let renamed = perturb(&f, seed, PerturbOps::parse("b").unwrap());
        let (a, b) = (prune(&f, &x64()), prune(&renamed, &x64()));
        let (ga, gb) = (build_graph(&a, &slice_function(&a)), build_graph(&b, &slice_function(&b)));
        prop_assert_eq!(ga.len(), gb.len());
        prop_assert_eq!(&ga.edges, &gb.edges);
    }
}
