//! Backward data-dependence slicing of basic blocks.
//!
//! Within a block, every use resolves to the closest preceding definition of
//! the same name. A sink is an instruction that defines nothing, is a call or
//! a jump, or whose definition is never read later in the block. Each slice
//! is the backward closure of one sink over these def-use links; slices may
//! share instructions.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sir::{def_use, BasicBlock, BlockId, FunctionIR, JumpKind};
use crate::tokenize::{normalize, Token};

/// Largest block accepted by [`slice_oracle`].
pub const ORACLE_MAX_INSTRUCTIONS: usize = 12;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Slice {
    pub id: usize,
    pub block: BlockId,
    /// Instruction positions within the block, increasing.
    pub instr_indices: Vec<usize>,
    /// Normalized tokens of the member instructions, in slice order.
    #[serde(default)]
    pub tokens: Vec<Token>,
    /// Instruction texts joined by `; `.
    #[serde(default)]
    pub text: String,
}

impl Slice {
    pub fn contains(&self, index: usize) -> bool {
        self.instr_indices.binary_search(&index).is_ok()
    }
}

/// `deps[j]` lists the earlier instructions whose definitions instruction `j`
/// reads.
pub fn block_dependencies(block: &BasicBlock) -> Vec<Vec<usize>> {
    let mut last_def: std::collections::HashMap<String, usize> = Default::default();
    let mut deps = Vec::with_capacity(block.instructions.len());
    for (j, instr) in block.instructions.iter().enumerate() {
        let du = def_use(instr);
        let mut d: Vec<usize> = du.uses.iter().filter_map(|u| last_def.get(u).copied()).collect();
        d.sort_unstable();
        d.dedup();
        deps.push(d);
        for name in du.defs {
            last_def.insert(name, j);
        }
    }
    deps
}

fn sinks(block: &BasicBlock, deps: &[Vec<usize>]) -> Vec<usize> {
    let mut read_later = vec![false; block.instructions.len()];
    for d in deps {
        for &i in d {
            read_later[i] = true;
        }
    }
    block
        .instructions
        .iter()
        .enumerate()
        .filter(|(i, instr)| {
            instr.is_call
                || instr.jump != JumpKind::None
                || def_use(instr).defs.is_empty()
                || !read_later[*i]
        })
        .map(|(i, _)| i)
        .collect()
}

/// Slices of one block, ordered by seed position. Ids start at zero; use
/// [`slice_function`] for function-unique ids and tokens.
pub fn slice_block(block: &BasicBlock) -> Vec<Slice> {
    let deps = block_dependencies(block);
    sinks(block, &deps)
        .into_iter()
        .enumerate()
        .map(|(id, seed)| {
            let mut member = vec![false; deps.len()];
            let mut stack = vec![seed];
            while let Some(i) = stack.pop() {
                if !member[i] {
                    member[i] = true;
                    stack.extend(deps[i].iter().copied());
                }
            }
            Slice {
                id,
                block: block.id,
                instr_indices: (0..deps.len()).filter(|&i| member[i]).collect(),
                tokens: Vec::new(),
                text: String::new(),
            }
        })
        .collect()
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("block has {0} instructions, oracle accepts at most {ORACLE_MAX_INSTRUCTIONS}")]
pub struct OracleSizeError(pub usize);

/// Reference slicer: builds the explicit def-use relation by scanning every
/// instruction pair, then takes reachability closures by relaxation over
/// bitmasks. Used to cross-check [`slice_block`].
pub fn slice_oracle(block: &BasicBlock) -> Result<Vec<Slice>, OracleSizeError> {
    let n = block.instructions.len();
    if n > ORACLE_MAX_INSTRUCTIONS {
        return Err(OracleSizeError(n));
    }
    let du: Vec<_> = block.instructions.iter().map(def_use).collect();
    // edge[j] bit i: j reads a value that i defines and nothing in between redefines
    let mut edge = vec![0u32; n];
    for j in 0..n {
        for i in 0..j {
            let reaches = du[i].defs.iter().any(|v| {
                du[j].uses.contains(v) && (i + 1..j).all(|k| !du[k].defs.contains(v))
            });
            if reaches {
                edge[j] |= 1 << i;
            }
        }
    }
    let mut reach: Vec<u32> = (0..n).map(|j| edge[j] | (1 << j)).collect();
    loop {
        let mut changed = false;
        for j in 0..n {
            let mut acc = reach[j];
            for (i, r) in reach.iter().enumerate() {
                if acc & (1 << i) != 0 {
                    acc |= r;
                }
            }
            if acc != reach[j] {
                reach[j] = acc;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    let mut out = Vec::new();
    for j in 0..n {
        let instr = &block.instructions[j];
        let consumed = (j + 1..n).any(|k| edge[k] & (1 << j) != 0);
        let is_sink =
            instr.is_call || instr.jump != JumpKind::None || du[j].defs.is_empty() || !consumed;
        if is_sink {
            out.push(Slice {
                id: out.len(),
                block: block.id,
                instr_indices: (0..n).filter(|&i| reach[j] & (1 << i) != 0).collect(),
                tokens: Vec::new(),
                text: String::new(),
            });
        }
    }
    Ok(out)
}

/// Slices every block (in block-id order), assigns function-unique ids and
/// fills tokens and text.
pub fn slice_function(f: &FunctionIR) -> Vec<Slice> {
    let mut out = Vec::new();
    for block in f.blocks.values() {
        for mut s in slice_block(block) {
            s.id = out.len();
            fill_content(&mut s, block);
            out.push(s);
        }
    }
    out
}

/// One node per non-empty block holding all of its instructions; the graph
/// input used when slicing is switched off.
pub fn whole_blocks(f: &FunctionIR) -> Vec<Slice> {
    let mut out = Vec::new();
    for block in f.blocks.values().filter(|b| !b.instructions.is_empty()) {
        let mut s = Slice {
            id: out.len(),
            block: block.id,
            instr_indices: (0..block.instructions.len()).collect(),
            tokens: Vec::new(),
            text: String::new(),
        };
        fill_content(&mut s, block);
        out.push(s);
    }
    out
}

pub fn fill_content(slice: &mut Slice, block: &BasicBlock) {
    let instrs: Vec<_> = slice.instr_indices.iter().map(|&i| &block.instructions[i]).collect();
    slice.tokens = instrs.iter().flat_map(|i| normalize(i)).collect();
    slice.text = instrs.iter().map(|i| i.text()).collect::<Vec<_>>().join("; ");
}
