//! Seeded semantics-preserving rewrites that stand in for compiler variance.
//!
//! * `a` swaps adjacent instructions that are data-independent and belong
//!   to different slices,
//! * `b` renames scratch registers by a permutation and stack locals by a
//!   fresh offset,
//! * `c` inserts flag definitions at points where the flag is dead,
//! * `d` repeats a self-contained store slice right after itself.
//!
//! Rewrites run in the order b, d, a, c.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::preprocess::{liveness, ArchTable};
use crate::sir::{def_use, BasicBlock, FunctionIR, Instruction, JumpKind, Operand, OperandKind};
use crate::slicer::slice_block;

const FLAGS: [&str; 5] = ["zf", "cf", "sf", "of", "pf"];
const FLAG_SETTERS: [&str; 5] = ["setz", "cfadd", "sets", "ofadd", "setp"];
const RETURN_REGISTERS: [&str; 5] = ["rax", "eax", "x0", "r0", "v0"];

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PerturbOps {
    pub swap: bool,
    pub rename: bool,
    pub dead_flags: bool,
    pub duplicate: bool,
}

impl PerturbOps {
    pub const NONE: PerturbOps = PerturbOps {
        swap: false,
        rename: false,
        dead_flags: false,
        duplicate: false,
    };
    pub const ALL: PerturbOps = PerturbOps {
        swap: true,
        rename: true,
        dead_flags: true,
        duplicate: true,
    };

    /// Parses a set of letters from `abcd`.
    pub fn parse(s: &str) -> Result<Self, String> {
        let mut ops = Self::NONE;
        for c in s.chars() {
            match c {
                'a' => ops.swap = true,
                'b' => ops.rename = true,
                'c' => ops.dead_flags = true,
                'd' => ops.duplicate = true,
                _ => return Err(format!("unknown perturbation {c:?} (expected letters from abcd)")),
            }
        }
        Ok(ops)
    }

    pub fn is_empty(&self) -> bool {
        *self == Self::NONE
    }
}

impl fmt::Display for PerturbOps {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (on, c) in [(self.swap, 'a'), (self.rename, 'b'), (self.dead_flags, 'c'), (self.duplicate, 'd')] {
            if on {
                write!(f, "{c}")?;
            }
        }
        Ok(())
    }
}

/// What a perturbation did, for tests and debugging.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PerturbLog {
    /// Operand-name renames (registers and locals).
    pub renames: BTreeMap<String, String>,
    pub swaps: usize,
    pub flags_inserted: usize,
    pub duplicated: usize,
}

pub fn perturb(f: &FunctionIR, seed: u64, ops: PerturbOps) -> FunctionIR {
    perturb_with_log(f, seed, ops).0
}

pub fn perturb_with_log(f: &FunctionIR, seed: u64, ops: PerturbOps) -> (FunctionIR, PerturbLog) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = f.clone();
    let mut log = PerturbLog::default();
    if ops.rename {
        log.renames = rename(&mut out, &mut rng);
    }
    if ops.duplicate {
        log.duplicated = duplicate_slices(&mut out, &mut rng);
    }
    if ops.swap {
        log.swaps = swap_independent(&mut out, &mut rng);
    }
    if ops.dead_flags {
        log.flags_inserted = insert_dead_flags(&mut out, &mut rng);
    }
    for b in out.blocks.values_mut() {
        b.renumber();
    }
    (out, log)
}

fn is_operator(c: char) -> bool {
    matches!(c, '+' | '-' | '*' | '/' | '(' | ')' | '[' | ']' | '&' | '|' | '^' | '<' | '>' | '!' | '~')
}

/// Rewrites every identifier leaf of a (possibly compound) operand name.
fn map_leaves(name: &str, map: &BTreeMap<String, String>) -> String {
    let mut out = String::with_capacity(name.len());
    let mut leaf = String::new();
    let flush = |leaf: &mut String, out: &mut String| {
        out.push_str(map.get(leaf.as_str()).map(String::as_str).unwrap_or(leaf));
        leaf.clear();
    };
    for c in name.chars() {
        if is_operator(c) {
            flush(&mut leaf, &mut out);
            out.push(c);
        } else {
            leaf.push(c);
        }
    }
    flush(&mut leaf, &mut out);
    out
}

fn leaves(name: &str) -> impl Iterator<Item = &str> {
    name.split(is_operator).filter(|l| !l.is_empty() && !l.starts_with('#'))
}

fn visit_operands<F: FnMut(&mut Operand)>(f: &mut FunctionIR, mut visit: F) {
    fn walk<F: FnMut(&mut Operand)>(op: &mut Operand, visit: &mut F) {
        visit(op);
        for a in &mut op.args {
            walk(a, visit);
        }
    }
    for b in f.blocks.values_mut() {
        for i in &mut b.instructions {
            for op in [&mut i.left, &mut i.right, &mut i.dest].into_iter().flatten() {
                walk(op, &mut visit);
            }
        }
    }
}

fn collect_names(f: &FunctionIR, kind: OperandKind) -> BTreeSet<String> {
    fn walk(op: &Operand, kind: OperandKind, out: &mut BTreeSet<String>) {
        if op.kind == kind {
            out.extend(leaves(&op.name).map(str::to_string));
        }
        for a in &op.args {
            walk(a, kind, out);
        }
    }
    let mut out = BTreeSet::new();
    for i in f.blocks.values().flat_map(|b| &b.instructions) {
        for op in i.operands() {
            walk(op, kind, &mut out);
        }
    }
    out
}

fn rename(f: &mut FunctionIR, rng: &mut ChaCha8Rng) -> BTreeMap<String, String> {
    let table = ArchTable::default();
    let fixed: BTreeSet<String> = table
        .arches()
        .flat_map(|a| table.args(a).unwrap_or_default().iter().cloned())
        .chain(RETURN_REGISTERS.iter().map(|s| s.to_string()))
        .collect();
    let regs: Vec<String> = collect_names(f, OperandKind::Register).into_iter().filter(|r| !fixed.contains(r)).collect();
    let mut shuffled = regs.clone();
    shuffled.shuffle(rng);
    let reg_map: BTreeMap<String, String> = regs.into_iter().zip(shuffled).filter(|(a, b)| a != b).collect();

    // locals keep their base name and get a fresh, consistent offset
    let locals = collect_names(f, OperandKind::LocalVar);
    let taken: BTreeSet<&str> = locals.iter().map(String::as_str).collect();
    let mut local_map = BTreeMap::new();
    let shift = 8 * rng.gen_range(1..=16u32);
    for l in &locals {
        if let Some((base, digits)) = l.rsplit_once('_') {
            if let Ok(n) = digits.parse::<u32>() {
                let mut k = n + shift;
                while taken.contains(format!("{base}_{k}").as_str())
                    || local_map.values().any(|v: &String| *v == format!("{base}_{k}"))
                {
                    k += 8;
                }
                local_map.insert(l.clone(), format!("{base}_{k}"));
            }
        }
    }
    // a rename onto a name that itself moves is fine: maps apply at once

    visit_operands(f, |op| match op.kind {
        OperandKind::Register if !reg_map.is_empty() => op.name = map_leaves(&op.name, &reg_map),
        OperandKind::LocalVar if !local_map.is_empty() => op.name = map_leaves(&op.name, &local_map),
        _ => {}
    });
    reg_map.into_iter().chain(local_map).collect()
}

fn is_barrier(i: &Instruction) -> bool {
    i.is_call || i.jump != JumpKind::None
}

fn independent(a: &Instruction, b: &Instruction) -> bool {
    let (da, db) = (def_use(a), def_use(b));
    da.defs.is_disjoint(&db.uses) && da.defs.is_disjoint(&db.defs) && da.uses.is_disjoint(&db.defs)
}

fn swap_independent(f: &mut FunctionIR, rng: &mut ChaCha8Rng) -> usize {
    let mut swaps = 0;
    for b in f.blocks.values_mut() {
        let n = b.instructions.len();
        if n < 2 {
            continue;
        }
        for _ in 0..n {
            let i = rng.gen_range(0..n - 1);
            let (x, y) = (&b.instructions[i], &b.instructions[i + 1]);
            if is_barrier(x) || is_barrier(y) || !independent(x, y) {
                continue;
            }
            b.renumber();
            let shares = slice_block(b).iter().any(|s| s.contains(i) && s.contains(i + 1));
            if shares || !rng.gen_bool(0.5) {
                continue;
            }
            b.instructions.swap(i, i + 1);
            swaps += 1;
        }
        b.renumber();
    }
    swaps
}

/// Contiguous store slices that can be recomputed in place: no member
/// redefines an upward-exposed input of the slice and no intermediate
/// value is live after the sink.
fn duplicable_slices(b: &BasicBlock, live_after: &[BTreeSet<String>]) -> Vec<(usize, usize)> {
    let slices = slice_block(b);
    if slices.len() < 2 {
        return Vec::new();
    }
    let mut out = Vec::new();
    for s in &slices {
        let (first, last) = (s.instr_indices[0], *s.instr_indices.last().expect("non-empty slice"));
        if last - first + 1 != s.instr_indices.len() {
            continue;
        }
        let sink = &b.instructions[last];
        let stores = sink.dest.as_ref().is_some_and(|d| d.kind == OperandKind::GlobalVar);
        if !stores || is_barrier(sink) {
            continue;
        }
        let mut defined = BTreeSet::new();
        let mut exposed = BTreeSet::new();
        let mut inner_defs = BTreeSet::new();
        for (k, &i) in s.instr_indices.iter().enumerate() {
            let du = def_use(&b.instructions[i]);
            exposed.extend(du.uses.iter().filter(|u| !defined.contains(*u)).cloned());
            defined.extend(du.defs.iter().cloned());
            if k + 1 < s.instr_indices.len() {
                inner_defs.extend(du.defs);
            }
        }
        if !defined.is_disjoint(&exposed) || !inner_defs.is_disjoint(&live_after[last]) {
            continue;
        }
        out.push((first, last));
    }
    out
}

fn duplicate_slices(f: &mut FunctionIR, rng: &mut ChaCha8Rng) -> usize {
    let live = liveness(f);
    let mut count = 0;
    for (id, b) in f.blocks.iter_mut() {
        let candidates = duplicable_slices(b, &live.live_after[id]);
        if let Some(&(first, last)) = candidates.choose(rng) {
            if !rng.gen_bool(0.7) {
                continue;
            }
            let copy: Vec<Instruction> = b.instructions[first..=last].to_vec();
            b.instructions.splice(last + 1..last + 1, copy);
            b.renumber();
            count += 1;
        }
    }
    count
}

fn insert_dead_flags(f: &mut FunctionIR, rng: &mut ChaCha8Rng) -> usize {
    let live = liveness(f);
    let mut inserted = 0;
    for (id, b) in f.blocks.iter_mut() {
        let n = b.instructions.len();
        // positions 0..=n, but never after a trailing jump
        let limit = if b.instructions.last().is_some_and(|i| i.jump != JumpKind::None) { n - 1 } else { n };
        let wanted = rng.gen_range(0..=2usize);
        let mut plan: Vec<(usize, Instruction)> = Vec::new();
        for _ in 0..wanted {
            let pos = rng.gen_range(0..=limit);
            let live_here: &BTreeSet<String> = if pos == 0 { &live.live_in[id] } else { &live.live_after[id][pos - 1] };
            let k = rng.gen_range(0..FLAGS.len());
            if live_here.contains(FLAGS[k]) {
                continue;
            }
            // read something already live so no dead definition is revived
            let regs: Vec<&String> = live_here.iter().filter(|r| !FLAGS.contains(&r.as_str()) && !r.contains(':')).collect();
            let src = match regs.choose(rng) {
                Some(r) if is_simple_register(r, b) => Operand::new(OperandKind::Register, r.as_str()),
                _ => Operand::num(0),
            };
            let near = b.instructions.get(pos).or_else(|| b.instructions.last());
            let line = near.and_then(|i| i.source_line.clone()).or_else(|| b.source_line.clone());
            let instr = Instruction::new(FLAG_SETTERS[k], Some(src), Some(Operand::num(rng.gen_range(0..2))), Some(Operand::flag(FLAGS[k])))
                .with_line(line);
            plan.push((pos, instr));
        }
        plan.sort_by_key(|(p, _)| std::cmp::Reverse(*p));
        for (pos, instr) in plan {
            b.instructions.insert(pos, instr);
            inserted += 1;
        }
        b.renumber();
    }
    inserted
}

/// True if `name` is used as a plain register somewhere in the block.
fn is_simple_register(name: &str, b: &BasicBlock) -> bool {
    b.instructions
        .iter()
        .flat_map(|i| i.operands())
        .any(|o| o.kind == OperandKind::Register && o.name == name)
}
