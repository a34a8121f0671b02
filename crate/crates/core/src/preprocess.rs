//! Removal and preservation rules applied before slicing.
//!
//! An instruction whose only effect is to define operands that are dead
//! afterwards (redefined before any use on every path, or never used) is
//! deleted, iterating to a fixpoint. Calls, jumps, instructions without
//! definitions and memory stores always stay, as do register assignments
//! that set up a following call in the same block and assignments to the
//! architecture's argument registers.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use crate::sir::{def_use, BasicBlock, BlockId, FunctionIR, Instruction, JumpKind, OperandKind};

/// Built-in argument-register table, in the textual config format.
pub const DEFAULT_ARCH_TABLE: &str = "\
# architecture = argument registers, in call order
x64 = rdi, rsi, rdx, rcx, r8, r9
x86 =
arm32 = r0, r1, r2, r3
arm64 = x0, x1, x2, x3, x4, x5, x6, x7
mips32 = a0, a1, a2, a3
";

/// Architecture name to ordered argument-register list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArchTable {
    entries: BTreeMap<String, Vec<String>>,
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
#[error("arch table line {line}: {message}")]
pub struct ArchTableError {
    pub line: usize,
    pub message: String,
}

impl ArchTable {
    pub fn args(&self, arch: &str) -> Option<&[String]> {
        self.entries.get(arch).map(Vec::as_slice)
    }

    pub fn arches(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn insert(&mut self, arch: impl Into<String>, regs: Vec<String>) {
        self.entries.insert(arch.into(), regs);
    }
}

impl Default for ArchTable {
    fn default() -> Self {
        DEFAULT_ARCH_TABLE.parse().expect("built-in table parses")
    }
}

impl FromStr for ArchTable {
    type Err = ArchTableError;

    fn from_str(text: &str) -> Result<Self, Self::Err> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |message: &str| ArchTableError {
                line: i + 1,
                message: message.to_string(),
            };
            let (name, regs) = line.split_once('=').ok_or_else(|| err("expected `name = regs`"))?;
            let name = name.trim();
            if name.is_empty() || name.contains(char::is_whitespace) {
                return Err(err("invalid architecture name"));
            }
            let regs: Vec<String> = regs
                .split(',')
                .map(str::trim)
                .filter(|r| !r.is_empty())
                .map(str::to_string)
                .collect();
            if entries.insert(name.to_string(), regs).is_some() {
                return Err(err("duplicate architecture"));
            }
        }
        Ok(Self { entries })
    }
}

impl fmt::Display for ArchTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (name, regs) in &self.entries {
            writeln!(f, "{name} = {}", regs.join(", "))?;
        }
        Ok(())
    }
}

/// Live operand names per block boundary and after every instruction.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LivenessInfo {
    pub live_in: BTreeMap<BlockId, BTreeSet<String>>,
    pub live_out: BTreeMap<BlockId, BTreeSet<String>>,
    /// `live_after[b][i]` holds the names live right after instruction `i`.
    pub live_after: BTreeMap<BlockId, Vec<BTreeSet<String>>>,
}

/// Backward liveness to fixpoint over the CFG.
pub fn liveness(f: &FunctionIR) -> LivenessInfo {
    // upward-exposed uses and kills per block
    let mut gen: BTreeMap<BlockId, BTreeSet<String>> = BTreeMap::new();
    let mut kill: BTreeMap<BlockId, BTreeSet<String>> = BTreeMap::new();
    for (&id, block) in &f.blocks {
        let mut g = BTreeSet::new();
        let mut k = BTreeSet::new();
        for instr in &block.instructions {
            let du = def_use(instr);
            g.extend(du.uses.into_iter().filter(|u| !k.contains(u)));
            k.extend(du.defs);
        }
        gen.insert(id, g);
        kill.insert(id, k);
    }

    let mut live_in: BTreeMap<BlockId, BTreeSet<String>> =
        f.blocks.keys().map(|&id| (id, BTreeSet::new())).collect();
    let mut live_out = live_in.clone();
    let mut changed = true;
    while changed {
        changed = false;
        for (&id, block) in f.blocks.iter().rev() {
            let out: BTreeSet<String> = block
                .successors()
                .flat_map(|s| live_in[&s].iter().cloned())
                .collect();
            let mut inn = gen[&id].clone();
            inn.extend(out.iter().filter(|v| !kill[&id].contains(*v)).cloned());
            if inn != live_in[&id] {
                live_in.insert(id, inn);
                changed = true;
            }
            live_out.insert(id, out);
        }
    }

    let mut live_after = BTreeMap::new();
    for (&id, block) in &f.blocks {
        live_after.insert(id, live_after_block(block, &live_out[&id]));
    }
    LivenessInfo {
        live_in,
        live_out,
        live_after,
    }
}

fn live_after_block(block: &BasicBlock, out: &BTreeSet<String>) -> Vec<BTreeSet<String>> {
    let mut live = out.clone();
    let mut after = vec![BTreeSet::new(); block.instructions.len()];
    for (i, instr) in block.instructions.iter().enumerate().rev() {
        after[i] = live.clone();
        let du = def_use(instr);
        for d in &du.defs {
            live.remove(d);
        }
        live.extend(du.uses);
    }
    after
}

/// Indices of instructions in `block` protected by the call-setup rule: a
/// register assignment followed, before any other call, by a call with no
/// intervening redefinition of that register.
fn call_setup_protected(block: &BasicBlock) -> BTreeSet<usize> {
    let mut protected = BTreeSet::new();
    let instrs = &block.instructions;
    for (i, instr) in instrs.iter().enumerate() {
        let reg = match &instr.dest {
            Some(d) if d.kind == OperandKind::Register && !instr.is_call => d.name.as_str(),
            _ => continue,
        };
        for later in &instrs[i + 1..] {
            if later.is_call {
                protected.insert(i);
                break;
            }
            if def_use(later).defs.contains(reg) {
                break;
            }
        }
    }
    protected
}

fn always_kept(instr: &Instruction, arg_regs: &[String]) -> bool {
    if instr.is_call || instr.jump != JumpKind::None {
        return true;
    }
    match &instr.dest {
        None => true,
        Some(d) if d.kind.is_memory() => true,
        Some(d) if d.kind == OperandKind::Register => arg_regs.iter().any(|r| *r == d.name),
        Some(_) => false,
    }
}

/// Applies the removal and preservation rules until nothing changes.
/// `arg_regs` is the argument-register list of the function's architecture.
pub fn prune(f: &FunctionIR, arg_regs: &[String]) -> FunctionIR {
    let mut out = f.clone();
    loop {
        let live = liveness(&out);
        let mut removed_any = false;
        for (id, block) in out.blocks.iter_mut() {
            let after = &live.live_after[id];
            let protected = call_setup_protected(block);
            let keep: Vec<bool> = block
                .instructions
                .iter()
                .enumerate()
                .map(|(i, instr)| {
                    if always_kept(instr, arg_regs) || protected.contains(&i) {
                        return true;
                    }
                    let du = def_use(instr);
                    du.defs.is_empty() || du.defs.iter().any(|d| after[i].contains(d))
                })
                .collect();
            if keep.iter().all(|&k| k) {
                continue;
            }
            removed_any = true;
            let mut flags = keep.into_iter();
            block.instructions.retain(|_| flags.next().unwrap_or(true));
            block.renumber();
        }
        if !removed_any {
            return out;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sir::parse_sir;

    fn x64() -> Vec<String> {
        ArchTable::default().args("x64").unwrap().to_vec()
    }

    fn func(text: &str) -> FunctionIR {
        parse_sir(text).unwrap().remove(0)
    }

    fn texts(f: &FunctionIR, b: BlockId) -> Vec<String> {
        f.blocks[&b].instructions.iter().map(|i| i.text()).collect()
    }

    #[test]
    fn dead_flags_removed() {
        let f = func(
            "func f\nblock 0\n  cfadd r:rcx, #1, e:cf\n  setz r:rcx, #0, e:zf\n  mov r:rcx, , g:out\nendfunc\n",
        );
        assert_eq!(texts(&prune(&f, &x64()), 0), vec!["mov r:rcx, , g:out"]);
    }

    #[test]
    fn flag_used_in_successor_kept() {
        let f = func(
            "func f\nblock 0\n  setz r:rcx, #0, e:zf\n  goto\nblock 1\n  jz e:zf, #1\nblock 2\n  ret\nedge 0 -> 1 uncond\nedge 1 -> 2 cond\nendfunc\n",
        );
        assert_eq!(prune(&f, &x64()), f);
    }

    #[test]
    fn redefined_register_removed() {
        let f = func("func f\nblock 0\n  mov #1, , r:rax\n  mov #2, , r:rax\n  ret r:rax\nendfunc\n");
        assert_eq!(texts(&prune(&f, &x64()), 0), vec!["mov #2, , r:rax", "ret r:rax"]);
    }

    #[test]
    fn global_assignment_kept() {
        let f = func("func f\nblock 0\n  mov #22, , g:errno\n  ret\nendfunc\n");
        assert_eq!(prune(&f, &x64()), f);
    }

    #[test]
    fn call_setup_and_arg_registers_kept() {
        let f = func(
            "func f\nblock 0\n  mov #1, , r:r10\n  call fn:g()\n  mov #3, , r:rdi\n  mov #4, , r:r11\n  ret\nendfunc\n",
        );
        // r10 feeds the call, rdi is an argument register, r11 is dead
        assert_eq!(
            texts(&prune(&f, &x64()), 0),
            vec!["mov #1, , r:r10", "call fn:g()", "mov #3, , r:rdi", "ret"]
        );
        // without an argument table rdi goes too
        assert_eq!(prune(&f, &[]).blocks[&0].instructions.len(), 3);
    }

    #[test]
    fn transitive_removal_reaches_fixpoint() {
        let f = func(
            "func f\nblock 0\n  mov #1, , r:rbx\n  add r:rbx, #1, r:r12\n  setz r:r12, #0, e:zf\n  ret\nendfunc\n",
        );
        assert_eq!(texts(&prune(&f, &x64()), 0), vec!["ret"]);
    }

    #[test]
    fn loop_carried_use_is_live() {
        let f = func(
            "func f\nblock 0\n  mov #0, , r:rbx\n  goto\nblock 1\n  add r:rbx, #1, r:rbx\n  jnz r:rbx, #9\nblock 2\n  ret\nedge 0 -> 1 uncond\nedge 1 -> 1 cond\nedge 1 -> 2 uncond\nendfunc\n",
        );
        assert_eq!(prune(&f, &x64()), f);
    }

    #[test]
    fn no_dead_defs_is_identity() {
        let f = func("func f\nblock 0\n  mov r:rdi, , r:rax\n  ret r:rax\nendfunc\n");
        assert_eq!(prune(&f, &x64()), f);
    }

    #[test]
    fn arch_table_round_trip() {
        let t = ArchTable::default();
        assert_eq!(t.args("x86"), Some(&[][..]));
        let again: ArchTable = t.to_string().parse().unwrap();
        assert_eq!(again, t);
        assert!("x64 rdi".parse::<ArchTable>().is_err());
    }
}
