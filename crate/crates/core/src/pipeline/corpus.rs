//! Synthetic source programs and their lowering to SIR under different
//! build configurations.
//!
//! A [`SourceProgram`] is a small random structured function (assignments,
//! calls, global stores, conditionals, counted loops) whose statements carry
//! source lines. [`lower`] turns it into a [`FunctionIR`] the way a compiler
//! would: `O0` keeps every local in a stack slot, higher levels keep locals
//! in callee-saved registers and rotate loops; the compiler picks a few
//! idioms; the architecture fixes the register names. Each configuration
//! then gets its own seeded [`perturb`](super::perturb) profile.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::sir::{BasicBlock, BlockId, EdgeKind, FunctionIR, Instruction, Operand, OperandKind, SourceLine};

use super::perturb::PerturbOps;

/// One (architecture, compiler, optimization level) triple.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BuildConfig {
    pub arch: String,
    pub compiler: String,
    pub opt: String,
}

impl BuildConfig {
    pub fn new(arch: &str, compiler: &str, opt: &str) -> Self {
        Self {
            arch: arch.into(),
            compiler: compiler.into(),
            opt: opt.into(),
        }
    }

    pub fn opt_level(&self) -> u8 {
        self.opt.trim_start_matches('O').parse().unwrap_or(0)
    }

    /// Perturbations applied on top of lowering at this optimization level.
    pub fn perturb_ops(&self) -> PerturbOps {
        match self.opt_level() {
            0 | 1 => PerturbOps::parse("c").expect("valid"),
            2 => PerturbOps::parse("abc").expect("valid"),
            _ => PerturbOps::parse("abcd").expect("valid"),
        }
    }
}

impl fmt::Display for BuildConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}-{}", self.arch, self.compiler, self.opt)
    }
}

impl FromStr for BuildConfig {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.split('-').collect();
        match parts.as_slice() {
            [a, c, o] if arch_registers(a).is_some() && o.starts_with('O') => Ok(Self::new(a, c, o)),
            _ => Err(format!("expected arch-compiler-Olevel, got {s:?}")),
        }
    }
}

/// Configurations used by `gen-corpus --variants M`, in order. The first two
/// differ only in optimization level.
pub const VARIANT_ORDER: [&str; 8] = [
    "x64-gcc-O0",
    "x64-gcc-O3",
    "x64-clang-O2",
    "arm64-gcc-O1",
    "arm64-clang-O3",
    "mips32-gcc-O2",
    "arm32-clang-O0",
    "x86-gcc-O3",
];

pub fn variant_configs(m: usize) -> Vec<BuildConfig> {
    VARIANT_ORDER.iter().cycle().take(m.min(VARIANT_ORDER.len())).map(|s| s.parse().expect("valid")).collect()
}

pub struct ArchRegisters {
    pub args: &'static [&'static str],
    pub ret: &'static str,
    pub temps: [&'static str; 2],
    pub saved: &'static [&'static str],
}

pub fn arch_registers(arch: &str) -> Option<ArchRegisters> {
    Some(match arch {
        "x64" => ArchRegisters {
            args: &["rdi", "rsi", "rdx", "rcx", "r8", "r9"],
            ret: "rax",
            temps: ["rax", "r10"],
            saved: &["rbx", "rbp", "r12", "r13", "r14", "r15"],
        },
        "x86" => ArchRegisters {
            args: &[],
            ret: "eax",
            temps: ["eax", "edx"],
            saved: &["ebx", "esi", "edi", "ebp"],
        },
        "arm64" => ArchRegisters {
            args: &["x0", "x1", "x2", "x3", "x4", "x5", "x6", "x7"],
            ret: "x0",
            temps: ["x8", "x9"],
            saved: &["x19", "x20", "x21", "x22", "x23", "x24", "x25", "x26"],
        },
        "arm32" => ArchRegisters {
            args: &["r0", "r1", "r2", "r3"],
            ret: "r0",
            temps: ["r12", "lr"],
            saved: &["r4", "r5", "r6", "r7", "r8", "r9", "r10"],
        },
        "mips32" => ArchRegisters {
            args: &["a0", "a1", "a2", "a3"],
            ret: "v0",
            temps: ["t0", "t1"],
            saved: &["s0", "s1", "s2", "s3", "s4", "s5", "s6", "s7"],
        },
        _ => return None,
    })
}

const CALLEES: [&str; 48] = [
    "malloc", "free", "memcpy", "memset", "strlen", "strcmp", "strncpy", "printf", "fprintf", "snprintf",
    "fopen", "fclose", "fread", "fwrite", "fflush", "av_freep", "av_malloc", "av_log", "qsort", "bsearch",
    "realloc", "calloc", "getenv", "atoi", "strtol", "open", "close", "read", "write", "lseek",
    "pthread_mutex_lock", "pthread_mutex_unlock", "abort", "exit", "puts", "putchar", "sprintf", "sscanf",
    "strchr", "strrchr", "memcmp", "memmove", "time", "rand", "srand", "signal", "socket", "connect",
];

const GLOBALS: [&str; 40] = [
    "stdout", "stderr", "errno", "opts", "total", "count", "state", "config", "buffer", "cursor", "flags",
    "verbose", "table", "head", "tail", "limit", "offset", "base", "ctx", "log_level", "cache", "pool",
    "refcnt", "seed", "mode", "depth", "width", "height", "stride", "nbits", "crc", "key", "hash", "index",
    "queue", "stack", "timer", "clock", "debug", "retries",
];

const FORMATS: [&str; 12] = [
    "%d\\n", "%s\\n", "error: %s", "value=%d", "%x", "ok", "failed", "%s:%d", "size %zu", "%p", "done\\n",
    "%ld",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Cmp {
    Lt,
    Ge,
    Eq,
    Ne,
    Gt,
    Le,
}

impl Cmp {
    const ALL: [Cmp; 6] = [Cmp::Lt, Cmp::Ge, Cmp::Eq, Cmp::Ne, Cmp::Gt, Cmp::Le];

    /// Jump taken when the condition is false.
    fn skip_jump(self) -> &'static str {
        match self {
            Cmp::Lt => "jge",
            Cmp::Ge => "jl",
            Cmp::Eq => "jne",
            Cmp::Ne => "je",
            Cmp::Gt => "jle",
            Cmp::Le => "jg",
        }
    }

    fn set_opcode(self) -> &'static str {
        match self {
            Cmp::Lt => "setge",
            Cmp::Ge => "setl",
            Cmp::Eq => "setnz",
            Cmp::Ne => "setz",
            Cmp::Gt => "setle",
            Cmp::Le => "setg",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Val {
    Local(usize),
    Const(i64),
    Global(String),
    Str(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stmt {
    Assign { line: u32, dst: usize, op: Option<String>, a: Val, b: Val },
    Store { line: u32, global: String, src: Val },
    Call { line: u32, callee: String, args: Vec<Val>, dst: Option<usize> },
    If { line: u32, var: usize, cmp: Cmp, value: i64, then_body: Vec<Stmt>, else_body: Vec<Stmt> },
    Loop { line: u32, counter: usize, bound: i64, body: Vec<Stmt> },
    Return { line: u32, val: Val },
}

/// A random structured function. Locals `0..params` are the parameters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceProgram {
    pub id: String,
    pub file: String,
    pub first_line: u32,
    pub params: usize,
    pub locals: usize,
    pub body: Vec<Stmt>,
}

struct Gen<'r, R: Rng> {
    rng: &'r mut R,
    line: u32,
    locals: usize,
    callees: Vec<&'static str>,
    globals: Vec<&'static str>,
}

impl<R: Rng> Gen<'_, R> {
    fn next_line(&mut self) -> u32 {
        self.line += 1;
        self.line
    }

    fn fresh(&mut self) -> usize {
        self.locals += 1;
        self.locals - 1
    }

    fn operand(&mut self, scope: &[usize]) -> Val {
        match self.rng.gen_range(0..10) {
            0..=4 => Val::Const(*[1i64, 2, 4, 8, 16, 255, 3, 10, 24, 32].choose(self.rng).unwrap()),
            5..=6 => Val::Global(self.globals.choose(self.rng).unwrap().to_string()),
            _ => Val::Local(*scope.choose(self.rng).unwrap()),
        }
    }

    fn block(&mut self, scope: &mut Vec<usize>, count: usize, depth: usize) -> Vec<Stmt> {
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            let stmt = self.stmt(scope, depth);
            out.push(stmt);
        }
        out
    }

    fn stmt(&mut self, scope: &mut Vec<usize>, depth: usize) -> Stmt {
        let roll = self.rng.gen_range(0..100);
        let line = self.next_line();
        match roll {
            _ if roll < 35 || (roll >= 75 && depth >= 2) => {
                let a = Val::Local(*scope.choose(self.rng).unwrap());
                let dst = if self.rng.gen_bool(0.6) || scope.len() < 2 { self.fresh() } else { *scope.choose(self.rng).unwrap() };
                let op = if self.rng.gen_bool(0.2) {
                    None
                } else {
                    Some(["add", "sub", "and", "or", "xor", "shl", "mul"].choose(self.rng).unwrap().to_string())
                };
                let b = if op.is_some() { self.operand(scope) } else { Val::Const(0) };
                if !scope.contains(&dst) {
                    scope.push(dst);
                }
                Stmt::Assign { line, dst, op, a, b }
            }
            35..=59 => {
                let callee = self.callees.choose(self.rng).unwrap().to_string();
                let nargs = self.rng.gen_range(0..=3);
                let mut args: Vec<Val> = (0..nargs).map(|_| self.operand(scope)).collect();
                if matches!(callee.as_str(), "printf" | "puts" | "av_log" | "fprintf" | "snprintf" | "sprintf") {
                    args.insert(0, Val::Str(FORMATS.choose(self.rng).unwrap().to_string()));
                }
                let dst = if self.rng.gen_bool(0.5) {
                    let d = self.fresh();
                    scope.push(d);
                    Some(d)
                } else {
                    None
                };
                Stmt::Call { line, callee, args, dst }
            }
            60..=74 => Stmt::Store {
                line,
                global: self.globals.choose(self.rng).unwrap().to_string(),
                src: Val::Local(*scope.choose(self.rng).unwrap()),
            },
            75..=89 => {
                let var = *scope.choose(self.rng).unwrap();
                let cmp = *Cmp::ALL.choose(self.rng).unwrap();
                let value = self.rng.gen_range(0..32);
                let mut inner = scope.clone();
                let n = self.rng.gen_range(1..=3);
                let then_body = self.block(&mut inner, n, depth + 1);
                let mut inner = scope.clone();
                let n = if self.rng.gen_bool(0.5) { 0 } else { self.rng.gen_range(1..=2) };
                let else_body = self.block(&mut inner, n, depth + 1);
                Stmt::If { line, var, cmp, value, then_body, else_body }
            }
            _ => {
                let counter = self.fresh();
                let bound = self.rng.gen_range(2..=16);
                let mut inner = scope.clone();
                inner.push(counter);
                let n = self.rng.gen_range(1..=3);
                let body = self.block(&mut inner, n, depth + 1);
                Stmt::Loop { line, counter, bound, body }
            }
        }
    }
}

/// Draws a random program; `index` only names it.
pub fn generate_program<R: Rng>(index: usize, rng: &mut R) -> SourceProgram {
    let id = format!("src{index:04}");
    let first_line = 10;
    let params = rng.gen_range(1..=3);
    let mut callees: Vec<&str> = CALLEES.to_vec();
    callees.shuffle(rng);
    callees.truncate(rng.gen_range(4..=7));
    let mut globals: Vec<&str> = GLOBALS.to_vec();
    globals.shuffle(rng);
    globals.truncate(rng.gen_range(2..=4));
    let mut g = Gen {
        rng,
        line: first_line,
        locals: params,
        callees,
        globals,
    };
    let mut scope: Vec<usize> = (0..params).collect();
    let n = g.rng.gen_range(5..=9);
    let mut body = g.block(&mut scope, n, 0);
    let ret_line = g.next_line();
    let val = Val::Local(*scope.choose(g.rng).unwrap());
    body.push(Stmt::Return { line: ret_line, val });
    SourceProgram {
        file: format!("{id}.c"),
        id,
        first_line,
        params,
        locals: g.locals,
        body,
    }
}

struct Lowerer<'a> {
    cfg: &'a BuildConfig,
    regs: ArchRegisters,
    prog: &'a SourceProgram,
    blocks: Vec<BasicBlock>,
    cur: usize,
    stack_mode: bool,
}

fn reg(name: &str) -> Operand {
    Operand::new(OperandKind::Register, name)
}

fn num(v: i64) -> Operand {
    Operand::new(OperandKind::NumConst, format!("#{v}"))
}

impl Lowerer<'_> {
    fn line(&self, l: u32) -> Option<SourceLine> {
        Some(SourceLine {
            file: self.prog.file.clone(),
            line: l,
        })
    }

    fn emit(&mut self, line: u32, opcode: &str, l: Option<Operand>, r: Option<Operand>, d: Option<Operand>) {
        let ins = Instruction::new(opcode, l, r, d).with_line(self.line(line));
        self.blocks[self.cur].instructions.push(ins);
    }

    /// Jumps the compiler adds for layout carry no source line.
    fn emit_goto(&mut self) {
        self.blocks[self.cur].instructions.push(Instruction::new("goto", None, None, None));
    }

    fn new_block(&mut self, line: u32) -> usize {
        let id = self.blocks.len();
        let mut b = BasicBlock::new(id as BlockId);
        b.source_line = self.line(line);
        self.blocks.push(b);
        id
    }

    fn edge(&mut self, from: usize, to: usize, kind: EdgeKind) {
        self.blocks[from].out_edges.push((to as BlockId, kind));
    }

    fn is_gcc(&self) -> bool {
        self.cfg.compiler != "clang"
    }

    /// Home of a local: a stack slot at O0, else a callee-saved register
    /// (spilling to the stack when they run out).
    fn home(&self, v: usize) -> Operand {
        if self.cfg.arch == "x86" && v < self.prog.params && self.stack_mode {
            return Operand::new(OperandKind::StackVar, format!("arg_{}", 4 * v));
        }
        if !self.stack_mode && v < self.regs.saved.len() {
            return reg(self.regs.saved[v]);
        }
        Operand::new(OperandKind::LocalVar, format!("var_{}", 8 * (v + 1)))
    }

    /// Operand for a value; at O0 locals and globals are first loaded into
    /// temp `t`.
    fn value(&mut self, line: u32, v: &Val, t: usize) -> Operand {
        match v {
            Val::Const(c) => num(*c),
            Val::Str(s) => Operand::new(OperandKind::StrConst, s.clone()),
            Val::Global(g) => {
                let tmp = reg(self.regs.temps[t]);
                self.emit(line, "mov", Some(Operand::new(OperandKind::GlobalVar, g.clone())), None, Some(tmp.clone()));
                tmp
            }
            Val::Local(l) => {
                let home = self.home(*l);
                if self.stack_mode {
                    let tmp = reg(self.regs.temps[t]);
                    self.emit(line, "mov", Some(home), None, Some(tmp.clone()));
                    tmp
                } else {
                    home
                }
            }
        }
    }

    fn zero(&mut self, line: u32, dst: Operand) {
        if self.is_gcc() || dst.kind != OperandKind::Register {
            self.emit(line, "mov", Some(num(0)), None, Some(dst));
        } else {
            self.emit(line, "xor", Some(dst.clone()), Some(dst.clone()), Some(dst));
        }
    }

    /// Emits the skip jump for `var cmp value` (taken when false).
    fn branch(&mut self, line: u32, var: usize, cmp: Cmp, value: i64) {
        let a = self.value(line, &Val::Local(var), 0);
        if self.is_gcc() {
            self.emit(line, cmp.skip_jump(), Some(a), Some(num(value)), None);
        } else {
            let flag = Operand::new(OperandKind::Eflag, "sf");
            self.emit(line, cmp.set_opcode(), Some(a), Some(num(value)), Some(flag.clone()));
            self.emit(line, "jcnd", Some(flag), None, None);
        }
    }

    fn store_local(&mut self, line: u32, v: usize, src: Operand) {
        let home = self.home(v);
        if home != src {
            self.emit(line, "mov", Some(src), None, Some(home));
        }
    }

    fn stmt(&mut self, s: &Stmt) {
        match s {
            Stmt::Assign { line, dst, op, a, b } => {
                let line = *line;
                let av = self.value(line, a, 0);
                match op {
                    None => {
                        if self.stack_mode {
                            self.store_local(line, *dst, av);
                        } else {
                            let home = self.home(*dst);
                            self.emit(line, "mov", Some(av), None, Some(home));
                        }
                    }
                    Some(op) => {
                        let bv = self.value(line, b, 1);
                        let opcode = if op == "add" && bv.kind == OperandKind::NumConst && !self.is_gcc() {
                            "lea"
                        } else {
                            op.as_str()
                        };
                        if self.stack_mode {
                            let t = reg(self.regs.temps[0]);
                            self.emit(line, opcode, Some(av), Some(bv), Some(t.clone()));
                            self.store_local(line, *dst, t);
                        } else {
                            let home = self.home(*dst);
                            self.emit(line, opcode, Some(av), Some(bv), Some(home));
                        }
                    }
                }
            }
            Stmt::Store { line, global, src } => {
                let v = self.value(*line, src, 0);
                self.emit(*line, "mov", Some(v), None, Some(Operand::new(OperandKind::GlobalVar, global.clone())));
            }
            Stmt::Call { line, callee, args, dst } => {
                let line = *line;
                let mut call_args = Vec::new();
                for (k, a) in args.iter().enumerate() {
                    let v = self.value(line, a, 0);
                    let slot = match self.regs.args.get(k) {
                        Some(r) => reg(r),
                        None => Operand::new(OperandKind::StackVar, format!("arg_{}", 4 * k)),
                    };
                    self.emit(line, "mov", Some(v), None, Some(slot.clone()));
                    call_args.push(slot);
                }
                let target = Operand::call(callee.clone(), call_args);
                match dst {
                    Some(d) => {
                        let r = reg(self.regs.ret);
                        self.emit(line, "call", Some(target), None, Some(r.clone()));
                        let home = self.home(*d);
                        self.emit(line, "mov", Some(r), None, Some(home));
                    }
                    None => self.emit(line, "call", Some(target), None, None),
                }
            }
            Stmt::If { line, var, cmp, value, then_body, else_body } => {
                let line = *line;
                self.branch(line, *var, *cmp, *value);
                let from = self.cur;
                let then_b = self.new_block(line);
                let else_b = (!else_body.is_empty()).then(|| self.new_block(line));
                let join = self.new_block(line);
                self.edge(from, else_b.unwrap_or(join), EdgeKind::Conditional);
                self.edge(from, then_b, EdgeKind::Unconditional);
                self.cur = then_b;
                for s in then_body {
                    self.stmt(s);
                }
                if let Some(eb) = else_b {
                    self.emit_goto();
                    let end = self.cur;
                    self.edge(end, join, EdgeKind::Unconditional);
                    self.cur = eb;
                    for s in else_body {
                        self.stmt(s);
                    }
                }
                let end = self.cur;
                self.edge(end, join, EdgeKind::Unconditional);
                self.cur = join;
            }
            Stmt::Loop { line, counter, bound, body } => {
                let line = *line;
                let home = self.home(*counter);
                self.zero(line, home.clone());
                if self.cfg.opt_level() >= 2 {
                    // rotated: guard, then a body that tests at its end
                    self.branch(line, *counter, Cmp::Lt, *bound);
                    let guard = self.cur;
                    let body_b = self.new_block(line);
                    let exit = self.new_block(line);
                    self.edge(guard, exit, EdgeKind::Conditional);
                    self.edge(guard, body_b, EdgeKind::Unconditional);
                    self.cur = body_b;
                    for s in body {
                        self.stmt(s);
                    }
                    self.increment(line, *counter);
                    self.branch(line, *counter, Cmp::Ge, *bound);
                    let end = self.cur;
                    self.edge(end, body_b, EdgeKind::Conditional);
                    self.edge(end, exit, EdgeKind::Unconditional);
                    self.cur = exit;
                } else {
                    let pre = self.cur;
                    let header = self.new_block(line);
                    let body_b = self.new_block(line);
                    let exit = self.new_block(line);
                    self.edge(pre, header, EdgeKind::Unconditional);
                    self.cur = header;
                    self.branch(line, *counter, Cmp::Lt, *bound);
                    self.edge(header, exit, EdgeKind::Conditional);
                    self.edge(header, body_b, EdgeKind::Unconditional);
                    self.cur = body_b;
                    for s in body {
                        self.stmt(s);
                    }
                    self.increment(line, *counter);
                    self.emit_goto();
                    let end = self.cur;
                    self.edge(end, header, EdgeKind::Unconditional);
                    self.cur = exit;
                }
            }
            Stmt::Return { line, val } => {
                let v = self.value(*line, val, 0);
                let r = reg(self.regs.ret);
                if v != r {
                    self.emit(*line, "mov", Some(v), None, Some(r.clone()));
                }
                self.emit(*line, "ret", Some(r), None, None);
            }
        }
    }

    fn increment(&mut self, line: u32, counter: usize) {
        let home = self.home(counter);
        let one = num(1);
        let opcode = if self.is_gcc() { "add" } else { "lea" };
        if self.stack_mode {
            let t = reg(self.regs.temps[0]);
            self.emit(line, "mov", Some(home.clone()), None, Some(t.clone()));
            self.emit(line, opcode, Some(t.clone()), Some(one), Some(t.clone()));
            self.emit(line, "mov", Some(t), None, Some(home));
        } else {
            self.emit(line, opcode, Some(home.clone()), Some(one), Some(home));
        }
    }
}

/// Compiles a program for one configuration (before perturbation).
pub fn lower(prog: &SourceProgram, cfg: &BuildConfig, name: &str) -> FunctionIR {
    let regs = arch_registers(&cfg.arch).unwrap_or_else(|| arch_registers("x64").expect("x64 known"));
    let mut lw = Lowerer {
        cfg,
        regs,
        prog,
        blocks: Vec::new(),
        cur: 0,
        stack_mode: cfg.opt_level() == 0,
    };
    lw.new_block(prog.first_line);
    // prologue: move parameters to their homes
    for p in 0..prog.params {
        let src = match lw.regs.args.get(p) {
            Some(r) => reg(r),
            None => Operand::new(OperandKind::StackVar, format!("arg_{}", 4 * p)),
        };
        let home = lw.home(p);
        if home != src {
            lw.emit(prog.first_line, "mov", Some(src), None, Some(home));
        }
    }
    for s in &prog.body {
        lw.stmt(s);
    }
    let mut blocks = lw.blocks;
    for b in &mut blocks {
        if b.instructions.is_empty() {
            b.instructions.push(Instruction::new("goto", None, None, None));
        }
        b.renumber();
    }
    FunctionIR {
        name: name.to_string(),
        entry: 0,
        blocks: blocks.into_iter().map(|b| (b.id, b)).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn lowered_programs_validate_and_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for i in 0..40 {
            let p = generate_program(i, &mut rng);
            for tag in VARIANT_ORDER {
                let cfg: BuildConfig = tag.parse().unwrap();
                let f = lower(&p, &cfg, "f");
                f.validate().unwrap_or_else(|e| panic!("{tag}: {e}\n{}", crate::sir::print_function(&f)));
                let text = crate::sir::print_function(&f);
                let again = crate::sir::parse_sir(&text).unwrap().remove(0);
                assert_eq!(again, f, "{tag}");
            }
        }
    }

    #[test]
    fn only_layout_jumps_lack_a_line() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for i in 0..10 {
            let p = generate_program(i, &mut rng);
            let f = lower(&p, &"x64-gcc-O0".parse().unwrap(), "f");
            for ins in f.blocks.values().flat_map(|b| &b.instructions) {
                assert_eq!(ins.source_line.is_none(), ins.opcode == "goto", "{}", ins.text());
            }
        }
    }

    #[test]
    fn config_tags_parse() {
        let c: BuildConfig = "arm64-clang-O3".parse().unwrap();
        assert_eq!((c.arch.as_str(), c.compiler.as_str(), c.opt_level()), ("arm64", "clang", 3));
        assert!("vax-gcc-O2".parse::<BuildConfig>().is_err());
        assert_eq!(variant_configs(2)[1].to_string(), "x64-gcc-O3");
    }
}
