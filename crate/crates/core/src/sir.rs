//! Textual micro-IR ("SIR"): types, parser, canonical printer and per-instruction
//! def/use extraction.
//!
//! A document is a sequence of functions, one construct per line:
//!
//! ```text
//! func uninit_options
//! block 0 line=opts.c:10
//!   add r:rbx, #1, r:rbx ; line=opts.c:12
//!   call fn:av_freep(r:rdi), , r:rax
//!   jnz r:rbx, #10
//! edge 0 -> 1 cond
//! edge 0 -> 2 uncond
//! endfunc
//! ```
//!
//! Operands are written `r:<name>` (register, the prefix may be omitted),
//! `s:`/`l:`/`g:` for stack, local and global variables, `#<int>` for numbers,
//! `"<text>"` for strings, `e:<flag>` for flags and `fn:<name>(args...)` for
//! call targets. Registers, variables and numbers accept a `.<bytes>` width
//! suffix, e.g. `#0.4` or `rax.8`. Blank lines and lines starting with `//`
//! are ignored.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Flag names accepted for [`OperandKind::Eflag`] operands.
pub const EFLAGS: [&str; 5] = ["zf", "cf", "sf", "of", "pf"];

/// Pseudo-register defined by a call that does not name its return register.
pub const CALL_RETURN: &str = "ret";

const COND_JUMPS: [&str; 19] = [
    "jcnd", "jz", "jnz", "je", "jne", "jg", "jge", "jl", "jle", "ja", "jae", "jb", "jbe", "js",
    "jns", "jo", "jno", "jp", "jnp",
];
const UNCOND_JUMPS: [&str; 2] = ["goto", "jmp"];
const CALLS: [&str; 2] = ["call", "icall"];

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("line {line}, column {column}: {message}")]
pub struct SirError {
    pub line: usize,
    pub column: usize,
    pub message: String,
}

impl SirError {
    fn new(line: usize, column: usize, message: impl Into<String>) -> Self {
        Self {
            line,
            column,
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum OperandKind {
    Register,
    StackVar,
    LocalVar,
    GlobalVar,
    NumConst,
    StrConst,
    Eflag,
    CallTarget,
}

impl OperandKind {
    pub const ALL: [OperandKind; 8] = [
        OperandKind::Register,
        OperandKind::StackVar,
        OperandKind::LocalVar,
        OperandKind::GlobalVar,
        OperandKind::NumConst,
        OperandKind::StrConst,
        OperandKind::Eflag,
        OperandKind::CallTarget,
    ];

    pub fn is_constant(self) -> bool {
        matches!(self, OperandKind::NumConst | OperandKind::StrConst)
    }

    pub fn is_memory(self) -> bool {
        matches!(
            self,
            OperandKind::StackVar | OperandKind::LocalVar | OperandKind::GlobalVar
        )
    }

    /// Short tag used by the textual syntax and by token serialization.
    pub fn tag(self) -> &'static str {
        match self {
            OperandKind::Register => "r",
            OperandKind::StackVar => "s",
            OperandKind::LocalVar => "l",
            OperandKind::GlobalVar => "g",
            OperandKind::NumConst => "n",
            OperandKind::StrConst => "str",
            OperandKind::Eflag => "e",
            OperandKind::CallTarget => "fn",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        OperandKind::ALL.into_iter().find(|k| k.tag() == tag)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Operand {
    pub kind: OperandKind,
    /// Identifier text. Numbers keep their leading `#`; strings hold the
    /// unquoted text; call targets hold the callee name.
    pub name: String,
    pub width: Option<u32>,
    /// Argument operands, only populated for call targets.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub args: Vec<Operand>,
}

impl Operand {
    pub fn new(kind: OperandKind, name: impl Into<String>) -> Self {
        Self {
            kind,
            name: name.into(),
            width: None,
            args: Vec::new(),
        }
    }

    pub fn reg(name: impl Into<String>) -> Self {
        Self::new(OperandKind::Register, name)
    }

    pub fn num(value: i64) -> Self {
        Self::new(OperandKind::NumConst, format!("#{value}"))
    }

    pub fn flag(name: impl Into<String>) -> Self {
        Self::new(OperandKind::Eflag, name)
    }

    pub fn call(name: impl Into<String>, args: Vec<Operand>) -> Self {
        Self {
            kind: OperandKind::CallTarget,
            name: name.into(),
            width: None,
            args,
        }
    }

    pub fn with_width(mut self, width: u32) -> Self {
        self.width = Some(width);
        self
    }

    /// Names of the variables this operand reads when it appears in a
    /// source slot.
    fn read_names(&self, out: &mut BTreeSet<String>) {
        match self.kind {
            OperandKind::NumConst | OperandKind::StrConst => {}
            OperandKind::CallTarget => {
                for arg in &self.args {
                    arg.read_names(out);
                }
            }
            _ => {
                out.insert(self.name.clone());
            }
        }
    }
}

fn write_escaped(f: &mut fmt::Formatter<'_>, text: &str) -> fmt::Result {
    f.write_str("\"")?;
    for c in text.chars() {
        match c {
            '"' => f.write_str("\\\"")?,
            '\\' => f.write_str("\\\\")?,
            '\n' => f.write_str("\\n")?,
            '\t' => f.write_str("\\t")?,
            c => write!(f, "{c}")?,
        }
    }
    f.write_str("\"")
}

impl fmt::Display for Operand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            OperandKind::NumConst => f.write_str(&self.name)?,
            OperandKind::StrConst => return write_escaped(f, &self.name),
            OperandKind::CallTarget => {
                write!(f, "fn:{}(", self.name)?;
                for (i, arg) in self.args.iter().enumerate() {
                    if i > 0 {
                        f.write_str(", ")?;
                    }
                    write!(f, "{arg}")?;
                }
                return f.write_str(")");
            }
            kind => write!(f, "{}:{}", kind.tag(), self.name)?,
        }
        if let Some(w) = self.width {
            write!(f, ".{w}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum JumpKind {
    None,
    Conditional,
    Unconditional,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SourceLine {
    pub file: String,
    pub line: u32,
}

impl fmt::Display for SourceLine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.file, self.line)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Instruction {
    pub index: usize,
    pub opcode: String,
    pub left: Option<Operand>,
    pub right: Option<Operand>,
    pub dest: Option<Operand>,
    pub is_call: bool,
    pub jump: JumpKind,
    pub source_line: Option<SourceLine>,
}

impl Instruction {
    /// Builds an instruction, deriving the call/jump class from the opcode.
    pub fn new(
        opcode: impl Into<String>,
        left: Option<Operand>,
        right: Option<Operand>,
        dest: Option<Operand>,
    ) -> Self {
        let opcode = opcode.into();
        let (is_call, jump) = classify_opcode(&opcode);
        Self {
            index: 0,
            opcode,
            left,
            right,
            dest,
            is_call,
            jump,
            source_line: None,
        }
    }

    pub fn with_line(mut self, line: Option<SourceLine>) -> Self {
        self.source_line = line;
        self
    }

    pub fn operands(&self) -> impl Iterator<Item = &Operand> {
        [&self.left, &self.right, &self.dest]
            .into_iter()
            .filter_map(Option::as_ref)
    }

    pub fn def_use(&self) -> DefUse {
        def_use(self)
    }

    /// True for stores into named memory.
    pub fn is_store(&self) -> bool {
        self.dest.as_ref().is_some_and(|d| d.kind.is_memory())
    }

    /// Instruction text without the source annotation.
    pub fn text(&self) -> String {
        let slots = [&self.left, &self.right, &self.dest];
        let used = slots.iter().rposition(|s| s.is_some()).map_or(0, |p| p + 1);
        if used == 0 {
            return self.opcode.clone();
        }
        let rendered: Vec<String> = slots[..used]
            .iter()
            .map(|s| s.as_ref().map(Operand::to_string).unwrap_or_default())
            .collect();
        format!("{} {}", self.opcode, rendered.join(", "))
    }
}

impl fmt::Display for Instruction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.text())?;
        if let Some(line) = &self.source_line {
            write!(f, " ; line={line}")?;
        }
        Ok(())
    }
}

pub fn classify_opcode(opcode: &str) -> (bool, JumpKind) {
    if CALLS.contains(&opcode) {
        (true, JumpKind::None)
    } else if COND_JUMPS.contains(&opcode) {
        (false, JumpKind::Conditional)
    } else if UNCOND_JUMPS.contains(&opcode) {
        (false, JumpKind::Unconditional)
    } else {
        (false, JumpKind::None)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EdgeKind {
    Conditional,
    Unconditional,
}

impl EdgeKind {
    fn keyword(self) -> &'static str {
        match self {
            EdgeKind::Conditional => "cond",
            EdgeKind::Unconditional => "uncond",
        }
    }
}

pub type BlockId = u32;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BasicBlock {
    pub id: BlockId,
    pub instructions: Vec<Instruction>,
    pub out_edges: Vec<(BlockId, EdgeKind)>,
    pub source_line: Option<SourceLine>,
}

impl BasicBlock {
    pub fn new(id: BlockId) -> Self {
        Self {
            id,
            instructions: Vec::new(),
            out_edges: Vec::new(),
            source_line: None,
        }
    }

    /// Rewrites `index` fields to match positions.
    pub fn renumber(&mut self) {
        for (i, instr) in self.instructions.iter_mut().enumerate() {
            instr.index = i;
        }
    }

    pub fn successors(&self) -> impl Iterator<Item = BlockId> + '_ {
        self.out_edges.iter().map(|(t, _)| *t)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FunctionIR {
    pub name: String,
    pub entry: BlockId,
    pub blocks: BTreeMap<BlockId, BasicBlock>,
}

impl FunctionIR {
    pub fn block(&self, id: BlockId) -> Option<&BasicBlock> {
        self.blocks.get(&id)
    }

    pub fn instruction_count(&self) -> usize {
        self.blocks.values().map(|b| b.instructions.len()).sum()
    }

    /// Predecessor lists, derived from the out-edges.
    pub fn predecessors(&self) -> BTreeMap<BlockId, Vec<BlockId>> {
        let mut preds: BTreeMap<BlockId, Vec<BlockId>> =
            self.blocks.keys().map(|&id| (id, Vec::new())).collect();
        for block in self.blocks.values() {
            for (target, _) in &block.out_edges {
                if let Some(list) = preds.get_mut(target) {
                    list.push(block.id);
                }
            }
        }
        preds
    }

    /// Checks the structural invariants; returns a description of the first
    /// violation.
    pub fn validate(&self) -> Result<(), String> {
        if !self.blocks.contains_key(&self.entry) {
            return Err(format!("entry block {} does not exist", self.entry));
        }
        for (id, block) in &self.blocks {
            if *id != block.id {
                return Err(format!("block keyed {id} carries id {}", block.id));
            }
            let mut uncond = 0;
            let mut cond = 0;
            for (target, kind) in &block.out_edges {
                if !self.blocks.contains_key(target) {
                    return Err(format!("block {id}: edge to missing block {target}"));
                }
                match kind {
                    EdgeKind::Unconditional => uncond += 1,
                    EdgeKind::Conditional => cond += 1,
                }
            }
            if uncond > 1 {
                return Err(format!("block {id}: more than one unconditional edge"));
            }
            if cond > 0 {
                let last = block.instructions.last().map(|i| i.jump);
                if last != Some(JumpKind::Conditional) {
                    return Err(format!(
                        "block {id}: conditional edge without a trailing conditional jump"
                    ));
                }
            }
            for (i, instr) in block.instructions.iter().enumerate() {
                if instr.index != i {
                    return Err(format!("block {id}: instruction {i} has index {}", instr.index));
                }
                for op in instr.operands() {
                    validate_operand(op)?;
                }
            }
        }
        Ok(())
    }
}

fn validate_operand(op: &Operand) -> Result<(), String> {
    if op.name.is_empty() && op.kind != OperandKind::StrConst {
        return Err("operand with empty name".into());
    }
    match op.kind {
        OperandKind::NumConst if !op.name.starts_with('#') => {
            Err(format!("number operand {:?} must start with '#'", op.name))
        }
        OperandKind::Eflag if !EFLAGS.contains(&op.name.as_str()) => {
            Err(format!("unknown flag {:?}", op.name))
        }
        _ => op.args.iter().try_for_each(validate_operand),
    }
}

/// Defined and used operand names of one instruction.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DefUse {
    pub defs: BTreeSet<String>,
    pub uses: BTreeSet<String>,
}

/// Def/use rules: the destination is defined, left and right are used
/// (constants excluded), call arguments are used and a call always defines
/// its return register ([`CALL_RETURN`] when no destination is written).
pub fn def_use(instr: &Instruction) -> DefUse {
    let mut du = DefUse::default();
    for op in [&instr.left, &instr.right].into_iter().flatten() {
        op.read_names(&mut du.uses);
    }
    match &instr.dest {
        Some(d) if !d.kind.is_constant() && d.kind != OperandKind::CallTarget => {
            du.defs.insert(d.name.clone());
        }
        Some(d) => d.read_names(&mut du.uses),
        None => {}
    }
    if instr.is_call && du.defs.is_empty() {
        du.defs.insert(CALL_RETURN.to_string());
    }
    du
}

/// Parses a document, failing on the first malformed function.
pub fn parse_sir(text: &str) -> Result<Vec<FunctionIR>, SirError> {
    let (functions, errors) = parse_sir_lenient(text);
    match errors.into_iter().next() {
        Some(e) => Err(e),
        None => Ok(functions),
    }
}

/// Parses a document; a malformed function is skipped (up to its `endfunc`)
/// and reported, the remaining functions are still returned.
pub fn parse_sir_lenient(text: &str) -> (Vec<FunctionIR>, Vec<SirError>) {
    let mut functions = Vec::new();
    let mut errors = Vec::new();
    let mut current: Option<FunctionBuilder> = None;
    let mut skipping = false;

    for (lineno, raw) in text.lines().enumerate() {
        let lineno = lineno + 1;
        let indent = raw.len() - raw.trim_start().len();
        let line = raw.trim();
        if line.is_empty() || line.starts_with("//") {
            continue;
        }
        let keyword = line.split_whitespace().next().unwrap_or("");
        if skipping {
            if keyword == "endfunc" {
                skipping = false;
            }
            continue;
        }
        let result = match (keyword, current.as_mut()) {
            ("func", None) => {
                let name = line["func".len()..].trim();
                if name.is_empty() {
                    Err(SirError::new(lineno, indent + 1, "function without a name"))
                } else {
                    current = Some(FunctionBuilder::new(name, lineno));
                    Ok(())
                }
            }
            ("func", Some(_)) => Err(SirError::new(
                lineno,
                indent + 1,
                "nested `func` (missing `endfunc`)",
            )),
            ("endfunc", Some(_)) => {
                let builder = current.take().expect("checked");
                match builder.finish(lineno) {
                    Ok(f) => functions.push(f),
                    Err(e) => errors.push(e),
                }
                continue;
            }
            ("endfunc", None) => Err(SirError::new(lineno, indent + 1, "`endfunc` outside a function")),
            (_, None) => Err(SirError::new(lineno, indent + 1, "statement outside a function")),
            ("block", Some(b)) => b.block(line, lineno, indent),
            ("edge", Some(b)) => b.edge(line, lineno, indent),
            (_, Some(b)) => b.instruction(line, lineno, indent),
        };
        if let Err(e) = result {
            errors.push(e);
            if current.take().is_some() {
                skipping = true;
            }
        }
    }
    if let Some(b) = current {
        errors.push(SirError::new(b.start_line, 1, format!("function `{}` lacks `endfunc`", b.name)));
    }
    (functions, errors)
}

struct FunctionBuilder {
    name: String,
    start_line: usize,
    blocks: BTreeMap<BlockId, BasicBlock>,
    order: Vec<BlockId>,
    current: Option<BlockId>,
    edges: Vec<(usize, BlockId, BlockId, EdgeKind)>,
}

impl FunctionBuilder {
    fn new(name: &str, start_line: usize) -> Self {
        Self {
            name: name.to_string(),
            start_line,
            blocks: BTreeMap::new(),
            order: Vec::new(),
            current: None,
            edges: Vec::new(),
        }
    }

    fn block(&mut self, line: &str, lineno: usize, indent: usize) -> Result<(), SirError> {
        let mut parts = line.split_whitespace().skip(1);
        let id_text = parts
            .next()
            .ok_or_else(|| SirError::new(lineno, indent + 1, "block without an id"))?;
        let col = indent + line.find(id_text).unwrap_or(0) + 1;
        let id: BlockId = id_text
            .parse()
            .map_err(|_| SirError::new(lineno, col, format!("invalid block id {id_text:?}")))?;
        if self.blocks.contains_key(&id) {
            return Err(SirError::new(lineno, col, format!("duplicate block id {id}")));
        }
        let mut block = BasicBlock::new(id);
        if let Some(annot) = parts.next() {
            block.source_line = Some(parse_line_annotation(annot, lineno, col)?);
        }
        if parts.next().is_some() {
            return Err(SirError::new(lineno, col, "trailing text after block header"));
        }
        self.blocks.insert(id, block);
        self.order.push(id);
        self.current = Some(id);
        Ok(())
    }

    fn edge(&mut self, line: &str, lineno: usize, indent: usize) -> Result<(), SirError> {
        let parts: Vec<&str> = line.split_whitespace().collect();
        let bad = || SirError::new(lineno, indent + 1, "expected `edge <src> -> <dst> cond|uncond`");
        if parts.len() != 5 || parts[2] != "->" {
            return Err(bad());
        }
        let src = parts[1].parse().map_err(|_| bad())?;
        let dst = parts[3].parse().map_err(|_| bad())?;
        let kind = match parts[4] {
            "cond" => EdgeKind::Conditional,
            "uncond" => EdgeKind::Unconditional,
            _ => return Err(bad()),
        };
        self.edges.push((lineno, src, dst, kind));
        Ok(())
    }

    fn instruction(&mut self, line: &str, lineno: usize, indent: usize) -> Result<(), SirError> {
        let block_id = self
            .current
            .ok_or_else(|| SirError::new(lineno, indent + 1, "instruction before any `block`"))?;
        let instr = parse_instruction(line, lineno, indent)?;
        let block = self.blocks.get_mut(&block_id).expect("current block exists");
        let mut instr = instr;
        instr.index = block.instructions.len();
        block.instructions.push(instr);
        Ok(())
    }

    fn finish(mut self, end_line: usize) -> Result<FunctionIR, SirError> {
        let entry = *self.order.first().ok_or_else(|| {
            SirError::new(self.start_line, 1, format!("function `{}` has no blocks", self.name))
        })?;
        for (lineno, src, dst, kind) in std::mem::take(&mut self.edges) {
            if !self.blocks.contains_key(&dst) {
                return Err(SirError::new(lineno, 1, format!("dangling edge target {dst}")));
            }
            let block = self
                .blocks
                .get_mut(&src)
                .ok_or_else(|| SirError::new(lineno, 1, format!("edge from unknown block {src}")))?;
            block.out_edges.push((dst, kind));
        }
        let f = FunctionIR {
            name: self.name,
            entry,
            blocks: self.blocks,
        };
        f.validate().map_err(|m| SirError::new(end_line, 1, m))?;
        Ok(f)
    }
}

fn parse_line_annotation(text: &str, lineno: usize, col: usize) -> Result<SourceLine, SirError> {
    let bad = || SirError::new(lineno, col, format!("expected `line=<file>:<n>`, found {text:?}"));
    let rest = text.strip_prefix("line=").ok_or_else(bad)?;
    let (file, n) = rest.rsplit_once(':').ok_or_else(bad)?;
    if file.is_empty() {
        return Err(bad());
    }
    Ok(SourceLine {
        file: file.to_string(),
        line: n.parse().map_err(|_| bad())?,
    })
}

/// Splits on `sep` outside of string literals and parentheses. Returns
/// (byte offset, piece) pairs.
fn split_top_level(text: &str, sep: char) -> Vec<(usize, &str)> {
    let mut pieces = Vec::new();
    let mut depth = 0i32;
    let mut in_str = false;
    let mut escaped = false;
    let mut start = 0;
    for (i, c) in text.char_indices() {
        if in_str {
            if escaped {
                escaped = false;
            } else if c == '\\' {
                escaped = true;
            } else if c == '"' {
                in_str = false;
            }
            continue;
        }
        match c {
            '"' => in_str = true,
            '(' => depth += 1,
            ')' => depth -= 1,
            c if c == sep && depth == 0 => {
                pieces.push((start, &text[start..i]));
                start = i + c.len_utf8();
            }
            _ => {}
        }
    }
    pieces.push((start, &text[start..]));
    pieces
}

fn parse_instruction(line: &str, lineno: usize, indent: usize) -> Result<Instruction, SirError> {
    let parts = split_top_level(line, ';');
    let body = parts[0].1;
    let mut source_line = None;
    for (offset, annot) in &parts[1..] {
        let annot_trim = annot.trim();
        let col = indent + offset + (annot.len() - annot.trim_start().len()) + 1;
        if source_line.is_some() {
            return Err(SirError::new(lineno, col, "more than one annotation"));
        }
        source_line = Some(parse_line_annotation(annot_trim, lineno, col)?);
    }
    let body = body.trim_end();
    let (opcode, rest) = match body.find(char::is_whitespace) {
        Some(p) => (&body[..p], &body[p..]),
        None => (body, ""),
    };
    if !opcode.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.') {
        return Err(SirError::new(lineno, indent + 1, format!("invalid opcode {opcode:?}")));
    }
    let rest_offset = opcode.len();
    let mut slots: [Option<Operand>; 3] = [None, None, None];
    if !rest.trim().is_empty() {
        let pieces = split_top_level(rest, ',');
        if pieces.len() > 3 {
            return Err(SirError::new(
                lineno,
                indent + rest_offset + pieces[3].0 + 1,
                "more than three operand slots",
            ));
        }
        for (slot, (offset, piece)) in pieces.into_iter().enumerate() {
            let trimmed = piece.trim();
            if trimmed.is_empty() {
                continue;
            }
            let col = indent + rest_offset + offset + (piece.len() - piece.trim_start().len()) + 1;
            slots[slot] = Some(parse_operand(trimmed, lineno, col)?);
        }
    }
    let [left, right, dest] = slots;
    let instr = Instruction::new(opcode, left, right, dest).with_line(source_line);
    if instr.is_call {
        let target_ok = instr
            .left
            .as_ref()
            .is_some_and(|l| l.kind == OperandKind::CallTarget);
        if !target_ok {
            return Err(SirError::new(lineno, indent + 1, "call without an `fn:` target in the left slot"));
        }
    }
    Ok(instr)
}

fn split_width(text: &str) -> (&str, Option<u32>) {
    if let Some((base, w)) = text.rsplit_once('.') {
        if !base.is_empty() && !w.is_empty() && w.chars().all(|c| c.is_ascii_digit()) {
            if let Ok(w) = w.parse() {
                return (base, Some(w));
            }
        }
    }
    (text, None)
}

fn valid_ident(text: &str) -> bool {
    !text.is_empty()
        && text
            .chars()
            .all(|c| !c.is_whitespace() && !matches!(c, ',' | ';' | '"' | '(' | ')'))
}

/// Parses one operand in textual form.
pub fn parse_operand(text: &str, lineno: usize, col: usize) -> Result<Operand, SirError> {
    let err = |m: String| SirError::new(lineno, col, m);
    if let Some(inner) = text.strip_prefix('"') {
        let inner = inner
            .strip_suffix('"')
            .ok_or_else(|| err(format!("unterminated string {text:?}")))?;
        let mut out = String::new();
        let mut chars = inner.chars();
        while let Some(c) = chars.next() {
            if c == '\\' {
                match chars.next() {
                    Some('n') => out.push('\n'),
                    Some('t') => out.push('\t'),
                    Some(c @ ('"' | '\\')) => out.push(c),
                    other => return Err(err(format!("bad escape {other:?} in string"))),
                }
            } else if c == '"' {
                return Err(err("unescaped quote inside string".into()));
            } else {
                out.push(c);
            }
        }
        return Ok(Operand::new(OperandKind::StrConst, out));
    }
    if let Some(call) = text.strip_prefix("fn:") {
        let open = call
            .find('(')
            .ok_or_else(|| err(format!("call target {text:?} lacks an argument list")))?;
        let name = &call[..open];
        if !valid_ident(name) {
            return Err(err(format!("invalid call target name {name:?}")));
        }
        let args_text = call[open + 1..]
            .strip_suffix(')')
            .ok_or_else(|| err(format!("unclosed argument list in {text:?}")))?;
        let mut args = Vec::new();
        if !args_text.trim().is_empty() {
            for (offset, piece) in split_top_level(args_text, ',') {
                let arg_col = col + 3 + open + 1 + offset;
                args.push(parse_operand(piece.trim(), lineno, arg_col)?);
            }
        }
        return Ok(Operand::call(name, args));
    }
    if text.starts_with('#') {
        let (base, width) = split_width(text);
        let digits = &base[1..];
        let ok = digits
            .strip_prefix('-')
            .unwrap_or(digits)
            .strip_prefix("0x")
            .map_or_else(
                || !digits.is_empty() && digits.trim_start_matches('-').chars().all(|c| c.is_ascii_digit()),
                |hex| !hex.is_empty() && hex.chars().all(|c| c.is_ascii_hexdigit()),
            );
        if !ok || digits.trim_start_matches('-').is_empty() {
            return Err(err(format!("invalid number {text:?}")));
        }
        let mut op = Operand::new(OperandKind::NumConst, base);
        op.width = width;
        return Ok(op);
    }
    let (kind, body) = match text.split_once(':') {
        Some((tag, body)) => match tag {
            "r" => (OperandKind::Register, body),
            "s" => (OperandKind::StackVar, body),
            "l" => (OperandKind::LocalVar, body),
            "g" => (OperandKind::GlobalVar, body),
            "e" => (OperandKind::Eflag, body),
            _ => return Err(err(format!("unknown operand prefix {tag:?}"))),
        },
        None => (OperandKind::Register, text),
    };
    let (name, width) = split_width(body);
    if !valid_ident(name) {
        return Err(err(format!("invalid operand {text:?}")));
    }
    if kind == OperandKind::Eflag {
        if !EFLAGS.contains(&name) {
            return Err(err(format!("unknown flag {name:?}")));
        }
        if width.is_some() {
            return Err(err("flags take no width".into()));
        }
    }
    let mut op = Operand::new(kind, name);
    op.width = width;
    Ok(op)
}

/// Canonical text of a set of functions; `parse_sir(&print_sir(fs)) == fs`.
pub fn print_sir(functions: &[FunctionIR]) -> String {
    let mut out = String::new();
    for f in functions {
        out.push_str(&print_function(f));
    }
    out
}

pub fn print_function(f: &FunctionIR) -> String {
    let mut out = format!("func {}\n", f.name);
    let order = std::iter::once(f.entry).chain(f.blocks.keys().copied().filter(|&id| id != f.entry));
    let mut edges = String::new();
    for id in order {
        let block = &f.blocks[&id];
        out.push_str(&format!("block {id}"));
        if let Some(line) = &block.source_line {
            out.push_str(&format!(" line={line}"));
        }
        out.push('\n');
        for instr in &block.instructions {
            out.push_str(&format!("  {instr}\n"));
        }
        for (target, kind) in &block.out_edges {
            edges.push_str(&format!("edge {id} -> {target} {}\n", kind.keyword()));
        }
    }
    out.push_str(&edges);
    out.push_str("endfunc\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(text: &str) -> FunctionIR {
        let mut fs = parse_sir(text).unwrap();
        assert_eq!(fs.len(), 1);
        fs.remove(0)
    }

    fn instr(text: &str) -> Instruction {
        parse_instruction(text, 1, 0).unwrap()
    }

    fn names(xs: &[&str]) -> BTreeSet<String> {
        xs.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn empty_document() {
        assert!(parse_sir("").unwrap().is_empty());
        assert!(parse_sir("\n// comment only\n").unwrap().is_empty());
    }

    #[test]
    fn single_mov() {
        let f = one("func f\nblock 0\n  mov #0.4, , rax.8\nendfunc\n");
        assert_eq!(f.blocks.len(), 1);
        let b = &f.blocks[&0];
        assert_eq!(b.instructions.len(), 1);
        let i = &b.instructions[0];
        assert_eq!(i.opcode, "mov");
        assert_eq!(i.left, Some(Operand::num(0).with_width(4)));
        assert_eq!(i.right, None);
        assert_eq!(i.dest, Some(Operand::reg("rax").with_width(8)));
        assert_eq!(i.jump, JumpKind::None);
        assert!(!i.is_call);
    }

    #[test]
    fn conditional_block_with_fallthrough() {
        let text = "func f\nblock 0\n  sub r:rax, #1, r:rax\n  jz r:rax, #0\nblock 1\n  ret r:rax\nblock 2\n  goto\nedge 0 -> 1 cond\nedge 0 -> 2 uncond\nedge 2 -> 1 uncond\nendfunc\n";
        let f = one(text);
        assert_eq!(
            f.blocks[&0].out_edges,
            vec![(1, EdgeKind::Conditional), (2, EdgeKind::Unconditional)]
        );
        assert_eq!(f.blocks[&0].instructions[1].jump, JumpKind::Conditional);
        assert_eq!(f.blocks[&2].instructions[0].jump, JumpKind::Unconditional);
    }

    #[test]
    fn syntax_error_reports_position() {
        let err = parse_sir("func f\nblock 0\n  mov x:1, , r:rax\nendfunc\n").unwrap_err();
        assert_eq!(err.line, 3);
        assert_eq!(err.column, 7);
    }

    #[test]
    fn duplicate_block_and_dangling_edge() {
        let err = parse_sir("func f\nblock 0\nblock 0\nendfunc\n").unwrap_err();
        assert!(err.message.contains("duplicate block id"), "{err}");
        let err = parse_sir("func f\nblock 0\n  goto\nedge 0 -> 9 uncond\nendfunc\n").unwrap_err();
        assert!(err.message.contains("dangling edge target 9"), "{err}");
        assert_eq!(err.line, 4);
    }

    #[test]
    fn conditional_edge_needs_conditional_jump() {
        let err = parse_sir("func f\nblock 0\n  nop\nblock 1\nedge 0 -> 1 cond\nendfunc\n").unwrap_err();
        assert!(err.message.contains("conditional edge"), "{err}");
        let err =
            parse_sir("func f\nblock 0\nblock 1\nblock 2\nedge 0 -> 1 uncond\nedge 0 -> 2 uncond\nendfunc\n")
                .unwrap_err();
        assert!(err.message.contains("more than one unconditional"), "{err}");
    }

    #[test]
    fn lenient_parse_skips_bad_function() {
        let text = "func bad\nblock 0\n  mov e:xf, , r:rax\n  nop\nendfunc\nfunc good\nblock 3\n  nop\nendfunc\n";
        let (fs, errs) = parse_sir_lenient(text);
        assert_eq!(fs.len(), 1);
        assert_eq!(fs[0].name, "good");
        assert_eq!(fs[0].entry, 3);
        assert_eq!(errs.len(), 1);
        assert_eq!(errs[0].line, 3);
    }

    #[test]
    fn operand_forms() {
        let i = instr(r#"call fn:printf("a, \"b\"", s:var_160+#1, l:x.4), , r:rax ; line=a.c:7"#);
        assert!(i.is_call);
        let target = i.left.as_ref().unwrap();
        assert_eq!(target.kind, OperandKind::CallTarget);
        assert_eq!(target.args[0], Operand::new(OperandKind::StrConst, "a, \"b\""));
        assert_eq!(target.args[1], Operand::new(OperandKind::StackVar, "var_160+#1"));
        assert_eq!(target.args[2].width, Some(4));
        assert_eq!(i.source_line, Some(SourceLine { file: "a.c".into(), line: 7 }));
        assert_eq!(instr("mov #0x10, , g:errno").left, Some(Operand::new(OperandKind::NumConst, "#0x10")));
        assert_eq!(instr("add r:rbx, #-1, rbx").right, Some(Operand::num(-1)));
    }

    #[test]
    fn call_needs_target() {
        assert!(parse_instruction("call r:rax", 1, 0).is_err());
    }

    #[test]
    fn def_use_increment() {
        let du = def_use(&instr("add rbx, #1, rbx"));
        assert_eq!(du.defs, names(&["rbx"]));
        assert_eq!(du.uses, names(&["rbx"]));
    }

    #[test]
    fn def_use_constant_move() {
        let du = def_use(&instr("mov #5, , rax"));
        assert_eq!(du.defs, names(&["rax"]));
        assert!(du.uses.is_empty());
    }

    #[test]
    fn def_use_call() {
        let du = def_use(&instr("call fn:f(rdi)"));
        assert_eq!(du.defs, names(&[CALL_RETURN]));
        assert_eq!(du.uses, names(&["rdi"]));
        let du = def_use(&instr("call fn:f(rdi, #3, \"s\"), , r:rax"));
        assert_eq!(du.defs, names(&["rax"]));
        assert_eq!(du.uses, names(&["rdi"]));
    }

    #[test]
    fn def_use_flags_and_stores() {
        let du = def_use(&instr("setz r:rcx, #0, e:zf"));
        assert_eq!(du.defs, names(&["zf"]));
        assert_eq!(du.uses, names(&["rcx"]));
        let du = def_use(&instr("jz e:zf, #1"));
        assert!(du.defs.is_empty());
        assert_eq!(du.uses, names(&["zf"]));
        let du = def_use(&instr("mov r:rax, , g:errno"));
        assert_eq!(du.defs, names(&["errno"]));
    }

    #[test]
    fn print_is_canonical() {
        let text = "func f\nblock 2 line=a.c:1\n  mov #0.4, , r:rax.8 ; line=a.c:2\n  call fn:g(r:rdi, \"x\")\n  jz r:rax, #0\nblock 1\n  ret\nedge 2 -> 1 cond\nendfunc\n";
        let f = one(text);
        assert_eq!(print_sir(std::slice::from_ref(&f)), text);
    }
}
