//! Instruction normalization and the split opcode/operand vocabularies.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sir::{Instruction, Operand, OperandKind};

pub const PAD: u32 = 0;
pub const CLS: u32 = 1;
pub const MASK: u32 = 2;
pub const UNK_OPCODE: u32 = 3;
const FIRST_KIND: u32 = 4;
const SPECIALS: [&str; 4] = ["[PAD]", "[CLS]", "[MASK]", "[UNK-OP]"];

/// Literal token replacing every numeric constant.
pub const NUM_TOKEN: &str = "num";

/// Vocabulary threshold used by the full-size configuration; a token must
/// occur strictly more often than this to get its own id.
pub const DEFAULT_MIN_COUNT: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TokenClass {
    Opcode,
    Operand(OperandKind),
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Token {
    pub class: TokenClass,
    pub text: String,
}

impl Token {
    pub fn opcode(text: impl Into<String>) -> Self {
        Self {
            class: TokenClass::Opcode,
            text: text.into(),
        }
    }

    pub fn operand(kind: OperandKind, text: impl Into<String>) -> Self {
        Self {
            class: TokenClass::Operand(kind),
            text: text.into(),
        }
    }
}

/// `mov` for opcodes, `<kind-tag>:<text>` for operands (`r:rax`, `n:num`).
impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.class {
            TokenClass::Opcode => f.write_str(&self.text),
            TokenClass::Operand(kind) => write!(f, "{}:{}", kind.tag(), self.text),
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("malformed token {0:?}")]
pub struct TokenParseError(pub String);

impl FromStr for Token {
    type Err = TokenParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.split_once(':') {
            Some((tag, text)) => {
                let kind = OperandKind::from_tag(tag).ok_or_else(|| TokenParseError(s.into()))?;
                Ok(Token::operand(kind, text))
            }
            None if !s.is_empty() => Ok(Token::opcode(s)),
            None => Err(TokenParseError(s.into())),
        }
    }
}

impl Serialize for Token {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Token {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Drops a trailing `_<digits>` suffix: `var_160` becomes `var`.
pub fn strip_suffix(ident: &str) -> &str {
    if let Some((base, digits)) = ident.rsplit_once('_') {
        if !base.is_empty() && !digits.is_empty() && digits.chars().all(|c| c.is_ascii_digit()) {
            return base;
        }
    }
    ident
}

fn is_operator(c: char) -> bool {
    matches!(c, '+' | '-' | '*' | '/' | '(' | ')' | '[' | ']' | '&' | '|' | '^' | '<' | '>' | '!' | '~')
}

fn leaf_token(kind: OperandKind, leaf: &str) -> Token {
    if leaf.starts_with('#') {
        Token::operand(OperandKind::NumConst, NUM_TOKEN)
    } else {
        Token::operand(kind, strip_suffix(leaf))
    }
}

fn operand_tokens(op: &Operand, out: &mut Vec<Token>) {
    match op.kind {
        OperandKind::NumConst => out.push(Token::operand(OperandKind::NumConst, NUM_TOKEN)),
        OperandKind::StrConst => out.push(Token::operand(OperandKind::StrConst, op.to_string())),
        OperandKind::CallTarget => {
            out.push(Token::operand(OperandKind::CallTarget, op.name.clone()));
            for arg in &op.args {
                operand_tokens(arg, out);
            }
        }
        kind => {
            // compound expressions keep their leaves only; a leading '-' of a
            // negative constant belongs to the leaf
            let mut leaf = String::new();
            for c in op.name.chars() {
                if is_operator(c) && !(c == '-' && leaf == "#") {
                    if !leaf.is_empty() {
                        out.push(leaf_token(kind, &leaf));
                        leaf.clear();
                    }
                } else {
                    leaf.push(c);
                }
            }
            if !leaf.is_empty() {
                out.push(leaf_token(kind, &leaf));
            }
        }
    }
}

/// Opcode token followed by operand tokens in left, right, dest order.
pub fn normalize(instr: &Instruction) -> Vec<Token> {
    let mut out = vec![Token::opcode(instr.opcode.clone())];
    for op in instr.operands() {
        operand_tokens(op, &mut out);
    }
    out
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum VocabError {
    #[error("cannot build a vocabulary from an empty corpus")]
    EmptyCorpus,
    #[error("vocab line {line}: {message}")]
    Format { line: usize, message: String },
}

/// Opcode and operand tables sharing one id space, with one reserved id per
/// operand kind standing in for out-of-vocabulary operands.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    opcodes: BTreeMap<String, u32>,
    operands: BTreeMap<Token, u32>,
    pub min_count: usize,
    size: u32,
}

impl Vocab {
    /// Counts tokens over a corpus of token sequences and keeps those seen
    /// more than `min_count` times.
    pub fn build<'a, I>(corpus: I, min_count: usize) -> Result<Self, VocabError>
    where
        I: IntoIterator<Item = &'a [Token]>,
    {
        let mut counts: HashMap<&Token, usize> = HashMap::new();
        let mut seqs = 0usize;
        for seq in corpus {
            seqs += 1;
            for t in seq {
                *counts.entry(t).or_default() += 1;
            }
        }
        if seqs == 0 {
            return Err(VocabError::EmptyCorpus);
        }
        let mut opcodes: Vec<&str> = Vec::new();
        let mut operands: Vec<Token> = Vec::new();
        for (tok, n) in counts {
            if n <= min_count {
                continue;
            }
            match tok.class {
                TokenClass::Opcode => opcodes.push(&tok.text),
                TokenClass::Operand(_) => operands.push(tok.clone()),
            }
        }
        opcodes.sort_unstable();
        operands.sort();
        let mut next = FIRST_KIND + OperandKind::ALL.len() as u32;
        let opcodes = opcodes
            .into_iter()
            .map(|o| {
                next += 1;
                (o.to_string(), next - 1)
            })
            .collect();
        let operands = operands
            .into_iter()
            .map(|t| {
                next += 1;
                (t, next - 1)
            })
            .collect();
        Ok(Self {
            opcodes,
            operands,
            min_count,
            size: next,
        })
    }

    pub fn len(&self) -> usize {
        self.size as usize
    }

    pub fn is_empty(&self) -> bool {
        self.size == 0
    }

    pub fn kind_id(kind: OperandKind) -> u32 {
        FIRST_KIND + OperandKind::ALL.iter().position(|k| *k == kind).expect("known kind") as u32
    }

    pub fn contains(&self, token: &Token) -> bool {
        match token.class {
            TokenClass::Opcode => self.opcodes.contains_key(&token.text),
            TokenClass::Operand(_) => self.operands.contains_key(token),
        }
    }

    /// Id of a token; unknown operands fall back to their kind token,
    /// unknown opcodes to the reserved opcode id.
    pub fn id(&self, token: &Token) -> u32 {
        match token.class {
            TokenClass::Opcode => self.opcodes.get(&token.text).copied().unwrap_or(UNK_OPCODE),
            TokenClass::Operand(kind) => self
                .operands
                .get(token)
                .copied()
                .unwrap_or_else(|| Self::kind_id(kind)),
        }
    }

    /// `[CLS]` followed by the token ids, cut to `max_len` entries.
    pub fn encode(&self, tokens: &[Token], max_len: usize) -> Vec<u32> {
        std::iter::once(CLS)
            .chain(tokens.iter().map(|t| self.id(t)))
            .take(max_len.max(1))
            .collect()
    }

    /// Display text for every id, indexed by id.
    pub fn id_texts(&self) -> Vec<String> {
        let mut texts = vec![String::new(); self.len()];
        for (i, s) in SPECIALS.iter().enumerate() {
            texts[i] = s.to_string();
        }
        for kind in OperandKind::ALL {
            texts[Self::kind_id(kind) as usize] = format!("<{}>", kind.tag());
        }
        for (o, &id) in &self.opcodes {
            texts[id as usize] = o.clone();
        }
        for (t, &id) in &self.operands {
            texts[id as usize] = t.to_string();
        }
        texts
    }

    /// `token<TAB>id<TAB>table` lines sorted by id.
    pub fn to_tsv(&self) -> String {
        let mut rows: Vec<(u32, String, &str)> = Vec::new();
        for (i, s) in SPECIALS.iter().enumerate() {
            rows.push((i as u32, s.to_string(), "special"));
        }
        for kind in OperandKind::ALL {
            rows.push((Self::kind_id(kind), format!("<{}>", kind.tag()), "kind"));
        }
        for (o, &id) in &self.opcodes {
            rows.push((id, o.clone(), "opcode"));
        }
        for (t, &id) in &self.operands {
            rows.push((id, t.to_string(), "operand"));
        }
        rows.sort_by_key(|r| r.0);
        let mut out = format!("# min_count={}\n", self.min_count);
        for (id, text, table) in rows {
            out.push_str(&format!("{}\t{id}\t{table}\n", escape(&text)));
        }
        out
    }

    pub fn from_tsv(text: &str) -> Result<Self, VocabError> {
        let mut opcodes = BTreeMap::new();
        let mut operands = BTreeMap::new();
        let mut min_count = DEFAULT_MIN_COUNT;
        let mut size = 0u32;
        for (i, line) in text.lines().enumerate() {
            let err = |message: String| VocabError::Format { line: i + 1, message };
            if let Some(rest) = line.strip_prefix("# min_count=") {
                min_count = rest.trim().parse().map_err(|_| err("bad min_count".into()))?;
                continue;
            }
            if line.is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 3 {
                return Err(err(format!("expected 3 columns, found {}", cols.len())));
            }
            let id: u32 = cols[1].parse().map_err(|_| err("bad id".into()))?;
            let text = unescape(cols[0]);
            match cols[2] {
                "special" | "kind" => {}
                "opcode" => {
                    opcodes.insert(text, id);
                }
                "operand" => {
                    let tok: Token = text.parse().map_err(|e: TokenParseError| err(e.to_string()))?;
                    operands.insert(tok, id);
                }
                other => return Err(err(format!("unknown table {other:?}"))),
            }
            size = size.max(id + 1);
        }
        size = size.max(FIRST_KIND + OperandKind::ALL.len() as u32);
        Ok(Self {
            opcodes,
            operands,
            min_count,
            size,
        })
    }
}

fn escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('\t', "\\t").replace('\n', "\\n")
}

fn unescape(s: &str) -> String {
    let mut out = String::new();
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c == '\\' {
            match chars.next() {
                Some('t') => out.push('\t'),
                Some('n') => out.push('\n'),
                Some(c) => out.push(c),
                None => out.push('\\'),
            }
        } else {
            out.push(c);
        }
    }
    out
}
