//! Sparse feature contexts for the log-linear policy.
//!
//! Every decoding state activates a handful of contexts. Each context owns one
//! weight per candidate token, so a feature is the pair (context, candidate).

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::vocab::{TokenId, TokenKind, Vocab};
use crate::error::{domain, Error, Result};
use crate::taskgen::Op;

/// Feature templates. `Aligned` is the one that makes traversal learnable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Template {
    /// Global bias.
    Bias,
    /// Previous token.
    Prev,
    /// Output position.
    Position,
    /// Prompt shape (width, non-pad length, operator sequence) and output position.
    Shape,
    /// Current operator and the source symbol at the current field slot.
    Aligned,
    /// Current operator and the source symbol one slot to the right, cyclically
    /// over the non-pad prefix.
    Neighbor,
}

impl Template {
    pub const ALL: [Template; 6] =
        [Template::Bias, Template::Prev, Template::Position, Template::Shape, Template::Aligned, Template::Neighbor];

    pub fn name(self) -> &'static str {
        match self {
            Template::Bias => "bias",
            Template::Prev => "prev",
            Template::Position => "position",
            Template::Shape => "shape",
            Template::Aligned => "aligned",
            Template::Neighbor => "neighbor",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.name() == s)
    }
}

impl fmt::Display for Template {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// An active context; weights are indexed by (context, candidate).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Context {
    Bias,
    Prev(TokenId),
    Position(u16),
    Shape { shape: u64, pos: u16 },
    Aligned { op: Option<Op>, src: Option<TokenId> },
    Neighbor { op: Option<Op>, src: Option<TokenId> },
}

fn enc_tok(vocab: &Vocab, t: Option<TokenId>) -> String {
    match t {
        Some(t) => serde_json::to_string(vocab.token(t)).expect("strings serialize"),
        None => "-".into(),
    }
}

fn dec_tok(vocab: &Vocab, s: &str) -> Result<Option<TokenId>> {
    if s == "-" {
        return Ok(None);
    }
    let tok: String = serde_json::from_str(s).map_err(|e| Error::Format(format!("bad token field {s}: {e}")))?;
    vocab.id(&tok).map(Some).ok_or_else(|| Error::Format(format!("token {tok:?} not in vocabulary")))
}

fn enc_op(op: Option<Op>) -> &'static str {
    op.map_or("-", Op::name)
}

fn dec_op(s: &str) -> Result<Option<Op>> {
    if s == "-" {
        return Ok(None);
    }
    Op::from_name(s).map(Some).ok_or_else(|| Error::Format(format!("bad operator field {s}")))
}

impl Context {
    /// Tab-separated textual form used in checkpoints.
    pub fn encode(&self, vocab: &Vocab) -> String {
        match *self {
            Context::Bias => "bias".into(),
            Context::Prev(t) => format!("prev\t{}", enc_tok(vocab, Some(t))),
            Context::Position(p) => format!("position\t{p}"),
            Context::Shape { shape, pos } => format!("shape\t{shape:x}\t{pos}"),
            Context::Aligned { op, src } => format!("aligned\t{}\t{}", enc_op(op), enc_tok(vocab, src)),
            Context::Neighbor { op, src } => format!("neighbor\t{}\t{}", enc_op(op), enc_tok(vocab, src)),
        }
    }

    /// Parses the fields written by [`Context::encode`].
    pub fn decode(fields: &[&str], vocab: &Vocab) -> Result<Self> {
        let bad = || Error::Format(format!("bad context {:?}", fields.join("\t")));
        let int = |s: &str| s.parse::<u16>().map_err(|_| bad());
        match fields {
            ["bias"] => Ok(Context::Bias),
            ["prev", t] => Ok(Context::Prev(dec_tok(vocab, t)?.ok_or_else(bad)?)),
            ["position", p] => Ok(Context::Position(int(p)?)),
            ["shape", s, p] => Ok(Context::Shape { shape: u64::from_str_radix(s, 16).map_err(|_| bad())?, pos: int(p)? }),
            ["aligned", o, t] => Ok(Context::Aligned { op: dec_op(o)?, src: dec_tok(vocab, t)? }),
            ["neighbor", o, t] => Ok(Context::Neighbor { op: dec_op(o)?, src: dec_tok(vocab, t)? }),
            _ => Err(bad()),
        }
    }

    /// Number of tab-separated fields of the encoded form, read from its first field.
    pub fn field_count(first: &str) -> Option<usize> {
        match first {
            "bias" => Some(1),
            "prev" | "position" => Some(2),
            "shape" | "aligned" | "neighbor" => Some(3),
            _ => None,
        }
    }
}

/// Structure read off a prompt: its padded input field and operator tags.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptView {
    symbols: Vec<TokenId>,
    ops: Vec<Op>,
    shape: u64,
}

impl PromptView {
    /// Prompts that do not follow the task format simply yield an empty field.
    pub fn new(vocab: &Vocab, prompt: &[TokenId]) -> Self {
        let symbols: Vec<TokenId> = prompt
            .iter()
            .copied()
            .take_while(|&t| matches!(vocab.kind(t), TokenKind::Symbol | TokenKind::Pad))
            .collect();
        let ops: Vec<Op> = prompt[symbols.len()..]
            .iter()
            .filter_map(|&t| match vocab.kind(t) {
                TokenKind::Tag(op) => Some(op),
                _ => None,
            })
            .collect();
        let non_pad = symbols.iter().filter(|&&t| vocab.kind(t) == TokenKind::Symbol).count();
        let shape = shape_key(symbols.len(), non_pad, &ops);
        Self { symbols, ops, shape }
    }

    pub fn symbols(&self) -> &[TokenId] {
        &self.symbols
    }

    pub fn ops(&self) -> &[Op] {
        &self.ops
    }
}

fn shape_key(width: usize, non_pad: usize, ops: &[Op]) -> u64 {
    if width < 256 && ops.len() <= 40 {
        let bits = ops.iter().enumerate().fold(0u64, |acc, (i, op)| acc | (u64::from(*op == Op::Shift) << i));
        (width as u64) << 56 | (non_pad as u64) << 48 | (ops.len() as u64) << 40 | bits
    } else {
        // FNV-1a with the top bit set so it never collides with the packed form
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |x: u64| {
            h ^= x;
            h = h.wrapping_mul(0x0100_0000_01b3);
        };
        eat(width as u64);
        eat(non_pad as u64);
        for op in ops {
            eat(*op as u64);
        }
        h | 1 << 63
    }
}

/// Incremental decoding state.
#[derive(Debug, Clone)]
pub struct Cursor {
    prompt: Arc<PromptView>,
    t: usize,
    prev: TokenId,
    segment: usize,
    after_marker: bool,
    field_open: bool,
    source: Vec<TokenId>,
    source_non_pad: usize,
    current: Vec<TokenId>,
}

impl Cursor {
    pub fn new(vocab: &Vocab, prompt: &[TokenId]) -> Self {
        Self {
            prompt: Arc::new(PromptView::new(vocab, prompt)),
            t: 0,
            prev: vocab.begin(),
            segment: 0,
            after_marker: false,
            field_open: false,
            source: Vec::new(),
            source_non_pad: 0,
            current: Vec::new(),
        }
    }

    /// Tokens generated so far.
    pub fn len(&self) -> usize {
        self.t
    }

    pub fn is_empty(&self) -> bool {
        self.t == 0
    }

    pub fn push(&mut self, vocab: &Vocab, token: TokenId) {
        let kind = vocab.kind(token);
        match kind {
            TokenKind::Marker => {
                self.segment += 1;
                self.source = if self.segment == 1 { self.prompt.symbols.clone() } else { std::mem::take(&mut self.current) };
                self.source_non_pad = self.source.iter().filter(|&&s| vocab.kind(s) == TokenKind::Symbol).count();
                self.current.clear();
                self.after_marker = true;
                self.field_open = false;
            }
            TokenKind::Space => {
                self.field_open = self.after_marker;
                self.after_marker = false;
            }
            TokenKind::Symbol | TokenKind::Pad => {
                if self.field_open {
                    self.current.push(token);
                }
                self.after_marker = false;
            }
            _ => {
                self.after_marker = false;
                self.field_open = false;
            }
        }
        self.prev = token;
        self.t += 1;
    }

    fn op(&self) -> Option<Op> {
        self.segment.checked_sub(1).and_then(|j| self.prompt.ops.get(j).copied())
    }
}

/// Ordered, duplicate-free list of templates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureExtractor {
    templates: Vec<Template>,
}

impl Default for FeatureExtractor {
    fn default() -> Self {
        Self { templates: Template::ALL.to_vec() }
    }
}

impl FeatureExtractor {
    pub fn new(mut templates: Vec<Template>) -> Result<Self> {
        if templates.is_empty() {
            return Err(domain("feature extractor needs at least one template"));
        }
        templates.sort();
        templates.dedup();
        Ok(Self { templates })
    }

    /// Default templates minus `t`.
    pub fn without(t: Template) -> Self {
        Self { templates: Template::ALL.into_iter().filter(|&x| x != t).collect() }
    }

    pub fn templates(&self) -> &[Template] {
        &self.templates
    }

    pub fn config_hash(&self) -> String {
        let names: Vec<&str> = self.templates.iter().map(|t| t.name()).collect();
        hex::encode(Sha256::digest(names.join(",").as_bytes()))
    }

    /// Writes the active contexts at `cursor` into `out`; at most one per template.
    pub fn contexts(&self, cursor: &Cursor, out: &mut Vec<Context>) {
        out.clear();
        let pos = u16::try_from(cursor.t).unwrap_or(u16::MAX);
        for &t in &self.templates {
            match t {
                Template::Bias => out.push(Context::Bias),
                Template::Prev => out.push(Context::Prev(cursor.prev)),
                Template::Position => out.push(Context::Position(pos)),
                Template::Shape => out.push(Context::Shape { shape: cursor.prompt.shape, pos }),
                Template::Aligned if cursor.field_open => {
                    let p = cursor.current.len();
                    out.push(Context::Aligned { op: cursor.op(), src: cursor.source.get(p).copied() });
                }
                Template::Neighbor if cursor.field_open => {
                    let p = cursor.current.len();
                    let n = cursor.source_non_pad;
                    let src = if p < n { cursor.source.get((p + 1) % n).copied() } else { cursor.source.get(p).copied() };
                    out.push(Context::Neighbor { op: cursor.op(), src });
                }
                Template::Aligned | Template::Neighbor => {}
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taskgen::TaskSuite;

    fn vocab() -> Vocab {
        Vocab::for_suite(&TaskSuite::default())
    }

    fn walk(v: &Vocab, prompt: &str, target: &str) -> Vec<Vec<Context>> {
        let prompt = v.tokenize(prompt).unwrap();
        let mut c = Cursor::new(v, &prompt);
        let fx = FeatureExtractor::default();
        let mut out = Vec::new();
        let mut all = Vec::new();
        for t in v.tokenize(target).unwrap() {
            fx.contexts(&c, &mut out);
            all.push(out.clone());
            c.push(v, t);
        }
        all
    }

    fn aligned(ctxs: &[Context]) -> Option<Context> {
        ctxs.iter().copied().find(|c| matches!(c, Context::Aligned { .. }))
    }

    #[test]
    fn aligned_source_follows_the_chain() {
        let v = vocab();
        let steps = walk(&v, "TSKE3 <trav><trav>", "=> 4EUOT <trav> => RO1K4");
        let id = |s: &str| v.id(s);
        // "=>", " " carry no alignment; first symbol aligns with the input
        assert_eq!(aligned(&steps[0]), None);
        assert_eq!(aligned(&steps[1]), None);
        assert_eq!(aligned(&steps[2]), Some(Context::Aligned { op: Some(Op::Trav), src: id("T") }));
        assert_eq!(aligned(&steps[6]), Some(Context::Aligned { op: Some(Op::Trav), src: id("3") }));
        // end of field
        assert_eq!(aligned(&steps[7]), Some(Context::Aligned { op: Some(Op::Trav), src: None }));
        // second segment aligns with the first state
        assert_eq!(aligned(&steps[12]), Some(Context::Aligned { op: Some(Op::Trav), src: id("4") }));
    }

    #[test]
    fn neighbor_rotates_non_pad_prefix() {
        let v = vocab();
        let steps = walk(&v, "ABC++ <shift>", "=> BCA++");
        let nb = |c: &[Context]| c.iter().copied().find(|c| matches!(c, Context::Neighbor { .. }));
        let src = |s: &str| Some(Context::Neighbor { op: Some(Op::Shift), src: v.id(s) });
        assert_eq!(nb(&steps[2]), src("B"));
        assert_eq!(nb(&steps[3]), src("C"));
        assert_eq!(nb(&steps[4]), src("A"));
        assert_eq!(nb(&steps[5]), src("+"));
    }

    #[test]
    fn shapes_separate_depths() {
        let v = vocab();
        let a = PromptView::new(&v, &v.tokenize("TSKE3 <trav>").unwrap());
        let b = PromptView::new(&v, &v.tokenize("TSKE3 <trav><trav>").unwrap());
        let c = PromptView::new(&v, &v.tokenize("ABCDE <trav><trav>").unwrap());
        assert_ne!(a.shape, b.shape);
        assert_eq!(b.shape, c.shape);
        assert_eq!(shape_key(300, 2, &[Op::Trav]), shape_key(300, 2, &[Op::Trav]));
        assert_ne!(shape_key(300, 2, &[Op::Trav]), shape_key(300, 2, &[Op::Shift]));
    }

    #[test]
    fn encode_round_trip() {
        let v = vocab();
        let ctxs = [
            Context::Bias,
            Context::Prev(v.id(" ").unwrap()),
            Context::Position(17),
            Context::Shape { shape: 0xdead_beef, pos: 3 },
            Context::Aligned { op: Some(Op::Trav), src: v.id("θ") },
            Context::Neighbor { op: None, src: None },
        ];
        for c in ctxs {
            let s = c.encode(&v);
            let fields: Vec<&str> = s.split('\t').collect();
            assert_eq!(Context::field_count(fields[0]), Some(fields.len()));
            assert_eq!(Context::decode(&fields, &v).unwrap(), c);
        }
    }

    #[test]
    fn extractor_hash_ignores_order() {
        let a = FeatureExtractor::new(vec![Template::Bias, Template::Prev]).unwrap();
        let b = FeatureExtractor::new(vec![Template::Prev, Template::Bias, Template::Prev]).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.config_hash(), b.config_hash());
        assert_ne!(a.config_hash(), FeatureExtractor::default().config_hash());
        assert!(!FeatureExtractor::without(Template::Aligned).templates().contains(&Template::Aligned));
    }
}
