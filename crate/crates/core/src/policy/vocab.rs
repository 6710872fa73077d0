use std::collections::HashMap;

use sha2::{Digest, Sha256};

use crate::error::{domain, Result};
use crate::taskgen::{Op, TaskSuite, SHIFT_TAG, STEP_MARKER, TRAV_TAG};

pub type TokenId = u32;

pub const BEGIN: &str = "<s>";
pub const END: &str = "</s>";

/// Role a token plays in the task format.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TokenKind {
    Begin,
    End,
    Space,
    Marker,
    Tag(Op),
    Pad,
    Symbol,
}

/// Ordered token list with stable ids. Multi-character tokens are matched
/// greedily, longest first, when tokenizing.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    kinds: Vec<TokenKind>,
    index: HashMap<String, TokenId>,
    multi: Vec<TokenId>,
    pad: Option<char>,
    begin: TokenId,
    end: TokenId,
}

impl Vocab {
    /// Tokens must be unique and include [`BEGIN`] and [`END`]. `pad` marks
    /// which single-character token is the pad symbol, if any.
    pub fn new(tokens: Vec<String>, pad: Option<char>) -> Result<Self> {
        let mut index = HashMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() {
                return Err(domain("empty token"));
            }
            if index.insert(t.clone(), i as TokenId).is_some() {
                return Err(domain(format!("duplicate token {t:?}")));
            }
        }
        let begin = *index.get(BEGIN).ok_or_else(|| domain("vocabulary lacks a begin marker"))?;
        let end = *index.get(END).ok_or_else(|| domain("vocabulary lacks an end marker"))?;
        let pad_str = pad.map(String::from);
        let kinds = tokens
            .iter()
            .map(|t| match t.as_str() {
                BEGIN => TokenKind::Begin,
                END => TokenKind::End,
                " " => TokenKind::Space,
                STEP_MARKER => TokenKind::Marker,
                TRAV_TAG => TokenKind::Tag(Op::Trav),
                SHIFT_TAG => TokenKind::Tag(Op::Shift),
                s if Some(s) == pad_str.as_deref() => TokenKind::Pad,
                _ => TokenKind::Symbol,
            })
            .collect();
        let mut multi: Vec<TokenId> = (0..tokens.len() as TokenId)
            .filter(|&i| tokens[i as usize].chars().count() > 1 && i != begin && i != end)
            .collect();
        multi.sort_by_key(|&i| std::cmp::Reverse(tokens[i as usize].len()));
        Ok(Self { tokens, kinds, index, multi, pad, begin, end })
    }

    /// Markers, structural tokens, the pad and both alphabets of `suite`.
    pub fn for_suite(suite: &TaskSuite) -> Self {
        let mut tokens: Vec<String> =
            [BEGIN, END, " ", STEP_MARKER, TRAV_TAG, SHIFT_TAG].iter().map(|s| s.to_string()).collect();
        tokens.push(suite.pad().to_string());
        for c in suite.orig.symbols().iter().chain(suite.alt.symbols()) {
            tokens.push(c.to_string());
        }
        Self::new(tokens, Some(suite.pad())).expect("suite alphabets are disjoint from structural tokens")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn begin(&self) -> TokenId {
        self.begin
    }

    pub fn end(&self) -> TokenId {
        self.end
    }

    pub fn pad(&self) -> Option<char> {
        self.pad
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn token(&self, id: TokenId) -> &str {
        &self.tokens[id as usize]
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn kind(&self, id: TokenId) -> TokenKind {
        self.kinds[id as usize]
    }

    /// Splits `text` into token ids; unknown characters are a domain error.
    pub fn tokenize(&self, text: &str) -> Result<Vec<TokenId>> {
        let mut out = Vec::new();
        let mut rest = text;
        'outer: while let Some(c) = rest.chars().next() {
            for &m in &self.multi {
                let t = &self.tokens[m as usize];
                if rest.starts_with(t.as_str()) {
                    out.push(m);
                    rest = &rest[t.len()..];
                    continue 'outer;
                }
            }
            let mut buf = [0u8; 4];
            let id = self.index.get(&*c.encode_utf8(&mut buf)).ok_or_else(|| domain(format!("character {c:?} is not in the vocabulary")))?;
            out.push(*id);
            rest = &rest[c.len_utf8()..];
        }
        Ok(out)
    }

    /// Concatenates token strings, dropping begin and end markers.
    pub fn detokenize(&self, ids: &[TokenId]) -> String {
        ids.iter().filter(|&&i| i != self.begin && i != self.end).map(|&i| self.token(i)).collect()
    }

    /// Hex SHA-256 over the ordered token list.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update([0u8]);
        }
        hex::encode(h.finalize())
    }
}
