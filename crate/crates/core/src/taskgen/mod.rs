//! Synthetic string-transformation tasks.
//!
//! An input is a string over a finite alphabet. Two operators act on it:
//! traversal replaces every symbol by its image under a fixed permutation,
//! shift rotates the string one step to the left. A task applies a sequence
//! of operators and asks for every intermediate state.
//!
//! Pad symbols only ever appear as a suffix. Traversal passes them through
//! unchanged and shift rotates the non-pad prefix only.

mod dataset;
pub mod fixtures;
mod render;

pub use dataset::{
    gen_dataset, gen_dataset_excluding, Axis, DatasetSpec, DatasetStream, Instance,
    InstanceRecord, MixedInputs, Split, TaskSuite, read_jsonl, write_jsonl,
};
pub use render::{parse_response, render_instance, render_prompt, render_target, ParsedResponse};

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};

pub const DEFAULT_PAD: char = '+';
pub const TRAV_TAG: &str = "<trav>";
pub const SHIFT_TAG: &str = "<shift>";
pub const STEP_MARKER: &str = "=>";

/// Ordered set of single-character symbols plus a pad character outside the set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Alphabet {
    symbols: Vec<char>,
    pad: char,
}

impl Alphabet {
    pub fn new(symbols: impl IntoIterator<Item = char>, pad: char) -> Result<Self> {
        let symbols: Vec<char> = symbols.into_iter().collect();
        let mut seen = BTreeSet::new();
        for &c in &symbols {
            if !seen.insert(c) {
                return Err(domain(format!("duplicate symbol {c:?} in alphabet")));
            }
        }
        if seen.contains(&pad) {
            return Err(domain(format!("pad {pad:?} is also an alphabet symbol")));
        }
        if symbols.len() < 2 {
            return Err(domain("alphabet needs at least two symbols"));
        }
        Ok(Self { symbols, pad })
    }

    /// `A`-`Z` followed by `0`-`9`.
    pub fn latin_digits() -> Self {
        Self::new(('A'..='Z').chain('0'..='9'), DEFAULT_PAD).expect("static alphabet")
    }

    /// `a`-`z` followed by ten Greek letters standing in for the digits.
    pub fn lower_greek() -> Self {
        Self::new(('a'..='z').chain(fixtures::GREEK_DIGITS.chars()), DEFAULT_PAD)
            .expect("static alphabet")
    }

    pub fn symbols(&self) -> &[char] {
        &self.symbols
    }

    pub fn pad(&self) -> char {
        self.pad
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn contains(&self, c: char) -> bool {
        self.symbols.contains(&c)
    }

    pub fn is_disjoint(&self, other: &Alphabet) -> bool {
        self.symbols.iter().all(|c| !other.contains(*c))
    }

    /// Union of two disjoint alphabets sharing a pad.
    pub fn union(&self, other: &Alphabet) -> Result<Alphabet> {
        if !self.is_disjoint(other) {
            return Err(domain("alphabets overlap"));
        }
        if self.pad != other.pad {
            return Err(domain("alphabets use different pads"));
        }
        Alphabet::new(self.symbols.iter().chain(other.symbols.iter()).copied(), self.pad)
    }
}

/// A bijection of an alphabet onto itself: the edge set of a functional graph.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Permutation {
    alphabet: Alphabet,
    map: BTreeMap<char, char>,
    seed: u64,
}

impl Permutation {
    /// Builds the permutation sending `alphabet.symbols()[i]` to `image[i]`.
    pub fn from_image(alphabet: Alphabet, image: &[char], seed: u64) -> Result<Self> {
        if image.len() != alphabet.len() {
            return Err(domain(format!(
                "image has {} symbols, alphabet has {}",
                image.len(),
                alphabet.len()
            )));
        }
        let mut targets = BTreeSet::new();
        for &t in image {
            if !alphabet.contains(t) {
                return Err(domain(format!("image symbol {t:?} outside alphabet")));
            }
            if !targets.insert(t) {
                return Err(domain(format!("symbol {t:?} appears twice in image")));
            }
        }
        let map = alphabet.symbols().iter().copied().zip(image.iter().copied()).collect();
        Ok(Self { alphabet, map, seed })
    }

    pub fn identity(alphabet: Alphabet) -> Self {
        let image = alphabet.symbols().to_vec();
        Self::from_image(alphabet, &image, 0).expect("identity is a bijection")
    }

    /// Uniformly random permutation drawn from `seed`.
    pub fn random(alphabet: Alphabet, seed: u64) -> Self {
        let mut image = alphabet.symbols().to_vec();
        image.shuffle(&mut crate::seed::rng(seed));
        Self::from_image(alphabet, &image, seed).expect("shuffle is a bijection")
    }

    pub fn alphabet(&self) -> &Alphabet {
        &self.alphabet
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn get(&self, c: char) -> Option<char> {
        self.map.get(&c).copied()
    }

    pub fn image(&self) -> Vec<char> {
        self.alphabet.symbols().iter().map(|c| self.map[c]).collect()
    }

    pub fn pairs(&self) -> impl Iterator<Item = (char, char)> + '_ {
        self.map.iter().map(|(&a, &b)| (a, b))
    }

    /// Permutation acting as `self` on its alphabet and as `other` on the other one.
    pub fn disjoint_union(&self, other: &Permutation) -> Result<Permutation> {
        let alphabet = self.alphabet.union(&other.alphabet)?;
        let image: Vec<char> = alphabet
            .symbols()
            .iter()
            .map(|&c| self.get(c).or_else(|| other.get(c)).expect("union covers both"))
            .collect();
        Permutation::from_image(alphabet, &image, self.seed ^ other.seed)
    }
}

/// Bijection between two disjoint alphabets, used to relabel a task.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SymbolMap {
    from: Alphabet,
    to: Alphabet,
    map: BTreeMap<char, char>,
}

impl SymbolMap {
    pub fn new(from: Alphabet, to: Alphabet, pairs: impl IntoIterator<Item = (char, char)>) -> Result<Self> {
        if !from.is_disjoint(&to) {
            return Err(domain("relabeling alphabets must be disjoint"));
        }
        let mut map = BTreeMap::new();
        let mut targets = BTreeSet::new();
        for (a, b) in pairs {
            if !from.contains(a) {
                return Err(domain(format!("{a:?} is not in the source alphabet")));
            }
            if !to.contains(b) {
                return Err(domain(format!("{b:?} is not in the target alphabet")));
            }
            if map.insert(a, b).is_some() {
                return Err(domain(format!("{a:?} mapped twice")));
            }
            if !targets.insert(b) {
                return Err(domain(format!("{b:?} is the image of two symbols")));
            }
        }
        if map.len() != from.len() || targets.len() != to.len() {
            return Err(domain("relabeling is not a bijection between the alphabets"));
        }
        Ok(Self { from, to, map })
    }

    /// Position-wise pairing of two equally sized alphabets.
    pub fn positional(from: Alphabet, to: Alphabet) -> Result<Self> {
        let pairs: Vec<(char, char)> =
            from.symbols().iter().copied().zip(to.symbols().iter().copied()).collect();
        Self::new(from, to, pairs)
    }

    pub fn from_alphabet(&self) -> &Alphabet {
        &self.from
    }

    pub fn to_alphabet(&self) -> &Alphabet {
        &self.to
    }

    pub fn get(&self, c: char) -> Option<char> {
        self.map.get(&c).copied()
    }

    pub fn inverse(&self, c: char) -> Option<char> {
        self.map.iter().find(|(_, &b)| b == c).map(|(&a, _)| a)
    }

    /// Relabels a string; pads and unknown characters are kept.
    pub fn apply_str(&self, s: &str) -> String {
        s.chars().map(|c| self.get(c).unwrap_or(c)).collect()
    }
}

/// Conjugates `sigma` by `pi`: the returned permutation acts on `pi`'s target
/// alphabet as `pi . sigma . pi^-1`.
pub fn make_isomorphic(sigma: &Permutation, pi: &SymbolMap) -> Result<Permutation> {
    if sigma.alphabet().symbols() != pi.from_alphabet().symbols() {
        return Err(domain("relabeling must be defined on the permutation's alphabet"));
    }
    let to = pi.to_alphabet().clone();
    let image: Vec<char> = to
        .symbols()
        .iter()
        .map(|&v| {
            let u = pi.inverse(v).expect("bijection");
            pi.get(sigma.get(u).expect("total")).expect("total")
        })
        .collect();
    Permutation::from_image(to, &image, sigma.seed())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Op {
    #[serde(rename = "TRAV")]
    Trav,
    #[serde(rename = "SHIFT")]
    Shift,
}

impl Op {
    pub fn tag(self) -> &'static str {
        match self {
            Op::Trav => TRAV_TAG,
            Op::Shift => SHIFT_TAG,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Op::Trav => "TRAV",
            Op::Shift => "SHIFT",
        }
    }

    pub fn from_name(s: &str) -> Option<Op> {
        match s {
            "TRAV" | "trav" => Some(Op::Trav),
            "SHIFT" | "shift" => Some(Op::Shift),
            _ => None,
        }
    }
}

impl fmt::Display for Op {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Non-empty operator sequence, applied first to last.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct OperatorSeq(Vec<Op>);

impl OperatorSeq {
    pub fn new(ops: Vec<Op>) -> Result<Self> {
        if ops.is_empty() {
            return Err(domain("operator sequence must contain at least one operator"));
        }
        Ok(Self(ops))
    }

    pub fn repeat(op: Op, m: usize) -> Result<Self> {
        Self::new(vec![op; m])
    }

    pub fn ops(&self) -> &[Op] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Concatenated tags of `ops[from..]`, e.g. `<trav><shift>`.
    pub fn tags_from(&self, from: usize) -> String {
        self.0[from.min(self.0.len())..].iter().map(|op| op.tag()).collect()
    }
}

fn non_pad_len(x: &[char], pad: char) -> Result<usize> {
    let n = x.iter().position(|&c| c == pad).unwrap_or(x.len());
    if x[n..].iter().any(|&c| c != pad) {
        return Err(domain("pad symbols must form a suffix"));
    }
    Ok(n)
}

/// Applies `sigma` to every non-pad symbol.
pub fn apply_traversal(x: &str, sigma: &Permutation) -> Result<String> {
    let pad = sigma.alphabet().pad();
    let chars: Vec<char> = x.chars().collect();
    non_pad_len(&chars, pad)?;
    chars
        .into_iter()
        .map(|c| {
            if c == pad {
                Ok(c)
            } else {
                sigma.get(c).ok_or_else(|| domain(format!("symbol {c:?} is outside the permutation's alphabet")))
            }
        })
        .collect()
}

/// One-step left rotation of the non-pad prefix.
pub fn apply_shift(x: &str, pad: char) -> Result<String> {
    let mut chars: Vec<char> = x.chars().collect();
    if chars.is_empty() {
        return Err(domain("cannot shift an empty string"));
    }
    let n = non_pad_len(&chars, pad)?;
    if n > 0 {
        chars[..n].rotate_left(1);
    }
    Ok(chars.into_iter().collect())
}

/// Runs `ops` on `x`, returning every intermediate state `e(1) .. e(m)`.
pub fn apply_sequence(x: &str, ops: &OperatorSeq, sigma: &Permutation) -> Result<Vec<String>> {
    let pad = sigma.alphabet().pad();
    let mut chain = Vec::with_capacity(ops.len());
    let mut state = x.to_string();
    for (step, op) in ops.ops().iter().enumerate() {
        let next = match op {
            Op::Trav => apply_traversal(&state, sigma),
            Op::Shift => apply_shift(&state, pad),
        }
        .map_err(|e| Error::AtStep { step: step + 1, source: Box::new(e) })?;
        chain.push(next.clone());
        state = next;
    }
    Ok(chain)
}

#[cfg(test)]
mod tests {
    use super::*;
    use fixtures::{sigma_fix, sigma_tok, upper_to_lower};

    #[test]
    fn traversal_matches_depth_row() {
        assert_eq!(apply_traversal("TSKE3", &sigma_fix()).unwrap(), "4EUOT");
    }

    #[test]
    fn traversal_passes_pads() {
        assert_eq!(apply_traversal("4CMKQ+++", &sigma_fix()).unwrap(), "RG6U5+++");
    }

    #[test]
    fn identity_traversal() {
        let id = Permutation::identity(Alphabet::latin_digits());
        assert_eq!(apply_traversal("ABC", &id).unwrap(), "ABC");
    }

    #[test]
    fn traversal_rejects_foreign_symbol() {
        let err = apply_traversal("AbC", &sigma_fix()).unwrap_err();
        assert!(err.to_string().contains("'b'"), "{err}");
    }

    #[test]
    fn traversal_rejects_interior_pad() {
        assert!(apply_traversal("A+B", &sigma_fix()).is_err());
    }

    #[test]
    fn shift_rows() {
        assert_eq!(apply_shift("TSKE3", '+').unwrap(), "SKE3T");
        assert_eq!(apply_shift("SKE3T", '+').unwrap(), "KE3TS");
        assert_eq!(apply_shift("A", '+').unwrap(), "A");
        assert_eq!(apply_shift("ABC++", '+').unwrap(), "BCA++");
        assert!(apply_shift("", '+').is_err());
    }

    #[test]
    fn sequences() {
        let s = sigma_fix();
        let comp = OperatorSeq::new(vec![Op::Trav, Op::Shift]).unwrap();
        assert_eq!(apply_sequence("TSKE3", &comp, &s).unwrap(), ["4EUOT", "EUOT4"]);
        let depth3 = OperatorSeq::repeat(Op::Trav, 3).unwrap();
        assert_eq!(apply_sequence("TSKE3", &depth3, &s).unwrap(), ["4EUOT", "RO1K4", "VKDUR"]);
        let rot = OperatorSeq::repeat(Op::Shift, 5).unwrap();
        assert_eq!(apply_sequence("TSKE3", &rot, &s).unwrap().last().unwrap(), "TSKE3");
    }

    #[test]
    fn sequence_error_names_step() {
        let s = sigma_fix();
        let ops = OperatorSeq::new(vec![Op::Shift, Op::Trav]).unwrap();
        match apply_sequence("ab", &ops, &s).unwrap_err() {
            Error::AtStep { step, .. } => assert_eq!(step, 2),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn empty_operator_sequence_rejected() {
        assert!(OperatorSeq::new(vec![]).is_err());
    }

    #[test]
    fn isomorphic_token_row() {
        let alt = make_isomorphic(&sigma_tok(), &upper_to_lower()).unwrap();
        assert_eq!(apply_traversal("eocns", &alt).unwrap(), "rgusp");
    }

    #[test]
    fn isomorphic_identity() {
        let id = Permutation::identity(Alphabet::latin_digits());
        let alt = make_isomorphic(&id, &upper_to_lower()).unwrap();
        assert!(alt.pairs().all(|(a, b)| a == b));
    }

    #[test]
    fn conjugacy_exhaustive() {
        let pi = upper_to_lower();
        for sigma in [sigma_fix(), sigma_tok(), Permutation::random(Alphabet::latin_digits(), 11)] {
            let alt = make_isomorphic(&sigma, &pi).unwrap();
            for &u in sigma.alphabet().symbols() {
                let lhs = pi.get(sigma.get(u).unwrap()).unwrap();
                let rhs = alt.get(pi.get(u).unwrap()).unwrap();
                assert_eq!(lhs, rhs, "symbol {u}");
            }
        }
    }

    #[test]
    fn relabeling_validation() {
        let upper = Alphabet::latin_digits();
        assert!(SymbolMap::positional(upper.clone(), upper.clone()).is_err());
        let small = Alphabet::new("ab".chars(), '+').unwrap();
        assert!(SymbolMap::new(upper, small, [('A', 'a'), ('B', 'a')]).is_err());
    }

    #[test]
    fn alphabet_validation() {
        assert!(Alphabet::new("AA".chars(), '+').is_err());
        assert!(Alphabet::new("A+".chars(), '+').is_err());
        assert!(Alphabet::new("A".chars(), '+').is_err());
    }

    #[test]
    fn permutation_rejects_non_bijection() {
        let a = Alphabet::new("ABC".chars(), '+').unwrap();
        assert!(Permutation::from_image(a.clone(), &['A', 'A', 'B'], 0).is_err());
        assert!(Permutation::from_image(a, &['A', 'B'], 0).is_err());
    }
}
