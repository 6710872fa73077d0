//! Reproducible ID/OOD sample streams for the four task families.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::seq::{index::sample, SliceRandom};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::fixtures::{sigma_fix, sigma_tok, upper_to_lower};
use super::{
    apply_sequence, make_isomorphic, parse_response, render_prompt, render_target, Alphabet, Op,
    OperatorSeq, Permutation, SymbolMap, DEFAULT_PAD, SHIFT_TAG, TRAV_TAG,
};
use crate::error::{domain, Error, Result};
use crate::seed;

/// Which distribution shift a dataset isolates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    /// ID: 1-2 traversal steps, OOD: 3.
    DepthUp,
    /// ID: 2-3 traversal steps, OOD: 1.
    DepthDown,
    /// ID: 5-6 symbols, OOD: 7.
    LenUp,
    /// ID: 6-7 symbols, OOD: 5.
    LenDown,
    /// ID: original alphabet, OOD: relabeled alphabet.
    Token,
    /// ID: trav+trav and shift+shift, OOD: shift then trav.
    CompSt,
    /// ID: trav+trav and shift+shift, OOD: trav then shift.
    CompTs,
}

impl Axis {
    pub const ALL: [Axis; 7] =
        [Axis::DepthUp, Axis::DepthDown, Axis::LenUp, Axis::LenDown, Axis::Token, Axis::CompSt, Axis::CompTs];

    pub fn name(self) -> &'static str {
        match self {
            Axis::DepthUp => "depth_up",
            Axis::DepthDown => "depth_down",
            Axis::LenUp => "len_up",
            Axis::LenDown => "len_down",
            Axis::Token => "token",
            Axis::CompSt => "comp_st",
            Axis::CompTs => "comp_ts",
        }
    }

    /// Rendered state width: 8 on the length axes, the input length elsewhere.
    pub fn field_width(self) -> usize {
        match self {
            Axis::LenUp | Axis::LenDown => 8,
            _ => 5,
        }
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Axis::ALL
            .into_iter()
            .find(|a| a.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| domain(format!("unknown axis {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Split {
    #[serde(rename = "ID")]
    Id,
    #[serde(rename = "OOD")]
    Ood,
    #[serde(rename = "MIXED")]
    Mixed,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Id => "ID",
            Split::Ood => "OOD",
            Split::Mixed => "MIXED",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "ID" => Ok(Split::Id),
            "OOD" => Ok(Split::Ood),
            "MIXED" => Ok(Split::Mixed),
            _ => Err(domain(format!("unknown split {s:?}"))),
        }
    }
}

/// How token-axis MIXED instances combine the two alphabets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MixedInputs {
    /// Every position independently drawn from either alphabet.
    PerCharacter,
    /// Whole instance drawn from one alphabet chosen at random.
    PerInstance,
    /// An original-alphabet input with exactly this many positions relabeled.
    Contaminate(usize),
}

/// Alphabets and graphs shared by every dataset of an experiment.
#[derive(Debug, Clone)]
pub struct TaskSuite {
    pub orig: Alphabet,
    pub alt: Alphabet,
    /// Graph for the depth, length and composition axes.
    pub sigma: Permutation,
    /// Graph for the token axis, on the original alphabet.
    pub token_sigma: Permutation,
    pub pi: SymbolMap,
    alt_sigma: Permutation,
    union_sigma: Permutation,
}

impl TaskSuite {
    pub fn new(sigma: Permutation, token_sigma: Permutation, pi: SymbolMap) -> Result<Self> {
        let orig = sigma.alphabet().clone();
        if token_sigma.alphabet() != &orig {
            return Err(domain("both graphs must share the original alphabet"));
        }
        let alt = pi.to_alphabet().clone();
        let alt_sigma = make_isomorphic(&token_sigma, &pi)?;
        let union_sigma = token_sigma.disjoint_union(&alt_sigma)?;
        Ok(Self { orig, alt, sigma, token_sigma, pi, alt_sigma, union_sigma })
    }

    /// Random graphs over the default alphabets.
    pub fn random(seed: u64) -> Self {
        let orig = Alphabet::latin_digits();
        Self::new(
            Permutation::random(orig.clone(), seed::stream(seed, "sigma")),
            Permutation::random(orig, seed::stream(seed, "token_sigma")),
            upper_to_lower(),
        )
        .expect("default alphabets are compatible")
    }

    pub fn alt_sigma(&self) -> &Permutation {
        &self.alt_sigma
    }

    pub fn union_sigma(&self) -> &Permutation {
        &self.union_sigma
    }

    pub fn pad(&self) -> char {
        self.orig.pad()
    }
}

impl Default for TaskSuite {
    fn default() -> Self {
        Self::new(sigma_fix(), sigma_tok(), upper_to_lower()).expect("fixtures are compatible")
    }
}

/// One task instance: input, operators, every intermediate state, and the rendered text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Instance {
    /// Unpadded input, `k` symbols.
    pub input: String,
    pub width: usize,
    pub pad: char,
    pub ops: OperatorSeq,
    /// Unpadded states `e(1) .. e(m)`.
    pub chain: Vec<String>,
    pub prompt_text: String,
    pub target_text: String,
    pub axis: Axis,
    pub split: Split,
    pub seed: u64,
}

impl Instance {
    pub fn build(
        input: &str,
        ops: OperatorSeq,
        sigma: &Permutation,
        width: usize,
        axis: Axis,
        split: Split,
        seed: u64,
    ) -> Result<Self> {
        let pad = sigma.alphabet().pad();
        let chain = apply_sequence(input, &ops, sigma)?;
        let prompt_text = render_prompt(input, &ops, width, pad)?;
        let target_text = render_target(&chain, &ops, width, pad)?;
        Ok(Self {
            input: input.to_string(),
            width,
            pad,
            ops,
            chain,
            prompt_text,
            target_text,
            axis,
            split,
            seed,
        })
    }

    pub fn k(&self) -> usize {
        self.input.chars().count()
    }

    /// Chain states padded to the field width, as they appear in the target.
    pub fn padded_chain(&self) -> Vec<String> {
        self.chain
            .iter()
            .map(|s| {
                let mut p = s.clone();
                p.extend(std::iter::repeat_n(self.pad, self.width - s.chars().count()));
                p
            })
            .collect()
    }

    pub fn final_state(&self) -> String {
        self.padded_chain().pop().expect("chain is non-empty")
    }

    pub fn to_record(&self) -> InstanceRecord {
        InstanceRecord {
            prompt: self.prompt_text.clone(),
            target: self.target_text.clone(),
            axis: self.axis,
            split: self.split,
            k: self.k(),
            ops: self.ops.ops().to_vec(),
            seed: self.seed,
        }
    }

    /// Rebuilds an instance from its serialized form without knowing the graph.
    pub fn from_record(rec: &InstanceRecord) -> Result<Self> {
        let bad = |msg: &str| Error::Format(format!("{msg} in record {:?}", rec.prompt));
        let (padded, tags) = rec.prompt.split_once(' ').ok_or_else(|| bad("missing tag separator"))?;
        let ops = parse_tags(tags).ok_or_else(|| bad("unrecognized operator tags"))?;
        if ops != rec.ops {
            return Err(bad("operator list disagrees with prompt tags"));
        }
        let pad = DEFAULT_PAD;
        let input: String = padded.trim_end_matches(pad).to_string();
        if input.chars().count() != rec.k {
            return Err(bad("input length disagrees with k"));
        }
        let parsed = parse_response(&rec.target);
        if parsed.malformed || parsed.chain.len() != ops.len() {
            return Err(bad("target does not parse into one state per operator"));
        }
        let chain = parsed.chain.iter().map(|s| s.trim_end_matches(pad).to_string()).collect();
        Ok(Self {
            input,
            width: padded.chars().count(),
            pad,
            ops: OperatorSeq::new(ops).map_err(|_| bad("no operators"))?,
            chain,
            prompt_text: rec.prompt.clone(),
            target_text: rec.target.clone(),
            axis: rec.axis,
            split: rec.split,
            seed: rec.seed,
        })
    }
}

fn parse_tags(mut s: &str) -> Option<Vec<Op>> {
    let mut ops = Vec::new();
    while !s.is_empty() {
        s = s.trim_start();
        if let Some(rest) = s.strip_prefix(TRAV_TAG) {
            ops.push(Op::Trav);
            s = rest;
        } else if let Some(rest) = s.strip_prefix(SHIFT_TAG) {
            ops.push(Op::Shift);
            s = rest;
        } else if !s.is_empty() {
            return None;
        }
    }
    (!ops.is_empty()).then_some(ops)
}

/// JSONL line format.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub prompt: String,
    pub target: String,
    pub axis: Axis,
    pub split: Split,
    pub k: usize,
    pub ops: Vec<Op>,
    pub seed: u64,
}

/// Writes one JSON record per line.
pub fn write_jsonl<W: std::io::Write>(instances: &[Instance], mut out: W) -> Result<()> {
    for inst in instances {
        serde_json::to_writer(&mut out, &inst.to_record())?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Reads JSONL records, skipping blank lines.
pub fn read_jsonl<R: std::io::BufRead>(input: R) -> Result<Vec<Instance>> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: InstanceRecord =
            serde_json::from_str(&line).map_err(|e| Error::Format(format!("line {}: {e}", i + 1)))?;
        out.push(Instance::from_record(&rec)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub axis: Axis,
    /// Fraction of OOD-labeled instances, placed by a seeded shuffle.
    pub ood_ratio: f64,
    pub count: usize,
    pub seed: u64,
    /// Token axis only: OOD slots become MIXED instances built this way.
    pub mixed: Option<MixedInputs>,
}

impl DatasetSpec {
    pub fn new(axis: Axis, ood_ratio: f64, count: usize, seed: u64) -> Self {
        Self { axis, ood_ratio, count, seed, mixed: None }
    }

    pub fn with_mixed(mut self, mixed: MixedInputs) -> Self {
        self.mixed = Some(mixed);
        self
    }

    pub fn ood_count(&self) -> usize {
        (self.ood_ratio * self.count as f64).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.ood_ratio) {
            return Err(domain(format!("ood_ratio {} outside [0, 1]", self.ood_ratio)));
        }
        match self.mixed {
            Some(_) if self.axis != Axis::Token => Err(domain("mixed inputs only apply to the token axis")),
            Some(MixedInputs::Contaminate(j)) if j == 0 || j > 5 => {
                Err(domain(format!("cannot contaminate {j} of 5 positions")))
            }
            _ => Ok(()),
        }
    }
}

/// Index-addressable instance stream; `get(i)` depends only on the [`DatasetSpec`] and `i`.
#[derive(Debug, Clone)]
pub struct DatasetStream {
    spec: DatasetSpec,
    suite: Arc<TaskSuite>,
    ood: Vec<bool>,
    exclude: Option<Arc<HashSet<String>>>,
    next: usize,
}

const MAX_ATTEMPTS: u64 = 10_000;

impl DatasetStream {
    pub fn len(&self) -> usize {
        self.spec.count
    }

    pub fn is_empty(&self) -> bool {
        self.spec.count == 0
    }

    pub fn is_ood(&self, index: usize) -> bool {
        self.ood[index]
    }

    pub fn get(&self, index: usize) -> Result<Instance> {
        let base = seed::derive(seed::stream(self.spec.seed, "instance"), index as u64);
        for attempt in 0..MAX_ATTEMPTS {
            let s = seed::derive(base, attempt);
            let inst = self.draw(self.ood[index], s)?;
            match &self.exclude {
                Some(ex) if ex.contains(&inst.prompt_text) => continue,
                _ => return Ok(inst),
            }
        }
        Err(domain(format!("could not draw a non-excluded instance at index {index}")))
    }

    pub fn collect_all(&self) -> Result<Vec<Instance>> {
        use rayon::prelude::*;
        (0..self.len()).into_par_iter().map(|i| self.get(i)).collect()
    }

    fn draw(&self, ood: bool, s: u64) -> Result<Instance> {
        let suite = &*self.suite;
        let axis = self.spec.axis;
        let mut rng = seed::rng(s);
        let split = if ood { Split::Ood } else { Split::Id };
        let trav = |m| OperatorSeq::repeat(Op::Trav, m).expect("m >= 1");
        let pick = |rng: &mut ChaCha8Rng, options: &[usize]| *options.choose(rng).expect("non-empty");
        let word = |rng: &mut ChaCha8Rng, a: &Alphabet, k: usize| -> String {
            (0..k).map(|_| *a.symbols().choose(rng).expect("non-empty")).collect()
        };
        let (k, ops) = match axis {
            Axis::DepthUp => (5, trav(if ood { 3 } else { pick(&mut rng, &[1, 2]) })),
            Axis::DepthDown => (5, trav(if ood { 1 } else { pick(&mut rng, &[2, 3]) })),
            Axis::LenUp => (if ood { 7 } else { pick(&mut rng, &[5, 6]) }, trav(1)),
            Axis::LenDown => (if ood { 5 } else { pick(&mut rng, &[6, 7]) }, trav(1)),
            Axis::Token => (5, trav(1)),
            Axis::CompSt | Axis::CompTs => {
                let ops = if ood {
                    if axis == Axis::CompSt {
                        vec![Op::Shift, Op::Trav]
                    } else {
                        vec![Op::Trav, Op::Shift]
                    }
                } else if rng.gen_bool(0.5) {
                    vec![Op::Trav, Op::Trav]
                } else {
                    vec![Op::Shift, Op::Shift]
                };
                (5, OperatorSeq::new(ops).expect("non-empty"))
            }
        };
        let width = axis.field_width();
        if axis != Axis::Token {
            let input = word(&mut rng, &suite.orig, k);
            return Instance::build(&input, ops, &suite.sigma, width, axis, split, s);
        }
        match (ood, self.spec.mixed) {
            (false, _) => {
                let input = word(&mut rng, &suite.orig, k);
                Instance::build(&input, ops, &suite.token_sigma, width, axis, Split::Id, s)
            }
            (true, None) => {
                let input = word(&mut rng, &suite.alt, k);
                Instance::build(&input, ops, suite.alt_sigma(), width, axis, Split::Ood, s)
            }
            (true, Some(mode)) => {
                let input: String = match mode {
                    MixedInputs::PerCharacter => (0..k)
                        .map(|_| {
                            let a = if rng.gen_bool(0.5) { &suite.orig } else { &suite.alt };
                            *a.symbols().choose(&mut rng).expect("non-empty")
                        })
                        .collect(),
                    MixedInputs::PerInstance => {
                        let a = if rng.gen_bool(0.5) { &suite.orig } else { &suite.alt };
                        word(&mut rng, a, k)
                    }
                    MixedInputs::Contaminate(j) => {
                        let mut chars: Vec<char> = word(&mut rng, &suite.orig, k).chars().collect();
                        for pos in sample(&mut rng, k, j) {
                            chars[pos] = *suite.alt.symbols().choose(&mut rng).expect("non-empty");
                        }
                        chars.into_iter().collect()
                    }
                };
                Instance::build(&input, ops, suite.union_sigma(), width, axis, Split::Mixed, s)
            }
        }
    }
}

impl Iterator for DatasetStream {
    type Item = Result<Instance>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.next >= self.len() {
            return None;
        }
        let item = self.get(self.next);
        self.next += 1;
        Some(item)
    }
}

/// Deterministic stream for `spec`.
pub fn gen_dataset(spec: &DatasetSpec, suite: Arc<TaskSuite>) -> Result<DatasetStream> {
    build_stream(spec, suite, None)
}

/// Like [`gen_dataset`], redrawing any instance whose prompt is in `exclude`.
pub fn gen_dataset_excluding(
    spec: &DatasetSpec,
    suite: Arc<TaskSuite>,
    exclude: Arc<HashSet<String>>,
) -> Result<DatasetStream> {
    build_stream(spec, suite, Some(exclude))
}

fn build_stream(
    spec: &DatasetSpec,
    suite: Arc<TaskSuite>,
    exclude: Option<Arc<HashSet<String>>>,
) -> Result<DatasetStream> {
    spec.validate()?;
    let n_ood = spec.ood_count();
    let mut ood = vec![false; spec.count];
    ood[..n_ood].iter_mut().for_each(|b| *b = true);
    ood.shuffle(&mut seed::rng(seed::stream(spec.seed, "labels")));
    Ok(DatasetStream { spec: spec.clone(), suite, ood, exclude, next: 0 })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stream(axis: Axis, r: f64, n: usize, s: u64) -> Vec<Instance> {
        gen_dataset(&DatasetSpec::new(axis, r, n, s), Arc::new(TaskSuite::default()))
            .unwrap()
            .collect_all()
            .unwrap()
    }

    #[test]
    fn pure_id_depth_mixture() {
        let data = stream(Axis::DepthUp, 0.0, 100, 3);
        assert!(data.iter().all(|i| matches!(i.ops.len(), 1 | 2) && i.split == Split::Id));
    }

    #[test]
    fn length_third_ood() {
        let a = stream(Axis::LenUp, 1.0 / 3.0, 300, 9);
        assert_eq!(a.iter().filter(|i| i.k() == 7).count(), 100);
        assert_eq!(a.iter().filter(|i| i.split == Split::Ood).count(), 100);
        assert_eq!(a, stream(Axis::LenUp, 1.0 / 3.0, 300, 9));
        assert!(a.iter().all(|i| i.width == 8));
    }

    #[test]
    fn split_definitions() {
        for inst in stream(Axis::DepthDown, 0.5, 200, 1) {
            assert_eq!(inst.split == Split::Ood, inst.ops.len() == 1);
        }
        for inst in stream(Axis::LenDown, 0.5, 200, 1) {
            assert_eq!(inst.split == Split::Ood, inst.k() == 5);
            assert!(inst.split == Split::Ood || matches!(inst.k(), 6 | 7));
        }
        for inst in stream(Axis::CompSt, 0.5, 200, 1) {
            let ops = inst.ops.ops();
            if inst.split == Split::Ood {
                assert_eq!(ops, [Op::Shift, Op::Trav]);
            } else {
                assert!(ops == [Op::Trav, Op::Trav] || ops == [Op::Shift, Op::Shift]);
            }
        }
        for inst in stream(Axis::CompTs, 1.0, 20, 1) {
            assert_eq!(inst.ops.ops(), [Op::Trav, Op::Shift]);
        }
        let suite = TaskSuite::default();
        for inst in stream(Axis::Token, 0.5, 200, 1) {
            let a = if inst.split == Split::Ood { &suite.alt } else { &suite.orig };
            assert!(inst.input.chars().all(|c| a.contains(c)));
        }
    }

    #[test]
    fn contamination_counts() {
        let suite = Arc::new(TaskSuite::default());
        for j in 1..=3 {
            let spec = DatasetSpec::new(Axis::Token, 0.25, 200, 5).with_mixed(MixedInputs::Contaminate(j));
            let data = gen_dataset(&spec, suite.clone()).unwrap().collect_all().unwrap();
            let mixed: Vec<_> = data.iter().filter(|i| i.split == Split::Mixed).collect();
            assert_eq!(mixed.len(), 50);
            for inst in mixed {
                assert_eq!(inst.input.chars().filter(|&c| suite.alt.contains(c)).count(), j);
            }
        }
    }

    #[test]
    fn mixed_row_uses_union_graph() {
        let suite = TaskSuite::default();
        let inst = Instance::build(
            "EoCNs",
            OperatorSeq::repeat(Op::Trav, 1).unwrap(),
            suite.union_sigma(),
            5,
            Axis::Token,
            Split::Mixed,
            0,
        )
        .unwrap();
        assert_eq!(inst.target_text, "=> RgUSp");
    }

    #[test]
    fn spec_validation() {
        let suite = Arc::new(TaskSuite::default());
        assert!(gen_dataset(&DatasetSpec::new(Axis::DepthUp, 1.5, 10, 0), suite.clone()).is_err());
        let bad = DatasetSpec::new(Axis::DepthUp, 0.5, 10, 0).with_mixed(MixedInputs::PerCharacter);
        assert!(gen_dataset(&bad, suite.clone()).is_err());
        let bad = DatasetSpec::new(Axis::Token, 0.5, 10, 0).with_mixed(MixedInputs::Contaminate(6));
        assert!(gen_dataset(&bad, suite).is_err());
    }

    #[test]
    fn exclusion_is_respected() {
        let suite = Arc::new(TaskSuite::default());
        let spec = DatasetSpec::new(Axis::DepthUp, 0.3, 200, 4);
        let plain = gen_dataset(&spec, suite.clone()).unwrap().collect_all().unwrap();
        let banned: HashSet<String> = plain.iter().take(50).map(|i| i.prompt_text.clone()).collect();
        let redrawn = gen_dataset_excluding(&spec, suite, Arc::new(banned.clone()))
            .unwrap()
            .collect_all()
            .unwrap();
        assert!(redrawn.iter().all(|i| !banned.contains(&i.prompt_text)));
        assert_eq!(
            redrawn.iter().filter(|i| i.split == Split::Ood).count(),
            plain.iter().filter(|i| i.split == Split::Ood).count()
        );
    }

    #[test]
    fn record_round_trip() {
        for inst in stream(Axis::LenDown, 0.5, 20, 2).into_iter().chain(stream(Axis::CompTs, 0.5, 20, 2)) {
            let rec = inst.to_record();
            let line = serde_json::to_string(&rec).unwrap();
            let back: InstanceRecord = serde_json::from_str(&line).unwrap();
            assert_eq!(Instance::from_record(&back).unwrap(), inst);
        }
    }

    #[test]
    fn record_field_names() {
        let inst = &stream(Axis::DepthUp, 0.0, 1, 2)[0];
        let v: serde_json::Value = serde_json::to_value(inst.to_record()).unwrap();
        let mut keys: Vec<_> = v.as_object().unwrap().keys().cloned().collect();
        keys.sort();
        assert_eq!(keys, ["axis", "k", "ops", "prompt", "seed", "split", "target"]);
        assert_eq!(v["axis"], "depth_up");
        assert_eq!(v["split"], "ID");
        assert_eq!(v["ops"][0], "TRAV");
    }
}
