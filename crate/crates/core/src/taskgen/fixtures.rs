//! Fixture permutations and the published sample rows they reproduce.
//!
//! `sigma_fix` agrees with every traversal pair visible in the depth, length
//! and composition sample rows and in the short-input failure cases
//! (`6CI4R -> JG2RV`, `D29UO -> IHS1K`, ...). The token-representation rows
//! (`EOCNS -> RGUSP`) contradict it on `E`, `O`, `C`, `S`, so that experiment
//! gets its own graph, `sigma_tok`. Symbols without a published constraint are
//! filled by a fixed rotation of the leftover targets that has no fixed point.

use super::{Alphabet, Permutation, SymbolMap};

/// Ten Greek letters standing in for the digits `0`-`9` in the alternative alphabet.
pub const GREEK_DIGITS: &str = "αβγδεθλμνξ";

/// Image of `ABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789` under `sigma_fix`.
pub const SIGMA_FIX_IMAGE: &str = "FCGIOLMN2PUW60KX5VE41YZ3789DHTRAJQBS";

/// Image of `ABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789` under `sigma_tok`.
pub const SIGMA_TOK_IMAGE: &str = "DEUFRHIJKLMNOSGQTVPWXYZ0123456789ABC";

pub fn sigma_fix() -> Permutation {
    let image: Vec<char> = SIGMA_FIX_IMAGE.chars().collect();
    Permutation::from_image(Alphabet::latin_digits(), &image, 0).expect("fixture is a bijection")
}

pub fn sigma_tok() -> Permutation {
    let image: Vec<char> = SIGMA_TOK_IMAGE.chars().collect();
    Permutation::from_image(Alphabet::latin_digits(), &image, 1).expect("fixture is a bijection")
}

/// Uppercase letters to lowercase, digits to [`GREEK_DIGITS`].
pub fn upper_to_lower() -> SymbolMap {
    SymbolMap::positional(Alphabet::latin_digits(), Alphabet::lower_greek()).expect("fixture is a bijection")
}

/// One published prompt/target sample.
#[derive(Debug, Clone, Copy)]
pub struct SampleRow {
    pub test: &'static str,
    pub label: &'static str,
    pub prompt: &'static str,
    pub target: &'static str,
}

pub const SAMPLE_ROWS: [SampleRow; 12] = [
    SampleRow { test: "depth", label: "1 Step", prompt: "TSKE3 <trav>", target: "=> 4EUOT" },
    SampleRow { test: "depth", label: "2 Steps", prompt: "TSKE3 <trav><trav>", target: "=> 4EUOT <trav> => RO1K4" },
    SampleRow {
        test: "depth",
        label: "3 Steps",
        prompt: "TSKE3 <trav><trav><trav>",
        target: "=> 4EUOT <trav><trav> => RO1K4 <trav> => VKDUR",
    },
    SampleRow { test: "length", label: "5 Chars", prompt: "4CMKQ+++ <trav>", target: "=> RG6U5+++" },
    SampleRow { test: "length", label: "6 Chars", prompt: "4CMKQE++ <trav>", target: "=> RG6U5O++" },
    SampleRow { test: "length", label: "7 Chars", prompt: "4CMKQE6+ <trav>", target: "=> RG6U5OJ+" },
    SampleRow { test: "token", label: "Orig.", prompt: "EOCNS <trav>", target: "=> RGUSP" },
    SampleRow { test: "token", label: "Alt.", prompt: "eocns <trav>", target: "=> rgusp" },
    SampleRow { test: "token", label: "Mixed", prompt: "EoCNs <trav>", target: "=> RgUSp" },
    SampleRow { test: "composition", label: "Trav-Only", prompt: "TSKE3 <trav><trav>", target: "=> 4EUOT <trav> => RO1K4" },
    SampleRow { test: "composition", label: "Shift-Only", prompt: "TSKE3 <shift><shift>", target: "=> SKE3T <shift> => KE3TS" },
    SampleRow { test: "composition", label: "Composite", prompt: "TSKE3 <trav><shift>", target: "=> 4EUOT <shift> => EUOT4" },
];

/// Short-input failure cases: prompt, the two-pad output a model produced, and the gold target.
pub const PAD_FAILURES: [(&str, &str, &str); 5] = [
    ("6CI4R+++ <trav>", "=> JG2RV++", "=> JG2RV+++"),
    ("D29UO+++ <trav>", "=> IHS1K++", "=> IHS1K+++"),
    ("NEIAE+++ <trav>", "=> 0O2FO++", "=> 0O2FO+++"),
    ("R751K+++ <trav>", "=> VQADU++", "=> VQADU+++"),
    ("2S521+++ <trav>", "=> HEAHD++", "=> HEAHD+++"),
];
