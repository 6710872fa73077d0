//! Plain-text checkpoints: a header followed by one sorted line per non-zero weight.
//!
//! ```text
//! tiltlab-policy 1
//! stage SFT
//! vocab_hash <hex>
//! extractor_hash <hex>
//! pad +
//! vocab ["<s>","</s>"," ",...]
//! templates bias,prev,position,shape,aligned,neighbor
//! allowed 0111...
//! horizon 256
//! temperature 0.1
//! weights
//! aligned	TRAV	"A"	"F"	3.25
//! ```

use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use super::{Context, FeatureExtractor, Policy, Template, Vocab};
use crate::error::{Error, Result};

const MAGIC: &str = "tiltlab-policy 1";

fn fmt_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

impl Policy {
    pub fn to_checkpoint(&self) -> String {
        let v = &self.vocab;
        let mut out = String::new();
        let templates: Vec<&str> = self.extractor.templates().iter().map(|t| t.name()).collect();
        let allowed: String = self.allowed.iter().map(|a| if *a { '1' } else { '0' }).collect();
        let _ = writeln!(out, "{MAGIC}");
        let _ = writeln!(out, "stage {}", self.stage);
        let _ = writeln!(out, "vocab_hash {}", v.hash());
        let _ = writeln!(out, "extractor_hash {}", self.extractor.config_hash());
        let _ = writeln!(out, "pad {}", v.pad().map_or("-".to_string(), String::from));
        let _ = writeln!(out, "vocab {}", serde_json::to_string(v.tokens()).expect("strings serialize"));
        let _ = writeln!(out, "templates {}", templates.join(","));
        let _ = writeln!(out, "allowed {allowed}");
        let _ = writeln!(out, "horizon {}", self.horizon);
        let _ = writeln!(out, "temperature {}", self.temperature);
        let _ = writeln!(out, "weights");
        let mut lines = Vec::new();
        for (ctx, row) in &self.weights {
            let key = ctx.encode(v);
            for (t, w) in row.iter().enumerate() {
                if *w != 0.0 {
                    let cand = serde_json::to_string(v.token(t as u32)).expect("strings serialize");
                    lines.push(format!("{key}\t{cand}\t{w}"));
                }
            }
        }
        lines.sort();
        for l in lines {
            out.push_str(&l);
            out.push('\n');
        }
        out
    }

    pub fn from_checkpoint(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(MAGIC) {
            return Err(fmt_err("not a policy checkpoint"));
        }
        let mut header = |key: &str| -> Result<String> {
            let line = lines.next().ok_or_else(|| fmt_err(format!("missing header {key}")))?;
            line.strip_prefix(key)
                .and_then(|r| r.strip_prefix(' '))
                .map(str::to_string)
                .ok_or_else(|| fmt_err(format!("expected header {key}, found {line:?}")))
        };
        let stage = header("stage")?;
        let vocab_hash = header("vocab_hash")?;
        let extractor_hash = header("extractor_hash")?;
        let pad = match header("pad")?.as_str() {
            "-" => None,
            p => Some(p.chars().next().ok_or_else(|| fmt_err("bad pad"))?),
        };
        let tokens: Vec<String> =
            serde_json::from_str(&header("vocab")?).map_err(|e| fmt_err(format!("bad vocab line: {e}")))?;
        let templates = header("templates")?
            .split(',')
            .map(|s| Template::from_name(s).ok_or_else(|| fmt_err(format!("unknown template {s}"))))
            .collect::<Result<Vec<_>>>()?;
        let allowed_str = header("allowed")?;
        let horizon: usize = header("horizon")?.parse().map_err(|_| fmt_err("bad horizon"))?;
        let temperature: f64 = header("temperature")?.parse().map_err(|_| fmt_err("bad temperature"))?;
        if lines.next() != Some("weights") {
            return Err(fmt_err("missing weights section"));
        }

        let vocab = Vocab::new(tokens, pad)?;
        if vocab.hash() != vocab_hash {
            return Err(fmt_err("vocabulary hash mismatch"));
        }
        let extractor = FeatureExtractor::new(templates)?;
        if extractor.config_hash() != extractor_hash {
            return Err(fmt_err("extractor hash mismatch"));
        }
        let allowed: Vec<bool> = allowed_str.chars().map(|c| c == '1').collect();
        if allowed.len() != vocab.len() {
            return Err(fmt_err("mask length does not match vocabulary"));
        }
        let mut policy = Policy::new(Arc::new(vocab), extractor).with_horizon(horizon)?;
        policy.allowed = allowed;
        policy.temperature = temperature;
        policy.stage = stage;
        for (i, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            let n = Context::field_count(fields[0]).ok_or_else(|| fmt_err(format!("weight line {i}: unknown context")))?;
            if fields.len() != n + 2 {
                return Err(fmt_err(format!("weight line {i} has {} fields", fields.len())));
            }
            let ctx = Context::decode(&fields[..n], &policy.vocab)?;
            let cand: String = serde_json::from_str(fields[n]).map_err(|e| fmt_err(format!("weight line {i}: {e}")))?;
            let cand = policy.vocab.id(&cand).ok_or_else(|| fmt_err(format!("weight line {i}: unknown token")))?;
            let w: f64 = fields[n + 1].parse().map_err(|_| fmt_err(format!("weight line {i}: bad weight")))?;
            policy.set_weight(ctx, cand, w);
        }
        Ok(policy)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_checkpoint())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&std::fs::read_to_string(path)?)
    }
}
