use super::{Instance, OperatorSeq, STEP_MARKER, SHIFT_TAG, TRAV_TAG};
use crate::error::{Error, Result};

fn pad_to(s: &str, width: usize, pad: char) -> Result<String> {
    let n = s.chars().count();
    if n > width {
        return Err(Error::Render(format!("state {s:?} has {n} symbols but the field width is {width}")));
    }
    let mut out = String::from(s);
    out.extend(std::iter::repeat_n(pad, width - n));
    Ok(out)
}

/// `<padded input> <tag><tag>...`
pub fn render_prompt(input: &str, ops: &OperatorSeq, width: usize, pad: char) -> Result<String> {
    Ok(format!("{} {}", pad_to(input, width, pad)?, ops.tags_from(0)))
}

/// `=> e1 <tags for ops 2..m> => e2 ... => em`
pub fn render_target(chain: &[String], ops: &OperatorSeq, width: usize, pad: char) -> Result<String> {
    if chain.len() != ops.len() {
        return Err(Error::Render(format!("chain has {} states for {} operators", chain.len(), ops.len())));
    }
    let mut segments = Vec::with_capacity(chain.len());
    for (j, state) in chain.iter().enumerate() {
        let mut seg = format!("{STEP_MARKER} {}", pad_to(state, width, pad)?);
        let rest = ops.tags_from(j + 1);
        if !rest.is_empty() {
            seg.push(' ');
            seg.push_str(&rest);
        }
        segments.push(seg);
    }
    Ok(segments.join(" "))
}

/// Renders an instance at `field_width`, returning `(prompt, target)`.
pub fn render_instance(inst: &Instance, field_width: usize) -> Result<(String, String)> {
    Ok((
        render_prompt(&inst.input, &inst.ops, field_width, inst.pad)?,
        render_target(&inst.chain, &inst.ops, field_width, inst.pad)?,
    ))
}

/// States recovered from a response, plus whether the text was well formed.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ParsedResponse {
    pub chain: Vec<String>,
    pub malformed: bool,
}

/// Extracts the state following every `=>` marker.
///
/// Never fails: text with no marker yields an empty, malformed chain. Text
/// before the first marker, an empty state, or a state containing spaces also
/// marks the response malformed, but whatever states were found are kept.
pub fn parse_response(text: &str) -> ParsedResponse {
    let mut pieces = text.split(STEP_MARKER);
    let head = pieces.next().unwrap_or("");
    let mut malformed = !head.trim().is_empty();
    let mut chain = Vec::new();
    for piece in pieces {
        let stripped = piece.replace(TRAV_TAG, " ").replace(SHIFT_TAG, " ");
        let state = stripped.trim();
        if state.is_empty() || state.contains(char::is_whitespace) {
            malformed = true;
        }
        chain.push(state.to_string());
    }
    if chain.is_empty() {
        malformed = true;
    }
    ParsedResponse { chain, malformed }
}
