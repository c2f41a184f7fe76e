//! Text templates for exporting samples to external LLM trainers.
//! The numerical policy never reads these.

use std::fmt::Write;

use super::{SampleMode, SftSample};
use crate::error::{Error, Result};

pub const BINARY_QUESTION: &str = "Would the user enjoy the target item? Answer with Yes or No.";
pub const RANKING_INSTRUCTION: &str =
    "Rank the candidates by how likely the user is to pick each one next and return the top 3.";

/// Renders `sample` with titles looked up through `title`.
pub fn render_prompt(
    sample: &SftSample,
    mode: SampleMode,
    title: impl Fn(&str) -> String,
) -> Result<String> {
    if sample.history.is_empty() {
        return Err(Error::HistoryEmpty);
    }
    let mut out = String::from("The user interacted with these items, oldest first:\n");
    for (i, item) in sample.history.iter().enumerate() {
        let _ = writeln!(out, "{}. \"{}\"", i + 1, title(item));
    }
    match mode {
        SampleMode::Binary => {
            let _ = writeln!(out, "Target item: \"{}\"", title(&sample.target));
            out.push_str(BINARY_QUESTION);
        }
        SampleMode::Ranking => {
            out.push_str("Candidates:\n");
            for (i, item) in sample.candidates.iter().enumerate() {
                let _ = writeln!(out, "[{}] \"{}\"", i + 1, title(item));
            }
            out.push_str(RANKING_INSTRUCTION);
        }
    }
    Ok(out)
}
