//! NLI prompt rendering and response parsing.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NliLabel {
    Entailment,
    Contradiction,
    Neutral,
}

impl NliLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            NliLabel::Entailment => "entailment",
            NliLabel::Contradiction => "contradiction",
            NliLabel::Neutral => "neutral",
        }
    }
}

/// A judge's answer plus whether it had to fall back because the reply was unusable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NliOutcome {
    pub label: NliLabel,
    pub parse_failed: bool,
}

pub const NLI_INSTRUCTION: &str = "Given the premise sentence S1, determine if the hypothesis sentence S2 is entailed or contradicted or neutral, by three labels: entailment, contradiction, neutral.";

/// Premise is the gold evidence, hypothesis the generated sentence.
pub fn render_nli_prompt(premise: &str, hypothesis: &str) -> String {
    format!("{NLI_INSTRUCTION}\nRespond only with one of the labels.\nS1: {premise}\nS2: {hypothesis}\nLabel:")
}

/// Inverse of [`render_nli_prompt`]; used by the mock judge.
pub fn split_nli_prompt(prompt: &str) -> Option<(&str, &str)> {
    let body = prompt.strip_prefix(NLI_INSTRUCTION)?;
    let s1 = body.find("\nS1: ")? + 5;
    let end = body.rfind("\nLabel:")?;
    let s2 = body[..end].rfind("\nS2: ")?;
    if s2 < s1 {
        return None;
    }
    Some((&body[s1..s2], &body[s2 + 5..end]))
}

/// Case-insensitive exact match after trimming whitespace and punctuation.
pub fn parse_nli_label(response: &str) -> Option<NliLabel> {
    let cleaned = response
        .trim_matches(|c: char| c.is_whitespace() || c.is_ascii_punctuation())
        .to_lowercase();
    match cleaned.as_str() {
        "entailment" => Some(NliLabel::Entailment),
        "contradiction" => Some(NliLabel::Contradiction),
        "neutral" => Some(NliLabel::Neutral),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_labels() {
        assert_eq!(parse_nli_label("Entailment"), Some(NliLabel::Entailment));
        assert_eq!(parse_nli_label(" neutral\n"), Some(NliLabel::Neutral));
        assert_eq!(parse_nli_label("CONTRADICTION."), Some(NliLabel::Contradiction));
        assert_eq!(parse_nli_label("I think it follows"), None);
        assert_eq!(parse_nli_label("entailment or neutral"), None);
    }

    #[test]
    fn prompt_layout() {
        let p = render_nli_prompt("Gold.", "Generated.");
        assert_eq!(
            p,
            "Given the premise sentence S1, determine if the hypothesis sentence S2 is entailed or contradicted or neutral, by three labels: entailment, contradiction, neutral.\n\
             Respond only with one of the labels.\n\
             S1: Gold.\n\
             S2: Generated.\n\
             Label:"
        );
        assert_eq!(split_nli_prompt(&p), Some(("Gold.", "Generated.")));
    }
}
