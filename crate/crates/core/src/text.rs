//! Text normalization shared by every tokenizer in the crate.
//!
//! All comparison and tokenization runs over NFC-normalized, lowercased text.

use unicode_normalization::UnicodeNormalization;

/// NFC-normalize and lowercase.
pub fn normalize(text: &str) -> String {
    text.nfc().collect::<String>().to_lowercase()
}

/// Lowercased alphanumeric runs. Everything else is a separator.
pub fn alnum_tokens(text: &str) -> Vec<String> {
    normalize(text)
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_owned)
        .collect()
}

/// Truncate to at most `max_chars` characters. Returns whether anything was cut.
pub fn truncate_chars(text: &str, max_chars: usize) -> (&str, bool) {
    match text.char_indices().nth(max_chars) {
        Some((idx, _)) => (&text[..idx], true),
        None => (text, false),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokens_split_on_punctuation() {
        assert_eq!(alnum_tokens("The cat's hat, 2024!"), ["the", "cat", "s", "hat", "2024"]);
        assert!(alnum_tokens("  ...  ").is_empty());
    }

    #[test]
    fn nfc_makes_composed_and_decomposed_equal() {
        assert_eq!(normalize("Cafe\u{301}"), normalize("Caf\u{e9}"));
    }

    #[test]
    fn truncation_respects_char_boundaries() {
        assert_eq!(truncate_chars("héllo", 2), ("hé", true));
        assert_eq!(truncate_chars("abc", 3), ("abc", false));
    }
}
