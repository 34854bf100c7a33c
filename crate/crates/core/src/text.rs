//! Tokenization and phrase normalization shared by every scorer and by the
//! knowledge cache.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

/// Identifier of the tokenizer below; folded into metric config digests.
pub const TOKENIZER_ID: &str = "lower-ws-punct-v1";

/// Lowercases and splits on Unicode whitespace, emitting every punctuation
/// character as its own token.
pub fn tokenize(text: &str) -> Vec<String> {
    let lower = text.to_lowercase();
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in lower.chars() {
        if ch.is_whitespace() {
            flush(&mut cur, &mut out);
        } else if is_punct(ch) {
            flush(&mut cur, &mut out);
            out.push(ch.to_string());
        } else {
            cur.push(ch);
        }
    }
    flush(&mut cur, &mut out);
    out
}

/// Like [`tokenize`] but drops tokens that carry no alphanumeric character.
pub fn words(text: &str) -> Vec<String> {
    tokenize(text)
        .into_iter()
        .filter(|t| t.chars().any(char::is_alphanumeric))
        .collect()
}

fn flush(cur: &mut String, out: &mut Vec<String>) {
    if !cur.is_empty() {
        out.push(core::mem::take(cur));
    }
}

fn is_punct(ch: char) -> bool {
    !ch.is_alphanumeric() && !ch.is_whitespace()
}

/// Trims and collapses internal whitespace runs to a single space.
pub fn normalize_whitespace(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for (i, part) in text.split_whitespace().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        out.push_str(part);
    }
    out
}

/// Trims a phrase and strips terminal periods.
pub fn clean_phrase(phrase: &str) -> String {
    let trimmed = normalize_whitespace(phrase);
    trimmed.trim_end_matches('.').trim_end().to_string()
}

/// Drops empty phrases and case-insensitive duplicates, keeping first
/// occurrences in order.
pub fn dedupe_phrases<I, S>(phrases: I) -> Vec<String>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let mut seen: Vec<String> = Vec::new();
    let mut out = Vec::new();
    for p in phrases {
        let cleaned = clean_phrase(p.as_ref());
        if cleaned.is_empty() {
            continue;
        }
        let folded = cleaned.to_lowercase();
        if seen.contains(&folded) {
            continue;
        }
        seen.push(folded);
        out.push(cleaned);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splits_punctuation() {
        assert_eq!(tokenize("I'm  OK, thanks!"), ["i", "'", "m", "ok", ",", "thanks", "!"]);
        assert_eq!(words("I'm OK, thanks!"), ["i", "m", "ok", "thanks"]);
    }

    #[test]
    fn phrase_cleanup() {
        assert_eq!(clean_phrase("  to help.. "), "to help");
        assert_eq!(
            dedupe_phrases(["Happy", "happy.", "", " excited ", "HAPPY"]),
            ["Happy", "excited"]
        );
    }

    #[test]
    fn whitespace_normalized() {
        assert_eq!(normalize_whitespace("  a \t b\n"), "a b");
    }
}
