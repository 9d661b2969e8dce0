//! Tokenization and sentence splitting shared by the repetition filter,
//! the metrics, and the continuation-score dataset builder.

use std::ops::Range;

/// Abbreviations that never end a sentence, compared lowercased and
/// without the trailing period.
const ABBREVIATIONS: &[&str] = &[
    "mr", "mrs", "ms", "dr", "prof", "sr", "jr", "st", "mt", "vs", "etc", "e.g", "i.e", "no", "gen",
    "col", "capt", "lt", "sgt", "rev", "fig", "inc", "ltd", "co", "approx",
];

const CLOSERS: &[char] = &['"', '\'', ')', ']', '\u{201d}', '\u{2019}'];
const OPENERS: &[char] = &['"', '\'', '(', '[', '\u{201c}', '\u{2018}'];

/// Lowercased, punctuation-stripped whitespace tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .filter_map(|raw| {
            let tok: String = raw
                .chars()
                .filter(|c| !c.is_ascii_punctuation() && !is_unicode_punct(*c))
                .flat_map(char::to_lowercase)
                .collect();
            (!tok.is_empty()).then_some(tok)
        })
        .collect()
}

fn is_unicode_punct(c: char) -> bool {
    matches!(
        c,
        '\u{2018}' | '\u{2019}' | '\u{201c}' | '\u{201d}' | '\u{2013}' | '\u{2014}' | '\u{2026}' | '\u{00ab}' | '\u{00bb}'
    )
}

pub fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}

/// Byte ranges of the sentences in `text`, each trimmed of surrounding
/// whitespace. A boundary is a run of `.`, `!` or `?` (plus closing quotes or
/// brackets) followed by whitespace and then an uppercase letter, a digit or
/// an opening quote, unless the word before the period is a known
/// abbreviation or a single letter initial.
pub fn sentence_spans(text: &str) -> Vec<Range<usize>> {
    let bytes: Vec<(usize, char)> = text.char_indices().collect();
    let mut spans = Vec::new();
    let mut start: Option<usize> = None;
    let mut i = 0;
    while i < bytes.len() {
        let (pos, c) = bytes[i];
        if start.is_none() {
            if c.is_whitespace() {
                i += 1;
                continue;
            }
            start = Some(pos);
        }
        if matches!(c, '.' | '!' | '?') {
            let mut j = i + 1;
            while j < bytes.len() && (matches!(bytes[j].1, '.' | '!' | '?') || CLOSERS.contains(&bytes[j].1)) {
                j += 1;
            }
            let end = if j < bytes.len() { bytes[j].0 } else { text.len() };
            let mut k = j;
            while k < bytes.len() && bytes[k].1.is_whitespace() {
                k += 1;
            }
            let followed_by_space = k > j;
            let next_ok = k < bytes.len() && {
                let n = bytes[k].1;
                n.is_uppercase() || n.is_ascii_digit() || OPENERS.contains(&n)
            };
            if followed_by_space && next_ok && !(c == '.' && ends_with_abbreviation(&text[..pos])) {
                spans.push(start.take().unwrap_or(pos)..end);
                i = k;
                continue;
            }
            i = j;
            continue;
        }
        i += 1;
    }
    if let Some(s) = start {
        let end = text.trim_end().len();
        if end > s {
            spans.push(s..end);
        }
    }
    spans
}

fn ends_with_abbreviation(before_period: &str) -> bool {
    let word = before_period
        .rsplit(|c: char| c.is_whitespace() || OPENERS.contains(&c))
        .next()
        .unwrap_or("");
    if word.is_empty() {
        return false;
    }
    let lower = word.to_lowercase();
    if lower.chars().count() == 1 && lower.chars().all(char::is_alphabetic) {
        return true;
    }
    ABBREVIATIONS.contains(&lower.as_str())
}

/// The sentences of `text` as borrowed slices.
pub fn split_sentences(text: &str) -> Vec<&str> {
    sentence_spans(text).into_iter().map(|r| &text[r]).collect()
}

/// First sentence of `text`, or the whole trimmed text when no boundary exists.
pub fn first_sentence(text: &str) -> &str {
    sentence_spans(text).into_iter().next().map(|r| &text[r]).unwrap_or_else(|| text.trim())
}

/// Everything after the first sentence, trimmed.
pub fn after_first_sentence(text: &str) -> &str {
    match sentence_spans(text).into_iter().next() {
        Some(r) => text[r.end..].trim(),
        None => "",
    }
}

/// The last `n` sentences of `text` joined by single spaces.
pub fn last_sentences(text: &str, n: usize) -> String {
    let sentences = split_sentences(text);
    let skip = sentences.len().saturating_sub(n);
    sentences[skip..].join(" ")
}
