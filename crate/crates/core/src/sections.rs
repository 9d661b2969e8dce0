//! Parsing of numbered (`1.` … `n.`) multi-answer replies.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use regex::Regex;

fn marker_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^(\s*)[*#_ ]*(\d{1,2})\s*[.)]\s*(?:\*\*)?\s*(.*)$").expect("valid regex"))
}

fn strip_markup(s: &str) -> &str {
    s.trim().trim_matches(|c: char| c == '*' || c == '_').trim()
}

/// Splits `reply` into sections keyed `1..=count`. A marker line opens
/// section `k` only when `k` follows the previous section number and the
/// line is not indented by more than one column, so nested lists inside an
/// answer stay part of it.
pub fn parse_numbered(reply: &str, count: usize) -> BTreeMap<usize, String> {
    let mut out: BTreeMap<usize, Vec<&str>> = BTreeMap::new();
    let mut current = 0usize;
    for line in reply.lines() {
        if let Some(c) = marker_re().captures(line) {
            let indent = c.get(1).map_or(0, |m| m.as_str().len());
            let n: usize = c[2].parse().unwrap_or(0);
            if indent <= 1 && n == current + 1 && n <= count {
                current = n;
                out.entry(n).or_default().push(c.get(3).map_or("", |m| m.as_str()));
                continue;
            }
        }
        if current > 0 {
            out.entry(current).or_default().push(line);
        }
    }
    out.into_iter()
        .filter_map(|(k, lines)| {
            let text = strip_markup(&lines.join("\n")).to_string();
            (!text.is_empty()).then_some((k, text))
        })
        .collect()
}

/// Labelled fallback: a line starting with one of `labels[i]` followed by
/// `:` opens section `i + 1`.
pub fn parse_labelled(reply: &str, labels: &[&[&str]]) -> BTreeMap<usize, String> {
    let mut out: BTreeMap<usize, Vec<String>> = BTreeMap::new();
    let mut current: Option<usize> = None;
    for line in reply.lines() {
        let clean = line.trim().trim_start_matches(['*', '#', '-', ' ']).to_lowercase();
        let hit = labels.iter().enumerate().find_map(|(i, names)| {
            names.iter().find_map(|label| {
                let rest = clean.strip_prefix(label)?;
                let rest = rest.trim_start_matches('*').trim_start();
                rest.starts_with(':').then_some(i + 1)
            })
        });
        if let Some(k) = hit {
            current = Some(k);
            let body = line.split_once(':').map_or("", |(_, b)| b);
            out.entry(k).or_default().push(body.to_string());
            continue;
        }
        if let Some(k) = current {
            out.entry(k).or_default().push(line.to_string());
        }
    }
    out.into_iter()
        .filter_map(|(k, lines)| {
            let text = strip_markup(&lines.join("\n")).to_string();
            (!text.is_empty()).then_some((k, text))
        })
        .collect()
}

/// Strips a leading list marker (`1.`, `2)`, `-`, `*`) from a line.
pub fn strip_list_marker(line: &str) -> &str {
    let t = line.trim();
    let t = t.trim_start_matches(['-', '*', '\u{2022}']).trim_start();
    if let Some(c) = marker_re().captures(t) {
        if let Some(m) = c.get(3) {
            return strip_markup(&t[m.start()..]);
        }
    }
    strip_markup(t)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn numbered_sections_with_multiline_bodies() {
        let r = "Sure.\n1. first\ncontinued\n2) second\n**3.** third";
        let s = parse_numbered(r, 3);
        assert_eq!(s[&1], "first\ncontinued");
        assert_eq!(s[&2], "second");
        assert_eq!(s[&3], "third");
    }

    #[test]
    fn nested_lists_stay_inside_their_answer() {
        let r = "1. a\n2. b\n3. habits:\n  1. nails\n  2. hair\n  4. pen";
        let s = parse_numbered(r, 4);
        assert_eq!(s.len(), 3);
        assert!(s[&3].contains("4. pen"));
        let r = "1. a\n2. list:\n1. x\n2. y";
        assert_eq!(parse_numbered(r, 2)[&2], "list:\n1. x\n2. y");
    }

    #[test]
    fn out_of_order_markers_are_content() {
        let s = parse_numbered("2. skipped\n1. one\n3. three\n2. two", 3);
        assert_eq!(s[&1], "one\n3. three");
        assert_eq!(s[&2], "two");
    }

    #[test]
    fn labelled_fallback() {
        let r = "Dark secret: I lied.\nHabits: pacing\nand humming";
        let s = parse_labelled(r, &[&["dark secret"], &["family"], &["habits", "habitual behaviors"]]);
        assert_eq!(s[&1], "I lied.");
        assert_eq!(s[&3], "pacing\nand humming");
        assert!(!s.contains_key(&2));
    }

    #[test]
    fn list_markers() {
        assert_eq!(strip_list_marker("1. Why is it?"), "Why is it?");
        assert_eq!(strip_list_marker("- **Who** was there"), "Who** was there");
        assert_eq!(strip_list_marker("plain"), "plain");
    }
}
