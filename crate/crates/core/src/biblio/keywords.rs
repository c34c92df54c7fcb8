use super::records::PaperRecord;

const BUNDLED: &str = include_str!("../../data/keywords.txt");

/// Keywords shorter than this (in characters) only match whole tokens.
pub const SHORT_KEYWORD: usize = 5;

/// The bundled deep-learning keyword list.
pub fn default_keywords() -> Vec<String> {
    parse_keywords(BUNDLED)
}

/// One phrase per line; blank lines and `#` comments are skipped.
pub fn parse_keywords(text: &str) -> Vec<String> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(String::from)
        .collect()
}

/// Lowercases and collapses every run of non-alphanumeric characters into
/// one space, with a space at both ends.
fn normalize(text: &str) -> String {
    let mut out = String::with_capacity(text.len() + 2);
    out.push(' ');
    for ch in text.chars().flat_map(char::to_lowercase) {
        if ch.is_alphanumeric() {
            out.push(ch);
        } else if !out.ends_with(' ') {
            out.push(' ');
        }
    }
    if !out.ends_with(' ') {
        out.push(' ');
    }
    out
}

/// Compiled keyword set.
#[derive(Debug, Clone)]
pub struct KeywordMatcher {
    patterns: Vec<String>,
}

impl KeywordMatcher {
    pub fn new<S: AsRef<str>>(keywords: &[S]) -> Self {
        let patterns = keywords
            .iter()
            .filter_map(|k| {
                let n = normalize(k.as_ref());
                let core = n.trim();
                if core.is_empty() {
                    None
                } else if core.chars().count() < SHORT_KEYWORD {
                    Some(n)
                } else {
                    Some(core.to_string())
                }
            })
            .collect();
        Self { patterns }
    }

    pub fn matches_text(&self, text: &str) -> bool {
        let text = normalize(text);
        self.patterns.iter().any(|p| text.contains(p.as_str()))
    }

    pub fn matches(&self, paper: &PaperRecord) -> bool {
        self.matches_text(&paper.text())
    }
}

/// Records whose title or abstract contains any keyword.
pub fn filter_deep_learning<S: AsRef<str>>(records: &[PaperRecord], keywords: &[S]) -> Vec<PaperRecord> {
    let m = KeywordMatcher::new(keywords);
    records.iter().filter(|r| m.matches(r)).cloned().collect()
}
