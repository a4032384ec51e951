//! Text primitives shared by the lexicon, the report parser and the question
//! encoder: byte spans, word tokens, sentence segmentation and a greedy
//! longest-phrase matcher with word-boundary semantics.

use alloc::string::String;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

/// Half-open byte range into a string.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub const fn new(start: usize, end: usize) -> Self {
        Span { start, end }
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn overlaps(&self, other: &Span) -> bool {
        self.start < other.end && other.start < self.end
    }

    pub fn contains(&self, other: &Span) -> bool {
        self.start <= other.start && other.end <= self.end
    }

    pub fn shift(self, offset: usize) -> Span {
        Span::new(self.start + offset, self.end + offset)
    }

    pub fn slice<'a>(&self, text: &'a str) -> &'a str {
        &text[self.start..self.end]
    }
}

/// Bytes that belong to a word. Non-ASCII bytes count as word bytes so a
/// boundary never falls inside a multi-byte character.
#[inline]
pub fn is_word_byte(b: u8) -> bool {
    b.is_ascii_alphanumeric() || b >= 0x80
}

/// Maximal runs of word bytes.
pub fn word_tokens(text: &str) -> Vec<Span> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        if is_word_byte(bytes[i]) {
            let start = i;
            while i < bytes.len() && is_word_byte(bytes[i]) {
                i += 1;
            }
            out.push(Span::new(start, i));
        } else {
            i += 1;
        }
    }
    out
}

/// Lowercased word tokens of a question; punctuation is dropped.
pub fn tokenize_question(text: &str) -> Vec<String> {
    let lower = text.to_lowercase();
    word_tokens(&lower)
        .into_iter()
        .map(|s| String::from(s.slice(&lower)))
        .collect()
}

/// Splits on `.`, `!` or `?` followed by whitespace (or end of text).
/// Returned spans cover the sentence including its terminator, with
/// surrounding whitespace trimmed; empty sentences are skipped.
pub fn sentences(text: &str) -> Vec<Span> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut start = 0;
    let mut i = 0;
    while i < bytes.len() {
        let b = bytes[i];
        let terminal = matches!(b, b'.' | b'!' | b'?')
            && (i + 1 == bytes.len() || bytes[i + 1].is_ascii_whitespace());
        if terminal {
            push_trimmed(text, start, i + 1, &mut out);
            start = i + 1;
        }
        i += 1;
    }
    push_trimmed(text, start, bytes.len(), &mut out);
    out
}

fn push_trimmed(text: &str, start: usize, end: usize, out: &mut Vec<Span>) {
    let bytes = text.as_bytes();
    let mut s = start;
    let mut e = end;
    while s < e && bytes[s].is_ascii_whitespace() {
        s += 1;
    }
    while e > s && bytes[e - 1].is_ascii_whitespace() {
        e -= 1;
    }
    if s < e {
        out.push(Span::new(s, e));
    }
}

/// Collapses internal whitespace runs to single spaces and trims.
pub fn normalize_phrase(raw: &str) -> String {
    let mut out = String::with_capacity(raw.len());
    for (i, part) in raw.split_whitespace().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        out.push_str(part);
    }
    out
}

/// Greedy left-to-right matcher over a fixed phrase set.
///
/// At every candidate position the longest phrase wins; equal lengths go to
/// the lower key. A phrase whose first (last) byte is a word byte may only
/// start (end) at a word boundary. Matches never overlap.
#[derive(Clone, Debug, Default)]
pub struct PhraseMatcher {
    // Sorted by length descending, then key ascending.
    phrases: Vec<(String, usize)>,
}

impl PhraseMatcher {
    pub fn new<I, S>(phrases: I) -> Self
    where
        I: IntoIterator<Item = (S, usize)>,
        S: Into<String>,
    {
        let mut phrases: Vec<(String, usize)> = phrases
            .into_iter()
            .map(|(p, k)| (p.into(), k))
            .filter(|(p, _)| !p.is_empty())
            .collect();
        phrases.sort_by(|a, b| b.0.len().cmp(&a.0.len()).then(a.1.cmp(&b.1)).then(a.0.cmp(&b.0)));
        phrases.dedup();
        PhraseMatcher { phrases }
    }

    pub fn is_empty(&self) -> bool {
        self.phrases.is_empty()
    }

    /// Longest phrase matching at `pos`, if any.
    pub fn match_at(&self, text: &str, pos: usize) -> Option<(Span, usize)> {
        let bytes = text.as_bytes();
        let before_is_word = pos > 0 && is_word_byte(bytes[pos - 1]);
        for (phrase, key) in &self.phrases {
            let p = phrase.as_bytes();
            let end = pos + p.len();
            if end > bytes.len() || &bytes[pos..end] != p {
                continue;
            }
            if is_word_byte(p[0]) && before_is_word {
                continue;
            }
            if is_word_byte(p[p.len() - 1]) && end < bytes.len() && is_word_byte(bytes[end]) {
                continue;
            }
            return Some((Span::new(pos, end), *key));
        }
        None
    }

    /// All matches in `text`, skipping anything that overlaps `exclude`.
    pub fn find_all(&self, text: &str, exclude: &[Span]) -> Vec<(Span, usize)> {
        let mut out = Vec::new();
        let mut pos = 0;
        while pos < text.len() {
            if !text.is_char_boundary(pos) {
                pos += 1;
                continue;
            }
            if let Some(blocker) = exclude.iter().find(|s| s.start <= pos && pos < s.end) {
                pos = blocker.end;
                continue;
            }
            match self.match_at(text, pos) {
                Some((span, key)) if !exclude.iter().any(|s| s.overlaps(&span)) => {
                    out.push((span, key));
                    pos = span.end;
                }
                _ => pos += 1,
            }
        }
        out
    }
}
