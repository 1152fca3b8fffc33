//! Post recognition: find lexicon surface forms in already-typed text.
//!
//! Text is lowered and whitespace-collapsed into a stream of characters that
//! remembers where each character came from. An Aho-Corasick automaton over
//! the normalized surface forms reports every occurrence in that stream;
//! occurrences that do not start and end on token boundaries, or that touch
//! a masked chip, are dropped, and the rest are reduced to leftmost-longest
//! non-overlapping spans.

use std::collections::{BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ontology::{normalize, ConceptId, ConceptType, Lexicon, SurfaceIndex};
use crate::text::overlaps;

#[derive(Error, Debug, PartialEq)]
pub enum RecognizerError {
    #[error("cannot build a recognizer over an empty lexicon")]
    EmptyLexicon,

    #[error("{choice} is not a candidate for {surface:?}")]
    NotACandidate { choice: ConceptId, surface: String },
}

/// The hundred most frequent English words. Lexicon forms that collide with
/// them ("as" for atrial stenosis) are excluded from post recognition.
pub const COMMON_ENGLISH_WORDS: [&str; 100] = [
    "the", "be", "to", "of", "and", "a", "in", "that", "have", "i", "it", "for", "not", "on",
    "with", "he", "as", "you", "do", "at", "this", "but", "his", "by", "from", "they", "we",
    "say", "her", "she", "or", "an", "will", "my", "one", "all", "would", "there", "their",
    "what", "so", "up", "out", "if", "about", "who", "get", "which", "go", "me", "when", "make",
    "can", "like", "time", "no", "just", "him", "know", "take", "people", "into", "year",
    "your", "good", "some", "could", "them", "see", "other", "than", "then", "now", "look",
    "only", "come", "its", "over", "think", "also", "back", "after", "use", "two", "how",
    "our", "work", "first", "well", "way", "even", "new", "want", "because", "any", "these",
    "give", "day", "most", "us",
];

/// Normalized surface forms that post recognition never reports.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct StopList {
    forms: BTreeSet<String>,
}

impl StopList {
    pub fn empty() -> Self {
        Self::default()
    }

    /// Keep only the forms that actually occur in `index`.
    pub fn from_forms<'a>(forms: impl IntoIterator<Item = &'a str>, index: &SurfaceIndex) -> Self {
        let forms = forms
            .into_iter()
            .map(normalize)
            .filter(|f| index.contains(f))
            .collect();
        Self { forms }
    }

    /// One form per line; `#` comments allowed.
    pub fn parse(src: &str, index: &SurfaceIndex) -> Self {
        Self::from_forms(
            src.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.starts_with('#')),
            index,
        )
    }

    /// Common English words that collide with lexicon forms.
    pub fn seeded(lexicon: &Lexicon) -> Self {
        Self::from_forms(COMMON_ENGLISH_WORDS, lexicon.surface_index())
    }

    pub fn contains(&self, normalized: &str) -> bool {
        self.forms.contains(normalized)
    }

    pub fn forms(&self) -> impl Iterator<Item = &str> {
        self.forms.iter().map(String::as_str)
    }
}

#[derive(Debug, Clone)]
struct Node {
    next: Vec<(char, u32)>,
    fail: u32,
    pattern: Option<u32>,
    /// Nearest state on the failure chain that ends a pattern.
    dict: Option<u32>,
}

impl Node {
    fn new() -> Self {
        Self {
            next: Vec::new(),
            fail: 0,
            pattern: None,
            dict: None,
        }
    }

    fn goto(&self, c: char) -> Option<u32> {
        self.next
            .binary_search_by_key(&c, |&(k, _)| k)
            .ok()
            .map(|i| self.next[i].1)
    }
}

#[derive(Debug, Clone)]
struct Pattern {
    form: String,
    len: usize,
    candidates: Vec<ConceptId>,
}

/// Compiled multi-pattern matcher over the lexicon's normalized surface forms.
#[derive(Debug, Clone)]
pub struct Automaton {
    nodes: Vec<Node>,
    patterns: Vec<Pattern>,
}

/// A recognized term in section text. Offsets are character offsets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecognitionSpan {
    pub start: usize,
    pub end: usize,
    pub surface: String,
    pub candidates: Vec<ConceptId>,
    #[serde(default)]
    pub resolved: Option<ConceptId>,
}

impl RecognitionSpan {
    pub fn range(&self) -> (usize, usize) {
        (self.start, self.end)
    }

    pub fn is_ambiguous(&self) -> bool {
        self.resolved.is_none() && self.candidates.len() > 1
    }
}

/// How a post recognition is coloured in the editor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DisplayClass {
    Typed(ConceptType),
    MixedGray,
}

/// A raw occurrence before leftmost-longest selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RawMatch {
    pub start: usize,
    pub end: usize,
    pattern: u32,
}

/// Lowered, whitespace-collapsed text with a map back to source characters.
struct Stream {
    chars: Vec<char>,
    origin: Vec<usize>,
    first_piece: Vec<bool>,
    last_piece: Vec<bool>,
}

impl Stream {
    fn new(source: &[char]) -> Self {
        let mut s = Stream {
            chars: Vec::with_capacity(source.len()),
            origin: Vec::with_capacity(source.len()),
            first_piece: Vec::with_capacity(source.len()),
            last_piece: Vec::with_capacity(source.len()),
        };
        let mut in_space = false;
        for (i, &c) in source.iter().enumerate() {
            if c.is_whitespace() {
                if !in_space {
                    s.push(' ', i, true, true);
                    in_space = true;
                }
                continue;
            }
            in_space = false;
            let lower: Vec<char> = c.to_lowercase().collect();
            let n = lower.len();
            for (k, l) in lower.into_iter().enumerate() {
                s.push(l, i, k == 0, k + 1 == n);
            }
        }
        s
    }

    fn push(&mut self, c: char, origin: usize, first: bool, last: bool) {
        self.chars.push(c);
        self.origin.push(origin);
        self.first_piece.push(first);
        self.last_piece.push(last);
    }
}

impl Automaton {
    pub fn build(lexicon: &Lexicon, stoplist: &StopList) -> Result<Self, RecognizerError> {
        if lexicon.is_empty() {
            return Err(RecognizerError::EmptyLexicon);
        }
        let mut forms: Vec<(&str, &[ConceptId])> = lexicon
            .surface_index()
            .forms()
            .filter(|(f, _)| !stoplist.contains(f))
            .collect();
        forms.sort_by(|a, b| a.0.cmp(b.0));

        let mut nodes = vec![Node::new()];
        let mut patterns = Vec::with_capacity(forms.len());
        for (form, ids) in forms {
            let mut state = 0usize;
            for c in form.chars() {
                state = match nodes[state].next.binary_search_by_key(&c, |&(k, _)| k) {
                    Ok(i) => nodes[state].next[i].1 as usize,
                    Err(i) => {
                        let id = nodes.len() as u32;
                        nodes[state].next.insert(i, (c, id));
                        nodes.push(Node::new());
                        id as usize
                    }
                };
            }
            nodes[state].pattern = Some(patterns.len() as u32);
            patterns.push(Pattern {
                form: form.to_string(),
                len: form.chars().count(),
                candidates: ids.to_vec(),
            });
        }

        let mut queue = VecDeque::new();
        for k in 0..nodes[0].next.len() {
            let child = nodes[0].next[k].1;
            nodes[child as usize].fail = 0;
            queue.push_back(child);
        }
        while let Some(s) = queue.pop_front() {
            for k in 0..nodes[s as usize].next.len() {
                let (c, t) = nodes[s as usize].next[k];
                let mut f = nodes[s as usize].fail;
                let fail = loop {
                    if let Some(x) = nodes[f as usize].goto(c) {
                        break x;
                    }
                    if f == 0 {
                        break 0;
                    }
                    f = nodes[f as usize].fail;
                };
                let dict = if nodes[fail as usize].pattern.is_some() {
                    Some(fail)
                } else {
                    nodes[fail as usize].dict
                };
                let node = &mut nodes[t as usize];
                node.fail = fail;
                node.dict = dict;
                queue.push_back(t);
            }
        }

        Ok(Self { nodes, patterns })
    }

    pub fn pattern_count(&self) -> usize {
        self.patterns.len()
    }

    pub fn state_count(&self) -> usize {
        self.nodes.len()
    }

    /// The normalized forms this automaton reports.
    pub fn forms(&self) -> impl Iterator<Item = &str> {
        self.patterns.iter().map(|p| p.form.as_str())
    }

    /// Every boundary-aligned occurrence of a lexicon form, overlapping or not.
    pub fn find_all(&self, text: &str) -> Vec<RawMatch> {
        let source: Vec<char> = text.chars().collect();
        let stream = Stream::new(&source);
        let mut out = Vec::new();
        let mut state = 0u32;
        for (j, &c) in stream.chars.iter().enumerate() {
            loop {
                if let Some(next) = self.nodes[state as usize].goto(c) {
                    state = next;
                    break;
                }
                if state == 0 {
                    break;
                }
                state = self.nodes[state as usize].fail;
            }
            let node = &self.nodes[state as usize];
            let mut hit = node.pattern.map(|_| state).or(node.dict);
            while let Some(h) = hit {
                let pattern = self.nodes[h as usize].pattern.expect("dict links end patterns");
                if let Some(m) = self.align(&source, &stream, j, pattern) {
                    out.push(m);
                }
                hit = self.nodes[h as usize].dict;
            }
        }
        out
    }

    fn align(&self, source: &[char], stream: &Stream, end: usize, pattern: u32) -> Option<RawMatch> {
        let len = self.patterns[pattern as usize].len;
        let first = end + 1 - len;
        if !stream.first_piece[first] || !stream.last_piece[end] {
            return None;
        }
        let start = stream.origin[first];
        let stop = stream.origin[end] + 1;
        let left_ok = start == 0 || !source[start - 1].is_alphanumeric();
        let right_ok = stop == source.len() || !source[stop].is_alphanumeric();
        (left_ok && right_ok).then_some(RawMatch {
            start,
            end: stop,
            pattern,
        })
    }

    /// Leftmost-longest, non-overlapping recognitions that avoid `masked`.
    pub fn scan(&self, text: &str, masked: &[(usize, usize)]) -> Vec<RecognitionSpan> {
        let mut matches: Vec<RawMatch> = self
            .find_all(text)
            .into_iter()
            .filter(|m| !masked.iter().any(|&r| overlaps((m.start, m.end), r)))
            .collect();
        matches.sort_by(|a, b| a.start.cmp(&b.start).then(b.end.cmp(&a.end)));

        let chars: Vec<char> = text.chars().collect();
        let mut spans = Vec::new();
        let mut frontier = 0;
        for m in matches {
            if m.start < frontier {
                continue;
            }
            frontier = m.end;
            let candidates = self.patterns[m.pattern as usize].candidates.clone();
            let resolved = (candidates.len() == 1).then(|| candidates[0].clone());
            spans.push(RecognitionSpan {
                start: m.start,
                end: m.end,
                surface: chars[m.start..m.end].iter().collect(),
                candidates,
                resolved,
            });
        }
        spans
    }
}

pub fn build_automaton(lexicon: &Lexicon, stoplist: &StopList) -> Result<Automaton, RecognizerError> {
    Automaton::build(lexicon, stoplist)
}

pub fn scan(automaton: &Automaton, text: &str, masked: &[(usize, usize)]) -> Vec<RecognitionSpan> {
    automaton.scan(text, masked)
}

/// Bind an ambiguous span to one of its candidates.
pub fn disambiguate(span: &RecognitionSpan, choice: &ConceptId) -> Result<RecognitionSpan, RecognizerError> {
    if !span.candidates.contains(choice) {
        return Err(RecognizerError::NotACandidate {
            choice: choice.clone(),
            surface: span.surface.clone(),
        });
    }
    Ok(RecognitionSpan {
        resolved: Some(choice.clone()),
        ..span.clone()
    })
}

pub fn display_class(span: &RecognitionSpan, lexicon: &Lexicon) -> DisplayClass {
    let type_of = |id: &ConceptId| lexicon.concept(id).map(|c| c.concept_type);
    if let Some(t) = span.resolved.as_ref().and_then(type_of) {
        return DisplayClass::Typed(t);
    }
    let mut types = span.candidates.iter().filter_map(type_of);
    match types.next() {
        Some(first) if types.all(|t| t == first) => DisplayClass::Typed(first),
        _ => DisplayClass::MixedGray,
    }
}
