//! Negation scope and modifier attachment for recognized spans.
//!
//! Negation follows the negex pattern: a pre-trigger ("no", "denies") negates
//! spans within `scope_window` tokens after it, a post-trigger ("is ruled
//! out") negates spans within the window before it, and a terminator ("but",
//! ".") closes the scope. A negated span that is followed by a list connector
//! ("," "or" "and") renews the window, so "no A, B, or C" negates all three.
//!
//! Modifiers are attached greedily: whitespace-separated vocabulary tokens
//! immediately left of a span become its prefix.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ontology::{normalize, Lexicon, ModifierClass, ModifierVocab};
use crate::recognizer::RecognitionSpan;
use crate::text::overlaps;

#[derive(Error, Debug, PartialEq)]
pub enum NegationError {
    #[error("negation_rules.tsv:{line}: {message}")]
    Parse { line: usize, message: String },

    #[error("phrase {0:?} is both a trigger and a terminator")]
    TriggerIsTerminator(String),

    #[error("scope window must be at least one token")]
    EmptyWindow,

    #[error("span {0:?} is not resolved to a single concept")]
    Unresolved(String),

    #[error("concept {0} is not in the lexicon")]
    UnknownConcept(String),
}

const CONNECTORS: [&str; 5] = [",", "or", "and", "nor", "/"];

pub const DEFAULT_SCOPE_WINDOW: usize = 6;

/// Trigger, terminator and window configuration.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NegationRules {
    pre_triggers: Vec<Vec<String>>,
    post_triggers: Vec<Vec<String>>,
    terminators: Vec<Vec<String>>,
    scope_window: usize,
}

impl NegationRules {
    pub fn new<'a>(
        pre: impl IntoIterator<Item = &'a str>,
        post: impl IntoIterator<Item = &'a str>,
        terminators: impl IntoIterator<Item = &'a str>,
        scope_window: usize,
    ) -> Result<Self, NegationError> {
        if scope_window == 0 {
            return Err(NegationError::EmptyWindow);
        }
        let phrases = |src: &mut dyn Iterator<Item = &'a str>| -> Vec<Vec<String>> {
            let mut v: Vec<Vec<String>> = src
                .map(phrase_tokens)
                .filter(|p| !p.is_empty())
                .collect();
            v.sort();
            v.dedup();
            v
        };
        let pre_triggers = phrases(&mut pre.into_iter());
        let post_triggers = phrases(&mut post.into_iter());
        let terminators = phrases(&mut terminators.into_iter());
        for t in pre_triggers.iter().chain(&post_triggers) {
            if terminators.contains(t) {
                return Err(NegationError::TriggerIsTerminator(t.join(" ")));
            }
        }
        Ok(Self {
            pre_triggers,
            post_triggers,
            terminators,
            scope_window,
        })
    }

    /// Classic negex-style defaults.
    pub fn defaults() -> Self {
        Self::new(
            [
                "no",
                "not",
                "denies",
                "denied",
                "denying",
                "without",
                "negative for",
                "free of",
                "absence of",
                "no evidence of",
                "no signs of",
                "no sign of",
                "never had",
                "no history of",
                "no complaints of",
                "fails to reveal",
            ],
            [
                "is ruled out",
                "was ruled out",
                "were ruled out",
                "has been ruled out",
                "ruled out",
                "is absent",
                "was absent",
                "are absent",
                "not seen",
                "was negative",
                "is negative",
            ],
            ["but", "however", "although", ".", ";", ":", "!", "?"],
            DEFAULT_SCOPE_WINDOW,
        )
        .expect("default negation rules are consistent")
    }

    /// `kind<TAB>phrase` lines, kind one of `pre`, `post`, `terminator`,
    /// plus an optional `scope_window<TAB>N` line.
    pub fn parse(src: &str) -> Result<Self, NegationError> {
        let mut pre = Vec::new();
        let mut post = Vec::new();
        let mut term = Vec::new();
        let mut window = DEFAULT_SCOPE_WINDOW;
        for (i, line) in src.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.trim_start().starts_with('#') {
                continue;
            }
            let err = |message: String| NegationError::Parse { line: i + 1, message };
            let (kind, phrase) = line
                .split_once('\t')
                .ok_or_else(|| err("expected kind<TAB>phrase".into()))?;
            match kind.trim() {
                "pre" => pre.push(phrase),
                "post" => post.push(phrase),
                "terminator" => term.push(phrase),
                "scope_window" => {
                    window = phrase
                        .trim()
                        .parse()
                        .map_err(|_| err(format!("bad scope window {phrase:?}")))?
                }
                other => return Err(err(format!("unknown rule kind {other:?}"))),
            }
        }
        Self::new(pre, post, term, window)
    }

    pub fn scope_window(&self) -> usize {
        self.scope_window
    }
}

fn phrase_tokens(phrase: &str) -> Vec<String> {
    tokenize(phrase).into_iter().map(|t| t.text).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum TokenKind {
    Word,
    Punct,
}

#[derive(Debug, Clone)]
struct Token {
    start: usize,
    end: usize,
    text: String,
    kind: TokenKind,
}

fn is_joiner(c: char) -> bool {
    matches!(c, '-' | '\'' | '\u{2019}')
}

/// Words are alphanumeric runs joined by internal hyphens or apostrophes;
/// every other non-space character is its own punctuation token.
fn tokenize(text: &str) -> Vec<Token> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            i += 1;
        } else if c.is_alphanumeric() {
            let start = i;
            while i < chars.len()
                && (chars[i].is_alphanumeric()
                    || (is_joiner(chars[i])
                        && i + 1 < chars.len()
                        && chars[i + 1].is_alphanumeric()))
            {
                i += 1;
            }
            out.push(Token {
                start,
                end: i,
                text: chars[start..i].iter().flat_map(|c| c.to_lowercase()).collect(),
                kind: TokenKind::Word,
            });
        } else {
            out.push(Token {
                start: i,
                end: i + 1,
                text: c.to_string(),
                kind: TokenKind::Punct,
            });
            i += 1;
        }
    }
    out
}

#[derive(Debug, Clone, Copy)]
enum Unit {
    Span(usize),
    Tok(usize),
}

/// Interleave tokens and spans; tokens touching a span fold into it.
fn units(tokens: &[Token], spans: &[RecognitionSpan]) -> Vec<Unit> {
    let mut order: Vec<usize> = (0..spans.len()).collect();
    order.sort_by_key(|&i| spans[i].start);
    let mut out = Vec::with_capacity(tokens.len());
    let mut next_span = 0;
    for (ti, tok) in tokens.iter().enumerate() {
        while next_span < order.len() && spans[order[next_span]].end <= tok.start {
            out.push(Unit::Span(order[next_span]));
            next_span += 1;
        }
        let inside = order[next_span..]
            .iter()
            .take_while(|&&s| spans[s].start < tok.end)
            .any(|&s| overlaps(spans[s].range(), (tok.start, tok.end)));
        if !inside {
            out.push(Unit::Tok(ti));
        }
    }
    out.extend(order[next_span..].iter().map(|&s| Unit::Span(s)));
    out
}

struct Scope<'a> {
    units: &'a [Unit],
    tokens: &'a [Token],
    rules: &'a NegationRules,
}

impl Scope<'_> {
    fn word(&self, k: usize) -> Option<&str> {
        match self.units.get(k)? {
            Unit::Tok(t) => Some(self.tokens[*t].text.as_str()),
            Unit::Span(_) => None,
        }
    }

    /// Length of the longest phrase in `set` starting at unit `k`.
    fn phrase_at(&self, set: &[Vec<String>], k: usize) -> Option<usize> {
        set.iter()
            .filter(|p| p.iter().enumerate().all(|(j, w)| self.word(k + j) == Some(w)))
            .map(Vec::len)
            .max()
    }

    /// Longest phrase in `set` ending at unit `k` (inclusive).
    fn phrase_ending_at(&self, set: &[Vec<String>], k: usize) -> Option<usize> {
        set.iter()
            .filter(|p| p.len() <= k + 1)
            .filter(|p| {
                let first = k + 1 - p.len();
                p.iter().enumerate().all(|(j, w)| self.word(first + j) == Some(w))
            })
            .map(Vec::len)
            .max()
    }

    fn is_connector(&self, k: usize) -> bool {
        self.word(k).is_some_and(|w| CONNECTORS.contains(&w))
    }

    fn costs(&self, k: usize) -> bool {
        match self.units[k] {
            Unit::Tok(t) => self.tokens[t].kind == TokenKind::Word && !self.is_connector(k),
            Unit::Span(_) => true,
        }
    }

    fn forward(&self, from: usize, negated: &mut [bool]) {
        let window = self.rules.scope_window;
        let mut remaining = window;
        let mut k = from;
        while k < self.units.len() && remaining > 0 {
            if self.phrase_at(&self.rules.terminators, k).is_some() {
                break;
            }
            if let Unit::Span(s) = self.units[k] {
                negated[s] = true;
            }
            if self.costs(k) {
                remaining -= 1;
            }
            if matches!(self.units[k], Unit::Span(_)) && self.is_connector(k + 1) {
                remaining = window;
            }
            k += 1;
        }
    }

    fn backward(&self, before: usize, negated: &mut [bool]) {
        let window = self.rules.scope_window;
        let mut remaining = window;
        let mut k = before;
        while k > 0 && remaining > 0 {
            k -= 1;
            if self.phrase_ending_at(&self.rules.terminators, k).is_some() {
                break;
            }
            if let Unit::Span(s) = self.units[k] {
                negated[s] = true;
            }
            if self.costs(k) {
                remaining -= 1;
            }
            if matches!(self.units[k], Unit::Span(_)) && k > 0 && self.is_connector(k - 1) {
                remaining = window;
            }
        }
    }
}

/// Negation status for each span, in input order.
pub fn negation_flags(text: &str, spans: &[RecognitionSpan], rules: &NegationRules) -> Vec<bool> {
    let tokens = tokenize(text);
    let units = units(&tokens, spans);
    let scope = Scope {
        units: &units,
        tokens: &tokens,
        rules,
    };
    let mut negated = vec![false; spans.len()];
    let mut k = 0;
    while k < units.len() {
        let pre = scope.phrase_at(&rules.pre_triggers, k);
        let post = scope.phrase_at(&rules.post_triggers, k);
        match (pre, post) {
            (Some(p), q) if q.is_none_or(|q| p >= q) => {
                scope.forward(k + p, &mut negated);
                k += p;
            }
            (_, Some(q)) => {
                scope.backward(k, &mut negated);
                k += q;
            }
            _ => k += 1,
        }
    }
    negated
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Modifier {
    pub term: String,
    pub class: ModifierClass,
}

/// A recognition with its negation status and modifier prefix.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotatedSpan {
    #[serde(flatten)]
    pub span: RecognitionSpan,
    pub negated: bool,
    pub modifiers: Vec<Modifier>,
}

impl AnnotatedSpan {
    pub fn plain(span: RecognitionSpan) -> Self {
        Self {
            span,
            negated: false,
            modifiers: Vec::new(),
        }
    }
}

pub fn detect_negations(text: &str, spans: &[RecognitionSpan], rules: &NegationRules) -> Vec<AnnotatedSpan> {
    negation_flags(text, spans, rules)
        .into_iter()
        .zip(spans)
        .map(|(negated, span)| AnnotatedSpan {
            span: span.clone(),
            negated,
            modifiers: Vec::new(),
        })
        .collect()
}

/// Greedily consume vocabulary tokens immediately left of each span.
pub fn attach_modifiers(text: &str, spans: Vec<AnnotatedSpan>, vocab: &ModifierVocab) -> Vec<AnnotatedSpan> {
    let chars: Vec<char> = text.chars().collect();
    let ranges: Vec<(usize, usize)> = spans.iter().map(|s| s.span.range()).collect();
    let word_char = |c: char| c.is_alphanumeric() || is_joiner(c);

    spans
        .into_iter()
        .enumerate()
        .map(|(i, mut span)| {
            let mut modifiers = Vec::new();
            let mut cursor = span.span.start.min(chars.len());
            loop {
                let mut p = cursor;
                while p > 0 && chars[p - 1].is_whitespace() {
                    p -= 1;
                }
                if p == cursor {
                    break;
                }
                let mut q = p;
                while q > 0 && word_char(chars[q - 1]) {
                    q -= 1;
                }
                if q == p || !chars[q].is_alphanumeric() {
                    break;
                }
                if ranges
                    .iter()
                    .enumerate()
                    .any(|(j, &r)| j != i && overlaps(r, (q, p)))
                {
                    break;
                }
                let word: String = chars[q..p].iter().collect();
                let Some(class) = vocab.class_of(&word) else {
                    break;
                };
                modifiers.push(Modifier {
                    term: normalize(&word),
                    class,
                });
                cursor = q;
            }
            modifiers.reverse();
            span.modifiers = modifiers;
            span
        })
        .collect()
}

/// Negation and modifiers in one pass.
pub fn annotate(
    text: &str,
    spans: &[RecognitionSpan],
    rules: &NegationRules,
    vocab: &ModifierVocab,
) -> Vec<AnnotatedSpan> {
    attach_modifiers(text, detect_negations(text, spans, rules), vocab)
}

/// Text a chip stands for when copied into another section.
pub fn render_negated(span: &AnnotatedSpan, lexicon: &Lexicon) -> Result<String, NegationError> {
    let id = span
        .span
        .resolved
        .as_ref()
        .ok_or_else(|| NegationError::Unresolved(span.span.surface.clone()))?;
    let concept = lexicon
        .concept(id)
        .ok_or_else(|| NegationError::UnknownConcept(id.to_string()))?;
    let mut parts: Vec<&str> = Vec::with_capacity(span.modifiers.len() + 2);
    if span.negated {
        parts.push("no");
    }
    parts.extend(span.modifiers.iter().map(|m| m.term.as_str()));
    parts.push(&concept.canonical_name);
    Ok(parts.join(" "))
}
