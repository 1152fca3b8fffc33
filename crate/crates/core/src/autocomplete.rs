//! Completion triggering, prefix ranking and lab insertion strings.

use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use chrono::{DateTime, Duration, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ontology::{normalize, records, Concept, ConceptId, ConceptType, Lexicon};
use crate::record::{in_record, labs_for, LabResult, PatientRecord, TimeWindow};

#[derive(Error, Debug, PartialEq)]
pub enum AutocompleteError {
    #[error("cues.tsv line {line}: {message}")]
    CueParse { line: usize, message: String },

    #[error("unknown concept {0}")]
    UnknownConcept(ConceptId),

    #[error("{0} is not a lab or vital sign")]
    NotALab(ConceptId),

    #[error("no results in the {0} frame")]
    EmptyFrame(TimeFrame),

    #[error("no {stat} value in the {frame} frame")]
    MissingStat { frame: TimeFrame, stat: LabStat },
}

pub const MAX_SUGGESTIONS: usize = 10;
pub const IN_RECORD_BONUS: f64 = 0.2;
pub const MIN_TRIGGER_PREFIX: usize = 3;

const QUALITY_EXACT: f64 = 1.0;
const QUALITY_CANONICAL: f64 = 0.8;
const QUALITY_SYNONYM: f64 = 0.6;

const CUED_WEIGHT: f64 = 0.5;
const UNCUED_WEIGHT: f64 = 0.1;

/// Per-type weights. Nonnegative, summing to at most one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TypePrior {
    weights: [f64; 6],
}

impl TypePrior {
    pub fn uniform() -> Self {
        Self {
            weights: [1.0 / 6.0; 6],
        }
    }

    /// Favor one type, keeping a small weight on the rest.
    pub fn cued(t: ConceptType) -> Self {
        let mut weights = [UNCUED_WEIGHT; 6];
        weights[t.index()] = CUED_WEIGHT;
        Self { weights }
    }

    /// Build from arbitrary nonnegative weights, rescaled when they exceed one.
    pub fn from_weights(weights: [f64; 6]) -> Self {
        let clean = weights.map(|w| if w.is_finite() && w > 0.0 { w } else { 0.0 });
        let total: f64 = clean.iter().sum();
        let weights = if total > 1.0 { clean.map(|w| w / total) } else { clean };
        Self { weights }
    }

    pub fn weight(&self, t: ConceptType) -> f64 {
        self.weights[t.index()]
    }

    pub fn weights(&self) -> &[f64; 6] {
        &self.weights
    }

    /// The single highest-weighted type, if one stands out.
    pub fn favored(&self) -> Option<ConceptType> {
        let max = self.weights.iter().cloned().fold(f64::MIN, f64::max);
        let top: Vec<_> = ConceptType::ALL
            .into_iter()
            .filter(|t| self.weights[t.index()] == max)
            .collect();
        (top.len() == 1).then(|| top[0])
    }
}

impl Default for TypePrior {
    fn default() -> Self {
        Self::uniform()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TriggerDecision {
    pub trigger: bool,
    pub prior: TypePrior,
}

/// Decides, from the text before the caret, whether to open completions and
/// which concept types to favor. Implementations hold no per-call state.
pub trait ContextScorer: Send + Sync {
    fn score(&self, text_before_caret: &str) -> TriggerDecision;
}

/// Outcome of parsing a slash token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum SlashCommand {
    /// Bare `/`: open completions with the default ranking.
    Force,
    Filter(ConceptType),
}

/// `/l`, `/labs`, `/m`, `/meds`, `/c`, `/s`, `/p`, `/v` and bare `/`.
/// Anything else is literal text.
pub fn parse_slash_filter(token: &str) -> Option<SlashCommand> {
    Some(match token {
        "/" => SlashCommand::Force,
        "/l" | "/labs" => SlashCommand::Filter(ConceptType::Lab),
        "/m" | "/meds" => SlashCommand::Filter(ConceptType::Medication),
        "/c" => SlashCommand::Filter(ConceptType::Condition),
        "/s" => SlashCommand::Filter(ConceptType::Symptom),
        "/p" => SlashCommand::Filter(ConceptType::Procedure),
        "/v" => SlashCommand::Filter(ConceptType::VitalSign),
        _ => return None,
    })
}

/// What the user is completing, as parsed from the text before the caret.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AutocompleteQuery {
    /// The partial token at the caret. Never contains whitespace.
    pub prefix: String,
    /// Character offset where the prefix (or the slash command, when the
    /// command itself is the last token) starts.
    pub replace_from: usize,
    pub slash: Option<SlashCommand>,
    pub filter: Option<ConceptType>,
}

impl AutocompleteQuery {
    pub fn parse(text_before_caret: &str) -> Self {
        let chars: Vec<char> = text_before_caret.chars().collect();
        let mut start = chars.len();
        while start > 0 && !chars[start - 1].is_whitespace() {
            start -= 1;
        }
        let last: String = chars[start..].iter().collect();

        if let Some(cmd) = parse_slash_filter(&last) {
            return Self::with_slash(String::new(), start, cmd);
        }

        let mut prev_end = start;
        while prev_end > 0 && chars[prev_end - 1].is_whitespace() {
            prev_end -= 1;
        }
        let mut prev_start = prev_end;
        while prev_start > 0 && !chars[prev_start - 1].is_whitespace() {
            prev_start -= 1;
        }
        let prev: String = chars[prev_start..prev_end].iter().collect();
        if prev_end < start {
            if let Some(cmd) = parse_slash_filter(&prev) {
                return Self {
                    replace_from: prev_start,
                    ..Self::with_slash(last, start, cmd)
                };
            }
        }
        Self {
            prefix: last,
            replace_from: start,
            slash: None,
            filter: None,
        }
    }

    fn with_slash(prefix: String, start: usize, cmd: SlashCommand) -> Self {
        Self {
            prefix,
            replace_from: start,
            slash: Some(cmd),
            filter: match cmd {
                SlashCommand::Filter(t) => Some(t),
                SlashCommand::Force => None,
            },
        }
    }

    /// A slash command forces completions regardless of the scorer.
    pub fn forced(&self) -> bool {
        self.slash.is_some()
    }
}

/// Cue phrases that predict the type of the next concept.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CueList {
    cues: Vec<(String, ConceptType)>,
}

impl CueList {
    pub fn new<'a>(cues: impl IntoIterator<Item = (&'a str, ConceptType)>) -> Self {
        let mut cues: Vec<(String, ConceptType)> = cues
            .into_iter()
            .map(|(p, t)| (normalize(p), t))
            .filter(|(p, _)| !p.is_empty())
            .collect();
        // Longer phrases first so "history of" wins over a shorter suffix cue.
        cues.sort_by(|a, b| b.0.chars().count().cmp(&a.0.chars().count()).then(a.0.cmp(&b.0)));
        cues.dedup_by(|a, b| a.0 == b.0);
        Self { cues }
    }

    /// `phrase<TAB>concept_type` per line.
    pub fn parse(src: &str) -> Result<Self, AutocompleteError> {
        let mut out = Vec::new();
        for (line, fields) in records(src) {
            let err = |message: String| AutocompleteError::CueParse { line, message };
            if fields.len() < 2 {
                return Err(err("expected phrase and concept type".into()));
            }
            let t: ConceptType = fields[1].parse().map_err(err)?;
            out.push((fields[0], t));
        }
        Ok(Self::new(out))
    }

    pub fn len(&self) -> usize {
        self.cues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cues.is_empty()
    }

    /// The cue ending exactly at the end of `text`, on a word boundary.
    pub fn ending_at(&self, text: &str) -> Option<(&str, ConceptType)> {
        let norm = collapse(text);
        self.cues
            .iter()
            .find(|(p, _)| ends_with_phrase(&norm, p))
            .map(|(p, t)| (p.as_str(), *t))
    }

    /// The cue that ends last within `text`.
    pub fn last_in(&self, text: &str) -> Option<(&str, ConceptType)> {
        let norm = collapse(text);
        let mut best: Option<(usize, &str, ConceptType)> = None;
        for (p, t) in &self.cues {
            for (i, _) in norm.match_indices(p.as_str()) {
                let end = i + p.len();
                let before_ok = norm[..i].chars().next_back().is_none_or(|c| !c.is_alphanumeric());
                let after_ok = norm[end..].chars().next().is_none_or(|c| !c.is_alphanumeric());
                if before_ok && after_ok && best.is_none_or(|(e, _, _)| end > e) {
                    best = Some((end, p.as_str(), *t));
                }
            }
        }
        best.map(|(_, p, t)| (p, t))
    }
}

fn collapse(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

fn ends_with_phrase(norm: &str, phrase: &str) -> bool {
    norm.strip_suffix(phrase)
        .is_some_and(|rest| rest.chars().next_back().is_none_or(|c| !c.is_alphanumeric()))
}

/// Start of the clause containing the end of `text`.
fn clause_start(text: &str) -> usize {
    text.rfind(['.', ';', ':', '\n', '!', '?']).map_or(0, |i| i + 1)
}

/// Rule-based default scorer: cue phrases, slash commands, and typed
/// prefixes of at least three characters that match a lexicon form.
#[derive(Debug, Clone)]
pub struct RuleScorer {
    cues: CueList,
    index: Arc<PrefixIndex>,
}

impl RuleScorer {
    pub fn new(cues: CueList, index: Arc<PrefixIndex>) -> Self {
        Self { cues, index }
    }

    pub fn cues(&self) -> &CueList {
        &self.cues
    }
}

impl ContextScorer for RuleScorer {
    fn score(&self, text_before_caret: &str) -> TriggerDecision {
        let query = AutocompleteQuery::parse(text_before_caret);
        if query.forced() {
            return TriggerDecision {
                trigger: true,
                prior: TypePrior::uniform(),
            };
        }
        let before: String = text_before_caret.chars().take(query.replace_from).collect();
        if let Some((_, t)) = self.cues.ending_at(&before) {
            return TriggerDecision {
                trigger: true,
                prior: TypePrior::cued(t),
            };
        }
        let prefix = normalize(&query.prefix);
        let trigger = prefix.chars().count() >= MIN_TRIGGER_PREFIX && self.index.has_prefix(&prefix);
        let clause = &before[clause_start(&before)..];
        let prior = match self.cues.last_in(clause) {
            Some((_, t)) => TypePrior::cued(t),
            None => TypePrior::uniform(),
        };
        TriggerDecision { trigger, prior }
    }
}

/// Scorer decision, overridden to fire when the user typed a slash command.
pub fn should_trigger(scorer: &dyn ContextScorer, text_before_caret: &str) -> TriggerDecision {
    let mut decision = scorer.score(text_before_caret);
    if AutocompleteQuery::parse(text_before_caret).forced() {
        decision.trigger = true;
    }
    decision
}

/// Every normalized surface form, sorted for binary-searched prefix lookup.
#[derive(Debug, Clone, Default)]
pub struct PrefixIndex {
    entries: Vec<(String, u32, bool)>,
    by_type: [Vec<u32>; 6],
}

impl PrefixIndex {
    pub fn build(lexicon: &Lexicon) -> Self {
        let mut entries = Vec::new();
        let mut by_type: [Vec<u32>; 6] = Default::default();
        for (pos, c) in lexicon.concepts().iter().enumerate() {
            let canonical = normalize(&c.canonical_name);
            by_type[c.concept_type.index()].push(pos as u32);
            for form in c.normalized_forms() {
                if form.is_empty() {
                    continue;
                }
                let is_canonical = form == canonical;
                entries.push((form, pos as u32, is_canonical));
            }
        }
        entries.sort();
        entries.dedup();
        Self { entries, by_type }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn range(&self, prefix: &str) -> &[(String, u32, bool)] {
        let lo = self.entries.partition_point(|(f, _, _)| f.as_str() < prefix);
        let hi = lo + self.entries[lo..].partition_point(|(f, _, _)| f.starts_with(prefix));
        &self.entries[lo..hi]
    }

    /// Whether any normalized form starts with `prefix` (already normalized).
    pub fn has_prefix(&self, prefix: &str) -> bool {
        !self.range(prefix).is_empty()
    }

    /// Concept positions with their best match quality for `prefix`
    /// (already normalized), in lexicon order.
    pub fn matches(&self, prefix: &str, filter: Option<ConceptType>, lexicon: &Lexicon) -> Vec<(u32, f64)> {
        if prefix.is_empty() {
            let types: Vec<ConceptType> = match filter {
                Some(t) => vec![t],
                None => ConceptType::ALL.to_vec(),
            };
            let mut out: Vec<(u32, f64)> = types
                .iter()
                .flat_map(|t| self.by_type[t.index()].iter().map(|&p| (p, QUALITY_CANONICAL)))
                .collect();
            out.sort_by_key(|&(p, _)| p);
            return out;
        }
        let mut best: HashMap<u32, f64> = HashMap::new();
        let concepts = lexicon.concepts();
        for (form, pos, canonical) in self.range(prefix) {
            if filter.is_some_and(|t| concepts[*pos as usize].concept_type != t) {
                continue;
            }
            let q = match_quality(form, prefix, *canonical);
            let slot = best.entry(*pos).or_insert(q);
            if q > *slot {
                *slot = q;
            }
        }
        let mut out: Vec<(u32, f64)> = best.into_iter().collect();
        out.sort_by_key(|&(p, _)| p);
        out
    }
}

/// Quality of a form that starts with `prefix`.
pub fn match_quality(form: &str, prefix: &str, canonical: bool) -> f64 {
    if form == prefix {
        QUALITY_EXACT
    } else if canonical {
        QUALITY_CANONICAL
    } else {
        QUALITY_SYNONYM
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Suggestion {
    pub concept: ConceptId,
    pub display: String,
    pub concept_type: ConceptType,
    pub detail: String,
    pub score: f64,
    pub in_record: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SuggestConfig {
    pub max_suggestions: usize,
    pub in_record_bonus: f64,
}

impl Default for SuggestConfig {
    fn default() -> Self {
        Self {
            max_suggestions: MAX_SUGGESTIONS,
            in_record_bonus: IN_RECORD_BONUS,
        }
    }
}

fn plural(n: usize) -> String {
    match n {
        0 => "no results".to_string(),
        1 => "1 result".to_string(),
        n => format!("{n} results"),
    }
}

/// Text shown beside a suggestion to tell similar terms apart.
pub fn detail_text(concept: &Concept, record: Option<&PatientRecord>) -> String {
    match concept.concept_type {
        ConceptType::Lab | ConceptType::VitalSign => {
            let mut parts: Vec<String> = concept.detail.iter().cloned().collect();
            if let Some(r) = record {
                parts.push(plural(r.lab_count(&concept.id)));
            }
            parts.join(" · ")
        }
        ConceptType::Medication | ConceptType::Procedure | ConceptType::Condition
            if record.is_some_and(|r| in_record(r, &concept.id)) =>
        {
            "in patient medical record".to_string()
        }
        _ => concept.detail.clone().unwrap_or_default(),
    }
}

/// A match before its display payload is built.
struct Scored {
    pos: u32,
    score: f64,
    in_record: bool,
}

fn scored(
    query: &AutocompleteQuery,
    prior: &TypePrior,
    index: &PrefixIndex,
    lexicon: &Lexicon,
    record: Option<&PatientRecord>,
    config: &SuggestConfig,
) -> Vec<Scored> {
    let prefix = normalize(&query.prefix);
    let concepts = lexicon.concepts();
    index
        .matches(&prefix, query.filter, lexicon)
        .into_iter()
        .map(|(pos, quality)| {
            let c = &concepts[pos as usize];
            let present = record.is_some_and(|r| in_record(r, &c.id));
            let bonus = if present { config.in_record_bonus } else { 0.0 };
            Scored {
                pos,
                score: prior.weight(c.concept_type) * quality + bonus,
                in_record: present,
            }
        })
        .collect()
}

/// Score descending, then display name, then id.
fn ranking(lexicon: &Lexicon) -> impl Fn(&Scored, &Scored) -> std::cmp::Ordering + '_ {
    let concepts = lexicon.concepts();
    move |a, b| {
        let (ca, cb) = (&concepts[a.pos as usize], &concepts[b.pos as usize]);
        b.score
            .partial_cmp(&a.score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| ca.canonical_name.cmp(&cb.canonical_name))
            .then_with(|| ca.id.cmp(&cb.id))
    }
}

fn build(hits: Vec<Scored>, lexicon: &Lexicon, record: Option<&PatientRecord>) -> Vec<Suggestion> {
    let concepts = lexicon.concepts();
    hits.into_iter()
        .map(|h| {
            let c = &concepts[h.pos as usize];
            Suggestion {
                concept: c.id.clone(),
                display: c.canonical_name.clone(),
                concept_type: c.concept_type,
                detail: detail_text(c, record),
                score: h.score,
                in_record: h.in_record,
            }
        })
        .collect()
}

/// Every matching concept, ranked, without the display cap.
pub fn candidates(
    query: &AutocompleteQuery,
    prior: &TypePrior,
    index: &PrefixIndex,
    lexicon: &Lexicon,
    record: Option<&PatientRecord>,
    config: &SuggestConfig,
) -> Vec<Suggestion> {
    let mut hits = scored(query, prior, index, lexicon, record, config);
    hits.sort_by(ranking(lexicon));
    build(hits, lexicon, record)
}

/// The top suggestions for a query. Only the kept entries are materialized.
pub fn suggest(
    query: &AutocompleteQuery,
    prior: &TypePrior,
    index: &PrefixIndex,
    lexicon: &Lexicon,
    record: Option<&PatientRecord>,
    config: &SuggestConfig,
) -> Vec<Suggestion> {
    let mut hits = scored(query, prior, index, lexicon, record, config);
    let cmp = ranking(lexicon);
    let k = config.max_suggestions;
    if k == 0 {
        return Vec::new();
    }
    if hits.len() > k {
        hits.select_nth_unstable_by(k - 1, &cmp);
        hits.truncate(k);
    }
    hits.sort_by(&cmp);
    build(hits, lexicon, record)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TimeFrame {
    Month,
    Year,
    AllTime,
}

impl TimeFrame {
    pub const ALL: [TimeFrame; 3] = [TimeFrame::Month, TimeFrame::Year, TimeFrame::AllTime];

    pub fn window(self, as_of: DateTime<Utc>) -> TimeWindow {
        match self {
            TimeFrame::Month => TimeWindow::trailing(Duration::days(30), as_of),
            TimeFrame::Year => TimeWindow::trailing(Duration::days(365), as_of),
            TimeFrame::AllTime => TimeWindow {
                start: None,
                end: Some(as_of),
            },
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            TimeFrame::Month => "past month",
            TimeFrame::Year => "past year",
            TimeFrame::AllTime => "all time",
        }
    }
}

impl fmt::Display for TimeFrame {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabStat {
    Last,
    First,
    Min,
    Max,
}

impl LabStat {
    pub const ALL: [LabStat; 4] = [LabStat::Last, LabStat::First, LabStat::Min, LabStat::Max];

    pub fn name(self) -> &'static str {
        match self {
            LabStat::Last => "last",
            LabStat::First => "first",
            LabStat::Min => "min",
            LabStat::Max => "max",
        }
    }
}

impl fmt::Display for LabStat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabAggregate {
    pub min: f64,
    pub max: f64,
    pub avg: f64,
    /// Largest number of decimals among the frame's results.
    pub precision: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabStatValue {
    pub stat: LabStat,
    pub value: f64,
    pub precision: u8,
    pub timestamp: DateTime<Utc>,
    pub result_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabFrameNode {
    pub frame: TimeFrame,
    pub count: usize,
    pub aggregate: LabAggregate,
    pub stats: Vec<LabStatValue>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabTree {
    pub concept: ConceptId,
    pub name: String,
    pub unit: String,
    /// Frames with at least one result, shortest first.
    pub frames: Vec<LabFrameNode>,
}

fn stat_value(stat: LabStat, r: &LabResult) -> LabStatValue {
    LabStatValue {
        stat,
        value: r.value,
        precision: r.precision,
        timestamp: r.timestamp,
        result_id: r.id.clone(),
    }
}

fn frame_node(frame: TimeFrame, results: &[&LabResult]) -> Option<LabFrameNode> {
    let first = *results.first()?;
    let last = *results.last()?;
    // Ties go to the earliest result.
    let min = results.iter().fold(first, |m, r| if r.value < m.value { r } else { m });
    let max = results.iter().fold(first, |m, r| if r.value > m.value { r } else { m });
    let sum: f64 = results.iter().map(|r| r.value).sum();
    let avg = (sum / results.len() as f64).clamp(min.value, max.value);
    Some(LabFrameNode {
        frame,
        count: results.len(),
        aggregate: LabAggregate {
            min: min.value,
            max: max.value,
            avg,
            precision: results.iter().map(|r| r.precision).max().unwrap_or(0),
        },
        stats: vec![
            stat_value(LabStat::Last, last),
            stat_value(LabStat::First, first),
            stat_value(LabStat::Min, min),
            stat_value(LabStat::Max, max),
        ],
    })
}

/// Aggregates over the past month, past year and all time, as of `as_of`.
pub fn lab_tree(
    concept: &ConceptId,
    lexicon: &Lexicon,
    record: &PatientRecord,
    as_of: DateTime<Utc>,
) -> Result<LabTree, AutocompleteError> {
    let c = lexicon
        .concept(concept)
        .ok_or_else(|| AutocompleteError::UnknownConcept(concept.clone()))?;
    if !matches!(c.concept_type, ConceptType::Lab | ConceptType::VitalSign) {
        return Err(AutocompleteError::NotALab(concept.clone()));
    }
    let frames: Vec<LabFrameNode> = TimeFrame::ALL
        .into_iter()
        .filter_map(|f| frame_node(f, &labs_for(record, concept, &f.window(as_of))))
        .collect();
    let unit = labs_for(record, concept, &TimeWindow::all())
        .last()
        .map(|l| l.unit.clone())
        .unwrap_or_default();
    Ok(LabTree {
        concept: concept.clone(),
        name: c.canonical_name.clone(),
        unit,
        frames,
    })
}

/// A node picked from the lab tree menu.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LabSelection {
    Name,
    Aggregate { frame: TimeFrame },
    Stat { frame: TimeFrame, stat: LabStat },
}

fn fixed(value: f64, precision: u8) -> String {
    format!("{:.*}", precision as usize, value)
}

/// `NAME`, `NAME (MIN - MAX) AVG` or `NAME STAT VALUE`.
pub fn format_lab_insertion(tree: &LabTree, selection: &LabSelection) -> Result<String, AutocompleteError> {
    let node = |frame: TimeFrame| {
        tree.frames
            .iter()
            .find(|n| n.frame == frame)
            .ok_or(AutocompleteError::EmptyFrame(frame))
    };
    match *selection {
        LabSelection::Name => Ok(tree.name.clone()),
        LabSelection::Aggregate { frame } => {
            let a = &node(frame)?.aggregate;
            Ok(format!(
                "{} ({} - {}) {}",
                tree.name,
                fixed(a.min, a.precision),
                fixed(a.max, a.precision),
                fixed(a.avg, a.precision)
            ))
        }
        LabSelection::Stat { frame, stat } => {
            let s = node(frame)?
                .stats
                .iter()
                .find(|s| s.stat == stat)
                .ok_or(AutocompleteError::MissingStat { frame, stat })?;
            Ok(format!("{} {} {}", tree.name, stat.name(), fixed(s.value, s.precision)))
        }
    }
}
