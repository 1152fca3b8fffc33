//! Synthetic patient histories and the concept-indexed queries cards and
//! autocomplete run against them.
//!
//! A patient fixture is a JSON document:
//!
//! ```json
//! {
//!   "patient_id": "demo-001",
//!   "labs":    [{"id": "L1", "concept": "lab-glucose", "value": "104", "unit": "mg/dL",
//!                "timestamp": "2024-03-01T08:00:00Z"}],
//!   "notes":   [{"id": "N1", "timestamp": "2024-03-01T09:00:00Z",
//!                "author_role": "physician", "text": "..."}],
//!   "entries": [{"id": "E1", "concept": "med-metformin", "kind": "medication",
//!                "timestamp": "2024-03-01T09:00:00Z", "source_note": "N1"}]
//! }
//! ```
//!
//! Lab values may be strings or numbers; the digits after the decimal point
//! set the precision used when the value is printed back.

pub mod generate;

use std::collections::{BTreeSet, HashMap, HashSet};
use std::path::Path;

use chrono::{DateTime, Duration, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ontology::{ConceptId, ConceptType, Lexicon, ReferenceRange};
use crate::recognizer::Automaton;

#[derive(Error, Debug)]
pub enum RecordError {
    #[error("failed to read patient file: {0}")]
    Io(#[from] std::io::Error),

    #[error("malformed patient file: {0}")]
    Json(#[from] serde_json::Error),

    #[error("{item}: unknown concept {concept}")]
    UnknownConcept { item: String, concept: String },

    #[error("{item}: concept {concept} is a {actual}, expected {expected}")]
    WrongType {
        item: String,
        concept: String,
        actual: ConceptType,
        expected: String,
    },

    #[error("{item}: unparseable timestamp {value:?}")]
    Timestamp { item: String, value: String },

    #[error("{item}: unparseable value {value:?}")]
    Value { item: String, value: String },

    #[error("duplicate record item id {0}")]
    DuplicateId(String),

    #[error("{item}: source note {note} does not exist")]
    MissingSourceNote { item: String, note: String },
}

pub type RecordResult<T> = Result<T, RecordError>;

/// Characters of context kept on each side of a mention in a snippet.
pub const SNIPPET_CONTEXT: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FixtureValue {
    Text(String),
    Number(serde_json::Number),
}

impl FixtureValue {
    fn parse(&self) -> Option<(f64, u8)> {
        let text = match self {
            FixtureValue::Text(s) => s.trim().to_string(),
            FixtureValue::Number(n) => n.to_string(),
        };
        let value: f64 = text.parse().ok()?;
        if !value.is_finite() {
            return None;
        }
        let precision = if text.contains(['e', 'E']) {
            0
        } else {
            text.split_once('.').map_or(0, |(_, frac)| frac.len()) as u8
        };
        Some((value, precision))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabFixture {
    pub id: String,
    pub concept: String,
    pub value: FixtureValue,
    #[serde(default)]
    pub unit: String,
    pub timestamp: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_range: Option<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoteFixture {
    pub id: String,
    pub timestamp: String,
    pub author_role: String,
    pub text: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EntryKind {
    Medication,
    Procedure,
    Condition,
}

impl EntryKind {
    fn concept_type(self) -> ConceptType {
        match self {
            EntryKind::Medication => ConceptType::Medication,
            EntryKind::Procedure => ConceptType::Procedure,
            EntryKind::Condition => ConceptType::Condition,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntryFixture {
    pub id: String,
    pub concept: String,
    pub kind: EntryKind,
    pub timestamp: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_note: Option<String>,
}

/// On-disk patient document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientFixture {
    pub patient_id: String,
    #[serde(default)]
    pub labs: Vec<LabFixture>,
    #[serde(default)]
    pub notes: Vec<NoteFixture>,
    #[serde(default)]
    pub entries: Vec<EntryFixture>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LabResult {
    pub id: String,
    pub concept: ConceptId,
    pub value: f64,
    /// Decimal places as written in the source record.
    pub precision: u8,
    pub unit: String,
    pub timestamp: DateTime<Utc>,
    pub abnormal: bool,
    pub reference_range: Option<ReferenceRange>,
}

impl LabResult {
    pub fn formatted_value(&self) -> String {
        format!("{:.*}", self.precision as usize, self.value)
    }
}

/// A recognized mention inside a prior note.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct NoteMention {
    pub start: usize,
    pub end: usize,
    pub candidates: Vec<ConceptId>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PriorNote {
    pub id: String,
    pub timestamp: DateTime<Utc>,
    pub author_role: String,
    pub text: String,
    pub mentions: Vec<NoteMention>,
    /// Every candidate of every mention; ambiguous mentions count for all.
    pub concepts: BTreeSet<ConceptId>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RecordEntry {
    pub id: String,
    pub concept: ConceptId,
    pub kind: EntryKind,
    pub timestamp: DateTime<Utc>,
    pub source_note: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct PatientRecord {
    pub patient_id: String,
    pub labs: Vec<LabResult>,
    pub notes: Vec<PriorNote>,
    pub entries: Vec<RecordEntry>,
    #[serde(skip)]
    present: HashSet<ConceptId>,
    #[serde(skip)]
    lab_counts: HashMap<ConceptId, usize>,
}

impl PartialEq for PatientRecord {
    fn eq(&self, other: &Self) -> bool {
        self.patient_id == other.patient_id
            && self.labs == other.labs
            && self.notes == other.notes
            && self.entries == other.entries
    }
}

/// Inclusive time window; open ends are unbounded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TimeWindow {
    pub start: Option<DateTime<Utc>>,
    pub end: Option<DateTime<Utc>>,
}

impl TimeWindow {
    pub fn all() -> Self {
        Self::default()
    }

    /// `[as_of - span, as_of]`.
    pub fn trailing(span: Duration, as_of: DateTime<Utc>) -> Self {
        Self {
            start: Some(as_of - span),
            end: Some(as_of),
        }
    }

    pub fn contains(&self, t: DateTime<Utc>) -> bool {
        self.start.is_none_or(|s| t >= s) && self.end.is_none_or(|e| t <= e)
    }
}

pub fn parse_timestamp(item: &str, value: &str) -> RecordResult<DateTime<Utc>> {
    DateTime::parse_from_rfc3339(value.trim())
        .map(|t| t.with_timezone(&Utc))
        .map_err(|_| RecordError::Timestamp {
            item: item.to_string(),
            value: value.to_string(),
        })
}

impl PatientRecord {
    pub fn empty(patient_id: impl Into<String>) -> Self {
        Self {
            patient_id: patient_id.into(),
            labs: Vec::new(),
            notes: Vec::new(),
            entries: Vec::new(),
            present: HashSet::new(),
            lab_counts: HashMap::new(),
        }
    }

    pub fn lab(&self, id: &str) -> Option<&LabResult> {
        self.labs.iter().find(|l| l.id == id)
    }

    pub fn note(&self, id: &str) -> Option<&PriorNote> {
        self.notes.iter().find(|n| n.id == id)
    }

    pub fn entry(&self, id: &str) -> Option<&RecordEntry> {
        self.entries.iter().find(|e| e.id == id)
    }

    /// Whether any item in the record carries this id.
    pub fn has_item(&self, id: &str) -> bool {
        self.lab(id).is_some() || self.note(id).is_some() || self.entry(id).is_some()
    }

    /// All-time number of lab results for a concept.
    pub fn lab_count(&self, concept: &ConceptId) -> usize {
        self.lab_counts.get(concept).copied().unwrap_or(0)
    }

    fn reindex(&mut self) {
        self.present.clear();
        self.lab_counts.clear();
        for l in &self.labs {
            self.present.insert(l.concept.clone());
            *self.lab_counts.entry(l.concept.clone()).or_default() += 1;
        }
        for e in &self.entries {
            self.present.insert(e.concept.clone());
        }
        for n in &self.notes {
            self.present.extend(n.concepts.iter().cloned());
        }
    }
}

/// Validate a fixture against the lexicon and index its notes.
pub fn ingest(fixture: &PatientFixture, lexicon: &Lexicon, automaton: &Automaton) -> RecordResult<PatientRecord> {
    let mut seen = HashSet::new();
    let mut check_id = |id: &str| {
        if seen.insert(id.to_string()) {
            Ok(())
        } else {
            Err(RecordError::DuplicateId(id.to_string()))
        }
    };
    let concept_of = |item: &str, id: &str| {
        lexicon
            .concept(&ConceptId::new(id))
            .ok_or_else(|| RecordError::UnknownConcept {
                item: item.to_string(),
                concept: id.to_string(),
            })
    };

    let mut record = PatientRecord::empty(fixture.patient_id.clone());

    for lab in &fixture.labs {
        check_id(&lab.id)?;
        let concept = concept_of(&lab.id, &lab.concept)?;
        if !matches!(concept.concept_type, ConceptType::Lab | ConceptType::VitalSign) {
            return Err(RecordError::WrongType {
                item: lab.id.clone(),
                concept: lab.concept.clone(),
                actual: concept.concept_type,
                expected: "lab or vital-sign".into(),
            });
        }
        let (value, precision) = lab.value.parse().ok_or_else(|| RecordError::Value {
            item: lab.id.clone(),
            value: format!("{:?}", lab.value),
        })?;
        let reference_range = lab
            .reference_range
            .map(|(low, high)| ReferenceRange { low, high })
            .or(concept.reference_range);
        record.labs.push(LabResult {
            id: lab.id.clone(),
            concept: concept.id.clone(),
            value,
            precision,
            unit: lab.unit.clone(),
            timestamp: parse_timestamp(&lab.id, &lab.timestamp)?,
            abnormal: reference_range.is_some_and(|r| !r.contains(value)),
            reference_range,
        });
    }

    for note in &fixture.notes {
        check_id(&note.id)?;
        let mentions: Vec<NoteMention> = automaton
            .scan(&note.text, &[])
            .into_iter()
            .map(|s| NoteMention {
                start: s.start,
                end: s.end,
                candidates: s.candidates,
            })
            .collect();
        let concepts = mentions
            .iter()
            .flat_map(|m| m.candidates.iter().cloned())
            .collect();
        record.notes.push(PriorNote {
            id: note.id.clone(),
            timestamp: parse_timestamp(&note.id, &note.timestamp)?,
            author_role: note.author_role.clone(),
            text: note.text.clone(),
            mentions,
            concepts,
        });
    }

    for entry in &fixture.entries {
        check_id(&entry.id)?;
        let concept = concept_of(&entry.id, &entry.concept)?;
        if concept.concept_type != entry.kind.concept_type() {
            return Err(RecordError::WrongType {
                item: entry.id.clone(),
                concept: entry.concept.clone(),
                actual: concept.concept_type,
                expected: entry.kind.concept_type().to_string(),
            });
        }
        if let Some(note) = &entry.source_note {
            if !fixture.notes.iter().any(|n| &n.id == note) {
                return Err(RecordError::MissingSourceNote {
                    item: entry.id.clone(),
                    note: note.clone(),
                });
            }
        }
        record.entries.push(RecordEntry {
            id: entry.id.clone(),
            concept: concept.id.clone(),
            kind: entry.kind,
            timestamp: parse_timestamp(&entry.id, &entry.timestamp)?,
            source_note: entry.source_note.clone(),
        });
    }

    record.reindex();
    Ok(record)
}

pub fn ingest_str(json: &str, lexicon: &Lexicon, automaton: &Automaton) -> RecordResult<PatientRecord> {
    let fixture: PatientFixture = serde_json::from_str(json)?;
    ingest(&fixture, lexicon, automaton)
}

pub fn ingest_file(path: &Path, lexicon: &Lexicon, automaton: &Automaton) -> RecordResult<PatientRecord> {
    ingest_str(&std::fs::read_to_string(path)?, lexicon, automaton)
}

/// Results for `concept` inside `window`, oldest first.
pub fn labs_for<'a>(record: &'a PatientRecord, concept: &ConceptId, window: &TimeWindow) -> Vec<&'a LabResult> {
    let mut out: Vec<&LabResult> = record
        .labs
        .iter()
        .filter(|l| &l.concept == concept && window.contains(l.timestamp))
        .collect();
    out.sort_by_key(|l| l.timestamp);
    out
}

/// A mention of a concept with surrounding context.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Snippet {
    pub note_id: String,
    pub concept: ConceptId,
    pub mention_start: usize,
    pub mention_end: usize,
    pub start: usize,
    pub end: usize,
    pub text: String,
}

#[derive(Debug, Clone)]
pub struct NoteHit<'a> {
    pub note: &'a PriorNote,
    pub snippets: Vec<Snippet>,
}

/// `[start, end)` widened by `context` characters and then out to whitespace.
pub fn snippet_bounds(chars: &[char], start: usize, end: usize, context: usize) -> (usize, usize) {
    let mut s = start.saturating_sub(context);
    while s > 0 && !chars[s - 1].is_whitespace() {
        s -= 1;
    }
    let mut e = (end + context).min(chars.len());
    while e < chars.len() && !chars[e].is_whitespace() {
        e += 1;
    }
    (s, e)
}

/// The concept and every concept it links to.
pub fn link_closure(concept: &ConceptId, lexicon: &Lexicon) -> Vec<ConceptId> {
    let mut out = vec![concept.clone()];
    for l in lexicon.links(concept) {
        if !out.contains(&l.target) {
            out.push(l.target.clone());
        }
    }
    out
}

/// Notes mentioning the concept or a linked concept, oldest first.
pub fn notes_mentioning<'a>(record: &'a PatientRecord, concept: &ConceptId, lexicon: &Lexicon) -> Vec<NoteHit<'a>> {
    let closure = link_closure(concept, lexicon);
    let mut hits: Vec<NoteHit<'a>> = record
        .notes
        .iter()
        .filter_map(|note| {
            let chars: Vec<char> = note.text.chars().collect();
            let snippets: Vec<Snippet> = note
                .mentions
                .iter()
                .filter_map(|m| {
                    let matched = closure.iter().find(|c| m.candidates.contains(c))?;
                    let (start, end) = snippet_bounds(&chars, m.start, m.end, SNIPPET_CONTEXT);
                    Some(Snippet {
                        note_id: note.id.clone(),
                        concept: matched.clone(),
                        mention_start: m.start,
                        mention_end: m.end,
                        start,
                        end,
                        text: chars[start..end].iter().collect(),
                    })
                })
                .collect();
            (!snippets.is_empty()).then_some(NoteHit { note, snippets })
        })
        .collect();
    hits.sort_by(|a, b| a.note.timestamp.cmp(&b.note.timestamp).then(a.note.id.cmp(&b.note.id)));
    hits
}

pub fn in_record(record: &PatientRecord, concept: &ConceptId) -> bool {
    record.present.contains(concept)
}
