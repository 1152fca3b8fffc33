//! The note model: fixed sections, immutable chips, edits, completions,
//! re-scans and section autofill.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autocomplete::{format_lab_insertion, AutocompleteError, AutocompleteQuery, LabSelection};
use crate::engine::Engine;
use crate::negation::AnnotatedSpan;
use crate::ontology::{BodySystem, ConceptId, ConceptType};
use crate::recognizer::{display_class, DisplayClass, RecognitionSpan, RecognizerError};
use crate::record::{in_record, PatientRecord};
use crate::text::{char_len, overlaps, slice, splice};

#[derive(Error, Debug, PartialEq)]
pub enum NoteError {
    #[error("offset {offset} is past the end of a {len}-character section")]
    OutOfRange { offset: usize, len: usize },

    #[error("range {start}..{end} is inverted")]
    InvertedRange { start: usize, end: usize },

    #[error("chip {0} cannot be modified, only deleted or moved whole")]
    ChipImmutable(u64),

    #[error("note is at version {actual}, request was for version {expected}")]
    StaleVersion { expected: u64, actual: u64 },

    #[error("no chip {0} in this section")]
    UnknownChip(u64),

    #[error("{0} already has text; autofill only fills empty sections")]
    SectionNotEmpty(Section),

    #[error("no template for {0}")]
    NoTemplate(Section),

    #[error("unknown concept {0}")]
    UnknownConcept(ConceptId),

    #[error(transparent)]
    Recognizer(#[from] RecognizerError),

    #[error(transparent)]
    Autocomplete(#[from] AutocompleteError),
}

pub type NoteResult<T> = Result<T, NoteError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Section {
    Hpi,
    Ros,
    PhysicalExam,
    Mdm,
    ClinicianComment,
}

impl Section {
    pub const ALL: [Section; 5] = [
        Section::Hpi,
        Section::Ros,
        Section::PhysicalExam,
        Section::Mdm,
        Section::ClinicianComment,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Section::Hpi => "HPI",
            Section::Ros => "ROS",
            Section::PhysicalExam => "Physical Exam",
            Section::Mdm => "MDM",
            Section::ClinicianComment => "Clinician Comment",
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Section::Hpi => "hpi",
            Section::Ros => "ros",
            Section::PhysicalExam => "physical-exam",
            Section::Mdm => "mdm",
            Section::ClinicianComment => "clinician-comment",
        }
    }

    /// Template file name without extension.
    pub fn file_stem(self) -> String {
        self.as_str().replace('-', "_")
    }
}

impl fmt::Display for Section {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Section {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key: String = s
            .trim()
            .chars()
            .filter(|c| !matches!(c, '-' | '_' | ' '))
            .flat_map(char::to_lowercase)
            .collect();
        Section::ALL
            .into_iter()
            .find(|sec| sec.as_str().replace('-', "") == key)
            .ok_or_else(|| format!("unknown section {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ChipOrigin {
    Autocompleted,
    PostRecognized,
}

/// A structured, immutable span of section text bound to a concept.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chip {
    pub id: u64,
    pub origin: ChipOrigin,
    #[serde(flatten)]
    pub annotation: AnnotatedSpan,
    pub display: DisplayClass,
    pub in_record: bool,
}

impl Chip {
    pub fn start(&self) -> usize {
        self.annotation.span.start
    }

    pub fn end(&self) -> usize {
        self.annotation.span.end
    }

    pub fn range(&self) -> (usize, usize) {
        self.annotation.span.range()
    }

    pub fn span(&self) -> &RecognitionSpan {
        &self.annotation.span
    }

    pub fn resolved(&self) -> Option<&ConceptId> {
        self.annotation.span.resolved.as_ref()
    }

    fn shift(&mut self, delta: isize) {
        let s = &mut self.annotation.span;
        s.start = (s.start as isize + delta) as usize;
        s.end = (s.end as isize + delta) as usize;
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SectionDoc {
    pub text: String,
    /// Sorted by start, pairwise disjoint.
    pub chips: Vec<Chip>,
}

impl SectionDoc {
    pub fn len(&self) -> usize {
        char_len(&self.text)
    }

    pub fn is_empty(&self) -> bool {
        self.text.is_empty()
    }

    pub fn chip(&self, id: u64) -> Option<&Chip> {
        self.chips.iter().find(|c| c.id == id)
    }

    fn chip_mut(&mut self, id: u64) -> Option<&mut Chip> {
        self.chips.iter_mut().find(|c| c.id == id)
    }

    fn check_offset(&self, offset: usize) -> NoteResult<()> {
        let len = self.len();
        if offset > len {
            Err(NoteError::OutOfRange { offset, len })
        } else {
            Ok(())
        }
    }

    fn check_range(&self, start: usize, end: usize) -> NoteResult<()> {
        if start > end {
            return Err(NoteError::InvertedRange { start, end });
        }
        self.check_offset(end)
    }

    /// The chip whose interior contains `offset`, if any.
    fn chip_containing(&self, offset: usize) -> Option<&Chip> {
        self.chips.iter().find(|c| c.start() < offset && offset < c.end())
    }

    /// Reject ranges that cut a chip; return the chips fully covered.
    fn covered_chips(&self, start: usize, end: usize) -> NoteResult<Vec<u64>> {
        let mut covered = Vec::new();
        for c in &self.chips {
            if start == end {
                if c.start() < start && start < c.end() {
                    return Err(NoteError::ChipImmutable(c.id));
                }
            } else if start <= c.start() && c.end() <= end {
                covered.push(c.id);
            } else if overlaps((start, end), c.range()) {
                return Err(NoteError::ChipImmutable(c.id));
            }
        }
        Ok(covered)
    }

    /// Replace `[start, end)` with `text`, dropping covered chips and
    /// shifting later ones. The caller has already validated the range.
    fn splice_unchecked(&mut self, start: usize, end: usize, text: &str) {
        let delta = char_len(text) as isize - (end - start) as isize;
        splice(&mut self.text, start, end, text);
        self.chips
            .retain(|c| !(start <= c.start() && c.end() <= end && (start < end || c.start() == c.end())));
        for c in &mut self.chips {
            if c.start() >= end && !(start == end && c.start() < start) {
                c.shift(delta);
            }
        }
    }

    fn sort_chips(&mut self) {
        self.chips.sort_by_key(|c| c.start());
    }
}

/// A text change expressed in character offsets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "kebab-case")]
pub enum Edit {
    Insert { offset: usize, text: String },
    Delete { start: usize, end: usize },
    Replace { start: usize, end: usize, text: String },
    /// Cut a chip and its text and paste them at `to`, an offset in the
    /// text before the cut.
    MoveChip { chip: u64, to: usize },
}

/// What to insert when the user accepts a dropdown entry.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Completion {
    Concept { concept: ConceptId },
    Lab { concept: ConceptId, selection: LabSelection },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Accepted {
    pub chip: u64,
    pub concept: ConceptId,
    /// Caret position after the inserted text.
    pub caret: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Note {
    pub id: String,
    pub patient_id: String,
    pub sections: BTreeMap<Section, SectionDoc>,
    pub version: u64,
    next_chip: u64,
}

impl Note {
    pub fn new(id: impl Into<String>, patient_id: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            patient_id: patient_id.into(),
            sections: Section::ALL.into_iter().map(|s| (s, SectionDoc::default())).collect(),
            version: 0,
            next_chip: 1,
        }
    }

    pub fn section(&self, section: Section) -> &SectionDoc {
        &self.sections[&section]
    }

    fn section_mut(&mut self, section: Section) -> &mut SectionDoc {
        self.sections.entry(section).or_default()
    }

    fn alloc_chip(&mut self) -> u64 {
        let id = self.next_chip;
        self.next_chip += 1;
        id
    }

    pub fn chip(&self, id: u64) -> Option<(Section, &Chip)> {
        self.sections
            .iter()
            .find_map(|(s, d)| d.chip(id).map(|c| (*s, c)))
    }

    pub fn check_version(&self, expected: u64) -> NoteResult<()> {
        if expected == self.version {
            Ok(())
        } else {
            Err(NoteError::StaleVersion {
                expected,
                actual: self.version,
            })
        }
    }

    /// Apply a text edit. Whole chips may be deleted or moved; any edit that
    /// would change part of a chip is rejected and leaves the note untouched.
    pub fn apply_edit(&mut self, section: Section, edit: &Edit) -> NoteResult<()> {
        let doc = self.section_mut(section);
        match edit {
            Edit::Insert { offset, text } => {
                doc.check_offset(*offset)?;
                if let Some(c) = doc.chip_containing(*offset) {
                    return Err(NoteError::ChipImmutable(c.id));
                }
                doc.splice_unchecked(*offset, *offset, text);
            }
            Edit::Delete { start, end } => {
                doc.check_range(*start, *end)?;
                doc.covered_chips(*start, *end)?;
                doc.splice_unchecked(*start, *end, "");
            }
            Edit::Replace { start, end, text } => {
                doc.check_range(*start, *end)?;
                doc.covered_chips(*start, *end)?;
                doc.splice_unchecked(*start, *end, text);
            }
            Edit::MoveChip { chip, to } => {
                let c = doc.chip(*chip).ok_or(NoteError::UnknownChip(*chip))?.clone();
                doc.check_offset(*to)?;
                let (s, e) = c.range();
                if s < *to && *to < e {
                    return Err(NoteError::ChipImmutable(c.id));
                }
                if let Some(other) = doc.chip_containing(*to) {
                    return Err(NoteError::ChipImmutable(other.id));
                }
                let text = slice(&doc.text, s, e).to_string();
                doc.splice_unchecked(s, e, "");
                let target = if *to >= e { *to - (e - s) } else { *to };
                doc.splice_unchecked(target, target, &text);
                let mut moved = c;
                moved.shift(target as isize - s as isize);
                doc.chips.push(moved);
                doc.sort_chips();
            }
        }
        self.version += 1;
        Ok(())
    }

    fn make_chip(&mut self, engine: &Engine, record: &PatientRecord, span: RecognitionSpan, origin: ChipOrigin) -> Chip {
        let display = display_class(&span, engine.lexicon());
        let in_rec = span.resolved.as_ref().is_some_and(|c| in_record(record, c));
        Chip {
            id: self.alloc_chip(),
            origin,
            annotation: AnnotatedSpan::plain(span),
            display,
            in_record: in_rec,
        }
    }

    /// Recompute negation, modifiers and markers for every chip in a section.
    fn reannotate(&mut self, engine: &Engine, record: &PatientRecord, section: Section) {
        let doc = self.section_mut(section);
        doc.sort_chips();
        let spans: Vec<RecognitionSpan> = doc.chips.iter().map(|c| c.annotation.span.clone()).collect();
        let annotated = engine.annotate(&doc.text, &spans);
        for (chip, a) in doc.chips.iter_mut().zip(annotated) {
            chip.annotation = a;
            chip.display = display_class(&chip.annotation.span, engine.lexicon());
            chip.in_record = chip.resolved().is_some_and(|c| in_record(record, c));
        }
    }

    /// Post-recognize new terms in a section. Post-recognized chips that no
    /// longer sit on token boundaries are dropped first; the rest mask the
    /// scan. Returns the ids of new chips. Does not change the version.
    pub fn rescan(&mut self, engine: &Engine, record: &PatientRecord, section: Section) -> Vec<u64> {
        let doc = self.section_mut(section);
        let chars: Vec<char> = doc.text.chars().collect();
        let alnum_at = |i: usize| chars.get(i).is_some_and(|c| c.is_alphanumeric());
        doc.chips.retain(|c| {
            c.origin == ChipOrigin::Autocompleted
                || !((c.start() > 0 && alnum_at(c.start() - 1) && alnum_at(c.start())) || (alnum_at(c.end()) && c.end() > 0 && alnum_at(c.end() - 1)))
        });
        let masked: Vec<(usize, usize)> = doc.chips.iter().map(Chip::range).collect();
        let found = engine.scan(&doc.text, &masked);
        let mut new_ids = Vec::with_capacity(found.len());
        for span in found {
            let chip = self.make_chip(engine, record, span, ChipOrigin::PostRecognized);
            new_ids.push(chip.id);
            self.section_mut(section).chips.push(chip);
        }
        self.reannotate(engine, record, section);
        new_ids
    }

    /// Replace the token at the caret (and any slash filter before it) with
    /// a resolved chip.
    #[allow(clippy::too_many_arguments)]
    pub fn accept_completion(
        &mut self,
        engine: &Engine,
        record: &PatientRecord,
        section: Section,
        caret: usize,
        expected_version: u64,
        completion: &Completion,
        as_of: DateTime<Utc>,
    ) -> NoteResult<Accepted> {
        self.check_version(expected_version)?;
        let doc = self.section(section);
        doc.check_offset(caret)?;
        if let Some(c) = doc.chip_containing(caret) {
            return Err(NoteError::ChipImmutable(c.id));
        }
        let query = AutocompleteQuery::parse(slice(&doc.text, 0, caret));
        let from = doc
            .chips
            .iter()
            .filter(|c| c.end() <= caret && c.end() > query.replace_from)
            .map(Chip::end)
            .max()
            .unwrap_or(query.replace_from);

        let (concept, text) = match completion {
            Completion::Concept { concept } => {
                let c = engine
                    .lexicon()
                    .concept(concept)
                    .ok_or_else(|| NoteError::UnknownConcept(concept.clone()))?;
                (concept.clone(), c.canonical_name.clone())
            }
            Completion::Lab { concept, selection } => {
                let tree = engine.lab_tree(concept, record, as_of)?;
                (concept.clone(), format_lab_insertion(&tree, selection)?)
            }
        };

        let len = char_len(&text);
        let span = RecognitionSpan {
            start: from,
            end: from + len,
            surface: text.clone(),
            candidates: vec![concept.clone()],
            resolved: Some(concept.clone()),
        };
        let chip = self.make_chip(engine, record, span, ChipOrigin::Autocompleted);
        let id = chip.id;
        let doc = self.section_mut(section);
        doc.splice_unchecked(from, caret, &text);
        doc.chips.push(chip);
        self.reannotate(engine, record, section);
        self.version += 1;
        Ok(Accepted {
            chip: id,
            concept,
            caret: from + len,
        })
    }

    /// Bind an ambiguous chip to one of its candidates.
    pub fn disambiguate(
        &mut self,
        engine: &Engine,
        record: &PatientRecord,
        section: Section,
        chip: u64,
        choice: &ConceptId,
    ) -> NoteResult<()> {
        let doc = self.section_mut(section);
        let c = doc.chip_mut(chip).ok_or(NoteError::UnknownChip(chip))?;
        let span = crate::recognizer::disambiguate(&c.annotation.span, choice)?;
        c.annotation.span = span;
        self.reannotate(engine, record, section);
        self.version += 1;
        Ok(())
    }

    /// Fill an empty section from its template. ROS lists the symptom chips
    /// captured elsewhere in the note under their body systems.
    pub fn autofill_section(&mut self, engine: &Engine, record: &PatientRecord, section: Section) -> NoteResult<()> {
        if !self.section(section).text.trim().is_empty() {
            return Err(NoteError::SectionNotEmpty(section));
        }
        let doc = if section == Section::Ros {
            self.build_ros(engine, record)
        } else {
            let template = engine.template(section).ok_or(NoteError::NoTemplate(section))?;
            SectionDoc {
                text: template.to_string(),
                chips: Vec::new(),
            }
        };
        *self.section_mut(section) = doc;
        self.rescan(engine, record, section);
        self.version += 1;
        Ok(())
    }

    /// Symptom chips outside ROS in note order, first mention of each concept.
    pub fn captured_symptoms(&self, engine: &Engine) -> Vec<&Chip> {
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        for (section, doc) in &self.sections {
            if *section == Section::Ros {
                continue;
            }
            for chip in &doc.chips {
                let Some(id) = chip.resolved() else { continue };
                let is_symptom = engine
                    .lexicon()
                    .concept(id)
                    .is_some_and(|c| c.concept_type == ConceptType::Symptom);
                if is_symptom && seen.insert(id.clone()) {
                    out.push(chip);
                }
            }
        }
        out
    }

    fn build_ros(&mut self, engine: &Engine, record: &PatientRecord) -> SectionDoc {
        let lex = engine.lexicon();
        let mut by_system: BTreeMap<BodySystem, Vec<Chip>> = BTreeMap::new();
        for chip in self.captured_symptoms(engine) {
            let id = chip.resolved().expect("captured chips are resolved");
            if let Some(system) = lex.body_system(id) {
                by_system.entry(system).or_default().push(chip.clone());
            }
        }

        let mut text = String::new();
        let mut pending: Vec<(usize, usize, Chip)> = Vec::new();
        for (i, system) in BodySystem::ALL.into_iter().enumerate() {
            if i > 0 {
                text.push('\n');
            }
            text.push_str(system.label());
            text.push_str(": ");
            match by_system.get(&system) {
                None => text.push_str(engine.ros_default()),
                Some(chips) => {
                    for (j, chip) in chips.iter().enumerate() {
                        if j > 0 {
                            text.push_str("; ");
                        }
                        if chip.annotation.negated {
                            text.push_str("no ");
                        }
                        for m in &chip.annotation.modifiers {
                            text.push_str(&m.term);
                            text.push(' ');
                        }
                        let id = chip.resolved().expect("captured chips are resolved");
                        let name = lex.concept(id).map(|c| c.canonical_name.as_str()).unwrap_or_default();
                        let start = char_len(&text);
                        text.push_str(name);
                        pending.push((start, char_len(&text), chip.clone()));
                    }
                }
            }
        }

        let mut chips = Vec::with_capacity(pending.len());
        for (start, end, source) in pending {
            let id = source.resolved().cloned().expect("captured chips are resolved");
            let span = RecognitionSpan {
                start,
                end,
                surface: slice(&text, start, end).to_string(),
                candidates: vec![id.clone()],
                resolved: Some(id),
            };
            chips.push(self.make_chip(engine, record, span, source.origin));
        }
        SectionDoc { text, chips }
    }
}
