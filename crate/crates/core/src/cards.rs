//! Concept-oriented cards assembled from the patient record.
//!
//! Each concept type has a default block recipe. A curated override replaces
//! the recipe for a set of trigger concepts; `overrides.tsv` lines read
//!
//! ```text
//! name<TAB>id|id|...<TAB>kind[:arg];kind[:arg];...
//! ```
//!
//! where list and table kinds take a link role and `report-snippets` takes
//! `|`-separated author roles.

use std::path::Path;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autocomplete::{lab_tree, LabFrameNode};
use crate::ontology::{records, ConceptId, ConceptType, Lexicon, LinkRole, ReferenceRange};
use crate::record::{
    in_record, labs_for, link_closure, notes_mentioning, snippet_bounds, LabResult, PatientRecord, TimeWindow,
    SNIPPET_CONTEXT,
};

#[derive(Error, Debug, PartialEq)]
pub enum CardError {
    #[error("unknown concept {0}")]
    UnknownConcept(ConceptId),

    #[error("{0} concepts have no cards")]
    UnsupportedType(ConceptType),

    #[error("no note {0} in the record")]
    DanglingNote(String),

    #[error("note {note} has no mention at {start}..{end}")]
    DanglingMention { note: String, start: usize, end: usize },

    #[error("overrides.tsv line {line}: {message}")]
    OverrideParse { line: usize, message: String },

    #[error("failed to read overrides: {0}")]
    Io(String),
}

/// Most recent snippets kept per block.
pub const MAX_SNIPPETS: usize = 10;
/// Most recent rows kept per lab table.
pub const MAX_TABLE_ROWS: usize = 20;

/// One step of a card recipe.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum BlockSpec {
    /// Without a role: the card's own lab plus contextual columns. With a
    /// role: a panel of the linked labs.
    LabTable { role: Option<LinkRole> },
    LabSeries,
    LabAggregate,
    MedicationList { role: LinkRole },
    VitalsList { role: LinkRole },
    ProcedureList { role: LinkRole },
    NoteSnippets,
    ReportSnippets { author_roles: Vec<String> },
}

impl BlockSpec {
    pub fn parse(raw: &str) -> Result<Self, String> {
        let (kind, arg) = match raw.split_once(':') {
            Some((k, a)) => (k.trim(), Some(a.trim())),
            None => (raw.trim(), None),
        };
        let role = |default: LinkRole| -> Result<LinkRole, String> { arg.map_or(Ok(default), str::parse) };
        let no_arg = |s: BlockSpec| match arg {
            Some(a) => Err(format!("{kind} takes no argument, got {a:?}")),
            None => Ok(s),
        };
        match kind {
            "lab-table" => Ok(BlockSpec::LabTable {
                role: arg.map(str::parse).transpose()?,
            }),
            "lab-series" => no_arg(BlockSpec::LabSeries),
            "lab-aggregate" => no_arg(BlockSpec::LabAggregate),
            "medication-list" => Ok(BlockSpec::MedicationList {
                role: role(LinkRole::RelevantMedication)?,
            }),
            "vitals-list" => Ok(BlockSpec::VitalsList {
                role: role(LinkRole::RelevantLab)?,
            }),
            "procedure-list" => Ok(BlockSpec::ProcedureList {
                role: role(LinkRole::RelatedProcedure)?,
            }),
            "note-snippets" => no_arg(BlockSpec::NoteSnippets),
            "report-snippets" => {
                let roles: Vec<String> = arg
                    .unwrap_or("")
                    .split('|')
                    .map(|r| r.trim().to_lowercase())
                    .filter(|r| !r.is_empty())
                    .collect();
                if roles.is_empty() {
                    return Err("report-snippets needs at least one author role".into());
                }
                Ok(BlockSpec::ReportSnippets { author_roles: roles })
            }
            other => Err(format!("unknown block kind {other:?}")),
        }
    }
}

/// The fixed recipe for a concept type.
pub fn default_recipe(t: ConceptType) -> Vec<BlockSpec> {
    match t {
        ConceptType::Condition => vec![
            BlockSpec::MedicationList {
                role: LinkRole::RelevantMedication,
            },
            BlockSpec::VitalsList {
                role: LinkRole::RelevantLab,
            },
            BlockSpec::ProcedureList {
                role: LinkRole::RelatedProcedure,
            },
            BlockSpec::NoteSnippets,
        ],
        ConceptType::Lab | ConceptType::VitalSign => {
            vec![BlockSpec::LabTable { role: None }, BlockSpec::LabSeries, BlockSpec::LabAggregate]
        }
        ConceptType::Medication | ConceptType::Procedure => vec![BlockSpec::NoteSnippets],
        ConceptType::Symptom => Vec::new(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CardOverride {
    pub name: String,
    pub triggers: Vec<ConceptId>,
    pub recipe: Vec<BlockSpec>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CardOverrides(Vec<CardOverride>);

impl CardOverrides {
    pub fn new(overrides: Vec<CardOverride>) -> Self {
        Self(overrides)
    }

    pub fn parse(src: &str, lexicon: &Lexicon) -> Result<Self, CardError> {
        let mut out = Vec::new();
        for (line, fields) in records(src) {
            let err = |message: String| CardError::OverrideParse { line, message };
            if fields.len() < 3 {
                return Err(err("expected name, trigger ids and blocks".into()));
            }
            let triggers: Vec<ConceptId> = fields[1]
                .split('|')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(ConceptId::new)
                .collect();
            if triggers.is_empty() {
                return Err(err("no trigger ids".into()));
            }
            if let Some(bad) = triggers.iter().find(|t| lexicon.concept(t).is_none()) {
                return Err(err(format!("unknown trigger concept {bad}")));
            }
            let recipe = fields[2]
                .split(';')
                .filter(|s| !s.trim().is_empty())
                .map(BlockSpec::parse)
                .collect::<Result<Vec<_>, _>>()
                .map_err(err)?;
            if recipe.is_empty() {
                return Err(err("empty recipe".into()));
            }
            out.push(CardOverride {
                name: fields[0].trim().to_string(),
                triggers,
                recipe,
            });
        }
        Ok(Self(out))
    }

    pub fn load(path: &Path, lexicon: &Lexicon) -> Result<Self, CardError> {
        match std::fs::read_to_string(path) {
            Ok(src) => Self::parse(&src, lexicon),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Self::default()),
            Err(e) => Err(CardError::Io(format!("{}: {e}", path.display()))),
        }
    }

    pub fn for_concept(&self, concept: &ConceptId) -> Option<&CardOverride> {
        self.0.iter().find(|o| o.triggers.contains(concept))
    }

    pub fn iter(&self) -> impl Iterator<Item = &CardOverride> {
        self.0.iter()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabCell {
    pub result_id: String,
    pub value: f64,
    pub precision: u8,
    pub display: String,
    pub timestamp: DateTime<Utc>,
    pub abnormal: bool,
}

impl From<&LabResult> for LabCell {
    fn from(r: &LabResult) -> Self {
        Self {
            result_id: r.id.clone(),
            value: r.value,
            precision: r.precision,
            display: r.formatted_value(),
            timestamp: r.timestamp,
            abnormal: r.abnormal,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabColumn {
    pub concept: ConceptId,
    pub name: String,
    pub unit: String,
    /// Contextual columns show the latest value at or before each row.
    pub contextual: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabRow {
    pub timestamp: DateTime<Utc>,
    pub cells: Vec<Option<LabCell>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabTable {
    pub columns: Vec<LabColumn>,
    /// Most recent first.
    pub rows: Vec<LabRow>,
    pub more_available: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabSeries {
    pub concept: ConceptId,
    pub unit: String,
    pub reference_range: Option<ReferenceRange>,
    /// Oldest first.
    pub points: Vec<LabCell>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabAggregateBlock {
    pub concept: ConceptId,
    pub unit: String,
    pub frames: Vec<LabFrameNode>,
    /// Box plot over all results: min, lower quartile, median, upper quartile, max.
    pub quartiles: [f64; 5],
    pub result_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptListItem {
    pub concept: ConceptId,
    pub name: String,
    /// Record entries and notes that mention the concept.
    pub sources: Vec<String>,
    pub last_seen: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VitalItem {
    pub concept: ConceptId,
    pub name: String,
    pub unit: String,
    pub count: usize,
    pub latest: LabCell,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CardSnippet {
    pub note_id: String,
    pub timestamp: DateTime<Utc>,
    pub author_role: String,
    pub start: usize,
    pub end: usize,
    pub text: String,
    /// Mention offsets in the full note text.
    pub highlight: Option<(usize, usize)>,
    pub concept: Option<ConceptId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnippetList {
    /// Oldest first.
    pub snippets: Vec<CardSnippet>,
    pub more_available: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum CardBlock {
    LabTable(LabTable),
    LabSeries(LabSeries),
    LabAggregate(LabAggregateBlock),
    MedicationList { items: Vec<ConceptListItem> },
    VitalsList { items: Vec<VitalItem> },
    ProcedureList { items: Vec<ConceptListItem> },
    NoteSnippets(SnippetList),
    ReportSnippets(SnippetList),
}

impl CardBlock {
    pub fn kind(&self) -> &'static str {
        match self {
            CardBlock::LabTable(_) => "lab-table",
            CardBlock::LabSeries(_) => "lab-series",
            CardBlock::LabAggregate(_) => "lab-aggregate",
            CardBlock::MedicationList { .. } => "medication-list",
            CardBlock::VitalsList { .. } => "vitals-list",
            CardBlock::ProcedureList { .. } => "procedure-list",
            CardBlock::NoteSnippets(_) => "note-snippets",
            CardBlock::ReportSnippets(_) => "report-snippets",
        }
    }

    /// Record item ids behind every datum in the block.
    pub fn record_ids(&self) -> Vec<String> {
        match self {
            CardBlock::LabTable(t) => t
                .rows
                .iter()
                .flat_map(|r| r.cells.iter().flatten().map(|c| c.result_id.clone()))
                .collect(),
            CardBlock::LabSeries(s) => s.points.iter().map(|p| p.result_id.clone()).collect(),
            CardBlock::LabAggregate(a) => a.result_ids.clone(),
            CardBlock::MedicationList { items } | CardBlock::ProcedureList { items } => {
                items.iter().flat_map(|i| i.sources.iter().cloned()).collect()
            }
            CardBlock::VitalsList { items } => items.iter().map(|i| i.latest.result_id.clone()).collect(),
            CardBlock::NoteSnippets(s) | CardBlock::ReportSnippets(s) => {
                s.snippets.iter().map(|s| s.note_id.clone()).collect()
            }
        }
    }

    /// Concepts referenced by the block, for nested chips.
    pub fn concepts(&self) -> Vec<ConceptId> {
        match self {
            CardBlock::LabTable(t) => t.columns.iter().map(|c| c.concept.clone()).collect(),
            CardBlock::LabSeries(s) => vec![s.concept.clone()],
            CardBlock::LabAggregate(a) => vec![a.concept.clone()],
            CardBlock::MedicationList { items } | CardBlock::ProcedureList { items } => {
                items.iter().map(|i| i.concept.clone()).collect()
            }
            CardBlock::VitalsList { items } => items.iter().map(|i| i.concept.clone()).collect(),
            CardBlock::NoteSnippets(s) | CardBlock::ReportSnippets(s) => {
                s.snippets.iter().filter_map(|s| s.concept.clone()).collect()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Card {
    pub concept: ConceptId,
    pub concept_type: ConceptType,
    pub title: String,
    pub synonyms: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub override_name: Option<String>,
    pub blocks: Vec<CardBlock>,
}

/// Contextual-lab link targets of a lab, in curated order.
pub fn contextual_columns(concept: &ConceptId, lexicon: &Lexicon) -> Vec<ConceptId> {
    match lexicon.concept(concept).map(|c| c.concept_type) {
        Some(ConceptType::Lab | ConceptType::VitalSign) => {
            lexicon.linked(concept, LinkRole::ContextualLab).cloned().collect()
        }
        _ => Vec::new(),
    }
}

fn unit_of(results: &[&LabResult]) -> String {
    results.last().map(|r| r.unit.clone()).unwrap_or_default()
}

fn column(lexicon: &Lexicon, id: &ConceptId, results: &[&LabResult], contextual: bool) -> LabColumn {
    LabColumn {
        concept: id.clone(),
        name: lexicon.concept(id).map(|c| c.canonical_name.clone()).unwrap_or_default(),
        unit: unit_of(results),
        contextual,
    }
}

fn own_lab_table(concept: &ConceptId, lexicon: &Lexicon, record: &PatientRecord, as_of: DateTime<Utc>) -> Option<LabTable> {
    let window = TimeWindow {
        start: None,
        end: Some(as_of),
    };
    let primary = labs_for(record, concept, &window);
    let context: Vec<(ConceptId, Vec<&LabResult>)> = contextual_columns(concept, lexicon)
        .into_iter()
        .map(|c| {
            let rs = labs_for(record, &c, &window);
            (c, rs)
        })
        .filter(|(_, rs)| !rs.is_empty())
        .collect();
    // a contextual column shows whenever its lab has results, even with no own rows
    if primary.is_empty() && context.is_empty() {
        return None;
    }
    let mut columns = vec![column(lexicon, concept, &primary, false)];
    columns.extend(context.iter().map(|(c, rs)| column(lexicon, c, rs, true)));
    let rows: Vec<LabRow> = primary
        .iter()
        .rev()
        .map(|r| {
            let mut cells = vec![Some(LabCell::from(*r))];
            for (_, rs) in &context {
                let latest = rs.iter().rev().find(|c| c.timestamp <= r.timestamp);
                cells.push(latest.map(|c| LabCell::from(*c)));
            }
            LabRow {
                timestamp: r.timestamp,
                cells,
            }
        })
        .collect();
    Some(capped_table(columns, rows))
}

fn capped_table(columns: Vec<LabColumn>, mut rows: Vec<LabRow>) -> LabTable {
    let more_available = rows.len().saturating_sub(MAX_TABLE_ROWS);
    rows.truncate(MAX_TABLE_ROWS);
    LabTable {
        columns,
        rows,
        more_available,
    }
}

fn panel_table(
    concept: &ConceptId,
    role: LinkRole,
    lexicon: &Lexicon,
    record: &PatientRecord,
    as_of: DateTime<Utc>,
) -> Option<LabTable> {
    let window = TimeWindow {
        start: None,
        end: Some(as_of),
    };
    let labs: Vec<(ConceptId, Vec<&LabResult>)> = lexicon
        .linked(concept, role)
        .filter(|c| {
            lexicon
                .concept(c)
                .is_some_and(|c| matches!(c.concept_type, ConceptType::Lab | ConceptType::VitalSign))
        })
        .map(|c| (c.clone(), labs_for(record, c, &window)))
        .filter(|(_, rs)| !rs.is_empty())
        .collect();
    if labs.is_empty() {
        return None;
    }
    let columns = labs.iter().map(|(c, rs)| column(lexicon, c, rs, false)).collect();
    let mut times: Vec<DateTime<Utc>> = labs.iter().flat_map(|(_, rs)| rs.iter().map(|r| r.timestamp)).collect();
    times.sort_unstable_by(|a, b| b.cmp(a));
    times.dedup();
    let rows = times
        .into_iter()
        .map(|t| LabRow {
            timestamp: t,
            cells: labs
                .iter()
                .map(|(_, rs)| rs.iter().rev().find(|r| r.timestamp == t).map(|r| LabCell::from(*r)))
                .collect(),
        })
        .collect();
    Some(capped_table(columns, rows))
}

/// Linear-interpolated quantile of sorted values.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

fn lab_series(concept: &ConceptId, lexicon: &Lexicon, record: &PatientRecord, as_of: DateTime<Utc>) -> Option<LabSeries> {
    let results = labs_for(
        record,
        concept,
        &TimeWindow {
            start: None,
            end: Some(as_of),
        },
    );
    if results.is_empty() {
        return None;
    }
    Some(LabSeries {
        concept: concept.clone(),
        unit: unit_of(&results),
        reference_range: lexicon.concept(concept).and_then(|c| c.reference_range),
        points: results.iter().map(|r| LabCell::from(*r)).collect(),
    })
}

fn lab_aggregate(concept: &ConceptId, lexicon: &Lexicon, record: &PatientRecord, as_of: DateTime<Utc>) -> Option<LabAggregateBlock> {
    let tree = lab_tree(concept, lexicon, record, as_of).ok()?;
    if tree.frames.is_empty() {
        return None;
    }
    let results = labs_for(
        record,
        concept,
        &TimeWindow {
            start: None,
            end: Some(as_of),
        },
    );
    let mut values: Vec<f64> = results.iter().map(|r| r.value).collect();
    values.sort_by(f64::total_cmp);
    Some(LabAggregateBlock {
        concept: concept.clone(),
        unit: tree.unit,
        frames: tree.frames,
        quartiles: [0.0, 0.25, 0.5, 0.75, 1.0].map(|q| quantile(&values, q)),
        result_ids: results.iter().map(|r| r.id.clone()).collect(),
    })
}

fn concept_list(
    concept: &ConceptId,
    role: LinkRole,
    want: ConceptType,
    lexicon: &Lexicon,
    record: &PatientRecord,
) -> Vec<ConceptListItem> {
    lexicon
        .linked(concept, role)
        .filter_map(|target| {
            let c = lexicon.concept(target)?;
            if c.concept_type != want || !in_record(record, target) {
                return None;
            }
            let mut sources: Vec<(DateTime<Utc>, String)> = record
                .entries
                .iter()
                .filter(|e| &e.concept == target)
                .map(|e| (e.timestamp, e.id.clone()))
                .collect();
            sources.extend(
                record
                    .notes
                    .iter()
                    .filter(|n| n.concepts.contains(target))
                    .map(|n| (n.timestamp, n.id.clone())),
            );
            sources.sort();
            let last_seen = sources.last()?.0;
            Some(ConceptListItem {
                concept: target.clone(),
                name: c.canonical_name.clone(),
                sources: sources.into_iter().map(|(_, id)| id).collect(),
                last_seen,
            })
        })
        .collect()
}

fn vitals_list(concept: &ConceptId, role: LinkRole, lexicon: &Lexicon, record: &PatientRecord, as_of: DateTime<Utc>) -> Vec<VitalItem> {
    let window = TimeWindow {
        start: None,
        end: Some(as_of),
    };
    lexicon
        .linked(concept, role)
        .filter_map(|target| {
            let c = lexicon.concept(target)?;
            if c.concept_type != ConceptType::VitalSign {
                return None;
            }
            let results = labs_for(record, target, &window);
            let latest = results.last()?;
            Some(VitalItem {
                concept: target.clone(),
                name: c.canonical_name.clone(),
                unit: latest.unit.clone(),
                count: results.len(),
                latest: LabCell::from(*latest),
            })
        })
        .collect()
}

fn cap_snippets(mut snippets: Vec<CardSnippet>) -> SnippetList {
    snippets.sort_by(|a, b| a.timestamp.cmp(&b.timestamp).then_with(|| a.note_id.cmp(&b.note_id)));
    let more_available = snippets.len().saturating_sub(MAX_SNIPPETS);
    let snippets = snippets.split_off(more_available);
    SnippetList {
        snippets,
        more_available,
    }
}

fn note_snippets(concept: &ConceptId, lexicon: &Lexicon, record: &PatientRecord, as_of: DateTime<Utc>) -> SnippetList {
    let snippets = notes_mentioning(record, concept, lexicon)
        .into_iter()
        .filter(|h| h.note.timestamp <= as_of)
        .map(|h| {
            let s = &h.snippets[0];
            CardSnippet {
                note_id: h.note.id.clone(),
                timestamp: h.note.timestamp,
                author_role: h.note.author_role.clone(),
                start: s.start,
                end: s.end,
                text: s.text.clone(),
                highlight: Some((s.mention_start, s.mention_end)),
                concept: Some(s.concept.clone()),
            }
        })
        .collect();
    cap_snippets(snippets)
}

fn report_snippets(
    concept: &ConceptId,
    roles: &[String],
    lexicon: &Lexicon,
    record: &PatientRecord,
    as_of: DateTime<Utc>,
) -> SnippetList {
    let closure = link_closure(concept, lexicon);
    let snippets = record
        .notes
        .iter()
        .filter(|n| n.timestamp <= as_of && roles.iter().any(|r| r.eq_ignore_ascii_case(&n.author_role)))
        .map(|n| {
            let chars: Vec<char> = n.text.chars().collect();
            let mention = n
                .mentions
                .iter()
                .find_map(|m| closure.iter().find(|c| m.candidates.contains(c)).map(|c| (m, c)));
            let (anchor_start, anchor_end) = mention.map_or((0, 0), |(m, _)| (m.start, m.end));
            let (start, end) = snippet_bounds(&chars, anchor_start, anchor_end, SNIPPET_CONTEXT);
            CardSnippet {
                note_id: n.id.clone(),
                timestamp: n.timestamp,
                author_role: n.author_role.clone(),
                start,
                end,
                text: chars[start..end].iter().collect(),
                highlight: mention.map(|(m, _)| (m.start, m.end)),
                concept: mention.map(|(_, c)| c.clone()),
            }
        })
        .collect();
    cap_snippets(snippets)
}

fn build_block(
    spec: &BlockSpec,
    concept: &ConceptId,
    lexicon: &Lexicon,
    record: &PatientRecord,
    as_of: DateTime<Utc>,
) -> Option<CardBlock> {
    let block = match spec {
        BlockSpec::LabTable { role: None } => CardBlock::LabTable(own_lab_table(concept, lexicon, record, as_of)?),
        BlockSpec::LabTable { role: Some(r) } => CardBlock::LabTable(panel_table(concept, *r, lexicon, record, as_of)?),
        BlockSpec::LabSeries => CardBlock::LabSeries(lab_series(concept, lexicon, record, as_of)?),
        BlockSpec::LabAggregate => CardBlock::LabAggregate(lab_aggregate(concept, lexicon, record, as_of)?),
        BlockSpec::MedicationList { role } => CardBlock::MedicationList {
            items: concept_list(concept, *role, ConceptType::Medication, lexicon, record),
        },
        BlockSpec::VitalsList { role } => CardBlock::VitalsList {
            items: vitals_list(concept, *role, lexicon, record, as_of),
        },
        BlockSpec::ProcedureList { role } => CardBlock::ProcedureList {
            items: concept_list(concept, *role, ConceptType::Procedure, lexicon, record),
        },
        BlockSpec::NoteSnippets => CardBlock::NoteSnippets(note_snippets(concept, lexicon, record, as_of)),
        BlockSpec::ReportSnippets { author_roles } => {
            CardBlock::ReportSnippets(report_snippets(concept, author_roles, lexicon, record, as_of))
        }
    };
    let empty = match &block {
        CardBlock::MedicationList { items } | CardBlock::ProcedureList { items } => items.is_empty(),
        CardBlock::VitalsList { items } => items.is_empty(),
        CardBlock::NoteSnippets(s) | CardBlock::ReportSnippets(s) => s.snippets.is_empty(),
        _ => false,
    };
    (!empty).then_some(block)
}

/// Build the card for `concept` from data recorded at or before `as_of`.
pub fn assemble_card(
    concept: &ConceptId,
    record: &PatientRecord,
    lexicon: &Lexicon,
    overrides: &CardOverrides,
    as_of: DateTime<Utc>,
) -> Result<Card, CardError> {
    let c = lexicon
        .concept(concept)
        .ok_or_else(|| CardError::UnknownConcept(concept.clone()))?;
    if c.concept_type == ConceptType::Symptom {
        return Err(CardError::UnsupportedType(ConceptType::Symptom));
    }
    let chosen = overrides.for_concept(concept);
    let recipe = match chosen {
        Some(o) => o.recipe.clone(),
        None => default_recipe(c.concept_type),
    };
    let blocks = recipe
        .iter()
        .filter_map(|spec| build_block(spec, concept, lexicon, record, as_of))
        .collect();
    Ok(Card {
        concept: concept.clone(),
        concept_type: c.concept_type,
        title: c.canonical_name.clone(),
        synonyms: c.surface_forms.iter().skip(1).cloned().collect(),
        override_name: chosen.map(|o| o.name.clone()),
        blocks,
    })
}

/// Points at a snippet's source note and, optionally, the mention it highlights.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SnippetRef {
    pub note_id: String,
    #[serde(default)]
    pub highlight: Option<(usize, usize)>,
}

impl From<&CardSnippet> for SnippetRef {
    fn from(s: &CardSnippet) -> Self {
        Self {
            note_id: s.note_id.clone(),
            highlight: s.highlight,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpandedSnippet {
    pub note_id: String,
    pub timestamp: DateTime<Utc>,
    pub author_role: String,
    pub text: String,
    pub highlight: Option<(usize, usize)>,
}

/// The full source note of a snippet with its mention highlighted.
pub fn expand_snippet(snippet: &SnippetRef, record: &PatientRecord) -> Result<ExpandedSnippet, CardError> {
    let note = record
        .note(&snippet.note_id)
        .ok_or_else(|| CardError::DanglingNote(snippet.note_id.clone()))?;
    if let Some((start, end)) = snippet.highlight {
        if !note.mentions.iter().any(|m| m.start == start && m.end == end) {
            return Err(CardError::DanglingMention {
                note: note.id.clone(),
                start,
                end,
            });
        }
    }
    Ok(ExpandedSnippet {
        note_id: note.id.clone(),
        timestamp: note.timestamp,
        author_role: note.author_role.clone(),
        text: note.text.clone(),
        highlight: snippet.highlight,
    })
}
