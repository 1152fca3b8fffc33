//! Clinical lexicon: concepts, surface forms, modifier vocabulary, body
//! systems and curated concept links.
//!
//! A lexicon directory holds one required file and several optional ones:
//!
//! | file               | columns                                      |
//! |--------------------|----------------------------------------------|
//! | `lexicon.tsv`      | `id  type  canonical  syn1\|syn2\|...  detail` |
//! | `modifiers.tsv`    | `class  term`                                |
//! | `body_systems.tsv` | `concept_id  system`                         |
//! | `links.tsv`        | `src_id  role  dst_id`                       |
//!
//! Blank lines and lines starting with `#` are ignored. A lab's detail may
//! carry a reference range clause, e.g. `serum; ref 3.5..5.0`.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Error, Debug)]
pub enum OntologyError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{file}:{line}: {message}")]
    Parse {
        file: String,
        line: usize,
        message: String,
    },

    #[error("duplicate concept id {id:?} at lexicon.tsv:{line}")]
    DuplicateId { id: String, line: usize },

    #[error("link {src} -[{role}]-> {dst} references an unknown concept")]
    DanglingLink {
        src: String,
        role: LinkRole,
        dst: String,
    },

    #[error("invalid lexicon: {0}")]
    Invalid(String),

    #[error("malformed index file: {0}")]
    Index(#[from] serde_json::Error),
}

pub type OntologyResult<T> = Result<T, OntologyError>;

/// Stable identifier of a concept.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ConceptId(String);

impl ConceptId {
    pub fn new(id: impl Into<String>) -> Self {
        Self(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ConceptId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for ConceptId {
    fn from(s: &str) -> Self {
        Self(s.to_string())
    }
}

/// The six kinds of clinical concept the editor distinguishes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConceptType {
    Condition,
    Lab,
    Medication,
    Symptom,
    Procedure,
    VitalSign,
}

impl ConceptType {
    pub const ALL: [ConceptType; 6] = [
        ConceptType::Condition,
        ConceptType::Lab,
        ConceptType::Medication,
        ConceptType::Symptom,
        ConceptType::Procedure,
        ConceptType::VitalSign,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ConceptType::Condition => "condition",
            ConceptType::Lab => "lab",
            ConceptType::Medication => "medication",
            ConceptType::Symptom => "symptom",
            ConceptType::Procedure => "procedure",
            ConceptType::VitalSign => "vital-sign",
        }
    }
}

impl fmt::Display for ConceptType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ConceptType {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key: String = s
            .trim()
            .chars()
            .filter(|c| !matches!(c, '-' | '_' | ' '))
            .flat_map(char::to_lowercase)
            .collect();
        match key.as_str() {
            "condition" => Ok(ConceptType::Condition),
            "lab" => Ok(ConceptType::Lab),
            "medication" => Ok(ConceptType::Medication),
            "symptom" => Ok(ConceptType::Symptom),
            "procedure" => Ok(ConceptType::Procedure),
            "vitalsign" => Ok(ConceptType::VitalSign),
            _ => Err(format!("unknown concept type {s:?}")),
        }
    }
}

/// Inclusive normal range for a lab or vital sign.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReferenceRange {
    pub low: f64,
    pub high: f64,
}

impl ReferenceRange {
    pub fn contains(&self, value: f64) -> bool {
        value >= self.low && value <= self.high
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Concept {
    pub id: ConceptId,
    pub canonical_name: String,
    pub concept_type: ConceptType,
    /// Display forms: the canonical name first, then synonyms and abbreviations.
    pub surface_forms: Vec<String>,
    /// Disambiguating text, such as the specimen fluid of a lab.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_range: Option<ReferenceRange>,
}

impl Concept {
    pub fn normalized_forms(&self) -> impl Iterator<Item = String> + '_ {
        self.surface_forms.iter().map(|f| normalize(f))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModifierClass {
    Laterality,
    Location,
    Severity,
    Temporality,
}

impl FromStr for ModifierClass {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "laterality" => Ok(ModifierClass::Laterality),
            "location" => Ok(ModifierClass::Location),
            "severity" => Ok(ModifierClass::Severity),
            "temporality" => Ok(ModifierClass::Temporality),
            _ => Err(format!("unknown modifier class {s:?}")),
        }
    }
}

/// Single-token qualifiers that may prefix a concept ("left", "severe", ...).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ModifierVocab {
    terms: BTreeMap<String, ModifierClass>,
}

impl ModifierVocab {
    pub fn insert(&mut self, term: &str, class: ModifierClass) {
        self.terms.insert(normalize(term), class);
    }

    pub fn class_of(&self, word: &str) -> Option<ModifierClass> {
        self.terms.get(&normalize(word)).copied()
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }
}

/// Review-of-systems headings, in the order they appear in a note.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum BodySystem {
    Constitutional,
    Eyes,
    #[serde(rename = "ENT")]
    Ent,
    Cardiovascular,
    Respiratory,
    Gastrointestinal,
    Genitourinary,
    Musculoskeletal,
    Skin,
    Neurological,
}

impl BodySystem {
    pub const ALL: [BodySystem; 10] = [
        BodySystem::Constitutional,
        BodySystem::Eyes,
        BodySystem::Ent,
        BodySystem::Cardiovascular,
        BodySystem::Respiratory,
        BodySystem::Gastrointestinal,
        BodySystem::Genitourinary,
        BodySystem::Musculoskeletal,
        BodySystem::Skin,
        BodySystem::Neurological,
    ];

    pub fn label(self) -> &'static str {
        match self {
            BodySystem::Constitutional => "Constitutional",
            BodySystem::Eyes => "Eyes",
            BodySystem::Ent => "ENT",
            BodySystem::Cardiovascular => "Cardiovascular",
            BodySystem::Respiratory => "Respiratory",
            BodySystem::Gastrointestinal => "Gastrointestinal",
            BodySystem::Genitourinary => "Genitourinary",
            BodySystem::Musculoskeletal => "Musculoskeletal",
            BodySystem::Skin => "Skin",
            BodySystem::Neurological => "Neurological",
        }
    }
}

impl FromStr for BodySystem {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        BodySystem::ALL
            .into_iter()
            .find(|b| b.label().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| format!("unknown body system {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LinkRole {
    RelevantMedication,
    RelevantLab,
    ContextualLab,
    RelatedProcedure,
}

impl LinkRole {
    pub fn as_str(self) -> &'static str {
        match self {
            LinkRole::RelevantMedication => "relevant-medication",
            LinkRole::RelevantLab => "relevant-lab",
            LinkRole::ContextualLab => "contextual-lab",
            LinkRole::RelatedProcedure => "related-procedure",
        }
    }
}

impl fmt::Display for LinkRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LinkRole {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "relevant-medication" => Ok(LinkRole::RelevantMedication),
            "relevant-lab" => Ok(LinkRole::RelevantLab),
            "contextual-lab" => Ok(LinkRole::ContextualLab),
            "related-procedure" => Ok(LinkRole::RelatedProcedure),
            other => Err(format!("unknown link role {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConceptLink {
    pub role: LinkRole,
    pub target: ConceptId,
}

/// Normalized surface form to the concepts sharing it.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SurfaceIndex {
    forms: HashMap<String, Vec<ConceptId>>,
}

impl SurfaceIndex {
    fn build(concepts: &[Concept]) -> Self {
        let mut forms: HashMap<String, Vec<ConceptId>> = HashMap::new();
        for c in concepts {
            for f in c.normalized_forms() {
                let ids = forms.entry(f).or_default();
                if !ids.contains(&c.id) {
                    ids.push(c.id.clone());
                }
            }
        }
        for ids in forms.values_mut() {
            ids.sort();
        }
        Self { forms }
    }

    /// Concepts for an already-normalized form.
    pub fn get(&self, normalized: &str) -> &[ConceptId] {
        self.forms.get(normalized).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn contains(&self, normalized: &str) -> bool {
        self.forms.contains_key(normalized)
    }

    pub fn is_ambiguous(&self, normalized: &str) -> bool {
        self.get(normalized).len() > 1
    }

    pub fn forms(&self) -> impl Iterator<Item = (&str, &[ConceptId])> {
        self.forms.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.forms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.forms.is_empty()
    }
}

/// Case-fold, collapse internal whitespace and trim non-alphanumeric edges.
///
/// Internal punctuation such as hyphens or slashes is kept, so `beta-blocker`
/// and `beta blocker` stay distinct.
pub fn normalize(form: &str) -> String {
    let mut out = String::with_capacity(form.len());
    let mut pending_space = false;
    for c in form.chars() {
        if c.is_whitespace() {
            pending_space = !out.is_empty();
            continue;
        }
        if pending_space {
            out.push(' ');
            pending_space = false;
        }
        out.extend(c.to_lowercase());
    }
    let trimmed = out.trim_matches(|c: char| !c.is_alphanumeric());
    if trimmed.len() == out.len() {
        out
    } else {
        trimmed.to_string()
    }
}

/// Serializable form of a lexicon; the compiled index file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LexiconData {
    pub concepts: Vec<Concept>,
    #[serde(default)]
    pub modifiers: ModifierVocab,
    #[serde(default)]
    pub body_systems: BTreeMap<ConceptId, BodySystem>,
    #[serde(default)]
    pub links: BTreeMap<ConceptId, Vec<ConceptLink>>,
}

/// Raw contents of a lexicon directory.
#[derive(Debug, Clone, Copy, Default)]
pub struct LexiconSources<'a> {
    pub lexicon: &'a str,
    pub modifiers: Option<&'a str>,
    pub body_systems: Option<&'a str>,
    pub links: Option<&'a str>,
}

/// A validated, indexed lexicon. Immutable once built.
#[derive(Debug, Clone)]
pub struct Lexicon {
    data: LexiconData,
    by_id: HashMap<ConceptId, usize>,
    index: SurfaceIndex,
}

impl PartialEq for Lexicon {
    fn eq(&self, other: &Self) -> bool {
        self.data == other.data
    }
}

impl Lexicon {
    /// Load `lexicon.tsv` and any auxiliary files present in `dir`.
    pub fn load_dir(dir: &Path) -> OntologyResult<Self> {
        let lexicon = read_required(&dir.join("lexicon.tsv"))?;
        let modifiers = read_optional(&dir.join("modifiers.tsv"))?;
        let body_systems = read_optional(&dir.join("body_systems.tsv"))?;
        let links = read_optional(&dir.join("links.tsv"))?;
        Self::parse(LexiconSources {
            lexicon: &lexicon,
            modifiers: modifiers.as_deref(),
            body_systems: body_systems.as_deref(),
            links: links.as_deref(),
        })
    }

    pub fn parse(sources: LexiconSources<'_>) -> OntologyResult<Self> {
        let mut data = LexiconData::default();
        let mut seen: std::collections::HashSet<String> = Default::default();

        for (line_no, fields) in records(sources.lexicon) {
            let err = |message: String| OntologyError::Parse {
                file: "lexicon.tsv".into(),
                line: line_no,
                message,
            };
            if fields.len() < 3 || fields.len() > 5 {
                return Err(err(format!("expected 3 to 5 fields, found {}", fields.len())));
            }
            let id = fields[0].trim();
            if id.is_empty() {
                return Err(err("empty concept id".into()));
            }
            if !seen.insert(id.to_string()) {
                return Err(OntologyError::DuplicateId {
                    id: id.to_string(),
                    line: line_no,
                });
            }

            let concept_type = ConceptType::from_str(fields[1]).map_err(err)?;
            let canonical = fields[2].trim();
            if normalize(canonical).is_empty() {
                return Err(err("canonical name has no alphanumeric content".into()));
            }
            let mut surface_forms = vec![canonical.to_string()];
            if let Some(syns) = fields.get(3) {
                for syn in syns.split('|') {
                    let syn = syn.trim();
                    if syn.is_empty() {
                        continue;
                    }
                    if normalize(syn).is_empty() {
                        return Err(err(format!("synonym {syn:?} has no alphanumeric content")));
                    }
                    if !surface_forms.iter().any(|f| normalize(f) == normalize(syn)) {
                        surface_forms.push(syn.to_string());
                    }
                }
            }
            let (detail, reference_range) = match fields.get(4) {
                Some(d) => parse_detail(d).map_err(err)?,
                None => (None, None),
            };
            data.concepts.push(Concept {
                id: ConceptId::new(id),
                canonical_name: canonical.to_string(),
                concept_type,
                surface_forms,
                detail,
                reference_range,
            });
        }

        if let Some(src) = sources.modifiers {
            for (line_no, fields) in records(src) {
                let err = |message: String| OntologyError::Parse {
                    file: "modifiers.tsv".into(),
                    line: line_no,
                    message,
                };
                if fields.len() != 2 {
                    return Err(err(format!("expected 2 fields, found {}", fields.len())));
                }
                let class = ModifierClass::from_str(fields[0]).map_err(err)?;
                let term = normalize(fields[1]);
                if term.is_empty() || term.contains(' ') {
                    return Err(err(format!("modifier {:?} must be a single token", fields[1])));
                }
                data.modifiers.insert(&term, class);
            }
        }

        if let Some(src) = sources.body_systems {
            for (line_no, fields) in records(src) {
                let err = |message: String| OntologyError::Parse {
                    file: "body_systems.tsv".into(),
                    line: line_no,
                    message,
                };
                if fields.len() != 2 {
                    return Err(err(format!("expected 2 fields, found {}", fields.len())));
                }
                let system = BodySystem::from_str(fields[1]).map_err(err)?;
                data.body_systems
                    .insert(ConceptId::new(fields[0].trim()), system);
            }
        }

        if let Some(src) = sources.links {
            for (line_no, fields) in records(src) {
                let err = |message: String| OntologyError::Parse {
                    file: "links.tsv".into(),
                    line: line_no,
                    message,
                };
                if fields.len() != 3 {
                    return Err(err(format!("expected 3 fields, found {}", fields.len())));
                }
                let role = LinkRole::from_str(fields[1]).map_err(err)?;
                let link = ConceptLink {
                    role,
                    target: ConceptId::new(fields[2].trim()),
                };
                let entry = data
                    .links
                    .entry(ConceptId::new(fields[0].trim()))
                    .or_default();
                if !entry.contains(&link) {
                    entry.push(link);
                }
            }
        }

        Self::from_data(data)
    }

    /// Validate and index previously parsed or deserialized data.
    pub fn from_data(data: LexiconData) -> OntologyResult<Self> {
        let mut by_id = HashMap::with_capacity(data.concepts.len());
        for (i, c) in data.concepts.iter().enumerate() {
            if by_id.insert(c.id.clone(), i).is_some() {
                return Err(OntologyError::DuplicateId {
                    id: c.id.to_string(),
                    line: i + 1,
                });
            }
            if c.surface_forms.is_empty() {
                return Err(OntologyError::Invalid(format!("{} has no surface forms", c.id)));
            }
            let canonical = normalize(&c.canonical_name);
            if canonical.is_empty() || !c.normalized_forms().any(|f| f == canonical) {
                return Err(OntologyError::Invalid(format!(
                    "{}: canonical name is not among its surface forms",
                    c.id
                )));
            }
        }

        for id in data.body_systems.keys() {
            match by_id.get(id).map(|&i| &data.concepts[i]) {
                None => {
                    return Err(OntologyError::Invalid(format!(
                        "body system mapped for unknown concept {id}"
                    )))
                }
                Some(c) if c.concept_type != ConceptType::Symptom => {
                    return Err(OntologyError::Invalid(format!(
                        "body system mapped for non-symptom concept {id}"
                    )))
                }
                Some(_) => {}
            }
        }

        for (src, links) in &data.links {
            for link in links {
                if !by_id.contains_key(src) || !by_id.contains_key(&link.target) {
                    return Err(OntologyError::DanglingLink {
                        src: src.to_string(),
                        role: link.role,
                        dst: link.target.to_string(),
                    });
                }
            }
        }

        let index = SurfaceIndex::build(&data.concepts);
        Ok(Self { data, by_id, index })
    }

    /// Read a compiled index produced by [`Lexicon::to_index_json`].
    pub fn from_index_json(json: &str) -> OntologyResult<Self> {
        let data: LexiconData = serde_json::from_str(json)?;
        Self::from_data(data)
    }

    pub fn to_index_json(&self) -> String {
        serde_json::to_string(&self.data).expect("lexicon data serializes")
    }

    pub fn data(&self) -> &LexiconData {
        &self.data
    }

    pub fn concepts(&self) -> &[Concept] {
        &self.data.concepts
    }

    pub fn len(&self) -> usize {
        self.data.concepts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.concepts.is_empty()
    }

    pub fn concept(&self, id: &ConceptId) -> Option<&Concept> {
        self.by_id.get(id).map(|&i| &self.data.concepts[i])
    }

    /// Position of a concept in [`Lexicon::concepts`].
    pub fn position(&self, id: &ConceptId) -> Option<usize> {
        self.by_id.get(id).copied()
    }

    pub fn surface_index(&self) -> &SurfaceIndex {
        &self.index
    }

    pub fn modifiers(&self) -> &ModifierVocab {
        &self.data.modifiers
    }

    pub fn body_system(&self, id: &ConceptId) -> Option<BodySystem> {
        self.data.body_systems.get(id).copied()
    }

    pub fn links(&self, id: &ConceptId) -> &[ConceptLink] {
        self.data.links.get(id).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Link targets of `id` with the given role, in curated order.
    pub fn linked(&self, id: &ConceptId, role: LinkRole) -> impl Iterator<Item = &ConceptId> {
        self.links(id)
            .iter()
            .filter(move |l| l.role == role)
            .map(|l| &l.target)
    }

    /// Concepts whose normalized surface forms equal `normalize(form)`.
    pub fn lookup(&self, form: &str) -> Vec<&Concept> {
        self.index
            .get(&normalize(form))
            .iter()
            .filter_map(|id| self.concept(id))
            .collect()
    }
}

/// Non-comment, non-blank lines split on tabs, with 1-based line numbers.
pub(crate) fn records(src: &str) -> impl Iterator<Item = (usize, Vec<&str>)> {
    src.lines().enumerate().filter_map(|(i, line)| {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.trim_start().starts_with('#') {
            None
        } else {
            Some((i + 1, line.split('\t').collect()))
        }
    })
}

fn parse_detail(raw: &str) -> Result<(Option<String>, Option<ReferenceRange>), String> {
    let mut text = Vec::new();
    let mut range = None;
    for part in raw.split(';') {
        let part = part.trim();
        if let Some(bounds) = part.strip_prefix("ref ") {
            let (lo, hi) = bounds
                .split_once("..")
                .ok_or_else(|| format!("reference range {bounds:?} is not LOW..HIGH"))?;
            let low: f64 = lo.trim().parse().map_err(|_| format!("bad range bound {lo:?}"))?;
            let high: f64 = hi.trim().parse().map_err(|_| format!("bad range bound {hi:?}"))?;
            if low > high {
                return Err(format!("reference range {bounds:?} has low > high"));
            }
            range = Some(ReferenceRange { low, high });
        } else if !part.is_empty() {
            text.push(part);
        }
    }
    let detail = if text.is_empty() {
        None
    } else {
        Some(text.join("; "))
    };
    Ok((detail, range))
}

fn read_required(path: &Path) -> OntologyResult<String> {
    std::fs::read_to_string(path).map_err(|source| OntologyError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn read_optional(path: &Path) -> OntologyResult<Option<String>> {
    match std::fs::read_to_string(path) {
        Ok(s) => Ok(Some(s)),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(source) => Err(OntologyError::Io {
            path: path.to_path_buf(),
            source,
        }),
    }
}
