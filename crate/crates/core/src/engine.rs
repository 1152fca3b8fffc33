//! Everything loaded from a lexicon directory, bundled for sharing.
//!
//! A lexicon directory holds `lexicon.tsv` plus optional `modifiers.tsv`,
//! `body_systems.tsv`, `links.tsv`, `negation_rules.tsv`, `cues.tsv`,
//! `overrides.tsv`, `stoplist.txt` and `templates/<section>.txt`.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use chrono::{DateTime, Utc};
use serde::Serialize;
use thiserror::Error;

use crate::autocomplete::{
    candidates, lab_tree, should_trigger, suggest, AutocompleteError, AutocompleteQuery, ContextScorer, CueList,
    LabTree, PrefixIndex, RuleScorer, SuggestConfig, Suggestion, TriggerDecision, TypePrior,
};
use crate::cards::{assemble_card, Card, CardError, CardOverrides};
use crate::negation::{annotate, AnnotatedSpan, NegationError, NegationRules};
use crate::ontology::{ConceptId, ConceptType, Lexicon, OntologyError};
use crate::recognizer::{Automaton, RecognitionSpan, RecognizerError, StopList, COMMON_ENGLISH_WORDS};
use crate::record::PatientRecord;
use crate::service::note::Section;

#[derive(Error, Debug)]
pub enum EngineError {
    #[error(transparent)]
    Ontology(#[from] OntologyError),

    #[error(transparent)]
    Recognizer(#[from] RecognizerError),

    #[error(transparent)]
    Negation(#[from] NegationError),

    #[error(transparent)]
    Autocomplete(#[from] AutocompleteError),

    #[error(transparent)]
    Card(#[from] CardError),

    #[error("failed to read {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

/// Text written into empty ROS lines.
pub const DEFAULT_ROS_PHRASE: &str = "negative";

/// Completion response for one caret position.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuggestResponse {
    pub trigger: bool,
    pub prior: TypePrior,
    pub query: AutocompleteQuery,
    pub suggestions: Vec<Suggestion>,
}

pub struct Engine {
    lexicon: Lexicon,
    stoplist: StopList,
    automaton: Automaton,
    rules: NegationRules,
    index: Arc<PrefixIndex>,
    scorer: Box<dyn ContextScorer>,
    overrides: CardOverrides,
    templates: BTreeMap<Section, String>,
    ros_default: String,
    suggest_config: SuggestConfig,
}

impl std::fmt::Debug for Engine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Engine")
            .field("concepts", &self.lexicon.len())
            .field("patterns", &self.automaton.pattern_count())
            .field("overrides", &self.overrides)
            .finish_non_exhaustive()
    }
}

fn read_optional(path: &Path) -> Result<Option<String>, EngineError> {
    match std::fs::read_to_string(path) {
        Ok(s) => Ok(Some(s)),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(source) => Err(EngineError::Io {
            path: path.display().to_string(),
            source,
        }),
    }
}

impl Engine {
    pub fn load(dir: &Path) -> Result<Self, EngineError> {
        let lexicon = Lexicon::load_dir(dir)?;
        let rules = match read_optional(&dir.join("negation_rules.tsv"))? {
            Some(src) => NegationRules::parse(&src)?,
            None => NegationRules::defaults(),
        };
        let cues = match read_optional(&dir.join("cues.tsv"))? {
            Some(src) => CueList::parse(&src)?,
            None => CueList::default(),
        };
        let overrides = match read_optional(&dir.join("overrides.tsv"))? {
            Some(src) => CardOverrides::parse(&src, &lexicon)?,
            None => CardOverrides::default(),
        };
        let extra_stops = read_optional(&dir.join("stoplist.txt"))?.unwrap_or_default();
        let stoplist = StopList::from_forms(
            COMMON_ENGLISH_WORDS.iter().copied().chain(
                extra_stops
                    .lines()
                    .map(str::trim)
                    .filter(|l| !l.is_empty() && !l.starts_with('#')),
            ),
            lexicon.surface_index(),
        );
        let mut templates = BTreeMap::new();
        for section in Section::ALL {
            let path = dir.join("templates").join(format!("{}.txt", section.file_stem()));
            if let Some(t) = read_optional(&path)? {
                templates.insert(section, t.trim_end().to_string());
            }
        }
        let mut engine = Self::new(lexicon, stoplist, rules, cues, overrides)?;
        engine.templates = templates;
        Ok(engine)
    }

    pub fn new(
        lexicon: Lexicon,
        stoplist: StopList,
        rules: NegationRules,
        cues: CueList,
        overrides: CardOverrides,
    ) -> Result<Self, EngineError> {
        let automaton = Automaton::build(&lexicon, &stoplist)?;
        let index = Arc::new(PrefixIndex::build(&lexicon));
        let scorer = Box::new(RuleScorer::new(cues, index.clone()));
        Ok(Self {
            lexicon,
            stoplist,
            automaton,
            rules,
            index,
            scorer,
            overrides,
            templates: BTreeMap::new(),
            ros_default: DEFAULT_ROS_PHRASE.to_string(),
            suggest_config: SuggestConfig::default(),
        })
    }

    /// Swap the context scorer.
    pub fn with_scorer(mut self, scorer: Box<dyn ContextScorer>) -> Self {
        self.scorer = scorer;
        self
    }

    pub fn with_template(mut self, section: Section, text: impl Into<String>) -> Self {
        self.templates.insert(section, text.into());
        self
    }

    pub fn with_ros_default(mut self, phrase: impl Into<String>) -> Self {
        self.ros_default = phrase.into();
        self
    }

    pub fn lexicon(&self) -> &Lexicon {
        &self.lexicon
    }

    pub fn stoplist(&self) -> &StopList {
        &self.stoplist
    }

    pub fn automaton(&self) -> &Automaton {
        &self.automaton
    }

    pub fn rules(&self) -> &NegationRules {
        &self.rules
    }

    pub fn prefix_index(&self) -> &PrefixIndex {
        &self.index
    }

    pub fn scorer(&self) -> &dyn ContextScorer {
        self.scorer.as_ref()
    }

    pub fn overrides(&self) -> &CardOverrides {
        &self.overrides
    }

    pub fn template(&self, section: Section) -> Option<&str> {
        self.templates.get(&section).map(String::as_str)
    }

    pub fn ros_default(&self) -> &str {
        &self.ros_default
    }

    pub fn suggest_config(&self) -> &SuggestConfig {
        &self.suggest_config
    }

    pub fn scan(&self, text: &str, masked: &[(usize, usize)]) -> Vec<RecognitionSpan> {
        self.automaton.scan(text, masked)
    }

    pub fn annotate(&self, text: &str, spans: &[RecognitionSpan]) -> Vec<AnnotatedSpan> {
        annotate(text, spans, &self.rules, self.lexicon.modifiers())
    }

    /// Trigger decision and ranked suggestions for the text before the caret.
    /// Suggestions are empty when nothing triggers.
    pub fn complete(&self, text_before_caret: &str, record: Option<&PatientRecord>) -> SuggestResponse {
        let query = AutocompleteQuery::parse(text_before_caret);
        let TriggerDecision { trigger, prior } = should_trigger(self.scorer(), text_before_caret);
        let suggestions = if trigger {
            suggest(&query, &prior, &self.index, &self.lexicon, record, &self.suggest_config)
        } else {
            Vec::new()
        };
        SuggestResponse {
            trigger,
            prior,
            query,
            suggestions,
        }
    }

    /// Ranked suggestions for an explicit query, bypassing the trigger.
    pub fn suggest(&self, query: &AutocompleteQuery, prior: &TypePrior, record: Option<&PatientRecord>) -> Vec<Suggestion> {
        suggest(query, prior, &self.index, &self.lexicon, record, &self.suggest_config)
    }

    /// Every match for an explicit query, without the display cap.
    pub fn candidates(&self, query: &AutocompleteQuery, prior: &TypePrior, record: Option<&PatientRecord>) -> Vec<Suggestion> {
        candidates(query, prior, &self.index, &self.lexicon, record, &self.suggest_config)
    }

    /// Free-text search over surface forms with the default ranking.
    pub fn search(&self, text: &str, filter: Option<ConceptType>, record: Option<&PatientRecord>) -> Vec<Suggestion> {
        let query = AutocompleteQuery {
            prefix: text.trim().to_string(),
            replace_from: 0,
            slash: None,
            filter,
        };
        self.suggest(&query, &TypePrior::uniform(), record)
    }

    pub fn card(&self, concept: &ConceptId, record: &PatientRecord, as_of: DateTime<Utc>) -> Result<Card, CardError> {
        assemble_card(concept, record, &self.lexicon, &self.overrides, as_of)
    }

    pub fn lab_tree(&self, concept: &ConceptId, record: &PatientRecord, as_of: DateTime<Utc>) -> Result<LabTree, AutocompleteError> {
        lab_tree(concept, &self.lexicon, record, as_of)
    }
}
