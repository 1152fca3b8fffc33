//! The stateful note service: notes, sidebars, debounced re-scans,
//! usage events and per-note broadcasts.
//!
//! Each note has one lock. Mutations run under it and publish their
//! broadcasts before releasing it, so every subscriber sees the same order.

use std::collections::{BTreeMap, HashMap};
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use chrono::{DateTime, Utc};
use parking_lot::{Mutex, RwLock};
use thiserror::Error;
use tokio::sync::broadcast;

use super::note::{Accepted, Chip, ChipOrigin, Completion, Edit, Note, NoteError, Section};
use super::protocol::{CardTarget, PinnedCard, PreviewState, ServerFrame, ServerMessage, SidebarView};
use super::session::{
    count_events, EventCounts, EventKind, EventLog, NavDirection, Pins, PreviewPane, SurfaceVia, UsageEvent,
};
use super::store::{JournalRecord, Store, StoreError};
use crate::autocomplete::{AutocompleteQuery, SlashCommand};
use crate::cards::{Card, CardError};
use crate::engine::{Engine, SuggestResponse};
use crate::ontology::{ConceptId, ConceptType};
use crate::record::PatientRecord;
use crate::text::slice;

/// Typing pause after which a section is re-scanned.
pub const DEFAULT_DEBOUNCE: Duration = Duration::from_millis(200);
const BROADCAST_CAPACITY: usize = 1024;

#[derive(Error, Debug)]
pub enum ServiceError {
    #[error("no note {0}")]
    UnknownNote(String),

    #[error("no patient {0}")]
    UnknownPatient(String),

    #[error("note {0} already exists")]
    DuplicateNote(String),

    #[error("no chip {chip} in {section}")]
    UnknownChip { section: Section, chip: u64 },

    #[error("\"{surface}\" is ambiguous and must be disambiguated first")]
    NeedsDisambiguation {
        surface: String,
        candidates: Vec<ConceptId>,
    },

    #[error("{0} is not pinned")]
    NotPinned(ConceptId),

    #[error(transparent)]
    Note(#[from] NoteError),

    #[error(transparent)]
    Card(#[from] CardError),

    #[error(transparent)]
    Store(#[from] StoreError),
}

impl ServiceError {
    /// Stable machine-readable code for the wire.
    pub fn code(&self) -> &'static str {
        match self {
            ServiceError::UnknownNote(_) => "unknown-note",
            ServiceError::UnknownPatient(_) => "unknown-patient",
            ServiceError::DuplicateNote(_) => "duplicate-note",
            ServiceError::UnknownChip { .. } => "unknown-chip",
            ServiceError::NeedsDisambiguation { .. } => "needs-disambiguation",
            ServiceError::NotPinned(_) => "not-pinned",
            ServiceError::Note(e) => match e {
                NoteError::OutOfRange { .. } | NoteError::InvertedRange { .. } => "invalid-range",
                NoteError::ChipImmutable(_) => "chip-immutable",
                NoteError::StaleVersion { .. } => "stale-version",
                NoteError::UnknownChip(_) => "unknown-chip",
                NoteError::SectionNotEmpty(_) => "section-not-empty",
                NoteError::NoTemplate(_) => "no-template",
                NoteError::UnknownConcept(_) => "unknown-concept",
                NoteError::Recognizer(_) => "invalid-choice",
                NoteError::Autocomplete(_) => "invalid-completion",
            },
            ServiceError::Card(e) => match e {
                CardError::UnknownConcept(_) => "unknown-concept",
                CardError::UnsupportedType(_) => "no-card",
                CardError::DanglingNote(_) | CardError::DanglingMention { .. } => "unknown-snippet",
                CardError::OverrideParse { .. } | CardError::Io(_) => "internal",
            },
            ServiceError::Store(_) => "internal",
        }
    }

    pub fn candidates(&self) -> Vec<ConceptId> {
        match self {
            ServiceError::NeedsDisambiguation { candidates, .. } => candidates.clone(),
            _ => Vec::new(),
        }
    }

    pub fn to_message(&self, id: Option<u64>) -> ServerMessage {
        ServerMessage::Error {
            id,
            code: self.code().to_string(),
            message: self.to_string(),
            candidates: self.candidates(),
        }
    }
}

pub type ServiceResult<T> = Result<T, ServiceError>;

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub debounce: Duration,
    /// Fixed clock for cards and lab trees; the wall clock when unset.
    pub as_of: Option<DateTime<Utc>>,
    /// Journal file; state is in-memory only when unset.
    pub journal: Option<PathBuf>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            debounce: DEFAULT_DEBOUNCE,
            as_of: None,
            journal: None,
        }
    }
}

/// A broadcast frame, optionally addressed to a single user.
#[derive(Debug, Clone)]
pub struct Outbound {
    pub audience: Option<String>,
    pub frame: ServerFrame,
}

impl Outbound {
    pub fn visible_to(&self, user: &str) -> bool {
        self.audience.as_deref().is_none_or(|a| a == user)
    }
}

#[derive(Debug, Clone)]
struct PendingPreview {
    user: String,
    section: Section,
    chip: u64,
}

struct NoteState {
    note: Note,
    pins: Pins,
    previews: HashMap<String, PreviewPane>,
    carets: HashMap<String, (Section, usize)>,
    /// Generation and editing user per section awaiting a re-scan.
    dirty: BTreeMap<Section, (u64, String)>,
    generation: u64,
    pending: Vec<PendingPreview>,
    seq: u64,
}

struct NoteHandle {
    state: Mutex<NoteState>,
    tx: broadcast::Sender<Arc<Outbound>>,
}

impl NoteState {
    fn new(note: Note, pins: Pins) -> Self {
        Self {
            note,
            pins,
            previews: HashMap::new(),
            carets: HashMap::new(),
            dirty: BTreeMap::new(),
            generation: 0,
            pending: Vec::new(),
            seq: 0,
        }
    }
}

impl NoteHandle {
    fn send(&self, state: &mut NoteState, audience: Option<&str>, message: ServerMessage) {
        state.seq += 1;
        let out = Outbound {
            audience: audience.map(str::to_string),
            frame: ServerFrame::new(state.seq, message),
        };
        // no subscribers is fine
        let _ = self.tx.send(Arc::new(out));
    }
}

/// Start offset of the whitespace-delimited token ending at `caret`.
fn token_start(text: &str, caret: usize) -> usize {
    let chars: Vec<char> = text.chars().take(caret).collect();
    let mut i = chars.len();
    while i > 0 && !chars[i - 1].is_whitespace() {
        i -= 1;
    }
    i
}

pub struct NoteService {
    engine: Arc<Engine>,
    records: RwLock<BTreeMap<String, Arc<PatientRecord>>>,
    notes: RwLock<BTreeMap<String, Arc<NoteHandle>>>,
    events: Mutex<EventLog>,
    store: Mutex<Option<Store>>,
    config: ServiceConfig,
    next_note: AtomicU64,
}

impl std::fmt::Debug for NoteService {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("NoteService")
            .field("patients", &self.records.read().len())
            .field("notes", &self.notes.read().len())
            .field("config", &self.config)
            .finish_non_exhaustive()
    }
}

impl NoteService {
    /// Build the service, replaying the journal when one is configured.
    pub fn new(
        engine: Arc<Engine>,
        records: impl IntoIterator<Item = PatientRecord>,
        config: ServiceConfig,
    ) -> ServiceResult<Arc<Self>> {
        let records = records
            .into_iter()
            .map(|r| (r.patient_id.clone(), Arc::new(r)))
            .collect();
        let mut events = EventLog::new();
        let mut notes = BTreeMap::new();
        let mut store = None;
        if let Some(path) = &config.journal {
            let (s, mut replay) = Store::open(path)?;
            for e in replay.events {
                events.append(e);
            }
            for (id, note) in std::mem::take(&mut replay.notes) {
                let pins = replay.pins.remove(&id).unwrap_or_default();
                notes.insert(id, Self::handle(note, pins));
            }
            store = Some(s);
        }
        let next = notes.len() as u64 + 1;
        Ok(Arc::new(Self {
            engine,
            records: RwLock::new(records),
            notes: RwLock::new(notes),
            events: Mutex::new(events),
            store: Mutex::new(store),
            config,
            next_note: AtomicU64::new(next),
        }))
    }

    fn handle(note: Note, pins: Pins) -> Arc<NoteHandle> {
        let (tx, _) = broadcast::channel(BROADCAST_CAPACITY);
        Arc::new(NoteHandle {
            state: Mutex::new(NoteState::new(note, pins)),
            tx,
        })
    }

    pub fn engine(&self) -> &Engine {
        &self.engine
    }

    pub fn as_of(&self) -> DateTime<Utc> {
        self.config.as_of.unwrap_or_else(Utc::now)
    }

    pub fn add_record(&self, record: PatientRecord) {
        self.records.write().insert(record.patient_id.clone(), Arc::new(record));
    }

    pub fn patients(&self) -> Vec<String> {
        self.records.read().keys().cloned().collect()
    }

    pub fn record(&self, patient_id: &str) -> ServiceResult<Arc<PatientRecord>> {
        self.records
            .read()
            .get(patient_id)
            .cloned()
            .ok_or_else(|| ServiceError::UnknownPatient(patient_id.to_string()))
    }

    fn note_handle(&self, note_id: &str) -> ServiceResult<Arc<NoteHandle>> {
        self.notes
            .read()
            .get(note_id)
            .cloned()
            .ok_or_else(|| ServiceError::UnknownNote(note_id.to_string()))
    }

    fn persist(&self, record: JournalRecord) -> ServiceResult<()> {
        if let Some(store) = self.store.lock().as_mut() {
            store.append(&record)?;
        }
        Ok(())
    }

    fn log(&self, user: &str, note_id: &str, kind: EventKind, concept: &ConceptId) -> ServiceResult<()> {
        let event = UsageEvent {
            timestamp: Utc::now(),
            user: user.to_string(),
            note_id: note_id.to_string(),
            kind,
            concept: concept.clone(),
        };
        self.events.lock().append(event.clone());
        self.persist(JournalRecord::Event { event })
    }

    pub fn create_note(&self, patient_id: &str, note_id: Option<String>) -> ServiceResult<Note> {
        self.record(patient_id)?;
        let mut notes = self.notes.write();
        let id = match note_id {
            Some(id) if notes.contains_key(&id) => return Err(ServiceError::DuplicateNote(id)),
            Some(id) => id,
            None => loop {
                let id = format!("note-{}", self.next_note.fetch_add(1, Ordering::Relaxed));
                if !notes.contains_key(&id) {
                    break id;
                }
            },
        };
        let note = Note::new(id.clone(), patient_id);
        notes.insert(id, Self::handle(note.clone(), Pins::default()));
        drop(notes);
        self.persist(JournalRecord::Note { note: note.clone() })?;
        Ok(note)
    }

    pub fn note_ids(&self) -> Vec<String> {
        self.notes.read().keys().cloned().collect()
    }

    pub fn note(&self, note_id: &str) -> ServiceResult<Note> {
        Ok(self.note_handle(note_id)?.state.lock().note.clone())
    }

    pub fn pins(&self, note_id: &str) -> ServiceResult<Pins> {
        Ok(self.note_handle(note_id)?.state.lock().pins.clone())
    }

    pub fn card(&self, concept: &ConceptId, patient_id: &str) -> ServiceResult<Card> {
        let record = self.record(patient_id)?;
        Ok(self.engine.card(concept, &record, self.as_of())?)
    }

    /// Subscribe to a note's broadcasts, with a snapshot taken under the
    /// same lock so no frame is missed or duplicated.
    pub fn subscribe(
        &self,
        note_id: &str,
        user: &str,
    ) -> ServiceResult<(ServerFrame, broadcast::Receiver<Arc<Outbound>>)> {
        let handle = self.note_handle(note_id)?;
        let state = handle.state.lock();
        let rx = handle.tx.subscribe();
        let record = self.record(&state.note.patient_id)?;
        let sidebar = self.sidebar_view(&state, &record, user);
        let frame = ServerFrame::new(
            state.seq,
            ServerMessage::Snapshot {
                note: state.note.clone(),
                sidebar,
            },
        );
        Ok((frame, rx))
    }

    fn assemble(&self, concept: &ConceptId, record: &PatientRecord) -> Option<Card> {
        self.engine.card(concept, record, self.as_of()).ok()
    }

    fn preview_state(&self, state: &NoteState, record: &PatientRecord, user: &str) -> PreviewState {
        match state.previews.get(user) {
            Some(p) => PreviewState {
                card: p.current().and_then(|c| self.assemble(c, record)),
                can_back: p.can_back(),
                can_forward: p.can_forward(),
            },
            None => PreviewState {
                card: None,
                can_back: false,
                can_forward: false,
            },
        }
    }

    fn pinned_cards(&self, state: &NoteState, record: &PatientRecord) -> Vec<PinnedCard> {
        state
            .pins
            .concepts
            .iter()
            .filter_map(|c| {
                self.assemble(c, record).map(|card| PinnedCard {
                    concept: c.clone(),
                    card,
                })
            })
            .collect()
    }

    fn sidebar_view(&self, state: &NoteState, record: &PatientRecord, user: &str) -> SidebarView {
        SidebarView {
            user: user.to_string(),
            preview: self.preview_state(state, record, user),
            pin_version: state.pins.version,
            pins: self.pinned_cards(state, record),
        }
    }

    pub fn sidebar(&self, note_id: &str, user: &str) -> ServiceResult<SidebarView> {
        let handle = self.note_handle(note_id)?;
        let state = handle.state.lock();
        let record = self.record(&state.note.patient_id)?;
        Ok(self.sidebar_view(&state, &record, user))
    }

    fn send_preview(&self, handle: &NoteHandle, state: &mut NoteState, record: &PatientRecord, user: &str) {
        let preview = self.preview_state(state, record, user);
        handle.send(
            state,
            Some(user),
            ServerMessage::Preview {
                user: user.to_string(),
                preview,
            },
        );
    }

    fn send_section(handle: &NoteHandle, state: &mut NoteState, section: Section) {
        let msg = ServerMessage::Section {
            section,
            version: state.note.version,
            doc: state.note.section(section).clone(),
        };
        handle.send(state, None, msg);
    }

    /// Put a card in the user's preview pane. Pinned cards stay in the
    /// sidebar only.
    fn show_preview(&self, state: &mut NoteState, user: &str, concept: &ConceptId) -> bool {
        if state.pins.contains(concept) {
            return false;
        }
        state.previews.entry(user.to_string()).or_default().show(concept.clone());
        true
    }

    // ---- editing ----

    /// Apply an edit and queue the section for a debounced re-scan.
    pub fn edit(
        self: &Arc<Self>,
        note_id: &str,
        user: &str,
        section: Section,
        edit: &Edit,
        caret: Option<usize>,
    ) -> ServiceResult<u64> {
        let handle = self.note_handle(note_id)?;
        let mut state = handle.state.lock();
        state.note.apply_edit(section, edit)?;
        let caret = caret.unwrap_or(match edit {
            Edit::Insert { offset, text } => offset + text.chars().count(),
            Edit::Delete { start, .. } => *start,
            Edit::Replace { start, text, .. } => start + text.chars().count(),
            Edit::MoveChip { .. } => state.carets.get(user).map_or(0, |c| c.1),
        });
        state.carets.insert(user.to_string(), (section, caret));
        state.generation += 1;
        let generation = state.generation;
        state.dirty.insert(section, (generation, user.to_string()));
        Self::send_section(&handle, &mut state, section);
        let version = state.note.version;
        drop(state);
        self.schedule_rescan(note_id, section, generation);
        Ok(version)
    }

    fn schedule_rescan(self: &Arc<Self>, note_id: &str, section: Section, generation: u64) {
        let Ok(rt) = tokio::runtime::Handle::try_current() else {
            return;
        };
        let service = Arc::clone(self);
        let note_id = note_id.to_string();
        let delay = self.config.debounce;
        rt.spawn(async move {
            tokio::time::sleep(delay).await;
            if let Err(e) = service.rescan_if_current(&note_id, section, generation) {
                log::warn!("re-scan of {note_id}/{section} failed: {e}");
            }
        });
    }

    fn rescan_if_current(&self, note_id: &str, section: Section, generation: u64) -> ServiceResult<()> {
        let handle = self.note_handle(note_id)?;
        let mut state = handle.state.lock();
        if state.dirty.get(&section).map(|d| d.0) != Some(generation) {
            return Ok(());
        }
        self.rescan_locked(&handle, &mut state, section)
    }

    /// Run every pending re-scan of a note now.
    pub fn settle(&self, note_id: &str) -> ServiceResult<()> {
        let handle = self.note_handle(note_id)?;
        let mut state = handle.state.lock();
        let sections: Vec<Section> = state.dirty.keys().copied().collect();
        for section in sections {
            self.rescan_locked(&handle, &mut state, section)?;
        }
        Ok(())
    }

    pub fn has_pending_rescan(&self, note_id: &str) -> ServiceResult<bool> {
        Ok(!self.note_handle(note_id)?.state.lock().dirty.is_empty())
    }

    fn rescan_locked(&self, handle: &NoteHandle, state: &mut NoteState, section: Section) -> ServiceResult<()> {
        let Some((_, user)) = state.dirty.remove(&section) else {
            return Ok(());
        };
        let record = self.record(&state.note.patient_id)?;
        let added = state.note.rescan(&self.engine, &record, section);
        let lex = self.engine.lexicon();
        for id in &added {
            let chip = state.note.section(section).chip(*id).expect("new chip present");
            let has_card = chip
                .resolved()
                .and_then(|c| lex.concept(c))
                .is_some_and(|c| c.concept_type != ConceptType::Symptom);
            if has_card {
                state.pending.push(PendingPreview {
                    user: user.clone(),
                    section,
                    chip: *id,
                });
            }
        }
        let msg = ServerMessage::Recognition {
            section,
            version: state.note.version,
            added,
            doc: state.note.section(section).clone(),
        };
        handle.send(state, None, msg);
        self.auto_preview(handle, state, &record, &user)?;
        self.persist(JournalRecord::Note {
            note: state.note.clone(),
        })
    }

    /// Preview the latest new recognition that ends before the user's
    /// current token.
    fn auto_preview(
        &self,
        handle: &NoteHandle,
        state: &mut NoteState,
        record: &PatientRecord,
        user: &str,
    ) -> ServiceResult<()> {
        let caret = state.carets.get(user).copied();
        let mut best: Option<(usize, ConceptId)> = None;
        let note = &state.note;
        state.pending.retain(|p| {
            if p.user != user {
                return true;
            }
            let Some(chip) = note.section(p.section).chip(p.chip) else {
                return false;
            };
            let Some(concept) = chip.resolved() else {
                return false;
            };
            match caret {
                Some((s, offset)) if s == p.section => {
                    let doc = note.section(s);
                    if chip.end() <= token_start(&doc.text, offset) {
                        if best.as_ref().is_none_or(|b| chip.end() >= b.0) {
                            best = Some((chip.end(), concept.clone()));
                        }
                        false
                    } else {
                        true
                    }
                }
                _ => false,
            }
        });
        if let Some((_, concept)) = best {
            if self.show_preview(state, user, &concept) {
                self.log(user, &state.note.id, EventKind::CardViaPostRecognition, &concept)?;
                self.send_preview(handle, state, record, user);
            }
        }
        Ok(())
    }

    pub fn set_caret(&self, note_id: &str, user: &str, section: Section, offset: usize) -> ServiceResult<()> {
        let handle = self.note_handle(note_id)?;
        let mut state = handle.state.lock();
        let len = state.note.section(section).len();
        if offset > len {
            return Err(NoteError::OutOfRange { offset, len }.into());
        }
        state.carets.insert(user.to_string(), (section, offset));
        let record = self.record(&state.note.patient_id)?;
        self.auto_preview(&handle, &mut state, &record, user)
    }

    /// Completion response for a caret in a note section. An explicit
    /// `filter` behaves like a slash filter typed before the prefix.
    pub fn autocomplete(
        &self,
        note_id: &str,
        section: Section,
        caret: usize,
        prefix: Option<&str>,
        filter: Option<ConceptType>,
    ) -> ServiceResult<(u64, SuggestResponse)> {
        let handle = self.note_handle(note_id)?;
        let state = handle.state.lock();
        let doc = state.note.section(section);
        let len = doc.len();
        if caret > len {
            return Err(NoteError::OutOfRange { offset: caret, len }.into());
        }
        let before = slice(&doc.text, 0, caret).to_string();
        let version = state.note.version;
        let record = self.record(&state.note.patient_id)?;
        drop(state);
        Ok((version, self.complete(&before, prefix, filter, Some(&record))))
    }

    /// Completion for free text, outside any note.
    pub fn complete(
        &self,
        text_before_caret: &str,
        prefix: Option<&str>,
        filter: Option<ConceptType>,
        record: Option<&PatientRecord>,
    ) -> SuggestResponse {
        if prefix.is_none() && filter.is_none() {
            return self.engine.complete(text_before_caret, record);
        }
        let mut query = AutocompleteQuery::parse(text_before_caret);
        if let Some(p) = prefix {
            query.prefix = p.to_string();
        }
        if filter.is_some() {
            query.filter = filter;
            query.slash = filter.map(SlashCommand::Filter);
        }
        let mut response = self.engine.complete(text_before_caret, record);
        if filter.is_some() {
            response.trigger = true;
        }
        response.suggestions = if response.trigger {
            self.engine.suggest(&query, &response.prior, record)
        } else {
            Vec::new()
        };
        response.query = query;
        response
    }

    pub fn accept(
        &self,
        note_id: &str,
        user: &str,
        section: Section,
        caret: usize,
        version: u64,
        completion: &Completion,
    ) -> ServiceResult<Accepted> {
        let handle = self.note_handle(note_id)?;
        let mut state = handle.state.lock();
        let record = self.record(&state.note.patient_id)?;
        let accepted =
            state
                .note
                .accept_completion(&self.engine, &record, section, caret, version, completion, self.as_of())?;
        state.carets.insert(user.to_string(), (section, accepted.caret));
        self.log(user, note_id, EventKind::AutocompleteInsert, &accepted.concept)?;
        Self::send_section(&handle, &mut state, section);
        if self.assemble(&accepted.concept, &record).is_some() && self.show_preview(&mut state, user, &accepted.concept) {
            self.send_preview(&handle, &mut state, &record, user);
        }
        self.persist(JournalRecord::Note {
            note: state.note.clone(),
        })?;
        Ok(accepted)
    }

    pub fn autofill(&self, note_id: &str, section: Section) -> ServiceResult<u64> {
        let handle = self.note_handle(note_id)?;
        let mut state = handle.state.lock();
        let record = self.record(&state.note.patient_id)?;
        state.note.autofill_section(&self.engine, &record, section)?;
        state.dirty.remove(&section);
        Self::send_section(&handle, &mut state, section);
        self.persist(JournalRecord::Note {
            note: state.note.clone(),
        })?;
        Ok(state.note.version)
    }

    pub fn disambiguate(
        &self,
        note_id: &str,
        user: &str,
        section: Section,
        chip: u64,
        concept: &ConceptId,
    ) -> ServiceResult<u64> {
        let handle = self.note_handle(note_id)?;
        let mut state = handle.state.lock();
        let record = self.record(&state.note.patient_id)?;
        state.note.disambiguate(&self.engine, &record, section, chip, concept)?;
        self.log(user, note_id, EventKind::PostRecognitionDisambiguate, concept)?;
        Self::send_section(&handle, &mut state, section);
        self.persist(JournalRecord::Note {
            note: state.note.clone(),
        })?;
        Ok(state.note.version)
    }

    fn resolve_target(state: &NoteState, target: &CardTarget) -> ServiceResult<ConceptId> {
        match target {
            CardTarget::Concept { concept } => Ok(concept.clone()),
            CardTarget::Chip { section, chip } => {
                let c: &Chip = state.note.section(*section).chip(*chip).ok_or(ServiceError::UnknownChip {
                    section: *section,
                    chip: *chip,
                })?;
                c.resolved().cloned().ok_or_else(|| ServiceError::NeedsDisambiguation {
                    surface: c.span().surface.clone(),
                    candidates: c.span().candidates.clone(),
                })
            }
        }
    }

    /// Show a card in the user's preview pane and log how it got there.
    pub fn surface(
        &self,
        note_id: &str,
        user: &str,
        via: SurfaceVia,
        target: &CardTarget,
    ) -> ServiceResult<SidebarView> {
        let handle = self.note_handle(note_id)?;
        let mut state = handle.state.lock();
        let record = self.record(&state.note.patient_id)?;
        let concept = Self::resolve_target(&state, target)?;
        self.engine.card(&concept, &record, self.as_of())?;
        self.log(user, note_id, via.event_kind(), &concept)?;
        if self.show_preview(&mut state, user, &concept) {
            self.send_preview(&handle, &mut state, &record, user);
        }
        Ok(self.sidebar_view(&state, &record, user))
    }

    /// The inline card for a chip or concept. The preview pane is untouched.
    pub fn hover(&self, note_id: &str, user: &str, target: &CardTarget) -> ServiceResult<Card> {
        let handle = self.note_handle(note_id)?;
        let state = handle.state.lock();
        let record = self.record(&state.note.patient_id)?;
        let concept = Self::resolve_target(&state, target)?;
        let card = self.engine.card(&concept, &record, self.as_of())?;
        self.log(user, note_id, EventKind::HoverPreview, &concept)?;
        Ok(card)
    }

    fn send_pins(&self, handle: &NoteHandle, state: &mut NoteState, record: &PatientRecord) {
        let msg = ServerMessage::Pins {
            pin_version: state.pins.version,
            pins: self.pinned_cards(state, record),
        };
        handle.send(state, None, msg);
    }

    /// Pin a card to the shared sidebar. Pinning twice is a no-op.
    pub fn pin(&self, note_id: &str, user: &str, concept: &ConceptId) -> ServiceResult<SidebarView> {
        let handle = self.note_handle(note_id)?;
        let mut state = handle.state.lock();
        let record = self.record(&state.note.patient_id)?;
        self.engine.card(concept, &record, self.as_of())?;
        if state.pins.pin(concept.clone()) {
            self.log(user, note_id, EventKind::Pin, concept)?;
            self.persist(JournalRecord::Pins {
                note_id: note_id.to_string(),
                pins: state.pins.clone(),
            })?;
            let showing: Vec<String> = state
                .previews
                .iter()
                .filter(|(_, p)| p.current() == Some(concept))
                .map(|(u, _)| u.clone())
                .collect();
            for u in &showing {
                state.previews.get_mut(u).expect("listed").hide();
            }
            self.send_pins(&handle, &mut state, &record);
            for u in &showing {
                self.send_preview(&handle, &mut state, &record, u);
            }
        }
        Ok(self.sidebar_view(&state, &record, user))
    }

    pub fn unpin(&self, note_id: &str, user: &str, concept: &ConceptId) -> ServiceResult<SidebarView> {
        let handle = self.note_handle(note_id)?;
        let mut state = handle.state.lock();
        let record = self.record(&state.note.patient_id)?;
        if !state.pins.unpin(concept) {
            return Err(ServiceError::NotPinned(concept.clone()));
        }
        self.log(user, note_id, EventKind::Unpin, concept)?;
        self.persist(JournalRecord::Pins {
            note_id: note_id.to_string(),
            pins: state.pins.clone(),
        })?;
        self.send_pins(&handle, &mut state, &record);
        Ok(self.sidebar_view(&state, &record, user))
    }

    pub fn navigate(&self, note_id: &str, user: &str, direction: NavDirection) -> ServiceResult<SidebarView> {
        let handle = self.note_handle(note_id)?;
        let mut state = handle.state.lock();
        let record = self.record(&state.note.patient_id)?;
        let pane = state.previews.entry(user.to_string()).or_default();
        let moved = match direction {
            NavDirection::Back => pane.back().is_some(),
            NavDirection::Forward => pane.forward().is_some(),
        };
        if moved {
            self.send_preview(&handle, &mut state, &record, user);
        }
        Ok(self.sidebar_view(&state, &record, user))
    }

    pub fn events(&self, note_id: Option<&str>) -> Vec<UsageEvent> {
        let log = self.events.lock();
        match note_id {
            Some(id) => log.for_note(id).cloned().collect(),
            None => log.events().to_vec(),
        }
    }

    pub fn event_counts(&self, note_id: Option<&str>) -> EventCounts {
        count_events(&self.events(note_id))
    }

    /// Origins of the chips in a section, for diagnostics and tests.
    pub fn chip_origins(&self, note_id: &str, section: Section) -> ServiceResult<Vec<ChipOrigin>> {
        let handle = self.note_handle(note_id)?;
        let state = handle.state.lock();
        Ok(state.note.section(section).chips.iter().map(|c| c.origin).collect())
    }
}
