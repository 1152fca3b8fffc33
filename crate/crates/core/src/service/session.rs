//! Sidebar state and the usage-event log.
//!
//! The preview pane is per user and keeps a bounded back/forward history.
//! Pins are shared by every session of a note and carry a version counter.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::ontology::ConceptId;

/// Preview entries kept per user.
pub const PREVIEW_HISTORY_DEPTH: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EventKind {
    AutocompleteInsert,
    PostRecognitionDisambiguate,
    CardViaSearch,
    CardViaChipClick,
    CardViaPostRecognition,
    CardViaNoteSnippet,
    Pin,
    Unpin,
    HoverPreview,
}

impl EventKind {
    pub const ALL: [EventKind; 9] = [
        EventKind::AutocompleteInsert,
        EventKind::PostRecognitionDisambiguate,
        EventKind::CardViaSearch,
        EventKind::CardViaChipClick,
        EventKind::CardViaPostRecognition,
        EventKind::CardViaNoteSnippet,
        EventKind::Pin,
        EventKind::Unpin,
        EventKind::HoverPreview,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::AutocompleteInsert => "autocomplete-insert",
            EventKind::PostRecognitionDisambiguate => "post-recognition-disambiguate",
            EventKind::CardViaSearch => "card-via-search",
            EventKind::CardViaChipClick => "card-via-chip-click",
            EventKind::CardViaPostRecognition => "card-via-post-recognition",
            EventKind::CardViaNoteSnippet => "card-via-note-snippet",
            EventKind::Pin => "pin",
            EventKind::Unpin => "unpin",
            EventKind::HoverPreview => "hover-preview",
        }
    }
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EventKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        EventKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown event kind {s:?}"))
    }
}

/// How a card reached the preview pane.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SurfaceVia {
    Search,
    ChipClick,
    PostRecognition,
    NoteSnippet,
}

impl SurfaceVia {
    pub fn event_kind(self) -> EventKind {
        match self {
            SurfaceVia::Search => EventKind::CardViaSearch,
            SurfaceVia::ChipClick => EventKind::CardViaChipClick,
            SurfaceVia::PostRecognition => EventKind::CardViaPostRecognition,
            SurfaceVia::NoteSnippet => EventKind::CardViaNoteSnippet,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UsageEvent {
    pub timestamp: DateTime<Utc>,
    pub user: String,
    pub note_id: String,
    pub kind: EventKind,
    pub concept: ConceptId,
}

/// Per-(user, kind) totals.
pub type EventCounts = BTreeMap<String, BTreeMap<EventKind, usize>>;

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EventLog {
    events: Vec<UsageEvent>,
}

impl EventLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn append(&mut self, event: UsageEvent) {
        self.events.push(event);
    }

    pub fn events(&self) -> &[UsageEvent] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn for_note<'a>(&'a self, note_id: &'a str) -> impl Iterator<Item = &'a UsageEvent> + 'a {
        self.events.iter().filter(move |e| e.note_id == note_id)
    }
}

pub fn count_events<'a>(events: impl IntoIterator<Item = &'a UsageEvent>) -> EventCounts {
    let mut counts = EventCounts::new();
    for e in events {
        *counts.entry(e.user.clone()).or_default().entry(e.kind).or_default() += 1;
    }
    counts
}

/// One user's preview slot with back/forward history.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PreviewPane {
    history: Vec<ConceptId>,
    cursor: usize,
    hidden: bool,
    depth: usize,
}

impl Default for PreviewPane {
    fn default() -> Self {
        Self::with_depth(PREVIEW_HISTORY_DEPTH)
    }
}

impl PreviewPane {
    pub fn with_depth(depth: usize) -> Self {
        Self {
            history: Vec::new(),
            cursor: 0,
            hidden: true,
            depth: depth.max(1),
        }
    }

    pub fn current(&self) -> Option<&ConceptId> {
        if self.hidden {
            None
        } else {
            self.history.get(self.cursor)
        }
    }

    /// Show a card, dropping any forward history.
    pub fn show(&mut self, concept: ConceptId) {
        if !self.history.is_empty() {
            self.history.truncate(self.cursor + 1);
            if self.hidden {
                // a hidden slot is not a page the user can return to
                if self.history.last() == Some(&concept) {
                    self.hidden = false;
                    return;
                }
            } else if self.history.last() == Some(&concept) {
                return;
            }
        }
        self.history.push(concept);
        if self.history.len() > self.depth {
            let excess = self.history.len() - self.depth;
            self.history.drain(..excess);
        }
        self.cursor = self.history.len() - 1;
        self.hidden = false;
    }

    /// Empty the slot without losing history.
    pub fn hide(&mut self) {
        self.hidden = true;
    }

    pub fn can_back(&self) -> bool {
        !self.history.is_empty() && (self.cursor > 0 || self.hidden)
    }

    pub fn can_forward(&self) -> bool {
        self.cursor + 1 < self.history.len()
    }

    pub fn back(&mut self) -> Option<&ConceptId> {
        if self.hidden && !self.history.is_empty() {
            self.hidden = false;
        } else if self.cursor > 0 {
            self.cursor -= 1;
        } else {
            return None;
        }
        self.current()
    }

    pub fn forward(&mut self) -> Option<&ConceptId> {
        if self.can_forward() {
            self.cursor += 1;
            self.hidden = false;
            self.current()
        } else {
            None
        }
    }

    pub fn history(&self) -> &[ConceptId] {
        &self.history
    }
}

/// The shared pinned stack for one note, in server arrival order.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pins {
    pub version: u64,
    pub concepts: Vec<ConceptId>,
}

impl Pins {
    pub fn contains(&self, concept: &ConceptId) -> bool {
        self.concepts.contains(concept)
    }

    /// Returns false for a duplicate, leaving the version alone.
    pub fn pin(&mut self, concept: ConceptId) -> bool {
        if self.contains(&concept) {
            return false;
        }
        self.concepts.push(concept);
        self.version += 1;
        true
    }

    /// Returns false when the concept was not pinned.
    pub fn unpin(&mut self, concept: &ConceptId) -> bool {
        let before = self.concepts.len();
        self.concepts.retain(|c| c != concept);
        if self.concepts.len() == before {
            return false;
        }
        self.version += 1;
        true
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NavDirection {
    Back,
    Forward,
}
