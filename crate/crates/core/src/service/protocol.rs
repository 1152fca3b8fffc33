//! Versioned messages exchanged on a note stream.
//!
//! Every frame is a JSON object carrying `"v"` (the protocol version) and
//! `"type"`. Server frames also carry `"seq"`, a per-note sequence number
//! that orders broadcasts.

use serde::{Deserialize, Serialize};

use super::note::{Accepted, Completion, Edit, Note, Section, SectionDoc};
use super::session::{NavDirection, SurfaceVia};
use crate::cards::Card;
use crate::engine::SuggestResponse;
use crate::ontology::{ConceptId, ConceptType};

pub const PROTOCOL_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientFrame {
    pub v: u32,
    /// Echoed in the ack or error so clients can match replies.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub id: Option<u64>,
    #[serde(flatten)]
    pub message: ClientMessage,
}

/// Where a card request points: a concept directly, or a chip in the note.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CardTarget {
    Concept { concept: ConceptId },
    Chip { section: Section, chip: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum ClientMessage {
    Edit {
        section: Section,
        edit: Edit,
        /// Caret after the edit; defaults to the end of the inserted text.
        #[serde(skip_serializing_if = "Option::is_none")]
        caret: Option<usize>,
    },
    Caret {
        section: Section,
        offset: usize,
    },
    Suggest {
        section: Section,
        caret: usize,
        #[serde(skip_serializing_if = "Option::is_none")]
        filter: Option<ConceptType>,
    },
    Accept {
        section: Section,
        caret: usize,
        version: u64,
        completion: Completion,
    },
    Autofill {
        section: Section,
    },
    Disambiguate {
        section: Section,
        chip: u64,
        concept: ConceptId,
    },
    Surface {
        via: SurfaceVia,
        #[serde(flatten)]
        target: CardTarget,
    },
    Hover {
        #[serde(flatten)]
        target: CardTarget,
    },
    Pin {
        concept: ConceptId,
    },
    Unpin {
        concept: ConceptId,
    },
    Navigate {
        direction: NavDirection,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PinnedCard {
    pub concept: ConceptId,
    pub card: Card,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PreviewState {
    pub card: Option<Card>,
    pub can_back: bool,
    pub can_forward: bool,
}

/// What one user sees in the sidebar.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SidebarView {
    pub user: String,
    pub preview: PreviewState,
    pub pin_version: u64,
    pub pins: Vec<PinnedCard>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum ServerMessage {
    Snapshot {
        note: Note,
        sidebar: SidebarView,
    },
    Ack {
        #[serde(skip_serializing_if = "Option::is_none")]
        id: Option<u64>,
        version: u64,
        #[serde(skip_serializing_if = "Option::is_none")]
        accepted: Option<Accepted>,
    },
    Section {
        section: Section,
        version: u64,
        doc: SectionDoc,
    },
    Recognition {
        section: Section,
        version: u64,
        /// Ids of chips added by this re-scan.
        added: Vec<u64>,
        doc: SectionDoc,
    },
    Preview {
        user: String,
        preview: PreviewState,
    },
    Pins {
        pin_version: u64,
        pins: Vec<PinnedCard>,
    },
    Suggestions {
        #[serde(skip_serializing_if = "Option::is_none")]
        id: Option<u64>,
        section: Section,
        caret: usize,
        version: u64,
        response: SuggestResponse,
    },
    Hover {
        #[serde(skip_serializing_if = "Option::is_none")]
        id: Option<u64>,
        card: Card,
    },
    Error {
        #[serde(skip_serializing_if = "Option::is_none")]
        id: Option<u64>,
        code: String,
        message: String,
        #[serde(skip_serializing_if = "Vec::is_empty")]
        candidates: Vec<ConceptId>,
    },
}

impl ServerMessage {
    pub fn kind(&self) -> &'static str {
        match self {
            ServerMessage::Snapshot { .. } => "snapshot",
            ServerMessage::Ack { .. } => "ack",
            ServerMessage::Section { .. } => "section",
            ServerMessage::Recognition { .. } => "recognition",
            ServerMessage::Preview { .. } => "preview",
            ServerMessage::Pins { .. } => "pins",
            ServerMessage::Suggestions { .. } => "suggestions",
            ServerMessage::Hover { .. } => "hover",
            ServerMessage::Error { .. } => "error",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ServerFrame {
    pub v: u32,
    pub seq: u64,
    #[serde(flatten)]
    pub message: ServerMessage,
}

impl ServerFrame {
    pub fn new(seq: u64, message: ServerMessage) -> Self {
        Self {
            v: PROTOCOL_VERSION,
            seq,
            message,
        }
    }
}
