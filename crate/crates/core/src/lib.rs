//! Clinical concept recognition and retrieval for note editors.
//!
//! The crate is organised around the pieces a note editor needs while a
//! clinician types:
//!
//! - [`ontology`]: lexicon loading, normalization and surface-form lookup.
//! - [`recognizer`]: multi-pattern recognition of lexicon terms in typed text.
//! - [`negation`]: negation scope detection and modifier attachment.
//! - [`autocomplete`]: trigger scoring, prefix ranking and lab insertion strings.
//! - [`record`]: synthetic patient histories and concept-indexed queries.
//! - [`cards`]: concept-oriented card assembly.
//! - [`service`]: the note model, sidebar sessions, usage events and the HTTP/WebSocket API.

pub mod autocomplete;
pub mod cards;
pub mod engine;
pub mod negation;
pub mod ontology;
pub mod recognizer;
pub mod record;
pub mod service;
pub mod text;

pub use engine::Engine;
pub use ontology::{normalize, Concept, ConceptId, ConceptType, Lexicon};
