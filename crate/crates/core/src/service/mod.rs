//! Note editing, sidebar sessions, usage events and the network API.

pub mod note;
pub mod http;
pub mod hub;
pub mod protocol;
pub mod session;
pub mod store;

pub use hub::{NoteService, ServiceConfig, ServiceError};
