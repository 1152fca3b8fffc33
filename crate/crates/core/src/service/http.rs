//! HTTP and WebSocket binding for [`NoteService`].
//!
//! The acting user comes from the `x-knowted-user` header, or the `user`
//! query parameter for clients that cannot set headers (browsers opening a
//! WebSocket). Errors are JSON bodies `{code, message, candidates?}`.

use std::collections::BTreeMap;
use std::sync::Arc;

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Path, Query, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{delete, get, post};
use axum::{Json, Router};
use futures::{SinkExt, StreamExt};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::sync::broadcast::error::RecvError;

use super::hub::{NoteService, ServiceError, ServiceResult};
use super::note::{Edit, Note, Section};
use super::protocol::{CardTarget, ClientFrame, ClientMessage, ServerFrame, ServerMessage, PROTOCOL_VERSION};
use super::session::{EventCounts, Pins, SurfaceVia, UsageEvent};
use crate::autocomplete::{parse_slash_filter, SlashCommand};
use crate::cards::{expand_snippet, SnippetRef};
use crate::ontology::{ConceptId, ConceptType};

pub const USER_HEADER: &str = "x-knowted-user";
const DEFAULT_USER: &str = "anonymous";

pub struct ApiError {
    status: StatusCode,
    code: String,
    message: String,
    candidates: Vec<ConceptId>,
}

impl ApiError {
    fn bad_request(message: impl Into<String>) -> Self {
        Self {
            status: StatusCode::BAD_REQUEST,
            code: "bad-request".into(),
            message: message.into(),
            candidates: Vec::new(),
        }
    }
}

pub fn status_for(code: &str) -> StatusCode {
    match code {
        "unknown-note" | "unknown-patient" | "unknown-chip" | "unknown-concept" | "unknown-snippet" => {
            StatusCode::NOT_FOUND
        }
        "stale-version" | "chip-immutable" | "section-not-empty" | "duplicate-note" | "not-pinned"
        | "needs-disambiguation" => StatusCode::CONFLICT,
        "internal" => StatusCode::INTERNAL_SERVER_ERROR,
        _ => StatusCode::UNPROCESSABLE_ENTITY,
    }
}

impl From<ServiceError> for ApiError {
    fn from(e: ServiceError) -> Self {
        Self {
            status: status_for(e.code()),
            code: e.code().to_string(),
            message: e.to_string(),
            candidates: e.candidates(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut body = json!({"code": self.code, "message": self.message});
        if !self.candidates.is_empty() {
            body["candidates"] = json!(self.candidates);
        }
        (self.status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

#[derive(Debug, Deserialize, Default)]
struct UserQuery {
    user: Option<String>,
}

fn user_of(headers: &HeaderMap, query: &UserQuery) -> String {
    headers
        .get(USER_HEADER)
        .and_then(|v| v.to_str().ok())
        .map(str::to_string)
        .or_else(|| query.user.clone())
        .filter(|u| !u.trim().is_empty())
        .unwrap_or_else(|| DEFAULT_USER.to_string())
}

/// Accepts a type name (`medication`) or a slash filter (`m`, `/m`).
fn parse_filter(raw: Option<&str>) -> Result<Option<ConceptType>, ApiError> {
    let Some(raw) = raw.map(str::trim).filter(|s| !s.is_empty()) else {
        return Ok(None);
    };
    if let Ok(t) = raw.parse::<ConceptType>() {
        return Ok(Some(t));
    }
    let slash = if raw.starts_with('/') { raw.to_string() } else { format!("/{raw}") };
    match parse_slash_filter(&slash) {
        Some(SlashCommand::Filter(t)) => Ok(Some(t)),
        _ => Err(ApiError::bad_request(format!("unknown filter {raw:?}"))),
    }
}

fn parse_section(raw: &str) -> Result<Section, ApiError> {
    raw.parse().map_err(ApiError::bad_request)
}

pub fn router(service: Arc<NoteService>) -> Router {
    Router::new()
        .route("/health", get(|| async { Json(json!({"status": "ok", "protocol": PROTOCOL_VERSION})) }))
        .route("/patients", get(list_patients))
        .route("/patients/{id}", get(patient_summary))
        .route("/patients/{id}/record", get(patient_record))
        .route("/patients/{id}/notes/{note}", get(prior_note))
        .route("/search", get(search))
        .route("/lab-tree/{concept}", get(lab_tree))
        .route("/autocomplete", get(autocomplete))
        .route("/cards/{concept}", get(card))
        .route("/notes", post(create_note).get(list_notes))
        .route("/notes/{id}", get(get_note))
        .route("/notes/{id}/edits", post(post_edit))
        .route("/notes/{id}/sidebar", get(sidebar))
        .route("/notes/{id}/surface", post(surface))
        .route("/notes/{id}/pins", post(pin).get(get_pins))
        .route("/notes/{id}/pins/{concept}", delete(unpin))
        .route("/notes/{id}/events", get(events))
        .route("/notes/{id}/stream", get(stream))
        .with_state(service)
}

type Svc = State<Arc<NoteService>>;

async fn list_patients(State(s): Svc) -> Json<Vec<String>> {
    Json(s.patients())
}

#[derive(Debug, Serialize)]
struct PatientSummary {
    patient_id: String,
    labs: usize,
    notes: usize,
    entries: usize,
    concepts: BTreeMap<ConceptType, usize>,
}

async fn patient_summary(State(s): Svc, Path(id): Path<String>) -> ApiResult<PatientSummary> {
    let r = s.record(&id)?;
    let lex = s.engine().lexicon();
    let mut concepts = BTreeMap::new();
    let ids = r
        .labs
        .iter()
        .map(|l| &l.concept)
        .chain(r.entries.iter().map(|e| &e.concept))
        .collect::<std::collections::BTreeSet<_>>();
    for c in ids {
        if let Some(c) = lex.concept(c) {
            *concepts.entry(c.concept_type).or_default() += 1;
        }
    }
    Ok(Json(PatientSummary {
        patient_id: r.patient_id.clone(),
        labs: r.labs.len(),
        notes: r.notes.len(),
        entries: r.entries.len(),
        concepts,
    }))
}

async fn patient_record(State(s): Svc, Path(id): Path<String>) -> Result<Response, ApiError> {
    let r = s.record(&id)?;
    Ok(Json(&*r).into_response())
}

#[derive(Debug, Deserialize)]
struct SnippetQuery {
    start: Option<usize>,
    end: Option<usize>,
}

async fn prior_note(
    State(s): Svc,
    Path((id, note)): Path<(String, String)>,
    Query(q): Query<SnippetQuery>,
) -> Result<Response, ApiError> {
    let r = s.record(&id)?;
    let highlight = match (q.start, q.end) {
        (Some(a), Some(b)) => Some((a, b)),
        (None, None) => None,
        _ => return Err(ApiError::bad_request("start and end go together")),
    };
    let expanded = expand_snippet(&SnippetRef { note_id: note, highlight }, &r).map_err(ServiceError::from)?;
    Ok(Json(expanded).into_response())
}

#[derive(Debug, Deserialize)]
struct SearchQuery {
    q: String,
    patient: Option<String>,
    filter: Option<String>,
}

async fn search(State(s): Svc, Query(q): Query<SearchQuery>) -> Result<Response, ApiError> {
    let filter = parse_filter(q.filter.as_deref())?;
    let record = q.patient.as_deref().map(|p| s.record(p)).transpose()?;
    let hits = s.engine().search(&q.q, filter, record.as_deref());
    Ok(Json(hits).into_response())
}

#[derive(Debug, Deserialize)]
struct PatientQuery {
    patient: String,
}

async fn lab_tree(State(s): Svc, Path(concept): Path<String>, Query(q): Query<PatientQuery>) -> Result<Response, ApiError> {
    let record = s.record(&q.patient)?;
    let tree = s
        .engine()
        .lab_tree(&ConceptId::new(concept), &record, s.as_of())
        .map_err(|e| ApiError {
            status: StatusCode::UNPROCESSABLE_ENTITY,
            code: "not-a-lab".into(),
            message: e.to_string(),
            candidates: Vec::new(),
        })?;
    Ok(Json(tree).into_response())
}

#[derive(Debug, Deserialize)]
struct AutocompleteParams {
    note: Option<String>,
    section: Option<String>,
    caret: Option<usize>,
    prefix: Option<String>,
    filter: Option<String>,
    patient: Option<String>,
}

#[derive(Debug, Serialize)]
struct AutocompleteReply {
    #[serde(skip_serializing_if = "Option::is_none")]
    version: Option<u64>,
    #[serde(flatten)]
    response: crate::engine::SuggestResponse,
}

/// With `note`, completes at `caret` in `section` of that note (`prefix`
/// overrides the typed token). Without it, completes `prefix` as free text.
async fn autocomplete(State(s): Svc, Query(q): Query<AutocompleteParams>) -> Result<Response, ApiError> {
    let filter = parse_filter(q.filter.as_deref())?;
    let reply = match &q.note {
        Some(note) => {
            let section = parse_section(q.section.as_deref().unwrap_or("hpi"))?;
            let caret = match q.caret {
                Some(c) => c,
                None => s.note(note)?.section(section).len(),
            };
            let (version, response) = s.autocomplete(note, section, caret, q.prefix.as_deref(), filter)?;
            AutocompleteReply {
                version: Some(version),
                response,
            }
        }
        None => {
            let text = q.prefix.as_deref().unwrap_or_default();
            let record = q.patient.as_deref().map(|p| s.record(p)).transpose()?;
            AutocompleteReply {
                version: None,
                response: s.complete(text, None, filter, record.as_deref()),
            }
        }
    };
    Ok(Json(reply).into_response())
}

async fn card(State(s): Svc, Path(concept): Path<String>, Query(q): Query<PatientQuery>) -> Result<Response, ApiError> {
    Ok(Json(s.card(&ConceptId::new(concept), &q.patient)?).into_response())
}

#[derive(Debug, Deserialize)]
struct CreateNote {
    patient_id: String,
    #[serde(default)]
    note_id: Option<String>,
}

async fn create_note(State(s): Svc, Json(body): Json<CreateNote>) -> Result<Response, ApiError> {
    let note = s.create_note(&body.patient_id, body.note_id)?;
    Ok((StatusCode::CREATED, Json(note)).into_response())
}

async fn list_notes(State(s): Svc) -> Json<Vec<String>> {
    Json(s.note_ids())
}

#[derive(Debug, Serialize)]
struct NoteView {
    note: Note,
    pins: Pins,
}

async fn get_note(State(s): Svc, Path(id): Path<String>) -> ApiResult<NoteView> {
    Ok(Json(NoteView {
        note: s.note(&id)?,
        pins: s.pins(&id)?,
    }))
}

#[derive(Debug, Deserialize)]
struct EditBody {
    section: Section,
    edit: Edit,
    #[serde(default)]
    caret: Option<usize>,
}

async fn post_edit(
    State(s): Svc,
    Path(id): Path<String>,
    headers: HeaderMap,
    Query(uq): Query<UserQuery>,
    Json(body): Json<EditBody>,
) -> Result<Response, ApiError> {
    let user = user_of(&headers, &uq);
    let version = s.edit(&id, &user, body.section, &body.edit, body.caret)?;
    Ok(Json(json!({"version": version})).into_response())
}

async fn sidebar(State(s): Svc, Path(id): Path<String>, headers: HeaderMap, Query(uq): Query<UserQuery>) -> Result<Response, ApiError> {
    Ok(Json(s.sidebar(&id, &user_of(&headers, &uq))?).into_response())
}

#[derive(Debug, Deserialize)]
struct SurfaceBody {
    via: SurfaceVia,
    #[serde(flatten)]
    target: CardTarget,
}

async fn surface(
    State(s): Svc,
    Path(id): Path<String>,
    headers: HeaderMap,
    Query(uq): Query<UserQuery>,
    Json(body): Json<SurfaceBody>,
) -> Result<Response, ApiError> {
    let user = user_of(&headers, &uq);
    Ok(Json(s.surface(&id, &user, body.via, &body.target)?).into_response())
}

#[derive(Debug, Deserialize)]
struct PinBody {
    concept: ConceptId,
}

async fn pin(
    State(s): Svc,
    Path(id): Path<String>,
    headers: HeaderMap,
    Query(uq): Query<UserQuery>,
    Json(body): Json<PinBody>,
) -> Result<Response, ApiError> {
    let user = user_of(&headers, &uq);
    Ok(Json(s.pin(&id, &user, &body.concept)?).into_response())
}

async fn get_pins(State(s): Svc, Path(id): Path<String>) -> ApiResult<Pins> {
    Ok(Json(s.pins(&id)?))
}

async fn unpin(
    State(s): Svc,
    Path((id, concept)): Path<(String, String)>,
    headers: HeaderMap,
    Query(uq): Query<UserQuery>,
) -> Result<Response, ApiError> {
    let user = user_of(&headers, &uq);
    Ok(Json(s.unpin(&id, &user, &ConceptId::new(concept))?).into_response())
}

#[derive(Debug, Serialize)]
struct EventsView {
    events: Vec<UsageEvent>,
    counts: EventCounts,
}

async fn events(State(s): Svc, Path(id): Path<String>) -> ApiResult<EventsView> {
    s.note(&id)?;
    Ok(Json(EventsView {
        events: s.events(Some(&id)),
        counts: s.event_counts(Some(&id)),
    }))
}

async fn stream(
    State(s): Svc,
    Path(id): Path<String>,
    headers: HeaderMap,
    Query(uq): Query<UserQuery>,
    ws: WebSocketUpgrade,
) -> Result<Response, ApiError> {
    s.note(&id)?;
    let user = user_of(&headers, &uq);
    Ok(ws.on_upgrade(move |socket| run_stream(s, id, user, socket)))
}

fn encode(frame: &ServerFrame) -> Message {
    Message::Text(serde_json::to_string(frame).expect("frames serialize").into())
}

/// Handle one client message, returning a direct reply when there is one.
fn dispatch(s: &Arc<NoteService>, note: &str, user: &str, frame: ClientFrame) -> ServiceResult<Option<ServerMessage>> {
    let id = frame.id;
    let ack = |version: u64| Some(ServerMessage::Ack { id, version, accepted: None });
    Ok(match frame.message {
        ClientMessage::Edit { section, edit, caret } => ack(s.edit(note, user, section, &edit, caret)?),
        ClientMessage::Caret { section, offset } => {
            s.set_caret(note, user, section, offset)?;
            None
        }
        ClientMessage::Suggest { section, caret, filter } => {
            let (version, response) = s.autocomplete(note, section, caret, None, filter)?;
            Some(ServerMessage::Suggestions {
                id,
                section,
                caret,
                version,
                response,
            })
        }
        ClientMessage::Accept {
            section,
            caret,
            version,
            completion,
        } => {
            let accepted = s.accept(note, user, section, caret, version, &completion)?;
            Some(ServerMessage::Ack {
                id,
                version: s.note(note)?.version,
                accepted: Some(accepted),
            })
        }
        ClientMessage::Autofill { section } => ack(s.autofill(note, section)?),
        ClientMessage::Disambiguate { section, chip, concept } => {
            ack(s.disambiguate(note, user, section, chip, &concept)?)
        }
        ClientMessage::Surface { via, target } => {
            s.surface(note, user, via, &target)?;
            ack(s.note(note)?.version)
        }
        ClientMessage::Hover { target } => Some(ServerMessage::Hover {
            id,
            card: s.hover(note, user, &target)?,
        }),
        ClientMessage::Pin { concept } => {
            s.pin(note, user, &concept)?;
            ack(s.note(note)?.version)
        }
        ClientMessage::Unpin { concept } => {
            s.unpin(note, user, &concept)?;
            ack(s.note(note)?.version)
        }
        ClientMessage::Navigate { direction } => {
            s.navigate(note, user, direction)?;
            ack(s.note(note)?.version)
        }
    })
}

async fn run_stream(s: Arc<NoteService>, note: String, user: String, socket: WebSocket) {
    let (mut sink, mut source) = socket.split();
    let (snapshot, mut rx) = match s.subscribe(&note, &user) {
        Ok(v) => v,
        Err(e) => {
            let _ = sink.send(encode(&ServerFrame::new(0, e.to_message(None)))).await;
            return;
        }
    };
    // direct replies share the socket with broadcasts
    let (reply_tx, mut reply_rx) = tokio::sync::mpsc::unbounded_channel::<ServerFrame>();
    if sink.send(encode(&snapshot)).await.is_err() {
        return;
    }
    let writer_user = user.clone();
    let writer = tokio::spawn(async move {
        loop {
            tokio::select! {
                out = rx.recv() => match out {
                    Ok(out) if out.visible_to(&writer_user) => {
                        if sink.send(encode(&out.frame)).await.is_err() {
                            break;
                        }
                    }
                    Ok(_) => {}
                    Err(RecvError::Lagged(n)) => log::warn!("stream for {writer_user} dropped {n} frames"),
                    Err(RecvError::Closed) => break,
                },
                reply = reply_rx.recv() => match reply {
                    Some(frame) => {
                        if sink.send(encode(&frame)).await.is_err() {
                            break;
                        }
                    }
                    None => break,
                },
            }
        }
    });

    while let Some(Ok(msg)) = source.next().await {
        let text = match msg {
            Message::Text(t) => t.to_string(),
            Message::Close(_) => break,
            _ => continue,
        };
        let reply = match serde_json::from_str::<ClientFrame>(&text) {
            Ok(frame) if frame.v != PROTOCOL_VERSION => Some(ServerMessage::Error {
                id: frame.id,
                code: "unsupported-version".into(),
                message: format!("protocol version {} is not supported", frame.v),
                candidates: Vec::new(),
            }),
            Ok(frame) => {
                let id = frame.id;
                dispatch(&s, &note, &user, frame).unwrap_or_else(|e| Some(e.to_message(id)))
            }
            Err(e) => Some(ServerMessage::Error {
                id: None,
                code: "bad-request".into(),
                message: e.to_string(),
                candidates: Vec::new(),
            }),
        };
        // replies are unsequenced; seq orders broadcasts only
        if let Some(message) = reply {
            if reply_tx.send(ServerFrame::new(0, message)).is_err() {
                break;
            }
        }
    }
    drop(reply_tx);
    writer.abort();
}
