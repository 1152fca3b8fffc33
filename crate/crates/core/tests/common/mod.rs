//! Shared fixtures, oracles and acceptance checks for the integration tests.
//!
//! Every `check_*` function returns `Ok(detail)` when its criterion holds
//! and `Err(reason)` otherwise, so the focused test files and the acceptance
//! report run exactly the same code.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::{Path, PathBuf};
use std::sync::{Arc, OnceLock};
use std::time::{Duration, Instant};

use chrono::{DateTime, Utc};
use futures::{SinkExt, StreamExt};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use serde_json::{json, Value};

use knowted::autocomplete::{format_lab_insertion, should_trigger, CueList, LabSelection};
use knowted::cards::{CardBlock, CardError, CardOverrides};
use knowted::negation::NegationRules;
use knowted::ontology::LexiconData;
use knowted::recognizer::{Automaton, StopList, COMMON_ENGLISH_WORDS};
use knowted::record::generate::{generate, GeneratorConfig};
use knowted::record::{ingest, parse_timestamp, FixtureValue, LabFixture, PatientFixture, PatientRecord};
use knowted::service::http::router;
use knowted::service::note::{ChipOrigin, Completion, Edit, Note, NoteError, Section};
use knowted::service::{NoteService, ServiceConfig};
use knowted::{Concept, ConceptId, ConceptType, Engine, Lexicon};

pub type Check = Result<String, String>;

pub fn manifest_dir() -> &'static Path {
    Path::new(env!("CARGO_MANIFEST_DIR"))
}

pub fn lexicon_dir() -> PathBuf {
    manifest_dir().join("data/lexicon")
}

pub fn fixture_path(name: &str) -> PathBuf {
    manifest_dir().join("tests/fixtures").join(name)
}

pub fn read_fixture(name: &str) -> String {
    std::fs::read_to_string(fixture_path(name)).unwrap_or_else(|e| panic!("reading fixture {name}: {e}"))
}

/// The engine over the shipped lexicon, loaded once per test binary.
pub fn shared_engine() -> Arc<Engine> {
    static E: OnceLock<Arc<Engine>> = OnceLock::new();
    E.get_or_init(|| Arc::new(Engine::load(&lexicon_dir()).expect("shipped lexicon loads")))
        .clone()
}

pub fn ts(s: &str) -> DateTime<Utc> {
    parse_timestamp("test", s).expect("valid timestamp")
}

pub fn runtime() -> tokio::runtime::Runtime {
    tokio::runtime::Builder::new_multi_thread()
        .worker_threads(4)
        .enable_all()
        .build()
        .expect("tokio runtime")
}

/// Serve `service` on an ephemeral loopback port.
pub async fn spawn_server(service: Arc<NoteService>) -> std::net::SocketAddr {
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.expect("bind loopback");
    let addr = listener.local_addr().expect("local addr");
    tokio::spawn(async move {
        axum::serve(listener, router(service)).await.expect("serve");
    });
    addr
}

// ---- synthetic lexicons and notes ----

const SYLLABLES: [&str; 24] = [
    "ka", "lo", "mi", "re", "tus", "an", "bel", "cor", "dex", "fa", "gi", "hu", "ix", "jo", "ne", "or", "pra",
    "qui", "sto", "ul", "ven", "wy", "zor", "e",
];

/// Lexicon forms that collide with common English words and must never be
/// reported.
const STOP_COLLISIONS: [&str; 5] = ["the", "and", "no", "with", "for"];

const FILLER: [&str; 22] = [
    "the", "patient", "and", "was", "seen", "with", "for", "no", "today", "x-ray", "café", "naïve", "İstanbul",
    "status", "dose", "12", "3.5", "mg", "q6h", "ñu", "ok", "re",
];

fn word(rng: &mut ChaCha8Rng) -> String {
    let n = rng.gen_range(1..=3);
    (0..n).map(|_| *SYLLABLES.choose(rng).expect("non-empty")).collect()
}

fn phrase(rng: &mut ChaCha8Rng) -> String {
    let n = rng.gen_range(1..=3);
    (0..n).map(|_| word(rng)).collect::<Vec<_>>().join(" ")
}

fn title_case(s: &str) -> String {
    s.split(' ')
        .map(|w| {
            let mut c = w.chars();
            match c.next() {
                Some(f) => f.to_uppercase().chain(c).collect(),
                None => String::new(),
            }
        })
        .collect::<Vec<_>>()
        .join(" ")
}

/// A seeded lexicon with at least `target_forms` distinct normalized forms.
/// Forms overlap heavily: many extend an earlier form by one word, some are
/// shared between concepts, some are hyphenated, a few collide with the
/// English stoplist.
pub fn synthetic_lexicon(seed: u64, target_forms: usize) -> Lexicon {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen: BTreeSet<String> = BTreeSet::new();
    let mut pool: Vec<String> = Vec::new();
    let mut concepts = Vec::new();
    while seen.len() < target_forms {
        let mut forms: Vec<String> = Vec::new();
        for _ in 0..rng.gen_range(1..=4) {
            let roll = rng.gen_range(0..100);
            let form = if roll < 15 && !pool.is_empty() {
                format!("{} {}", pool.choose(&mut rng).expect("non-empty"), word(&mut rng))
            } else if roll < 20 && !pool.is_empty() {
                pool.choose(&mut rng).expect("non-empty").clone()
            } else if roll < 23 {
                format!("{}{}", word(&mut rng), rng.gen_range(1..10))
            } else if roll < 24 {
                STOP_COLLISIONS.choose(&mut rng).expect("non-empty").to_string()
            } else if roll < 28 {
                format!("{}-{}", word(&mut rng), word(&mut rng))
            } else {
                phrase(&mut rng)
            };
            if !forms.contains(&form) {
                forms.push(form);
            }
        }
        let i = concepts.len();
        let canonical = title_case(&forms[0]);
        let mut surface_forms = vec![canonical.clone()];
        surface_forms.extend(forms.iter().skip(1).cloned());
        for f in &forms {
            seen.insert(f.clone());
            pool.push(f.clone());
        }
        concepts.push(Concept {
            id: ConceptId::new(format!("syn-{i}")),
            canonical_name: canonical,
            concept_type: ConceptType::ALL[i % ConceptType::ALL.len()],
            surface_forms,
            detail: None,
            reference_range: None,
        });
    }
    Lexicon::from_data(LexiconData {
        concepts,
        ..Default::default()
    })
    .expect("synthetic lexicon is valid")
}

fn vary_case(rng: &mut ChaCha8Rng, s: &str) -> String {
    match rng.gen_range(0..4) {
        0 => s.to_uppercase(),
        1 => title_case(s),
        _ => s.to_string(),
    }
}

fn vary_spacing(rng: &mut ChaCha8Rng, s: &str) -> String {
    const GAPS: [&str; 5] = [" ", "  ", "\n", " \t ", "\u{a0}"];
    s.split(' ')
        .collect::<Vec<_>>()
        .join(if rng.gen_bool(0.2) { GAPS.choose(rng).expect("non-empty") } else { " " })
}

/// A note of roughly `tokens` pieces mixing lexicon forms (in varied case
/// and spacing, sometimes glued to neighbours), filler words, non-ASCII
/// words and punctuation.
pub fn synthetic_note(rng: &mut ChaCha8Rng, forms: &[String], tokens: usize) -> String {
    let mut out = String::new();
    for _ in 0..tokens {
        let roll = rng.gen_range(0..100);
        let piece = if roll < 45 {
            let f = forms.choose(rng).expect("non-empty");
            let cased = vary_case(rng, f);
            vary_spacing(rng, &cased)
        } else if roll < 55 {
            let f = forms.choose(rng).expect("non-empty");
            match rng.gen_range(0..3) {
                0 => format!("{f}s"),
                1 => format!("3{f}"),
                _ => format!("{f}-{}", word(rng)),
            }
        } else if roll < 75 {
            FILLER.choose(rng).expect("non-empty").to_string()
        } else if roll < 85 {
            [",", ".", ";", "(", ")", "/", "-", ":"].choose(rng).expect("non-empty").to_string()
        } else {
            word(rng)
        };
        let sep = match rng.gen_range(0..20) {
            0 => "",
            1 => "\n",
            2 => "  ",
            _ => " ",
        };
        out.push_str(&piece);
        out.push_str(sep);
    }
    out
}

// ---- recognizer oracle ----

fn oracle_normalize(s: &str) -> String {
    s.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
        .trim_matches(|c: char| !c.is_alphanumeric())
        .to_string()
}

/// Brute-force leftmost-longest matcher: from every token start, grow a
/// lowercased, whitespace-collapsed candidate string one character at a
/// time and keep the longest one that is a form and ends on a boundary.
pub struct RecognizerOracle {
    forms: HashMap<String, Vec<ConceptId>>,
    max_chars: usize,
}

/// One recognized span: start, end and sorted candidate ids.
pub type OracleSpan = (usize, usize, Vec<ConceptId>);

impl RecognizerOracle {
    pub fn new(lexicon: &Lexicon, stop: &[&str]) -> Self {
        let stop: BTreeSet<String> = stop.iter().map(|s| oracle_normalize(s)).collect();
        let mut forms: HashMap<String, Vec<ConceptId>> = HashMap::new();
        for c in lexicon.concepts() {
            for f in &c.surface_forms {
                let n = oracle_normalize(f);
                if n.is_empty() || stop.contains(&n) {
                    continue;
                }
                let ids = forms.entry(n).or_default();
                if !ids.contains(&c.id) {
                    ids.push(c.id.clone());
                }
            }
        }
        for ids in forms.values_mut() {
            ids.sort();
        }
        let max_chars = forms.keys().map(|f| f.chars().count()).max().unwrap_or(0);
        Self { forms, max_chars }
    }

    pub fn forms(&self) -> Vec<String> {
        let mut v: Vec<String> = self.forms.keys().cloned().collect();
        v.sort();
        v
    }

    pub fn scan(&self, text: &str, masked: &[(usize, usize)]) -> Vec<OracleSpan> {
        let chars: Vec<char> = text.chars().collect();
        let n = chars.len();
        let mut out = Vec::new();
        let mut i = 0;
        while i < n {
            let mut best: Option<(usize, &Vec<ConceptId>)> = None;
            if i == 0 || !chars[i - 1].is_alphanumeric() {
                let mut s = String::new();
                let mut len = 0usize;
                for j in i..n {
                    let c = chars[j];
                    if c.is_whitespace() {
                        if s.is_empty() {
                            break;
                        }
                        if !s.ends_with(' ') {
                            s.push(' ');
                            len += 1;
                        }
                    } else {
                        for l in c.to_lowercase() {
                            s.push(l);
                            len += 1;
                        }
                        let right_ok = j + 1 == n || !chars[j + 1].is_alphanumeric();
                        let free = !masked.iter().any(|&(a, b)| i < b && a < j + 1);
                        if right_ok && free {
                            if let Some(ids) = self.forms.get(&s) {
                                best = Some((j + 1, ids));
                            }
                        }
                    }
                    if len > self.max_chars {
                        break;
                    }
                }
            }
            match best {
                Some((end, ids)) => {
                    out.push((i, end, ids.clone()));
                    i = end;
                }
                None => i += 1,
            }
        }
        out
    }
}

fn random_masks(rng: &mut ChaCha8Rng, len: usize) -> Vec<(usize, usize)> {
    let mut masks = Vec::new();
    for _ in 0..rng.gen_range(1..=4) {
        let a = rng.gen_range(0..len.max(1));
        let b = (a + rng.gen_range(1..30)).min(len);
        if a < b {
            masks.push((a, b));
        }
    }
    masks
}

pub const RECOGNIZER_NOTES: usize = 100;
pub const RECOGNIZER_FORMS: usize = 5_000;

pub fn check_recognizer_oracle() -> Check {
    let lexicon = synthetic_lexicon(11, RECOGNIZER_FORMS);
    let form_count = lexicon.surface_index().len();
    let t0 = Instant::now();
    let automaton = Automaton::build(&lexicon, &StopList::seeded(&lexicon)).map_err(|e| e.to_string())?;
    let build = t0.elapsed();

    let oracle = RecognizerOracle::new(&lexicon, &COMMON_ENGLISH_WORDS);
    let mut note_forms = oracle.forms();
    note_forms.extend(STOP_COLLISIONS.iter().map(|s| s.to_string()));
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut scan_time = Duration::ZERO;
    let mut mismatches = 0;
    let mut spans = 0;
    let mut first: Option<String> = None;
    for k in 0..RECOGNIZER_NOTES {
        let text = synthetic_note(&mut rng, &note_forms, 300);
        let chars: Vec<char> = text.chars().collect();
        let masks = if k % 4 == 3 { random_masks(&mut rng, chars.len()) } else { Vec::new() };
        let t = Instant::now();
        let found = automaton.scan(&text, &masks);
        scan_time += t.elapsed();

        let consistent = found.iter().all(|s| {
            s.surface == chars[s.start..s.end].iter().collect::<String>()
                && s.resolved.is_some() == (s.candidates.len() == 1)
        });
        let got: Vec<OracleSpan> = found
            .into_iter()
            .map(|s| {
                let mut c = s.candidates;
                c.sort();
                (s.start, s.end, c)
            })
            .collect();
        let want = oracle.scan(&text, &masks);
        spans += want.len();
        if got != want || !consistent {
            mismatches += 1;
            if first.is_none() {
                let diff = got
                    .iter()
                    .zip(&want)
                    .position(|(a, b)| a != b)
                    .unwrap_or(got.len().min(want.len()));
                first = Some(format!(
                    "note {k}: first difference at span {diff}: got {:?}, want {:?}",
                    got.get(diff),
                    want.get(diff)
                ));
            }
        }
    }
    let total = build + scan_time;
    let detail = format!(
        "{RECOGNIZER_NOTES} notes, {form_count} forms, {spans} spans, {mismatches} mismatches, build+scan {:.3}s",
        total.as_secs_f64()
    );
    if form_count < RECOGNIZER_FORMS {
        return Err(format!("lexicon too small: {detail}"));
    }
    if spans < RECOGNIZER_NOTES * 20 {
        return Err(format!("too few spans for a meaningful comparison: {detail}"));
    }
    if let Some(f) = first {
        return Err(format!("{detail}; {f}"));
    }
    if total >= Duration::from_secs(10) {
        return Err(format!("too slow: {detail}"));
    }
    Ok(detail)
}

// ---- autocomplete latency ----

pub const LATENCY_FORMS: usize = 100_000;
pub const LATENCY_QUERIES: usize = 1_000;
const LATENCY_WARMUP: usize = 50;

fn latency_queries(rng: &mut ChaCha8Rng, forms: &[String], n: usize) -> Vec<String> {
    const CONTEXTS: [&str; 7] = ["", "", "", "presents with ", "/l ", "/m ", "history of "];
    (0..n)
        .map(|i| {
            if i % 50 == 49 {
                return "/".to_string();
            }
            let f = forms.choose(rng).expect("non-empty");
            let first: String = f.split(' ').next().unwrap_or(f).to_string();
            let cut = rng.gen_range(1..=first.chars().count().min(6));
            let prefix: String = first.chars().take(cut).collect();
            format!("{}{}", CONTEXTS.choose(rng).expect("non-empty"), prefix)
        })
        .collect()
}

pub fn percentile(sorted: &[Duration], p: f64) -> Duration {
    let rank = ((p * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

pub fn check_autocomplete_latency() -> Check {
    let lexicon = synthetic_lexicon(21, LATENCY_FORMS);
    let form_count = lexicon.surface_index().len();
    let forms: Vec<String> = lexicon.surface_index().forms().map(|(f, _)| f.to_string()).collect();
    let stop = StopList::seeded(&lexicon);
    let cues = CueList::parse(&std::fs::read_to_string(lexicon_dir().join("cues.tsv")).map_err(|e| e.to_string())?)
        .map_err(|e| e.to_string())?;
    let engine = Engine::new(lexicon, stop, NegationRules::defaults(), cues, CardOverrides::default())
        .map_err(|e| e.to_string())?;
    let service = NoteService::new(
        Arc::new(engine),
        [PatientRecord::empty("latency-1")],
        ServiceConfig::default(),
    )
    .map_err(|e| e.to_string())?;

    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let queries = latency_queries(&mut rng, &forms, LATENCY_WARMUP + LATENCY_QUERIES);
    let rt = runtime();
    let (latencies, empty) = rt.block_on(async move {
        let addr = spawn_server(service).await;
        let client = reqwest::Client::new();
        let url = format!("http://{addr}/autocomplete");
        let mut latencies = Vec::with_capacity(LATENCY_QUERIES);
        let mut empty = 0usize;
        for (i, q) in queries.iter().enumerate() {
            let t = Instant::now();
            let body: Value = client
                .get(&url)
                .query(&[("prefix", q.as_str()), ("patient", "latency-1")])
                .send()
                .await
                .map_err(|e| e.to_string())?
                .error_for_status()
                .map_err(|e| e.to_string())?
                .json()
                .await
                .map_err(|e| e.to_string())?;
            let elapsed = t.elapsed();
            if i >= LATENCY_WARMUP {
                latencies.push(elapsed);
                if body["suggestions"].as_array().is_none_or(|a| a.is_empty()) {
                    empty += 1;
                }
            }
        }
        Ok::<_, String>((latencies, empty))
    })?;
    let mut sorted = latencies.clone();
    sorted.sort();
    let p50 = percentile(&sorted, 0.50);
    let p95 = percentile(&sorted, 0.95);
    let detail = format!(
        "{} queries over HTTP loopback, {form_count} forms, p50 {:.2} ms, p95 {:.2} ms, max {:.2} ms, {empty} empty",
        sorted.len(),
        p50.as_secs_f64() * 1e3,
        p95.as_secs_f64() * 1e3,
        sorted.last().copied().unwrap_or_default().as_secs_f64() * 1e3,
    );
    if form_count < LATENCY_FORMS {
        return Err(format!("lexicon too small: {detail}"));
    }
    if empty * 2 > sorted.len() {
        return Err(format!("most queries returned nothing: {detail}"));
    }
    if p95 > Duration::from_millis(20) {
        return Err(format!("p95 above 20 ms: {detail}"));
    }
    Ok(detail)
}

// ---- trigger fixtures ----

pub fn fixture_lines(name: &str) -> Vec<String> {
    read_fixture(name)
        .split('\n')
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect()
}

pub fn check_trigger_fixtures() -> Check {
    let engine = shared_engine();
    let cue = fixture_lines("triggers_cue.txt");
    let nocue = fixture_lines("triggers_nocue.txt");
    if cue.len() != 200 || nocue.len() != 200 {
        return Err(format!("expected 200 + 200 lines, found {} + {}", cue.len(), nocue.len()));
    }
    let missed: Vec<&String> = cue.iter().filter(|l| !should_trigger(engine.scorer(), l).trigger).collect();
    let fired: Vec<&String> = nocue.iter().filter(|l| should_trigger(engine.scorer(), l).trigger).collect();
    let detail = format!(
        "cue {}/200 triggered, no-cue {}/200 triggered",
        200 - missed.len(),
        fired.len()
    );
    if missed.is_empty() && fired.is_empty() {
        Ok(detail)
    } else {
        Err(format!("{detail}; missed {:?}; fired {:?}", &missed[..missed.len().min(3)], &fired[..fired.len().min(3)]))
    }
}

// ---- negation fixture ----

pub struct NegationCase {
    pub sentence: String,
    pub negated: Vec<String>,
    pub affirmed: Vec<String>,
}

fn split_list(field: &str) -> Vec<String> {
    field.split('|').filter(|s| !s.is_empty()).map(|s| s.to_lowercase()).collect()
}

pub fn negation_cases() -> Vec<NegationCase> {
    read_fixture("negation.tsv")
        .lines()
        .filter(|l| !l.trim().is_empty() && !l.starts_with('#'))
        .map(|l| {
            let f: Vec<&str> = l.split('\t').collect();
            NegationCase {
                sentence: f[0].to_string(),
                negated: split_list(f.get(1).copied().unwrap_or("")),
                affirmed: split_list(f.get(2).copied().unwrap_or("")),
            }
        })
        .collect()
}

pub fn check_negation_fixture() -> Check {
    let engine = shared_engine();
    let cases = negation_cases();
    if cases.len() != 50 {
        return Err(format!("expected 50 sentences, found {}", cases.len()));
    }
    let mut disagreements = Vec::new();
    let mut labels = 0;
    for case in &cases {
        let spans = engine.scan(&case.sentence, &[]);
        let annotated = engine.annotate(&case.sentence, &spans);
        let got: BTreeMap<String, bool> = annotated
            .iter()
            .map(|a| (a.span.surface.to_lowercase(), a.negated))
            .collect();
        let mut want: BTreeMap<String, bool> = case.negated.iter().map(|s| (s.clone(), true)).collect();
        want.extend(case.affirmed.iter().map(|s| (s.clone(), false)));
        labels += want.len();
        if got != want {
            disagreements.push(format!("{:?}: got {got:?}, want {want:?}", case.sentence));
        }
    }
    let detail = format!(
        "{}/{} sentences agree ({labels} labeled terms)",
        cases.len() - disagreements.len(),
        cases.len()
    );
    if disagreements.is_empty() {
        Ok(detail)
    } else {
        Err(format!("{detail}; {}", disagreements.join("; ")))
    }
}

// ---- lab insertion golden file ----

#[derive(Debug, Deserialize)]
pub struct GoldenLab {
    pub id: String,
    pub value: String,
    pub timestamp: String,
}

#[derive(Debug, Deserialize)]
pub struct GoldenCase {
    pub concept: String,
    pub as_of: String,
    pub labs: Vec<GoldenLab>,
    pub selection: LabSelection,
    pub expected: String,
}

pub fn golden_cases() -> Vec<GoldenCase> {
    serde_json::from_str(&read_fixture("lab_golden.json")).expect("lab_golden.json parses")
}

pub fn golden_insertion(engine: &Engine, case: &GoldenCase) -> Result<String, String> {
    let fixture = PatientFixture {
        patient_id: "golden".into(),
        labs: case
            .labs
            .iter()
            .map(|l| LabFixture {
                id: l.id.clone(),
                concept: case.concept.clone(),
                value: FixtureValue::Text(l.value.clone()),
                unit: String::new(),
                timestamp: l.timestamp.clone(),
                reference_range: None,
            })
            .collect(),
        notes: Vec::new(),
        entries: Vec::new(),
    };
    let record = ingest(&fixture, engine.lexicon(), engine.automaton()).map_err(|e| e.to_string())?;
    let tree = engine
        .lab_tree(&ConceptId::new(case.concept.clone()), &record, ts(&case.as_of))
        .map_err(|e| e.to_string())?;
    format_lab_insertion(&tree, &case.selection).map_err(|e| e.to_string())
}

pub fn check_lab_golden() -> Check {
    let engine = shared_engine();
    let cases = golden_cases();
    if cases.len() != 20 {
        return Err(format!("expected 20 golden cases, found {}", cases.len()));
    }
    if cases[0].expected != "Glucose (90 - 110) 100" {
        return Err("the first golden case must be the glucose aggregate example".into());
    }
    let mut failures = Vec::new();
    for (i, case) in cases.iter().enumerate() {
        match golden_insertion(&engine, case) {
            Ok(s) if s == case.expected => {}
            Ok(s) => failures.push(format!("case {i}: got {s:?}, want {:?}", case.expected)),
            Err(e) => failures.push(format!("case {i}: {e}")),
        }
    }
    let detail = format!("{}/20 insertion strings bit-exact", 20 - failures.len());
    if failures.is_empty() {
        Ok(detail)
    } else {
        Err(format!("{detail}; {}", failures.join("; ")))
    }
}

// ---- ROS autofill ----

pub const ROS_SETS: usize = 25;
const ROS_LABELS: [&str; 10] = [
    "Constitutional",
    "Eyes",
    "ENT",
    "Cardiovascular",
    "Respiratory",
    "Gastrointestinal",
    "Genitourinary",
    "Musculoskeletal",
    "Skin",
    "Neurological",
];
const ROS_MODIFIERS: [&str; 16] = [
    "left", "right", "bilateral", "upper", "lower", "mild", "moderate", "severe", "sharp", "dull", "burning",
    "intermittent", "chronic", "acute", "nocturnal", "sudden",
];

/// A symptom mention planted in the HPI.
#[derive(Debug, Clone)]
pub struct PlantedSymptom {
    pub id: String,
    pub name: String,
    pub negated: bool,
    pub modifiers: Vec<String>,
}

/// Expected ROS text and the (start, end, concept, negated) of each chip.
pub struct RosExpectation {
    pub text: String,
    pub chips: Vec<(usize, usize, String, bool)>,
}

fn tsv_rows(src: &str) -> impl Iterator<Item = Vec<&str>> {
    src.lines()
        .filter(|l| !l.trim().is_empty() && !l.starts_with('#'))
        .map(|l| l.split('\t').collect())
}

/// Symptom id to canonical name, and id to ROS system label, read straight
/// from the lexicon files.
pub fn symptom_tables() -> (BTreeMap<String, String>, BTreeMap<String, String>) {
    let lex = std::fs::read_to_string(lexicon_dir().join("lexicon.tsv")).expect("lexicon.tsv");
    let names = tsv_rows(&lex)
        .filter(|f| f[1] == "symptom")
        .map(|f| (f[0].to_string(), f[2].to_string()))
        .collect();
    let systems = std::fs::read_to_string(lexicon_dir().join("body_systems.tsv")).expect("body_systems.tsv");
    let systems = tsv_rows(&systems).map(|f| (f[0].to_string(), f[1].to_string())).collect();
    (names, systems)
}

/// Mapping oracle: the first mention of each mapped symptom, grouped by
/// system in fixed order, rendered as `[no ]modifiers name`.
pub fn ros_oracle(planted: &[PlantedSymptom], systems: &BTreeMap<String, String>) -> RosExpectation {
    let mut seen = BTreeSet::new();
    let mut by_label: BTreeMap<&str, Vec<&PlantedSymptom>> = BTreeMap::new();
    for p in planted {
        if !seen.insert(&p.id) {
            continue;
        }
        if let Some(label) = systems.get(&p.id) {
            by_label.entry(label.as_str()).or_default().push(p);
        }
    }
    let mut text = String::new();
    let mut chips = Vec::new();
    for (i, label) in ROS_LABELS.iter().enumerate() {
        if i > 0 {
            text.push('\n');
        }
        text.push_str(label);
        text.push_str(": ");
        match by_label.get(label) {
            None => text.push_str("negative"),
            Some(items) => {
                for (j, p) in items.iter().enumerate() {
                    if j > 0 {
                        text.push_str("; ");
                    }
                    if p.negated {
                        text.push_str("no ");
                    }
                    for m in &p.modifiers {
                        text.push_str(m);
                        text.push(' ');
                    }
                    let start = text.chars().count();
                    text.push_str(&p.name);
                    chips.push((start, text.chars().count(), p.id.clone(), p.negated));
                }
            }
        }
    }
    RosExpectation { text, chips }
}

pub fn random_symptom_set(rng: &mut ChaCha8Rng, names: &BTreeMap<String, String>) -> Vec<PlantedSymptom> {
    let ids: Vec<&String> = names.keys().collect();
    let k = rng.gen_range(1..=9);
    let mut chosen: Vec<&String> = ids.choose_multiple(rng, k).copied().collect();
    if rng.gen_bool(0.3) {
        // a later, contradicting mention of an earlier symptom
        chosen.push(chosen[0]);
    }
    chosen
        .into_iter()
        .map(|id| {
            let m = if rng.gen_bool(0.5) { rng.gen_range(1..=2) } else { 0 };
            PlantedSymptom {
                id: id.clone(),
                name: names[id].clone(),
                negated: rng.gen_bool(0.4),
                modifiers: ROS_MODIFIERS.choose_multiple(rng, m).map(|s| s.to_string()).collect(),
            }
        })
        .collect()
}

pub fn hpi_text(rng: &mut ChaCha8Rng, planted: &[PlantedSymptom]) -> String {
    const AFFIRMED: [&str; 3] = ["Reports", "Complains of", "Has"];
    const NEGATED: [&str; 3] = ["Denies", "No", "Negative for"];
    let mut sentences = vec!["Seen with history of htn.".to_string()];
    for p in planted {
        let lead = if p.negated { NEGATED.choose(rng) } else { AFFIRMED.choose(rng) }.expect("non-empty");
        let mut phrase = p.modifiers.clone();
        phrase.push(p.name.clone());
        sentences.push(format!("{lead} {}.", phrase.join(" ")));
    }
    sentences.join(" ")
}

fn ros_service() -> Result<Arc<NoteService>, String> {
    NoteService::new(shared_engine(), [PatientRecord::empty("ros-1")], ServiceConfig::default())
        .map_err(|e| e.to_string())
}

pub fn check_ros_autofill() -> Check {
    let engine = shared_engine();
    let missing: Vec<&str> = ROS_MODIFIERS
        .iter()
        .copied()
        .filter(|m| engine.lexicon().modifiers().class_of(m).is_none())
        .collect();
    if !missing.is_empty() {
        return Err(format!("modifiers missing from the vocabulary: {missing:?}"));
    }
    let (names, systems) = symptom_tables();
    let service = ros_service()?;
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut failures = Vec::new();
    let mut items = 0;
    for k in 0..ROS_SETS {
        let planted = random_symptom_set(&mut rng, &names);
        let hpi = hpi_text(&mut rng, &planted);
        let want = ros_oracle(&planted, &systems);
        items += want.chips.len();
        let note = service.create_note("ros-1", None).map_err(|e| e.to_string())?.id;
        service
            .edit(&note, "doc", Section::Hpi, &Edit::Insert { offset: 0, text: hpi.clone() }, None)
            .map_err(|e| e.to_string())?;
        service.settle(&note).map_err(|e| e.to_string())?;
        service.autofill(&note, Section::Ros).map_err(|e| e.to_string())?;
        let after = service.note(&note).map_err(|e| e.to_string())?;
        let ros = after.section(Section::Ros);
        if ros.text != want.text {
            failures.push(format!("set {k} ({hpi:?}): got {:?}, want {:?}", ros.text, want.text));
            continue;
        }
        let got: Vec<(usize, usize, String, bool)> = ros
            .chips
            .iter()
            .map(|c| {
                (
                    c.start(),
                    c.end(),
                    c.resolved().map(|r| r.to_string()).unwrap_or_default(),
                    c.annotation.negated,
                )
            })
            .collect();
        if got != want.chips {
            failures.push(format!("set {k}: chips {got:?}, want {:?}", want.chips));
            continue;
        }
        for section in [Section::Ros, Section::Hpi] {
            let before = service.note(&note).map_err(|e| e.to_string())?;
            let code = service.autofill(&note, section).err().map(|e| e.code());
            let now = service.note(&note).map_err(|e| e.to_string())?;
            if code != Some("section-not-empty") || now != before {
                failures.push(format!("set {k}: autofill on non-empty {section} changed the note or returned {code:?}"));
            }
        }
    }
    let detail = format!("{}/{ROS_SETS} symptom sets match the mapping oracle ({items} ROS items), autofill idempotent", ROS_SETS - failures.len());
    if failures.is_empty() {
        Ok(detail)
    } else {
        Err(format!("{detail}; {}", failures.join("; ")))
    }
}

// ---- card assembly ----

pub const CARD_PATIENTS: usize = 10;
pub const CARD_AS_OF: &str = "2026-09-30T00:00:00Z";

fn value_of(v: &FixtureValue) -> Option<f64> {
    match v {
        FixtureValue::Text(s) => s.trim().parse().ok(),
        FixtureValue::Number(n) => n.as_f64(),
    }
}

/// Check one card against the fixture it was built from.
fn audit_card(
    fixture: &PatientFixture,
    card: &knowted::cards::Card,
    as_of: DateTime<Utc>,
    problems: &mut Vec<String>,
) -> usize {
    let labs: HashMap<&str, &LabFixture> = fixture.labs.iter().map(|l| (l.id.as_str(), l)).collect();
    let notes: HashMap<&str, &knowted::record::NoteFixture> = fixture.notes.iter().map(|n| (n.id.as_str(), n)).collect();
    let entries: BTreeSet<&str> = fixture.entries.iter().map(|e| e.id.as_str()).collect();
    let mut data = 0;
    let lab_cell_ok = |cell: &knowted::cards::LabCell, concept: Option<&ConceptId>| {
        labs.get(cell.result_id.as_str()).is_some_and(|l| {
            value_of(&l.value) == Some(cell.value)
                && ts(&l.timestamp) == cell.timestamp
                && concept.is_none_or(|c| c.as_str() == l.concept)
        })
    };
    for block in &card.blocks {
        for id in block.record_ids() {
            data += 1;
            if !labs.contains_key(id.as_str()) && !notes.contains_key(id.as_str()) && !entries.contains(id.as_str()) {
                problems.push(format!("{} {}: {id} is not a fixture record id", card.concept, block.kind()));
            }
        }
        match block {
            CardBlock::LabTable(t) => {
                for row in &t.rows {
                    for (col, cell) in t.columns.iter().zip(&row.cells) {
                        if let Some(cell) = cell {
                            if !lab_cell_ok(cell, Some(&col.concept)) {
                                problems.push(format!("{}: table cell {} does not match the fixture", card.concept, cell.result_id));
                            }
                        }
                    }
                }
            }
            CardBlock::LabSeries(s) => {
                for p in &s.points {
                    if !lab_cell_ok(p, Some(&s.concept)) {
                        problems.push(format!("{}: series point {} does not match the fixture", card.concept, p.result_id));
                    }
                }
            }
            CardBlock::VitalsList { items } => {
                for i in items {
                    if !lab_cell_ok(&i.latest, Some(&i.concept)) {
                        problems.push(format!("{}: vital {} does not match the fixture", card.concept, i.latest.result_id));
                    }
                }
            }
            CardBlock::NoteSnippets(list) | CardBlock::ReportSnippets(list) => {
                for pair in list.snippets.windows(2) {
                    if pair[0].timestamp >= pair[1].timestamp {
                        problems.push(format!("{} {}: snippets out of chronological order", card.concept, block.kind()));
                    }
                }
                for s in &list.snippets {
                    let Some(n) = notes.get(s.note_id.as_str()) else { continue };
                    let chars: Vec<char> = n.text.chars().collect();
                    let text_ok = s.end <= chars.len() && s.text == chars[s.start..s.end].iter().collect::<String>();
                    let hl_ok = s.highlight.is_none_or(|(a, b)| s.start <= a && a < b && b <= s.end);
                    if ts(&n.timestamp) != s.timestamp || s.timestamp > as_of || !text_ok || !hl_ok {
                        problems.push(format!("{}: snippet from {} does not match the fixture note", card.concept, s.note_id));
                    }
                }
            }
            _ => {}
        }
    }
    data
}

pub fn check_card_assembly() -> Check {
    let engine = shared_engine();
    let as_of = ts(CARD_AS_OF);
    let fixtures = generate(engine.lexicon(), &GeneratorConfig::new(4242, CARD_PATIENTS, as_of));
    let potassium = ConceptId::new("lab-k-serum");
    let creatinine = ConceptId::new("lab-creatinine");
    let mut problems = Vec::new();
    let mut cards = 0;
    let mut data = 0;
    let mut with_creatinine = 0;
    for fixture in &fixtures {
        let record = ingest(fixture, engine.lexicon(), engine.automaton()).map_err(|e| e.to_string())?;
        for concept in engine.lexicon().concepts() {
            let card = match engine.card(&concept.id, &record, as_of) {
                Ok(card) => card,
                Err(CardError::UnsupportedType(ConceptType::Symptom)) => continue,
                Err(e) => return Err(format!("{} {}: {e}", fixture.patient_id, concept.id)),
            };
            cards += 1;
            data += audit_card(fixture, &card, as_of, &mut problems);
            if concept.id == potassium {
                let has_results = fixture
                    .labs
                    .iter()
                    .any(|l| l.concept == creatinine.as_str() && ts(&l.timestamp) <= as_of);
                let has_column = card.blocks.iter().any(|b| match b {
                    CardBlock::LabTable(t) => t.columns.iter().any(|c| c.concept == creatinine && c.contextual),
                    _ => false,
                });
                if has_results {
                    with_creatinine += 1;
                    if !has_column {
                        problems.push(format!("{}: potassium card lacks a creatinine column", fixture.patient_id));
                    }
                }
            }
        }
    }
    let detail = format!(
        "{} patients, {cards} cards, {data} traced data, creatinine column on {with_creatinine}/{with_creatinine} potassium cards with creatinine results",
        fixtures.len()
    );
    if fixtures.len() != CARD_PATIENTS || with_creatinine == 0 || data == 0 {
        return Err(format!("fixture set too thin: {detail}"));
    }
    if problems.is_empty() {
        Ok(detail)
    } else {
        problems.truncate(5);
        Err(format!("{detail}; {}", problems.join("; ")))
    }
}

// ---- two-session protocol replay ----

type Ws = tokio_tungstenite::WebSocketStream<tokio_tungstenite::MaybeTlsStream<tokio::net::TcpStream>>;

/// A scripted WebSocket session that keeps every broadcast it sees.
pub struct Session {
    pub user: String,
    ws: Ws,
    pub broadcasts: Vec<Value>,
    next_id: u64,
}

const REPLY_TIMEOUT: Duration = Duration::from_secs(10);

impl Session {
    pub async fn connect(addr: std::net::SocketAddr, note: &str, user: &str) -> Result<(Self, Value), String> {
        let url = format!("ws://{addr}/notes/{note}/stream?user={user}");
        let (ws, _) = tokio_tungstenite::connect_async(url).await.map_err(|e| e.to_string())?;
        let mut s = Self {
            user: user.to_string(),
            ws,
            broadcasts: Vec::new(),
            next_id: 1,
        };
        let snapshot = s.recv().await?;
        if snapshot["type"] != "snapshot" {
            return Err(format!("expected a snapshot first, got {snapshot}"));
        }
        Ok((s, snapshot))
    }

    pub async fn recv(&mut self) -> Result<Value, String> {
        loop {
            let msg = tokio::time::timeout(REPLY_TIMEOUT, self.ws.next())
                .await
                .map_err(|_| format!("{}: timed out waiting for a frame", self.user))?
                .ok_or("stream closed")?
                .map_err(|e| e.to_string())?;
            if let tokio_tungstenite::tungstenite::Message::Text(t) = msg {
                return serde_json::from_str(t.as_str()).map_err(|e| e.to_string());
            }
        }
    }

    pub async fn send_raw(&mut self, text: String) -> Result<(), String> {
        self.ws
            .send(tokio_tungstenite::tungstenite::Message::Text(text.into()))
            .await
            .map_err(|e| e.to_string())
    }

    /// Send a message and wait for its direct reply, collecting broadcasts.
    pub async fn request(&mut self, mut message: Value) -> Result<Value, String> {
        let id = self.next_id;
        self.next_id += 1;
        message["v"] = json!(1);
        message["id"] = json!(id);
        self.send_raw(message.to_string()).await?;
        loop {
            let frame = self.recv().await?;
            if frame["seq"] == 0 && frame["id"] == id {
                return Ok(frame);
            }
            self.broadcasts.push(frame);
        }
    }

    /// Wait for a broadcast matching `pred`, looking at what was already
    /// collected first.
    pub async fn wait_for(&mut self, pred: impl Fn(&Value) -> bool) -> Result<Value, String> {
        if let Some(f) = self.broadcasts.iter().find(|f| pred(f)) {
            return Ok(f.clone());
        }
        loop {
            let frame = self.recv().await?;
            self.broadcasts.push(frame.clone());
            if pred(&frame) {
                return Ok(frame);
            }
        }
    }

    pub async fn close(mut self) {
        let _ = self.ws.close(None).await;
    }
}

/// One scripted user action.
#[derive(Debug, Clone)]
pub enum Action {
    /// Append text to the HPI; `previews` names the concept the settled
    /// re-scan should auto-preview, if any.
    Type { text: &'static str, previews: Option<&'static str> },
    Accept { concept: &'static str },
    Surface { via: &'static str, concept: &'static str },
    SurfaceAcceptedChip,
    Hover { concept: &'static str },
    HoverAmbiguousChip,
    Pin { concept: &'static str },
    Unpin { concept: &'static str },
    Disambiguate { concept: &'static str },
    Back,
}

pub fn session_script() -> Vec<(&'static str, Action)> {
    use Action::*;
    vec![
        ("ana", Type { text: "Seen today for pota", previews: None }),
        ("ana", Accept { concept: "lab-k-serum" }),
        ("ben", Surface { via: "search", concept: "cond-chf" }),
        ("ana", Pin { concept: "cond-chf" }),
        ("ben", Pin { concept: "cond-chf" }),
        ("ben", Pin { concept: "lab-k-serum" }),
        ("ana", Unpin { concept: "cond-chf" }),
        ("ben", Unpin { concept: "cond-chf" }),
        ("ana", Hover { concept: "lab-creatinine" }),
        ("ben", Surface { via: "note-snippet", concept: "med-oxycodone" }),
        ("ana", SurfaceAcceptedChip),
        ("ana", Type { text: " with htn and pt ", previews: Some("cond-htn") }),
        ("ana", Disambiguate { concept: "cond-patient" }),
        ("ben", Surface { via: "search", concept: "cond-htn" }),
        ("ben", Pin { concept: "cond-htn" }),
        ("ana", Pin { concept: "med-oxycodone" }),
        ("ben", Back),
        ("ana", Unpin { concept: "lab-k-serum" }),
        ("ben", HoverAmbiguousChip),
        ("ana", Surface { via: "chip-click", concept: "lab-creatinine" }),
    ]
}

/// Expected per-(user, kind) counts and final pin order, derived from the
/// script alone.
pub fn session_oracle(script: &[(&str, Action)]) -> (BTreeMap<String, BTreeMap<String, usize>>, Vec<String>) {
    let mut counts: BTreeMap<String, BTreeMap<String, usize>> = BTreeMap::new();
    let mut pins: Vec<String> = Vec::new();
    for (user, action) in script {
        let kind = match action {
            Action::Type { previews, .. } => previews.filter(|c| !pins.iter().any(|p| p == c)).map(|_| "card-via-post-recognition"),
            Action::Accept { .. } => Some("autocomplete-insert"),
            Action::Surface { via, .. } => Some(match *via {
                "search" => "card-via-search",
                "chip-click" => "card-via-chip-click",
                "note-snippet" => "card-via-note-snippet",
                _ => "card-via-post-recognition",
            }),
            Action::SurfaceAcceptedChip => Some("card-via-chip-click"),
            Action::Hover { .. } | Action::HoverAmbiguousChip => Some("hover-preview"),
            Action::Pin { concept } => {
                if pins.iter().any(|p| p == concept) {
                    None
                } else {
                    pins.push(concept.to_string());
                    Some("pin")
                }
            }
            Action::Unpin { concept } => {
                let before = pins.len();
                pins.retain(|p| p != concept);
                (pins.len() < before).then_some("unpin")
            }
            Action::Disambiguate { .. } => Some("post-recognition-disambiguate"),
            Action::Back => None,
        };
        if let Some(kind) = kind {
            *counts.entry(user.to_string()).or_default().entry(kind.to_string()).or_default() += 1;
        }
    }
    (counts, pins)
}

fn pin_list(frame: &Value) -> Vec<String> {
    frame["pins"]
        .as_array()
        .map(|a| a.iter().filter_map(|p| p["concept"].as_str().map(str::to_string)).collect())
        .unwrap_or_default()
}

struct Replayer {
    text_len: usize,
    version: u64,
    accepted_chip: Option<u64>,
    ambiguous_chip: Option<u64>,
}

impl Replayer {
    async fn run(&mut self, s: &mut Session, action: &Action) -> Result<(), String> {
        let reply = match action {
            Action::Type { text, previews } => {
                let r = s
                    .request(json!({"type": "edit", "section": "hpi", "edit": {"op": "insert", "offset": self.text_len, "text": text}}))
                    .await?;
                self.text_len += text.chars().count();
                self.version = r["version"].as_u64().ok_or("edit ack without version")?;
                let rec = s
                    .wait_for(|f| f["type"] == "recognition" && f["doc"]["text"].as_str().is_some_and(|t| t.chars().count() == self.text_len))
                    .await?;
                for chip in rec["doc"]["chips"].as_array().into_iter().flatten() {
                    if chip["candidates"].as_array().is_some_and(|c| c.len() > 1) {
                        self.ambiguous_chip = chip["id"].as_u64();
                    }
                }
                if let Some(concept) = previews {
                    s.wait_for(|f| f["type"] == "preview" && f["preview"]["card"]["concept"] == *concept).await?;
                }
                r
            }
            Action::Accept { concept } => {
                let r = s
                    .request(json!({"type": "accept", "section": "hpi", "caret": self.text_len, "version": self.version,
                        "completion": {"kind": "concept", "concept": concept}}))
                    .await?;
                let accepted = &r["accepted"];
                self.accepted_chip = accepted["chip"].as_u64();
                self.text_len = accepted["caret"].as_u64().ok_or(format!("accept failed: {r}"))? as usize;
                r
            }
            Action::Surface { via, concept } => {
                s.request(json!({"type": "surface", "via": via, "concept": concept})).await?
            }
            Action::SurfaceAcceptedChip => {
                let chip = self.accepted_chip.ok_or("no accepted chip")?;
                s.request(json!({"type": "surface", "via": "chip-click", "section": "hpi", "chip": chip})).await?
            }
            Action::Hover { concept } => s.request(json!({"type": "hover", "concept": concept})).await?,
            Action::HoverAmbiguousChip => {
                let chip = self.ambiguous_chip.ok_or("no ambiguous chip")?;
                s.request(json!({"type": "hover", "section": "hpi", "chip": chip})).await?
            }
            Action::Pin { concept } => s.request(json!({"type": "pin", "concept": concept})).await?,
            Action::Unpin { concept } => {
                let r = s.request(json!({"type": "unpin", "concept": concept})).await?;
                if r["type"] == "error" && r["code"] == "not-pinned" {
                    return Ok(());
                }
                r
            }
            Action::Disambiguate { concept } => {
                let chip = self.ambiguous_chip.ok_or("no ambiguous chip")?;
                s.request(json!({"type": "disambiguate", "section": "hpi", "chip": chip, "concept": concept}))
                    .await?
            }
            Action::Back => s.request(json!({"type": "navigate", "direction": "back"})).await?,
        };
        if reply["type"] == "error" {
            return Err(format!("{} {action:?}: {reply}", s.user));
        }
        Ok(())
    }
}

pub fn session_service(debounce: Duration) -> Result<Arc<NoteService>, String> {
    let engine = shared_engine();
    let fixtures = generate(engine.lexicon(), &GeneratorConfig::new(42, 1, ts(CARD_AS_OF)));
    let record = ingest(&fixtures[0], engine.lexicon(), engine.automaton()).map_err(|e| e.to_string())?;
    NoteService::new(
        engine,
        [record],
        ServiceConfig {
            debounce,
            as_of: Some(ts(CARD_AS_OF)),
            journal: None,
        },
    )
    .map_err(|e| e.to_string())
}

pub fn check_session_protocol() -> Check {
    let service = session_service(Duration::from_millis(50))?;
    let patient = service.patients()[0].clone();
    let note = service.create_note(&patient, None).map_err(|e| e.to_string())?.id;
    let script = session_script();
    let (want_counts, want_pins) = session_oracle(&script);
    let rt = runtime();
    rt.block_on(async move {
        let addr = spawn_server(service.clone()).await;
        let (mut ana, _) = Session::connect(addr, &note, "ana").await?;
        let (mut ben, _) = Session::connect(addr, &note, "ben").await?;
        let mut replayer = Replayer {
            text_len: 0,
            version: 0,
            accepted_chip: None,
            ambiguous_chip: None,
        };
        for (user, action) in &script {
            let session = if *user == "ana" { &mut ana } else { &mut ben };
            replayer.run(session, action).await?;
        }

        let http = reqwest::Client::new();
        let pins: Value = http
            .get(format!("http://{addr}/notes/{note}/pins"))
            .send()
            .await
            .map_err(|e| e.to_string())?
            .json()
            .await
            .map_err(|e| e.to_string())?;
        let final_version = pins["version"].clone();
        let server_pins: Vec<String> = pins["concepts"]
            .as_array()
            .map(|a| a.iter().filter_map(|c| c.as_str().map(str::to_string)).collect())
            .unwrap_or_default();
        let mut seen = Vec::new();
        for s in [&mut ana, &mut ben] {
            let frame = s.wait_for(|f| f["type"] == "pins" && f["pin_version"] == final_version).await?;
            seen.push(pin_list(&frame));
            let leaked = s.broadcasts.iter().any(|f| f["type"] == "preview" && f["user"] != s.user.as_str());
            if leaked {
                return Err(format!("{} received another user's preview", s.user));
            }
        }

        let events: Value = http
            .get(format!("http://{addr}/notes/{note}/events"))
            .send()
            .await
            .map_err(|e| e.to_string())?
            .json()
            .await
            .map_err(|e| e.to_string())?;
        let got_counts: BTreeMap<String, BTreeMap<String, usize>> =
            serde_json::from_value(events["counts"].clone()).map_err(|e| e.to_string())?;
        let mut from_log: BTreeMap<String, BTreeMap<String, usize>> = BTreeMap::new();
        for e in events["events"].as_array().into_iter().flatten() {
            let user = e["user"].as_str().unwrap_or_default().to_string();
            let kind = e["kind"].as_str().unwrap_or_default().to_string();
            *from_log.entry(user).or_default().entry(kind).or_default() += 1;
        }
        ana.close().await;
        ben.close().await;

        let total: usize = want_counts.values().flat_map(|m| m.values()).sum();
        let detail = format!(
            "{} scripted steps, {total} events over {} (user, kind) pairs, pins converged on {:?} at version {final_version}",
            script.len(),
            want_counts.values().map(|m| m.len()).sum::<usize>(),
            want_pins
        );
        if seen[0] != seen[1] || seen[0] != server_pins || server_pins != want_pins {
            return Err(format!("{detail}; pin lists diverged: ana {:?}, ben {:?}, server {server_pins:?}", seen[0], seen[1]));
        }
        if got_counts != want_counts || from_log != want_counts {
            return Err(format!("{detail}; counts {got_counts:?} (log {from_log:?}), want {want_counts:?}"));
        }
        Ok(detail)
    })
}

// ---- chip immutability ----

/// One step of a random editing session.
#[derive(Debug, Clone)]
pub enum Step {
    Insert { at: usize, text: &'static str },
    Delete { a: usize, b: usize },
    Replace { a: usize, b: usize, text: &'static str },
    Move { chip: usize, to: usize },
    Rescan,
    Accept { at: usize },
}

pub const STEP_TEXTS: [&str; 8] = ["", "x", " ", "htn ", " fever", "no ", "pt", "chest pain, "];

/// Chip texts and ranges as (id, start, end, text).
fn chip_view(note: &Note, section: Section) -> Vec<(u64, usize, usize, String)> {
    let doc = note.section(section);
    doc.chips
        .iter()
        .map(|c| (c.id, c.start(), c.end(), c.span().surface.clone()))
        .collect()
}

/// Which chips a step may remove.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Removal {
    Nothing,
    /// Chips lying wholly inside the edited range.
    Within(usize, usize),
    /// Post-recognized chips glued to a neighbouring word by earlier edits.
    Glued,
}

/// Whole-chip invariant: every chip's text sits verbatim at its range,
/// chips are sorted and disjoint, and a chip that disappears was allowed
/// to by the step.
pub fn chip_invariant(before: &Note, after: &Note, section: Section, removal: Removal) -> Result<(), String> {
    let doc = after.section(section);
    let chars: Vec<char> = doc.text.chars().collect();
    let mut prev_end = 0;
    for c in &doc.chips {
        if c.start() < prev_end || c.end() > chars.len() || c.start() >= c.end() {
            return Err(format!("chip {} at {:?} is out of order or bounds", c.id, c.range()));
        }
        prev_end = c.end();
        let text: String = chars[c.start()..c.end()].iter().collect();
        if text != c.span().surface {
            return Err(format!("chip {} shows {:?} but its text is {:?}", c.id, text, c.span().surface));
        }
    }
    let now: BTreeMap<u64, String> = chip_view(after, section).into_iter().map(|(id, _, _, t)| (id, t)).collect();
    for (id, s, e, text) in chip_view(before, section) {
        match now.get(&id) {
            Some(t) if *t == text => {}
            Some(t) => return Err(format!("chip {id} changed from {text:?} to {t:?}")),
            None => {
                let allowed = match removal {
                    Removal::Nothing => false,
                    Removal::Within(a, b) => a <= s && e <= b,
                    Removal::Glued => before
                        .section(section)
                        .chip(id)
                        .is_some_and(|c| c.origin == ChipOrigin::PostRecognized),
                };
                if !allowed {
                    return Err(format!("chip {id} at {s}..{e} vanished under {removal:?}"));
                }
            }
        }
    }
    Ok(())
}

/// Apply one step, returning which chips it was allowed to remove.
pub fn apply_step(note: &mut Note, engine: &Engine, record: &PatientRecord, step: &Step) -> Result<Removal, NoteError> {
    let section = Section::Hpi;
    let len = note.section(section).len();
    let at = |x: usize| x % (len + 1);
    let range = |a: usize, b: usize| {
        let (a, b) = (at(a), at(b));
        (a.min(b), a.max(b))
    };
    match step {
        Step::Insert { at: x, text } => {
            note.apply_edit(section, &Edit::Insert { offset: at(*x), text: text.to_string() })?;
            Ok(Removal::Nothing)
        }
        Step::Delete { a, b } => {
            let (s, e) = range(*a, *b);
            note.apply_edit(section, &Edit::Delete { start: s, end: e })?;
            Ok(Removal::Within(s, e))
        }
        Step::Replace { a, b, text } => {
            let (s, e) = range(*a, *b);
            note.apply_edit(section, &Edit::Replace { start: s, end: e, text: text.to_string() })?;
            Ok(Removal::Within(s, e))
        }
        Step::Move { chip, to } => {
            let chips = &note.section(section).chips;
            if chips.is_empty() {
                return Ok(Removal::Nothing);
            }
            let id = chips[chip % chips.len()].id;
            note.apply_edit(section, &Edit::MoveChip { chip: id, to: at(*to) })?;
            Ok(Removal::Nothing)
        }
        Step::Rescan => {
            note.rescan(engine, record, section);
            Ok(Removal::Glued)
        }
        Step::Accept { at: x } => {
            let version = note.version;
            note.accept_completion(
                engine,
                record,
                section,
                at(*x),
                version,
                &Completion::Concept { concept: ConceptId::new("med-oxycodone") },
                ts(CARD_AS_OF),
            )?;
            Ok(Removal::Nothing)
        }
    }
}

pub fn seeded_note(engine: &Engine, record: &PatientRecord) -> Note {
    let mut note = Note::new("prop", record.patient_id.clone());
    note.apply_edit(
        Section::Hpi,
        &Edit::Insert {
            offset: 0,
            text: "Pt with htn and chf, denies fever or chest pain. Start ".into(),
        },
    )
    .expect("insert");
    note.rescan(engine, record, Section::Hpi);
    let caret = note.section(Section::Hpi).len();
    let version = note.version;
    note.accept_completion(
        engine,
        record,
        Section::Hpi,
        caret,
        version,
        &Completion::Concept { concept: ConceptId::new("cond-chf") },
        ts(CARD_AS_OF),
    )
    .expect("accept");
    note
}

/// Run one edit sequence, checking the invariant after every step.
pub fn run_edit_sequence(steps: &[Step]) -> Result<usize, String> {
    let engine = shared_engine();
    let record = PatientRecord::empty("prop-1");
    let mut note = seeded_note(&engine, &record);
    let mut rejected = 0;
    for step in steps {
        let before = note.clone();
        match apply_step(&mut note, &engine, &record, step) {
            Ok(removal) => chip_invariant(&before, &note, Section::Hpi, removal).map_err(|e| format!("after {step:?}: {e}"))?,
            Err(_) => {
                rejected += 1;
                if note != before {
                    return Err(format!("rejected {step:?} still changed the note"));
                }
            }
        }
    }
    Ok(rejected)
}

pub fn step_strategy() -> impl proptest::strategy::Strategy<Value = Step> {
    use proptest::prelude::*;
    let text = proptest::sample::select(&STEP_TEXTS[..]);
    prop_oneof![
        3 => (0..400usize, text.clone()).prop_map(|(at, text)| Step::Insert { at, text }),
        3 => (0..400usize, 0..400usize).prop_map(|(a, b)| Step::Delete { a, b }),
        2 => (0..400usize, 0..400usize, text).prop_map(|(a, b, text)| Step::Replace { a, b, text }),
        1 => (0..8usize, 0..400usize).prop_map(|(chip, to)| Step::Move { chip, to }),
        1 => Just(Step::Rescan),
        1 => (0..400usize).prop_map(|at| Step::Accept { at }),
    ]
}

pub fn check_chip_immutability(cases: u32) -> Check {
    use proptest::test_runner::{Config, TestRunner};
    let mut runner = TestRunner::new(Config {
        cases,
        failure_persistence: None,
        ..Config::default()
    });
    let strategy = proptest::collection::vec(step_strategy(), 1..40);
    let rejected = std::cell::Cell::new(0usize);
    let result = runner.run(&strategy, |steps| {
        let r = run_edit_sequence(&steps).map_err(proptest::test_runner::TestCaseError::fail)?;
        rejected.set(rejected.get() + r);
        Ok(())
    });
    match result {
        Ok(()) => Ok(format!("{cases} random edit sequences, {} chip-cutting edits rejected, no partial chips", rejected.get())),
        Err(e) => Err(e.to_string()),
    }
}
