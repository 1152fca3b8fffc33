use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use chrono::{DateTime, Utc};
use clap::{Parser, Subcommand};

use knowted::record::generate::{generate, GeneratorConfig};
use knowted::record::{ingest_file, parse_timestamp, PatientRecord};
use knowted::service::http::router;
use knowted::service::{NoteService, ServiceConfig};
use knowted::{ConceptId, Engine, Lexicon};

#[derive(Parser)]
#[command(name = "knowted", version, about = "Clinical concept recognition and card service")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Lexicon tools.
    Ontology {
        #[command(subcommand)]
        command: OntologyCommand,
    },
    /// Patient record tools.
    Record {
        #[command(subcommand)]
        command: RecordCommand,
    },
    /// Recognize concepts in text (stdin when TEXT is omitted) and print annotated spans.
    Scan {
        #[arg(long, env = "KNOWTED_LEXICON", default_value = "data/lexicon")]
        lexicon: PathBuf,
        text: Option<String>,
    },
    /// Print the completion response for the text before a caret.
    Complete {
        #[arg(long, env = "KNOWTED_LEXICON", default_value = "data/lexicon")]
        lexicon: PathBuf,
        /// Patient fixture used for record-aware ranking.
        #[arg(long)]
        patient: Option<PathBuf>,
        text: String,
    },
    /// Assemble and print a card.
    Card {
        #[arg(long, env = "KNOWTED_LEXICON", default_value = "data/lexicon")]
        lexicon: PathBuf,
        #[arg(long)]
        patient: PathBuf,
        #[arg(long)]
        as_of: Option<String>,
        concept: String,
    },
    /// Run the HTTP/WebSocket service.
    Serve {
        /// Holds `patients/*.json` and the journal.
        #[arg(long, env = "KNOWTED_DATA_DIR", default_value = "data")]
        data_dir: PathBuf,
        /// Defaults to `<data-dir>/lexicon`.
        #[arg(long, env = "KNOWTED_LEXICON")]
        lexicon: Option<PathBuf>,
        #[arg(long, env = "KNOWTED_PORT", default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        /// Fixed clock for cards, as RFC 3339; the wall clock when unset.
        #[arg(long, env = "KNOWTED_AS_OF")]
        as_of: Option<String>,
        #[arg(long, default_value_t = 200)]
        debounce_ms: u64,
    },
}

#[derive(Subcommand)]
enum OntologyCommand {
    /// Validate a lexicon directory and write its compiled JSON index.
    Compile {
        dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// List the concepts a surface form maps to.
    Lookup {
        #[arg(long, env = "KNOWTED_LEXICON", default_value = "data/lexicon")]
        lexicon: PathBuf,
        form: String,
    },
}

#[derive(Subcommand)]
enum RecordCommand {
    /// Validate a patient fixture and print a summary.
    Ingest {
        file: PathBuf,
        #[arg(long, env = "KNOWTED_LEXICON", default_value = "data/lexicon")]
        lexicon: PathBuf,
    },
    /// Write seeded synthetic patient fixtures.
    Generate {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 10)]
        patients: usize,
        #[arg(long)]
        as_of: Option<String>,
        #[arg(long, env = "KNOWTED_LEXICON", default_value = "data/lexicon")]
        lexicon: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_engine(dir: &Path) -> Result<Engine> {
    Engine::load(dir).with_context(|| format!("loading lexicon from {}", dir.display()))
}

fn as_of(raw: Option<&str>) -> Result<DateTime<Utc>> {
    match raw {
        Some(s) => Ok(parse_timestamp("as-of", s)?),
        None => Ok(Utc::now()),
    }
}

fn print_json(value: &impl serde::Serialize) -> Result<()> {
    let mut out = std::io::stdout().lock();
    match writeln!(out, "{}", serde_json::to_string_pretty(value)?) {
        // a closed pipe (`| head`) is not an error
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => std::process::exit(0),
        r => Ok(r?),
    }
}

fn load_patients(dir: &Path, engine: &Engine) -> Result<Vec<PatientRecord>> {
    let mut records = Vec::new();
    let Ok(entries) = std::fs::read_dir(dir) else {
        log::warn!("no patient directory at {}", dir.display());
        return Ok(records);
    };
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    for path in paths {
        let record = ingest_file(&path, engine.lexicon(), engine.automaton())
            .with_context(|| format!("ingesting {}", path.display()))?;
        records.push(record);
    }
    Ok(records)
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Ontology { command } => match command {
            OntologyCommand::Compile { dir, out } => {
                let lexicon = Lexicon::load_dir(&dir)?;
                std::fs::write(&out, lexicon.to_index_json())?;
                println!("{} concepts, {} surface forms -> {}", lexicon.len(), lexicon.surface_index().len(), out.display());
            }
            OntologyCommand::Lookup { lexicon, form } => {
                let lexicon = Lexicon::load_dir(&lexicon)?;
                print_json(&lexicon.lookup(&form))?;
            }
        },
        Command::Record { command } => match command {
            RecordCommand::Ingest { file, lexicon } => {
                let engine = load_engine(&lexicon)?;
                let r = ingest_file(&file, engine.lexicon(), engine.automaton())?;
                print_json(&serde_json::json!({
                    "patient_id": r.patient_id,
                    "labs": r.labs.len(),
                    "notes": r.notes.len(),
                    "entries": r.entries.len(),
                    "mentions": r.notes.iter().map(|n| n.mentions.len()).sum::<usize>(),
                }))?;
            }
            RecordCommand::Generate {
                seed,
                patients,
                as_of: when,
                lexicon,
                out,
            } => {
                let lexicon = Lexicon::load_dir(&lexicon)?;
                let config = GeneratorConfig::new(seed, patients, as_of(when.as_deref())?);
                std::fs::create_dir_all(&out)?;
                for p in generate(&lexicon, &config) {
                    let path = out.join(format!("{}.json", p.patient_id));
                    std::fs::write(&path, serde_json::to_string_pretty(&p)?)?;
                    println!("{}", path.display());
                }
            }
        },
        Command::Scan { lexicon, text } => {
            let engine = load_engine(&lexicon)?;
            let text = match text {
                Some(t) => t,
                None => {
                    let mut s = String::new();
                    std::io::stdin().read_to_string(&mut s)?;
                    s
                }
            };
            let spans = engine.scan(&text, &[]);
            print_json(&engine.annotate(&text, &spans))?;
        }
        Command::Complete { lexicon, patient, text } => {
            let engine = load_engine(&lexicon)?;
            let record = patient
                .map(|p| ingest_file(&p, engine.lexicon(), engine.automaton()))
                .transpose()?;
            print_json(&engine.complete(&text, record.as_ref()))?;
        }
        Command::Card {
            lexicon,
            patient,
            as_of: when,
            concept,
        } => {
            let engine = load_engine(&lexicon)?;
            let record = ingest_file(&patient, engine.lexicon(), engine.automaton())?;
            print_json(&engine.card(&ConceptId::new(concept), &record, as_of(when.as_deref())?)?)?;
        }
        Command::Serve {
            data_dir,
            lexicon,
            port,
            host,
            as_of: when,
            debounce_ms,
        } => {
            let lexicon = lexicon.unwrap_or_else(|| data_dir.join("lexicon"));
            let engine = Arc::new(load_engine(&lexicon)?);
            let records = load_patients(&data_dir.join("patients"), &engine)?;
            if records.is_empty() {
                bail!("no patients found under {}", data_dir.join("patients").display());
            }
            log::info!("loaded {} patients and {} concepts", records.len(), engine.lexicon().len());
            let config = ServiceConfig {
                debounce: Duration::from_millis(debounce_ms),
                as_of: when.as_deref().map(|s| parse_timestamp("as-of", s)).transpose()?,
                journal: Some(data_dir.join("journal.jsonl")),
            };
            let service = NoteService::new(engine, records, config)?;
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::bind((host.as_str(), port)).await?;
                log::info!("listening on {}", listener.local_addr()?);
                axum::serve(listener, router(service)).await?;
                anyhow::Ok(())
            })?;
        }
    }
    Ok(())
}
