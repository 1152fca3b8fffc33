//! Seeded synthetic patient generator.
//!
//! Histories are driven by the lexicon's links: each patient gets a few
//! conditions, results for the labs and vitals those conditions point at,
//! entries for linked medications and procedures, and free-text notes that
//! mention all of them.

use chrono::{DateTime, Duration, SecondsFormat, Utc};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{EntryFixture, EntryKind, FixtureValue, LabFixture, NoteFixture, PatientFixture};
use crate::ontology::{Concept, ConceptId, ConceptType, Lexicon, LinkRole};

#[derive(Debug, Clone)]
pub struct GeneratorConfig {
    pub seed: u64,
    pub patients: usize,
    pub as_of: DateTime<Utc>,
    /// How far back results and notes may be dated.
    pub history_days: i64,
}

impl GeneratorConfig {
    pub fn new(seed: u64, patients: usize, as_of: DateTime<Utc>) -> Self {
        Self {
            seed,
            patients,
            as_of,
            history_days: 3 * 365,
        }
    }
}

fn unit_for(concept: &Concept) -> &'static str {
    match concept.canonical_name.to_lowercase().as_str() {
        "potassium" | "sodium" | "lactate" => "mmol/L",
        "glucose" | "creatinine" | "bun" | "magnesium" => "mg/dL",
        "troponin" => "ng/mL",
        "ck" | "alt" | "ast" => "U/L",
        "wbc" | "platelets" => "K/uL",
        "hemoglobin" => "g/dL",
        "bnp" => "pg/mL",
        "prothrombin time" => "s",
        "hemoglobin a1c" | "oxygen saturation" => "%",
        "tsh" => "mIU/L",
        "heart rate" => "bpm",
        "systolic blood pressure" => "mmHg",
        "respiratory rate" => "/min",
        "temperature" => "C",
        "weight" => "kg",
        _ => "",
    }
}

fn decimals(x: f64) -> u8 {
    let s = format!("{x}");
    s.split_once('.').map_or(0, |(_, f)| f.len().min(3) as u8)
}

fn timestamp(t: DateTime<Utc>) -> String {
    t.to_rfc3339_opts(SecondsFormat::Secs, true)
}

struct PatientGen<'a> {
    lexicon: &'a Lexicon,
    rng: ChaCha8Rng,
    config: &'a GeneratorConfig,
}

impl<'a> PatientGen<'a> {
    fn when(&mut self) -> DateTime<Utc> {
        let minutes = self.rng.gen_range(0..self.config.history_days * 24 * 60);
        self.config.as_of - Duration::minutes(minutes)
    }

    fn surface(&mut self, id: &ConceptId) -> String {
        let concept = self.lexicon.concept(id).expect("linked concept exists");
        let form = concept.surface_forms.choose(&mut self.rng).expect("concept has a form");
        form.to_lowercase()
    }

    fn pick<T: Clone>(&mut self, items: &[T], n: usize) -> Vec<T> {
        items.choose_multiple(&mut self.rng, n.min(items.len())).cloned().collect()
    }

    fn lab_value(&mut self, concept: &Concept) -> (f64, u8) {
        let (low, high, precision) = match concept.reference_range {
            Some(r) => (r.low, r.high, decimals(r.low).max(decimals(r.high))),
            None => (50.0, 110.0, 1),
        };
        let width = (high - low).max(f64::EPSILON);
        let roll: f64 = self.rng.gen();
        let raw = if roll < 0.15 {
            high + width * self.rng.gen_range(0.05..0.8)
        } else if roll < 0.25 && low > 0.0 {
            (low - width * self.rng.gen_range(0.05..0.5)).max(low / 2.0)
        } else {
            self.rng.gen_range(low..=high)
        };
        let scale = 10f64.powi(precision as i32);
        ((raw * scale).round() / scale, precision)
    }
}

fn linked_of(lexicon: &Lexicon, ids: &[ConceptId], role: LinkRole) -> Vec<ConceptId> {
    let mut out: Vec<ConceptId> = Vec::new();
    for id in ids {
        for t in lexicon.linked(id, role) {
            if !out.contains(t) {
                out.push(t.clone());
            }
        }
    }
    out
}

fn of_type(lexicon: &Lexicon, t: ConceptType) -> Vec<ConceptId> {
    lexicon
        .concepts()
        .iter()
        .filter(|c| c.concept_type == t)
        .map(|c| c.id.clone())
        .collect()
}

pub fn generate_patient(lexicon: &Lexicon, config: &GeneratorConfig, index: usize) -> PatientFixture {
    let seed = config.seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    let mut g = PatientGen {
        lexicon,
        rng: ChaCha8Rng::seed_from_u64(seed),
        config,
    };

    let conditions: Vec<ConceptId> = of_type(lexicon, ConceptType::Condition)
        .into_iter()
        .filter(|c| !lexicon.links(c).is_empty())
        .collect();
    let n_cond = g.rng.gen_range(1..=3);
    let chosen = g.pick(&conditions, n_cond);

    let mut lab_ids = linked_of(lexicon, &chosen, LinkRole::RelevantLab);
    for c in linked_of(lexicon, &lab_ids, LinkRole::ContextualLab) {
        if !lab_ids.contains(&c) {
            lab_ids.push(c);
        }
    }
    let labs_all = of_type(lexicon, ConceptType::Lab);
    for extra in g.pick(&labs_all, 2) {
        if !lab_ids.contains(&extra) {
            lab_ids.push(extra);
        }
    }

    let mut labs = Vec::new();
    for id in &lab_ids {
        let concept = lexicon.concept(id).expect("lab exists");
        let n = g.rng.gen_range(2..=8);
        for _ in 0..n {
            let (value, precision) = g.lab_value(concept);
            let t = g.when();
            labs.push(LabFixture {
                id: format!("L{}", labs.len() + 1),
                concept: id.as_str().to_string(),
                value: FixtureValue::Text(format!("{value:.*}", precision as usize)),
                unit: unit_for(concept).to_string(),
                timestamp: timestamp(t),
                reference_range: None,
            });
        }
    }
    labs.sort_by(|a, b| a.timestamp.cmp(&b.timestamp));
    for (i, l) in labs.iter_mut().enumerate() {
        l.id = format!("L{}", i + 1);
    }

    let meds = linked_of(lexicon, &chosen, LinkRole::RelevantMedication);
    let procs = linked_of(lexicon, &chosen, LinkRole::RelatedProcedure);
    let symptoms = of_type(lexicon, ConceptType::Symptom);

    let mut notes: Vec<(NoteFixture, Vec<ConceptId>)> = Vec::new();
    let n_notes = g.rng.gen_range(3..=6);
    for _ in 0..n_notes {
        let mut mentioned = Vec::new();
        let mut text = String::new();
        let k = g.rng.gen_range(1..=chosen.len());
        let conds = g.pick(&chosen, k);
        let cond_text: Vec<String> = conds.iter().map(|c| g.surface(c)).collect();
        mentioned.extend(conds);
        let syms = g.pick(&symptoms, 3);
        let (s0, s1, s2) = (g.surface(&syms[0]), g.surface(&syms[1]), g.surface(&syms[2]));
        text.push_str(&format!(
            "Patient with history of {} presents with {} and {}. Denies {}.",
            cond_text.join(" and "),
            s0,
            s1,
            s2
        ));
        mentioned.extend(syms);
        if let Some(m) = g.pick(&meds, 1).pop() {
            text.push_str(&format!(" Currently taking {}.", g.surface(&m)));
            mentioned.push(m);
        }
        if let Some(p) = g.pick(&procs, 1).pop() {
            text.push_str(&format!(" Plan to follow up after {}.", g.surface(&p)));
            mentioned.push(p);
        }
        let role = *["physician", "nursing"].choose(&mut g.rng).expect("non-empty");
        let t = g.when();
        notes.push((
            NoteFixture {
                id: String::new(),
                timestamp: timestamp(t),
                author_role: role.to_string(),
                text,
            },
            mentioned,
        ));
    }

    for report in ["echo", "ekg"] {
        let proc_id = ConceptId::new(format!("proc-{report}"));
        if !procs.contains(&proc_id) || lexicon.concept(&proc_id).is_none() {
            continue;
        }
        let cond = chosen
            .iter()
            .find(|c| lexicon.linked(c, LinkRole::RelatedProcedure).any(|p| p == &proc_id))
            .cloned()
            .expect("procedure came from a chosen condition");
        let cond_name = g.surface(&cond);
        let proc_name = g.surface(&proc_id);
        for _ in 0..g.rng.gen_range(1..=2) {
            let text = if report == "echo" {
                let ef = g.rng.gen_range(25..=65);
                format!("Transthoracic {proc_name} report: ejection fraction {ef}%. Findings in the setting of {cond_name}.")
            } else {
                let rate = g.rng.gen_range(55..=130);
                format!("12-lead {proc_name}: ventricular rate {rate}. Interpretation in context of {cond_name}.")
            };
            let t = g.when();
            notes.push((
                NoteFixture {
                    id: String::new(),
                    timestamp: timestamp(t),
                    author_role: report.to_string(),
                    text,
                },
                vec![proc_id.clone(), cond.clone()],
            ));
        }
    }

    notes.sort_by(|a, b| a.0.timestamp.cmp(&b.0.timestamp));
    for (i, (n, _)) in notes.iter_mut().enumerate() {
        n.id = format!("N{}", i + 1);
    }

    let mut entries = Vec::new();
    let mut add_entry = |id: &ConceptId, kind: EntryKind| {
        let source = notes.iter().find(|(_, m)| m.contains(id));
        let (ts, source_note) = match source {
            Some((n, _)) => (n.timestamp.clone(), Some(n.id.clone())),
            None => (timestamp(config.as_of), None),
        };
        entries.push(EntryFixture {
            id: format!("E{}", entries.len() + 1),
            concept: id.as_str().to_string(),
            kind,
            timestamp: ts,
            source_note,
        });
    };
    for c in &chosen {
        add_entry(c, EntryKind::Condition);
    }
    for m in &meds {
        if notes.iter().any(|(_, ms)| ms.contains(m)) {
            add_entry(m, EntryKind::Medication);
        }
    }
    for p in &procs {
        if notes.iter().any(|(_, ms)| ms.contains(p)) {
            add_entry(p, EntryKind::Procedure);
        }
    }

    PatientFixture {
        patient_id: format!("synth-{}-{:03}", config.seed, index + 1),
        labs,
        notes: notes.into_iter().map(|(n, _)| n).collect(),
        entries,
    }
}

pub fn generate(lexicon: &Lexicon, config: &GeneratorConfig) -> Vec<PatientFixture> {
    (0..config.patients).map(|i| generate_patient(lexicon, config, i)).collect()
}
