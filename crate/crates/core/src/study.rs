//! Subjective-evaluation studies: scheduling with self and circular repeats,
//! a qualification exam, per-session answer capture and agreement analytics.
//!
//! State is event-sourced. Commands on [`StudyStore`] validate a request and
//! return the [`Event`] to persist; [`StudyStore::apply`] folds an event into
//! the state. Replaying the same events always rebuilds the same state, and
//! the agreement report is a pure function of that state.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::StudyError;
use crate::io::seeded_rng;
use crate::model::Emotion;
use crate::scoring::SoftLabel;

pub const DEFAULT_SELF_REPEAT: f64 = 0.20;
pub const DEFAULT_CIRCULAR_REPEAT: f64 = 0.10;
pub const DEFAULT_QUALIFICATION_ITEMS: usize = 40;
pub const DEFAULT_PASS_THRESHOLD: f64 = 0.75;

const FRACTION_TOLERANCE: f64 = 1e-9;

// RNG streams, one per independent random decision.
const STREAM_DECOY: u64 = 1;
const STREAM_FRESH: u64 = 2;
const STREAM_REPEATS: u64 = 3;
const STREAM_EXP2_ORDER: u64 = 4;
const STREAM_QUEUE_BASE: u64 = 1 << 32;

// ---------------------------------------------------------------------------
// Definition

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolImage {
    pub image_id: String,
    pub soft_label: SoftLabel,
    pub hard_label: Emotion,
    /// Chosen at scheduling time when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decoy: Option<SoftLabel>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QualificationItem {
    pub image_id: String,
    /// Label the participant's answer is graded against.
    pub reference: Emotion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QualificationConfig {
    #[serde(default = "default_qual_items")]
    pub n_images: usize,
    #[serde(default = "default_pass")]
    pub pass_threshold: f64,
    #[serde(default)]
    pub items: Vec<QualificationItem>,
}

fn default_qual_items() -> usize {
    DEFAULT_QUALIFICATION_ITEMS
}

fn default_pass() -> f64 {
    DEFAULT_PASS_THRESHOLD
}

impl Default for QualificationConfig {
    fn default() -> Self {
        QualificationConfig {
            n_images: 0,
            pass_threshold: DEFAULT_PASS_THRESHOLD,
            items: Vec::new(),
        }
    }
}

fn default_repeat() -> f64 {
    DEFAULT_SELF_REPEAT + DEFAULT_CIRCULAR_REPEAT
}

fn default_self() -> f64 {
    DEFAULT_SELF_REPEAT
}

fn default_circular() -> f64 {
    DEFAULT_CIRCULAR_REPEAT
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyDefinition {
    pub pool: Vec<PoolImage>,
    pub participants: Vec<String>,
    #[serde(default = "default_repeat")]
    pub repeat_fraction: f64,
    #[serde(default = "default_self")]
    pub self_repeat: f64,
    #[serde(default = "default_circular")]
    pub circular_repeat: f64,
    #[serde(default)]
    pub qualification: QualificationConfig,
    #[serde(default)]
    pub seed: u64,
}

impl StudyDefinition {
    pub fn new(pool: Vec<PoolImage>, participants: Vec<String>) -> StudyDefinition {
        StudyDefinition {
            pool,
            participants,
            repeat_fraction: default_repeat(),
            self_repeat: DEFAULT_SELF_REPEAT,
            circular_repeat: DEFAULT_CIRCULAR_REPEAT,
            qualification: QualificationConfig::default(),
            seed: 0,
        }
    }

    /// Sets the three repeat fractions so that `self + circular = total`.
    pub fn with_repeats(mut self, self_repeat: f64, circular_repeat: f64) -> StudyDefinition {
        self.self_repeat = self_repeat;
        self.circular_repeat = circular_repeat;
        self.repeat_fraction = self_repeat + circular_repeat;
        self
    }

    pub fn validate(&self) -> Result<(), StudyError> {
        let invalid = |m: String| Err(StudyError::InvalidDefinition(m));
        if self.pool.is_empty() {
            return Err(StudyError::EmptyPool);
        }
        if self.participants.is_empty() {
            return invalid("no participants".into());
        }
        for (name, v) in [
            ("repeat_fraction", self.repeat_fraction),
            ("self_repeat", self.self_repeat),
            ("circular_repeat", self.circular_repeat),
            ("pass_threshold", self.qualification.pass_threshold),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return invalid(format!("{name} must lie in [0, 1], got {v}"));
            }
        }
        if (self.self_repeat + self.circular_repeat - self.repeat_fraction).abs() > FRACTION_TOLERANCE {
            return invalid(format!(
                "self_repeat ({}) + circular_repeat ({}) must equal repeat_fraction ({})",
                self.self_repeat, self.circular_repeat, self.repeat_fraction
            ));
        }
        if self.circular_repeat > 0.0 && self.participants.len() < 3 {
            return Err(StudyError::TooFewParticipants {
                needed: 3,
                have: self.participants.len(),
            });
        }
        let mut ids = HashSet::new();
        for img in &self.pool {
            if !ids.insert(img.image_id.as_str()) {
                return invalid(format!("duplicate image `{}`", img.image_id));
            }
            if img.decoy.as_ref() == Some(&img.soft_label) {
                return invalid(format!("decoy of `{}` equals its soft-label", img.image_id));
            }
        }
        let mut names = HashSet::new();
        for p in &self.participants {
            if p.is_empty() || !names.insert(p.as_str()) {
                return invalid(format!("empty or duplicate participant `{p}`"));
            }
        }
        let q = &self.qualification;
        if q.items.len() != q.n_images {
            return invalid(format!(
                "qualification expects {} items, {} given",
                q.n_images,
                q.items.len()
            ));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Questions

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuestionKind {
    /// Pick the best descriptor: hard label, soft-label, both or none.
    Exp1,
    /// Pick which of two soft-labels belongs to the image.
    Exp2,
    /// Label the image with one emotion; graded against a reference.
    Qualification,
}

impl QuestionKind {
    pub fn name(self) -> &'static str {
        match self {
            QuestionKind::Exp1 => "exp1",
            QuestionKind::Exp2 => "exp2",
            QuestionKind::Qualification => "qualification",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Fresh,
    SelfRepeat,
    CircularRepeat,
    Qualification,
}

/// The two candidates of an exp2 question, in display order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Exp2Option {
    True,
    Decoy,
}

pub const EXP1_CHOICES: [&str; 4] = ["hard", "soft", "both", "none"];
pub const EXP2_CHOICES: [&str; 2] = ["a", "b"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Question {
    pub id: String,
    pub kind: QuestionKind,
    pub image_id: String,
    pub participant: String,
    pub provenance: Provenance,
    /// For repeats, the fresh question being repeated.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub origin: Option<String>,
    /// Display order of the exp2 candidates.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exp2_order: Option<[Exp2Option; 2]>,
}

impl Question {
    /// Normalises a choice so that presentations with different exp2 orders
    /// compare equal when the same candidate was picked.
    fn semantic_choice(&self, choice: &str) -> String {
        match (self.kind, self.exp2_order) {
            (QuestionKind::Exp2, Some(order)) => {
                let picked = if choice == "a" { order[0] } else { order[1] };
                match picked {
                    Exp2Option::True => "true".into(),
                    Exp2Option::Decoy => "decoy".into(),
                }
            }
            _ => choice.to_string(),
        }
    }

    pub fn validate_choice(&self, choice: &str) -> Result<(), StudyError> {
        let ok = match self.kind {
            QuestionKind::Exp1 => EXP1_CHOICES.contains(&choice),
            QuestionKind::Exp2 => EXP2_CHOICES.contains(&choice),
            QuestionKind::Qualification => choice.parse::<Emotion>().is_ok(),
        };
        if ok {
            Ok(())
        } else {
            Err(StudyError::InvalidChoice {
                kind: self.kind.name(),
                choice: choice.to_string(),
            })
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub questions: IndexMap<String, Question>,
    /// Main-study queue per participant, in presentation order.
    pub queues: IndexMap<String, Vec<String>>,
    /// Qualification exam per participant, in presentation order.
    pub qualification: IndexMap<String, Vec<String>>,
    pub fresh: usize,
    pub self_repeats: usize,
    pub circular_repeats: usize,
    /// Decoy soft-label per image.
    pub decoys: IndexMap<String, SoftLabel>,
}

impl Schedule {
    pub fn total(&self) -> usize {
        self.fresh + self.self_repeats + self.circular_repeats
    }

    pub fn load(&self, participant: &str) -> usize {
        self.queues.get(participant).map_or(0, Vec::len)
    }

    /// Unordered participant pairs sharing at least one circular repeat.
    pub fn ring_edges(&self) -> Vec<(String, String)> {
        let mut edges = Vec::new();
        for q in self.questions.values() {
            if q.provenance != Provenance::CircularRepeat {
                continue;
            }
            let origin = &self.questions[q.origin.as_ref().expect("repeat has origin")];
            let mut pair = [origin.participant.clone(), q.participant.clone()];
            pair.sort();
            let [a, b] = pair;
            if !edges.contains(&(a.clone(), b.clone())) {
                edges.push((a, b));
            }
        }
        edges.sort();
        edges
    }
}

/// Decoy for each image: the soft-label of another image, chosen at random
/// among those with a different argmax emotion.
fn assign_decoys(def: &StudyDefinition) -> Result<IndexMap<String, SoftLabel>, StudyError> {
    let mut rng = seeded_rng(def.seed, STREAM_DECOY);
    let mut out = IndexMap::new();
    for img in &def.pool {
        if let Some(d) = img.decoy {
            out.insert(img.image_id.clone(), d);
            continue;
        }
        let own = img.soft_label.argmax();
        let candidates: Vec<&PoolImage> = def
            .pool
            .iter()
            .filter(|o| o.soft_label.argmax() != own && o.soft_label != img.soft_label)
            .collect();
        if candidates.is_empty() {
            return Err(StudyError::InvalidDefinition(format!(
                "no decoy available for `{}`: every image shares its argmax emotion",
                img.image_id
            )));
        }
        let pick = candidates[rng.random_range(0..candidates.len())];
        out.insert(img.image_id.clone(), pick.soft_label);
    }
    Ok(out)
}

fn exp2_order(rng: &mut impl Rng) -> [Exp2Option; 2] {
    if rng.random_bool(0.5) {
        [Exp2Option::True, Exp2Option::Decoy]
    } else {
        [Exp2Option::Decoy, Exp2Option::True]
    }
}

/// Builds every participant's queue.
///
/// Fresh questions (one exp1 and one exp2 per image) are shuffled and dealt
/// round-robin. `round(repeat_fraction × fresh)` repeats follow, of which
/// `round(self_repeat × fresh)` are self repeats and the rest circular.
/// Circular repeats come first; each goes to the least-loaded participant
/// (ties by listing order) and repeats a question answered by one of its two
/// ring neighbours, alternating sides. Self repeats are then placed the same
/// way from the participant's own fresh questions. No fresh question is
/// repeated twice. Each queue is finally shuffled.
pub fn schedule(def: &StudyDefinition) -> Result<Schedule, StudyError> {
    def.validate()?;
    let decoys = assign_decoys(def)?;
    let participants = &def.participants;
    let k = participants.len();

    let mut order_rng = seeded_rng(def.seed, STREAM_EXP2_ORDER);
    let mut questions: IndexMap<String, Question> = IndexMap::new();
    let mut fresh_ids: Vec<String> = Vec::with_capacity(2 * def.pool.len());
    for img in &def.pool {
        for kind in [QuestionKind::Exp1, QuestionKind::Exp2] {
            let id = format!("q{:06}", fresh_ids.len());
            fresh_ids.push(id.clone());
            questions.insert(
                id.clone(),
                Question {
                    id,
                    kind,
                    image_id: img.image_id.clone(),
                    participant: String::new(),
                    provenance: Provenance::Fresh,
                    origin: None,
                    exp2_order: (kind == QuestionKind::Exp2).then(|| exp2_order(&mut order_rng)),
                },
            );
        }
    }
    let fresh = fresh_ids.len();
    fresh_ids.shuffle(&mut seeded_rng(def.seed, STREAM_FRESH));

    let mut queues: Vec<Vec<String>> = vec![Vec::new(); k];
    for (i, id) in fresh_ids.iter().enumerate() {
        let p = i % k;
        queues[p].push(id.clone());
        questions[id].participant = participants[p].clone();
    }

    let total_repeats = (def.repeat_fraction * fresh as f64).round() as usize;
    let self_repeats = ((def.self_repeat * fresh as f64).round() as usize).min(total_repeats);
    let circular_repeats = total_repeats - self_repeats;

    // Fresh questions still available as repeat sources, per participant.
    let mut repeat_rng = seeded_rng(def.seed, STREAM_REPEATS);
    let mut available: Vec<Vec<String>> = queues
        .iter()
        .map(|q| {
            let mut v = q.clone();
            v.shuffle(&mut repeat_rng);
            v
        })
        .collect();
    let mut next_side = vec![false; k];
    let mut repeat_count = 0usize;

    let mut place = |questions: &mut IndexMap<String, Question>,
                     queues: &mut Vec<Vec<String>>,
                     available: &mut Vec<Vec<String>>,
                     provenance: Provenance|
     -> Result<(), StudyError> {
        let mut candidates: Vec<usize> = (0..k).collect();
        candidates.sort_by_key(|p| (queues[*p].len(), *p));
        for target in candidates {
            let sources: Vec<usize> = match provenance {
                Provenance::SelfRepeat => vec![target],
                _ => {
                    let left = (target + k - 1) % k;
                    let right = (target + 1) % k;
                    if next_side[target] {
                        vec![right, left]
                    } else {
                        vec![left, right]
                    }
                }
            };
            for source in sources {
                let Some(origin_id) = available[source].pop() else { continue };
                if provenance == Provenance::CircularRepeat {
                    next_side[target] = source == (target + k - 1) % k;
                }
                let origin = questions[&origin_id].clone();
                let id = format!("r{repeat_count:06}");
                repeat_count += 1;
                questions.insert(
                    id.clone(),
                    Question {
                        id: id.clone(),
                        kind: origin.kind,
                        image_id: origin.image_id.clone(),
                        participant: participants[target].clone(),
                        provenance,
                        origin: Some(origin_id),
                        exp2_order: (origin.kind == QuestionKind::Exp2).then(|| exp2_order(&mut order_rng)),
                    },
                );
                queues[target].push(id);
                return Ok(());
            }
        }
        let least = (0..k).min_by_key(|p| (queues[*p].len(), *p)).expect("participants");
        Err(StudyError::RepeatPoolExhausted(participants[least].clone()))
    };

    for _ in 0..circular_repeats {
        place(&mut questions, &mut queues, &mut available, Provenance::CircularRepeat)?;
    }
    for _ in 0..self_repeats {
        place(&mut questions, &mut queues, &mut available, Provenance::SelfRepeat)?;
    }

    let mut qualification = IndexMap::new();
    for (p, name) in participants.iter().enumerate() {
        let mut rng = seeded_rng(def.seed, STREAM_QUEUE_BASE + p as u64);
        queues[p].shuffle(&mut rng);
        let mut exam: Vec<String> = Vec::with_capacity(def.qualification.items.len());
        for (i, item) in def.qualification.items.iter().enumerate() {
            let id = format!("x{p:03}-{i:03}");
            questions.insert(
                id.clone(),
                Question {
                    id: id.clone(),
                    kind: QuestionKind::Qualification,
                    image_id: item.image_id.clone(),
                    participant: name.clone(),
                    provenance: Provenance::Qualification,
                    origin: None,
                    exp2_order: None,
                },
            );
            exam.push(id);
        }
        exam.shuffle(&mut rng);
        qualification.insert(name.clone(), exam);
    }

    Ok(Schedule {
        questions,
        queues: participants.iter().cloned().zip(queues).collect(),
        qualification,
        fresh,
        self_repeats,
        circular_repeats,
        decoys,
    })
}

// ---------------------------------------------------------------------------
// Sessions

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SessionState {
    Qualifying,
    Active,
    Complete,
    /// Failed the qualification exam; may not take the main study.
    Disqualified,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Answer {
    pub choice: String,
    pub timestamp_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub session_id: String,
    pub study_id: String,
    pub participant_id: String,
    pub state: SessionState,
    pub answers: IndexMap<String, Answer>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub qualification: Option<Grade>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grade {
    pub passed: bool,
    pub score: f64,
    pub correct: usize,
    pub total: usize,
}

/// Score and verdict of an exam given the reference labels; the pass
/// boundary is inclusive.
pub fn grade(correct: usize, total: usize, pass_threshold: f64) -> Grade {
    let score = if total == 0 { 1.0 } else { correct as f64 / total as f64 };
    Grade {
        passed: score >= pass_threshold,
        score,
        correct,
        total,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyState {
    pub study_id: String,
    pub definition: StudyDefinition,
    pub schedule: Schedule,
    /// Session id per participant.
    pub sessions: IndexMap<String, String>,
}

impl StudyState {
    fn image(&self, image_id: &str) -> Option<&PoolImage> {
        self.definition.pool.iter().find(|i| i.image_id == image_id)
    }

    fn reference(&self, question: &Question) -> Option<Emotion> {
        self.definition
            .qualification
            .items
            .iter()
            .find(|i| i.image_id == question.image_id)
            .map(|i| i.reference)
    }
}

/// What the participant sees. Never includes provenance or the answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionView {
    pub question_id: String,
    pub kind: QuestionKind,
    pub image_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hard_label: Option<Emotion>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub soft_label: Option<SoftLabel>,
    /// Exp2 candidates `a` and `b`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub options: Option<[SoftLabel; 2]>,
    pub choices: Vec<String>,
    pub answered: usize,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum Next {
    Question(QuestionView),
    Done { state: SessionState },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ack {
    pub question_id: String,
    /// True when this exact answer had already been stored.
    pub duplicate: bool,
    pub state: SessionState,
}

// ---------------------------------------------------------------------------
// Events and store

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    StudyCreated {
        study_id: String,
        definition: StudyDefinition,
    },
    SessionStarted {
        session_id: String,
        study_id: String,
        participant_id: String,
    },
    AnswerSubmitted {
        session_id: String,
        question_id: String,
        choice: String,
        timestamp_ms: u64,
    },
}

/// Outcome of a command: either a new event to persist and apply, or nothing
/// to record (idempotent repeats).
#[derive(Debug, Clone, PartialEq)]
pub enum Decision<T> {
    Record(Event, T),
    Noop(T),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StudyStore {
    pub studies: IndexMap<String, StudyState>,
    pub sessions: IndexMap<String, Session>,
    pub events_applied: u64,
}

impl StudyStore {
    pub fn new() -> StudyStore {
        StudyStore::default()
    }

    /// Rebuilds a store from an event sequence.
    pub fn replay<'a>(events: impl IntoIterator<Item = &'a Event>) -> Result<StudyStore, StudyError> {
        let mut store = StudyStore::new();
        for e in events {
            store.apply(e)?;
        }
        Ok(store)
    }

    pub fn study(&self, study_id: &str) -> Result<&StudyState, StudyError> {
        self.studies
            .get(study_id)
            .ok_or_else(|| StudyError::UnknownStudy(study_id.to_string()))
    }

    pub fn session(&self, session_id: &str) -> Result<&Session, StudyError> {
        self.sessions
            .get(session_id)
            .ok_or_else(|| StudyError::UnknownSession(session_id.to_string()))
    }

    pub fn create_study(&self, definition: StudyDefinition) -> Result<(Event, String), StudyError> {
        // Scheduling here surfaces any error before the event is persisted.
        schedule(&definition)?;
        let study_id = format!("study-{}", self.studies.len() + 1);
        Ok((
            Event::StudyCreated {
                study_id: study_id.clone(),
                definition,
            },
            study_id,
        ))
    }

    /// Opens a session, or returns the participant's existing one.
    pub fn start_session(&self, study_id: &str, participant_id: &str) -> Result<Decision<String>, StudyError> {
        let study = self.study(study_id)?;
        if !study.definition.participants.iter().any(|p| p == participant_id) {
            return Err(StudyError::UnknownParticipant(participant_id.to_string()));
        }
        if let Some(existing) = study.sessions.get(participant_id) {
            return Ok(Decision::Noop(existing.clone()));
        }
        let session_id = format!("session-{}", self.sessions.len() + 1);
        Ok(Decision::Record(
            Event::SessionStarted {
                session_id: session_id.clone(),
                study_id: study_id.to_string(),
                participant_id: participant_id.to_string(),
            },
            session_id,
        ))
    }

    fn pending(&self, session: &Session) -> Option<String> {
        let study = &self.studies[&session.study_id];
        let list = match session.state {
            SessionState::Qualifying => &study.schedule.qualification[&session.participant_id],
            SessionState::Active => &study.schedule.queues[&session.participant_id],
            _ => return None,
        };
        list.iter().find(|q| !session.answers.contains_key(*q)).cloned()
    }

    pub fn next_question(&self, session_id: &str) -> Result<Next, StudyError> {
        let session = self.session(session_id)?;
        if session.state == SessionState::Disqualified {
            return Err(StudyError::Disqualified(session_id.to_string()));
        }
        let Some(qid) = self.pending(session) else {
            return Ok(Next::Done { state: session.state });
        };
        let study = &self.studies[&session.study_id];
        let q = &study.schedule.questions[&qid];
        let (list, choices): (&Vec<String>, Vec<String>) = match q.kind {
            QuestionKind::Qualification => (
                &study.schedule.qualification[&session.participant_id],
                crate::model::Emotion::ALL.iter().map(|e| e.name().to_string()).collect(),
            ),
            QuestionKind::Exp1 => (
                &study.schedule.queues[&session.participant_id],
                EXP1_CHOICES.map(String::from).to_vec(),
            ),
            QuestionKind::Exp2 => (
                &study.schedule.queues[&session.participant_id],
                EXP2_CHOICES.map(String::from).to_vec(),
            ),
        };
        let answered = list.iter().filter(|id| session.answers.contains_key(*id)).count();
        let image = study.image(&q.image_id);
        let mut view = QuestionView {
            question_id: qid.clone(),
            kind: q.kind,
            image_id: q.image_id.clone(),
            hard_label: None,
            soft_label: None,
            options: None,
            choices,
            answered,
            total: list.len(),
        };
        match q.kind {
            QuestionKind::Exp1 => {
                let img = image.expect("scheduled image in pool");
                view.hard_label = Some(img.hard_label);
                view.soft_label = Some(img.soft_label);
            }
            QuestionKind::Exp2 => {
                let img = image.expect("scheduled image in pool");
                let decoy = study.schedule.decoys[&q.image_id];
                let pick = |o: Exp2Option| match o {
                    Exp2Option::True => img.soft_label,
                    Exp2Option::Decoy => decoy,
                };
                let order = q.exp2_order.expect("exp2 order");
                view.options = Some([pick(order[0]), pick(order[1])]);
            }
            QuestionKind::Qualification => {}
        }
        Ok(Next::Question(view))
    }

    pub fn submit_answer(
        &self,
        session_id: &str,
        question_id: &str,
        choice: &str,
        timestamp_ms: u64,
    ) -> Result<Decision<Ack>, StudyError> {
        let session = self.session(session_id)?;
        if let Some(prev) = session.answers.get(question_id) {
            return if prev.choice == choice {
                Ok(Decision::Noop(Ack {
                    question_id: question_id.to_string(),
                    duplicate: true,
                    state: session.state,
                }))
            } else {
                Err(StudyError::ConflictingAnswer(question_id.to_string()))
            };
        }
        match session.state {
            SessionState::Complete => return Err(StudyError::SessionComplete(session_id.to_string())),
            SessionState::Disqualified => return Err(StudyError::Disqualified(session_id.to_string())),
            _ => {}
        }
        let pending = self.pending(session);
        if pending.as_deref() != Some(question_id) {
            return Err(StudyError::OutOfOrder {
                question_id: question_id.to_string(),
                pending: pending.unwrap_or_else(|| "none".into()),
            });
        }
        let study = &self.studies[&session.study_id];
        study.schedule.questions[question_id].validate_choice(choice)?;

        let event = Event::AnswerSubmitted {
            session_id: session_id.to_string(),
            question_id: question_id.to_string(),
            choice: choice.to_string(),
            timestamp_ms,
        };
        // Preview the resulting state for the acknowledgement.
        let mut preview = self.sessions[session_id].clone();
        preview.answers.insert(
            question_id.to_string(),
            Answer {
                choice: choice.to_string(),
                timestamp_ms,
            },
        );
        let state = advance(study, &mut preview);
        Ok(Decision::Record(
            event,
            Ack {
                question_id: question_id.to_string(),
                duplicate: false,
                state,
            },
        ))
    }

    /// Grades the qualification exam of a session.
    pub fn grade_qualification(&self, session_id: &str) -> Result<Grade, StudyError> {
        let session = self.session(session_id)?;
        let study = &self.studies[&session.study_id];
        grade_session(study, session)
    }

    pub fn apply(&mut self, event: &Event) -> Result<(), StudyError> {
        match event {
            Event::StudyCreated { study_id, definition } => {
                let schedule = schedule(definition)?;
                self.studies.insert(
                    study_id.clone(),
                    StudyState {
                        study_id: study_id.clone(),
                        definition: definition.clone(),
                        schedule,
                        sessions: IndexMap::new(),
                    },
                );
            }
            Event::SessionStarted {
                session_id,
                study_id,
                participant_id,
            } => {
                let study = self
                    .studies
                    .get_mut(study_id)
                    .ok_or_else(|| StudyError::UnknownStudy(study_id.clone()))?;
                study.sessions.insert(participant_id.clone(), session_id.clone());
                let mut session = Session {
                    session_id: session_id.clone(),
                    study_id: study_id.clone(),
                    participant_id: participant_id.clone(),
                    state: SessionState::Qualifying,
                    answers: IndexMap::new(),
                    qualification: None,
                };
                advance(study, &mut session);
                self.sessions.insert(session_id.clone(), session);
            }
            Event::AnswerSubmitted {
                session_id,
                question_id,
                choice,
                timestamp_ms,
            } => {
                let session = self
                    .sessions
                    .get_mut(session_id)
                    .ok_or_else(|| StudyError::UnknownSession(session_id.clone()))?;
                session.answers.insert(
                    question_id.clone(),
                    Answer {
                        choice: choice.clone(),
                        timestamp_ms: *timestamp_ms,
                    },
                );
                let study = &self.studies[&session.study_id];
                advance(study, session);
            }
        }
        self.events_applied += 1;
        Ok(())
    }
}

fn grade_session(study: &StudyState, session: &Session) -> Result<Grade, StudyError> {
    let exam = &study.schedule.qualification[&session.participant_id];
    let answered = exam.iter().filter(|q| session.answers.contains_key(*q)).count();
    if answered < exam.len() {
        return Err(StudyError::IncompleteQualification {
            answered,
            total: exam.len(),
        });
    }
    let correct = exam
        .iter()
        .filter(|qid| {
            let q = &study.schedule.questions[*qid];
            let chosen: Option<Emotion> = session.answers[*qid].choice.parse().ok();
            chosen.is_some() && chosen == study.reference(q)
        })
        .count();
    Ok(grade(correct, exam.len(), study.definition.qualification.pass_threshold))
}

/// Moves a session forward after its answers changed; returns the new state.
fn advance(study: &StudyState, session: &mut Session) -> SessionState {
    if session.state == SessionState::Qualifying {
        if let Ok(g) = grade_session(study, session) {
            session.qualification = (g.total > 0).then_some(g);
            session.state = if g.passed {
                SessionState::Active
            } else {
                SessionState::Disqualified
            };
        }
    }
    if session.state == SessionState::Active {
        let queue = &study.schedule.queues[&session.participant_id];
        if queue.iter().all(|q| session.answers.contains_key(q)) {
            session.state = SessionState::Complete;
        }
    }
    session.state
}

// ---------------------------------------------------------------------------
// Agreement analytics

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairAgreement {
    pub a: String,
    pub b: String,
    /// Percent; null when the pair has no jointly answered question.
    pub agreement: Option<f64>,
    pub shared: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementReport {
    pub kind: String,
    /// Percent of exp1 answers per option.
    pub exp1_rates: BTreeMap<String, Option<f64>>,
    pub exp1_answers: usize,
    /// Percent of exp2 answers choosing the true soft-label.
    pub exp2_accuracy: Option<f64>,
    pub exp2_answers: usize,
    pub exp2_accuracy_per_participant: IndexMap<String, Option<f64>>,
    /// Percent of answered self-repeat pairs with equal choices.
    pub self_agreement: IndexMap<String, Option<f64>>,
    pub pairwise_agreement: Vec<PairAgreement>,
    pub mean_self_agreement: Option<f64>,
    pub mean_pairwise_agreement: Option<f64>,
}

fn pct(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| 100.0 * num as f64 / den as f64)
}

fn mean(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let defined: Vec<f64> = values.flatten().collect();
    (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
}

/// Folds the answers of every session of `study` into agreement figures.
pub fn agreement_report(store: &StudyStore, study_id: &str) -> Result<AgreementReport, StudyError> {
    let study = store.study(study_id)?;
    let schedule = &study.schedule;
    // Every stored answer of the study, keyed by question id.
    let mut answers: HashMap<&str, &Answer> = HashMap::new();
    for session_id in study.sessions.values() {
        for (qid, a) in &store.sessions[session_id].answers {
            answers.insert(qid.as_str(), a);
        }
    }
    let semantic = |qid: &str| -> Option<String> {
        answers.get(qid).map(|a| schedule.questions[qid].semantic_choice(&a.choice))
    };

    let mut exp1_counts: BTreeMap<String, usize> = EXP1_CHOICES.iter().map(|c| (c.to_string(), 0)).collect();
    let mut exp1_total = 0;
    let mut exp2_total = 0;
    let mut exp2_correct = 0;
    let mut per_participant: IndexMap<String, (usize, usize)> =
        study.definition.participants.iter().map(|p| (p.clone(), (0, 0))).collect();
    let mut self_pairs: IndexMap<String, (usize, usize)> = per_participant.keys().map(|p| (p.clone(), (0, 0))).collect();
    let mut ring: BTreeMap<(String, String), (usize, usize)> = BTreeMap::new();
    for (a, b) in schedule.ring_edges() {
        ring.insert((a, b), (0, 0));
    }

    for q in schedule.questions.values() {
        let Some(choice) = semantic(&q.id) else { continue };
        match q.kind {
            QuestionKind::Exp1 => {
                exp1_total += 1;
                *exp1_counts.entry(choice.clone()).or_default() += 1;
            }
            QuestionKind::Exp2 => {
                exp2_total += 1;
                let entry = per_participant.entry(q.participant.clone()).or_default();
                entry.1 += 1;
                if choice == "true" {
                    exp2_correct += 1;
                    entry.0 += 1;
                }
            }
            QuestionKind::Qualification => continue,
        }
        let Some(origin) = &q.origin else { continue };
        let Some(original) = semantic(origin) else { continue };
        let same = usize::from(original == choice);
        match q.provenance {
            Provenance::SelfRepeat => {
                let e = self_pairs.entry(q.participant.clone()).or_default();
                e.0 += same;
                e.1 += 1;
            }
            Provenance::CircularRepeat => {
                let mut pair = [schedule.questions[origin].participant.clone(), q.participant.clone()];
                pair.sort();
                let [a, b] = pair;
                let e = ring.entry((a, b)).or_default();
                e.0 += same;
                e.1 += 1;
            }
            _ => {}
        }
    }

    let self_agreement: IndexMap<String, Option<f64>> =
        self_pairs.into_iter().map(|(p, (s, n))| (p, pct(s, n))).collect();
    let pairwise_agreement: Vec<PairAgreement> = ring
        .into_iter()
        .map(|((a, b), (s, n))| PairAgreement {
            a,
            b,
            agreement: pct(s, n),
            shared: n,
        })
        .collect();
    Ok(AgreementReport {
        kind: "agreement".into(),
        exp1_rates: exp1_counts.into_iter().map(|(k, v)| (k, pct(v, exp1_total))).collect(),
        exp1_answers: exp1_total,
        exp2_accuracy: pct(exp2_correct, exp2_total),
        exp2_answers: exp2_total,
        exp2_accuracy_per_participant: per_participant.into_iter().map(|(p, (c, n))| (p, pct(c, n))).collect(),
        mean_self_agreement: mean(self_agreement.values().copied()),
        mean_pairwise_agreement: mean(pairwise_agreement.iter().map(|p| p.agreement)),
        self_agreement,
        pairwise_agreement,
    })
}

struct Cell(Option<f64>);

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.0 {
            Some(v) => write!(f, "{v:.2}"),
            None => f.write_str("n/a"),
        }
    }
}

impl AgreementReport {
    pub fn to_markdown(&self) -> String {
        let mut out = String::from("### Experiment 1: preferred descriptor (%)\n\n| Option | Rate |\n|---|---|\n");
        for c in EXP1_CHOICES {
            out.push_str(&format!("| {c} | {} |\n", Cell(self.exp1_rates.get(c).copied().flatten())));
        }
        out.push_str(&format!("\nAnswers: {}\n", self.exp1_answers));

        out.push_str("\n### Experiment 2: soft-label identification accuracy (%)\n\n| Participant | Accuracy |\n|---|---|\n");
        for (p, v) in &self.exp2_accuracy_per_participant {
            out.push_str(&format!("| {p} | {} |\n", Cell(*v)));
        }
        out.push_str(&format!("| Overall | {} |\n", Cell(self.exp2_accuracy)));

        out.push_str("\n### Agreement (%)\n\nSelf-agreement per participant:\n\n| Participant | Self |\n|---|---|\n");
        for (p, v) in &self.self_agreement {
            out.push_str(&format!("| {p} | {} |\n", Cell(*v)));
        }
        out.push_str(&format!("| Mean | {} |\n", Cell(self.mean_self_agreement)));
        out.push_str("\nPairwise agreement between ring neighbours:\n\n| Pair | Agreement | Shared |\n|---|---|---|\n");
        for p in &self.pairwise_agreement {
            out.push_str(&format!("| {} / {} | {} | {} |\n", p.a, p.b, Cell(p.agreement), p.shared));
        }
        out.push_str(&format!("| Mean | {} | |\n", Cell(self.mean_pairwise_agreement)));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pool(n: usize) -> Vec<PoolImage> {
        (0..n)
            .map(|i| {
                let mut v = [0.05; 8];
                v[i % 8] = 0.9;
                PoolImage {
                    image_id: format!("img{i}"),
                    soft_label: SoftLabel::new(v).unwrap(),
                    hard_label: Emotion::ALL[i % 8],
                    decoy: None,
                }
            })
            .collect()
    }

    fn people(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("p{i}")).collect()
    }

    #[test]
    fn single_image_single_participant() {
        let def = StudyDefinition::new(pool(1), people(1)).with_repeats(0.0, 0.0);
        // One image has no decoy of a different emotion unless given.
        assert!(schedule(&def).is_err());
        let mut def = def;
        def.pool[0].decoy = Some(SoftLabel::new([0.5; 8]).unwrap());
        let s = schedule(&def).unwrap();
        assert_eq!(s.total(), 2);
        assert_eq!(s.load("p0"), 2);
    }

    #[test]
    fn ring_needs_three() {
        let def = StudyDefinition::new(pool(10), people(2));
        assert_eq!(schedule(&def), Err(StudyError::TooFewParticipants { needed: 3, have: 2 }));
    }

    #[test]
    fn fractions_must_add_up() {
        let mut def = StudyDefinition::new(pool(10), people(3));
        def.repeat_fraction = 0.5;
        assert!(matches!(schedule(&def), Err(StudyError::InvalidDefinition(_))));
    }

    #[test]
    fn grading_boundary() {
        assert!(grade(30, 40, 0.75).passed);
        assert!(!grade(29, 40, 0.75).passed);
        assert_eq!(grade(29, 40, 0.75).score, 0.725);
        assert_eq!(grade(40, 40, 0.75).score, 1.0);
    }

    #[test]
    fn decoys_differ_in_argmax() {
        let def = StudyDefinition::new(pool(40), people(3));
        let s = schedule(&def).unwrap();
        for img in &def.pool {
            assert_ne!(s.decoys[&img.image_id].argmax(), img.soft_label.argmax());
        }
    }
}
