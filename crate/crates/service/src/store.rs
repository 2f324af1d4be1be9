//! Append-only event log and the views materialized from it.
//!
//! Layout under the storage directory:
//!
//! ```text
//! events.jsonl   one {"seq", "at", "type", ...} object per line
//! ```

use std::collections::{BTreeMap, HashMap};
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use moodbridge_core::domain::{Advice, AdviceKind};
use moodbridge_core::{DiagnosticReport, Role, Turn};
use parking_lot::{Mutex, RwLock, RwLockReadGuard};
use serde::{Deserialize, Serialize};

use crate::model::{FeedbackEntry, ReviewRecord, ReviewState, Revision, Session};

pub const EVENTS_FILE: &str = "events.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Event {
    Login {
        account_id: String,
    },
    SessionOpened {
        session_id: String,
        account_id: String,
        patient_id: String,
        role: Role,
    },
    TurnAppended {
        session_id: String,
        turn: Turn,
    },
    ReplyFailed {
        session_id: String,
        reason: String,
    },
    SessionClosed {
        session_id: String,
        #[serde(default)]
        job_id: Option<String>,
    },
    DraftCreated {
        report: DiagnosticReport,
        patient_id: String,
        day: NaiveDate,
        partial_information: bool,
    },
    AdviceGenerated {
        advice: Advice,
    },
    ReportRevised {
        report_id: String,
        revision: Revision,
        report: DiagnosticReport,
        #[serde(default)]
        advice: Vec<Advice>,
    },
    ReportReleased {
        report_id: String,
        doctor_id: String,
    },
    FeedbackSubmitted {
        entry: FeedbackEntry,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoggedEvent {
    pub seq: u64,
    pub at: i64,
    #[serde(flatten)]
    pub event: Event,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRecord {
    pub report: DiagnosticReport,
    pub patient_id: String,
    pub day: NaiveDate,
    pub partial_information: bool,
    pub review: ReviewRecord,
    pub advice: Vec<Advice>,
}

impl ReportRecord {
    pub fn advice_for(&self, kind: AdviceKind) -> Option<&Advice> {
        self.advice.iter().find(|a| a.kind == kind)
    }
}

/// Materialized views. Only [`State::apply`] mutates them.
#[derive(Debug, Default)]
pub struct State {
    pub next_seq: u64,
    pub sessions: BTreeMap<String, Session>,
    pub reports: BTreeMap<String, ReportRecord>,
    pub feedback: Vec<FeedbackEntry>,
    pub last_login: HashMap<String, i64>,
}

impl State {
    pub fn apply(&mut self, e: &LoggedEvent) {
        self.next_seq = self.next_seq.max(e.seq + 1);
        match &e.event {
            Event::Login { account_id } => {
                self.last_login.insert(account_id.clone(), e.at);
            }
            Event::SessionOpened { session_id, account_id, patient_id, role } => {
                self.last_login.insert(account_id.clone(), e.at);
                self.sessions.insert(
                    session_id.clone(),
                    Session {
                        id: session_id.clone(),
                        account_id: account_id.clone(),
                        patient_id: patient_id.clone(),
                        role: *role,
                        started_at: e.at,
                        day: moodbridge_core::domain::day_of(e.at),
                        turns: Vec::new(),
                        closed: false,
                        job_id: None,
                        reply_failed: None,
                    },
                );
            }
            Event::TurnAppended { session_id, turn } => {
                if let Some(s) = self.sessions.get_mut(session_id) {
                    s.turns.push(turn.clone());
                    s.reply_failed = None;
                }
            }
            Event::ReplyFailed { session_id, reason } => {
                if let Some(s) = self.sessions.get_mut(session_id) {
                    s.reply_failed = Some(reason.clone());
                }
            }
            Event::SessionClosed { session_id, job_id } => {
                if let Some(s) = self.sessions.get_mut(session_id) {
                    s.closed = true;
                    s.job_id = job_id.clone();
                }
            }
            Event::DraftCreated { report, patient_id, day, partial_information } => {
                self.reports.insert(
                    report.id.clone(),
                    ReportRecord {
                        report: report.clone(),
                        patient_id: patient_id.clone(),
                        day: *day,
                        partial_information: *partial_information,
                        review: ReviewRecord {
                            report_id: report.id.clone(),
                            state: ReviewState::Draft,
                            revisions: Vec::new(),
                            released_at: None,
                            released_by: None,
                        },
                        advice: Vec::new(),
                    },
                );
            }
            Event::AdviceGenerated { advice } => {
                if let Some(r) = self.reports.get_mut(&advice.report_id) {
                    r.advice.retain(|a| a.kind != advice.kind);
                    r.advice.push(advice.clone());
                }
            }
            Event::ReportRevised { report_id, revision, report, advice } => {
                if let Some(r) = self.reports.get_mut(report_id) {
                    r.report = report.clone();
                    for a in advice {
                        r.advice.retain(|x| x.kind != a.kind);
                        r.advice.push(a.clone());
                    }
                    r.review.revisions.push(revision.clone());
                }
            }
            Event::ReportReleased { report_id, doctor_id } => {
                if let Some(r) = self.reports.get_mut(report_id) {
                    if let Ok(next) = r.review.state.transition(ReviewState::Released) {
                        r.review.state = next;
                        r.review.released_at = Some(e.at);
                        r.review.released_by = Some(doctor_id.clone());
                    }
                }
            }
            Event::FeedbackSubmitted { entry } => self.feedback.push(entry.clone()),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path} line {line}: {reason}")]
    Corrupt { path: PathBuf, line: usize, reason: String },
}

/// The event log plus its materialized state. Appends are serialized; the
/// state is updated only after the line reached the file.
pub struct Store {
    sink: Mutex<Option<(PathBuf, File)>>,
    state: RwLock<State>,
}

impl Store {
    pub fn in_memory() -> Self {
        Self { sink: Mutex::new(None), state: RwLock::new(State::default()) }
    }

    /// Opens (or creates) the log under `dir` and replays it. A torn final
    /// line from an interrupted write is dropped with a warning.
    pub fn open(dir: impl AsRef<Path>) -> Result<Self, StoreError> {
        let dir = dir.as_ref();
        let io = |source| StoreError::Io { path: dir.to_path_buf(), source };
        std::fs::create_dir_all(dir).map_err(io)?;
        let path = dir.join(EVENTS_FILE);
        let mut state = State::default();
        if path.exists() {
            let text = std::fs::read_to_string(&path).map_err(|source| StoreError::Io { path: path.clone(), source })?;
            let mut offset = 0;
            let mut torn_at = None;
            let lines: Vec<&str> = text.split_inclusive('\n').collect();
            for (i, raw) in lines.iter().enumerate() {
                let start = offset;
                offset += raw.len();
                let line = raw.trim();
                if line.is_empty() {
                    continue;
                }
                match serde_json::from_str::<LoggedEvent>(line) {
                    Ok(e) => state.apply(&e),
                    Err(err) if i + 1 == lines.len() && !raw.ends_with('\n') => {
                        log::warn!("{}: dropping torn final line: {err}", path.display());
                        torn_at = Some(start);
                    }
                    Err(err) => {
                        return Err(StoreError::Corrupt { path: path.clone(), line: i + 1, reason: err.to_string() })
                    }
                }
            }
            if let Some(len) = torn_at {
                let f = OpenOptions::new().write(true).open(&path).map_err(|source| StoreError::Io { path: path.clone(), source })?;
                f.set_len(len as u64).map_err(|source| StoreError::Io { path: path.clone(), source })?;
            }
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|source| StoreError::Io { path: path.clone(), source })?;
        Ok(Self { sink: Mutex::new(Some((path, file))), state: RwLock::new(state) })
    }

    pub fn commit(&self, at: i64, event: Event) -> Result<LoggedEvent, StoreError> {
        let mut sink = self.sink.lock();
        let logged = LoggedEvent { seq: self.state.read().next_seq, at, event };
        if let Some((path, file)) = sink.as_mut() {
            let mut line = serde_json::to_vec(&logged).expect("events serialize");
            line.push(b'\n');
            file.write_all(&line)
                .and_then(|_| file.flush())
                .map_err(|source| StoreError::Io { path: path.clone(), source })?;
        }
        self.state.write().apply(&logged);
        Ok(logged)
    }

    pub fn read(&self) -> RwLockReadGuard<'_, State> {
        self.state.read()
    }
}
