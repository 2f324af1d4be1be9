//! Service-side records and the views returned to clients.

use chrono::NaiveDate;
use moodbridge_core::domain::Advice;
use moodbridge_core::{BinaryClass, DiagnosticReport, Finding, Role, SeverityDegree, Turn};
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Account {
    pub id: String,
    pub role: Role,
    pub display_name: String,
    /// Patient: itself. Family: the linked patient. Doctor: assigned patients.
    pub patient_ids: Vec<String>,
}

impl Account {
    pub fn can_see(&self, patient_id: &str) -> bool {
        self.patient_ids.iter().any(|p| p == patient_id)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Session {
    pub id: String,
    pub account_id: String,
    pub patient_id: String,
    pub role: Role,
    pub started_at: i64,
    pub day: NaiveDate,
    pub turns: Vec<Turn>,
    pub closed: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub job_id: Option<String>,
    /// Set while the last user turn has no reply because the gateway failed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reply_failed: Option<String>,
}

impl Session {
    pub fn user_turns(&self) -> usize {
        self.turns.iter().filter(|t| t.speaker == moodbridge_core::Speaker::User).count()
    }

    /// The last turn, when it is a user turn still waiting for a reply.
    pub fn pending_user_turn(&self) -> Option<&Turn> {
        self.turns.last().filter(|t| t.speaker == moodbridge_core::Speaker::User)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReviewState {
    Draft,
    Released,
}

impl ReviewState {
    /// The only admitted transition is Draft to Released.
    pub fn transition(self, to: ReviewState) -> Result<ReviewState, (ReviewState, ReviewState)> {
        match (self, to) {
            (ReviewState::Draft, ReviewState::Released) => Ok(to),
            other => Err(other),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldEdit {
    pub field: String,
    pub before: Value,
    pub after: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Revision {
    pub doctor_id: String,
    pub at: i64,
    pub edits: Vec<FieldEdit>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewRecord {
    pub report_id: String,
    pub state: ReviewState,
    pub revisions: Vec<Revision>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub released_at: Option<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub released_by: Option<String>,
}

/// Field-level edits a doctor may apply to a draft. Absent fields are left
/// untouched.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportEdits {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub binary_class: Option<BinaryClass>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub severity_degree: Option<SeverityDegree>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subtype_category: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub findings: Option<Vec<Finding>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub narrative: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub treatment_strategy: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub care_advice: Option<String>,
}

impl ReportEdits {
    pub fn is_empty(&self) -> bool {
        *self == ReportEdits::default()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeedbackEntry {
    pub id: String,
    pub report_id: String,
    pub author_id: String,
    pub author_role: Role,
    pub text: String,
    pub created_at: i64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Status {
    pub binary_class: BinaryClass,
    pub severity_degree: SeverityDegree,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatientSummary {
    pub patient_id: String,
    pub display_name: String,
    pub last_login: Option<i64>,
    pub latest_status: Option<Status>,
}

/// A report as some requester may see it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportView {
    pub patient_id: String,
    pub day: NaiveDate,
    pub state: ReviewState,
    /// Family-only assessments lack the patient's own account.
    pub partial_information: bool,
    pub report: DiagnosticReport,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub advice: Vec<Advice>,
    /// Doctors only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub review: Option<ReviewRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TimelineEntry {
    Dialogue { day: NaiveDate, at: i64, session: Session },
    Report { day: NaiveDate, at: i64, view: Box<ReportView> },
    Advice { day: NaiveDate, at: i64, advice: Advice },
    Feedback { day: NaiveDate, at: i64, entry: FeedbackEntry },
}

impl TimelineEntry {
    pub fn sort_key(&self) -> (NaiveDate, i64, u8) {
        match self {
            TimelineEntry::Dialogue { day, at, .. } => (*day, *at, 0),
            TimelineEntry::Report { day, at, .. } => (*day, *at, 1),
            TimelineEntry::Advice { day, at, .. } => (*day, *at, 2),
            TimelineEntry::Feedback { day, at, .. } => (*day, *at, 3),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timeline {
    pub patient_id: String,
    pub entries: Vec<TimelineEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum JobStatus {
    Pending,
    Done { report_id: String },
    Failed { reason: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CloseOutcome {
    pub session_id: String,
    pub already_closed: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub job_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoginGrant {
    pub token: String,
    pub account_id: String,
    pub role: Role,
    pub display_name: String,
}
