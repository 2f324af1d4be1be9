//! Shared vocabulary: roles, dialogues, labels, severity banding and the
//! structured diagnostic report with its consistency rules.

use std::fmt;
use std::str::FromStr;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Highest HAMD total accepted (17-item scale maximum).
pub const HAMD_MAX: u8 = 52;

/// Literal used for `subtype_category` when no depression is present.
pub const NO_SUBTYPE: &str = "none";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DomainError {
    #[error("HAMD score {0} is outside 0..={HAMD_MAX}")]
    HamdOutOfRange(i64),
    #[error("unknown {kind} value `{value}`")]
    UnknownVariant { kind: &'static str, value: String },
    #[error("invalid dialogue {id}: {reason}")]
    InvalidDialogue { id: String, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Patient,
    Family,
    Doctor,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Patient => "patient",
            Role::Family => "family",
            Role::Doctor => "doctor",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Speaker {
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub speaker: Speaker,
    pub text: String,
    /// UTC seconds.
    pub at: i64,
}

impl Turn {
    pub fn user(text: impl Into<String>, at: i64) -> Self {
        Self { speaker: Speaker::User, text: text.into(), at }
    }

    pub fn assistant(text: impl Into<String>, at: i64) -> Self {
        Self { speaker: Speaker::Assistant, text: text.into(), at }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BinaryClass {
    Depressed,
    NotDepressed,
}

impl BinaryClass {
    pub fn as_str(self) -> &'static str {
        match self {
            BinaryClass::Depressed => "depressed",
            BinaryClass::NotDepressed => "not_depressed",
        }
    }
}

impl fmt::Display for BinaryClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BinaryClass {
    type Err = DomainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "depressed" => Ok(BinaryClass::Depressed),
            "not_depressed" => Ok(BinaryClass::NotDepressed),
            _ => Err(DomainError::UnknownVariant { kind: "binary_class", value: s.to_string() }),
        }
    }
}

/// Depression severity, ordered `Normal < Mild < Moderate < Severe`.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize,
)]
#[serde(rename_all = "snake_case")]
pub enum SeverityDegree {
    Normal,
    Mild,
    Moderate,
    Severe,
}

impl SeverityDegree {
    pub const ALL: [SeverityDegree; 4] = [
        SeverityDegree::Normal,
        SeverityDegree::Mild,
        SeverityDegree::Moderate,
        SeverityDegree::Severe,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SeverityDegree::Normal => "normal",
            SeverityDegree::Mild => "mild",
            SeverityDegree::Moderate => "moderate",
            SeverityDegree::Severe => "severe",
        }
    }
}

impl fmt::Display for SeverityDegree {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SeverityDegree {
    type Err = DomainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "normal" => Ok(SeverityDegree::Normal),
            "mild" => Ok(SeverityDegree::Mild),
            "moderate" => Ok(SeverityDegree::Moderate),
            "severe" => Ok(SeverityDegree::Severe),
            _ => Err(DomainError::UnknownVariant { kind: "severity_degree", value: s.to_string() }),
        }
    }
}

/// Maps a HAMD total onto the four severity bands.
pub fn band_hamd(score: i64) -> Result<SeverityDegree, DomainError> {
    match score {
        s if !(0..=i64::from(HAMD_MAX)).contains(&s) => Err(DomainError::HamdOutOfRange(s)),
        0..=6 => Ok(SeverityDegree::Normal),
        7..=16 => Ok(SeverityDegree::Mild),
        17..=23 => Ok(SeverityDegree::Moderate),
        _ => Ok(SeverityDegree::Severe),
    }
}

pub fn severity_to_binary(severity: SeverityDegree) -> BinaryClass {
    match severity {
        SeverityDegree::Normal => BinaryClass::NotDepressed,
        _ => BinaryClass::Depressed,
    }
}

/// Ground-truth annotation carried by a source record.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceLabel {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub binary: Option<BinaryClass>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub severity: Option<SeverityDegree>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hamd: Option<u8>,
}

impl SourceLabel {
    pub fn from_hamd(score: u8) -> Result<Self, DomainError> {
        let severity = band_hamd(i64::from(score))?;
        Ok(Self {
            binary: Some(severity_to_binary(severity)),
            severity: Some(severity),
            hamd: Some(score),
        })
    }

    /// Severity stated directly, or derived from the HAMD score.
    pub fn effective_severity(&self) -> Option<SeverityDegree> {
        self.severity
            .or_else(|| self.hamd.and_then(|h| band_hamd(i64::from(h)).ok()))
    }

    /// Binary class stated directly, or derived from severity / HAMD.
    pub fn effective_binary(&self) -> Option<BinaryClass> {
        self.binary.or_else(|| self.effective_severity().map(severity_to_binary))
    }

    pub fn is_empty(&self) -> bool {
        self.binary.is_none() && self.severity.is_none() && self.hamd.is_none()
    }

    /// Checks the HAMD/severity agreement rule.
    pub fn validate(&self) -> Result<(), String> {
        if let Some(h) = self.hamd {
            let banded = band_hamd(i64::from(h)).map_err(|e| e.to_string())?;
            if let Some(sev) = self.severity {
                if sev != banded {
                    return Err(format!("severity {sev} disagrees with HAMD {h} (band {banded})"));
                }
            }
        }
        if let (Some(b), Some(sev)) = (self.binary, self.effective_severity()) {
            if severity_to_binary(sev) != b {
                return Err(format!("binary {b} disagrees with severity {sev}"));
            }
        }
        Ok(())
    }

    /// The line a prior-knowledge prompt uses to state this label.
    pub fn prompt_literal(&self) -> String {
        let mut parts = Vec::new();
        if let Some(b) = self.effective_binary() {
            parts.push(format!("diagnosis={b}"));
        }
        if let Some(s) = self.effective_severity() {
            parts.push(format!("severity={s}"));
        }
        if let Some(h) = self.hamd {
            parts.push(format!("HAMD={h}"));
        }
        if parts.is_empty() {
            "unlabelled".to_string()
        } else {
            parts.join("; ")
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dialogue {
    pub id: String,
    pub subject_role: Role,
    pub turns: Vec<Turn>,
    pub day: NaiveDate,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<SourceLabel>,
}

/// Which speaker a dialogue may open with.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Opening {
    /// Clinical interviews and live chats.
    Any,
    /// Dialogues rewritten from posts open with the counselor greeting.
    AssistantFirst,
}

impl Dialogue {
    pub fn user_turn_count(&self) -> usize {
        self.turns.iter().filter(|t| t.speaker == Speaker::User).count()
    }

    /// Structural checks: subject role, non-blank turns, strict alternation,
    /// non-decreasing timestamps and the opening rule.
    pub fn validate(&self, opening: Opening) -> Result<(), DomainError> {
        let fail = |reason: String| DomainError::InvalidDialogue { id: self.id.clone(), reason };
        if self.id.trim().is_empty() {
            return Err(fail("empty id".into()));
        }
        if self.subject_role == Role::Doctor {
            return Err(fail("subject role must be patient or family".into()));
        }
        if let Some(label) = &self.label {
            label.validate().map_err(|r| fail(format!("label: {r}")))?;
        }
        if opening == Opening::AssistantFirst {
            if let Some(first) = self.turns.first() {
                if first.speaker != Speaker::Assistant {
                    return Err(fail("must open with the assistant".into()));
                }
            }
        }
        for (i, turn) in self.turns.iter().enumerate() {
            if turn.text.trim().is_empty() {
                return Err(fail(format!("turn {i} is blank")));
            }
            if i > 0 {
                let prev = &self.turns[i - 1];
                if prev.speaker == turn.speaker {
                    return Err(fail(format!("turns {} and {i} share a speaker", i - 1)));
                }
                if turn.at < prev.at {
                    return Err(fail(format!("turn {i} timestamp goes backwards")));
                }
            }
        }
        Ok(())
    }

    /// Copy without the label, used wherever priors must not travel.
    pub fn without_label(&self) -> Dialogue {
        Dialogue { label: None, ..self.clone() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeverityStandard {
    pub id: String,
    pub text: String,
}

impl SeverityStandard {
    /// Grading guidance following the HAMD bands.
    pub fn hamd_default() -> Self {
        Self {
            id: "hamd-bands".to_string(),
            text: "Severity is graded on the Hamilton Depression Rating Scale. \
                   A total below 7 is normal. A total from 7 to 16 indicates mild depression. \
                   A total from 17 to 23 indicates moderate depression. \
                   A total of 24 or above indicates severe depression. \
                   Without a score, weigh the number, persistence and functional impact of the symptoms in the same four bands."
                .to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Finding {
    pub symptom: String,
    pub evidence: String,
    pub criterion: String,
    pub agreement: bool,
}

/// The structured assistive diagnostic report.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiagnosticReport {
    #[serde(default)]
    pub id: String,
    #[serde(default)]
    pub dialogue_ids: Vec<String>,
    pub binary_class: BinaryClass,
    #[serde(rename = "severity_degree")]
    pub severity: SeverityDegree,
    pub findings: Vec<Finding>,
    pub subtype_category: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub narrative: Option<String>,
    #[serde(default)]
    pub created_at: i64,
}

impl DiagnosticReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report serialization is infallible")
    }

    /// Same report with finding evidence removed, for viewers who must not
    /// see verbatim quotes from another party's dialogue.
    pub fn redacted(&self) -> DiagnosticReport {
        let mut out = self.clone();
        for f in &mut out.findings {
            f.evidence.clear();
        }
        out
    }
}

/// One violated report invariant.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub field: String,
    pub message: String,
}

impl Violation {
    fn new(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self { field: field.into(), message: message.into() }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

/// Returns every violated invariant; an empty list means the report is valid.
pub fn validate_report(report: &DiagnosticReport) -> Vec<Violation> {
    let mut out = Vec::new();
    let depressed = report.binary_class == BinaryClass::Depressed;
    if severity_to_binary(report.severity) != report.binary_class {
        out.push(Violation::new("severity_degree", "binary/severity mismatch"));
    }
    let subtype = report.subtype_category.trim();
    if depressed {
        if subtype.is_empty() || subtype.eq_ignore_ascii_case(NO_SUBTYPE) {
            out.push(Violation::new("subtype_category", "subtype required when depressed"));
        }
        if report.findings.is_empty() {
            out.push(Violation::new("findings", "findings required when depressed"));
        }
    } else if subtype != NO_SUBTYPE {
        out.push(Violation::new("subtype_category", "subtype must be none"));
    }
    for (i, f) in report.findings.iter().enumerate() {
        if f.symptom.trim().is_empty() {
            out.push(Violation::new(format!("findings[{i}].symptom"), "empty symptom"));
        }
        if f.criterion.trim().is_empty() {
            out.push(Violation::new(format!("findings[{i}].criterion"), "empty criterion"));
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdviceKind {
    TreatmentStrategy,
    CareAdvice,
}

impl AdviceKind {
    pub fn for_audience(role: Role) -> Option<AdviceKind> {
        match role {
            Role::Patient => Some(AdviceKind::TreatmentStrategy),
            Role::Family => Some(AdviceKind::CareAdvice),
            Role::Doctor => None,
        }
    }

    pub fn audience(self) -> Role {
        match self {
            AdviceKind::TreatmentStrategy => Role::Patient,
            AdviceKind::CareAdvice => Role::Family,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Advice {
    pub kind: AdviceKind,
    pub report_id: String,
    pub text: String,
}

/// Inclusive calendar-date range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DateWindow {
    pub from: NaiveDate,
    pub to: NaiveDate,
}

impl DateWindow {
    pub fn new(from: NaiveDate, to: NaiveDate) -> Option<Self> {
        (from <= to).then_some(Self { from, to })
    }

    /// The calendar month containing `day`.
    pub fn month_of(day: NaiveDate) -> Self {
        use chrono::Datelike;
        let from = day.with_day(1).expect("day 1 exists");
        let next = if from.month() == 12 {
            NaiveDate::from_ymd_opt(from.year() + 1, 1, 1)
        } else {
            NaiveDate::from_ymd_opt(from.year(), from.month() + 1, 1)
        }
        .expect("valid month start");
        Self { from, to: next.pred_opt().expect("month end") }
    }

    pub fn contains(&self, day: NaiveDate) -> bool {
        self.from <= day && day <= self.to
    }

    pub fn days(&self) -> impl Iterator<Item = NaiveDate> {
        let to = self.to;
        self.from.iter_days().take_while(move |d| *d <= to)
    }

    pub fn len(&self) -> usize {
        (self.to - self.from).num_days() as usize + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Source of UTC-second timestamps.
pub trait Clock: Send + Sync {
    fn now(&self) -> i64;
}

#[derive(Debug, Default, Clone, Copy)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> i64 {
        chrono::Utc::now().timestamp()
    }
}

/// Clock pinned to one instant, for deterministic runs.
#[derive(Debug, Clone, Copy)]
pub struct FixedClock(pub i64);

impl Clock for FixedClock {
    fn now(&self) -> i64 {
        self.0
    }
}

pub fn day_of(ts: i64) -> NaiveDate {
    chrono::DateTime::from_timestamp(ts, 0)
        .map(|dt| dt.date_naive())
        .unwrap_or_default()
}
