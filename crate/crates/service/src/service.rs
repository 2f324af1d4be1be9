//! Role-aware assessment service: chat sessions, draft generation, doctor
//! review and release, timelines, feedback and cyclical summaries.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use chrono::NaiveDate;
use moodbridge_core::domain::{validate_report, Advice, AdviceKind, Clock, DateWindow};
use moodbridge_core::gateway::{complete_chat, ChatMessage, CompletionParams};
use moodbridge_core::pipeline::{
    report_id_for, AverageMode, CyclicalSummary, DatedReport, PipelineConfig, ReportPipeline, SessionActivity,
    SingleFlight,
};
use moodbridge_core::{DiagnosticReport, Dialogue, Role, Speaker, Turn};
use parking_lot::{Mutex, RwLock};
use rand::Rng;
use serde::Serialize;
use tokio::sync::{watch, OwnedMutexGuard};

use crate::config::{ConfigError, ServiceConfig};
use crate::error::ServiceError;
use crate::model::{
    Account, CloseOutcome, FeedbackEntry, FieldEdit, JobStatus, LoginGrant, PatientSummary, ReportEdits, ReportView,
    ReviewRecord, ReviewState, Revision, Session, Status, Timeline, TimelineEntry,
};
use crate::store::{Event, ReportRecord, State, Store};

pub type Result<T, E = ServiceError> = std::result::Result<T, E>;

/// Longest window accepted by [`AssessmentService::cyclical`].
pub const MAX_WINDOW_DAYS: usize = 366;

/// Counterpart text shorter than this is not scrubbed from shared views.
const MIN_SCRUB_CHARS: usize = 8;
const WITHHELD: &str = "[withheld]";

#[derive(Default)]
struct KeyedLocks(Mutex<HashMap<String, Arc<tokio::sync::Mutex<()>>>>);

impl KeyedLocks {
    async fn lock(&self, key: &str) -> OwnedMutexGuard<()> {
        let m = self.0.lock().entry(key.to_string()).or_default().clone();
        m.lock_owned().await
    }
}

struct DraftPlan {
    patient_id: String,
    day: NaiveDate,
    patient: Option<Dialogue>,
    family: Option<Dialogue>,
    report_id: String,
    job_id: String,
}

type JobKey = (String, NaiveDate, String);

#[derive(Debug, Clone, Default)]
pub struct ServiceOptions {
    pub pipeline_config: Option<PipelineConfig>,
    pub chat_params: CompletionParams,
}

pub struct AssessmentService {
    accounts: BTreeMap<String, Account>,
    passwords: HashMap<String, String>,
    tokens: RwLock<HashMap<String, String>>,
    store: Store,
    pipeline: Arc<ReportPipeline>,
    pipeline_config: PipelineConfig,
    chat_params: CompletionParams,
    clock: Arc<dyn Clock>,
    locks: KeyedLocks,
    flight: SingleFlight<JobKey, Result<String, String>>,
    jobs: Mutex<HashMap<String, watch::Receiver<JobStatus>>>,
}

fn random_id(prefix: &str) -> String {
    let n: u64 = rand::thread_rng().gen();
    format!("{prefix}-{n:016x}")
}

impl AssessmentService {
    pub fn new(
        accounts: Vec<(Account, String)>,
        store: Store,
        pipeline: Arc<ReportPipeline>,
        clock: Arc<dyn Clock>,
        options: ServiceOptions,
    ) -> Arc<Self> {
        let pipeline_config = options.pipeline_config.unwrap_or_else(|| pipeline.default_config());
        let passwords = accounts.iter().map(|(a, p)| (a.id.clone(), p.clone())).collect();
        Arc::new(Self {
            accounts: accounts.into_iter().map(|(a, _)| (a.id.clone(), a)).collect(),
            passwords,
            tokens: RwLock::new(HashMap::new()),
            store,
            pipeline,
            pipeline_config,
            chat_params: options.chat_params,
            clock,
            locks: KeyedLocks::default(),
            flight: SingleFlight::new(),
            jobs: Mutex::new(HashMap::new()),
        })
    }

    /// Builds the service from its configuration, opening the event log in
    /// the storage directory.
    pub fn from_config(cfg: &ServiceConfig, clock: Arc<dyn Clock>) -> Result<Arc<Self>, ConfigError> {
        let pipeline = cfg.build_pipeline(clock.clone())?;
        let options =
            ServiceOptions { pipeline_config: Some(cfg.pipeline_config(&pipeline)), chat_params: cfg.chat_params() };
        let store = Store::open(&cfg.storage_dir).map_err(|e| ConfigError::Component(e.to_string()))?;
        let accounts = cfg
            .accounts
            .iter()
            .map(|a| {
                let patient_ids = if a.role == Role::Patient { vec![a.id.clone()] } else { a.patients.clone() };
                let account = Account {
                    id: a.id.clone(),
                    role: a.role,
                    display_name: a.display_name.clone().unwrap_or_else(|| a.id.clone()),
                    patient_ids,
                };
                (account, a.password.clone())
            })
            .collect();
        Ok(Self::new(accounts, store, Arc::new(pipeline), clock, options))
    }

    pub fn pipeline(&self) -> &ReportPipeline {
        &self.pipeline
    }

    pub fn account(&self, id: &str) -> Option<&Account> {
        self.accounts.get(id)
    }

    fn now(&self) -> i64 {
        self.clock.now()
    }

    async fn commit_for(&self, patient_id: &str, event: Event) -> Result<()> {
        let _guard = self.locks.lock(patient_id).await;
        self.store.commit(self.now(), event)?;
        Ok(())
    }

    pub async fn login(&self, account_id: &str, password: &str) -> Result<LoginGrant> {
        let account = self.accounts.get(account_id).ok_or(ServiceError::BadCredentials)?;
        if self.passwords.get(account_id).map(String::as_str) != Some(password) {
            return Err(ServiceError::BadCredentials);
        }
        let token = {
            let bytes: [u8; 32] = rand::thread_rng().gen();
            bytes.iter().map(|b| format!("{b:02x}")).collect::<String>()
        };
        self.tokens.write().insert(token.clone(), account.id.clone());
        if account.role == Role::Patient {
            self.commit_for(&account.id, Event::Login { account_id: account.id.clone() }).await?;
        }
        Ok(LoginGrant {
            token,
            account_id: account.id.clone(),
            role: account.role,
            display_name: account.display_name.clone(),
        })
    }

    pub fn authenticate(&self, token: &str) -> Result<Account> {
        let id = self.tokens.read().get(token).cloned().ok_or(ServiceError::Unauthenticated)?;
        self.accounts.get(&id).cloned().ok_or(ServiceError::Unauthenticated)
    }

    fn chat_patient(account: &Account) -> Result<String> {
        match account.role {
            Role::Doctor => Err(ServiceError::Role("doctors do not hold chat sessions".into())),
            _ => account
                .patient_ids
                .first()
                .cloned()
                .ok_or_else(|| ServiceError::Forbidden("account is not linked to a patient".into())),
        }
    }

    pub async fn open_session(&self, account: &Account) -> Result<Session> {
        let patient_id = Self::chat_patient(account)?;
        let session_id = random_id("ses");
        self.commit_for(
            &patient_id,
            Event::SessionOpened {
                session_id: session_id.clone(),
                account_id: account.id.clone(),
                patient_id: patient_id.clone(),
                role: account.role,
            },
        )
        .await?;
        Ok(self.store.read().sessions[&session_id].clone())
    }

    /// Sessions are visible to their owner and to the patient's doctors.
    pub fn get_session(&self, account: &Account, session_id: &str) -> Result<Session> {
        let state = self.store.read();
        let s = state.sessions.get(session_id).ok_or_else(|| ServiceError::not_found("session", session_id))?;
        let visible = s.account_id == account.id || (account.role == Role::Doctor && account.can_see(&s.patient_id));
        if !visible {
            return Err(ServiceError::not_found("session", session_id));
        }
        Ok(s.clone())
    }

    fn owned_session(&self, account: &Account, session_id: &str) -> Result<Session> {
        let state = self.store.read();
        match state.sessions.get(session_id) {
            Some(s) if s.account_id == account.id => Ok(s.clone()),
            _ => Err(ServiceError::not_found("session", session_id)),
        }
    }

    fn chat_history(&self, session: &Session) -> Result<Vec<ChatMessage>> {
        let persona = self
            .pipeline
            .forge()
            .build_counselor_persona(session.role)
            .map_err(|e| ServiceError::Invalid(e.to_string()))?;
        let mut messages = vec![ChatMessage::system(persona.rendered)];
        messages.extend(session.turns.iter().map(|t| match t.speaker {
            Speaker::User => ChatMessage::user(t.text.clone()),
            Speaker::Assistant => ChatMessage::assistant(t.text.clone()),
        }));
        Ok(messages)
    }

    /// Appends the user's turn and returns the counselor's reply. When the
    /// gateway fails the user turn stays and the same text may be posted
    /// again to retry without duplicating it.
    pub async fn post_turn(&self, account: &Account, session_id: &str, text: &str) -> Result<Turn> {
        let text = text.trim();
        if text.is_empty() {
            return Err(ServiceError::Invalid("turn text is empty".into()));
        }
        let _session_guard = self.locks.lock(&format!("session:{session_id}")).await;
        let session = self.owned_session(account, session_id)?;
        if session.closed {
            return Err(ServiceError::conflict("session_closed", "session is closed"));
        }
        match session.pending_user_turn() {
            Some(t) if t.text == text => {}
            Some(_) => {
                return Err(ServiceError::conflict(
                    "reply_pending",
                    "the previous message has no reply yet; post it again to retry",
                ))
            }
            None => {
                let turn = Turn::user(text, self.now());
                self.commit_for(&session.patient_id, Event::TurnAppended { session_id: session_id.into(), turn })
                    .await?;
            }
        }
        let session = self.owned_session(account, session_id)?;
        let messages = self.chat_history(&session)?;
        let reply = complete_chat(self.pipeline.chat().as_ref(), &messages, &self.chat_params)
            .await
            .map_err(|e| (e.to_string(), e.is_retryable()))
            .and_then(|r| {
                let r = r.trim().to_string();
                if r.is_empty() {
                    Err(("empty reply".to_string(), true))
                } else {
                    Ok(r)
                }
            });
        match reply {
            Ok(text) => {
                let turn = Turn::assistant(text, self.now());
                self.commit_for(
                    &session.patient_id,
                    Event::TurnAppended { session_id: session_id.into(), turn: turn.clone() },
                )
                .await?;
                Ok(turn)
            }
            Err((message, _)) => {
                self.commit_for(
                    &session.patient_id,
                    Event::ReplyFailed { session_id: session_id.into(), reason: message.clone() },
                )
                .await?;
                Err(ServiceError::Gateway { message, retryable: true })
            }
        }
    }

    fn dialogue_of(session: &Session) -> Dialogue {
        Dialogue {
            id: session.id.clone(),
            subject_role: session.role,
            turns: session.turns.clone(),
            day: session.day,
            label: None,
        }
    }

    /// The closing session plus the latest same-day closed session of the
    /// other role, if any.
    fn plan_draft(state: &State, closing: &Session) -> DraftPlan {
        let other = if closing.role == Role::Patient { Role::Family } else { Role::Patient };
        let counterpart = state
            .sessions
            .values()
            .filter(|s| {
                s.patient_id == closing.patient_id
                    && s.role == other
                    && s.day == closing.day
                    && s.closed
                    && s.user_turns() > 0
            })
            .max_by_key(|s| (s.started_at, s.id.clone()));
        let (patient, family) = match closing.role {
            Role::Patient => (Some(closing), counterpart),
            _ => (counterpart, Some(closing)),
        };
        let ids: Vec<String> = patient.iter().chain(family.iter()).map(|s| s.id.clone()).collect();
        let report_id = report_id_for(&ids);
        DraftPlan {
            patient_id: closing.patient_id.clone(),
            day: closing.day,
            patient: patient.map(Self::dialogue_of),
            family: family.map(Self::dialogue_of),
            job_id: format!("job-{}", report_id.trim_start_matches("rpt-")),
            report_id,
        }
    }

    /// Closes the session and starts a draft job when it carried user turns.
    /// Closing twice is a no-op that returns the original job id.
    pub async fn close_session(self: &Arc<Self>, account: &Account, session_id: &str) -> Result<CloseOutcome> {
        let _session_guard = self.locks.lock(&format!("session:{session_id}")).await;
        let session = self.owned_session(account, session_id)?;
        let plan = {
            let _guard = self.locks.lock(&session.patient_id).await;
            let session = self.owned_session(account, session_id)?;
            if session.closed {
                return Ok(CloseOutcome { session_id: session.id, already_closed: true, job_id: session.job_id });
            }
            let plan = (session.user_turns() > 0).then(|| Self::plan_draft(&self.store.read(), &session));
            self.store.commit(
                self.now(),
                Event::SessionClosed { session_id: session.id.clone(), job_id: plan.as_ref().map(|p| p.job_id.clone()) },
            )?;
            plan
        };
        let job_id = plan.as_ref().map(|p| p.job_id.clone());
        if let Some(plan) = plan {
            self.spawn_job(plan);
        }
        Ok(CloseOutcome { session_id: session.id, already_closed: false, job_id })
    }

    fn spawn_job(self: &Arc<Self>, plan: DraftPlan) {
        let (tx, rx) = watch::channel(JobStatus::Pending);
        self.jobs.lock().insert(plan.job_id.clone(), rx);
        let this = Arc::clone(self);
        tokio::spawn(async move {
            let key = (plan.patient_id.clone(), plan.day, plan.report_id.clone());
            let job = Arc::clone(&this).run_draft(plan);
            let (result, _joined) = this.flight.run(key, job).await;
            let status = match result {
                Ok(report_id) => JobStatus::Done { report_id },
                Err(reason) => {
                    log::warn!("draft job failed: {reason}");
                    JobStatus::Failed { reason }
                }
            };
            let _ = tx.send(status);
        });
    }

    async fn run_draft(self: Arc<Self>, plan: DraftPlan) -> Result<String, String> {
        if self.store.read().reports.contains_key(&plan.report_id) {
            return Ok(plan.report_id);
        }
        let report = self
            .pipeline
            .generate_report(plan.patient.as_ref(), plan.family.as_ref(), &self.pipeline_config)
            .await
            .map_err(|e| e.to_string())?;
        let mut advice = Vec::new();
        for audience in [Role::Patient, Role::Family] {
            match self.pipeline.generate_advice(&report, audience).await {
                Ok(a) => advice.push(a),
                Err(e) => log::warn!("advice for {} on {}: {e}", audience.as_str(), report.id),
            }
        }
        let _guard = self.locks.lock(&plan.patient_id).await;
        if self.store.read().reports.contains_key(&report.id) {
            return Ok(report.id);
        }
        let now = self.now();
        let report_id = report.id.clone();
        let created = Event::DraftCreated {
            report,
            patient_id: plan.patient_id.clone(),
            day: plan.day,
            partial_information: plan.patient.is_none(),
        };
        self.store.commit(now, created).map_err(|e| e.to_string())?;
        for a in advice {
            self.store.commit(now, Event::AdviceGenerated { advice: a }).map_err(|e| e.to_string())?;
        }
        Ok(report_id)
    }

    pub fn job_status(&self, job_id: &str) -> Result<JobStatus> {
        let jobs = self.jobs.lock();
        let rx = jobs.get(job_id).ok_or_else(|| ServiceError::not_found("job", job_id))?;
        let status = rx.borrow().clone();
        Ok(status)
    }

    /// Waits until the job leaves the pending state.
    pub async fn wait_job(&self, job_id: &str) -> Result<JobStatus> {
        let mut rx = self.jobs.lock().get(job_id).cloned().ok_or_else(|| ServiceError::not_found("job", job_id))?;
        let status = rx
            .wait_for(|s| *s != JobStatus::Pending)
            .await
            .map(|s| s.clone())
            .unwrap_or_else(|_| JobStatus::Failed { reason: "job dropped".into() });
        Ok(status)
    }

    fn require_doctor_for(&self, account: &Account, report_id: &str) -> Result<String> {
        if account.role != Role::Doctor {
            return Err(ServiceError::Role("only doctors review reports".into()));
        }
        let patient_id = self
            .store
            .read()
            .reports
            .get(report_id)
            .map(|r| r.patient_id.clone())
            .ok_or_else(|| ServiceError::not_found("report", report_id))?;
        if !account.can_see(&patient_id) {
            return Err(ServiceError::Forbidden("doctor is not assigned to this patient".into()));
        }
        Ok(patient_id)
    }

    /// Applies field-level edits to a draft. The edited report must still pass
    /// validation; otherwise nothing is recorded.
    pub async fn revise_report(&self, account: &Account, report_id: &str, edits: &ReportEdits) -> Result<ReviewRecord> {
        let patient_id = self.require_doctor_for(account, report_id)?;
        if edits.is_empty() {
            return Err(ServiceError::Invalid("no edits given".into()));
        }
        let _guard = self.locks.lock(&patient_id).await;
        let rec = self.store.read().reports[report_id].clone();
        if rec.review.state == ReviewState::Released {
            return Err(ServiceError::conflict("report_released", "released reports are final"));
        }
        let (report, advice, changes) = apply_edits(&rec, edits)?;
        let violations = validate_report(&report);
        if !violations.is_empty() {
            return Err(ServiceError::Validation(violations));
        }
        if changes.is_empty() {
            return Ok(rec.review);
        }
        let revision = Revision { doctor_id: account.id.clone(), at: self.now(), edits: changes };
        self.store.commit(revision.at, Event::ReportRevised { report_id: report_id.into(), revision, report, advice })?;
        Ok(self.store.read().reports[report_id].review.clone())
    }

    /// Releases a draft. Releasing again returns the existing record.
    pub async fn release_report(&self, account: &Account, report_id: &str) -> Result<ReviewRecord> {
        let patient_id = self.require_doctor_for(account, report_id)?;
        let _guard = self.locks.lock(&patient_id).await;
        let rec = self.store.read().reports[report_id].clone();
        if rec.review.state == ReviewState::Released {
            return Ok(rec.review);
        }
        let violations = validate_report(&rec.report);
        if !violations.is_empty() {
            return Err(ServiceError::Validation(violations));
        }
        self.store.commit(
            self.now(),
            Event::ReportReleased { report_id: report_id.into(), doctor_id: account.id.clone() },
        )?;
        Ok(self.store.read().reports[report_id].review.clone())
    }

    /// User-turn text from the report's dialogues that the requester did not
    /// author, for scrubbing shared views.
    fn counterpart_text(state: &State, rec: &ReportRecord, viewer: Role) -> Vec<String> {
        let mut out: Vec<String> = rec
            .report
            .dialogue_ids
            .iter()
            .filter_map(|id| state.sessions.get(id))
            .filter(|s| s.role != viewer)
            .flat_map(|s| s.turns.iter().filter(|t| t.speaker == Speaker::User))
            .flat_map(|t| {
                let sentences = t.text.split_inclusive(['.', '!', '?', '\n']).map(|s| s.trim().to_string());
                std::iter::once(t.text.trim().to_string()).chain(sentences)
            })
            .filter(|s| s.chars().count() >= MIN_SCRUB_CHARS)
            .collect();
        out.sort_by_key(|s| std::cmp::Reverse(s.len()));
        out.dedup();
        out
    }

    fn view_of(state: &State, rec: &ReportRecord, viewer: &Account, with_advice: bool) -> Option<ReportView> {
        if viewer.role == Role::Doctor {
            return Some(ReportView {
                patient_id: rec.patient_id.clone(),
                day: rec.day,
                state: rec.review.state,
                partial_information: rec.partial_information,
                report: rec.report.clone(),
                advice: if with_advice { rec.advice.clone() } else { Vec::new() },
                review: Some(rec.review.clone()),
            });
        }
        if rec.review.state != ReviewState::Released {
            return None;
        }
        let secrets = Self::counterpart_text(state, rec, viewer.role);
        let mut report = rec.report.redacted();
        report.narrative = report.narrative.map(|n| scrub(&n, &secrets));
        for f in &mut report.findings {
            f.symptom = scrub(&f.symptom, &secrets);
            f.criterion = scrub(&f.criterion, &secrets);
        }
        let advice = match (with_advice, AdviceKind::for_audience(viewer.role)) {
            (true, Some(kind)) => rec
                .advice_for(kind)
                .map(|a| Advice { text: scrub(&a.text, &secrets), ..a.clone() })
                .into_iter()
                .collect(),
            _ => Vec::new(),
        };
        Some(ReportView {
            patient_id: rec.patient_id.clone(),
            day: rec.day,
            state: rec.review.state,
            partial_information: rec.partial_information,
            report,
            advice,
            review: None,
        })
    }

    pub fn get_report(&self, account: &Account, report_id: &str) -> Result<ReportView> {
        let state = self.store.read();
        state
            .reports
            .get(report_id)
            .filter(|r| account.can_see(&r.patient_id))
            .and_then(|r| Self::view_of(&state, r, account, true))
            .ok_or_else(|| ServiceError::not_found("report", report_id))
    }

    /// Entries the requester may see. Doctors see everything for assigned
    /// patients; patients and family see their own dialogues, released
    /// reports and the advice addressed to them.
    pub fn get_timeline(&self, account: &Account, patient_id: &str) -> Result<Timeline> {
        if !account.can_see(patient_id) {
            return Err(ServiceError::Forbidden("not authorized for this patient".into()));
        }
        let state = self.store.read();
        let mut entries = Vec::new();
        for s in state.sessions.values().filter(|s| s.patient_id == patient_id) {
            let own = match account.role {
                Role::Doctor => true,
                Role::Patient => s.role == Role::Patient,
                Role::Family => s.account_id == account.id,
            };
            if own {
                entries.push(TimelineEntry::Dialogue { day: s.day, at: s.started_at, session: s.clone() });
            }
        }
        let own_kind = AdviceKind::for_audience(account.role);
        for rec in state.reports.values().filter(|r| r.patient_id == patient_id) {
            let Some(view) = Self::view_of(&state, rec, account, false) else { continue };
            let at = match account.role {
                Role::Doctor => rec.report.created_at,
                _ => rec.review.released_at.unwrap_or(rec.report.created_at),
            };
            entries.push(TimelineEntry::Report { day: rec.day, at, view: Box::new(view) });
            let secrets = if account.role == Role::Doctor {
                Vec::new()
            } else {
                Self::counterpart_text(&state, rec, account.role)
            };
            for a in &rec.advice {
                if account.role == Role::Doctor || Some(a.kind) == own_kind {
                    let advice = Advice { text: scrub(&a.text, &secrets), ..a.clone() };
                    entries.push(TimelineEntry::Advice { day: rec.day, at, advice });
                }
            }
            if account.role == Role::Doctor {
                for f in state.feedback.iter().filter(|f| f.report_id == rec.report.id) {
                    entries.push(TimelineEntry::Feedback { day: rec.day, at: f.created_at, entry: f.clone() });
                }
            }
        }
        entries.sort_by_key(TimelineEntry::sort_key);
        Ok(Timeline { patient_id: patient_id.to_string(), entries })
    }

    /// One summary per assigned patient, most recent login first.
    pub fn list_patients(&self, account: &Account) -> Result<Vec<PatientSummary>> {
        if account.role != Role::Doctor {
            return Err(ServiceError::Role("only doctors list patients".into()));
        }
        let state = self.store.read();
        let mut out: Vec<PatientSummary> = account
            .patient_ids
            .iter()
            .map(|pid| {
                let latest = state
                    .reports
                    .values()
                    .filter(|r| &r.patient_id == pid && r.review.state == ReviewState::Released)
                    .max_by_key(|r| (r.day, r.review.released_at, r.report.id.clone()));
                PatientSummary {
                    patient_id: pid.clone(),
                    display_name: self.accounts.get(pid).map(|a| a.display_name.clone()).unwrap_or_else(|| pid.clone()),
                    last_login: state.last_login.get(pid).copied(),
                    latest_status: latest.map(|r| Status {
                        binary_class: r.report.binary_class,
                        severity_degree: r.report.severity,
                    }),
                }
            })
            .collect();
        out.sort_by(|a, b| b.last_login.cmp(&a.last_login).then_with(|| a.patient_id.cmp(&b.patient_id)));
        Ok(out)
    }

    pub async fn submit_feedback(&self, account: &Account, report_id: &str, text: &str) -> Result<FeedbackEntry> {
        if account.role == Role::Doctor {
            return Err(ServiceError::Role("feedback comes from patients and family".into()));
        }
        let text = text.trim();
        if text.is_empty() {
            return Err(ServiceError::Invalid("feedback text is empty".into()));
        }
        let (patient_id, state) = {
            let s = self.store.read();
            let r = s
                .reports
                .get(report_id)
                .filter(|r| account.can_see(&r.patient_id))
                .ok_or_else(|| ServiceError::not_found("report", report_id))?;
            (r.patient_id.clone(), r.review.state)
        };
        if state != ReviewState::Released {
            return Err(ServiceError::conflict("report_not_released", "feedback needs a released report"));
        }
        let entry = FeedbackEntry {
            id: random_id("fb"),
            report_id: report_id.to_string(),
            author_id: account.id.clone(),
            author_role: account.role,
            text: text.to_string(),
            created_at: self.now(),
        };
        self.commit_for(&patient_id, Event::FeedbackSubmitted { entry: entry.clone() }).await?;
        Ok(entry)
    }

    /// Windowed summary over released reports and the patient's own sessions.
    pub async fn cyclical(
        &self,
        account: &Account,
        patient_id: &str,
        from: NaiveDate,
        to: NaiveDate,
    ) -> Result<CyclicalSummary> {
        if !account.can_see(patient_id) {
            return Err(ServiceError::Forbidden("not authorized for this patient".into()));
        }
        let window = DateWindow::new(from, to).ok_or_else(|| ServiceError::Invalid("`from` is after `to`".into()))?;
        if window.len() > MAX_WINDOW_DAYS {
            return Err(ServiceError::Invalid(format!("window exceeds {MAX_WINDOW_DAYS} days")));
        }
        let (reports, sessions) = {
            let state = self.store.read();
            let reports: Vec<DatedReport> = state
                .reports
                .values()
                .filter(|r| r.patient_id == patient_id)
                .filter_map(|r| {
                    r.review.released_at.map(|released_at| DatedReport {
                        day: r.day,
                        released_at,
                        report: r.report.redacted(),
                    })
                })
                .collect();
            let sessions: Vec<SessionActivity> = state
                .sessions
                .values()
                .filter(|s| s.patient_id == patient_id && s.role == Role::Patient)
                .map(|s| SessionActivity { day: s.day, user_turns: s.user_turns() as u32 })
                .collect();
            (reports, sessions)
        };
        Ok(self.pipeline.cyclical_analysis(&reports, &sessions, window, AverageMode::AllDays).await)
    }
}

fn scrub(text: &str, secrets: &[String]) -> String {
    let mut out = text.to_string();
    for s in secrets {
        if out.contains(s.as_str()) {
            out = out.replace(s.as_str(), WITHHELD);
        }
    }
    out
}

fn value<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("report fields serialize")
}

type Applied = (DiagnosticReport, Vec<Advice>, Vec<FieldEdit>);

fn apply_edits(rec: &ReportRecord, edits: &ReportEdits) -> Result<Applied> {
    let mut report = rec.report.clone();
    let mut changes = Vec::new();
    let mut record = |field: &str, before: serde_json::Value, after: serde_json::Value| {
        if before != after {
            changes.push(FieldEdit { field: field.into(), before, after });
        }
    };
    if let Some(b) = edits.binary_class {
        record("binary_class", value(&report.binary_class), value(&b));
        report.binary_class = b;
    }
    if let Some(s) = edits.severity_degree {
        record("severity_degree", value(&report.severity), value(&s));
        report.severity = s;
    }
    if let Some(s) = &edits.subtype_category {
        record("subtype_category", value(&report.subtype_category), value(s));
        report.subtype_category = s.trim().to_string();
    }
    if let Some(f) = &edits.findings {
        record("findings", value(&report.findings), value(f));
        report.findings = f.clone();
    }
    if let Some(n) = &edits.narrative {
        let n = Some(n.trim().to_string()).filter(|n| !n.is_empty());
        record("narrative", value(&report.narrative), value(&n));
        report.narrative = n;
    }
    let mut advice = Vec::new();
    for (kind, text, field) in [
        (AdviceKind::TreatmentStrategy, &edits.treatment_strategy, "treatment_strategy"),
        (AdviceKind::CareAdvice, &edits.care_advice, "care_advice"),
    ] {
        let Some(text) = text else { continue };
        let text = text.trim();
        if text.is_empty() {
            return Err(ServiceError::Invalid(format!("{field} must not be empty")));
        }
        let before = rec.advice_for(kind).map(|a| a.text.clone());
        record(field, value(&before), value(&text));
        if before.as_deref() != Some(text) {
            advice.push(Advice { kind, report_id: report.id.clone(), text: text.to_string() });
        }
    }
    Ok((report, advice, changes))
}
