#![allow(dead_code)]

use std::sync::atomic::{AtomicBool, AtomicI64, Ordering};
use std::sync::Arc;

use async_trait::async_trait;
use moodbridge_core::domain::Clock;
use moodbridge_core::gateway::{ChatMessage, ChatProvider, CompletionParams, GatewayError, ScriptedProvider, ScriptedRule, SharedChat};
use moodbridge_core::pipeline::ReportPipeline;
use moodbridge_core::prompts::PromptForge;
use moodbridge_core::retrieval::{CriteriaCorpus, HashingEmbedder};
use moodbridge_core::{Role, SeverityStandard};
use moodbridge_service::model::Account;
use moodbridge_service::{AssessmentService, ServiceOptions, Store};

/// 2024-03-04T09:00:00Z
pub const T0: i64 = 1_709_542_800;
pub const DAY: i64 = 86_400;

pub struct ManualClock(AtomicI64);

impl ManualClock {
    pub fn new(at: i64) -> Arc<Self> {
        Arc::new(Self(AtomicI64::new(at)))
    }

    pub fn advance(&self, secs: i64) {
        self.0.fetch_add(secs, Ordering::SeqCst);
    }

    pub fn set(&self, at: i64) {
        self.0.store(at, Ordering::SeqCst);
    }
}

impl Clock for ManualClock {
    fn now(&self) -> i64 {
        self.0.load(Ordering::SeqCst)
    }
}

pub const PATIENT_LINES: [&str; 3] = [
    "I can't sleep and I wake up at four every morning.",
    "Nothing feels interesting anymore, even music.",
    "I feel like a burden to everyone around me.",
];

pub const FAMILY_LINES: [&str; 2] =
    ["My brother barely leaves his room these days.", "He skips dinner with us most evenings now."];

pub const SLEEP_PROBE: &str = "How long have you been having trouble sleeping?";
pub const STRATEGY_TEXT: &str = "Keep a regular sleep schedule and book a follow-up visit.";
pub const CARE_TEXT: &str = "Invite him to short walks and keep meal times predictable.";
pub const TREND_TEXT: &str = "Severity is stable; sleep problems recur.";

/// A depressed/mild report whose evidence and narrative quote both parties.
pub fn report_json() -> String {
    serde_json::json!({
        "binary_class": "depressed",
        "severity_degree": "mild",
        "findings": [
            {"symptom": "insomnia", "evidence": PATIENT_LINES[0], "criterion": "insomnia or hypersomnia nearly every day", "agreement": true},
            {"symptom": "social withdrawal", "evidence": FAMILY_LINES[0], "criterion": "markedly diminished interest", "agreement": true}
        ],
        "subtype_category": "major depressive disorder",
        "narrative": format!("The family says: {} The patient says: {}", FAMILY_LINES[0], PATIENT_LINES[2])
    })
    .to_string()
}

pub fn scripted_rules() -> Vec<ScriptedRule> {
    vec![
        ScriptedRule::substring("write a treatment strategy", STRATEGY_TEXT),
        ScriptedRule::substring("write care advice", CARE_TEXT),
        ScriptedRule::substring("reviewing a patient's assessments", TREND_TEXT),
        ScriptedRule::substring("exactly one JSON object", report_json()),
        ScriptedRule::substring("sleep", SLEEP_PROBE),
    ]
}

pub fn corpus() -> CriteriaCorpus {
    CriteriaCorpus::new(
        "criteria",
        [
            ("major depressive disorder", "Depressed mood most of the day. Insomnia or hypersomnia nearly every day. Feelings of worthlessness."),
            ("persistent depressive disorder", "Depressed mood for most days over at least two years. Poor appetite or overeating."),
            ("none", "No depressive symptoms are present. Mood and interest are within the usual range."),
        ]
        .map(|(n, t)| (n.to_string(), t.to_string())),
    )
    .unwrap()
}

/// Wraps a provider and fails every call with a timeout while switched on.
pub struct Switchable {
    pub inner: SharedChat,
    pub failing: AtomicBool,
}

#[async_trait]
impl ChatProvider for Switchable {
    fn name(&self) -> &str {
        "switchable"
    }

    async fn complete(&self, messages: &[ChatMessage], params: &CompletionParams) -> Result<String, GatewayError> {
        if self.failing.load(Ordering::SeqCst) {
            return Err(GatewayError::Timeout(params.timeout_ms));
        }
        self.inner.complete(messages, params).await
    }
}

pub fn accounts() -> Vec<(Account, String)> {
    let acct = |id: &str, role, patients: &[&str]| {
        (
            Account {
                id: id.into(),
                role,
                display_name: id.to_uppercase(),
                patient_ids: patients.iter().map(|p| p.to_string()).collect(),
            },
            "pw".to_string(),
        )
    };
    vec![
        acct("p1", Role::Patient, &["p1"]),
        acct("p2", Role::Patient, &["p2"]),
        acct("f1", Role::Family, &["p1"]),
        acct("d1", Role::Doctor, &["p1", "p2"]),
        acct("d2", Role::Doctor, &["p2"]),
    ]
}

pub struct Harness {
    pub svc: Arc<AssessmentService>,
    pub clock: Arc<ManualClock>,
    pub scripted: Arc<ScriptedProvider>,
    pub switch: Arc<Switchable>,
}

impl Harness {
    pub fn new() -> Self {
        Self::with_store(Store::in_memory())
    }

    pub fn with_store(store: Store) -> Self {
        let clock = ManualClock::new(T0);
        let scripted = Arc::new(ScriptedProvider::new(scripted_rules()));
        let switch = Arc::new(Switchable { inner: scripted.clone(), failing: AtomicBool::new(false) });
        let pipeline = ReportPipeline::new(
            switch.clone(),
            Arc::new(HashingEmbedder),
            corpus(),
            SeverityStandard::hamd_default(),
            PromptForge::english(),
            clock.clone(),
        )
        .with_params(CompletionParams { retries: 0, timeout_ms: 2_000, ..CompletionParams::report() });
        let options =
            ServiceOptions { pipeline_config: None, chat_params: CompletionParams { retries: 0, timeout_ms: 2_000, ..Default::default() } };
        let svc = AssessmentService::new(accounts(), store, Arc::new(pipeline), clock.clone(), options);
        Self { svc, clock, scripted, switch }
    }

    pub fn acct(&self, id: &str) -> Account {
        self.svc.account(id).cloned().expect("known account")
    }

    pub fn fail_gateway(&self, on: bool) {
        self.switch.failing.store(on, Ordering::SeqCst);
    }

    /// Opens a session for `who`, posts each line, closes it, and returns the
    /// session id and job id.
    pub async fn chat(&self, who: &str, lines: &[&str]) -> (String, Option<String>) {
        let a = self.acct(who);
        let s = self.svc.open_session(&a).await.unwrap();
        for l in lines {
            self.clock.advance(30);
            self.svc.post_turn(&a, &s.id, l).await.unwrap();
        }
        self.clock.advance(30);
        let out = self.svc.close_session(&a, &s.id).await.unwrap();
        (s.id, out.job_id)
    }

    pub async fn finish(&self, job: &Option<String>) -> String {
        match self.svc.wait_job(job.as_deref().expect("job started")).await.unwrap() {
            moodbridge_service::model::JobStatus::Done { report_id } => report_id,
            other => panic!("job did not finish: {other:?}"),
        }
    }
}
