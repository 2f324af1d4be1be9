//! Report pipeline: dialogue → criteria retrieval → prompt → gateway →
//! validated draft report, plus advice generation and the cyclical
//! (windowed) analysis of released reports.

use std::collections::{BTreeMap, HashMap};
use std::future::Future;
use std::hash::Hash;
use std::sync::Arc;

use chrono::NaiveDate;
use futures::future::{BoxFuture, FutureExt, Shared};
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::domain::{
    Advice, AdviceKind, Clock, DateWindow, DiagnosticReport, Dialogue, Role, SeverityDegree, SeverityStandard,
};
use crate::gateway::{
    complete_chat, request_report, ChatMessage, CompletionParams, GatewayError, ReportParseError,
    ReportRequestError, SharedChat,
};
use crate::prompts::{PromptError, PromptForge, PromptOptions};
use crate::retrieval::{
    extract_user_content, retrieve_criteria, CriteriaCorpus, EmbeddingProvider, RetrievalError, RetrievalResult,
};

#[derive(Debug, Clone, Error)]
pub enum PipelineError {
    #[error("no dialogue supplied")]
    NoDialogue,
    #[error("unknown {kind} `{id}`")]
    UnknownReference { kind: &'static str, id: String },
    #[error("retrieval failed: {0}")]
    Retrieval(#[from] RetrievalError),
    #[error("prompt assembly failed: {0}")]
    Prompt(#[from] PromptError),
    #[error("gateway failed: {0}")]
    Gateway(#[from] GatewayError),
    #[error("model output unparseable: {error}")]
    Unparseable { error: ReportParseError, raw: String },
    #[error("advice is only written for patients and families")]
    AdviceAudience,
}

impl From<ReportRequestError> for PipelineError {
    fn from(e: ReportRequestError) -> Self {
        match e {
            ReportRequestError::Gateway(g) => PipelineError::Gateway(g),
            ReportRequestError::Unparseable { error, raw } => PipelineError::Unparseable { error, raw },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub prompt_options: PromptOptions,
    #[serde(default)]
    pub include_family_content_in_retrieval: bool,
    pub corpus_id: String,
    pub std_id: String,
}

impl PipelineConfig {
    pub fn new(corpus_id: impl Into<String>, std_id: impl Into<String>) -> Self {
        Self {
            prompt_options: PromptOptions::default(),
            include_family_content_in_retrieval: false,
            corpus_id: corpus_id.into(),
            std_id: std_id.into(),
        }
    }
}

/// Deterministic report id derived from the input dialogue ids.
pub fn report_id_for(dialogue_ids: &[String]) -> String {
    let digest = Sha256::digest(dialogue_ids.join("\n").as_bytes());
    let hex: String = digest.iter().take(8).map(|b| format!("{b:02x}")).collect();
    format!("rpt-{hex}")
}

pub struct ReportPipeline {
    chat: SharedChat,
    embedder: Arc<dyn EmbeddingProvider>,
    corpus: CriteriaCorpus,
    standard: SeverityStandard,
    forge: PromptForge,
    clock: Arc<dyn Clock>,
    params: CompletionParams,
}

impl ReportPipeline {
    pub fn new(
        chat: SharedChat,
        embedder: Arc<dyn EmbeddingProvider>,
        corpus: CriteriaCorpus,
        standard: SeverityStandard,
        forge: PromptForge,
        clock: Arc<dyn Clock>,
    ) -> Self {
        Self { chat, embedder, corpus, standard, forge, clock, params: CompletionParams::report() }
    }

    pub fn with_params(mut self, params: CompletionParams) -> Self {
        self.params = params;
        self
    }

    pub fn corpus(&self) -> &CriteriaCorpus {
        &self.corpus
    }

    pub fn standard(&self) -> &SeverityStandard {
        &self.standard
    }

    pub fn forge(&self) -> &PromptForge {
        &self.forge
    }

    pub fn chat(&self) -> &SharedChat {
        &self.chat
    }

    pub fn embedder(&self) -> &dyn EmbeddingProvider {
        self.embedder.as_ref()
    }

    pub fn params(&self) -> &CompletionParams {
        &self.params
    }

    pub fn now(&self) -> i64 {
        self.clock.now()
    }

    /// A config whose references resolve against this pipeline.
    pub fn default_config(&self) -> PipelineConfig {
        PipelineConfig::new(self.corpus.source_id.clone(), self.standard.id.clone())
    }

    fn check_refs(&self, cfg: &PipelineConfig) -> Result<(), PipelineError> {
        if cfg.corpus_id != self.corpus.source_id {
            return Err(PipelineError::UnknownReference { kind: "corpus", id: cfg.corpus_id.clone() });
        }
        if cfg.std_id != self.standard.id {
            return Err(PipelineError::UnknownReference { kind: "severity standard", id: cfg.std_id.clone() });
        }
        Ok(())
    }

    /// Retrieval input: patient user content, plus family user content when
    /// configured. A family-only assessment uses the family content.
    fn retrieval_query(
        &self,
        patient: Option<&Dialogue>,
        family: Option<&Dialogue>,
        cfg: &PipelineConfig,
    ) -> Result<String, PipelineError> {
        let mut parts = Vec::new();
        if let Some(p) = patient {
            parts.push(extract_user_content(p)?);
        }
        if let Some(f) = family {
            if patient.is_none() || cfg.include_family_content_in_retrieval {
                parts.push(extract_user_content(f)?);
            }
        }
        Ok(parts.join("\n"))
    }

    pub async fn retrieve(&self, user_content: &str) -> Result<RetrievalResult, PipelineError> {
        Ok(retrieve_criteria(user_content, &self.corpus, self.embedder.as_ref()).await?)
    }

    /// Produces a draft report for the patient dialogue and/or the family
    /// dialogue. No label or severity standard reaches the prompt.
    pub async fn generate_report(
        &self,
        patient: Option<&Dialogue>,
        family: Option<&Dialogue>,
        cfg: &PipelineConfig,
    ) -> Result<DiagnosticReport, PipelineError> {
        self.check_refs(cfg)?;
        let dialogues: Vec<&Dialogue> = patient.into_iter().chain(family).collect();
        if dialogues.is_empty() {
            return Err(PipelineError::NoDialogue);
        }
        let criteria = if cfg.prompt_options.use_rag {
            let query = self.retrieval_query(patient, family, cfg)?;
            Some(self.retrieve(&query).await?.document)
        } else {
            None
        };
        let bundle = self.forge.build_assessment_prompt(&dialogues, criteria.as_ref(), &cfg.prompt_options)?;
        let mut report = request_report(self.chat.as_ref(), &bundle.rendered, &self.params).await?;
        report.dialogue_ids = dialogues.iter().map(|d| d.id.clone()).collect();
        report.id = report_id_for(&report.dialogue_ids);
        report.created_at = self.clock.now();
        Ok(report)
    }

    /// Treatment strategy for the patient or care advice for the family.
    pub async fn generate_advice(&self, report: &DiagnosticReport, audience: Role) -> Result<Advice, PipelineError> {
        let kind = AdviceKind::for_audience(audience).ok_or(PipelineError::AdviceAudience)?;
        let bundle = self.forge.build_advice_prompt(report, audience)?;
        let params = CompletionParams { temperature: 0.0, ..self.params.clone() };
        let text = complete_chat(self.chat.as_ref(), &[ChatMessage::user(bundle.rendered)], &params).await?;
        Ok(Advice { kind, report_id: report.id.clone(), text: text.trim().to_string() })
    }

    /// Windowed statistics plus a model-written trend narrative. Windows
    /// without reports skip the gateway; a gateway failure keeps the numbers
    /// and marks the narrative unavailable.
    pub async fn cyclical_analysis(
        &self,
        reports: &[DatedReport],
        sessions: &[SessionActivity],
        window: DateWindow,
        mode: AverageMode,
    ) -> CyclicalSummary {
        let mut summary = cyclical_stats(reports, sessions, window, mode);
        let latest = latest_per_day(reports, window);
        if latest.is_empty() {
            return summary;
        }
        let dated: Vec<(NaiveDate, DiagnosticReport)> =
            latest.into_iter().map(|(day, r)| (day, r.report.clone())).collect();
        summary.narrative = match self.forge.build_cyclical_prompt(&dated, window) {
            Err(e) => Narrative::Unavailable { reason: e.to_string() },
            Ok(bundle) => {
                let params = CompletionParams { temperature: 0.0, ..self.params.clone() };
                match complete_chat(self.chat.as_ref(), &[ChatMessage::user(bundle.rendered)], &params).await {
                    Ok(text) => Narrative::Generated { text: text.trim().to_string() },
                    Err(e) => Narrative::Unavailable { reason: e.to_string() },
                }
            }
        };
        summary
    }
}

/// Daily bar value: 0 for no interaction, then 25/50/75/100 by severity.
pub fn severity_score(severity: Option<SeverityDegree>) -> u8 {
    match severity {
        None => 0,
        Some(SeverityDegree::Normal) => 25,
        Some(SeverityDegree::Mild) => 50,
        Some(SeverityDegree::Moderate) => 75,
        Some(SeverityDegree::Severe) => 100,
    }
}

/// A released report placed on the calendar.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatedReport {
    pub day: NaiveDate,
    pub released_at: i64,
    pub report: DiagnosticReport,
}

/// One chat session: a login plus the user turns it carried.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionActivity {
    pub day: NaiveDate,
    pub user_turns: u32,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AverageMode {
    /// Divide by every day in the window, zero days included.
    #[default]
    AllDays,
    /// Divide by days that have a report only.
    ReportDaysOnly,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DailyScore {
    pub day: NaiveDate,
    pub score: u8,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Narrative {
    Generated { text: String },
    NoData { text: String },
    Unavailable { reason: String },
}

impl Narrative {
    pub const NO_DATA: &'static str = "No released assessments in this period.";

    pub fn no_data() -> Self {
        Narrative::NoData { text: Self::NO_DATA.to_string() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CyclicalSummary {
    pub window: DateWindow,
    pub login_count: u32,
    pub user_turn_count: u32,
    pub daily_scores: Vec<DailyScore>,
    pub distribution: BTreeMap<SeverityDegree, u32>,
    pub average_score: f64,
    pub average_mode: AverageMode,
    pub narrative: Narrative,
}

/// The latest-released report of each day inside the window.
fn latest_per_day(reports: &[DatedReport], window: DateWindow) -> BTreeMap<NaiveDate, &DatedReport> {
    let mut latest: BTreeMap<NaiveDate, &DatedReport> = BTreeMap::new();
    for r in reports.iter().filter(|r| window.contains(r.day)) {
        match latest.get(&r.day) {
            Some(cur) if cur.released_at > r.released_at => {}
            _ => {
                latest.insert(r.day, r);
            }
        }
    }
    latest
}

/// Numeric part of the cyclical analysis; the narrative is left as
/// "no data".
pub fn cyclical_stats(
    reports: &[DatedReport],
    sessions: &[SessionActivity],
    window: DateWindow,
    mode: AverageMode,
) -> CyclicalSummary {
    let latest = latest_per_day(reports, window);
    let daily_scores: Vec<DailyScore> = window
        .days()
        .map(|day| DailyScore { day, score: severity_score(latest.get(&day).map(|r| r.report.severity)) })
        .collect();
    let mut distribution = BTreeMap::new();
    for r in latest.values() {
        *distribution.entry(r.report.severity).or_insert(0) += 1;
    }
    let total: u32 = daily_scores.iter().map(|d| u32::from(d.score)).sum();
    let denominator = match mode {
        AverageMode::AllDays => daily_scores.len(),
        AverageMode::ReportDaysOnly => latest.len(),
    };
    let average_score = if denominator == 0 { 0.0 } else { f64::from(total) / denominator as f64 };
    let in_window: Vec<_> = sessions.iter().filter(|s| window.contains(s.day)).collect();
    CyclicalSummary {
        window,
        login_count: in_window.len() as u32,
        user_turn_count: in_window.iter().map(|s| s.user_turns).sum(),
        daily_scores,
        distribution,
        average_score,
        average_mode: mode,
        narrative: Narrative::no_data(),
    }
}

type Flight<V> = (u64, Shared<BoxFuture<'static, V>>);

/// Deduplicates concurrent jobs: a request for a key already in flight
/// awaits the existing job's result instead of starting another.
pub struct SingleFlight<K, V: Clone> {
    inflight: Mutex<HashMap<K, Flight<V>>>,
    generation: Mutex<u64>,
}

impl<K, V> Default for SingleFlight<K, V>
where
    K: Eq + Hash + Clone,
    V: Clone + Send + Sync + 'static,
{
    fn default() -> Self {
        Self { inflight: Mutex::new(HashMap::new()), generation: Mutex::new(0) }
    }
}

impl<K, V> SingleFlight<K, V>
where
    K: Eq + Hash + Clone,
    V: Clone + Send + Sync + 'static,
{
    pub fn new() -> Self {
        Self::default()
    }

    /// Runs `job` unless a job for `key` is already running. The returned
    /// flag is true when this call joined an existing job.
    pub async fn run<F>(&self, key: K, job: F) -> (V, bool)
    where
        F: Future<Output = V> + Send + 'static,
    {
        let (gen, fut, joined) = {
            let mut map = self.inflight.lock();
            match map.get(&key) {
                Some((gen, fut)) => (*gen, fut.clone(), true),
                None => {
                    let gen = {
                        let mut g = self.generation.lock();
                        *g += 1;
                        *g
                    };
                    let fut = job.boxed().shared();
                    map.insert(key.clone(), (gen, fut.clone()));
                    (gen, fut, false)
                }
            }
        };
        let out = fut.await;
        let mut map = self.inflight.lock();
        if map.get(&key).is_some_and(|(g, _)| *g == gen) {
            map.remove(&key);
        }
        (out, joined)
    }

    pub fn in_flight(&self) -> usize {
        self.inflight.lock().len()
    }
}
