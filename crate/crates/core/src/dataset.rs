//! Instruction-dataset construction: rewriting labelled posts into
//! counseling dialogues, merging dialogue corpora, labelling dialogues with
//! prior-knowledge reports, and exporting `(instruction, input, output)`
//! records whose instruction carries no priors.

use std::collections::HashSet;
use std::io::{BufRead, Write};
use std::sync::Arc;

use futures::stream::{self, StreamExt};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{
    day_of, severity_to_binary, DiagnosticReport, Dialogue, Opening, Role, SourceLabel, Speaker, Turn,
};
use crate::gateway::{complete_chat, request_report, ChatMessage, CompletionParams, GatewayError};
use crate::pipeline::{report_id_for, PipelineError, ReportPipeline};
use crate::prompts::{DialogueLimits, PromptError, PromptOptions};
use crate::retrieval::extract_user_content;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("post {0} has empty text")]
    EmptyPost(String),
    #[error("dialogue {0} carries no usable label")]
    MissingLabel(String),
    #[error("duplicate dialogue id `{0}`")]
    DuplicateId(String),
    #[error("transcript line {line}: {reason}")]
    Transcript { line: usize, reason: String },
    #[error("rewritten dialogue rejected: {}", .0.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "))]
    Rejected(Vec<DialogueViolation>),
    #[error("invalid dialogue in corpus: {0}")]
    InvalidDialogue(#[from] crate::domain::DomainError),
    #[error("test fraction must lie strictly between 0 and 1, got {0}")]
    Fraction(f64),
    #[error("split of {total} items at {fraction} leaves an empty side")]
    DegenerateSplit { total: usize, fraction: f64 },
    #[error("instruction for {0} leaks prior knowledge")]
    PriorLeak(String),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Post {
    pub id: String,
    pub text: String,
    #[serde(default)]
    pub label: SourceLabel,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub source: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Rewritten,
    Clinical,
    Combined,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogueCorpus {
    pub id: String,
    pub provenance: Provenance,
    pub dialogues: Vec<Dialogue>,
}

impl DialogueCorpus {
    /// Validates every dialogue; rewritten corpora must open with the
    /// counselor.
    pub fn new(id: impl Into<String>, provenance: Provenance, dialogues: Vec<Dialogue>) -> Result<Self, DatasetError> {
        let opening = match provenance {
            Provenance::Rewritten => Opening::AssistantFirst,
            _ => Opening::Any,
        };
        let mut seen = HashSet::new();
        for d in &dialogues {
            d.validate(opening)?;
            if !seen.insert(d.id.as_str()) {
                return Err(DatasetError::DuplicateId(d.id.clone()));
            }
        }
        Ok(Self { id: id.into(), provenance, dialogues })
    }

    pub fn len(&self) -> usize {
        self.dialogues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dialogues.is_empty()
    }
}

/// Union of two corpora: `d1` then `d2`, ids must not collide.
pub fn assemble_chat_corpus(d1: &DialogueCorpus, d2: &DialogueCorpus) -> Result<DialogueCorpus, DatasetError> {
    let mut seen: HashSet<&str> = HashSet::new();
    for d in d1.dialogues.iter().chain(&d2.dialogues) {
        if !seen.insert(d.id.as_str()) {
            return Err(DatasetError::DuplicateId(d.id.clone()));
        }
    }
    let provenance = match (d1.is_empty(), d2.is_empty()) {
        (true, _) => d2.provenance,
        (false, true) => d1.provenance,
        _ if d1.provenance == d2.provenance => d1.provenance,
        _ => Provenance::Combined,
    };
    Ok(DialogueCorpus {
        id: format!("{}+{}", d1.id, d2.id),
        provenance,
        dialogues: d1.dialogues.iter().chain(&d2.dialogues).cloned().collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogueViolation {
    pub rule: String,
    pub detail: String,
}

impl std::fmt::Display for DialogueViolation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.rule, self.detail)
    }
}

fn violation(rule: &str, detail: String) -> DialogueViolation {
    DialogueViolation { rule: rule.to_string(), detail }
}

/// Checks a rewritten dialogue: counselor opening, strict alternation, turn
/// count within limits, and per-turn length cap.
pub fn validate_rewritten_dialogue(d: &Dialogue, limits: &DialogueLimits) -> Vec<DialogueViolation> {
    let mut out = Vec::new();
    match d.turns.first() {
        Some(t) if t.speaker == Speaker::Assistant => {}
        Some(_) => out.push(violation("opening", "dialogue must open with the counselor".into())),
        None => out.push(violation("opening", "dialogue is empty".into())),
    }
    for (i, w) in d.turns.windows(2).enumerate() {
        if w[0].speaker == w[1].speaker {
            out.push(violation("alternation", format!("turns {i} and {} share a speaker", i + 1)));
        }
    }
    let n = d.turns.len();
    if n < limits.min_turns || n > limits.max_turns {
        out.push(violation(
            "turn count",
            format!("{n} turns outside [{}, {}]", limits.min_turns, limits.max_turns),
        ));
    }
    for (i, t) in d.turns.iter().enumerate() {
        let chars = t.text.chars().count();
        if chars > limits.max_turn_chars {
            out.push(violation("turn length", format!("turn {i} has {chars} characters")));
        }
        if t.text.trim().is_empty() {
            out.push(violation("blank turn", format!("turn {i} is blank")));
        }
    }
    out
}

const USER_PREFIX: &str = "User:";
const COUNSELOR_PREFIX: &str = "Counselor:";

/// Parses `User:` / `Counselor:` transcript lines. Lines before the first
/// prefixed line are ignored; unprefixed lines continue the previous turn.
pub fn parse_transcript(text: &str) -> Result<Vec<(Speaker, String)>, DatasetError> {
    let mut turns: Vec<(Speaker, String)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim().trim_start_matches(['-', '*', ' ']);
        if line.is_empty() {
            continue;
        }
        let tagged = if let Some(rest) = line.strip_prefix(USER_PREFIX) {
            Some((Speaker::User, rest))
        } else {
            line.strip_prefix(COUNSELOR_PREFIX).map(|rest| (Speaker::Assistant, rest))
        };
        match (tagged, turns.last_mut()) {
            (Some((speaker, rest)), last) => {
                if last.is_some_and(|(prev, _)| *prev == speaker) {
                    return Err(DatasetError::Transcript {
                        line: i + 1,
                        reason: "two consecutive lines from the same speaker".into(),
                    });
                }
                turns.push((speaker, rest.trim().to_string()));
            }
            (None, Some((_, body))) => {
                body.push(' ');
                body.push_str(line);
            }
            (None, None) => {}
        }
    }
    if turns.is_empty() {
        return Err(DatasetError::Transcript { line: 0, reason: "no transcript lines found".into() });
    }
    if let Some(pos) = turns.iter().position(|(_, t)| t.is_empty()) {
        return Err(DatasetError::Transcript { line: pos + 1, reason: "empty turn".into() });
    }
    Ok(turns)
}

/// A record set aside during augmentation, with the reason.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Quarantined {
    pub record_id: String,
    pub reason: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_output: Option<String>,
}

/// A dialogue with the report generated for it as its label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledPair {
    pub dialogue: Dialogue,
    pub report: DiagnosticReport,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelingOutcome {
    pub pairs: Vec<LabeledPair>,
    pub quarantined: Vec<Quarantined>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionRecord {
    pub instruction: String,
    pub input: String,
    pub output: String,
}

/// Drives the gateway-backed augmentation steps.
pub struct DatasetBuilder {
    pipeline: Arc<ReportPipeline>,
    limits: DialogueLimits,
    workers: usize,
}

impl DatasetBuilder {
    pub fn new(pipeline: Arc<ReportPipeline>) -> Self {
        let limits = pipeline.forge().limits();
        Self { pipeline, limits, workers: 4 }
    }

    pub fn with_workers(mut self, workers: usize) -> Self {
        self.workers = workers.max(1);
        self
    }

    pub fn limits(&self) -> DialogueLimits {
        self.limits
    }

    /// Rewrites one post into a counselor-first dialogue.
    pub async fn rewrite_post_to_dialogue(&self, post: &Post) -> Result<Dialogue, DatasetError> {
        if post.text.trim().is_empty() {
            return Err(DatasetError::EmptyPost(post.id.clone()));
        }
        let forge = self.pipeline.forge();
        let bundle = forge.build_dialogue_rewrite_prompt(&post.text, &post.label)?;
        let params = CompletionParams { temperature: 0.0, ..self.pipeline.params().clone() };
        let text = complete_chat(self.pipeline.chat().as_ref(), &[ChatMessage::user(bundle.rendered)], &params).await?;
        let at = self.pipeline.now();
        let turns = parse_transcript(&text)?
            .into_iter()
            .map(|(speaker, text)| Turn { speaker, text, at })
            .collect();
        let dialogue = Dialogue {
            id: format!("rw-{}", post.id),
            subject_role: Role::Patient,
            turns,
            day: day_of(at),
            label: (!post.label.is_empty()).then(|| post.label.clone()),
        };
        let violations = validate_rewritten_dialogue(&dialogue, &self.limits);
        if !violations.is_empty() {
            return Err(DatasetError::Rejected(violations));
        }
        Ok(dialogue)
    }

    /// Rewrites every post; failures are quarantined, order is preserved.
    pub async fn rewrite_posts(&self, posts: &[Post]) -> (Vec<Dialogue>, Vec<Quarantined>) {
        let results: Vec<_> = stream::iter(posts)
            .map(|p| async move { (p.id.clone(), self.rewrite_post_to_dialogue(p).await) })
            .buffered(self.workers)
            .collect()
            .await;
        let mut dialogues = Vec::new();
        let mut quarantined = Vec::new();
        for (id, r) in results {
            match r {
                Ok(d) => dialogues.push(d),
                Err(e) => quarantined.push(Quarantined { record_id: id, reason: e.to_string(), raw_output: None }),
            }
        }
        (dialogues, quarantined)
    }

    async fn label_one(&self, dialogue: &Dialogue, opts: &PromptOptions) -> Result<LabeledPair, Quarantined> {
        let quarantine = |reason: String, raw: Option<String>| Quarantined {
            record_id: dialogue.id.clone(),
            reason,
            raw_output: raw,
        };
        let label = dialogue.label.clone().unwrap_or_default();
        let expected = label.effective_binary().expect("checked by caller");
        let criteria = if opts.use_rag {
            let content = extract_user_content(dialogue).map_err(|e| quarantine(e.to_string(), None))?;
            let hit = self.pipeline.retrieve(&content).await.map_err(|e| quarantine(e.to_string(), None))?;
            Some(hit.document)
        } else {
            None
        };
        let bundle = self
            .pipeline
            .forge()
            .build_report_prompt(dialogue, &label, criteria.as_ref(), self.pipeline.standard(), opts)
            .map_err(|e| quarantine(e.to_string(), None))?;
        let mut report = request_report(self.pipeline.chat().as_ref(), &bundle.rendered, self.pipeline.params())
            .await
            .map_err(|e| match PipelineError::from(e) {
                PipelineError::Unparseable { error, raw } => quarantine(format!("unparseable report: {error}"), Some(raw)),
                other => quarantine(other.to_string(), None),
            })?;
        let produced = severity_to_binary(report.severity);
        if produced != expected || report.binary_class != expected {
            return Err(quarantine(
                format!("label mismatch: report says {produced}, source label says {expected}"),
                Some(report.to_json()),
            ));
        }
        report.dialogue_ids = vec![dialogue.id.clone()];
        report.id = report_id_for(&report.dialogue_ids);
        report.created_at = self.pipeline.now();
        Ok(LabeledPair { dialogue: dialogue.clone(), report })
    }

    /// Generates a prior-knowledge report for every dialogue. Reports whose
    /// binary class contradicts the source label, and any record that fails,
    /// are quarantined rather than dropped.
    pub async fn build_report_labels(
        &self,
        corpus: &DialogueCorpus,
        opts: &PromptOptions,
    ) -> Result<LabelingOutcome, DatasetError> {
        if let Some(d) = corpus
            .dialogues
            .iter()
            .find(|d| d.label.as_ref().and_then(SourceLabel::effective_binary).is_none())
        {
            return Err(DatasetError::MissingLabel(d.id.clone()));
        }
        let results: Vec<_> = stream::iter(&corpus.dialogues)
            .map(|d| self.label_one(d, opts))
            .buffered(self.workers)
            .collect()
            .await;
        let mut outcome = LabelingOutcome::default();
        for r in results {
            match r {
                Ok(p) => outcome.pairs.push(p),
                Err(q) => outcome.quarantined.push(q),
            }
        }
        Ok(outcome)
    }

    /// One record per pair: the prior-free inference prompt, the dialogue
    /// without its label, and the report.
    pub fn export_instruction_records(
        &self,
        pairs: &[LabeledPair],
        opts: &PromptOptions,
    ) -> Result<Vec<InstructionRecord>, DatasetError> {
        let forge = self.pipeline.forge();
        let opts = PromptOptions { use_rag: false, ..opts.clone() };
        pairs
            .iter()
            .map(|pair| {
                let bare = pair.dialogue.without_label();
                let bundle = forge.build_inference_prompt(&bare, &opts)?;
                if let Some(label) = &pair.dialogue.label {
                    let literal = serde_json::to_string(label).expect("label serializes");
                    if bundle.rendered.contains(&label.prompt_literal()) || bundle.rendered.contains(&literal) {
                        return Err(DatasetError::PriorLeak(pair.dialogue.id.clone()));
                    }
                }
                Ok(InstructionRecord {
                    instruction: bundle.rendered,
                    input: serde_json::to_string(&bare).expect("dialogue serializes"),
                    output: pair.report.to_json(),
                })
            })
            .collect()
    }
}

/// Seeded partition into `(train, test)` with `|test| = round(fraction · N)`.
/// Each side keeps the input order.
pub fn split_train_test<T: Clone>(items: &[T], test_fraction: f64, seed: u64) -> Result<(Vec<T>, Vec<T>), DatasetError> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(DatasetError::Fraction(test_fraction));
    }
    let total = items.len();
    let n_test = (test_fraction * total as f64).round() as usize;
    if n_test == 0 || n_test >= total {
        return Err(DatasetError::DegenerateSplit { total, fraction: test_fraction });
    }
    let mut order: Vec<usize> = (0..total).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut is_test = vec![false; total];
    for &i in &order[..n_test] {
        is_test[i] = true;
    }
    let (mut train, mut test) = (Vec::with_capacity(total - n_test), Vec::with_capacity(n_test));
    for (item, t) in items.iter().zip(is_test) {
        if t {
            test.push(item.clone());
        } else {
            train.push(item.clone());
        }
    }
    Ok((train, test))
}

pub fn write_jsonl<T: Serialize>(mut w: impl Write, items: &[T]) -> Result<(), DatasetError> {
    for item in items {
        serde_json::to_writer(&mut w, item).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl<T: DeserializeOwned>(r: impl BufRead) -> Result<Vec<T>, DatasetError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| DatasetError::Parse { line: i + 1, reason: e.to_string() })?);
    }
    Ok(out)
}
