//! Prompt assembly for dialogue rewriting, report generation (with and
//! without prior knowledge), the live-chat counselor persona, cyclical
//! analysis and advice.
//!
//! Every prompt is three sections in fixed order: an instruction, a rules or
//! context section, and a query. Section texts come from template assets with
//! `{{slot}}` placeholders; substitution is literal.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{
    DateWindow, DiagnosticReport, Dialogue, Opening, Role, SeverityStandard, SourceLabel, Speaker,
};
use crate::retrieval::CriteriaDocument;

#[derive(Debug, Clone, Error)]
pub enum PromptError {
    #[error("post text is empty")]
    EmptyPost,
    #[error("criteria document required when retrieval is enabled")]
    MissingCriteria,
    #[error("no reports to summarise")]
    NoReports,
    #[error("at least one dialogue is required")]
    NoDialogue,
    #[error("{0}")]
    InvalidDialogue(#[from] crate::domain::DomainError),
    #[error("unsupported locale `{0}`")]
    UnknownLocale(String),
    #[error("template `{template}` has unknown slot `{slot}`")]
    UnknownSlot { template: String, slot: String },
    #[error("template `{template}` has an unterminated slot")]
    Unterminated { template: String },
    #[error("template asset {path}: {reason}")]
    Asset { path: String, reason: String },
    #[error("persona is only defined for patient and family")]
    PersonaRole,
}

macro_rules! template_table {
    ($($name:literal),* $(,)?) => {
        /// Asset file stems, one `<name>.txt` per template.
        pub const TEMPLATE_NAMES: &[&str] = &[$($name),*];

        fn builtin(locale: &str) -> Option<BTreeMap<String, String>> {
            match locale {
                "en" => Some(BTreeMap::from([
                    $(($name.to_string(), include_str!(concat!("../assets/prompts/en/", $name, ".txt")).to_string())),*
                ])),
                _ => None,
            }
        }
    };
}

template_table!(
    "rewrite_instruction",
    "rewrite_rules",
    "rewrite_query",
    "report_instruction",
    "report_direct_instruction",
    "inference_instruction",
    "inference_direct_instruction",
    "context_dialogue",
    "context_label",
    "context_criteria",
    "context_standard",
    "steps_priors_rag",
    "steps_priors_norag",
    "steps_inference",
    "steps_inference_rag",
    "direct_directive",
    "report_query",
    "persona_patient",
    "persona_family",
    "persona_rules",
    "persona_focus_patient",
    "persona_focus_family",
    "persona_query",
    "cyclical_instruction",
    "cyclical_context",
    "cyclical_query",
    "advice_patient",
    "advice_family",
    "advice_context",
    "advice_query",
);

/// A locale's string table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Templates {
    locale: String,
    entries: BTreeMap<String, String>,
}

impl Templates {
    pub fn builtin(locale: &str) -> Result<Self, PromptError> {
        let entries = builtin(locale).ok_or_else(|| PromptError::UnknownLocale(locale.to_string()))?;
        Ok(Self { locale: locale.to_string(), entries })
    }

    /// Loads `<dir>/<name>.txt` for every template name.
    pub fn from_dir(dir: impl AsRef<Path>, locale: &str) -> Result<Self, PromptError> {
        let mut entries = BTreeMap::new();
        for name in TEMPLATE_NAMES {
            let path = dir.as_ref().join(format!("{name}.txt"));
            let text = std::fs::read_to_string(&path).map_err(|e| PromptError::Asset {
                path: path.display().to_string(),
                reason: e.to_string(),
            })?;
            entries.insert(name.to_string(), text);
        }
        Ok(Self { locale: locale.to_string(), entries })
    }

    pub fn locale(&self) -> &str {
        &self.locale
    }

    fn get(&self, name: &str) -> &str {
        self.entries.get(name).map(String::as_str).unwrap_or_default()
    }

    fn render(&self, name: &str, slots: &[(&str, &str)]) -> Result<String, PromptError> {
        render_template(name, self.get(name), slots)
    }
}

/// Single-pass `{{slot}}` substitution. Substituted values are never
/// rescanned, so slot-like text inside a value survives untouched.
pub fn render_template(name: &str, template: &str, slots: &[(&str, &str)]) -> Result<String, PromptError> {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(start) = rest.find("{{") {
        out.push_str(&rest[..start]);
        let after = &rest[start + 2..];
        let end = after
            .find("}}")
            .ok_or_else(|| PromptError::Unterminated { template: name.to_string() })?;
        let slot = after[..end].trim();
        let value = slots
            .iter()
            .find(|(k, _)| *k == slot)
            .map(|(_, v)| *v)
            .ok_or_else(|| PromptError::UnknownSlot { template: name.to_string(), slot: slot.to_string() })?;
        out.push_str(value);
        rest = &after[end + 2..];
    }
    out.push_str(rest);
    Ok(out.trim_end().to_string())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptKind {
    DialogueRewrite,
    ReportWithPriors,
    ReportInference,
    CounselorPersona,
    CyclicalAnalysis,
    AdviceGeneration,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Section {
    /// Task description (T).
    Instruction,
    /// Rules (R).
    Rules,
    /// Chain-of-thought and context (C).
    Context,
    /// Query (Q).
    Query,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptPart {
    pub section: Section,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptOptions {
    pub use_rag: bool,
    pub use_cot: bool,
    pub locale: String,
}

impl Default for PromptOptions {
    fn default() -> Self {
        Self { use_rag: true, use_cot: true, locale: "en".to_string() }
    }
}

impl PromptOptions {
    pub fn arms() -> [PromptOptions; 4] {
        let arm = |use_rag, use_cot| PromptOptions { use_rag, use_cot, locale: "en".into() };
        [arm(false, false), arm(true, false), arm(false, true), arm(true, true)]
    }
}

/// Separator placed between consecutive sections in `rendered`.
pub const SECTION_SEPARATOR: &str = "\n\n";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub kind: PromptKind,
    pub parts: Vec<PromptPart>,
    pub rendered: String,
    pub contains_priors: bool,
    pub options: PromptOptions,
    /// Index of the criteria document embedded in the prompt, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub criteria_index: Option<usize>,
}

impl PromptBundle {
    fn assemble(kind: PromptKind, middle: Section, parts: [String; 3], options: PromptOptions) -> Self {
        let [t, m, q] = parts;
        let parts = vec![
            PromptPart { section: Section::Instruction, text: t },
            PromptPart { section: middle, text: m },
            PromptPart { section: Section::Query, text: q },
        ];
        let rendered = parts.iter().map(|p| p.text.as_str()).collect::<Vec<_>>().join(SECTION_SEPARATOR);
        Self {
            kind,
            parts,
            rendered,
            contains_priors: kind == PromptKind::ReportWithPriors,
            options,
            criteria_index: None,
        }
    }

    pub fn section(&self, section: Section) -> Option<&str> {
        self.parts.iter().find(|p| p.section == section).map(|p| p.text.as_str())
    }
}

impl fmt::Display for PromptBundle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.rendered)
    }
}

/// Length limits imposed on rewritten dialogues.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogueLimits {
    pub min_turns: usize,
    pub max_turns: usize,
    pub max_turn_chars: usize,
}

impl Default for DialogueLimits {
    fn default() -> Self {
        Self { min_turns: 4, max_turns: 20, max_turn_chars: 600 }
    }
}

/// Speaker names used when a dialogue is rendered into a prompt.
pub fn speaker_name(subject: Role, speaker: Speaker) -> &'static str {
    match (speaker, subject) {
        (Speaker::Assistant, _) => "Counselor",
        (Speaker::User, Role::Family) => "Family member",
        (Speaker::User, _) => "Patient",
    }
}

pub fn render_transcript(dialogue: &Dialogue) -> String {
    dialogue
        .turns
        .iter()
        .map(|t| format!("{}: {}", speaker_name(dialogue.subject_role, t.speaker), t.text))
        .collect::<Vec<_>>()
        .join("\n")
}

#[derive(Debug, Clone)]
pub struct PromptForge {
    templates: Templates,
    limits: DialogueLimits,
}

impl PromptForge {
    pub fn new(templates: Templates) -> Self {
        Self { templates, limits: DialogueLimits::default() }
    }

    pub fn english() -> Self {
        Self::new(Templates::builtin("en").expect("builtin english templates"))
    }

    pub fn with_limits(mut self, limits: DialogueLimits) -> Self {
        self.limits = limits;
        self
    }

    pub fn limits(&self) -> DialogueLimits {
        self.limits
    }

    pub fn templates(&self) -> &Templates {
        &self.templates
    }

    fn options(&self, opts: &PromptOptions) -> Result<PromptOptions, PromptError> {
        if opts.locale != self.templates.locale {
            return Err(PromptError::UnknownLocale(opts.locale.clone()));
        }
        Ok(opts.clone())
    }

    /// Post-to-dialogue rewriting prompt: instruction, eight rules, and a
    /// query embedding the post verbatim.
    pub fn build_dialogue_rewrite_prompt(&self, post: &str, label: &SourceLabel) -> Result<PromptBundle, PromptError> {
        if post.trim().is_empty() {
            return Err(PromptError::EmptyPost);
        }
        let t = &self.templates;
        let (min, max, chars) = (
            self.limits.min_turns.to_string(),
            self.limits.max_turns.to_string(),
            self.limits.max_turn_chars.to_string(),
        );
        let parts = [
            t.render("rewrite_instruction", &[("label", &label.prompt_literal())])?,
            t.render(
                "rewrite_rules",
                &[("min_turns", &min), ("max_turns", &max), ("max_chars", &chars)],
            )?,
            t.render("rewrite_query", &[("post", post)])?,
        ];
        let opts = PromptOptions { locale: t.locale.clone(), ..PromptOptions::default() };
        Ok(PromptBundle::assemble(PromptKind::DialogueRewrite, Section::Rules, parts, opts))
    }

    fn dialogue_block(&self, dialogue: &Dialogue) -> Result<String, PromptError> {
        let title = match dialogue.subject_role {
            Role::Family => "Family member",
            _ => "Patient",
        };
        self.templates.render(
            "context_dialogue",
            &[
                ("speaker_title", title),
                ("day", &dialogue.day.to_string()),
                ("transcript", &render_transcript(dialogue)),
            ],
        )
    }

    fn criteria_block(&self, criteria: &CriteriaDocument) -> Result<String, PromptError> {
        self.templates.render(
            "context_criteria",
            &[("subtype", &criteria.subtype_name), ("criteria", &criteria.text)],
        )
    }

    /// Report-generation prompt carrying prior knowledge: the label, the
    /// retrieved criteria document (when retrieval is on) and the severity
    /// standard.
    pub fn build_report_prompt(
        &self,
        dialogue: &Dialogue,
        label: &SourceLabel,
        criteria: Option<&CriteriaDocument>,
        standard: &SeverityStandard,
        opts: &PromptOptions,
    ) -> Result<PromptBundle, PromptError> {
        dialogue.validate(Opening::Any)?;
        let opts = self.options(opts)?;
        let criteria = match (opts.use_rag, criteria) {
            (true, None) => return Err(PromptError::MissingCriteria),
            (true, Some(c)) => Some(c),
            (false, _) => None,
        };
        let t = &self.templates;
        let mut context = vec![
            self.dialogue_block(dialogue)?,
            t.render("context_label", &[("label", &label.prompt_literal())])?,
        ];
        if let Some(c) = criteria {
            context.push(self.criteria_block(c)?);
        }
        context.push(t.render("context_standard", &[("standard", &standard.text)])?);
        let (instruction, steps) = match (opts.use_cot, opts.use_rag) {
            (true, true) => ("report_instruction", "steps_priors_rag"),
            (true, false) => ("report_instruction", "steps_priors_norag"),
            (false, _) => ("report_direct_instruction", "direct_directive"),
        };
        context.push(t.render(steps, &[])?);
        let parts = [
            t.render(instruction, &[])?,
            context.join(SECTION_SEPARATOR),
            t.render("report_query", &[])?,
        ];
        let mut bundle = PromptBundle::assemble(PromptKind::ReportWithPriors, Section::Context, parts, opts);
        bundle.criteria_index = criteria.map(|c| c.index);
        Ok(bundle)
    }

    /// Inference prompt with every prior removed: instruction, the dialogue
    /// with its analysis steps, and the JSON query.
    pub fn build_inference_prompt(&self, dialogue: &Dialogue, opts: &PromptOptions) -> Result<PromptBundle, PromptError> {
        self.build_assessment_prompt(&[dialogue], None, opts)
    }

    /// Inference prompt over one or more dialogues (patient and family),
    /// optionally augmented with a retrieved criteria document. Labels and
    /// the severity standard are never included.
    pub fn build_assessment_prompt(
        &self,
        dialogues: &[&Dialogue],
        criteria: Option<&CriteriaDocument>,
        opts: &PromptOptions,
    ) -> Result<PromptBundle, PromptError> {
        if dialogues.is_empty() {
            return Err(PromptError::NoDialogue);
        }
        let opts = self.options(opts)?;
        let t = &self.templates;
        let mut context = Vec::new();
        for d in dialogues {
            d.validate(Opening::Any)?;
            context.push(self.dialogue_block(d)?);
        }
        if let Some(c) = criteria {
            context.push(self.criteria_block(c)?);
        }
        let (instruction, steps) = match (opts.use_cot, criteria.is_some()) {
            (true, false) => ("inference_instruction", "steps_inference"),
            (true, true) => ("inference_instruction", "steps_inference_rag"),
            (false, _) => ("inference_direct_instruction", "direct_directive"),
        };
        context.push(t.render(steps, &[])?);
        let parts = [
            t.render(instruction, &[])?,
            context.join(SECTION_SEPARATOR),
            t.render("report_query", &[])?,
        ];
        let mut bundle = PromptBundle::assemble(PromptKind::ReportInference, Section::Context, parts, opts);
        bundle.criteria_index = criteria.map(|c| c.index);
        Ok(bundle)
    }

    /// System prompt for the live counseling chat.
    pub fn build_counselor_persona(&self, subject: Role) -> Result<PromptBundle, PromptError> {
        let t = &self.templates;
        let (persona, focus) = match subject {
            Role::Patient => ("persona_patient", "persona_focus_patient"),
            Role::Family => ("persona_family", "persona_focus_family"),
            Role::Doctor => return Err(PromptError::PersonaRole),
        };
        let focus = t.render(focus, &[])?;
        let parts = [
            t.render(persona, &[])?,
            t.render("persona_rules", &[("focus", &focus)])?,
            t.render("persona_query", &[])?,
        ];
        let opts = PromptOptions { locale: t.locale.clone(), ..PromptOptions::default() };
        Ok(PromptBundle::assemble(PromptKind::CounselorPersona, Section::Rules, parts, opts))
    }

    /// Trend-analysis prompt over dated reports. Only report fields are
    /// embedded; finding evidence (verbatim dialogue) is left out.
    pub fn build_cyclical_prompt(
        &self,
        reports: &[(chrono::NaiveDate, DiagnosticReport)],
        window: DateWindow,
    ) -> Result<PromptBundle, PromptError> {
        if reports.is_empty() {
            return Err(PromptError::NoReports);
        }
        let mut sorted: Vec<_> = reports.iter().collect();
        sorted.sort_by_key(|(day, _)| *day);
        let summaries = sorted
            .iter()
            .map(|(day, r)| {
                let symptoms: Vec<&str> = r.findings.iter().map(|f| f.symptom.as_str()).collect();
                format!(
                    "{day}: severity={}, diagnosis={}, subtype={}, symptoms: {}",
                    r.severity,
                    r.binary_class,
                    r.subtype_category,
                    if symptoms.is_empty() { "none".to_string() } else { symptoms.join(", ") }
                )
            })
            .collect::<Vec<_>>()
            .join("\n");
        let t = &self.templates;
        let parts = [
            t.render("cyclical_instruction", &[])?,
            t.render(
                "cyclical_context",
                &[("from", &window.from.to_string()), ("to", &window.to.to_string()), ("summaries", &summaries)],
            )?,
            t.render("cyclical_query", &[])?,
        ];
        let opts = PromptOptions { locale: t.locale.clone(), ..PromptOptions::default() };
        Ok(PromptBundle::assemble(PromptKind::CyclicalAnalysis, Section::Context, parts, opts))
    }

    /// Advice prompt for the patient (treatment strategy) or the family
    /// (care advice), built from report fields only.
    pub fn build_advice_prompt(&self, report: &DiagnosticReport, audience: Role) -> Result<PromptBundle, PromptError> {
        let t = &self.templates;
        let instruction = match audience {
            Role::Patient => "advice_patient",
            Role::Family => "advice_family",
            Role::Doctor => return Err(PromptError::PersonaRole),
        };
        let findings = if report.findings.is_empty() {
            "- none".to_string()
        } else {
            report
                .findings
                .iter()
                .map(|f| {
                    format!(
                        "- {} (criterion: {}; {})",
                        f.symptom,
                        f.criterion,
                        if f.agreement { "agrees" } else { "does not agree" }
                    )
                })
                .collect::<Vec<_>>()
                .join("\n")
        };
        let parts = [
            t.render(instruction, &[])?,
            t.render(
                "advice_context",
                &[
                    ("binary_class", report.binary_class.as_str()),
                    ("severity", report.severity.as_str()),
                    ("subtype", &report.subtype_category),
                    ("findings", &findings),
                ],
            )?,
            t.render("advice_query", &[])?,
        ];
        let opts = PromptOptions { locale: t.locale.clone(), ..PromptOptions::default() };
        Ok(PromptBundle::assemble(PromptKind::AdviceGeneration, Section::Context, parts, opts))
    }
}
