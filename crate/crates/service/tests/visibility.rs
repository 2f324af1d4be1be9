//! Model-based check of the visibility matrix under random interleavings of
//! chats, day changes, revisions and releases. The chat provider here is
//! adversarial: reports and advice quote the entire prompt they were given.

mod common;

use std::collections::BTreeSet;
use std::sync::Arc;

use async_trait::async_trait;
use common::{accounts, corpus, ManualClock, DAY, T0};
use moodbridge_core::domain::AdviceKind;
use moodbridge_core::gateway::{ChatMessage, ChatProvider, CompletionParams, GatewayError};
use moodbridge_core::pipeline::ReportPipeline;
use moodbridge_core::prompts::PromptForge;
use moodbridge_core::retrieval::HashingEmbedder;
use moodbridge_core::{SeverityDegree, SeverityStandard};
use moodbridge_service::model::{Account, ReportEdits, ReviewState, TimelineEntry};
use moodbridge_service::{AssessmentService, ServiceOptions, Store};
use proptest::prelude::*;

struct Leaky;

#[async_trait]
impl ChatProvider for Leaky {
    fn name(&self) -> &str {
        "leaky"
    }

    async fn complete(&self, messages: &[ChatMessage], _: &CompletionParams) -> Result<String, GatewayError> {
        let prompt = &messages.last().unwrap().content;
        if prompt.contains("exactly one JSON object") {
            let findings: Vec<_> = prompt
                .lines()
                .filter(|l| l.starts_with("Patient:") || l.starts_with("Family member:"))
                .map(|l| serde_json::json!({"symptom": l, "evidence": l, "criterion": l, "agreement": true}))
                .collect();
            return Ok(serde_json::json!({
                "binary_class": "depressed",
                "severity_degree": "moderate",
                "findings": findings,
                "subtype_category": "major depressive disorder",
                "narrative": prompt,
            })
            .to_string());
        }
        Ok(format!("Echo: {prompt}"))
    }
}

#[derive(Debug, Clone)]
enum Op {
    PatientChat(u8),
    FamilyChat(u8),
    NextDay,
    Revise(usize, bool),
    Release(usize),
}

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        3 => (1u8..4).prop_map(Op::PatientChat),
        3 => (1u8..4).prop_map(Op::FamilyChat),
        1 => Just(Op::NextDay),
        2 => (any::<usize>(), any::<bool>()).prop_map(|(i, b)| Op::Revise(i, b)),
        3 => any::<usize>().prop_map(Op::Release),
    ]
}

#[derive(Default)]
struct Model {
    patient_sessions: BTreeSet<String>,
    family_sessions: BTreeSet<String>,
    patient_lines: Vec<String>,
    family_lines: Vec<String>,
    reports: Vec<String>,
    released: BTreeSet<String>,
}

struct Views {
    dialogues: BTreeSet<String>,
    reports: BTreeSet<String>,
    drafts: usize,
    advice: Vec<AdviceKind>,
    text: String,
}

fn views(svc: &AssessmentService, who: &Account) -> Views {
    let t = svc.get_timeline(who, "p1").unwrap();
    let mut v = Views {
        dialogues: BTreeSet::new(),
        reports: BTreeSet::new(),
        drafts: 0,
        advice: Vec::new(),
        text: serde_json::to_string(&t).unwrap(),
    };
    for e in &t.entries {
        match e {
            TimelineEntry::Dialogue { session, .. } => {
                v.dialogues.insert(session.id.clone());
            }
            TimelineEntry::Report { view, .. } => {
                v.reports.insert(view.report.id.clone());
                if view.state == ReviewState::Draft {
                    v.drafts += 1;
                }
            }
            TimelineEntry::Advice { advice, .. } => v.advice.push(advice.kind),
            TimelineEntry::Feedback { .. } => {}
        }
    }
    v
}

async fn run(ops: Vec<Op>) -> Result<(), TestCaseError> {
    let clock = ManualClock::new(T0);
    let pipeline = ReportPipeline::new(
        Arc::new(Leaky),
        Arc::new(HashingEmbedder),
        corpus(),
        SeverityStandard::hamd_default(),
        PromptForge::english(),
        clock.clone(),
    );
    let svc = AssessmentService::new(accounts(), Store::in_memory(), Arc::new(pipeline), clock.clone(), ServiceOptions::default());
    let (p1, f1, d1) = (
        svc.account("p1").unwrap().clone(),
        svc.account("f1").unwrap().clone(),
        svc.account("d1").unwrap().clone(),
    );
    let mut m = Model::default();
    for (step, op) in ops.into_iter().enumerate() {
        clock.advance(60);
        match op {
            Op::PatientChat(n) | Op::FamilyChat(n) => {
                let patient = matches!(op, Op::PatientChat(_));
                let who = if patient { &p1 } else { &f1 };
                let s = svc.open_session(who).await.unwrap();
                for i in 0..n {
                    let line = if patient {
                        format!("patient line {step}-{i}: I keep waking before dawn")
                    } else {
                        format!("family line {step}-{i}: she stays in bed until noon")
                    };
                    svc.post_turn(who, &s.id, &line).await.unwrap();
                    if patient { m.patient_lines.push(line) } else { m.family_lines.push(line) }
                }
                let out = svc.close_session(who, &s.id).await.unwrap();
                if patient { m.patient_sessions.insert(s.id) } else { m.family_sessions.insert(s.id) };
                if let Some(job) = out.job_id {
                    match svc.wait_job(&job).await.unwrap() {
                        moodbridge_service::model::JobStatus::Done { report_id } => {
                            if !m.reports.contains(&report_id) {
                                m.reports.push(report_id);
                            }
                        }
                        other => return Err(TestCaseError::fail(format!("{other:?}"))),
                    }
                }
            }
            Op::NextDay => clock.advance(DAY),
            Op::Revise(i, mild) if !m.reports.is_empty() => {
                let id = &m.reports[i % m.reports.len()];
                let sev = if mild { SeverityDegree::Mild } else { SeverityDegree::Severe };
                let edits = ReportEdits { severity_degree: Some(sev), ..Default::default() };
                let res = svc.revise_report(&d1, id, &edits).await;
                prop_assert_eq!(res.is_ok(), !m.released.contains(id));
            }
            Op::Release(i) if !m.reports.is_empty() => {
                let id = m.reports[i % m.reports.len()].clone();
                svc.release_report(&d1, &id).await.unwrap();
                m.released.insert(id);
            }
            _ => {}
        }

        let doctor = views(&svc, &d1);
        let all: BTreeSet<String> = m.patient_sessions.union(&m.family_sessions).cloned().collect();
        prop_assert_eq!(&doctor.dialogues, &all);
        prop_assert_eq!(doctor.reports.len(), m.reports.len());
        prop_assert_eq!(doctor.drafts, m.reports.len() - m.released.len());

        let patient = views(&svc, &p1);
        prop_assert_eq!(&patient.dialogues, &m.patient_sessions);
        prop_assert_eq!(&patient.reports, &m.released);
        prop_assert_eq!(patient.drafts, 0);
        prop_assert!(patient.advice.iter().all(|k| *k == AdviceKind::TreatmentStrategy));
        prop_assert_eq!(patient.advice.len(), m.released.len());
        for l in &m.family_lines {
            prop_assert!(!patient.text.contains(l.as_str()), "patient sees family text {}", l);
        }

        let family = views(&svc, &f1);
        prop_assert_eq!(&family.dialogues, &m.family_sessions);
        prop_assert_eq!(&family.reports, &m.released);
        prop_assert!(family.advice.iter().all(|k| *k == AdviceKind::CareAdvice));
        for l in &m.patient_lines {
            prop_assert!(!family.text.contains(l.as_str()), "family sees patient text {}", l);
        }
    }
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 48, ..ProptestConfig::default() })]

    #[test]
    fn visibility_matrix_holds(ops in prop::collection::vec(op(), 1..14)) {
        let rt = tokio::runtime::Builder::new_current_thread().enable_all().build().unwrap();
        rt.block_on(run(ops))?;
    }
}
