//! Scripted end-to-end dataset run: posts are rewritten, validated, labelled,
//! exported and read back. Posts labelled HAMD 3 or HAMD 20 receive a report
//! that contradicts their label and must be quarantined.

use std::sync::Arc;

use moodbridge_core::dataset::{
    read_jsonl, write_jsonl, DatasetBuilder, DialogueCorpus, InstructionRecord, Post, Provenance, Quarantined,
};
use moodbridge_core::domain::{FixedClock, SourceLabel};
use moodbridge_core::gateway::{ScriptedProvider, ScriptedRule};
use moodbridge_core::pipeline::ReportPipeline;
use moodbridge_core::prompts::{PromptForge, PromptOptions};
use moodbridge_core::retrieval::{CriteriaCorpus, HashingEmbedder};
use moodbridge_core::SeverityStandard;

pub const HAMD_CYCLE: [u8; 5] = [3, 10, 20, 30, 5];
pub const CONTRADICTED: [u8; 2] = [3, 20];

const TRANSCRIPT: &str = "Here is the conversation.\n\
Counselor: Hello, what would you like to talk about today?\n\
User: I have not been sleeping well for weeks.\n\
Counselor: That sounds exhausting. What keeps you awake?\n\
User: Mostly worrying about work and feeling that\n\
nothing I do matters.\n\
Counselor: Thank you for telling me. Let us look at this together.";

fn report(binary: &str, severity: &str) -> String {
    let findings = if binary == "depressed" {
        serde_json::json!([{"symptom": "insomnia", "evidence": "I have not been sleeping well for weeks.",
            "criterion": "insomnia nearly every day", "agreement": true}])
    } else {
        serde_json::json!([])
    };
    let subtype = if binary == "depressed" { "major depressive disorder" } else { "none" };
    serde_json::json!({
        "binary_class": binary,
        "severity_degree": severity,
        "findings": findings,
        "subtype_category": subtype,
        "narrative": "Based on the dialogue."
    })
    .to_string()
}

pub fn rules() -> Vec<ScriptedRule> {
    let r = |p: &str, resp: String| ScriptedRule::regex(p, resp).unwrap();
    vec![
        r(r"Rewrite the social media post", TRANSCRIPT.to_string()),
        // injected contradictions
        r(r"(?s)HAMD=3\b.*exactly one JSON object", report("depressed", "moderate")),
        r(r"(?s)HAMD=20\b.*exactly one JSON object", report("not_depressed", "normal")),
        r(r"(?s)severity=mild.*exactly one JSON object", report("depressed", "mild")),
        r(r"(?s)severity=moderate.*exactly one JSON object", report("depressed", "moderate")),
        r(r"(?s)severity=severe.*exactly one JSON object", report("depressed", "severe")),
        r(r"(?s)severity=normal.*exactly one JSON object", report("not_depressed", "normal")),
    ]
}

pub fn posts(n: usize) -> Vec<Post> {
    (0..n)
        .map(|i| Post {
            id: format!("p{i:03}"),
            text: format!("Post {i}: I lie awake most nights and feel like nothing matters."),
            label: SourceLabel::from_hamd(HAMD_CYCLE[i % HAMD_CYCLE.len()]).unwrap(),
            source: "forum".into(),
        })
        .collect()
}

pub fn builder() -> DatasetBuilder {
    let corpus = CriteriaCorpus::new(
        "criteria",
        [
            ("major depressive disorder", "Depressed mood most of the day. Insomnia nearly every day."),
            ("none", "No depressive symptoms are present."),
        ]
        .map(|(a, b)| (a.to_string(), b.to_string())),
    )
    .unwrap();
    let pipeline = ReportPipeline::new(
        Arc::new(ScriptedProvider::new(rules())),
        Arc::new(HashingEmbedder),
        corpus,
        SeverityStandard::hamd_default(),
        PromptForge::english(),
        Arc::new(FixedClock(1_709_542_800)),
    );
    DatasetBuilder::new(Arc::new(pipeline))
}

pub struct RoundTrip {
    pub posts: Vec<Post>,
    pub rewrite_quarantined: Vec<Quarantined>,
    pub label_quarantined: Vec<Quarantined>,
    pub records: Vec<InstructionRecord>,
    pub exported: Vec<u8>,
    pub reexported: Vec<u8>,
    pub imported: Vec<InstructionRecord>,
}

pub async fn run(n: usize) -> RoundTrip {
    let posts = posts(n);
    let b = builder();
    let (dialogues, rewrite_quarantined) = b.rewrite_posts(&posts).await;
    let corpus = DialogueCorpus::new("rewritten", Provenance::Rewritten, dialogues).unwrap();
    let opts = PromptOptions::default();
    let labelled = b.build_report_labels(&corpus, &opts).await.unwrap();
    let records = b.export_instruction_records(&labelled.pairs, &opts).unwrap();
    let mut exported = Vec::new();
    write_jsonl(&mut exported, &records).unwrap();
    let imported: Vec<InstructionRecord> = read_jsonl(exported.as_slice()).unwrap();
    let mut reexported = Vec::new();
    write_jsonl(&mut reexported, &imported).unwrap();
    RoundTrip {
        posts,
        rewrite_quarantined,
        label_quarantined: labelled.quarantined,
        records,
        exported,
        reexported,
        imported,
    }
}
