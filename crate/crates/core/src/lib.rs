//! Building blocks for a doctor–patient–family depression assessment
//! workbench: criteria retrieval, prompt assembly, an LLM gateway, the
//! report pipeline, instruction-dataset construction and evaluation metrics.

pub mod dataset;
pub mod domain;
pub mod eval;
pub mod gateway;
pub mod pipeline;
pub mod prompts;
pub mod retrieval;

pub use domain::{
    band_hamd, severity_to_binary, validate_report, Advice, AdviceKind, BinaryClass, DiagnosticReport, Dialogue,
    Finding, Role, SeverityDegree, SeverityStandard, SourceLabel, Speaker, Turn,
};
