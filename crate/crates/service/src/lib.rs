//! The assessment service: role-aware chat sessions, draft reports from
//! same-day patient and family dialogues, doctor review and release,
//! privacy-filtered timelines, and the HTTP API over them.

pub mod config;
pub mod error;
pub mod http;
pub mod model;
pub mod service;
pub mod store;

pub use config::ServiceConfig;
pub use error::ServiceError;
pub use service::{AssessmentService, ServiceOptions};
pub use store::Store;
