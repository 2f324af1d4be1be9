use std::path::PathBuf;
use std::sync::Arc;

use anyhow::{bail, Context};
use clap::Subcommand;
use moodbridge_core::domain::{Opening, SystemClock};
use moodbridge_core::{Dialogue, Role};

#[derive(Subcommand)]
pub enum ReportCmd {
    /// Generate a report from a patient and/or family dialogue (JSON files).
    Generate {
        #[arg(long)]
        patient_dialogue: Option<PathBuf>,
        #[arg(long)]
        family_dialogue: Option<PathBuf>,
        #[arg(long)]
        config: PathBuf,
    },
}

fn read_dialogue(path: &PathBuf, role: Role) -> anyhow::Result<Dialogue> {
    let raw = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let d: Dialogue = serde_json::from_str(&raw).with_context(|| format!("parsing {}", path.display()))?;
    if d.subject_role != role {
        bail!("{}: expected a {} dialogue, got {}", path.display(), role.as_str(), d.subject_role.as_str());
    }
    d.validate(Opening::Any).with_context(|| path.display().to_string())?;
    Ok(d)
}

pub async fn run(cmd: ReportCmd) -> anyhow::Result<()> {
    let ReportCmd::Generate { patient_dialogue, family_dialogue, config } = cmd;
    if patient_dialogue.is_none() && family_dialogue.is_none() {
        bail!("give --patient-dialogue, --family-dialogue or both");
    }
    let cfg = crate::load_config(&config)?;
    let patient = patient_dialogue.as_ref().map(|p| read_dialogue(p, Role::Patient)).transpose()?;
    let family = family_dialogue.as_ref().map(|p| read_dialogue(p, Role::Family)).transpose()?;
    let pipeline = cfg.build_pipeline(Arc::new(SystemClock))?;
    let pc = cfg.pipeline_config(&pipeline);
    let report = pipeline.generate_report(patient.as_ref(), family.as_ref(), &pc).await?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}
