use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{Args, Subcommand, ValueEnum};
use moodbridge_core::dataset::read_jsonl;
use moodbridge_core::eval::{
    align_by_id, binary_metrics, confusion, fold_class_counts, per_class_f1, stratified_kfold, EvalRecord, Table,
};
use moodbridge_core::{BinaryClass, SeverityDegree};
use serde_json::json;

#[derive(Clone, Copy, ValueEnum)]
pub enum Format {
    Text,
    Csv,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum StratifyBy {
    Binary,
    Severity,
}

#[derive(Args)]
pub struct PairArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    truth: PathBuf,
    #[arg(long, value_enum, default_value = "text")]
    format: Format,
}

#[derive(Subcommand)]
pub enum EvalCmd {
    /// ACC/PRE/REC/F1 with depressed as the positive class.
    Binary(PairArgs),
    /// Per-degree PRE/REC/F1 and weighted F1.
    Severity(PairArgs),
    /// Stratified fold assignment, one JSON line per fold.
    Kfold {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value_t = 5)]
        k: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long, value_enum, default_value = "binary")]
        by: StratifyBy,
    },
}

fn read(path: &Path) -> anyhow::Result<Vec<EvalRecord>> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    read_jsonl(BufReader::new(f)).with_context(|| path.display().to_string())
}

fn render(t: &Table, format: Format) -> String {
    match format {
        Format::Text => t.render_text(),
        Format::Csv => t.render_csv(),
    }
}

pub fn run(cmd: EvalCmd) -> anyhow::Result<()> {
    match cmd {
        EvalCmd::Binary(a) => {
            let (preds, truths) = (read(&a.pred)?, read(&a.truth)?);
            let pairs = align_by_id(&preds, &truths)?;
            let p: Vec<BinaryClass> = pairs.iter().map(|(p, _)| p.binary).collect();
            let t: Vec<BinaryClass> = pairs.iter().map(|(_, t)| t.binary).collect();
            let c = confusion(&p, &t, &BinaryClass::Depressed)?;
            let name = a.pred.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            print!("{}", render(&Table::binary(&[(name, binary_metrics(&c))]), a.format));
        }
        EvalCmd::Severity(a) => {
            let (preds, truths) = (read(&a.pred)?, read(&a.truth)?);
            let pairs = align_by_id(&preds, &truths)?;
            let p: Vec<SeverityDegree> = pairs.iter().map(|(p, _)| p.severity).collect();
            let t: Vec<SeverityDegree> = pairs.iter().map(|(_, t)| t.severity).collect();
            let supports = per_class_f1(&p, &t, &SeverityDegree::ALL)?;
            print!("{}", render(&Table::per_class(&supports), a.format));
        }
        EvalCmd::Kfold { input, k, seed, by } => {
            let items = read(&input)?;
            let labels: Vec<&str> = items
                .iter()
                .map(|r| match by {
                    StratifyBy::Binary => r.binary.as_str(),
                    StratifyBy::Severity => r.severity.as_str(),
                })
                .collect();
            let folds = stratified_kfold(&labels, k, seed)?;
            let counts = fold_class_counts(&labels, &folds);
            for (i, (fold, counts)) in folds.iter().zip(counts).enumerate() {
                let ids: Vec<&str> = fold.iter().map(|&j| items[j].id.as_str()).collect();
                println!("{}", json!({"fold": i, "ids": ids, "counts": counts}));
            }
        }
    }
    Ok(())
}
