use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::Context;
use clap::{Subcommand, ValueEnum};
use moodbridge_core::dataset::{
    read_jsonl, split_train_test, write_jsonl, DatasetBuilder, DialogueCorpus, LabeledPair, Post, Provenance,
    Quarantined,
};
use moodbridge_core::domain::SystemClock;
use moodbridge_core::Dialogue;
use moodbridge_service::ServiceConfig;

#[derive(Clone, Copy, ValueEnum)]
pub enum ProvenanceArg {
    Rewritten,
    Clinical,
}

#[derive(Subcommand)]
pub enum DatasetCmd {
    /// Rewrite posts ({"id","text","label"}) into counselor-first dialogues.
    Rewrite {
        #[arg(long)]
        posts: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// Defaults to `<out>.quarantine.jsonl`.
        #[arg(long)]
        quarantine: Option<PathBuf>,
        #[arg(long, default_value_t = 4)]
        workers: usize,
    },
    /// Generate a report label for every labelled dialogue.
    Label {
        #[arg(long)]
        dialogues: PathBuf,
        /// Criteria corpus; overrides `corpus_path` from the config.
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        quarantine: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "rewritten")]
        provenance: ProvenanceArg,
        #[arg(long, default_value_t = 4)]
        workers: usize,
    },
    /// Turn labelled pairs into instruction records.
    Export {
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: PathBuf,
    },
    /// Seeded train/test split of any JSONL file. Lines are copied verbatim.
    Split {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value_t = 0.1)]
        test: f64,
        #[arg(long)]
        seed: u64,
        /// Defaults to `<in stem>.train.jsonl` next to the input.
        #[arg(long)]
        train_out: Option<PathBuf>,
        /// Defaults to `<in stem>.test.jsonl` next to the input.
        #[arg(long)]
        test_out: Option<PathBuf>,
    },
}

fn read<T: serde::de::DeserializeOwned>(path: &Path) -> anyhow::Result<Vec<T>> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    read_jsonl(BufReader::new(f)).with_context(|| path.display().to_string())
}

fn write<T: serde::Serialize>(path: &Path, items: &[T]) -> anyhow::Result<()> {
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    write_jsonl(BufWriter::new(f), items).with_context(|| path.display().to_string())
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}.{suffix}.jsonl"))
}

fn builder(cfg: &ServiceConfig, workers: usize) -> anyhow::Result<DatasetBuilder> {
    let pipeline = cfg.build_pipeline(Arc::new(SystemClock))?;
    Ok(DatasetBuilder::new(Arc::new(pipeline)).with_workers(workers))
}

fn write_quarantine(path: Option<PathBuf>, out: &Path, items: &[Quarantined]) -> anyhow::Result<()> {
    let path = path.unwrap_or_else(|| sibling(out, "quarantine"));
    write(&path, items)?;
    if !items.is_empty() {
        log::warn!("{} records quarantined in {}", items.len(), path.display());
    }
    Ok(())
}

pub async fn run(cmd: DatasetCmd) -> anyhow::Result<()> {
    match cmd {
        DatasetCmd::Rewrite { posts, out, config, quarantine, workers } => {
            let cfg = crate::load_config(&config)?;
            let posts: Vec<Post> = read(&posts)?;
            let (dialogues, bad) = builder(&cfg, workers)?.rewrite_posts(&posts).await;
            write(&out, &dialogues)?;
            write_quarantine(quarantine, &out, &bad)?;
            eprintln!("rewrote {} of {} posts", dialogues.len(), posts.len());
        }
        DatasetCmd::Label { dialogues, corpus, out, config, quarantine, provenance, workers } => {
            let mut cfg = crate::load_config(&config)?;
            if let Some(c) = corpus {
                cfg.corpus_path = c;
            }
            let items: Vec<Dialogue> = read(&dialogues)?;
            let provenance = match provenance {
                ProvenanceArg::Rewritten => Provenance::Rewritten,
                ProvenanceArg::Clinical => Provenance::Clinical,
            };
            let stem = dialogues.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            let corpus = DialogueCorpus::new(stem, provenance, items)?;
            let outcome = builder(&cfg, workers)?.build_report_labels(&corpus, &cfg.prompt_options()).await?;
            write(&out, &outcome.pairs)?;
            write_quarantine(quarantine, &out, &outcome.quarantined)?;
            eprintln!("labelled {} of {} dialogues", outcome.pairs.len(), corpus.len());
        }
        DatasetCmd::Export { pairs, out, config } => {
            let cfg = crate::load_config(&config)?;
            let pairs: Vec<LabeledPair> = read(&pairs)?;
            let records = builder(&cfg, 1)?.export_instruction_records(&pairs, &cfg.prompt_options())?;
            write(&out, &records)?;
            eprintln!("exported {} records", records.len());
        }
        DatasetCmd::Split { input, test, seed, train_out, test_out } => {
            let raw = std::fs::read_to_string(&input).with_context(|| format!("reading {}", input.display()))?;
            let mut lines = Vec::new();
            for (i, line) in raw.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
                serde_json::from_str::<serde_json::Value>(line)
                    .with_context(|| format!("{} line {}", input.display(), i + 1))?;
                lines.push(line);
            }
            let (train, held) = split_train_test(&lines, test, seed)?;
            for (path, part) in [
                (train_out.unwrap_or_else(|| sibling(&input, "train")), &train),
                (test_out.unwrap_or_else(|| sibling(&input, "test")), &held),
            ] {
                let mut w = BufWriter::new(File::create(&path).with_context(|| format!("creating {}", path.display()))?);
                for l in part.iter() {
                    writeln!(w, "{l}")?;
                }
                w.flush()?;
            }
            eprintln!("train {} / test {}", train.len(), held.len());
        }
    }
    Ok(())
}
