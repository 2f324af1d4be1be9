//! Classification metrics for binary and severity evaluation, stratified
//! k-fold splitting and table rendering.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{BinaryClass, DiagnosticReport, SeverityDegree};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EvalError {
    #[error("length mismatch: {preds} predictions vs {truths} truths")]
    LengthMismatch { preds: usize, truths: usize },
    #[error("no samples")]
    Empty,
    #[error("value `{0}` is not one of the declared classes")]
    UnknownClass(String),
    #[error("total support is zero")]
    ZeroSupport,
    #[error("k must be at least 2, got {0}")]
    KTooSmall(usize),
    #[error("k = {k} exceeds the {n} items")]
    KTooLarge { k: usize, n: usize },
    #[error("no prediction for id `{0}`")]
    MissingPrediction(String),
    #[error("prediction for unknown id `{0}`")]
    UnknownId(String),
    #[error("duplicate id `{0}`")]
    DuplicateId(String),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn new(tp: u64, fp: u64, fn_: u64, tn: u64) -> Self {
        Self { tp, tn, fp, fn_ }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }
}

/// `None` marks a metric whose denominator is zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsResult {
    pub acc: Option<f64>,
    pub pre: Option<f64>,
    pub rec: Option<f64>,
    pub f1: Option<f64>,
}

fn check_lengths<T>(preds: &[T], truths: &[T]) -> Result<(), EvalError> {
    if preds.len() != truths.len() {
        return Err(EvalError::LengthMismatch { preds: preds.len(), truths: truths.len() });
    }
    if preds.is_empty() {
        return Err(EvalError::Empty);
    }
    Ok(())
}

pub fn confusion<T: PartialEq>(preds: &[T], truths: &[T], positive: &T) -> Result<ConfusionCounts, EvalError> {
    check_lengths(preds, truths)?;
    let mut c = ConfusionCounts::default();
    for (p, t) in preds.iter().zip(truths) {
        match (p == positive, t == positive) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn binary_metrics(c: &ConfusionCounts) -> MetricsResult {
    let pre = ratio(c.tp, c.tp + c.fp);
    let rec = ratio(c.tp, c.tp + c.fn_);
    let f1 = match (pre, rec) {
        (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
        _ => None,
    };
    MetricsResult { acc: ratio(c.tp + c.tn, c.total()), pre, rec, f1 }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSupport {
    pub class_name: String,
    pub support: u64,
    /// Undefined F1 counts as 0 here.
    pub f1: f64,
    pub metrics: MetricsResult,
}

/// One-vs-rest metrics per declared class, in declaration order.
pub fn per_class_f1<T>(preds: &[T], truths: &[T], classes: &[T]) -> Result<Vec<ClassSupport>, EvalError>
where
    T: PartialEq + std::fmt::Display,
{
    check_lengths(preds, truths)?;
    if let Some(v) = preds.iter().chain(truths).find(|v| !classes.contains(v)) {
        return Err(EvalError::UnknownClass(v.to_string()));
    }
    classes
        .iter()
        .map(|class| {
            let c = confusion(preds, truths, class)?;
            let metrics = binary_metrics(&c);
            Ok(ClassSupport {
                class_name: class.to_string(),
                support: c.tp + c.fn_,
                f1: metrics.f1.unwrap_or(0.0),
                metrics,
            })
        })
        .collect()
}

pub fn weighted_f1(supports: &[ClassSupport]) -> Result<f64, EvalError> {
    let total: u64 = supports.iter().map(|s| s.support).sum();
    if total == 0 {
        return Err(EvalError::ZeroSupport);
    }
    Ok(supports.iter().map(|s| s.support as f64 * s.f1).sum::<f64>() / total as f64)
}

/// Splits item indices into `k` folds. Items of each class are shuffled
/// with the seed, then dealt round-robin; the dealing position carries over
/// from one class to the next so fold sizes stay balanced too.
pub fn stratified_kfold<T: Ord>(labels: &[T], k: usize, seed: u64) -> Result<Vec<Vec<usize>>, EvalError> {
    if k < 2 {
        return Err(EvalError::KTooSmall(k));
    }
    if k > labels.len() {
        return Err(EvalError::KTooLarge { k, n: labels.len() });
    }
    let mut by_class: BTreeMap<&T, Vec<usize>> = BTreeMap::new();
    for (i, l) in labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut folds = vec![Vec::new(); k];
    let mut next = 0usize;
    for members in by_class.values_mut() {
        members.shuffle(&mut rng);
        for &i in members.iter() {
            folds[next % k].push(i);
            next += 1;
        }
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    Ok(folds)
}

pub fn extract_eval_labels(report: &DiagnosticReport) -> (BinaryClass, SeverityDegree) {
    (report.binary_class, report.severity)
}

/// One line of a prediction or truth file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub id: String,
    pub binary: BinaryClass,
    pub severity: SeverityDegree,
}

impl EvalRecord {
    pub fn from_report(id: impl Into<String>, report: &DiagnosticReport) -> Self {
        let (binary, severity) = extract_eval_labels(report);
        Self { id: id.into(), binary, severity }
    }
}

/// Pairs predictions with truths by id, in truth order. Every truth needs a
/// prediction and every prediction a truth.
pub fn align_by_id<'a>(
    preds: &'a [EvalRecord],
    truths: &'a [EvalRecord],
) -> Result<Vec<(&'a EvalRecord, &'a EvalRecord)>, EvalError> {
    let mut by_id: HashMap<&str, &EvalRecord> = HashMap::new();
    for p in preds {
        if by_id.insert(p.id.as_str(), p).is_some() {
            return Err(EvalError::DuplicateId(p.id.clone()));
        }
    }
    let mut out = Vec::with_capacity(truths.len());
    for t in truths {
        let p = by_id.remove(t.id.as_str()).ok_or_else(|| EvalError::MissingPrediction(t.id.clone()))?;
        out.push((p, t));
    }
    if let Some(extra) = preds.iter().find(|p| by_id.contains_key(p.id.as_str())) {
        return Err(EvalError::UnknownId(extra.id.clone()));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Cell {
    Value(Option<f64>),
    Count(u64),
    Blank,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<(String, Vec<Cell>)>,
}

const UNDEFINED_TEXT: &str = "n/a*";
const UNDEFINED_CSV: &str = "undefined";
const FOOTNOTE: &str =
    "* undefined: zero denominator. Reported as undefined here, counted as 0 in weighted F1.";

impl Table {
    pub fn binary<S: AsRef<str>>(rows: &[(S, MetricsResult)]) -> Self {
        Self {
            columns: ["ACC", "PRE", "REC", "F1"].map(String::from).to_vec(),
            rows: rows
                .iter()
                .map(|(name, m)| {
                    (name.as_ref().to_string(), vec![Cell::Value(m.acc), Cell::Value(m.pre), Cell::Value(m.rec), Cell::Value(m.f1)])
                })
                .collect(),
        }
    }

    /// Per-class PRE/REC/F1 with support, then a weighted F1 row.
    pub fn per_class(supports: &[ClassSupport]) -> Self {
        let mut rows: Vec<(String, Vec<Cell>)> = supports
            .iter()
            .map(|s| {
                (
                    s.class_name.clone(),
                    vec![Cell::Value(s.metrics.pre), Cell::Value(s.metrics.rec), Cell::Value(s.metrics.f1), Cell::Count(s.support)],
                )
            })
            .collect();
        let total = supports.iter().map(|s| s.support).sum();
        rows.push((
            "weighted".into(),
            vec![Cell::Blank, Cell::Blank, Cell::Value(weighted_f1(supports).ok()), Cell::Count(total)],
        ));
        Self { columns: ["PRE", "REC", "F1", "support"].map(String::from).to_vec(), rows }
    }

    fn has_undefined(&self) -> bool {
        self.rows.iter().flat_map(|(_, c)| c).any(|c| *c == Cell::Value(None))
    }

    fn text_cell(c: &Cell) -> String {
        match c {
            Cell::Value(Some(v)) => format!("{v:.4}"),
            Cell::Value(None) => UNDEFINED_TEXT.into(),
            Cell::Count(n) => n.to_string(),
            Cell::Blank => String::new(),
        }
    }

    pub fn render_text(&self) -> String {
        let body: Vec<(String, Vec<String>)> =
            self.rows.iter().map(|(l, cs)| (l.clone(), cs.iter().map(Self::text_cell).collect())).collect();
        let label_w = body.iter().map(|(l, _)| l.chars().count()).max().unwrap_or(0);
        let widths: Vec<usize> = self
            .columns
            .iter()
            .enumerate()
            .map(|(i, h)| body.iter().map(|(_, cs)| cs[i].len()).chain([h.len()]).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        let line = |label: &str, cells: &[String]| {
            let mut s = format!("{label:<label_w$}");
            for (c, w) in cells.iter().zip(&widths) {
                let _ = write!(s, "  {c:>w$}");
            }
            s.trim_end().to_string()
        };
        out.push_str(&line("", &self.columns));
        out.push('\n');
        for (l, cs) in &body {
            out.push_str(&line(l, cs));
            out.push('\n');
        }
        if self.has_undefined() {
            out.push_str(FOOTNOTE);
            out.push('\n');
        }
        out
    }

    pub fn render_csv(&self) -> String {
        let mut out = String::from("name");
        for c in &self.columns {
            out.push(',');
            out.push_str(c);
        }
        out.push('\n');
        for (label, cells) in &self.rows {
            out.push_str(&csv_escape(label));
            for c in cells {
                out.push(',');
                match c {
                    Cell::Value(Some(v)) => {
                        let _ = write!(out, "{v:.4}");
                    }
                    Cell::Value(None) => out.push_str(UNDEFINED_CSV),
                    Cell::Count(n) => {
                        let _ = write!(out, "{n}");
                    }
                    Cell::Blank => {}
                }
            }
            out.push('\n');
        }
        out
    }
}

fn csv_escape(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Class counts per fold, for checking stratification.
pub fn fold_class_counts<T: Ord + Clone>(labels: &[T], folds: &[Vec<usize>]) -> Vec<BTreeMap<T, usize>> {
    folds
        .iter()
        .map(|f| {
            let mut m = BTreeMap::new();
            for &i in f {
                *m.entry(labels[i].clone()).or_default() += 1;
            }
            m
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use SeverityDegree::*;

    fn close(a: Option<f64>, b: f64) -> bool {
        a.is_some_and(|a| (a - b).abs() < 1e-12)
    }

    #[test]
    fn confusion_examples() {
        let c = confusion(&[1, 1, 0, 0], &[1, 1, 0, 0], &1).unwrap();
        assert_eq!(c, ConfusionCounts::new(2, 0, 0, 2));
        let c = confusion(&[1, 1, 1, 0], &[1, 0, 1, 1], &1).unwrap();
        assert_eq!(c, ConfusionCounts::new(2, 1, 1, 0));
        assert!(matches!(confusion(&[1], &[1, 0], &1), Err(EvalError::LengthMismatch { .. })));
        assert_eq!(confusion::<u8>(&[], &[], &1), Err(EvalError::Empty));
    }

    #[test]
    fn metric_examples() {
        let m = binary_metrics(&ConfusionCounts::new(22, 3, 10, 14));
        assert!(close(m.acc, 36.0 / 49.0) && close(m.pre, 22.0 / 25.0) && close(m.rec, 22.0 / 32.0));
        let r4 = |v: Option<f64>| format!("{:.4}", v.unwrap());
        assert_eq!([r4(m.acc), r4(m.pre), r4(m.rec), r4(m.f1)], ["0.7347", "0.8800", "0.6875", "0.7719"]);

        let m = binary_metrics(&ConfusionCounts::new(2, 0, 0, 2));
        assert_eq!([m.acc, m.pre, m.rec, m.f1], [Some(1.0); 4]);

        // (0,5,0,5) in field order tp, tn, fp, fn
        let m = binary_metrics(&ConfusionCounts { tp: 0, fp: 0, fn_: 5, tn: 5 });
        assert_eq!((m.pre, m.rec, m.f1), (None, Some(0.0), None));
    }

    /// Brute force over every confusion matrix with 49 samples: the matrices
    /// that round to the published 0.735 / 0.880 / 0.688 / 0.772.
    #[test]
    fn table_row_brute_force() {
        let r3 = |v: Option<f64>| v.map(|v| (v * 1000.0).round() as i64);
        let mut hits = Vec::new();
        for tp in 0..=49u64 {
            for fp in 0..=49 - tp {
                for fn_ in 0..=49 - tp - fp {
                    let c = ConfusionCounts::new(tp, fp, fn_, 49 - tp - fp - fn_);
                    let m = binary_metrics(&c);
                    if [r3(m.acc), r3(m.pre), r3(m.rec), r3(m.f1)] == [Some(735), Some(880), Some(688), Some(772)] {
                        hits.push(c);
                    }
                }
            }
        }
        assert_eq!(hits, vec![ConfusionCounts::new(22, 3, 10, 14)]);
    }

    #[test]
    fn per_class_examples() {
        let truths = [Normal, Normal, Mild, Severe];
        let preds = [Normal, Mild, Mild, Severe];
        let s = per_class_f1(&preds, &truths, &SeverityDegree::ALL).unwrap();
        let f: Vec<f64> = s.iter().map(|s| s.f1).collect();
        assert!((f[0] - 2.0 / 3.0).abs() < 1e-12 && (f[1] - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!((f[2], s[2].support, s[2].metrics.f1), (0.0, 0, None));
        assert_eq!(f[3], 1.0);
        assert!((weighted_f1(&s).unwrap() - 0.75).abs() < 1e-12);

        let perfect = per_class_f1(&SeverityDegree::ALL, &SeverityDegree::ALL, &SeverityDegree::ALL).unwrap();
        assert!(perfect.iter().all(|s| s.f1 == 1.0));

        assert_eq!(per_class_f1(&[Severe], &[Mild], &[Mild]), Err(EvalError::UnknownClass("severe".into())));
    }

    fn support(name: &str, n: u64, f1: f64) -> ClassSupport {
        let m = MetricsResult { acc: None, pre: None, rec: None, f1: Some(f1) };
        ClassSupport { class_name: name.into(), support: n, f1, metrics: m }
    }

    #[test]
    fn weighted_examples() {
        assert_eq!(weighted_f1(&[support("A", 3, 0.5), support("B", 1, 1.0)]).unwrap(), 0.625);
        assert_eq!(weighted_f1(&[support("A", 7, 0.3)]).unwrap(), 0.3);
        assert_eq!(weighted_f1(&[support("A", 0, 0.3)]), Err(EvalError::ZeroSupport));
    }

    #[test]
    fn kfold_examples() {
        let labels: Vec<bool> = (0..10).map(|i| i < 5).collect();
        let folds = stratified_kfold(&labels, 5, 42).unwrap();
        for counts in fold_class_counts(&labels, &folds) {
            assert_eq!(counts.get(&true), Some(&1));
            assert_eq!(counts.get(&false), Some(&1));
        }
        assert_eq!(folds, stratified_kfold(&labels, 5, 42).unwrap());

        let one = stratified_kfold(&[0; 4], 2, 1).unwrap();
        assert_eq!(one.iter().map(Vec::len).collect::<Vec<_>>(), [2, 2]);
        assert_eq!(stratified_kfold(&labels, 11, 0), Err(EvalError::KTooLarge { k: 11, n: 10 }));
        assert_eq!(stratified_kfold(&labels, 1, 0), Err(EvalError::KTooSmall(1)));
    }

    #[test]
    fn alignment() {
        let r = |id: &str, b| EvalRecord { id: id.into(), binary: b, severity: Normal };
        let truths = [r("a", BinaryClass::Depressed), r("b", BinaryClass::NotDepressed)];
        let preds = [r("b", BinaryClass::NotDepressed), r("a", BinaryClass::NotDepressed)];
        let pairs = align_by_id(&preds, &truths).unwrap();
        assert_eq!(pairs[0].0.id, "a");
        assert_eq!(align_by_id(&preds[..1], &truths), Err(EvalError::MissingPrediction("a".into())));
        let extra = [preds[0].clone(), preds[1].clone(), r("z", BinaryClass::Depressed)];
        assert_eq!(align_by_id(&extra, &truths), Err(EvalError::UnknownId("z".into())));
    }

    #[test]
    fn table_rendering() {
        let m = binary_metrics(&ConfusionCounts::new(22, 3, 10, 14));
        let t = Table::binary(&[("ours", m)]);
        assert_eq!(t.render_csv(), "name,ACC,PRE,REC,F1\nours,0.7347,0.8800,0.6875,0.7719\n");
        assert!(!t.render_text().contains('*'));

        let s = per_class_f1(&[Normal, Mild, Mild, Severe], &[Normal, Normal, Mild, Severe], &SeverityDegree::ALL).unwrap();
        let t = Table::per_class(&s);
        let csv = t.render_csv();
        assert!(csv.contains("moderate,undefined,undefined,undefined,0\n"), "{csv}");
        assert!(csv.ends_with("weighted,,,0.7500,4\n"));
        let text = t.render_text();
        assert!(text.contains(UNDEFINED_TEXT) && text.ends_with(&format!("{FOOTNOTE}\n")));
    }

    fn brute(preds: &[bool], truths: &[bool]) -> (Option<f64>, Option<f64>, Option<f64>, Option<f64>) {
        let n = preds.len() as f64;
        let correct = preds.iter().zip(truths).filter(|(p, t)| p == t).count() as f64;
        let predicted_pos: Vec<_> = preds.iter().zip(truths).filter(|(p, _)| **p).collect();
        let actual_pos: Vec<_> = preds.iter().zip(truths).filter(|(_, t)| **t).collect();
        let pre = (!predicted_pos.is_empty())
            .then(|| predicted_pos.iter().filter(|(_, t)| **t).count() as f64 / predicted_pos.len() as f64);
        let rec = (!actual_pos.is_empty())
            .then(|| actual_pos.iter().filter(|(p, _)| **p).count() as f64 / actual_pos.len() as f64);
        let f1 = match (pre, rec) {
            (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
            _ => None,
        };
        (Some(correct / n), pre, rec, f1)
    }

    fn agree(a: Option<f64>, b: Option<f64>) -> bool {
        match (a, b) {
            (Some(a), Some(b)) => (a - b).abs() <= 1e-12,
            (None, None) => true,
            _ => false,
        }
    }

    proptest! {
        #[test]
        fn metrics_match_per_sample_oracle(pairs in prop::collection::vec((any::<bool>(), any::<bool>()), 1..200)) {
            let (preds, truths): (Vec<bool>, Vec<bool>) = pairs.into_iter().unzip();
            let m = binary_metrics(&confusion(&preds, &truths, &true).unwrap());
            let (acc, pre, rec, f1) = brute(&preds, &truths);
            prop_assert!(agree(m.acc, acc) && agree(m.pre, pre) && agree(m.rec, rec) && agree(m.f1, f1));
            for v in [m.acc, m.pre, m.rec, m.f1].into_iter().flatten() {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }

        #[test]
        fn accuracy_permutation_invariant(pairs in prop::collection::vec((any::<bool>(), any::<bool>()), 1..60), seed in any::<u64>()) {
            let mut shuffled = pairs.clone();
            shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let acc = |ps: &[(bool, bool)]| {
                let (p, t): (Vec<bool>, Vec<bool>) = ps.iter().copied().unzip();
                binary_metrics(&confusion(&p, &t, &true).unwrap()).acc
            };
            prop_assert_eq!(acc(&pairs), acc(&shuffled));
        }

        #[test]
        fn two_class_weighted_matches_direct(pairs in prop::collection::vec((any::<bool>(), any::<bool>()), 1..100)) {
            let (preds, truths): (Vec<bool>, Vec<bool>) = pairs.into_iter().unzip();
            let s = per_class_f1(&preds, &truths, &[true, false]).unwrap();
            let direct = |pos: bool| {
                let f = brute(
                    &preds.iter().map(|p| *p == pos).collect::<Vec<_>>(),
                    &truths.iter().map(|t| *t == pos).collect::<Vec<_>>(),
                ).3.unwrap_or(0.0);
                truths.iter().filter(|t| **t == pos).count() as f64 * f
            };
            let expected = (direct(true) + direct(false)) / truths.len() as f64;
            prop_assert!((weighted_f1(&s).unwrap() - expected).abs() < 1e-12);
        }

        #[test]
        fn kfold_partitions_and_balances(labels in prop::collection::vec(0u8..4, 2..80), k in 2usize..8, seed in any::<u64>()) {
            prop_assume!(k <= labels.len());
            let folds = stratified_kfold(&labels, k, seed).unwrap();
            let mut all: Vec<usize> = folds.iter().flatten().copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..labels.len()).collect::<Vec<_>>());
            let counts = fold_class_counts(&labels, &folds);
            for class in 0u8..4 {
                let per: Vec<usize> = counts.iter().map(|m| m.get(&class).copied().unwrap_or(0)).collect();
                prop_assert!(per.iter().max().unwrap() - per.iter().min().unwrap() <= 1);
            }
            prop_assert_eq!(&folds, &stratified_kfold(&labels, k, seed).unwrap());
        }
    }
}
