//! Shared record types and their on-disk formats.
//!
//! Corpora, EC datasets, score files, model outputs and live metrics are
//! line-delimited JSON (one object per line). Evaluation matrices are a JSON
//! header line followed by a whitespace-separated numeric body.
//!
//! All text fields are NFC-normalized at load time so that exact-match
//! comparisons are platform independent.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use unicode_normalization::{is_nfc_quick, IsNormalized, UnicodeNormalization};

use crate::error::{Error, Result};

/// NFC-normalize `s`, borrowing-free fast path for already-normalized text.
pub fn nfc(s: &str) -> String {
    match is_nfc_quick(s.chars()) {
        IsNormalized::Yes => s.to_owned(),
        _ => s.nfc().collect(),
    }
}

/// Byte equality after NFC normalization. Case sensitive.
pub fn nfc_eq(a: &str, b: &str) -> bool {
    a == b || nfc(a) == nfc(b)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub text: String,
    #[serde(default = "default_source_tag")]
    pub source_tag: String,
}

fn default_source_tag() -> String {
    "web".to_owned()
}

impl Document {
    pub fn new(id: impl Into<String>, text: impl Into<String>, source_tag: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            text: nfc(&text.into()),
            source_tag: source_tag.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Original,
    Synthetic,
    SyntheticFiltered,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCategory {
    Verb,
    MissingWord,
    Plural,
    Capitalization,
    WordOrder,
    Article,
    Preposition,
    Spelling,
    Other,
}

impl ErrorCategory {
    pub const ALL: [ErrorCategory; 9] = [
        ErrorCategory::Verb,
        ErrorCategory::MissingWord,
        ErrorCategory::Plural,
        ErrorCategory::Capitalization,
        ErrorCategory::WordOrder,
        ErrorCategory::Article,
        ErrorCategory::Preposition,
        ErrorCategory::Spelling,
        ErrorCategory::Other,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ErrorCategory::Verb => "verb",
            ErrorCategory::MissingWord => "missing_word",
            ErrorCategory::Plural => "plural",
            ErrorCategory::Capitalization => "capitalization",
            ErrorCategory::WordOrder => "word_order",
            ErrorCategory::Article => "article",
            ErrorCategory::Preposition => "preposition",
            ErrorCategory::Spelling => "spelling",
            ErrorCategory::Other => "other",
        }
    }
}

impl fmt::Display for ErrorCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ErrorCategory {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ErrorCategory::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown error category {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorAnnotation {
    pub category: ErrorCategory,
    pub description: String,
}

/// One (corrupted source, clean target) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ECExample {
    pub id: String,
    pub source: String,
    pub target: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight: Option<f64>,
    pub provenance: Provenance,
    #[serde(default)]
    pub error_annotations: Vec<ErrorAnnotation>,
}

impl ECExample {
    pub fn new(
        id: impl Into<String>,
        source: impl Into<String>,
        target: impl Into<String>,
        provenance: Provenance,
    ) -> Self {
        Self {
            id: id.into(),
            source: nfc(&source.into()),
            target: nfc(&target.into()),
            weight: None,
            provenance,
            error_annotations: Vec::new(),
        }
    }

    fn normalize(&mut self) {
        self.source = nfc(&self.source);
        self.target = nfc(&self.target);
        for a in &mut self.error_annotations {
            a.description = nfc(&a.description);
        }
    }
}

/// Per-sample small-LM scores: `s_p` from the public model, `s_f` from the
/// domain model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredSample {
    pub sample_id: String,
    pub s_p: f64,
    pub s_f: f64,
}

/// Top-k ranked candidates produced by one model for one sample.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutputRecord {
    pub sample_id: String,
    pub candidates: Vec<String>,
}

/// Live metrics for one deployed model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LiveMetricsRecord {
    pub model_id: String,
    pub metrics: BTreeMap<String, f64>,
}

/// Per-(model, sample) binary measurements plus per-model live metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalMatrix {
    pub model_ids: Vec<String>,
    pub sample_ids: Vec<String>,
    pub metric_names: Vec<String>,
    /// K rows of N entries in {0, 1}.
    pub chi: Vec<Vec<u8>>,
    /// K rows of d live metrics.
    pub live_metrics: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct EvalMatrixHeader {
    model_ids: Vec<String>,
    sample_ids: Vec<String>,
    metric_names: Vec<String>,
}

impl EvalMatrix {
    pub fn num_models(&self) -> usize {
        self.model_ids.len()
    }

    pub fn num_samples(&self) -> usize {
        self.sample_ids.len()
    }

    pub fn num_metrics(&self) -> usize {
        self.metric_names.len()
    }

    /// Checks shapes, the binary domain of `chi`, finiteness and id uniqueness.
    pub fn validate(&self) -> Result<()> {
        let k = self.num_models();
        let n = self.num_samples();
        let d = self.num_metrics();
        if k == 0 {
            return Err(Error::invalid("evaluation matrix has no models"));
        }
        if d == 0 {
            return Err(Error::invalid("evaluation matrix has no metrics"));
        }
        check_unique(&self.model_ids)?;
        check_unique(&self.sample_ids)?;
        if self.chi.len() != k || self.live_metrics.len() != k {
            return Err(Error::invalid(format!(
                "expected {k} chi rows and {k} metric rows, got {} and {}",
                self.chi.len(),
                self.live_metrics.len()
            )));
        }
        for (j, row) in self.chi.iter().enumerate() {
            if row.len() != n {
                return Err(Error::invalid(format!("chi row {j} has {} entries, expected {n}", row.len())));
            }
            if let Some(bad) = row.iter().find(|&&x| x > 1) {
                return Err(Error::invalid(format!("chi row {j} has entry {bad} outside {{0,1}}")));
            }
        }
        for (j, row) in self.live_metrics.iter().enumerate() {
            if row.len() != d {
                return Err(Error::invalid(format!("metric row {j} has {} entries, expected {d}", row.len())));
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid(format!("metric row {j} has a non-finite value")));
            }
        }
        Ok(())
    }

    /// A copy without model `j`.
    pub fn without_model(&self, j: usize) -> EvalMatrix {
        let keep = |i: usize| i != j;
        EvalMatrix {
            model_ids: filter_idx(&self.model_ids, keep),
            sample_ids: self.sample_ids.clone(),
            metric_names: self.metric_names.clone(),
            chi: filter_idx(&self.chi, keep),
            live_metrics: filter_idx(&self.live_metrics, keep),
        }
    }
}

fn filter_idx<T: Clone>(xs: &[T], keep: impl Fn(usize) -> bool) -> Vec<T> {
    xs.iter()
        .enumerate()
        .filter(|(i, _)| keep(*i))
        .map(|(_, x)| x.clone())
        .collect()
}

fn check_unique(ids: &[String]) -> Result<()> {
    let mut seen = HashSet::with_capacity(ids.len());
    for id in ids {
        if !seen.insert(id.as_str()) {
            return Err(Error::DuplicateId(id.clone()));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Generic line-delimited JSON helpers

/// Reads one JSON object per line, skipping blank lines.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line).map_err(|e| Error::format(path, idx + 1, e.to_string()))?;
        out.push(item);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for item in items {
        let line = serde_json::to_string(item).expect("record types always serialize");
        w.write_all(line.as_bytes()).map_err(|e| Error::io(path, e))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes a pretty-printed JSON document with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("record types always serialize");
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.line(), e.to_string()))
}

/// Line numbers of non-blank lines, aligned with what [`read_jsonl`] returns.
fn record_lines(path: &Path) -> Result<Vec<usize>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, _)| i + 1)
        .collect())
}

// ---------------------------------------------------------------------------
// Corpora

/// Reads a corpus file, verifying non-empty text and unique ids.
pub fn read_corpus(path: &Path) -> Result<Vec<Document>> {
    let mut docs: Vec<Document> = read_jsonl(path)?;
    let lines = record_lines(path)?;
    let mut seen = HashSet::with_capacity(docs.len());
    for (doc, &line) in docs.iter_mut().zip(&lines) {
        if doc.text.trim().is_empty() {
            return Err(Error::format(path, line, format!("document {:?} has empty text", doc.id)));
        }
        if !seen.insert(doc.id.clone()) {
            return Err(Error::DuplicateId(doc.id.clone()));
        }
        doc.text = nfc(&doc.text);
    }
    Ok(docs)
}

pub fn write_corpus(docs: &[Document], path: &Path) -> Result<()> {
    write_jsonl(path, docs)
}

// ---------------------------------------------------------------------------
// EC datasets

pub fn read_ec_dataset(path: &Path) -> Result<Vec<ECExample>> {
    let mut examples: Vec<ECExample> = read_jsonl(path)?;
    let lines = record_lines(path)?;
    let mut seen = HashSet::with_capacity(examples.len());
    for (ex, &line) in examples.iter_mut().zip(&lines) {
        if ex.source.is_empty() || ex.target.is_empty() {
            return Err(Error::format(path, line, format!("example {:?} has empty source or target", ex.id)));
        }
        if let Some(w) = ex.weight {
            if !(w.is_finite() && w > 0.0) {
                return Err(Error::format(path, line, format!("example {:?} has invalid weight {w}", ex.id)));
            }
        }
        if !seen.insert(ex.id.clone()) {
            return Err(Error::DuplicateId(ex.id.clone()));
        }
        ex.normalize();
    }
    Ok(examples)
}

pub fn write_ec_dataset(examples: &[ECExample], path: &Path) -> Result<()> {
    write_jsonl(path, examples)
}

// ---------------------------------------------------------------------------
// Scores, outputs, live metrics

pub fn read_scores(path: &Path) -> Result<Vec<ScoredSample>> {
    let scores: Vec<ScoredSample> = read_jsonl(path)?;
    let lines = record_lines(path)?;
    let mut seen = HashSet::with_capacity(scores.len());
    for (s, &line) in scores.iter().zip(&lines) {
        if !(s.s_p.is_finite() && s.s_f.is_finite()) {
            return Err(Error::format(path, line, format!("non-finite score for {:?}", s.sample_id)));
        }
        if !seen.insert(s.sample_id.clone()) {
            return Err(Error::DuplicateId(s.sample_id.clone()));
        }
    }
    Ok(scores)
}

pub fn write_scores(scores: &[ScoredSample], path: &Path) -> Result<()> {
    write_jsonl(path, scores)
}

pub fn read_outputs(path: &Path) -> Result<Vec<OutputRecord>> {
    let mut outputs: Vec<OutputRecord> = read_jsonl(path)?;
    let lines = record_lines(path)?;
    let mut seen = HashSet::with_capacity(outputs.len());
    for (o, &line) in outputs.iter_mut().zip(&lines) {
        if o.candidates.is_empty() {
            return Err(Error::format(path, line, format!("no candidates for {:?}", o.sample_id)));
        }
        if !seen.insert(o.sample_id.clone()) {
            return Err(Error::DuplicateId(o.sample_id.clone()));
        }
        for c in &mut o.candidates {
            *c = nfc(c);
        }
    }
    Ok(outputs)
}

pub fn read_live_metrics(path: &Path) -> Result<Vec<LiveMetricsRecord>> {
    let records: Vec<LiveMetricsRecord> = read_jsonl(path)?;
    let lines = record_lines(path)?;
    let names: Option<Vec<&String>> = records.first().map(|r| r.metrics.keys().collect());
    for (r, &line) in records.iter().zip(&lines) {
        if Some(r.metrics.keys().collect::<Vec<_>>()) != names {
            return Err(Error::format(path, line, "metric names differ between models"));
        }
        if r.metrics.values().any(|v| !v.is_finite()) {
            return Err(Error::format(path, line, "non-finite live metric"));
        }
    }
    check_unique(&records.iter().map(|r| r.model_id.clone()).collect::<Vec<_>>())?;
    Ok(records)
}

// ---------------------------------------------------------------------------
// Evaluation matrices

pub fn write_eval_matrix(m: &EvalMatrix, path: &Path) -> Result<()> {
    m.validate()?;
    let header = EvalMatrixHeader {
        model_ids: m.model_ids.clone(),
        sample_ids: m.sample_ids.clone(),
        metric_names: m.metric_names.clone(),
    };
    let mut out = serde_json::to_string(&header).expect("header serializes");
    out.push('\n');
    for row in &m.chi {
        let line: Vec<&str> = row.iter().map(|&x| if x == 1 { "1" } else { "0" }).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    for row in &m.live_metrics {
        let line: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_eval_matrix(path: &Path) -> Result<EvalMatrix> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate();
    let (_, first) = lines.next().ok_or_else(|| Error::format(path, 1, "missing header"))?;
    let header: EvalMatrixHeader =
        serde_json::from_str(first).map_err(|e| Error::format(path, 1, e.to_string()))?;
    let k = header.model_ids.len();
    let n = header.sample_ids.len();

    let mut chi = Vec::with_capacity(k);
    let mut live = Vec::with_capacity(k);
    for _ in 0..k {
        let (idx, line) = lines.next().ok_or_else(|| Error::format(path, 0, "missing chi row"))?;
        let row = line
            .split_whitespace()
            .map(|tok| match tok {
                "0" => Ok(0u8),
                "1" => Ok(1u8),
                other => Err(Error::format(path, idx + 1, format!("chi entry {other:?} outside {{0,1}}"))),
            })
            .collect::<Result<Vec<u8>>>()?;
        if row.len() != n {
            return Err(Error::format(path, idx + 1, format!("expected {n} chi entries, got {}", row.len())));
        }
        chi.push(row);
    }
    for _ in 0..k {
        let (idx, line) = lines.next().ok_or_else(|| Error::format(path, 0, "missing live-metric row"))?;
        let row = line
            .split_whitespace()
            .map(|tok| {
                tok.parse::<f64>()
                    .map_err(|e| Error::format(path, idx + 1, format!("bad metric {tok:?}: {e}")))
            })
            .collect::<Result<Vec<f64>>>()?;
        live.push(row);
    }
    if let Some((idx, extra)) = lines.find(|(_, l)| !l.trim().is_empty()) {
        return Err(Error::format(path, idx + 1, format!("unexpected trailing content {extra:?}")));
    }
    let m = EvalMatrix {
        model_ids: header.model_ids,
        sample_ids: header.sample_ids,
        metric_names: header.metric_names,
        chi,
        live_metrics: live,
    };
    m.validate()?;
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use tempfile::tempdir;

    fn write_lines(path: &Path, lines: &[&str]) {
        std::fs::write(path, lines.join("\n")).unwrap();
    }

    #[test]
    fn read_corpus_keeps_file_order() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("c.jsonl");
        write_lines(
            &p,
            &[
                r#"{"id":"b","text":"second?","source_tag":"web"}"#,
                r#"{"id":"a","text":"first","source_tag":"web"}"#,
                r#"{"id":"c","text":"third","source_tag":"synthetic"}"#,
            ],
        );
        let docs = read_corpus(&p).unwrap();
        let ids: Vec<_> = docs.iter().map(|d| d.id.as_str()).collect();
        assert_eq!(ids, ["b", "a", "c"]);
    }

    #[test]
    fn read_corpus_rejects_duplicate_id() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("c.jsonl");
        write_lines(&p, &[r#"{"id":"a","text":"x"}"#, r#"{"id":"a","text":"y"}"#]);
        match read_corpus(&p) {
            Err(Error::DuplicateId(id)) => assert_eq!(id, "a"),
            other => panic!("expected duplicate id error, got {other:?}"),
        }
    }

    #[test]
    fn read_corpus_reports_line_of_malformed_record() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("c.jsonl");
        write_lines(&p, &[r#"{"id":"a","text":"x"}"#, r#"{"id":"b","#]);
        match read_corpus(&p) {
            Err(Error::Format { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn empty_corpus_is_empty() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("c.jsonl");
        std::fs::write(&p, "").unwrap();
        assert!(read_corpus(&p).unwrap().is_empty());
    }

    #[test]
    fn corpus_text_is_nfc_normalized() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("c.jsonl");
        // "e" + combining acute accent
        write_lines(&p, &["{\"id\":\"a\",\"text\":\"cafe\u{0301}\"}"]);
        let docs = read_corpus(&p).unwrap();
        assert_eq!(docs[0].text, "caf\u{e9}");
    }

    #[test]
    fn weight_and_multiline_target_round_trip() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("ec.jsonl");
        let mut a = ECExample::new("a", "she have cat", "She has a cat.\nSecond line.", Provenance::Synthetic);
        a.weight = Some(1.005);
        a.error_annotations.push(ErrorAnnotation {
            category: ErrorCategory::Verb,
            description: "\"have\" should be \"has\"".into(),
        });
        let mut b = ECExample::new("b", "x", "y", Provenance::Original);
        b.weight = Some(0.1 + 0.2);
        write_ec_dataset(&[a.clone(), b.clone()], &p).unwrap();
        let back = read_ec_dataset(&p).unwrap();
        assert_eq!(back, vec![a, b]);
        assert_eq!(back[1].weight.unwrap().to_bits(), (0.1f64 + 0.2).to_bits());
    }

    #[test]
    fn hundred_examples_round_trip() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("ec.jsonl");
        let xs: Vec<_> = (0..100)
            .map(|i| ECExample::new(format!("ex{i}"), format!("src {i}"), format!("tgt {i}"), Provenance::Synthetic))
            .collect();
        write_ec_dataset(&xs, &p).unwrap();
        assert_eq!(read_ec_dataset(&p).unwrap(), xs);
    }

    #[test]
    fn write_to_missing_directory_is_io_error() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("no/such/dir/ec.jsonl");
        assert!(matches!(write_ec_dataset(&[], &p), Err(Error::Io { .. })));
    }

    fn small_matrix() -> EvalMatrix {
        EvalMatrix {
            model_ids: vec!["m1".into(), "m2".into()],
            sample_ids: vec!["s1".into(), "s2".into(), "s3".into()],
            metric_names: vec!["ctr".into()],
            chi: vec![vec![1, 0, 1], vec![0, 0, 1]],
            live_metrics: vec![vec![0.125], vec![1e-7]],
        }
    }

    #[test]
    fn eval_matrix_round_trip() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        let m = small_matrix();
        write_eval_matrix(&m, &p).unwrap();
        assert_eq!(read_eval_matrix(&p).unwrap(), m);
    }

    #[test]
    fn eval_matrix_rejects_non_binary_chi() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        write_eval_matrix(&small_matrix(), &p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap().replacen("1 0 1", "1 2 1", 1);
        std::fs::write(&p, text).unwrap();
        match read_eval_matrix(&p) {
            Err(Error::Format { line, message, .. }) => {
                assert_eq!(line, 2);
                assert!(message.contains("outside"));
            }
            other => panic!("expected format error, got {other:?}"),
        }
        let mut m = small_matrix();
        m.chi[1][0] = 3;
        assert!(m.validate().is_err());
    }

    #[test]
    fn eval_matrix_rejects_missing_rows() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        write_eval_matrix(&small_matrix(), &p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        let truncated: Vec<&str> = text.lines().take(4).collect();
        std::fs::write(&p, truncated.join("\n")).unwrap();
        assert!(read_eval_matrix(&p).is_err());
    }

    fn text_strategy() -> impl Strategy<Value = String> {
        // Arbitrary unicode including newlines and quotes; records are NFC at
        // construction, so the generator normalizes too.
        proptest::string::string_regex("[a-zA-Z0-9 \n\t\"\\\\\u{e9}\u{301}\u{4e2d}\u{1f600}*]{1,40}")
            .unwrap()
            .prop_map(|s| nfc(&s))
            .prop_filter("non-empty", |s| !s.is_empty())
    }

    proptest! {
        #[test]
        fn ec_dataset_read_write_identity(
            rows in proptest::collection::vec(
                (text_strategy(), text_strategy(), proptest::option::of(0.01f64..2.0), 0usize..3),
                0..20,
            )
        ) {
            let dir = tempdir().unwrap();
            let p = dir.path().join("ec.jsonl");
            let xs: Vec<ECExample> = rows
                .into_iter()
                .enumerate()
                .map(|(i, (s, t, w, prov))| ECExample {
                    id: format!("id-{i}"),
                    source: s,
                    target: t.clone(),
                    weight: w,
                    provenance: [Provenance::Original, Provenance::Synthetic, Provenance::SyntheticFiltered][prov],
                    error_annotations: vec![ErrorAnnotation { category: ErrorCategory::ALL[i % 9], description: t }],
                })
                .collect();
            write_ec_dataset(&xs, &p).unwrap();
            prop_assert_eq!(read_ec_dataset(&p).unwrap(), xs);
        }

        #[test]
        fn corpus_and_scores_read_write_identity(
            rows in proptest::collection::vec((text_strategy(), -50.0f64..0.0, -50.0f64..0.0), 0..20)
        ) {
            let dir = tempdir().unwrap();
            let cp = dir.path().join("c.jsonl");
            let sp = dir.path().join("s.jsonl");
            let docs: Vec<Document> = rows.iter().enumerate()
                .filter(|(_, (t, _, _))| !t.trim().is_empty())
                .map(|(i, (t, _, _))| Document::new(format!("d{i}"), t.clone(), "web"))
                .collect();
            let scores: Vec<ScoredSample> = rows.iter().enumerate()
                .map(|(i, (_, p, f))| ScoredSample { sample_id: format!("d{i}"), s_p: *p, s_f: *f })
                .collect();
            write_corpus(&docs, &cp).unwrap();
            write_scores(&scores, &sp).unwrap();
            prop_assert_eq!(read_corpus(&cp).unwrap(), docs);
            prop_assert_eq!(read_scores(&sp).unwrap(), scores);
        }

        #[test]
        fn eval_matrix_read_write_identity(
            k in 1usize..5, n in 1usize..12, d in 1usize..4, seed in any::<u64>()
        ) {
            use rand::Rng;
            let mut rng = crate::util::rng_for(seed, "em");
            let m = EvalMatrix {
                model_ids: (0..k).map(|j| format!("model {j}")).collect(),
                sample_ids: (0..n).map(|i| format!("s\u{e9}{i}")).collect(),
                metric_names: (0..d).map(|m| format!("metric{m}")).collect(),
                chi: (0..k).map(|_| (0..n).map(|_| rng.gen_range(0..2u8)).collect()).collect(),
                live_metrics: (0..k).map(|_| (0..d).map(|_| rng.gen::<f64>() * 10f64.powi(rng.gen_range(-9..3))).collect()).collect(),
            };
            let dir = tempdir().unwrap();
            let p = dir.path().join("m.jsonl");
            write_eval_matrix(&m, &p).unwrap();
            prop_assert_eq!(read_eval_matrix(&p).unwrap(), m);
        }
    }
}
