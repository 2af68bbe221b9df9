//! Offline evaluation of corrector outputs: sequence accuracy, top-k good
//! ratio under a judge, and weighted variants.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::data::{nfc, nfc_eq, read_outputs, ECExample, EvalMatrix, LiveMetricsRecord, OutputRecord};
use crate::error::{Error, Result};
use crate::llm::{HttpClientConfig, HttpCompletionClient};
use crate::util::Summary;

/// Ranked candidates from one model, keyed by sample id.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelOutputs {
    pub model_id: String,
    pub records: Vec<OutputRecord>,
}

impl ModelOutputs {
    pub fn new(model_id: impl Into<String>, records: Vec<OutputRecord>) -> Self {
        Self {
            model_id: model_id.into(),
            records,
        }
    }

    /// Loads an outputs file; the model id is the file stem.
    pub fn read(path: &Path) -> Result<Self> {
        let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        Ok(Self::new(id, read_outputs(path)?))
    }

    /// Candidate lists in dataset order.
    fn aligned<'a>(&'a self, dataset: &[ECExample]) -> Result<Vec<&'a [String]>> {
        let by_id: HashMap<&str, &OutputRecord> = self.records.iter().map(|r| (r.sample_id.as_str(), r)).collect();
        dataset
            .iter()
            .map(|ex| {
                by_id.get(ex.id.as_str()).map(|r| r.candidates.as_slice()).ok_or_else(|| {
                    Error::Misaligned(format!("model {:?} has no output for sample {:?}", self.model_id, ex.id))
                })
            })
            .collect()
    }
}

/// Decides whether a candidate correction is acceptable for a target.
pub trait Judge: Send + Sync {
    fn name(&self) -> &str;
    fn judge(&self, candidate: &str, target: &str) -> Result<bool>;
}

/// Byte equality after NFC normalization.
#[derive(Debug, Clone, Copy, Default)]
pub struct ExactJudge;

impl Judge for ExactJudge {
    fn name(&self) -> &str {
        "exact"
    }

    fn judge(&self, candidate: &str, target: &str) -> Result<bool> {
        Ok(nfc_eq(candidate, target))
    }
}

/// Equality after lowercasing, collapsing whitespace and stripping trailing
/// punctuation.
#[derive(Debug, Clone, Copy, Default)]
pub struct NormalizedJudge;

pub fn normalize_for_judging(s: &str) -> String {
    let lowered = nfc(s).to_lowercase();
    let collapsed = lowered.split_whitespace().collect::<Vec<_>>().join(" ");
    collapsed
        .trim_end_matches(|c: char| c.is_ascii_punctuation() || c.is_whitespace())
        .to_owned()
}

impl Judge for NormalizedJudge {
    fn name(&self) -> &str {
        "normalized"
    }

    fn judge(&self, candidate: &str, target: &str) -> Result<bool> {
        Ok(normalize_for_judging(candidate) == normalize_for_judging(target))
    }
}

pub const DEFAULT_JUDGE_TEMPLATE: &str = "Target sentence: {target}\n\
Candidate correction: {candidate}\n\
Is the candidate an acceptable correction with the same meaning as the target? Answer yes or no.";

/// LLM judge over HTTP. Answers must start with "yes" or "no"; verdicts are
/// cached per (candidate, target).
pub struct ExternalJudge {
    client: HttpCompletionClient,
    template: String,
    cache: Mutex<HashMap<(String, String), bool>>,
}

impl ExternalJudge {
    pub fn new(client: HttpCompletionClient, template: impl Into<String>) -> Result<Self> {
        let template = template.into();
        if !template.contains("{candidate}") || !template.contains("{target}") {
            return Err(Error::Config("judge template needs {candidate} and {target} placeholders".into()));
        }
        Ok(Self {
            client,
            template,
            cache: Mutex::new(HashMap::new()),
        })
    }

    pub fn from_config(config: HttpClientConfig, template: Option<String>) -> Result<Self> {
        Self::new(
            HttpCompletionClient::from_env(config),
            template.unwrap_or_else(|| DEFAULT_JUDGE_TEMPLATE.to_owned()),
        )
    }

    pub fn cached_verdicts(&self) -> usize {
        self.cache.lock().expect("judge cache poisoned").len()
    }
}

fn parse_verdict(answer: &str) -> Result<bool> {
    let a = answer.trim_start().to_lowercase();
    if a.starts_with("yes") {
        Ok(true)
    } else if a.starts_with("no") {
        Ok(false)
    } else {
        Err(Error::Client(format!("judge answer is neither yes nor no: {:?}", answer.trim())))
    }
}

impl Judge for ExternalJudge {
    fn name(&self) -> &str {
        "http"
    }

    fn judge(&self, candidate: &str, target: &str) -> Result<bool> {
        let key = (candidate.to_owned(), target.to_owned());
        if let Some(v) = self.cache.lock().expect("judge cache poisoned").get(&key) {
            return Ok(*v);
        }
        let prompt = self.template.replace("{candidate}", candidate).replace("{target}", target);
        let verdict = parse_verdict(&self.client.complete(&prompt)?)?;
        self.cache.lock().expect("judge cache poisoned").insert(key, verdict);
        Ok(verdict)
    }
}

/// Per-sample best-of-`k` judgement, in dataset order. Judging runs on up
/// to `concurrency` threads.
pub fn export_chi_row_with(
    outputs: &ModelOutputs,
    dataset: &[ECExample],
    judge: &dyn Judge,
    k: usize,
    concurrency: usize,
) -> Result<Vec<u8>> {
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    let lists = outputs.aligned(dataset)?;
    if let Some((ex, _)) = dataset.iter().zip(&lists).find(|(_, l)| l.len() < k) {
        return Err(Error::invalid(format!(
            "model {:?} has fewer than {k} candidates for sample {:?}",
            outputs.model_id, ex.id
        )));
    }
    let judge_one = |i: usize| -> Result<u8> {
        for c in &lists[i][..k] {
            if judge.judge(c, &dataset[i].target)? {
                return Ok(1);
            }
        }
        Ok(0)
    };
    let n = dataset.len();
    let workers = concurrency.clamp(1, n.max(1));
    if workers == 1 {
        return (0..n).map(judge_one).collect();
    }
    let chunk = n.div_ceil(workers);
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..n)
            .step_by(chunk)
            .map(|start| {
                let judge_one = &judge_one;
                scope.spawn(move || (start..(start + chunk).min(n)).map(judge_one).collect::<Result<Vec<u8>>>())
            })
            .collect();
        let mut out = Vec::with_capacity(n);
        for h in handles {
            out.extend(h.join().expect("judge worker panicked")?);
        }
        Ok(out)
    })
}

pub fn export_chi_row(outputs: &ModelOutputs, dataset: &[ECExample], judge: &dyn Judge, k: usize) -> Result<Vec<u8>> {
    export_chi_row_with(outputs, dataset, judge, k, 1)
}

fn mean_u8(xs: &[u8]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    xs.iter().map(|&x| f64::from(x)).sum::<f64>() / xs.len() as f64
}

/// Fraction of samples whose top-1 candidate equals the target (NFC).
pub fn sequence_accuracy(outputs: &ModelOutputs, dataset: &[ECExample]) -> Result<f64> {
    Ok(mean_u8(&export_chi_row(outputs, dataset, &ExactJudge, 1)?))
}

pub fn good_ratio(outputs: &ModelOutputs, dataset: &[ECExample], judge: &dyn Judge, k: usize) -> Result<f64> {
    Ok(mean_u8(&export_chi_row(outputs, dataset, judge, k)?))
}

/// `(1/N) * sum_i w_i * chi_i`.
pub fn weighted_from_chi(chi: &[u8], dataset: &[ECExample], weights: &BTreeMap<String, f64>) -> Result<f64> {
    if dataset.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (c, ex) in chi.iter().zip(dataset) {
        let w = weights
            .get(&ex.id)
            .ok_or_else(|| Error::Misaligned(format!("no weight for sample {:?}", ex.id)))?;
        total += w * f64::from(*c);
    }
    Ok(total / dataset.len() as f64)
}

pub fn weighted_metric(
    outputs: &ModelOutputs,
    dataset: &[ECExample],
    judge: &dyn Judge,
    k: usize,
    weights: &BTreeMap<String, f64>,
) -> Result<f64> {
    let chi = export_chi_row(outputs, dataset, judge, k)?;
    weighted_from_chi(&chi, dataset, weights)
}

/// Weights taken from the examples themselves.
pub fn weights_of(dataset: &[ECExample]) -> Result<BTreeMap<String, f64>> {
    dataset
        .iter()
        .map(|ex| {
            ex.weight
                .map(|w| (ex.id.clone(), w))
                .ok_or_else(|| Error::invalid(format!("example {:?} has no weight", ex.id)))
        })
        .collect()
}

/// Builds the measurement matrix for a set of deployed models: one chi
/// row per live-metrics record, in record order. Every record must list
/// the same metric names.
pub fn build_eval_matrix(
    dataset: &[ECExample],
    outputs: &[ModelOutputs],
    live: &[LiveMetricsRecord],
    judge: &dyn Judge,
    k: usize,
) -> Result<EvalMatrix> {
    let by_model: HashMap<&str, &ModelOutputs> = outputs.iter().map(|o| (o.model_id.as_str(), o)).collect();
    let metric_names: Vec<String> = live
        .first()
        .map(|r| r.metrics.keys().cloned().collect())
        .unwrap_or_default();
    let mut chi = Vec::with_capacity(live.len());
    let mut live_metrics = Vec::with_capacity(live.len());
    for r in live {
        if !r.metrics.keys().eq(metric_names.iter()) {
            return Err(Error::Misaligned(format!("model {:?} reports different metric names", r.model_id)));
        }
        let o = by_model
            .get(r.model_id.as_str())
            .ok_or_else(|| Error::Misaligned(format!("no outputs for model {:?}", r.model_id)))?;
        chi.push(export_chi_row(o, dataset, judge, k)?);
        live_metrics.push(r.metrics.values().copied().collect());
    }
    let m = EvalMatrix {
        model_ids: live.iter().map(|r| r.model_id.clone()).collect(),
        sample_ids: dataset.iter().map(|e| e.id.clone()).collect(),
        metric_names,
        chi,
        live_metrics,
    };
    m.validate()?;
    Ok(m)
}

// ---------------------------------------------------------------------------
// Report grid

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub dataset: String,
    pub runs: usize,
    pub top1: Summary,
    pub top1_w: Option<Summary>,
    pub top3: Option<Summary>,
    pub top3_w: Option<Summary>,
}

pub struct GridInput<'a> {
    pub name: String,
    pub dataset: &'a [ECExample],
    /// One entry per training run.
    pub runs: Vec<ModelOutputs>,
}

/// Top-1 / Top-1 (w) / Top-3 / Top-3 (w) per dataset, as mean ± std over
/// runs. Top-3 columns are left empty when any run has fewer than three
/// candidates for some sample.
pub fn evaluate_grid(inputs: &[GridInput<'_>], judge: &dyn Judge, weights: Option<&BTreeMap<String, f64>>) -> Result<Vec<GridRow>> {
    let mut rows = Vec::with_capacity(inputs.len());
    for input in inputs {
        if input.runs.is_empty() {
            return Err(Error::invalid(format!("no outputs for dataset {:?}", input.name)));
        }
        let has_top3 = input.runs.iter().all(|r| r.records.iter().all(|o| o.candidates.len() >= 3));
        let mut cols: [Vec<f64>; 4] = Default::default();
        for run in &input.runs {
            for (k, plain, weighted) in [(1, 0, 1), (3, 2, 3)] {
                if k == 3 && !has_top3 {
                    continue;
                }
                let chi = export_chi_row(run, input.dataset, judge, k)?;
                cols[plain].push(mean_u8(&chi));
                if let Some(w) = weights {
                    cols[weighted].push(weighted_from_chi(&chi, input.dataset, w)?);
                }
            }
        }
        let summary = |xs: &Vec<f64>| (!xs.is_empty()).then(|| Summary::of(xs));
        rows.push(GridRow {
            dataset: input.name.clone(),
            runs: input.runs.len(),
            top1: Summary::of(&cols[0]),
            top1_w: summary(&cols[1]),
            top3: summary(&cols[2]),
            top3_w: summary(&cols[3]),
        });
    }
    Ok(rows)
}

fn cell(s: &Option<Summary>, runs: usize) -> String {
    match s {
        None => "-".to_owned(),
        Some(s) if runs > 1 => format!("{:.4} ± {:.4}", s.mean, s.std),
        Some(s) => format!("{:.4}", s.mean),
    }
}

pub fn format_grid(rows: &[GridRow]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:<16} {:>18} {:>18} {:>18} {:>18}", "Dataset", "Top-1", "Top-1 (w)", "Top-3", "Top-3 (w)");
    for r in rows {
        let _ = writeln!(
            out,
            "{:<16} {:>18} {:>18} {:>18} {:>18}",
            r.dataset,
            cell(&Some(r.top1), r.runs),
            cell(&r.top1_w, r.runs),
            cell(&r.top3, r.runs),
            cell(&r.top3_w, r.runs)
        );
    }
    out
}
