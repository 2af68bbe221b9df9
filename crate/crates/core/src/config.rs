//! Pipeline configuration: one TOML file with a global seed, input paths
//! and one section per stage. Unknown keys are rejected.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::ErrorCategory;
use crate::error::{Error, Result};
use crate::grammar::MockInjectorConfig;
use crate::llm::HttpClientConfig;
use crate::mix::{MixSpec, Ratio, Schedule, Strategy};
use crate::reweight::{FitOptions, ReweightParams};
use crate::typo::TypoConfig;
use crate::util::{sha256_hex, stable_hash_str};

/// Pipeline stages in dependency order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Cluster,
    Sample,
    InjectGrammar,
    InjectTypos,
    Score,
    FitReweight,
    Filter,
    Mix,
    Plan,
    Evaluate,
}

impl Stage {
    pub const ALL: [Stage; 10] = [
        Stage::Cluster,
        Stage::Sample,
        Stage::InjectGrammar,
        Stage::InjectTypos,
        Stage::Score,
        Stage::FitReweight,
        Stage::Filter,
        Stage::Mix,
        Stage::Plan,
        Stage::Evaluate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Cluster => "cluster",
            Stage::Sample => "sample",
            Stage::InjectGrammar => "inject-grammar",
            Stage::InjectTypos => "inject-typos",
            Stage::Score => "score",
            Stage::FitReweight => "fit-reweight",
            Stage::Filter => "filter",
            Stage::Mix => "mix",
            Stage::Plan => "plan",
            Stage::Evaluate => "evaluate",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    /// Documents to synthesize from.
    pub corpus: PathBuf,
    /// Precomputed embeddings; the hashing embedder is used when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embeddings: Option<PathBuf>,
    pub public_corpus: PathBuf,
    pub domain_corpus: PathBuf,
    /// Original (human) training pairs used for mixing.
    pub original_train: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub keyboard_layout: Option<PathBuf>,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClusterSection {
    pub k: usize,
    pub per_cluster: usize,
    /// Dimension of the hashing embedder.
    pub dim: usize,
    pub max_iters: usize,
    pub tol: f64,
    pub histogram_buckets: usize,
}

impl Default for ClusterSection {
    fn default() -> Self {
        Self {
            k: 20,
            per_cluster: 10,
            dim: 256,
            max_iters: 100,
            tol: 1e-9,
            histogram_buckets: 10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClientKind {
    #[default]
    Mock,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GrammarSection {
    pub client: ClientKind,
    pub failure_rate: f64,
    pub category_weights: BTreeMap<ErrorCategory, f64>,
    pub errors_per_example: [f64; 3],
    #[serde(skip_serializing_if = "Option::is_none")]
    pub http: Option<HttpClientConfig>,
    pub concurrency: usize,
}

impl Default for GrammarSection {
    fn default() -> Self {
        let mock = MockInjectorConfig::default();
        Self {
            client: ClientKind::Mock,
            failure_rate: mock.failure_rate,
            category_weights: mock.category_weights,
            errors_per_example: mock.errors_per_example,
            http: None,
            concurrency: 4,
        }
    }
}

impl GrammarSection {
    pub fn mock_config(&self, seed: u64) -> MockInjectorConfig {
        MockInjectorConfig {
            seed,
            failure_rate: self.failure_rate,
            category_weights: self.category_weights.clone(),
            errors_per_example: self.errors_per_example,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TypoSection {
    pub p_transpose: f64,
    pub p_omit: f64,
    pub p_repeat: f64,
    pub p_spatial: f64,
    pub max_errors_per_example: usize,
}

impl Default for TypoSection {
    fn default() -> Self {
        let t = TypoConfig::default();
        Self {
            p_transpose: t.p_transpose,
            p_omit: t.p_omit,
            p_repeat: t.p_repeat,
            p_spatial: t.p_spatial,
            max_errors_per_example: t.max_errors_per_example,
        }
    }
}

impl TypoSection {
    pub fn typo_config(&self, seed: u64) -> TypoConfig {
        TypoConfig {
            p_transpose: self.p_transpose,
            p_omit: self.p_omit,
            p_repeat: self.p_repeat,
            p_spatial: self.p_spatial,
            max_errors_per_example: self.max_errors_per_example,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScoringSection {
    pub order: usize,
    pub delta: f64,
}

impl Default for ScoringSection {
    fn default() -> Self {
        Self { order: 3, delta: 0.1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JudgeKind {
    #[default]
    Exact,
    Normalized,
    Http,
}

/// One group of deployed models sharing a metric list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricSetPaths {
    pub name: String,
    /// Directory holding `{model_id}.jsonl` output files.
    pub outputs_dir: PathBuf,
    pub live_metrics: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReweightSection {
    pub c_min: f64,
    pub c_max: f64,
    pub lambda: f64,
    pub init_theta: [f64; 3],
    pub max_iters: usize,
    pub grad_tol: f64,
    pub restarts: usize,
    pub init_sd: f64,
    /// Candidates judged per sample when building chi.
    pub k: usize,
    /// Offline evaluation samples shared by every metric set.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dataset: Option<PathBuf>,
    pub metric_sets: Vec<MetricSetPaths>,
    pub validation_sets: Vec<MetricSetPaths>,
}

impl Default for ReweightSection {
    fn default() -> Self {
        let p = ReweightParams::default();
        let o = FitOptions::default();
        Self {
            c_min: p.c_min,
            c_max: p.c_max,
            lambda: p.lambda,
            init_theta: [0.0; 3],
            max_iters: o.max_iters,
            grad_tol: o.grad_tol,
            restarts: o.restarts,
            init_sd: o.init_sd,
            k: 1,
            dataset: None,
            metric_sets: Vec::new(),
            validation_sets: Vec::new(),
        }
    }
}

impl ReweightSection {
    pub fn init_params(&self) -> ReweightParams {
        ReweightParams {
            theta_f: self.init_theta[0],
            theta_p: self.init_theta[1],
            theta_b: self.init_theta[2],
            c_min: self.c_min,
            c_max: self.c_max,
            lambda: self.lambda,
        }
    }

    pub fn fit_options(&self, seed: u64) -> FitOptions {
        FitOptions {
            max_iters: self.max_iters,
            grad_tol: self.grad_tol,
            restarts: self.restarts,
            seed,
            init_sd: self.init_sd,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalDatasetPaths {
    pub name: String,
    pub dataset: PathBuf,
    /// One outputs file per training run.
    pub runs: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub judge: JudgeKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub http: Option<HttpClientConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub judge_template: Option<String>,
    pub concurrency: usize,
    pub datasets: Vec<EvalDatasetPaths>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            judge: JudgeKind::Exact,
            http: None,
            judge_template: None,
            concurrency: 1,
            datasets: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MixSection {
    pub ratio: Ratio,
    pub filter_threshold: Option<f64>,
    pub strategy: Strategy,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub length: Option<usize>,
    pub schedule: Schedule,
}

impl Default for MixSection {
    fn default() -> Self {
        let spec = MixSpec::default();
        Self {
            ratio: spec.ratio,
            filter_threshold: spec.filter_threshold,
            strategy: Strategy::ContMixFil,
            length: None,
            schedule: Schedule::default(),
        }
    }
}

impl MixSection {
    pub fn spec(&self, seed: u64) -> MixSpec {
        MixSpec {
            ratio: self.ratio,
            filter_threshold: self.filter_threshold,
            seed,
            length: self.length,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub paths: PathsConfig,
    #[serde(default)]
    pub cluster: ClusterSection,
    #[serde(default)]
    pub grammar: GrammarSection,
    #[serde(default)]
    pub typo: TypoSection,
    #[serde(default)]
    pub scoring: ScoringSection,
    #[serde(default)]
    pub reweight: ReweightSection,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub mix: MixSection,
}

fn require(ok: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::Config(msg()))
    }
}

fn as_config(e: Error) -> Error {
    match e {
        Error::Config(_) => e,
        other => Error::Config(other.to_string()),
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    /// Seed for one stage, derived from the global seed.
    pub fn stage_seed(&self, stage: Stage) -> u64 {
        stable_hash_str(self.seed, stage.name())
    }

    /// Hash of the canonical JSON form, ignoring the output directory.
    pub fn config_hash(&self) -> String {
        let mut c = self.clone();
        c.paths.out_dir = PathBuf::new();
        let json = serde_json::to_string(&c).expect("config serializes");
        sha256_hex(json.as_bytes())
    }

    /// Checks every parameter and, for the selected stages, that the
    /// external input files exist under `base`.
    pub fn validate(&self, base: &Path, stages: &[Stage]) -> Result<()> {
        let c = &self.cluster;
        require(c.k > 0 && c.per_cluster > 0 && c.dim > 0 && c.max_iters > 0, || {
            "cluster.k, per_cluster, dim and max_iters must be positive".into()
        })?;
        require(c.tol >= 0.0 && c.histogram_buckets > 0, || {
            "cluster.tol must be non-negative and histogram_buckets positive".into()
        })?;

        let g = &self.grammar;
        g.mock_config(0).validate().map_err(as_config)?;
        require(g.concurrency > 0, || "grammar.concurrency must be positive".into())?;
        require(g.client != ClientKind::Http || g.http.is_some(), || {
            "grammar.client = \"http\" needs a [grammar.http] section".into()
        })?;

        self.typo.typo_config(0).validate().map_err(as_config)?;

        let s = &self.scoring;
        require(s.order >= 1 && s.delta > 0.0 && s.delta.is_finite(), || {
            "scoring.order must be at least 1 and delta positive".into()
        })?;

        let r = &self.reweight;
        r.init_params().validate().map_err(as_config)?;
        require(r.max_iters > 0 && r.grad_tol > 0.0 && r.init_sd >= 0.0 && r.k > 0, || {
            "reweight.max_iters, grad_tol and k must be positive".into()
        })?;
        let mut names = std::collections::BTreeSet::new();
        for set in r.metric_sets.iter().chain(&r.validation_sets) {
            require(names.insert(set.name.as_str()), || format!("duplicate metric set name {:?}", set.name))?;
            require(is_plain_name(&set.name), || format!("metric set name {:?} must be a plain file stem", set.name))?;
        }

        let e = &self.eval;
        require(e.concurrency > 0, || "eval.concurrency must be positive".into())?;
        require(e.judge != JudgeKind::Http || e.http.is_some(), || {
            "eval.judge = \"http\" needs an [eval.http] section".into()
        })?;
        if let Some(t) = &e.judge_template {
            require(t.contains("{candidate}") && t.contains("{target}"), || {
                "eval.judge_template needs {candidate} and {target} placeholders".into()
            })?;
        }
        let mut names = std::collections::BTreeSet::new();
        for d in &e.datasets {
            require(names.insert(d.name.as_str()), || format!("duplicate eval dataset name {:?}", d.name))?;
            require(is_plain_name(&d.name), || format!("eval dataset name {:?} must be a plain file stem", d.name))?;
            require(!d.runs.is_empty(), || format!("eval dataset {:?} lists no runs", d.name))?;
        }

        let m = &self.mix;
        if let Some(t) = m.filter_threshold {
            require(t.is_finite(), || "mix.filter_threshold must be finite".into())?;
        }
        require(m.filter_threshold.is_some() || m.strategy != Strategy::ContMixFil, || {
            "strategy cont_mix_fil needs mix.filter_threshold".into()
        })?;
        let sch = &m.schedule;
        require(sch.synthetic_steps > 0 && sch.synthetic_steps < sch.total_steps, || {
            "mix.schedule.synthetic_steps must be positive and below total_steps".into()
        })?;

        self.validate_inputs(base, stages)
    }

    fn validate_inputs(&self, base: &Path, stages: &[Stage]) -> Result<()> {
        let exists = |p: &Path, what: &str| {
            require(base.join(p).exists(), || format!("{what} {} does not exist", p.display()))
        };
        let p = &self.paths;
        for stage in stages {
            match stage {
                Stage::Cluster => {
                    exists(&p.corpus, "paths.corpus")?;
                    if let Some(e) = &p.embeddings {
                        exists(e, "paths.embeddings")?;
                    }
                }
                Stage::Sample => exists(&p.corpus, "paths.corpus")?,
                Stage::InjectTypos => {
                    if let Some(l) = &p.keyboard_layout {
                        exists(l, "paths.keyboard_layout")?;
                    }
                }
                Stage::Score => {
                    exists(&p.public_corpus, "paths.public_corpus")?;
                    exists(&p.domain_corpus, "paths.domain_corpus")?;
                    if let Some(d) = &self.reweight.dataset {
                        exists(d, "reweight.dataset")?;
                    }
                    for d in &self.eval.datasets {
                        exists(&d.dataset, "eval dataset")?;
                    }
                }
                Stage::FitReweight => {
                    let r = &self.reweight;
                    let d = r.dataset.as_ref().ok_or_else(|| Error::Config("fit-reweight needs reweight.dataset".into()))?;
                    exists(d, "reweight.dataset")?;
                    require(!r.metric_sets.is_empty(), || "fit-reweight needs at least one reweight.metric_sets entry".into())?;
                    for set in r.metric_sets.iter().chain(&r.validation_sets) {
                        exists(&set.outputs_dir, "metric set outputs_dir")?;
                        exists(&set.live_metrics, "metric set live_metrics")?;
                    }
                }
                Stage::Mix => exists(&p.original_train, "paths.original_train")?,
                Stage::Evaluate => {
                    require(!self.eval.datasets.is_empty(), || "evaluate needs at least one eval.datasets entry".into())?;
                    for d in &self.eval.datasets {
                        exists(&d.dataset, "eval dataset")?;
                        for r in &d.runs {
                            exists(r, "eval run outputs")?;
                        }
                    }
                }
                Stage::InjectGrammar | Stage::Filter | Stage::Plan => {}
            }
        }
        Ok(())
    }
}

fn is_plain_name(s: &str) -> bool {
    !s.is_empty() && s.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
seed = 7
[paths]
corpus = "c.jsonl"
public_corpus = "p.jsonl"
domain_corpus = "d.jsonl"
original_train = "o.jsonl"
"#;

    #[test]
    fn minimal_config_gets_defaults() {
        let c = PipelineConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(c.cluster.k, 20);
        assert_eq!(c.paths.out_dir, PathBuf::from("out"));
        assert_eq!(c.mix.strategy, Strategy::ContMixFil);
        c.validate(Path::new("."), &[]).unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let top = format!("{MINIMAL}\nbogus = 1\n");
        assert!(matches!(PipelineConfig::from_toml(&top), Err(Error::Config(_))));
        let nested = format!("{MINIMAL}\n[typo]\np_spatail = 0.1\n");
        let err = PipelineConfig::from_toml(&nested).unwrap_err().to_string();
        assert!(err.contains("p_spatail"), "{err}");
    }

    #[test]
    fn bad_values_fail_validation() {
        let c = PipelineConfig::from_toml(&format!("{MINIMAL}\n[grammar]\nfailure_rate = 1.5\n")).unwrap();
        assert!(matches!(c.validate(Path::new("."), &[]), Err(Error::Config(_))));
        let c = PipelineConfig::from_toml(&format!("{MINIMAL}\n[grammar]\nclient = \"http\"\n")).unwrap();
        assert!(c.validate(Path::new("."), &[]).is_err());
    }

    #[test]
    fn missing_inputs_fail_for_selected_stages_only() {
        let c = PipelineConfig::from_toml(MINIMAL).unwrap();
        let dir = tempfile::tempdir().unwrap();
        assert!(c.validate(dir.path(), &[Stage::Filter]).is_ok());
        let err = c.validate(dir.path(), &[Stage::Cluster]).unwrap_err().to_string();
        assert!(err.contains("paths.corpus"), "{err}");
        assert!(c.validate(dir.path(), &[Stage::FitReweight]).is_err());
    }

    #[test]
    fn stage_seeds_differ_and_hash_ignores_out_dir() {
        let c = PipelineConfig::from_toml(MINIMAL).unwrap();
        let seeds: std::collections::BTreeSet<u64> = Stage::ALL.iter().map(|s| c.stage_seed(*s)).collect();
        assert_eq!(seeds.len(), Stage::ALL.len());
        let mut moved = c.clone();
        moved.paths.out_dir = PathBuf::from("/elsewhere");
        assert_eq!(c.config_hash(), moved.config_hash());
        let mut reseeded = c.clone();
        reseeded.seed = 8;
        assert_ne!(c.config_hash(), reseeded.config_hash());
    }

    #[test]
    fn stage_names_roundtrip() {
        for s in Stage::ALL {
            assert_eq!(s.name().parse::<Stage>().unwrap(), s);
        }
        assert!("clustering".parse::<Stage>().is_err());
    }
}
