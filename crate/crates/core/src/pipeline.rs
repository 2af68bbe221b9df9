//! Runs the configured stages in dependency order and records provenance:
//! every artifact gets a `.meta.json` sidecar and every stage appends a
//! record to `run_log.jsonl`.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::cluster::{cluster_stats, hash_embed, kmeans, quota_sample, read_embeddings, EmbeddedDoc, KMeansOptions, ClusterModel};
use crate::config::{ClientKind, EvalSection, JudgeKind, PipelineConfig, Stage};
use crate::data::{
    read_corpus, read_ec_dataset, read_json, read_live_metrics, read_scores, write_corpus, write_ec_dataset,
    write_eval_matrix, write_json, write_jsonl, write_scores, Document, ECExample,
};
use crate::error::{Error, Result};
use crate::eval::{build_eval_matrix, evaluate_grid, format_grid, ExactJudge, ExternalJudge, GridInput, Judge, ModelOutputs, NormalizedJudge};
use crate::grammar::{count_outcomes, error_stats, inject_all, injected_pairs, roundtrip_filter, HttpInjector, InjectorClient, MockInjector};
use crate::mix::{continue_plan, filter_by_weight, mix_datasets, validate_manifest, PlanPaths, Strategy};
use crate::reweight::{fit_with_report, format_report, weight, ReweightFit};
use crate::scoring::{align_scores, score_dataset, NGramScorer};
use crate::typo::{corrupt_dataset, KeyboardModel, TypoKind};
use crate::util::sha256_hex;

pub const RUN_LOG: &str = "run_log.jsonl";

/// Failure of a pipeline run, split by exit status.
#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    Validation(Error),
    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: Stage,
        #[source]
        source: Error,
    },
}

impl PipelineError {
    /// 1 for validation errors, 2 for stage failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Validation(_) => 1,
            PipelineError::Stage { .. } => 2,
        }
    }
}

/// Sidecar written next to every artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactMeta {
    pub artifact: String,
    pub stage: Stage,
    pub seed: u64,
    pub config_hash: String,
    pub sha256: String,
    /// Input name to content hash.
    pub inputs: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunLogRecord {
    pub stage: Stage,
    pub seed: u64,
    pub config_hash: String,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub counts: BTreeMap<String, Value>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub out_dir: PathBuf,
    pub records: Vec<RunLogRecord>,
}

/// Runs `stages` (all when empty) in dependency order. Relative paths in
/// the config resolve against `base`; `out_dir` overrides the configured
/// output directory.
pub fn run_pipeline(
    config: &PipelineConfig,
    base: &Path,
    out_dir: Option<&Path>,
    stages: &[Stage],
) -> std::result::Result<RunSummary, PipelineError> {
    let mut selected: Vec<Stage> = if stages.is_empty() { Stage::ALL.to_vec() } else { stages.to_vec() };
    selected.sort_unstable();
    selected.dedup();
    config.validate(base, &selected).map_err(PipelineError::Validation)?;

    let out = out_dir.map(Path::to_path_buf).unwrap_or_else(|| base.join(&config.paths.out_dir));
    let mut ctx = Context {
        config,
        base: base.to_path_buf(),
        out,
        config_hash: config.config_hash(),
        records: Vec::new(),
    };
    let stage_err = |stage| move |source| PipelineError::Stage { stage, source };
    fs::create_dir_all(&ctx.out).map_err(|e| stage_err(selected[0])(Error::io(&ctx.out, e)))?;
    let log_path = ctx.out.join(RUN_LOG);
    fs::write(&log_path, "").map_err(|e| stage_err(selected[0])(Error::io(&log_path, e)))?;

    for stage in selected {
        log::info!("running stage {stage}");
        let record = ctx.run_stage(stage).map_err(stage_err(stage))?;
        append_log(&log_path, &record).map_err(stage_err(stage))?;
        ctx.records.push(record);
    }
    Ok(RunSummary {
        out_dir: ctx.out,
        records: ctx.records,
    })
}

fn append_log(path: &Path, record: &RunLogRecord) -> Result<()> {
    use std::io::Write;
    let mut f = fs::OpenOptions::new().append(true).open(path).map_err(|e| Error::io(path, e))?;
    let line = serde_json::to_string(record).expect("log record serializes");
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

fn display(p: &Path) -> String {
    p.to_string_lossy().replace('\\', "/")
}

/// Inputs and outputs collected while one stage runs.
struct StageRun {
    seed: u64,
    inputs: BTreeMap<String, String>,
    outputs: Vec<String>,
    counts: BTreeMap<String, Value>,
}

impl StageRun {
    fn count(&mut self, key: &str, value: impl Into<Value>) {
        self.counts.insert(key.to_owned(), value.into());
    }
}

struct Context<'a> {
    config: &'a PipelineConfig,
    base: PathBuf,
    out: PathBuf,
    config_hash: String,
    records: Vec<RunLogRecord>,
}

impl Context<'_> {
    fn external(&self, run: &mut StageRun, p: &Path) -> Result<PathBuf> {
        let full = self.base.join(p);
        run.inputs.insert(display(p), sha256_file(&full)?);
        Ok(full)
    }

    fn artifact_in(&self, run: &mut StageRun, name: &str) -> Result<PathBuf> {
        let full = self.out.join(name);
        if !full.exists() {
            return Err(Error::invalid(format!("missing artifact {name}; run the stage that produces it first")));
        }
        run.inputs.insert(name.to_owned(), sha256_file(&full)?);
        Ok(full)
    }

    fn artifact_out(&self, name: &str) -> Result<PathBuf> {
        let full = self.out.join(name);
        if let Some(parent) = full.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        Ok(full)
    }

    fn finish_output(&self, run: &mut StageRun, name: &str) {
        run.outputs.push(name.to_owned());
    }

    fn run_stage(&mut self, stage: Stage) -> Result<RunLogRecord> {
        let mut run = StageRun {
            seed: self.config.stage_seed(stage),
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
            counts: BTreeMap::new(),
        };
        match stage {
            Stage::Cluster => self.cluster(&mut run)?,
            Stage::Sample => self.sample(&mut run)?,
            Stage::InjectGrammar => self.inject_grammar(&mut run)?,
            Stage::InjectTypos => self.inject_typos(&mut run)?,
            Stage::Score => self.score(&mut run)?,
            Stage::FitReweight => self.fit_reweight(&mut run)?,
            Stage::Filter => self.filter(&mut run)?,
            Stage::Mix => self.mix(&mut run)?,
            Stage::Plan => self.plan(&mut run)?,
            Stage::Evaluate => self.evaluate(&mut run)?,
        }
        let mut outputs = BTreeMap::new();
        for name in &run.outputs {
            let path = self.out.join(name);
            let sha = sha256_file(&path)?;
            let meta = ArtifactMeta {
                artifact: name.clone(),
                stage,
                seed: run.seed,
                config_hash: self.config_hash.clone(),
                sha256: sha.clone(),
                inputs: run.inputs.clone(),
            };
            write_json(&self.out.join(format!("{name}.meta.json")), &meta)?;
            outputs.insert(name.clone(), sha);
        }
        Ok(RunLogRecord {
            stage,
            seed: run.seed,
            config_hash: self.config_hash.clone(),
            inputs: run.inputs,
            outputs,
            counts: run.counts,
        })
    }

    fn cluster(&self, run: &mut StageRun) -> Result<()> {
        let cfg = &self.config.cluster;
        let docs = read_corpus(&self.external(run, &self.config.paths.corpus)?)?;
        let embedded = match &self.config.paths.embeddings {
            Some(p) => align_embeddings(&docs, read_embeddings(&self.external(run, p)?)?)?,
            None => hash_embed(&docs, cfg.dim, run.seed)?,
        };
        let model = kmeans(
            &embedded,
            &KMeansOptions {
                k: cfg.k,
                seed: run.seed,
                max_iters: cfg.max_iters,
                tol: cfg.tol,
            },
        )?;
        let stats = cluster_stats(&model, cfg.histogram_buckets);
        write_json(&self.artifact_out("clusters.json")?, &model)?;
        self.finish_output(run, "clusters.json");
        write_json(&self.artifact_out("cluster_stats.json")?, &stats)?;
        self.finish_output(run, "cluster_stats.json");
        run.count("documents", docs.len());
        run.count("clusters", model.num_clusters());
        run.count("iterations", model.iterations);
        run.count("objective", model.objective);
        Ok(())
    }

    fn sample(&self, run: &mut StageRun) -> Result<()> {
        let docs = read_corpus(&self.external(run, &self.config.paths.corpus)?)?;
        let model: ClusterModel = read_json(&self.artifact_in(run, "clusters.json")?)?;
        let ids = quota_sample(&model, self.config.cluster.per_cluster, run.seed)?;
        let by_id: HashMap<&str, &Document> = docs.iter().map(|d| (d.id.as_str(), d)).collect();
        let sampled = ids
            .iter()
            .map(|id| {
                by_id
                    .get(id.as_str())
                    .map(|d| (*d).clone())
                    .ok_or_else(|| Error::Misaligned(format!("cluster model lists unknown document {id:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        write_corpus(&sampled, &self.artifact_out("sample.jsonl")?)?;
        self.finish_output(run, "sample.jsonl");
        run.count("sampled", sampled.len());
        Ok(())
    }

    fn inject_grammar(&self, run: &mut StageRun) -> Result<()> {
        let g = &self.config.grammar;
        let docs = read_corpus(&self.artifact_in(run, "sample.jsonl")?)?;
        let client: Box<dyn InjectorClient> = match g.client {
            ClientKind::Mock => Box::new(MockInjector::new(g.mock_config(run.seed))?),
            ClientKind::Http => Box::new(HttpInjector::new(g.http.clone().expect("validated"))),
        };
        let items: Vec<(String, String)> = docs.iter().map(|d| (d.id.clone(), d.text.clone())).collect();
        let records = inject_all(client.as_ref(), &items, g.concurrency);
        let counts = count_outcomes(&records);
        let filtered = roundtrip_filter(&injected_pairs(&records));
        let stats = error_stats(&filtered.kept);

        write_jsonl(&self.artifact_out("injections.jsonl")?, &records)?;
        self.finish_output(run, "injections.jsonl");
        write_ec_dataset(&filtered.kept, &self.artifact_out("grammar.jsonl")?)?;
        self.finish_output(run, "grammar.jsonl");
        write_json(
            &self.artifact_out("grammar_stats.json")?,
            &json!({"outcomes": counts, "roundtrip_dropped": filtered.dropped_count, "errors": stats}),
        )?;
        self.finish_output(run, "grammar_stats.json");
        run.count("requests", items.len());
        run.count("injected", counts.injected);
        run.count("skipped", counts.skipped);
        run.count("parse_failed", counts.parse_failed);
        run.count("client_failed", counts.client_failed);
        run.count("roundtrip_dropped", filtered.dropped_count);
        run.count("kept", filtered.kept.len());
        Ok(())
    }

    fn inject_typos(&self, run: &mut StageRun) -> Result<()> {
        let examples = read_ec_dataset(&self.artifact_in(run, "grammar.jsonl")?)?;
        let keyboard = match &self.config.paths.keyboard_layout {
            Some(p) => KeyboardModel::from_file(&self.external(run, p)?)?,
            None => KeyboardModel::qwerty(),
        };
        let cfg = self.config.typo.typo_config(run.seed);
        let corrupted = corrupt_dataset(&examples, &cfg, &keyboard);
        let mut by_kind: BTreeMap<TypoKind, usize> = BTreeMap::new();
        let mut events = Vec::with_capacity(corrupted.len());
        for c in &corrupted {
            for e in &c.events {
                *by_kind.entry(e.kind).or_default() += 1;
            }
            events.push(json!({"id": c.example.id, "events": c.events}));
        }
        let synthetic: Vec<ECExample> = corrupted.into_iter().map(|c| c.example).collect();
        write_ec_dataset(&synthetic, &self.artifact_out("synthetic.jsonl")?)?;
        self.finish_output(run, "synthetic.jsonl");
        write_jsonl(&self.artifact_out("typo_events.jsonl")?, &events)?;
        self.finish_output(run, "typo_events.jsonl");
        run.count("examples", synthetic.len());
        run.count("events", serde_json::to_value(&by_kind).expect("counts serialize"));
        Ok(())
    }

    fn score(&self, run: &mut StageRun) -> Result<()> {
        let s = &self.config.scoring;
        let public = NGramScorer::train(&read_corpus(&self.external(run, &self.config.paths.public_corpus)?)?, s.order, s.delta)?;
        let domain = NGramScorer::train(&read_corpus(&self.external(run, &self.config.paths.domain_corpus)?)?, s.order, s.delta)?;

        let mut jobs: Vec<(String, PathBuf)> = vec![("scores/synthetic.jsonl".into(), self.artifact_in(run, "synthetic.jsonl")?)];
        if let Some(d) = &self.config.reweight.dataset {
            jobs.push(("scores/reweight.jsonl".into(), self.external(run, d)?));
        }
        for d in &self.config.eval.datasets {
            jobs.push((format!("scores/eval_{}.jsonl", d.name), self.external(run, &d.dataset)?));
        }
        for (name, input) in jobs {
            let examples = read_ec_dataset(&input)?;
            let scores = score_dataset(&examples, &public, &domain);
            write_scores(&scores, &self.artifact_out(&name)?)?;
            self.finish_output(run, &name);
            run.count(&name, scores.len());
        }
        Ok(())
    }

    fn judge(&self) -> Result<Box<dyn Judge>> {
        judge_from(&self.config.eval)
    }

    fn fit_reweight(&self, run: &mut StageRun) -> Result<()> {
        let r = &self.config.reweight;
        let dataset = read_ec_dataset(&self.external(run, r.dataset.as_ref().expect("validated"))?)?;
        let scores = align_scores(&dataset, &read_scores(&self.artifact_in(run, "scores/reweight.jsonl")?)?)?;
        let judge = self.judge()?;

        let mut load = |sets: &[crate::config::MetricSetPaths]| -> Result<Vec<_>> {
            let mut out = Vec::with_capacity(sets.len());
            for set in sets {
                let live = read_live_metrics(&self.external(run, &set.live_metrics)?)?;
                let mut outputs = Vec::with_capacity(live.len());
                for rec in &live {
                    let p = set.outputs_dir.join(format!("{}.jsonl", rec.model_id));
                    outputs.push(ModelOutputs::read(&self.external(run, &p)?)?);
                }
                let m = build_eval_matrix(&dataset, &outputs, &live, judge.as_ref(), r.k)?;
                let name = format!("eval_matrix/{}.jsonl", set.name);
                write_eval_matrix(&m, &self.artifact_out(&name)?)?;
                out.push((name, m));
            }
            Ok(out)
        };
        let train = load(&r.metric_sets)?;
        let validation = load(&r.validation_sets)?;
        for (name, _) in train.iter().chain(&validation) {
            self.finish_output(run, name);
        }
        let train: Vec<_> = train.into_iter().map(|(_, m)| m).collect();
        let validation: Vec<_> = validation.into_iter().map(|(_, m)| m).collect();

        let fit = fit_with_report(&train, &validation, &scores, &r.init_params(), &r.fit_options(run.seed))?;
        write_json(&self.artifact_out("fit.json")?, &fit)?;
        self.finish_output(run, "fit.json");
        let report_path = self.artifact_out("fit_report.txt")?;
        fs::write(&report_path, format_report(&fit)).map_err(|e| Error::io(&report_path, e))?;
        self.finish_output(run, "fit_report.txt");

        let synthetic = read_ec_dataset(&self.artifact_in(run, "synthetic.jsonl")?)?;
        let syn_scores = align_scores(&synthetic, &read_scores(&self.artifact_in(run, "scores/synthetic.jsonl")?)?)?;
        let weighted: Vec<ECExample> = synthetic
            .into_iter()
            .zip(&syn_scores)
            .map(|(mut ex, s)| {
                ex.weight = Some(weight(&fit.params, s));
                ex
            })
            .collect();
        write_ec_dataset(&weighted, &self.artifact_out("synthetic_weighted.jsonl")?)?;
        self.finish_output(run, "synthetic_weighted.jsonl");

        run.count("train_models", train.iter().map(|m| m.num_models()).sum::<usize>());
        run.count("validation_models", validation.iter().map(|m| m.num_models()).sum::<usize>());
        run.count("samples", scores.len());
        run.count("residual_train", fit.residual_train);
        run.count("mean_weight", fit.mean_weight);
        run.count("reaches_uniform", fit.reaches_uniform);
        Ok(())
    }

    fn filter(&self, run: &mut StageRun) -> Result<()> {
        let Some(threshold) = self.config.mix.filter_threshold else {
            run.count("skipped", true);
            return Ok(());
        };
        let weighted = read_ec_dataset(&self.artifact_in(run, "synthetic_weighted.jsonl")?)?;
        let kept = filter_by_weight(&weighted, threshold)?;
        write_ec_dataset(&kept, &self.artifact_out("synthetic_filtered.jsonl")?)?;
        self.finish_output(run, "synthetic_filtered.jsonl");
        run.count("input", weighted.len());
        run.count("kept", kept.len());
        Ok(())
    }

    fn synthetic_for_mix(&self) -> &'static str {
        if self.config.mix.strategy == Strategy::ContMixFil {
            "synthetic_filtered.jsonl"
        } else {
            "synthetic_weighted.jsonl"
        }
    }

    fn mix(&self, run: &mut StageRun) -> Result<()> {
        let original = read_ec_dataset(&self.external(run, &self.config.paths.original_train)?)?;
        let synthetic = read_ec_dataset(&self.artifact_in(run, self.synthetic_for_mix())?)?;
        write_ec_dataset(&original, &self.artifact_out("original.jsonl")?)?;
        self.finish_output(run, "original.jsonl");
        let mixed = mix_datasets(&original, &synthetic, &self.config.mix.spec(run.seed))?;
        write_ec_dataset(&mixed, &self.artifact_out("mix.jsonl")?)?;
        self.finish_output(run, "mix.jsonl");
        run.count("original", original.len());
        run.count("synthetic", synthetic.len());
        run.count("mixed", mixed.len());
        Ok(())
    }

    fn plan(&self, run: &mut StageRun) -> Result<()> {
        let m = &self.config.mix;
        // Same seed as the mix stage, so the manifest reproduces mix.jsonl.
        let spec = m.spec(self.config.stage_seed(Stage::Mix));
        let paths = PlanPaths {
            original: PathBuf::from("original.jsonl"),
            synthetic: PathBuf::from("synthetic_weighted.jsonl"),
            filtered_synthetic: m.filter_threshold.map(|_| PathBuf::from("synthetic_filtered.jsonl")),
        };
        for p in [Some(&paths.original), Some(&paths.synthetic), paths.filtered_synthetic.as_ref()].into_iter().flatten() {
            self.artifact_in(run, &display(p))?;
        }
        let manifest = continue_plan(m.strategy, &paths, &spec, &m.schedule)?;
        validate_manifest(&manifest, &self.out)?;
        write_json(&self.artifact_out("manifest.json")?, &manifest)?;
        self.finish_output(run, "manifest.json");
        run.count("phases", manifest.phases.len());
        run.count("total_steps", manifest.total_steps);
        Ok(())
    }

    fn evaluate(&self, run: &mut StageRun) -> Result<()> {
        let fit: ReweightFit = read_json(&self.artifact_in(run, "fit.json")?)?;
        let judge = self.judge()?;
        let mut rows = Vec::new();
        for d in &self.config.eval.datasets {
            let dataset = read_ec_dataset(&self.external(run, &d.dataset)?)?;
            let scores = align_scores(&dataset, &read_scores(&self.artifact_in(run, &format!("scores/eval_{}.jsonl", d.name))?)?)?;
            let weights: BTreeMap<String, f64> = scores.iter().map(|s| (s.sample_id.clone(), weight(&fit.params, s))).collect();
            let runs = d
                .runs
                .iter()
                .map(|p| ModelOutputs::read(&self.external(run, p)?))
                .collect::<Result<Vec<_>>>()?;
            let input = GridInput {
                name: d.name.clone(),
                dataset: &dataset,
                runs,
            };
            rows.extend(evaluate_grid(&[input], judge.as_ref(), Some(&weights))?);
        }
        write_json(&self.artifact_out("eval_grid.json")?, &rows)?;
        self.finish_output(run, "eval_grid.json");
        let grid_path = self.artifact_out("eval_grid.txt")?;
        fs::write(&grid_path, format_grid(&rows)).map_err(|e| Error::io(&grid_path, e))?;
        self.finish_output(run, "eval_grid.txt");
        run.count("datasets", rows.len());
        Ok(())
    }
}

/// Builds the judge selected by an eval section.
pub fn judge_from(eval: &EvalSection) -> Result<Box<dyn Judge>> {
    Ok(match eval.judge {
        JudgeKind::Exact => Box::new(ExactJudge),
        JudgeKind::Normalized => Box::new(NormalizedJudge),
        JudgeKind::Http => Box::new(ExternalJudge::from_config(
            eval.http.clone().ok_or_else(|| Error::Config("http judge needs an [eval.http] section".into()))?,
            eval.judge_template.clone(),
        )?),
    })
}

fn align_embeddings(docs: &[Document], embedded: Vec<EmbeddedDoc>) -> Result<Vec<EmbeddedDoc>> {
    let mut by_id: HashMap<String, EmbeddedDoc> = embedded.into_iter().map(|e| (e.doc_id.clone(), e)).collect();
    docs.iter()
        .map(|d| {
            by_id
                .remove(&d.id)
                .ok_or_else(|| Error::Misaligned(format!("no embedding for document {:?}", d.id)))
        })
        .collect()
}

/// Sorted `(relative path, sha256)` for every file under `dir`.
pub fn artifact_hashes(dir: &Path) -> Result<Vec<(String, String)>> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<(String, String)>) -> Result<()> {
        let mut entries: Vec<_> = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .collect::<std::io::Result<_>>()
            .map_err(|e| Error::io(dir, e))?;
        entries.sort_by_key(|e| e.file_name());
        for e in entries {
            let p = e.path();
            if p.is_dir() {
                walk(root, &p, out)?;
            } else {
                let rel = p.strip_prefix(root).expect("walk stays under root");
                out.push((display(rel), sha256_file(&p)?));
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out)?;
    out.sort();
    Ok(out)
}
