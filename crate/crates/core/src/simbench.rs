//! Planted benchmark: scores, per-model correctness and live metrics
//! generated from a known reweighting model, so fits can be checked
//! against ground truth.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{write_eval_matrix, write_json, write_scores, EvalMatrix, ScoredSample};
use crate::error::{Error, Result};
use crate::reweight::{ReweightParams, SetRegression};
use crate::util::{logit, rng_for, sigmoid};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreDistribution {
    pub s_p_mean: f64,
    pub s_p_sd: f64,
    /// `s_f - s_p` is drawn around this mean.
    pub gap_mean: f64,
    pub gap_sd: f64,
}

impl Default for ScoreDistribution {
    fn default() -> Self {
        Self {
            s_p_mean: -4.0,
            s_p_sd: 0.6,
            gap_mean: 0.0,
            gap_sd: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantedSpec {
    pub n: usize,
    /// Training models per metric set.
    pub k: usize,
    /// Validation models per metric set (0 for none).
    pub k_val: usize,
    pub d: usize,
    pub theta: [f64; 3],
    /// When set, `theta[2]` is recalibrated so the planted weights have this mean.
    pub target_mean_weight: Option<f64>,
    pub c_min: f64,
    pub c_max: f64,
    /// Planted alpha per metric set; drawn from `set_scales` when absent.
    pub alpha: Option<Vec<SetRegression>>,
    /// Scale of each metric set's live metrics. Its length is the number of sets.
    pub set_scales: Vec<f64>,
    pub scores: ScoreDistribution,
    /// Standard deviation of the additive live-metric noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for PlantedSpec {
    fn default() -> Self {
        Self {
            n: 500,
            k: 12,
            k_val: 5,
            d: 2,
            theta: [4.0, -4.0, 0.0],
            target_mean_weight: Some(1.0),
            c_min: 0.01,
            c_max: 2.0,
            alpha: None,
            set_scales: vec![1.0, 50.0],
            scores: ScoreDistribution::default(),
            noise: 1e-3,
            seed: 0,
        }
    }
}

impl PlantedSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.d == 0 {
            return Err(Error::invalid("n and d must be positive"));
        }
        if self.k < 2 {
            return Err(Error::invalid("k must be at least 2"));
        }
        if self.k_val == 1 {
            return Err(Error::invalid("k_val must be 0 or at least 2"));
        }
        if self.set_scales.is_empty() {
            return Err(Error::invalid("at least one metric set is required"));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::invalid("noise must be a finite non-negative number"));
        }
        if !(self.c_min > 0.0 && self.c_min < self.c_max) {
            return Err(Error::invalid("need 0 < c_min < c_max"));
        }
        if let Some(target) = self.target_mean_weight {
            if !(target > self.c_min && target < self.c_max) {
                return Err(Error::invalid("target_mean_weight must lie in (c_min, c_max)"));
            }
        }
        if let Some(alpha) = &self.alpha {
            if alpha.len() != self.set_scales.len() || alpha.iter().any(|a| a.alpha_1.len() != self.d || a.alpha_0.len() != self.d) {
                return Err(Error::invalid("planted alpha must have one d-dimensional entry per metric set"));
            }
        }
        Ok(())
    }

    pub fn params(&self) -> ReweightParams {
        ReweightParams {
            c_min: self.c_min,
            c_max: self.c_max,
            ..Default::default()
        }
        .with_theta(self.theta)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedTruth {
    pub params: ReweightParams,
    pub regression: Vec<SetRegression>,
    pub weights: Vec<f64>,
    pub mean_weight: f64,
    /// Per set, per training model: offline metric under the planted weights.
    pub offline: Vec<Vec<f64>>,
    /// Realized training noise: sum of squared noise draws over all sets.
    pub noise_floor: f64,
    pub num_train_models: usize,
}

impl PlantedTruth {
    pub fn noise_floor_per_model(&self) -> f64 {
        self.noise_floor / self.num_train_models as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlantedBenchmark {
    pub train: Vec<EvalMatrix>,
    pub validation: Vec<EvalMatrix>,
    pub scores: Vec<ScoredSample>,
    pub truth: PlantedTruth,
}

/// Bias that makes the mean planted weight equal `target`.
fn calibrate_bias(params: &ReweightParams, scores: &[ScoredSample], target: f64) -> f64 {
    let mean = |b: f64| {
        let p = params.with_theta([params.theta_f, params.theta_p, b]);
        scores.iter().map(|s| p.weight_of(s.s_f, s.s_p)).sum::<f64>() / scores.len() as f64
    };
    let (mut lo, mut hi) = (-1.0, 1.0);
    while mean(lo) > target {
        lo *= 2.0;
    }
    while mean(hi) < target {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mean(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

fn draw_alpha(rng: &mut impl Rng, d: usize, scale: f64) -> SetRegression {
    SetRegression {
        alpha_1: (0..d)
            .map(|_| {
                let sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
                sign * scale * rng.gen_range(0.5..2.0)
            })
            .collect(),
        alpha_0: (0..d).map(|_| scale * rng.gen_range(-0.5..0.5)).collect(),
    }
}

struct ModelDraw {
    chi: Vec<u8>,
    offline: f64,
}

/// A model's correctness on sample i has log-odds `a + b * (w_i - 1)`, so
/// models differ both in base skill and in how well they handle the
/// samples the planted model up-weights.
fn draw_model(rng: &mut impl Rng, weights: &[f64]) -> ModelDraw {
    let base = logit(rng.gen_range(0.3..0.85));
    let domain = rng.gen_range(-2.5..2.5);
    let chi: Vec<u8> = weights
        .iter()
        .map(|w| u8::from(rng.gen::<f64>() < sigmoid(base + domain * (w - 1.0))))
        .collect();
    let offline = chi.iter().zip(weights).map(|(c, w)| f64::from(*c) * w).sum::<f64>() / weights.len() as f64;
    ModelDraw { chi, offline }
}

pub fn generate(spec: &PlantedSpec) -> Result<PlantedBenchmark> {
    spec.validate()?;
    let mut rng = rng_for(spec.seed, "simbench");
    let sd = &spec.scores;
    let s_p_dist = Normal::new(sd.s_p_mean, sd.s_p_sd).map_err(|e| Error::invalid(format!("score distribution: {e}")))?;
    let gap_dist = Normal::new(sd.gap_mean, sd.gap_sd).map_err(|e| Error::invalid(format!("score distribution: {e}")))?;
    let scores: Vec<ScoredSample> = (0..spec.n)
        .map(|i| {
            let s_p = s_p_dist.sample(&mut rng);
            ScoredSample {
                sample_id: format!("s{i:05}"),
                s_p,
                s_f: s_p + gap_dist.sample(&mut rng),
            }
        })
        .collect();

    let mut params = spec.params();
    if let Some(target) = spec.target_mean_weight {
        params.theta_b = calibrate_bias(&params, &scores, target);
    }
    let weights: Vec<f64> = scores.iter().map(|s| params.weight_of(s.s_f, s.s_p)).collect();
    let mean_weight = weights.iter().sum::<f64>() / weights.len() as f64;

    let regression: Vec<SetRegression> = match &spec.alpha {
        Some(a) => a.clone(),
        None => spec.set_scales.iter().map(|&s| draw_alpha(&mut rng, spec.d, s)).collect(),
    };
    let noise = Normal::new(0.0, spec.noise.max(f64::MIN_POSITIVE)).expect("valid noise sd");

    let sample_ids: Vec<String> = scores.iter().map(|s| s.sample_id.clone()).collect();
    let metric_names = |t: usize| (0..spec.d).map(|m| format!("set{t}_metric{m}")).collect::<Vec<_>>();
    let build = |t: usize, k: usize, prefix: &str, rng: &mut rand_chacha::ChaCha8Rng| {
        let mut chi = Vec::with_capacity(k);
        let mut live = Vec::with_capacity(k);
        let mut offline = Vec::with_capacity(k);
        let mut sq_noise = 0.0;
        for _ in 0..k {
            let m = draw_model(rng, &weights);
            let v: Vec<f64> = regression[t]
                .predict(m.offline)
                .into_iter()
                .map(|p| {
                    let e = if spec.noise > 0.0 { noise.sample(rng) } else { 0.0 };
                    sq_noise += e * e;
                    p + e
                })
                .collect();
            chi.push(m.chi);
            live.push(v);
            offline.push(m.offline);
        }
        let matrix = EvalMatrix {
            model_ids: (0..k).map(|j| format!("{prefix}set{t}_model{j:02}")).collect(),
            sample_ids: sample_ids.clone(),
            metric_names: metric_names(t),
            chi,
            live_metrics: live,
        };
        (matrix, offline, sq_noise)
    };

    let mut train = Vec::new();
    let mut offline = Vec::new();
    let mut noise_floor = 0.0;
    for t in 0..spec.set_scales.len() {
        let (m, o, e) = build(t, spec.k, "", &mut rng);
        train.push(m);
        offline.push(o);
        noise_floor += e;
    }
    let mut validation = Vec::new();
    if spec.k_val > 0 {
        for t in 0..spec.set_scales.len() {
            validation.push(build(t, spec.k_val, "val_", &mut rng).0);
        }
    }

    Ok(PlantedBenchmark {
        truth: PlantedTruth {
            params,
            regression,
            weights,
            mean_weight,
            offline,
            noise_floor,
            num_train_models: spec.k * spec.set_scales.len(),
        },
        train,
        validation,
        scores,
    })
}

/// Writes `scores.jsonl`, `train_set{t}.jsonl`, `val_set{t}.jsonl` and
/// `truth.json` into `dir`.
pub fn write_benchmark(bench: &PlantedBenchmark, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_scores(&bench.scores, &dir.join("scores.jsonl"))?;
    for (t, m) in bench.train.iter().enumerate() {
        write_eval_matrix(m, &dir.join(format!("train_set{t}.jsonl")))?;
    }
    for (t, m) in bench.validation.iter().enumerate() {
        write_eval_matrix(m, &dir.join(format!("val_set{t}.jsonl")))?;
    }
    write_json(&dir.join("truth.json"), &bench.truth)
}
