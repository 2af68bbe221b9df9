//! Sample reweighting fitted against live metrics.
//!
//! Each sample gets a bounded weight
//! `w = c_min + (c_max - c_min) * sigmoid(theta_f * s_f + theta_p * s_p + theta_b)`.
//! For every deployed model `j` the weighted offline metric is
//! `s_j = (1/N) * sum_i w_i * chi[j][i]`, and a per-metric linear map
//! `alpha_1 * s_j + alpha_0` should predict the model's live metrics `v_j`.
//! The objective is the squared prediction error summed over models, metrics
//! and metric sets, plus `lambda * (mean(w) - 1)^2`.

use std::collections::HashMap;
use std::fmt::Write as _;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{EvalMatrix, ScoredSample};
use crate::error::{Error, Result};
use crate::optim::{minimize, LbfgsOptions, Termination};
use crate::scoring::heuristic_weight;
pub use crate::util::Summary;
use crate::util::{logit, rng_for, sigmoid};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReweightParams {
    pub theta_f: f64,
    pub theta_p: f64,
    pub theta_b: f64,
    #[serde(default = "default_c_min")]
    pub c_min: f64,
    #[serde(default = "default_c_max")]
    pub c_max: f64,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
}

fn default_c_min() -> f64 {
    0.01
}

fn default_c_max() -> f64 {
    2.0
}

fn default_lambda() -> f64 {
    0.01
}

impl Default for ReweightParams {
    fn default() -> Self {
        Self {
            theta_f: 0.0,
            theta_p: 0.0,
            theta_b: 0.0,
            c_min: default_c_min(),
            c_max: default_c_max(),
            lambda: default_lambda(),
        }
    }
}

impl ReweightParams {
    pub fn with_theta(self, theta: [f64; 3]) -> Self {
        Self {
            theta_f: theta[0],
            theta_p: theta[1],
            theta_b: theta[2],
            ..self
        }
    }

    pub fn theta(&self) -> [f64; 3] {
        [self.theta_f, self.theta_p, self.theta_b]
    }

    /// Same bounds and lambda, with theta chosen so every weight is 1.
    pub fn uniform(&self) -> Self {
        self.with_theta([0.0, 0.0, self.uniform_bias()])
    }

    fn uniform_bias(&self) -> f64 {
        logit((1.0 - self.c_min) / (self.c_max - self.c_min))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.c_min > 0.0 && self.c_min < self.c_max && self.c_max.is_finite()) {
            return Err(Error::invalid("need 0 < c_min < c_max"));
        }
        if !(self.c_min < 1.0 && 1.0 < self.c_max) {
            return Err(Error::invalid("weight range (c_min, c_max) must contain 1"));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::invalid("lambda must be a finite non-negative number"));
        }
        if self.theta().iter().any(|t| !t.is_finite()) {
            return Err(Error::invalid("theta must be finite"));
        }
        Ok(())
    }

    pub fn weight_of(&self, s_f: f64, s_p: f64) -> f64 {
        let z = self.theta_f * s_f + self.theta_p * s_p + self.theta_b;
        bounded_weight(self.c_min, self.c_max, sigmoid(z))
    }
}

/// `c_min + (c_max - c_min) * sg`, kept one ulp inside the open interval
/// when the sigmoid saturates.
fn bounded_weight(c_min: f64, c_max: f64, sg: f64) -> f64 {
    (c_min + (c_max - c_min) * sg).clamp(c_min.next_up(), c_max.next_down())
}

pub fn weight(params: &ReweightParams, s: &ScoredSample) -> f64 {
    params.weight_of(s.s_f, s.s_p)
}

pub fn weights(params: &ReweightParams, scores: &[ScoredSample]) -> Vec<f64> {
    scores.iter().map(|s| weight(params, s)).collect()
}

/// Linear map from offline to live metrics for one metric set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetRegression {
    pub alpha_1: Vec<f64>,
    pub alpha_0: Vec<f64>,
}

impl SetRegression {
    pub fn zeros(d: usize) -> Self {
        Self {
            alpha_1: vec![0.0; d],
            alpha_0: vec![0.0; d],
        }
    }

    pub fn predict(&self, s: f64) -> Vec<f64> {
        self.alpha_1.iter().zip(&self.alpha_0).map(|(a1, a0)| a1 * s + a0).collect()
    }
}

// ---------------------------------------------------------------------------
// Problem data

#[derive(Debug, Clone)]
struct PreparedSet {
    name: String,
    model_ids: Vec<String>,
    k: usize,
    d: usize,
    /// k × n, as 0/1 floats, columns in score order.
    chi: Vec<f64>,
    /// k × d
    v: Vec<f64>,
}

impl PreparedSet {
    fn chi_row(&self, j: usize, n: usize) -> &[f64] {
        &self.chi[j * n..(j + 1) * n]
    }

    fn v_row(&self, j: usize) -> &[f64] {
        &self.v[j * self.d..(j + 1) * self.d]
    }

    fn without(&self, j: usize, n: usize) -> Self {
        let keep = |idx: usize| idx != j;
        let chi = (0..self.k).filter(|&r| keep(r)).flat_map(|r| self.chi_row(r, n).to_vec()).collect();
        let v = (0..self.k).filter(|&r| keep(r)).flat_map(|r| self.v_row(r).to_vec()).collect();
        let model_ids = self.model_ids.iter().enumerate().filter(|(r, _)| keep(*r)).map(|(_, m)| m.clone()).collect();
        Self {
            name: self.name.clone(),
            model_ids,
            k: self.k - 1,
            d: self.d,
            chi,
            v,
        }
    }
}

/// Metric sets aligned to a common sample order.
#[derive(Debug, Clone)]
pub struct Problem {
    n: usize,
    s_f: Vec<f64>,
    s_p: Vec<f64>,
    sets: Vec<PreparedSet>,
}

impl Problem {
    /// Every set must cover exactly the samples in `scores` (in any order).
    pub fn new(sets: &[EvalMatrix], scores: &[ScoredSample]) -> Result<Self> {
        if sets.is_empty() {
            return Err(Error::invalid("at least one metric set is required"));
        }
        if scores.is_empty() {
            return Err(Error::invalid("no scored samples"));
        }
        let mut index = HashMap::with_capacity(scores.len());
        for (i, s) in scores.iter().enumerate() {
            if !(s.s_f.is_finite() && s.s_p.is_finite()) {
                return Err(Error::invalid(format!("non-finite score for sample {:?}", s.sample_id)));
            }
            if index.insert(s.sample_id.as_str(), i).is_some() {
                return Err(Error::DuplicateId(s.sample_id.clone()));
            }
        }
        let n = scores.len();
        let mut prepared = Vec::with_capacity(sets.len());
        for (t, m) in sets.iter().enumerate() {
            m.validate()?;
            if m.num_samples() != n {
                return Err(Error::Misaligned(format!(
                    "metric set {t} has {} samples but {n} scores were given",
                    m.num_samples()
                )));
            }
            let mut col = Vec::with_capacity(n);
            for id in &m.sample_ids {
                let i = index
                    .get(id.as_str())
                    .ok_or_else(|| Error::Misaligned(format!("metric set {t}: sample {id:?} has no score")))?;
                col.push(*i);
            }
            let k = m.num_models();
            let mut chi = vec![0.0; k * n];
            for j in 0..k {
                for (c, &i) in col.iter().enumerate() {
                    chi[j * n + i] = f64::from(m.chi[j][c]);
                }
            }
            prepared.push(PreparedSet {
                name: format!("set{t}"),
                model_ids: m.model_ids.clone(),
                k,
                d: m.num_metrics(),
                chi,
                v: m.live_metrics.iter().flatten().copied().collect(),
            });
        }
        Ok(Self {
            n,
            s_f: scores.iter().map(|s| s.s_f).collect(),
            s_p: scores.iter().map(|s| s.s_p).collect(),
            sets: prepared,
        })
    }

    pub fn num_samples(&self) -> usize {
        self.n
    }

    pub fn num_sets(&self) -> usize {
        self.sets.len()
    }

    pub fn models_per_set(&self) -> Vec<usize> {
        self.sets.iter().map(|s| s.k).collect()
    }

    fn without_model(&self, set: usize, j: usize) -> Self {
        let mut p = self.clone();
        p.sets[set] = self.sets[set].without(j, self.n);
        p
    }

    fn weights(&self, params: &ReweightParams) -> Vec<f64> {
        self.s_f.iter().zip(&self.s_p).map(|(f, p)| params.weight_of(*f, *p)).collect()
    }

    fn offline(&self, set: &PreparedSet, w: &[f64]) -> Vec<f64> {
        (0..set.k)
            .map(|j| set.chi_row(j, self.n).iter().zip(w).map(|(c, w)| c * w).sum::<f64>() / self.n as f64)
            .collect()
    }

    /// Objective and gradient at `x = [theta; per set (alpha_1, alpha_0)]`.
    fn eval(&self, base: &ReweightParams, x: &[f64], grad: &mut [f64]) -> f64 {
        let n = self.n;
        let nf = n as f64;
        let delta = base.c_max - base.c_min;
        let mut w = vec![0.0; n];
        let mut dw = vec![0.0; n];
        for i in 0..n {
            let sg = sigmoid(x[0] * self.s_f[i] + x[1] * self.s_p[i] + x[2]);
            w[i] = bounded_weight(base.c_min, base.c_max, sg);
            dw[i] = delta * sg * (1.0 - sg);
        }
        let mut gw = vec![0.0; n];
        let mut f = 0.0;
        let mut off = 3;
        for set in &self.sets {
            let d = set.d;
            let (a1, a0) = (&x[off..off + d], &x[off + d..off + 2 * d]);
            for j in 0..set.k {
                let chi = set.chi_row(j, n);
                let s_j = chi.iter().zip(&w).map(|(c, w)| c * w).sum::<f64>() / nf;
                let mut coef = 0.0;
                for (m, v) in set.v_row(j).iter().enumerate() {
                    let r = a1[m] * s_j + a0[m] - v;
                    f += r * r;
                    grad[off + m] += 2.0 * r * s_j;
                    grad[off + d + m] += 2.0 * r;
                    coef += 2.0 * r * a1[m];
                }
                let scaled = coef / nf;
                for (g, c) in gw.iter_mut().zip(chi) {
                    *g += scaled * c;
                }
            }
            off += 2 * d;
        }
        let w_bar = w.iter().sum::<f64>() / nf;
        f += base.lambda * (w_bar - 1.0).powi(2);
        let reg = 2.0 * base.lambda * (w_bar - 1.0) / nf;
        for i in 0..n {
            let gi = (gw[i] + reg) * dw[i];
            grad[0] += gi * self.s_f[i];
            grad[1] += gi * self.s_p[i];
            grad[2] += gi;
        }
        f
    }

    fn pack(&self, theta: [f64; 3], regression: &[SetRegression]) -> Vec<f64> {
        let mut x = theta.to_vec();
        for r in regression {
            x.extend_from_slice(&r.alpha_1);
            x.extend_from_slice(&r.alpha_0);
        }
        x
    }

    fn unpack(&self, x: &[f64]) -> ([f64; 3], Vec<SetRegression>) {
        let mut off = 3;
        let regs = self
            .sets
            .iter()
            .map(|s| {
                let r = SetRegression {
                    alpha_1: x[off..off + s.d].to_vec(),
                    alpha_0: x[off + s.d..off + 2 * s.d].to_vec(),
                };
                off += 2 * s.d;
                r
            })
            .collect();
        ([x[0], x[1], x[2]], regs)
    }
}

// ---------------------------------------------------------------------------
// Objective

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveValue {
    pub value: f64,
    pub grad_theta: [f64; 3],
    pub grad_alpha: Vec<SetRegression>,
}

pub fn objective_on(problem: &Problem, params: &ReweightParams, alpha: &[SetRegression]) -> Result<ObjectiveValue> {
    if alpha.len() != problem.sets.len() {
        return Err(Error::invalid(format!(
            "{} regression parameter sets for {} metric sets",
            alpha.len(),
            problem.sets.len()
        )));
    }
    for (a, s) in alpha.iter().zip(&problem.sets) {
        if a.alpha_1.len() != s.d || a.alpha_0.len() != s.d {
            return Err(Error::invalid(format!("regression dimension does not match d = {}", s.d)));
        }
    }
    let x = problem.pack(params.theta(), alpha);
    let mut g = vec![0.0; x.len()];
    let value = problem.eval(params, &x, &mut g);
    let (gt, ga) = problem.unpack(&g);
    Ok(ObjectiveValue {
        value,
        grad_theta: gt,
        grad_alpha: ga,
    })
}

/// Objective value with analytic gradients. Requires K ≥ 2 in every set.
pub fn objective(
    params: &ReweightParams,
    alpha: &[SetRegression],
    sets: &[EvalMatrix],
    scores: &[ScoredSample],
) -> Result<ObjectiveValue> {
    require_models(sets, 2)?;
    let problem = Problem::new(sets, scores)?;
    objective_on(&problem, params, alpha)
}

fn require_models(sets: &[EvalMatrix], min: usize) -> Result<()> {
    for (t, m) in sets.iter().enumerate() {
        if m.num_models() < min {
            return Err(Error::invalid(format!(
                "metric set {t} has {} models; at least {min} are required",
                m.num_models()
            )));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Closed-form regression at fixed weights

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionOnly {
    pub regression: Vec<SetRegression>,
    /// Per set, per model squared error summed over metrics.
    pub residuals: Vec<Vec<f64>>,
    pub total: f64,
    /// Sets whose offline metric did not vary across models.
    pub degenerate: Vec<bool>,
}

const DEGENERATE_VAR: f64 = 1e-24;

fn fit_alpha(s: &[f64], set: &PreparedSet) -> (SetRegression, bool) {
    let k = s.len() as f64;
    let s_mean = s.iter().sum::<f64>() / k;
    let s_var = s.iter().map(|x| (x - s_mean).powi(2)).sum::<f64>() / k;
    let degenerate = s_var <= DEGENERATE_VAR * s_mean.abs().max(1.0).powi(2);
    let mut reg = SetRegression::zeros(set.d);
    for m in 0..set.d {
        let vs: Vec<f64> = (0..set.k).map(|j| set.v_row(j)[m]).collect();
        let v_mean = vs.iter().sum::<f64>() / k;
        if degenerate {
            reg.alpha_0[m] = v_mean;
        } else {
            let cov = s.iter().zip(&vs).map(|(a, b)| (a - s_mean) * (b - v_mean)).sum::<f64>() / k;
            reg.alpha_1[m] = cov / s_var;
            reg.alpha_0[m] = v_mean - reg.alpha_1[m] * s_mean;
        }
    }
    (reg, degenerate)
}

fn sq_error(reg: &SetRegression, s: f64, v: &[f64]) -> f64 {
    reg.predict(s).iter().zip(v).map(|(p, v)| (p - v).powi(2)).sum()
}

fn regression_at(problem: &Problem, w: &[f64]) -> RegressionOnly {
    let mut out = RegressionOnly {
        regression: Vec::new(),
        residuals: Vec::new(),
        total: 0.0,
        degenerate: Vec::new(),
    };
    for set in &problem.sets {
        let s = problem.offline(set, w);
        let (reg, degenerate) = fit_alpha(&s, set);
        let res: Vec<f64> = (0..set.k).map(|j| sq_error(&reg, s[j], set.v_row(j))).collect();
        out.total += res.iter().sum::<f64>();
        out.regression.push(reg);
        out.residuals.push(res);
        out.degenerate.push(degenerate);
    }
    out
}

/// Least-squares alpha for each set with theta held fixed.
pub fn refit_regression_only(fixed: &ReweightParams, sets: &[EvalMatrix], scores: &[ScoredSample]) -> Result<RegressionOnly> {
    fixed.validate()?;
    require_models(sets, 2)?;
    let problem = Problem::new(sets, scores)?;
    Ok(regression_at(&problem, &problem.weights(fixed)))
}

/// Regression fit at arbitrary per-sample weights (aligned with `scores`).
pub fn regression_for_weights(w: &[f64], sets: &[EvalMatrix], scores: &[ScoredSample]) -> Result<RegressionOnly> {
    let problem = Problem::new(sets, scores)?;
    if w.len() != problem.n {
        return Err(Error::Misaligned(format!("{} weights for {} samples", w.len(), problem.n)));
    }
    Ok(regression_at(&problem, w))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Baselines {
    pub uniform: f64,
    pub heuristic: f64,
    /// The heuristic rejected every sample.
    pub heuristic_all_zero: bool,
}

fn heuristic_weights(scores: &[ScoredSample]) -> Vec<f64> {
    scores.iter().map(heuristic_weight).collect()
}

fn baselines_on(problem: &Problem, scores: &[ScoredSample]) -> Baselines {
    let h = heuristic_weights(scores);
    Baselines {
        uniform: regression_at(problem, &vec![1.0; problem.n]).total,
        heuristic: regression_at(problem, &h).total,
        heuristic_all_zero: h.iter().all(|w| *w == 0.0),
    }
}

/// Residuals with w ≡ 1 and with the keep-or-drop heuristic, alpha refit in
/// closed form for each.
pub fn baseline_residuals(sets: &[EvalMatrix], scores: &[ScoredSample]) -> Result<Baselines> {
    require_models(sets, 2)?;
    let problem = Problem::new(sets, scores)?;
    Ok(baselines_on(&problem, scores))
}

// ---------------------------------------------------------------------------
// Fitting

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitOptions {
    pub max_iters: usize,
    pub grad_tol: f64,
    pub restarts: usize,
    pub seed: u64,
    /// Standard deviation of the random theta initializations.
    pub init_sd: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            max_iters: 500,
            grad_tol: 1e-8,
            restarts: 8,
            seed: 0,
            init_sd: 5.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StartReport {
    pub label: String,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainFit {
    pub params: ReweightParams,
    pub regression: Vec<SetRegression>,
    pub objective: f64,
    /// Squared prediction error without the regularizer.
    pub residual: f64,
    pub uniform_residual: f64,
    /// `residual <= uniform_residual + 1e-9`.
    pub reaches_uniform: bool,
    pub mean_weight: f64,
    pub starts: Vec<StartReport>,
}

pub const CONTAINMENT_SLACK: f64 = 1e-9;

fn fit_problem(problem: &Problem, base: &ReweightParams, starts: &[(String, [f64; 3])], opts: &FitOptions) -> Result<TrainFit> {
    base.validate()?;
    let lbfgs = LbfgsOptions {
        max_iters: opts.max_iters,
        grad_tol: opts.grad_tol,
        ..Default::default()
    };
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut reports = Vec::with_capacity(starts.len());
    for (label, theta) in starts {
        let w = problem.weights(&base.with_theta(*theta));
        let alpha = regression_at(problem, &w).regression;
        let x0 = problem.pack(*theta, &alpha);
        let m = minimize(|x, g| problem.eval(base, x, g), &x0, &lbfgs);
        let ok = m.f.is_finite() && m.x.iter().all(|v| v.is_finite());
        reports.push(StartReport {
            label: label.clone(),
            objective: m.f,
            iterations: m.iterations,
            converged: m.termination == Termination::GradientTolerance,
        });
        log::debug!("start {label}: f = {:e} after {} iterations ({:?})", m.f, m.iterations, m.termination);
        if ok && best.as_ref().is_none_or(|(f, _)| m.f < *f) {
            best = Some((m.f, m.x));
        }
    }
    let (objective, x) = best.ok_or_else(|| Error::FitFailed("every initialization produced a non-finite objective".into()))?;
    let (theta, regression) = problem.unpack(&x);
    let params = base.with_theta(theta);
    let w = problem.weights(&params);
    let residual = residual_at(problem, &w, &regression);
    let uniform_residual = regression_at(problem, &vec![1.0; problem.n]).total;
    Ok(TrainFit {
        params,
        regression,
        objective,
        residual,
        uniform_residual,
        reaches_uniform: residual <= uniform_residual + CONTAINMENT_SLACK,
        mean_weight: w.iter().sum::<f64>() / w.len() as f64,
        starts: reports,
    })
}

fn residual_at(problem: &Problem, w: &[f64], regression: &[SetRegression]) -> f64 {
    problem
        .sets
        .iter()
        .zip(regression)
        .map(|(set, reg)| {
            let s = problem.offline(set, w);
            (0..set.k).map(|j| sq_error(reg, s[j], set.v_row(j))).sum::<f64>()
        })
        .sum()
}

fn start_list(base: &ReweightParams, init: [f64; 3], opts: &FitOptions) -> Result<Vec<(String, [f64; 3])>> {
    let mut starts = vec![("init".to_owned(), init), ("uniform".to_owned(), base.uniform().theta())];
    let normal = Normal::new(0.0, opts.init_sd).map_err(|e| Error::invalid(format!("init_sd: {e}")))?;
    let mut rng = rng_for(opts.seed, "reweight/restarts");
    for r in 0..opts.restarts {
        let theta = [normal.sample(&mut rng), normal.sample(&mut rng), normal.sample(&mut rng)];
        starts.push((format!("random{r}"), theta));
    }
    Ok(starts)
}

/// Jointly minimizes over theta and alpha from `init`, the uniform-weight
/// point, and `opts.restarts` random thetas; keeps the best.
pub fn fit(sets: &[EvalMatrix], scores: &[ScoredSample], init: &ReweightParams, opts: &FitOptions) -> Result<TrainFit> {
    require_models(sets, 2)?;
    let problem = Problem::new(sets, scores)?;
    fit_problem(&problem, init, &start_list(init, init.theta(), opts)?, opts)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeldOut {
    pub set: usize,
    pub model_id: String,
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub held_out: Vec<HeldOut>,
    pub summary: Summary,
}

impl CvReport {
    fn from(held_out: Vec<HeldOut>) -> Self {
        let rs: Vec<f64> = held_out.iter().map(|h| h.residual).collect();
        Self {
            summary: Summary::of(&rs),
            held_out,
        }
    }
}

/// Leave-one-model-out: for every model, refit on the rest and record the
/// squared error of its predicted live metrics.
fn cv_with<F>(problem: &Problem, mut fit_rest: F) -> Result<CvReport>
where
    F: FnMut(&Problem) -> Result<(Vec<f64>, Vec<SetRegression>)>,
{
    let mut held_out = Vec::new();
    for (t, set) in problem.sets.iter().enumerate() {
        for j in 0..set.k {
            let rest = problem.without_model(t, j);
            let (w, regression) = fit_rest(&rest)?;
            let s_j = set.chi_row(j, problem.n).iter().zip(&w).map(|(c, w)| c * w).sum::<f64>() / problem.n as f64;
            held_out.push(HeldOut {
                set: t,
                model_id: set.model_ids[j].clone(),
                residual: sq_error(&regression[t], s_j, set.v_row(j)),
            });
        }
    }
    Ok(CvReport::from(held_out))
}

fn require_cv(problem: &Problem) -> Result<()> {
    if let Some(k) = problem.sets.iter().map(|s| s.k).find(|k| *k < 3) {
        return Err(Error::invalid(format!(
            "held-one-out cross validation needs at least 3 models per set, got {k}"
        )));
    }
    Ok(())
}

/// Held-one-out CV of the joint fit. Each fold starts from `warm` (when
/// given), the uniform point and the seeded random restarts.
pub fn holdout_cv(
    sets: &[EvalMatrix],
    scores: &[ScoredSample],
    init: &ReweightParams,
    opts: &FitOptions,
) -> Result<CvReport> {
    let problem = Problem::new(sets, scores)?;
    require_cv(&problem)?;
    let starts = start_list(init, init.theta(), opts)?;
    holdout_cv_on(&problem, init, &starts, opts)
}

fn holdout_cv_on(problem: &Problem, base: &ReweightParams, starts: &[(String, [f64; 3])], opts: &FitOptions) -> Result<CvReport> {
    cv_with(problem, |rest| {
        let fit = fit_problem(rest, base, starts, opts)?;
        Ok((rest.weights(&fit.params), fit.regression))
    })
}

/// Held-one-out CV with fixed weights; only alpha is refit per fold.
fn holdout_fixed(problem: &Problem, w: &[f64]) -> Result<CvReport> {
    require_cv(problem)?;
    cv_with(problem, |rest| Ok((w.to_vec(), regression_at(rest, w).regression)))
}

// ---------------------------------------------------------------------------
// Full report

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualRow {
    pub uniform: Summary,
    pub heuristic: Summary,
    pub fitted: Summary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReweightFit {
    pub params: ReweightParams,
    pub regression: Vec<SetRegression>,
    pub residual_train: f64,
    pub residual_cv: Option<CvReport>,
    pub residual_val: Option<CvReport>,
    pub baseline_residuals: Baselines,
    pub table: Vec<(String, ResidualRow)>,
    pub reaches_uniform: bool,
    pub heuristic_all_zero: bool,
    pub mean_weight: f64,
    pub starts: Vec<StartReport>,
}

/// Runs the training fit, held-one-out CV on the training models (K ≥ 3),
/// and, when validation sets are given, held-one-out alpha refits on them
/// with theta fixed to the training fit.
pub fn fit_with_report(
    train: &[EvalMatrix],
    validation: &[EvalMatrix],
    scores: &[ScoredSample],
    init: &ReweightParams,
    opts: &FitOptions,
) -> Result<ReweightFit> {
    require_models(train, 2)?;
    let problem = Problem::new(train, scores)?;
    let fit = fit_problem(&problem, init, &start_list(init, init.theta(), opts)?, opts)?;
    let baselines = baselines_on(&problem, scores);
    let uniform_w = vec![1.0; problem.n];
    let heuristic_w = heuristic_weights(scores);
    let single = |x: f64| Summary { mean: x, std: 0.0 };

    let mut table = vec![(
        "Train".to_owned(),
        ResidualRow {
            uniform: single(baselines.uniform),
            heuristic: single(baselines.heuristic),
            fitted: single(fit.residual),
        },
    )];

    let cv = if problem.sets.iter().all(|s| s.k >= 3) {
        // Folds start from the full-data optimum and the uniform point.
        let starts = vec![
            ("full".to_owned(), fit.params.theta()),
            ("uniform".to_owned(), init.uniform().theta()),
        ];
        let ours = holdout_cv_on(&problem, init, &starts, opts)?;
        table.push((
            "CV".to_owned(),
            ResidualRow {
                uniform: holdout_fixed(&problem, &uniform_w)?.summary,
                heuristic: holdout_fixed(&problem, &heuristic_w)?.summary,
                fitted: ours.summary,
            },
        ));
        Some(ours)
    } else {
        None
    };

    let val = if validation.is_empty() {
        None
    } else {
        let vp = Problem::new(validation, scores)?;
        require_cv(&vp)?;
        let fitted_val = holdout_fixed(&vp, &vp.weights(&fit.params))?;
        table.push((
            "Validation".to_owned(),
            ResidualRow {
                uniform: holdout_fixed(&vp, &uniform_w)?.summary,
                heuristic: holdout_fixed(&vp, &heuristic_w)?.summary,
                fitted: fitted_val.summary,
            },
        ));
        Some(fitted_val)
    };

    Ok(ReweightFit {
        params: fit.params,
        regression: fit.regression,
        residual_train: fit.residual,
        residual_cv: cv,
        residual_val: val,
        heuristic_all_zero: baselines.heuristic_all_zero,
        baseline_residuals: baselines,
        table,
        reaches_uniform: fit.reaches_uniform,
        mean_weight: fit.mean_weight,
        starts: fit.starts,
    })
}

fn fmt_summary(s: &Summary) -> String {
    if s.std == 0.0 {
        format!("{:.3e}", s.mean)
    } else {
        format!("{:.3e} ± {:.3e}", s.mean, s.std)
    }
}

/// Plain-text report: parameters, per-set alpha and the residual table.
pub fn format_report(fit: &ReweightFit) -> String {
    let p = &fit.params;
    let mut out = String::new();
    let _ = writeln!(
        out,
        "w(s_f, s_p) = {} + {} * sigmoid({:.4} * s_f + {:.4} * s_p + {:.4})",
        p.c_min,
        p.c_max - p.c_min,
        p.theta_f,
        p.theta_p,
        p.theta_b
    );
    let _ = writeln!(out, "lambda = {}, mean weight = {:.6}", p.lambda, fit.mean_weight);
    for (t, r) in fit.regression.iter().enumerate() {
        let _ = writeln!(out, "set{t}: alpha_1 = {:?}, alpha_0 = {:?}", r.alpha_1, r.alpha_0);
    }
    let _ = writeln!(out);
    let _ = writeln!(out, "{:<12} {:>24} {:>24} {:>24}", "Residual", "w=1", "w in {0,1}", "fitted w");
    for (name, row) in &fit.table {
        let _ = writeln!(
            out,
            "{:<12} {:>24} {:>24} {:>24}",
            name,
            fmt_summary(&row.uniform),
            fmt_summary(&row.heuristic),
            fmt_summary(&row.fitted)
        );
    }
    if fit.heuristic_all_zero {
        let _ = writeln!(out, "note: the heuristic rejected every sample");
    }
    let _ = writeln!(
        out,
        "fitted training residual {} the uniform baseline",
        if fit.reaches_uniform { "does not exceed" } else { "EXCEEDS" }
    );
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn matrix(chi: Vec<Vec<u8>>, live: Vec<Vec<f64>>) -> EvalMatrix {
        let k = chi.len();
        let n = chi[0].len();
        let d = live[0].len();
        EvalMatrix {
            model_ids: (0..k).map(|j| format!("m{j}")).collect(),
            sample_ids: (0..n).map(|i| format!("s{i}")).collect(),
            metric_names: (0..d).map(|m| format!("v{m}")).collect(),
            chi,
            live_metrics: live,
        }
    }

    fn scores_for(vals: &[(f64, f64)]) -> Vec<ScoredSample> {
        vals.iter()
            .enumerate()
            .map(|(i, (f, p))| ScoredSample {
                sample_id: format!("s{i}"),
                s_f: *f,
                s_p: *p,
            })
            .collect()
    }

    fn random_instance(rng: &mut impl Rng, k: usize, n: usize, d: usize, sets: usize) -> (Vec<EvalMatrix>, Vec<ScoredSample>) {
        let scores = scores_for(&(0..n).map(|_| (rng.gen_range(-6.0..-2.0), rng.gen_range(-6.0..-2.0))).collect::<Vec<_>>());
        let ms = (0..sets)
            .map(|_| {
                let chi = (0..k).map(|_| (0..n).map(|_| rng.gen_range(0..2u8)).collect()).collect();
                let live = (0..k).map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
                matrix(chi, live)
            })
            .collect();
        (ms, scores)
    }

    fn random_alpha(rng: &mut impl Rng, d: usize, sets: usize) -> Vec<SetRegression> {
        (0..sets)
            .map(|_| SetRegression {
                alpha_1: (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect(),
                alpha_0: (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            })
            .collect()
    }

    #[test]
    fn weight_examples() {
        let p = ReweightParams::default();
        let s = ScoredSample {
            sample_id: "a".into(),
            s_f: -3.2,
            s_p: -7.0,
        };
        assert_eq!(weight(&p, &s), 1.005);
        let fitted = p.with_theta([40.64, -30.44, -1.59]);
        let expected = 0.01 + 1.99 / (1.0 + 1.59f64.exp());
        assert!((fitted.weight_of(0.0, 0.0) - expected).abs() < 1e-15);
        let sat = p.with_theta([1e6, 0.0, 0.0]);
        assert_eq!(sat.weight_of(1.0, 0.0), 2.0f64.next_down());
        assert_eq!(sat.weight_of(-1.0, 0.0), 0.01f64.next_up());
        let u = p.uniform();
        assert!((u.weight_of(-4.0, 9.0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn invalid_params_rejected() {
        let p = ReweightParams::default();
        assert!(ReweightParams { c_min: 0.0, ..p }.validate().is_err());
        assert!(ReweightParams { c_max: 0.5, ..p }.validate().is_err());
        assert!(ReweightParams { lambda: -1.0, ..p }.validate().is_err());
    }

    #[test]
    fn objective_total_variance_at_mean() {
        let m = matrix(vec![vec![1, 0, 1], vec![0, 0, 1], vec![1, 1, 1]], vec![vec![1.0, 5.0], vec![2.0, 3.0], vec![6.0, 1.0]]);
        let scores = scores_for(&[(-3.0, -4.0), (-5.0, -2.0), (-4.0, -4.0)]);
        let p = ReweightParams {
            lambda: 0.0,
            ..Default::default()
        };
        let alpha = vec![SetRegression {
            alpha_1: vec![0.0, 0.0],
            alpha_0: vec![3.0, 3.0],
        }];
        let o = objective(&p, &alpha, &[m], &scores).unwrap();
        // (4 + 1 + 9) + (4 + 0 + 4)
        assert!((o.value - 22.0).abs() < 1e-12);
        assert!(o.grad_alpha[0].alpha_0.iter().all(|g| g.abs() < 1e-12));
    }

    #[test]
    fn uniform_weights_zero_regularizer() {
        let m = matrix(vec![vec![1, 0], vec![0, 1]], vec![vec![0.5], vec![0.5]]);
        let scores = scores_for(&[(-3.0, -4.0), (-5.0, -2.0)]);
        let p = ReweightParams {
            lambda: 1e6,
            ..Default::default()
        }
        .uniform();
        let alpha = vec![SetRegression {
            alpha_1: vec![0.0],
            alpha_0: vec![0.5],
        }];
        let o = objective(&p, &alpha, &[m], &scores).unwrap();
        assert!(o.value < 1e-20, "{}", o.value);
    }

    #[test]
    fn misaligned_and_small_inputs_rejected() {
        let m = matrix(vec![vec![1, 0], vec![0, 1]], vec![vec![0.5], vec![0.5]]);
        let mut scores = scores_for(&[(-3.0, -4.0), (-5.0, -2.0)]);
        scores[1].sample_id = "other".into();
        let alpha = vec![SetRegression::zeros(1)];
        let p = ReweightParams::default();
        assert!(matches!(objective(&p, &alpha, std::slice::from_ref(&m), &scores), Err(Error::Misaligned(_))));
        let one = m.without_model(0);
        let ok_scores = scores_for(&[(-3.0, -4.0), (-5.0, -2.0)]);
        assert!(objective(&p, &alpha, &[one], &ok_scores).is_err());
        assert!(holdout_cv(&[m], &ok_scores, &p, &FitOptions::default()).is_err());
    }

    /// Central differences with h = 1e-5; relative error floored at 1e-4
    /// in the denominator so vanishing components compare absolutely.
    fn max_gradient_error(p: &ReweightParams, alpha: &[SetRegression], sets: &[EvalMatrix], scores: &[ScoredSample]) -> f64 {
        let h = 1e-5;
        let base = objective(p, alpha, sets, scores).unwrap();
        let f = |p: &ReweightParams, a: &[SetRegression]| objective(p, a, sets, scores).unwrap().value;
        let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-4);
        let mut worst = 0.0f64;
        for c in 0..3 {
            let mut tp = p.theta();
            let mut tm = p.theta();
            tp[c] += h;
            tm[c] -= h;
            let fd = (f(&p.with_theta(tp), alpha) - f(&p.with_theta(tm), alpha)) / (2.0 * h);
            worst = worst.max(rel(base.grad_theta[c], fd));
        }
        for t in 0..alpha.len() {
            for m in 0..alpha[t].alpha_1.len() {
                for which in 0..2 {
                    let mut ap = alpha.to_vec();
                    let mut am = alpha.to_vec();
                    let (vp, vm, g) = if which == 0 {
                        (&mut ap[t].alpha_1[m], &mut am[t].alpha_1[m], base.grad_alpha[t].alpha_1[m])
                    } else {
                        (&mut ap[t].alpha_0[m], &mut am[t].alpha_0[m], base.grad_alpha[t].alpha_0[m])
                    };
                    *vp += h;
                    *vm -= h;
                    let fd = (f(p, &ap) - f(p, &am)) / (2.0 * h);
                    worst = worst.max(rel(g, fd));
                }
            }
        }
        worst
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = rng_for(3, "grad");
        for _ in 0..20 {
            let k = rng.gen_range(2..=8);
            let n = rng.gen_range(2..=50);
            let d = rng.gen_range(1..=3);
            let sets = rng.gen_range(1..=2);
            let (ms, scores) = random_instance(&mut rng, k, n, d, sets);
            let alpha = random_alpha(&mut rng, d, sets);
            let p = ReweightParams {
                lambda: rng.gen_range(0.0..1.0),
                ..Default::default()
            }
            .with_theta([rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-2.0..2.0)]);
            let err = max_gradient_error(&p, &alpha, &ms, &scores);
            assert!(err < 1e-5, "relative error {err}");
        }
    }

    #[test]
    fn exact_line_regression() {
        // Three models with offline metric 1, 2, 3 under uniform weights.
        let chi = vec![vec![1, 0, 0], vec![1, 1, 0], vec![1, 1, 1]];
        let m = matrix(chi, vec![vec![2.0 / 3.0], vec![4.0 / 3.0], vec![2.0]]);
        let scores = scores_for(&[(-1.0, -1.0); 3]);
        let r = refit_regression_only(&ReweightParams::default().uniform(), &[m], &scores).unwrap();
        assert!((r.regression[0].alpha_1[0] - 2.0).abs() < 1e-9);
        assert!(r.regression[0].alpha_0[0].abs() < 1e-9);
        assert!(r.total < 1e-20);
        assert!(!r.degenerate[0]);
    }

    #[test]
    fn constant_offline_metric_is_degenerate() {
        let m = matrix(vec![vec![1, 0], vec![0, 1], vec![1, 0]], vec![vec![1.0], vec![2.0], vec![6.0]]);
        let scores = scores_for(&[(-1.0, -1.0); 2]);
        let r = refit_regression_only(&ReweightParams::default().uniform(), &[m], &scores).unwrap();
        assert!(r.degenerate[0]);
        assert_eq!(r.regression[0].alpha_1[0], 0.0);
        assert!((r.regression[0].alpha_0[0] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn heuristic_equals_uniform_when_all_pass() {
        let mut rng = rng_for(5, "h");
        let (ms, _) = random_instance(&mut rng, 2, 10, 1, 1);
        let scores = scores_for(&[(-1.0, -2.0); 10]);
        let b = baseline_residuals(&ms, &scores).unwrap();
        assert_eq!(b.uniform, b.heuristic);
        assert!(!b.heuristic_all_zero);
        let rejected = scores_for(&[(-8.0, -2.0); 10]);
        let b = baseline_residuals(&ms, &rejected).unwrap();
        assert!(b.heuristic_all_zero);
    }

    #[test]
    fn constant_live_metrics_fit_to_zero() {
        let mut rng = rng_for(8, "c");
        let (mut ms, scores) = random_instance(&mut rng, 4, 20, 2, 1);
        for row in &mut ms[0].live_metrics {
            *row = vec![0.3, -1.5];
        }
        let cv = holdout_cv(&ms, &scores, &ReweightParams::default(), &FitOptions { restarts: 1, ..Default::default() }).unwrap();
        assert_eq!(cv.held_out.len(), 4);
        assert!(cv.held_out.iter().all(|h| h.residual < 1e-12), "{cv:?}");
    }

    #[test]
    fn fit_never_worse_than_uniform() {
        let mut rng = rng_for(11, "fit");
        for _ in 0..5 {
            let (ms, scores) = random_instance(&mut rng, 5, 30, 2, 2);
            let fit = fit(&ms, &scores, &ReweightParams::default(), &FitOptions { restarts: 2, ..Default::default() }).unwrap();
            assert!(fit.reaches_uniform, "{} vs {}", fit.residual, fit.uniform_residual);
        }
    }

    #[test]
    fn report_has_table_rows() {
        let mut rng = rng_for(12, "rep");
        let (train, scores) = random_instance(&mut rng, 4, 25, 1, 1);
        let (val, _) = random_instance(&mut rng, 3, 25, 1, 1);
        let fit = fit_with_report(&train, &val, &scores, &ReweightParams::default(), &FitOptions { restarts: 1, ..Default::default() }).unwrap();
        let names: Vec<_> = fit.table.iter().map(|(n, _)| n.as_str()).collect();
        assert_eq!(names, ["Train", "CV", "Validation"]);
        assert_eq!(fit.residual_val.as_ref().unwrap().held_out.len(), 3);
        let text = format_report(&fit);
        assert!(text.contains("w in {0,1}") && text.contains("Validation"));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn weights_stay_in_open_range(tf in -50.0f64..50.0, tp in -50.0f64..50.0, tb in -20.0f64..20.0, sf in -10.0f64..0.0, sp in -10.0f64..0.0) {
            let p = ReweightParams::default().with_theta([tf, tp, tb]);
            let w = p.weight_of(sf, sp);
            prop_assert!(w > p.c_min && w < p.c_max);
            if tf > 0.0 {
                prop_assert!(p.weight_of(sf + 0.01, sp) >= w);
            }
            if tp > 0.0 {
                prop_assert!(p.weight_of(sf, sp + 0.01) >= w);
            }
        }

        #[test]
        fn gradient_property(seed in any::<u64>()) {
            let mut rng = rng_for(seed, "prop");
            let (ms, scores) = random_instance(&mut rng, 3, 12, 2, 1);
            let alpha = random_alpha(&mut rng, 2, 1);
            let p = ReweightParams::default().with_theta([rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), 0.0]);
            prop_assert!(max_gradient_error(&p, &alpha, &ms, &scores) < 1e-5);
        }

        #[test]
        fn objective_permutation_invariant(seed in any::<u64>()) {
            let mut rng = rng_for(seed, "perm");
            let (ms, scores) = random_instance(&mut rng, 4, 15, 2, 1);
            let alpha = random_alpha(&mut rng, 2, 1);
            let p = ReweightParams::default().with_theta([0.5, -0.3, 0.2]);
            let a = objective(&p, &alpha, &ms, &scores).unwrap().value;

            let mut shuffled = scores.clone();
            shuffled.reverse();
            let mut m = ms[0].clone();
            m.model_ids.reverse();
            m.chi.reverse();
            m.live_metrics.reverse();
            let b = objective(&p, &alpha, &[m], &shuffled).unwrap().value;
            prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        }
    }
}
