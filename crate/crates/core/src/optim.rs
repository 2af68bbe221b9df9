//! Limited-memory BFGS with a strong-Wolfe line search.

use std::collections::VecDeque;

#[derive(Debug, Clone, PartialEq)]
pub struct LbfgsOptions {
    pub memory: usize,
    pub max_iters: usize,
    /// Stop when the largest gradient component falls below this.
    pub grad_tol: f64,
    pub max_line_search: usize,
    pub c1: f64,
    pub c2: f64,
}

impl Default for LbfgsOptions {
    fn default() -> Self {
        Self {
            memory: 10,
            max_iters: 500,
            grad_tol: 1e-8,
            max_line_search: 40,
            c1: 1e-4,
            c2: 0.9,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    GradientTolerance,
    MaxIterations,
    /// No step along the search direction reduced the objective.
    Stalled,
    NonFinite,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub f: f64,
    pub grad_inf_norm: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub termination: Termination,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn inf_norm(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, x| m.max(x.abs()))
}

struct Counted<F> {
    f: F,
    evals: usize,
}

impl<F: FnMut(&[f64], &mut [f64]) -> f64> Counted<F> {
    fn eval(&mut self, x: &[f64], g: &mut [f64]) -> f64 {
        self.evals += 1;
        g.iter_mut().for_each(|v| *v = 0.0);
        (self.f)(x, g)
    }
}

struct Point {
    a: f64,
    f: f64,
    d: f64,
}

struct LineSearchResult {
    x: Vec<f64>,
    f: f64,
    g: Vec<f64>,
}

/// Minimizes `f`, which returns the value and writes the gradient into its
/// second argument (zeroed before each call).
pub fn minimize<F>(f: F, x0: &[f64], opts: &LbfgsOptions) -> Minimum
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    let mut fun = Counted { f, evals: 0 };
    let n = x0.len();
    let mut x = x0.to_vec();
    let mut g = vec![0.0; n];
    let mut fx = fun.eval(&x, &mut g);
    if !fx.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return Minimum {
            x,
            f: fx,
            grad_inf_norm: f64::NAN,
            iterations: 0,
            evaluations: fun.evals,
            termination: Termination::NonFinite,
        };
    }
    let mut history: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(opts.memory);
    let mut termination = Termination::MaxIterations;
    let mut iterations = 0;

    while iterations < opts.max_iters {
        if inf_norm(&g) <= opts.grad_tol {
            termination = Termination::GradientTolerance;
            break;
        }
        let mut d = two_loop(&g, &history);
        if dot(&d, &g) >= 0.0 {
            history.clear();
            d = g.iter().map(|v| -v).collect();
        }
        let step0 = if history.is_empty() {
            (1.0 / inf_norm(&g)).min(1.0)
        } else {
            1.0
        };
        let result = match line_search(&mut fun, &x, fx, &g, &d, step0, opts) {
            Some(r) => r,
            None if !history.is_empty() => {
                history.clear();
                continue;
            }
            None => {
                termination = Termination::Stalled;
                break;
            }
        };
        iterations += 1;
        let s: Vec<f64> = result.x.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = result.g.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-300 {
            if history.len() == opts.memory {
                history.pop_front();
            }
            history.push_back((s, y, 1.0 / sy));
        }
        x = result.x;
        g = result.g;
        fx = result.f;
    }
    Minimum {
        grad_inf_norm: inf_norm(&g),
        x,
        f: fx,
        iterations,
        evaluations: fun.evals,
        termination,
    }
}

/// Computes -H·g from the stored curvature pairs.
fn two_loop(g: &[f64], history: &VecDeque<(Vec<f64>, Vec<f64>, f64)>) -> Vec<f64> {
    let mut q: Vec<f64> = g.to_vec();
    let mut alphas = Vec::with_capacity(history.len());
    for (s, y, rho) in history.iter().rev() {
        let a = rho * dot(s, &q);
        q.iter_mut().zip(y).for_each(|(qi, yi)| *qi -= a * yi);
        alphas.push(a);
    }
    if let Some((s, y, _)) = history.back() {
        let gamma = dot(s, y) / dot(y, y);
        q.iter_mut().for_each(|v| *v *= gamma);
    }
    for ((s, y, rho), a) in history.iter().zip(alphas.into_iter().rev()) {
        let b = rho * dot(y, &q);
        q.iter_mut().zip(s).for_each(|(qi, si)| *qi += (a - b) * si);
    }
    q.iter_mut().for_each(|v| *v = -*v);
    q
}

fn line_search<F>(
    fun: &mut Counted<F>,
    x: &[f64],
    fx: f64,
    g: &[f64],
    d: &[f64],
    step0: f64,
    opts: &LbfgsOptions,
) -> Option<LineSearchResult>
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    let d0 = dot(g, d);
    let mut trial_x = vec![0.0; x.len()];
    let mut trial_g = vec![0.0; x.len()];
    let mut eval = |fun: &mut Counted<F>, a: f64, tx: &mut Vec<f64>, tg: &mut Vec<f64>| -> (f64, f64) {
        for ((t, xi), di) in tx.iter_mut().zip(x).zip(d) {
            *t = xi + a * di;
        }
        let f = fun.eval(tx, tg);
        if !f.is_finite() || tg.iter().any(|v| !v.is_finite()) {
            return (f64::NAN, f64::NAN);
        }
        (f, dot(tg, d))
    };
    let armijo = |a: f64, f: f64| f <= fx + opts.c1 * a * d0;
    let curvature = |dd: f64| dd.abs() <= -opts.c2 * d0;

    let mut prev = Point { a: 0.0, f: fx, d: d0 };
    let mut a = step0;
    let mut budget = opts.max_line_search;
    let mut first = true;
    while budget > 0 {
        budget -= 1;
        let (fa, da) = eval(fun, a, &mut trial_x, &mut trial_g);
        if fa.is_nan() {
            // Non-finite objective: retreat toward the last good point.
            a = prev.a + 0.5 * (a - prev.a);
            continue;
        }
        if !armijo(a, fa) || (!first && fa >= prev.f) {
            let hi = Point { a, f: fa, d: da };
            return zoom(fun, &mut eval, prev, hi, fx, d0, &mut budget, opts, &mut trial_x, &mut trial_g);
        }
        if curvature(da) {
            return Some(LineSearchResult {
                x: trial_x,
                f: fa,
                g: trial_g,
            });
        }
        let cur = Point { a, f: fa, d: da };
        if da >= 0.0 {
            return zoom(fun, &mut eval, cur, prev, fx, d0, &mut budget, opts, &mut trial_x, &mut trial_g);
        }
        prev = cur;
        a *= 2.0;
        first = false;
    }
    None
}

#[allow(clippy::too_many_arguments)]
fn zoom<F, E>(
    fun: &mut Counted<F>,
    eval: &mut E,
    mut lo: Point,
    mut hi: Point,
    fx: f64,
    d0: f64,
    budget: &mut usize,
    opts: &LbfgsOptions,
    tx: &mut Vec<f64>,
    tg: &mut Vec<f64>,
) -> Option<LineSearchResult>
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
    E: FnMut(&mut Counted<F>, f64, &mut Vec<f64>, &mut Vec<f64>) -> (f64, f64),
{
    while *budget > 0 {
        *budget -= 1;
        let (left, right) = if lo.a < hi.a { (lo.a, hi.a) } else { (hi.a, lo.a) };
        let width = right - left;
        if width <= 1e-16 * right.max(1.0) {
            break;
        }
        let mut a = cubic_min(&lo, &hi).unwrap_or(0.5 * (lo.a + hi.a));
        if !(a > left + 0.1 * width && a < right - 0.1 * width) {
            a = 0.5 * (lo.a + hi.a);
        }
        let (fa, da) = eval(fun, a, tx, tg);
        if fa.is_nan() || fa > fx + opts.c1 * a * d0 || fa >= lo.f {
            hi = Point {
                a,
                f: if fa.is_nan() { f64::INFINITY } else { fa },
                d: da,
            };
            continue;
        }
        if da.abs() <= -opts.c2 * d0 {
            return Some(LineSearchResult {
                x: tx.clone(),
                f: fa,
                g: tg.clone(),
            });
        }
        if da * (hi.a - lo.a) >= 0.0 {
            hi = Point { a: lo.a, f: lo.f, d: lo.d };
        }
        lo = Point { a, f: fa, d: da };
    }
    // Fall back to the best sufficient-decrease point found, if any.
    if lo.a > 0.0 && lo.f < fx {
        let (f, _) = eval(fun, lo.a, tx, tg);
        if f.is_finite() {
            return Some(LineSearchResult {
                x: tx.clone(),
                f,
                g: tg.clone(),
            });
        }
    }
    None
}

/// Minimizer of the cubic interpolating both endpoints' values and slopes.
fn cubic_min(p: &Point, q: &Point) -> Option<f64> {
    if !(p.f.is_finite() && q.f.is_finite() && p.d.is_finite() && q.d.is_finite()) {
        return None;
    }
    let d1 = p.d + q.d - 3.0 * (p.f - q.f) / (p.a - q.a);
    let disc = d1 * d1 - p.d * q.d;
    if disc < 0.0 {
        return None;
    }
    let d2 = (q.a - p.a).signum() * disc.sqrt();
    let a = q.a - (q.a - p.a) * (q.d + d2 - d1) / (q.d - p.d + 2.0 * d2);
    a.is_finite().then_some(a)
}
