//! Derivative-free maximization: Nelder-Mead with restarts, then an optional
//! quasi-Newton polish on central finite differences.

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerSettings {
    /// Absolute tolerance on the spread of objective values over the simplex.
    pub f_tol: f64,
    /// Tolerance on the largest coordinate distance from the best vertex.
    pub x_tol: f64,
    /// Cap on simplex iterations, summed over restarts.
    pub max_iter: usize,
    pub initial_step: f64,
    pub max_restarts: usize,
    pub polish: bool,
    pub fd_step: f64,
}

impl Default for OptimizerSettings {
    fn default() -> Self {
        Self {
            f_tol: 1e-6,
            x_tol: 1e-5,
            max_iter: 2000,
            initial_step: 0.5,
            max_restarts: 3,
            polish: true,
            fd_step: 1e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub initial_value: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub restarts: usize,
    pub converged: bool,
}

struct Counted<F> {
    f: F,
    evals: usize,
}

impl<F: FnMut(&[f64]) -> f64> Counted<F> {
    // Minimizes the negated objective; NaN counts as +inf.
    fn cost(&mut self, x: &[f64]) -> f64 {
        self.evals += 1;
        let v = -(self.f)(x);
        if v.is_nan() {
            f64::INFINITY
        } else {
            v
        }
    }
}

/// Maximizes `f` starting from `x0`. The returned point is never worse than `x0`.
pub fn maximize<F: FnMut(&[f64]) -> f64>(
    f: F,
    x0: &[f64],
    settings: &OptimizerSettings,
) -> OptimResult {
    let mut obj = Counted { f, evals: 0 };
    let start_cost = obj.cost(x0);
    if x0.is_empty() {
        return OptimResult {
            x: Vec::new(),
            value: -start_cost,
            initial_value: -start_cost,
            iterations: 0,
            evaluations: obj.evals,
            restarts: 0,
            converged: true,
        };
    }

    let mut best = x0.to_vec();
    let mut best_cost = start_cost;
    let mut iterations = 0;
    let mut converged;
    let mut restarts = 0;
    let mut step = settings.initial_step;

    loop {
        let budget = settings.max_iter - iterations;
        let (x, c, its, ok) = nelder_mead(&mut obj, &best, best_cost, step, settings, budget);
        iterations += its;
        let gain = best_cost - c;
        if c < best_cost {
            best = x;
            best_cost = c;
        }
        converged = ok;
        if !ok || iterations >= settings.max_iter || restarts >= settings.max_restarts {
            break;
        }
        // A restart that finds nothing new confirms the optimum.
        if restarts > 0 && gain <= settings.f_tol {
            break;
        }
        restarts += 1;
        step = (step * 0.5).max(10.0 * settings.x_tol);
    }

    if settings.polish {
        if let Some((x, c)) = bfgs_polish(&mut obj, &best, best_cost, settings) {
            if c < best_cost {
                best = x;
                best_cost = c;
            }
        }
    }

    OptimResult {
        x: best,
        value: -best_cost,
        initial_value: -start_cost,
        iterations,
        evaluations: obj.evals,
        restarts,
        converged,
    }
}

fn nelder_mead<F: FnMut(&[f64]) -> f64>(
    obj: &mut Counted<F>,
    x0: &[f64],
    c0: f64,
    step: f64,
    settings: &OptimizerSettings,
    budget: usize,
) -> (Vec<f64>, f64, usize, bool) {
    let n = x0.len();
    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n + 1);
    simplex.push((x0.to_vec(), c0));
    for i in 0..n {
        let mut x = x0.to_vec();
        x[i] += step;
        let c = obj.cost(&x);
        simplex.push((x, c));
    }

    let mut iters = 0;
    loop {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let spread_f = simplex[n].1 - simplex[0].1;
        let spread_x = simplex[1..]
            .iter()
            .flat_map(|(x, _)| x.iter().zip(&simplex[0].0).map(|(a, b)| (a - b).abs()))
            .fold(0.0, f64::max);
        if spread_f.is_finite() && spread_f <= settings.f_tol && spread_x <= settings.x_tol {
            return (simplex[0].0.clone(), simplex[0].1, iters, true);
        }
        if iters >= budget {
            return (simplex[0].0.clone(), simplex[0].1, iters, false);
        }
        iters += 1;

        let centroid: Vec<f64> = (0..n)
            .map(|j| simplex[..n].iter().map(|(x, _)| x[j]).sum::<f64>() / n as f64)
            .collect();
        let along = |t: f64, worst: &[f64]| -> Vec<f64> {
            centroid
                .iter()
                .zip(worst)
                .map(|(c, w)| c + t * (c - w))
                .collect()
        };
        let worst = simplex[n].0.clone();
        let reflected = along(1.0, &worst);
        let cr = obj.cost(&reflected);
        if cr < simplex[0].1 {
            let expanded = along(2.0, &worst);
            let ce = obj.cost(&expanded);
            simplex[n] = if ce < cr {
                (expanded, ce)
            } else {
                (reflected, cr)
            };
            continue;
        }
        if cr < simplex[n - 1].1 {
            simplex[n] = (reflected, cr);
            continue;
        }
        // Outside contraction if the reflection helped at all, inside otherwise.
        let contracted = along(if cr < simplex[n].1 { 0.5 } else { -0.5 }, &worst);
        let cc = obj.cost(&contracted);
        if cc < simplex[n].1.min(cr) {
            simplex[n] = (contracted, cc);
            continue;
        }
        let best = simplex[0].0.clone();
        for v in simplex.iter_mut().skip(1) {
            let x: Vec<f64> = best
                .iter()
                .zip(&v.0)
                .map(|(b, x)| b + 0.5 * (x - b))
                .collect();
            let c = obj.cost(&x);
            *v = (x, c);
        }
    }
}

fn gradient<F: FnMut(&[f64]) -> f64>(obj: &mut Counted<F>, x: &[f64], h: f64) -> Vec<f64> {
    let mut g = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let up = obj.cost(&probe);
        probe[i] = x[i] - h;
        let down = obj.cost(&probe);
        probe[i] = x[i];
        g[i] = (up - down) / (2.0 * h);
    }
    g
}

/// BFGS on the negated objective with a backtracking line search.
fn bfgs_polish<F: FnMut(&[f64]) -> f64>(
    obj: &mut Counted<F>,
    x0: &[f64],
    c0: f64,
    settings: &OptimizerSettings,
) -> Option<(Vec<f64>, f64)> {
    let n = x0.len();
    let mut x = x0.to_vec();
    let mut c = c0;
    let mut g = gradient(obj, &x, settings.fd_step);
    if g.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let mut h_inv: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();

    for _ in 0..50 {
        let dir: Vec<f64> = (0..n)
            .map(|i| -(0..n).map(|j| h_inv[i][j] * g[j]).sum::<f64>())
            .collect();
        let slope: f64 = dir.iter().zip(&g).map(|(d, g)| d * g).sum();
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if !(slope < 0.0) {
            break;
        }
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..30 {
            let trial: Vec<f64> = x.iter().zip(&dir).map(|(x, d)| x + t * d).collect();
            let ct = obj.cost(&trial);
            if ct <= c + 1e-4 * t * slope {
                accepted = Some((trial, ct));
                break;
            }
            t *= 0.5;
        }
        let Some((x_new, c_new)) = accepted else {
            break;
        };
        let improvement = c - c_new;
        let g_new = gradient(obj, &x_new, settings.fd_step);
        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        x = x_new;
        c = c_new;
        g = g_new;
        if improvement <= settings.f_tol || s.iter().all(|v| v.abs() <= settings.x_tol) {
            break;
        }
        let sy: f64 = s.iter().zip(&y).map(|(a, b)| a * b).sum();
        if sy > 1e-12 {
            let hy: Vec<f64> = (0..n)
                .map(|i| (0..n).map(|j| h_inv[i][j] * y[j]).sum())
                .collect();
            let yhy: f64 = y.iter().zip(&hy).map(|(a, b)| a * b).sum();
            for i in 0..n {
                for j in 0..n {
                    h_inv[i][j] +=
                        (sy + yhy) * s[i] * s[j] / (sy * sy) - (hy[i] * s[j] + s[i] * hy[j]) / sy;
                }
            }
        }
    }
    Some((x, c))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn finds_the_peak_of_a_concave_quadratic() {
        let f = |x: &[f64]| -(x[0] - 1.0).powi(2) - 3.0 * (x[1] + 2.0).powi(2) - 0.5 * x[0] * x[1];
        let r = maximize(f, &[0.0, 0.0], &OptimizerSettings::default());
        // Zero gradient: 2 x0 + 0.5 x1 = 2 and 0.5 x0 + 6 x1 = -12, by Cramer's rule.
        let det = 2.0 * 6.0 - 0.5 * 0.5;
        let x0 = (2.0 * 6.0 - 0.5 * -12.0) / det;
        let x1 = (2.0 * -12.0 - 0.5 * 2.0) / det;
        assert!((r.x[0] - x0).abs() < 1e-4, "{:?} vs {x0}", r.x);
        assert!((r.x[1] - x1).abs() < 1e-4, "{:?} vs {x1}", r.x);
        assert!(r.converged);
        assert!(r.value >= r.initial_value);
    }

    #[test]
    fn rosenbrock_valley() {
        let f = |x: &[f64]| -((1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2));
        let r = maximize(f, &[-1.2, 1.0], &OptimizerSettings::default());
        assert!(
            (r.x[0] - 1.0).abs() < 1e-3 && (r.x[1] - 1.0).abs() < 2e-3,
            "{:?}",
            r.x
        );
    }

    #[test]
    fn never_returns_worse_than_the_start() {
        let f = |x: &[f64]| if x[0] == 0.0 { 1.0 } else { 0.0 };
        let r = maximize(f, &[0.0], &OptimizerSettings::default());
        assert_eq!(r.x, vec![0.0]);
        assert_eq!(r.value, 1.0);
    }

    #[test]
    fn iteration_cap_is_reported_as_not_converged() {
        let f = |x: &[f64]| -(x[0] - 100.0).powi(2);
        let settings = OptimizerSettings {
            max_iter: 3,
            polish: false,
            ..Default::default()
        };
        let r = maximize(f, &[0.0], &settings);
        assert!(!r.converged);
        assert!(r.value > r.initial_value);
    }
}
