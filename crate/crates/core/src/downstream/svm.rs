//! RBF-kernel support vector classification solved by SMO, one-vs-rest for
//! more than two classes.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::metrics::accuracy;
use crate::error::{Error, Result};

/// Penalty grid searched by cross-validation: `10^k`, `k = -4..=4`.
pub const C_GRID: [f64; 9] = [1e-4, 1e-3, 1e-2, 1e-1, 1.0, 1e1, 1e2, 1e3, 1e4];

const TAU: f64 = 1e-12;
pub const SMO_TOLERANCE: f64 = 1e-3;

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn rbf(a: &[f64], b: &[f64], gamma: f64) -> f64 {
    (-gamma * sq_dist(a, b)).exp()
}

/// `1 / (d * var)` over all feature values; `1/d` when the variance vanishes.
pub fn default_gamma(rows: &[Vec<f64>]) -> f64 {
    let d = rows.first().map_or(1, Vec::len).max(1) as f64;
    let n = rows.iter().map(Vec::len).sum::<usize>().max(1) as f64;
    let mean = rows.iter().flatten().sum::<f64>() / n;
    let var = rows.iter().flatten().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    if var > 0.0 {
        1.0 / (d * var)
    } else {
        1.0 / d
    }
}

/// Symmetric kernel matrix of `rows`, row-major.
pub fn gram(rows: &[Vec<f64>], gamma: f64) -> Vec<f64> {
    let n = rows.len();
    let mut k = vec![0.0; n * n];
    for i in 0..n {
        k[i * n + i] = 1.0;
        for j in 0..i {
            let v = rbf(&rows[i], &rows[j], gamma);
            k[i * n + j] = v;
            k[j * n + i] = v;
        }
    }
    k
}

/// Dual solution of one binary problem.
#[derive(Debug, Clone, PartialEq)]
pub struct SmoSolution {
    pub alpha: Vec<f64>,
    pub rho: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Solves `min 0.5 a'Qa - e'a` s.t. `0 <= a <= c`, `y'a = 0` with
/// `Q_ij = y_i y_j K_ij`, using maximal-gain second-order pair selection.
/// `kernel(i, j)` must be symmetric; `y` holds +-1.
pub fn smo(kernel: &dyn Fn(usize, usize) -> f64, y: &[f64], c: f64, tol: f64, max_iter: usize) -> SmoSolution {
    let n = y.len();
    let mut a = vec![0.0; n];
    let mut g = vec![-1.0; n];
    let qd: Vec<f64> = (0..n).map(|i| kernel(i, i)).collect();
    let q = |i: usize, j: usize| y[i] * y[j] * kernel(i, j);
    let upper = |a: &[f64], t: usize| a[t] >= c;
    let lower = |a: &[f64], t: usize| a[t] <= 0.0;
    let mut iter = 0;
    let mut converged = false;
    while iter < max_iter {
        // working set
        let mut gmax = f64::NEG_INFINITY;
        let mut i_sel = None;
        for t in 0..n {
            if y[t] > 0.0 {
                if !upper(&a, t) && -g[t] >= gmax {
                    gmax = -g[t];
                    i_sel = Some(t);
                }
            } else if !lower(&a, t) && g[t] >= gmax {
                gmax = g[t];
                i_sel = Some(t);
            }
        }
        let Some(i) = i_sel else {
            converged = true;
            break;
        };
        let qi: Vec<f64> = (0..n).map(|t| q(i, t)).collect();
        let mut gmax2 = f64::NEG_INFINITY;
        let mut j_sel = None;
        let mut best = f64::INFINITY;
        for t in 0..n {
            if y[t] > 0.0 {
                if !lower(&a, t) {
                    let diff = gmax + g[t];
                    gmax2 = gmax2.max(g[t]);
                    if diff > 0.0 {
                        let quad = qd[i] + qd[t] - 2.0 * y[i] * qi[t];
                        let obj = -diff * diff / if quad > 0.0 { quad } else { TAU };
                        if obj <= best {
                            best = obj;
                            j_sel = Some(t);
                        }
                    }
                }
            } else if !upper(&a, t) {
                let diff = gmax - g[t];
                gmax2 = gmax2.max(-g[t]);
                if diff > 0.0 {
                    let quad = qd[i] + qd[t] + 2.0 * y[i] * qi[t];
                    let obj = -diff * diff / if quad > 0.0 { quad } else { TAU };
                    if obj <= best {
                        best = obj;
                        j_sel = Some(t);
                    }
                }
            }
        }
        let j = match j_sel {
            Some(j) if gmax + gmax2 >= tol => j,
            _ => {
                converged = true;
                break;
            }
        };
        iter += 1;

        // analytic two-variable update
        let (old_i, old_j) = (a[i], a[j]);
        let (mut ai, mut aj) = (old_i, old_j);
        if y[i] != y[j] {
            let quad = (qd[i] + qd[j] + 2.0 * qi[j]).max(TAU);
            let delta = (-g[i] - g[j]) / quad;
            let diff = ai - aj;
            ai += delta;
            aj += delta;
            if diff > 0.0 {
                if aj < 0.0 {
                    aj = 0.0;
                    ai = diff;
                }
            } else if ai < 0.0 {
                ai = 0.0;
                aj = -diff;
            }
            if diff > 0.0 {
                if ai > c {
                    ai = c;
                    aj = c - diff;
                }
            } else if aj > c {
                aj = c;
                ai = c + diff;
            }
        } else {
            let quad = (qd[i] + qd[j] - 2.0 * qi[j]).max(TAU);
            let delta = (g[i] - g[j]) / quad;
            let sum = ai + aj;
            ai -= delta;
            aj += delta;
            if sum > c {
                if ai > c {
                    ai = c;
                    aj = sum - c;
                }
            } else if aj < 0.0 {
                aj = 0.0;
                ai = sum;
            }
            if sum > c {
                if aj > c {
                    aj = c;
                    ai = sum - c;
                }
            } else if ai < 0.0 {
                ai = 0.0;
                aj = sum;
            }
        }
        a[i] = ai;
        a[j] = aj;
        let (di, dj) = (ai - old_i, aj - old_j);
        for t in 0..n {
            g[t] += qi[t] * di + q(j, t) * dj;
        }
    }
    if !converged {
        log::warn!("SMO stopped at the iteration cap ({max_iter}) before reaching tolerance {tol}");
    }

    // offset from free vectors, else the midpoint of the feasible interval
    let (mut ub, mut lb, mut sum, mut free) = (f64::INFINITY, f64::NEG_INFINITY, 0.0, 0usize);
    for t in 0..n {
        let yg = y[t] * g[t];
        if upper(&a, t) {
            if y[t] < 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else if lower(&a, t) {
            if y[t] > 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else {
            free += 1;
            sum += yg;
        }
    }
    let rho = if free > 0 { sum / free as f64 } else { (ub + lb) / 2.0 };
    SmoSolution { alpha: a, rho, iterations: iter, converged }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct BinaryModel {
    /// `alpha_i y_i` per support row.
    coef: Vec<f64>,
    rho: f64,
}

/// Multi-class RBF kernel classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelClassifier {
    pub gamma: f64,
    pub c: f64,
    pub classes: Vec<i64>,
    support: Vec<Vec<f64>>,
    models: Vec<BinaryModel>,
    constant: Option<i64>,
}

fn solve_binary(k: &[f64], n: usize, idx: &[usize], positive: &[bool], c: f64) -> BinaryModel {
    let y: Vec<f64> = positive.iter().map(|&p| if p { 1.0 } else { -1.0 }).collect();
    let kernel = |i: usize, j: usize| k[idx[i] * n + idx[j]];
    let max_iter = 10_000usize.saturating_mul(idx.len().max(1));
    let sol = smo(&kernel, &y, c, SMO_TOLERANCE, max_iter);
    BinaryModel { coef: sol.alpha.iter().zip(&y).map(|(a, y)| a * y).collect(), rho: sol.rho }
}

/// Models trained on `idx` rows of a precomputed `n x n` kernel.
struct Fitted {
    classes: Vec<i64>,
    models: Vec<BinaryModel>,
    constant: Option<i64>,
}

fn fit_indices(k: &[f64], n: usize, idx: &[usize], labels: &[i64], c: f64) -> Fitted {
    let mut classes: Vec<i64> = idx.iter().map(|&i| labels[i]).collect();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 {
        log::warn!("training set has a single class; classifier predicts it everywhere");
        return Fitted { constant: classes.first().copied(), classes, models: Vec::new() };
    }
    let positives: Vec<i64> = if classes.len() == 2 { vec![classes[1]] } else { classes.clone() };
    let models = positives
        .iter()
        .map(|&p| {
            let pos: Vec<bool> = idx.iter().map(|&i| labels[i] == p).collect();
            solve_binary(k, n, idx, &pos, c)
        })
        .collect();
    Fitted { classes, models, constant: None }
}

fn decide(classes: &[i64], models: &[BinaryModel], constant: Option<i64>, krow: impl Fn(usize) -> f64) -> i64 {
    if let Some(c) = constant {
        return c;
    }
    let score = |m: &BinaryModel| m.coef.iter().enumerate().map(|(s, cf)| cf * krow(s)).sum::<f64>() - m.rho;
    if models.len() == 1 {
        return if score(&models[0]) > 0.0 { classes[1] } else { classes[0] };
    }
    let mut best = (f64::NEG_INFINITY, classes[0]);
    for (m, &cl) in models.iter().zip(classes) {
        let s = score(m);
        if s > best.0 {
            best = (s, cl);
        }
    }
    best.1
}

impl KernelClassifier {
    pub fn fit(rows: &[Vec<f64>], labels: &[i64], c: f64, gamma: Option<f64>) -> Result<Self> {
        check_rows(rows, labels)?;
        if !(c > 0.0) {
            return Err(Error::Parameter(format!("penalty C must be positive, got {c}")));
        }
        let gamma = gamma.unwrap_or_else(|| default_gamma(rows));
        let n = rows.len();
        let k = gram(rows, gamma);
        let idx: Vec<usize> = (0..n).collect();
        let f = fit_indices(&k, n, &idx, labels, c);
        // keep rows with a nonzero coefficient in any model
        let keep: Vec<usize> = (0..n).filter(|&s| f.models.iter().any(|m| m.coef[s] != 0.0)).collect();
        let models = f
            .models
            .into_iter()
            .map(|m| BinaryModel { coef: keep.iter().map(|&s| m.coef[s]).collect(), rho: m.rho })
            .collect();
        Ok(Self {
            gamma,
            c,
            classes: f.classes,
            support: keep.iter().map(|&s| rows[s].clone()).collect(),
            models,
            constant: f.constant,
        })
    }

    pub fn support_count(&self) -> usize {
        self.support.len()
    }

    pub fn predict_one(&self, x: &[f64]) -> i64 {
        let krow: Vec<f64> = self.support.iter().map(|s| rbf(s, x, self.gamma)).collect();
        decide(&self.classes, &self.models, self.constant, |s| krow[s])
    }

    pub fn predict(&self, rows: &[Vec<f64>]) -> Vec<i64> {
        rows.iter().map(|r| self.predict_one(r)).collect()
    }
}

fn check_rows(rows: &[Vec<f64>], labels: &[i64]) -> Result<()> {
    if rows.is_empty() || rows.len() != labels.len() {
        return Err(Error::Dataset(format!("{} feature rows with {} labels", rows.len(), labels.len())));
    }
    let d = rows[0].len();
    if rows.iter().any(|r| r.len() != d) {
        return Err(Error::Dimension("feature rows differ in length".into()));
    }
    Ok(())
}

/// Mean k-fold accuracy for each penalty in the grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvResult {
    pub best_c: f64,
    pub scores: Vec<(f64, f64)>,
}

/// Stratification-free `folds`-fold cross-validation over `grid` with a
/// shared bandwidth; the smallest penalty wins ties.
pub fn cross_validate_c(
    rows: &[Vec<f64>],
    labels: &[i64],
    grid: &[f64],
    folds: usize,
    gamma: f64,
    seed: u64,
) -> Result<CvResult> {
    check_rows(rows, labels)?;
    if grid.is_empty() {
        return Err(Error::Config("empty penalty grid".into()));
    }
    let n = rows.len();
    let folds = folds.clamp(2, n.max(2));
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let k = gram(rows, gamma);
    let mut scores = Vec::with_capacity(grid.len());
    for &c in grid {
        let mut total = 0.0;
        let mut used = 0;
        for f in 0..folds {
            let test: Vec<usize> = order.iter().copied().skip(f).step_by(folds).collect();
            let train: Vec<usize> = order.iter().enumerate().filter(|(p, _)| p % folds != f).map(|(_, &i)| i).collect();
            if test.is_empty() || train.is_empty() {
                continue;
            }
            let fit = fit_indices(&k, n, &train, labels, c);
            let pred: Vec<i64> = test
                .iter()
                .map(|&t| decide(&fit.classes, &fit.models, fit.constant, |s| k[train[s] * n + t]))
                .collect();
            let truth: Vec<i64> = test.iter().map(|&t| labels[t]).collect();
            total += accuracy(&pred, &truth);
            used += 1;
        }
        scores.push((c, total / used.max(1) as f64));
    }
    let mut best = scores[0];
    for &s in &scores[1..] {
        if s.1 > best.1 || (s.1 == best.1 && s.0 < best.0) {
            best = s;
        }
    }
    Ok(CvResult { best_c: best.0, scores })
}

/// Cross-validates the penalty over `grid`, then fits on all rows.
pub fn fit_with_cv(
    rows: &[Vec<f64>],
    labels: &[i64],
    grid: &[f64],
    folds: usize,
    seed: u64,
) -> Result<(KernelClassifier, CvResult)> {
    let gamma = default_gamma(rows);
    let cv = cross_validate_c(rows, labels, grid, folds, gamma, seed)?;
    let model = KernelClassifier::fit(rows, labels, cv.best_c, Some(gamma))?;
    Ok((model, cv))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn separable_points() {
        let rows = vec![vec![0.0, 0.0], vec![0.2, 0.1], vec![3.0, 3.0], vec![3.1, 2.9]];
        let labels = [0, 0, 1, 1];
        let m = KernelClassifier::fit(&rows, &labels, 10.0, Some(0.5)).unwrap();
        assert_eq!(m.predict(&rows), labels);
    }

    #[test]
    fn single_class_is_constant() {
        let rows = vec![vec![0.0], vec![1.0]];
        let m = KernelClassifier::fit(&rows, &[4, 4], 1.0, None).unwrap();
        assert_eq!(m.predict_one(&[7.0]), 4);
    }

    #[test]
    fn dual_stays_feasible() {
        let rows: Vec<Vec<f64>> = (0..12).map(|i| vec![(i as f64 * 0.7).sin(), (i as f64 * 1.3).cos()]).collect();
        let y: Vec<f64> = (0..12).map(|i| if i % 3 == 0 { 1.0 } else { -1.0 }).collect();
        let k = gram(&rows, 0.7);
        let sol = smo(&|i, j| k[i * 12 + j], &y, 2.0, 1e-3, 100_000);
        assert!(sol.converged);
        assert!(sol.alpha.iter().all(|&a| (0.0..=2.0).contains(&a)));
        let s: f64 = sol.alpha.iter().zip(&y).map(|(a, y)| a * y).sum();
        assert!(s.abs() < 1e-10);
    }
}
