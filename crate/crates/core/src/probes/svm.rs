//! C-SVC with an RBF kernel, trained by SMO with second-order working-set
//! selection on a precomputed kernel matrix.

use log::debug;
use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{accuracy, check_labels, Classifier};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng};

const TAU: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SvmParams {
    pub c: f64,
    /// `None` means `1 / (d * var(features))`.
    pub gamma: Option<f64>,
    /// 3-fold cross-validated search over C and gamma multipliers.
    pub grid_search: bool,
    /// KKT violation tolerance.
    pub tol: f64,
    pub seed: u64,
}

impl Default for SvmParams {
    fn default() -> Self {
        Self {
            c: 1.0,
            gamma: None,
            grid_search: false,
            tol: 1e-3,
            seed: 0,
        }
    }
}

/// `exp(-gamma * ||a_i - b_j||^2)` for all row pairs.
pub fn rbf_kernel(a: ArrayView2<f64>, b: ArrayView2<f64>, gamma: f64) -> Array2<f64> {
    let na = a.map_axis(Axis(1), |r| r.dot(&r));
    let nb = b.map_axis(Axis(1), |r| r.dot(&r));
    let mut k = a.dot(&b.t());
    for ((i, j), v) in k.indexed_iter_mut() {
        let d2 = (na[i] + nb[j] - 2.0 * *v).max(0.0);
        *v = (-gamma * d2).exp();
    }
    k
}

/// `1 / (d * var)` over all feature values (the common "scale" default).
pub fn default_gamma(x: ArrayView2<f64>) -> f64 {
    let n = x.len() as f64;
    let mean = x.sum() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    if var > 0.0 {
        1.0 / (x.ncols() as f64 * var)
    } else {
        1.0
    }
}

/// Dual solution of one binary problem with labels `y ∈ {-1, +1}`.
#[derive(Debug, Clone)]
pub(crate) struct Dual {
    pub alpha: Vec<f64>,
    pub rho: f64,
    pub iterations: usize,
}

/// Solve `min ½ αᵀQα - Σα` s.t. `0 ≤ α ≤ C`, `yᵀα = 0`, `Q = y yᵀ ∘ K`.
pub(crate) fn smo(k: &Array2<f64>, y: &[f64], c: f64, tol: f64) -> Dual {
    let n = y.len();
    let mut alpha = vec![0.0; n];
    let mut g = vec![-1.0; n];
    let max_iter = (100 * n).max(10_000_000);
    let q = |i: usize, j: usize| y[i] * y[j] * k[[i, j]];
    let upper = |a: f64| a >= c;
    let lower = |a: f64| a <= 0.0;
    let mut iter = 0;
    while iter < max_iter {
        // First index: maximal violator in I_up.
        let mut gmax = f64::NEG_INFINITY;
        let mut i = usize::MAX;
        for t in 0..n {
            if y[t] > 0.0 {
                if !upper(alpha[t]) && -g[t] >= gmax {
                    gmax = -g[t];
                    i = t;
                }
            } else if !lower(alpha[t]) && g[t] >= gmax {
                gmax = g[t];
                i = t;
            }
        }
        // Second index: largest objective decrease in I_low.
        let mut gmax2 = f64::NEG_INFINITY;
        let mut j = usize::MAX;
        let mut obj_min = f64::INFINITY;
        for t in 0..n {
            let (gd, bound_ok) = if y[t] > 0.0 {
                (gmax + g[t], !lower(alpha[t]))
            } else {
                (gmax - g[t], !upper(alpha[t]))
            };
            if !bound_ok {
                continue;
            }
            let viol = if y[t] > 0.0 { g[t] } else { -g[t] };
            if viol >= gmax2 {
                gmax2 = viol;
            }
            if gd > 0.0 && i != usize::MAX {
                let mut quad = k[[i, i]] + k[[t, t]] - 2.0 * y[i] * q(i, t);
                if quad <= 0.0 {
                    quad = TAU;
                }
                let obj = -(gd * gd) / quad;
                if obj <= obj_min {
                    obj_min = obj;
                    j = t;
                }
            }
        }
        if gmax + gmax2 < tol || i == usize::MAX || j == usize::MAX {
            break;
        }
        iter += 1;

        let (ai, aj) = (alpha[i], alpha[j]);
        let qij = q(i, j);
        if y[i] != y[j] {
            let mut quad = k[[i, i]] + k[[j, j]] + 2.0 * qij;
            if quad <= 0.0 {
                quad = TAU;
            }
            let delta = (-g[i] - g[j]) / quad;
            let diff = ai - aj;
            alpha[i] += delta;
            alpha[j] += delta;
            if diff > 0.0 {
                if alpha[j] < 0.0 {
                    alpha[j] = 0.0;
                    alpha[i] = diff;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = -diff;
            }
            if diff > 0.0 {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = c - diff;
                }
            } else if alpha[j] > c {
                alpha[j] = c;
                alpha[i] = c + diff;
            }
        } else {
            let mut quad = k[[i, i]] + k[[j, j]] - 2.0 * qij;
            if quad <= 0.0 {
                quad = TAU;
            }
            let delta = (g[i] - g[j]) / quad;
            let sum = ai + aj;
            alpha[i] -= delta;
            alpha[j] += delta;
            if sum > c {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = sum - c;
                }
            } else if alpha[j] < 0.0 {
                alpha[j] = 0.0;
                alpha[i] = sum;
            }
            if sum > c {
                if alpha[j] > c {
                    alpha[j] = c;
                    alpha[i] = sum - c;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = sum;
            }
        }
        let (di, dj) = (alpha[i] - ai, alpha[j] - aj);
        for t in 0..n {
            g[t] += q(t, i) * di + q(t, j) * dj;
        }
    }
    if iter == max_iter {
        log::warn!("SMO stopped at the iteration cap ({max_iter}) before reaching tolerance {tol}");
    }

    // Offset: average over free vectors, else midpoint of the feasible range.
    let (mut ub, mut lb, mut sum, mut nfree) = (f64::INFINITY, f64::NEG_INFINITY, 0.0, 0usize);
    for t in 0..n {
        let yg = y[t] * g[t];
        if upper(alpha[t]) {
            if y[t] < 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else if lower(alpha[t]) {
            if y[t] > 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else {
            nfree += 1;
            sum += yg;
        }
    }
    let rho = if nfree > 0 { sum / nfree as f64 } else { (ub + lb) / 2.0 };
    Dual { alpha, rho, iterations: iter }
}

/// One binary machine: `f(x) = Σ coef_i K(sv_i, x) - rho`.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMachine {
    pub support: Array2<f64>,
    pub coef: Array1<f64>,
    pub rho: f64,
}

impl BinaryMachine {
    fn fit(x: ArrayView2<f64>, k: &Array2<f64>, y: &[f64], c: f64, tol: f64) -> Self {
        let dual = smo(k, y, c, tol);
        let sv: Vec<usize> = (0..y.len()).filter(|&i| dual.alpha[i] > 0.0).collect();
        debug!("svm: {} iterations, {} support vectors of {}", dual.iterations, sv.len(), y.len());
        Self {
            support: x.select(Axis(0), &sv),
            coef: sv.iter().map(|&i| dual.alpha[i] * y[i]).collect(),
            rho: dual.rho,
        }
    }

    fn decision(&self, x: ArrayView2<f64>, gamma: f64) -> Array1<f64> {
        if self.support.nrows() == 0 {
            return Array1::from_elem(x.nrows(), -self.rho);
        }
        rbf_kernel(x, self.support.view(), gamma).dot(&self.coef) - self.rho
    }
}

/// RBF-SVM probe. Binary problems use one machine (positive = second
/// class); more classes use one-vs-rest.
#[derive(Debug, Clone, PartialEq)]
pub struct SvmProbe {
    pub classes: Vec<usize>,
    pub c: f64,
    pub gamma: f64,
    pub machines: Vec<BinaryMachine>,
    pub train_accuracy: f64,
    pub dim: usize,
}

impl SvmProbe {
    fn fit_fixed(x: ArrayView2<f64>, labels: &[usize], classes: &[usize], c: f64, gamma: f64, tol: f64) -> Self {
        let k = rbf_kernel(x, x, gamma);
        let targets: Vec<usize> = if classes.len() == 2 { vec![classes[1]] } else { classes.to_vec() };
        let machines = targets
            .iter()
            .map(|&cls| {
                let y: Vec<f64> = labels.iter().map(|&l| if l == cls { 1.0 } else { -1.0 }).collect();
                BinaryMachine::fit(x, &k, &y, c, tol)
            })
            .collect();
        let mut probe = Self {
            classes: classes.to_vec(),
            c,
            gamma,
            machines,
            train_accuracy: 0.0,
            dim: x.ncols(),
        };
        let pred = probe.predict(x).expect("training dims match");
        probe.train_accuracy = accuracy(&pred, labels);
        probe
    }

    /// Per-class decision scores, `(N, classes)`.
    pub fn scores(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.dim {
            return Err(Error::dim(format!("probe expects {}D features, got {}D", self.dim, x.ncols())));
        }
        let n = x.nrows();
        let mut s = Array2::zeros((n, self.classes.len()));
        if self.classes.len() == 2 {
            let f = self.machines[0].decision(x, self.gamma);
            s.column_mut(0).assign(&f.mapv(|v| -v));
            s.column_mut(1).assign(&f);
        } else {
            for (ci, m) in self.machines.iter().enumerate() {
                s.column_mut(ci).assign(&m.decision(x, self.gamma));
            }
        }
        Ok(s)
    }
}

impl Classifier for SvmProbe {
    fn dim(&self) -> usize {
        self.dim
    }

    fn classes(&self) -> &[usize] {
        &self.classes
    }

    fn scores(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        SvmProbe::scores(self, x)
    }
}

/// Train an RBF-SVM probe.
pub fn train_svm(x: ArrayView2<f64>, labels: &[usize], hp: &SvmParams) -> Result<SvmProbe> {
    let classes = check_labels(x, labels)?;
    if hp.c <= 0.0 || !hp.c.is_finite() {
        return Err(Error::config(format!("SVM C must be positive, got {}", hp.c)));
    }
    let base_gamma = match hp.gamma {
        Some(g) if g > 0.0 && g.is_finite() => g,
        Some(g) => return Err(Error::config(format!("SVM gamma must be positive, got {g}"))),
        None => default_gamma(x),
    };
    let (c, gamma) = if hp.grid_search {
        grid_search(x, labels, &classes, base_gamma, hp)?
    } else {
        (hp.c, base_gamma)
    };
    Ok(SvmProbe::fit_fixed(x, labels, &classes, c, gamma, hp.tol))
}

fn grid_search(x: ArrayView2<f64>, labels: &[usize], classes: &[usize], base_gamma: f64, hp: &SvmParams) -> Result<(f64, f64)> {
    let n = labels.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng(derive_seed(hp.seed, "svm-folds")));
    let folds = 3;
    let mut best = (f64::NEG_INFINITY, hp.c, base_gamma);
    for c in [hp.c * 0.1, hp.c, hp.c * 10.0] {
        for gamma in [base_gamma * 0.25, base_gamma, base_gamma * 4.0] {
            let mut correct = 0usize;
            for f in 0..folds {
                let test: Vec<usize> = order.iter().enumerate().filter(|(i, _)| i % folds == f).map(|(_, &v)| v).collect();
                let train: Vec<usize> = order.iter().enumerate().filter(|(i, _)| i % folds != f).map(|(_, &v)| v).collect();
                let tl: Vec<usize> = train.iter().map(|&i| labels[i]).collect();
                if classes.iter().any(|c| !tl.contains(c)) {
                    continue;
                }
                let xt = x.select(Axis(0), &train);
                let m = SvmProbe::fit_fixed(xt.view(), &tl, classes, c, gamma, hp.tol);
                let pred = m.predict(x.select(Axis(0), &test).view())?;
                correct += pred.iter().zip(&test).filter(|(p, &i)| **p == labels[i]).count();
            }
            let acc = correct as f64 / n as f64;
            debug!("svm grid: C={c} gamma={gamma:.4e} cv-acc={acc:.4}");
            if acc > best.0 {
                best = (acc, c, gamma);
            }
        }
    }
    Ok((best.1, best.2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn dual_objective(k: &Array2<f64>, y: &[f64], a: &[f64]) -> f64 {
        let n = y.len();
        let mut quad = 0.0;
        for i in 0..n {
            for j in 0..n {
                quad += a[i] * a[j] * y[i] * y[j] * k[[i, j]];
            }
        }
        0.5 * quad - a.iter().sum::<f64>()
    }

    #[test]
    fn smo_matches_exhaustive_lattice_search_on_a_tiny_problem() {
        let x = array![[0.0, 0.0], [1.0, 0.2], [0.1, 1.0], [1.2, 1.1]];
        let y = [1.0, -1.0, -1.0, 1.0];
        let (c, gamma) = (2.0, 0.7);
        let k = rbf_kernel(x.view(), x.view(), gamma);
        let dual = smo(&k, &y, c, 1e-8);
        let smo_obj = dual_objective(&k, &y, &dual.alpha);
        // α₃ is fixed by yᵀα = 0: α₃ = α₀ - α₁ - α₂ ... with y = (+,-,-,+).
        let steps = 60;
        let mut best = f64::INFINITY;
        for i in 0..=steps {
            for j in 0..=steps {
                for l in 0..=steps {
                    let (a0, a1, a2) = (c * i as f64 / steps as f64, c * j as f64 / steps as f64, c * l as f64 / steps as f64);
                    let a3 = a1 + a2 - a0;
                    if !(0.0..=c).contains(&a3) {
                        continue;
                    }
                    best = best.min(dual_objective(&k, &y, &[a0, a1, a2, a3]));
                }
            }
        }
        assert!(smo_obj <= best + 1e-9, "smo {smo_obj} vs lattice {best}");
        assert!(best - smo_obj < 1e-2);
        let ya: f64 = dual.alpha.iter().zip(&y).map(|(a, y)| a * y).sum();
        assert!(ya.abs() < 1e-12);
    }

    #[test]
    fn kernel_diagonal_is_one() {
        let x = array![[1.0, 2.0], [3.0, -1.0]];
        let k = rbf_kernel(x.view(), x.view(), 0.5);
        assert!((k[[0, 0]] - 1.0).abs() < 1e-15);
        assert!((k[[0, 1]] - (-0.5f64 * 13.0).exp()).abs() < 1e-15);
    }
}
