//! Newton's method with backtracking for prior-weighted logistic regression.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub const GRAD_TOL: f64 = 1e-8;
pub const MAX_ITERS: usize = 10_000;

/// Training data for the linear log-odds model `l_i = θ · x_i`.
pub struct Problem<'a> {
    pub features: &'a [Vec<f64>],
    pub is_target: &'a [bool],
    pub prior: f64,
    /// Per-parameter ridge weights and anchors: penalty `Σ_k w_k (θ_k − a_k)²`.
    pub ridge: Vec<f64>,
    pub anchor: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Solution {
    pub theta: Vec<f64>,
    pub objective: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

impl Problem<'_> {
    fn dim(&self) -> usize {
        self.anchor.len()
    }

    fn class_weights(&self) -> Result<(f64, f64)> {
        let nt = self.is_target.iter().filter(|t| **t).count();
        let nn = self.is_target.len() - nt;
        if nt == 0 || nn == 0 {
            return Err(Error::MissingData(format!(
                "calibration needs both classes (got {nt} targets, {nn} nontargets)"
            )));
        }
        Ok((self.prior / nt as f64, (1.0 - self.prior) / nn as f64))
    }

    pub fn objective(&self, theta: &[f64]) -> Result<f64> {
        let (wt, wn) = self.class_weights()?;
        let off = logit(self.prior);
        let mut j = 0.0;
        for (x, &tar) in self.features.iter().zip(self.is_target) {
            let l: f64 = x.iter().zip(theta).map(|(a, b)| a * b).sum::<f64>() + off;
            j += if tar { wt * softplus(-l) } else { wn * softplus(l) };
        }
        for k in 0..self.dim() {
            j += self.ridge[k] * (theta[k] - self.anchor[k]).powi(2);
        }
        Ok(j)
    }

    /// Gradient and Hessian of the objective.
    pub fn derivatives(&self, theta: &[f64]) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let (wt, wn) = self.class_weights()?;
        let p = self.dim();
        let off = logit(self.prior);
        let mut g = DVector::zeros(p);
        let mut h = DMatrix::zeros(p, p);
        for (x, &tar) in self.features.iter().zip(self.is_target) {
            let l: f64 = x.iter().zip(theta).map(|(a, b)| a * b).sum::<f64>() + off;
            let s = sigmoid(l);
            let (dl, w) = if tar { (wt * (s - 1.0), wt) } else { (wn * s, wn) };
            let curv = w * s * (1.0 - s);
            for a in 0..p {
                g[a] += dl * x[a];
                for b in 0..=a {
                    h[(a, b)] += curv * x[a] * x[b];
                }
            }
        }
        for a in 0..p {
            for b in 0..a {
                h[(b, a)] = h[(a, b)];
            }
            g[a] += 2.0 * self.ridge[a] * (theta[a] - self.anchor[a]);
            h[(a, a)] += 2.0 * self.ridge[a];
        }
        Ok((g, h))
    }

    pub fn solve(&self, init: &[f64]) -> Result<Solution> {
        if !(self.prior > 0.0 && self.prior < 1.0) {
            return Err(Error::InvalidArgument(format!("prior {} is not inside (0, 1)", self.prior)));
        }
        if let Some((i, _)) = self.features.iter().enumerate().find(|(_, x)| x.len() != self.dim()) {
            return Err(Error::Shape(format!("feature row {} has the wrong length", i + 1)));
        }
        let mut theta = init.to_vec();
        let mut obj = self.objective(&theta)?;
        let mut grad_norm = f64::INFINITY;
        for it in 0..MAX_ITERS {
            let (g, h) = self.derivatives(&theta)?;
            grad_norm = g.norm();
            if grad_norm <= GRAD_TOL {
                return Ok(Solution {
                    theta,
                    objective: obj,
                    grad_norm,
                    iterations: it,
                    converged: true,
                });
            }
            let step = newton_step(&g, h);
            let slope = g.dot(&step);
            let mut t = 1.0;
            let mut improved = false;
            while t > 1e-20 {
                let cand: Vec<f64> = theta.iter().zip(step.iter()).map(|(a, d)| a - t * d).collect();
                let c_obj = self.objective(&cand)?;
                if c_obj <= obj - 1e-4 * t * slope {
                    theta = cand;
                    obj = c_obj;
                    improved = true;
                    break;
                }
                t *= 0.5;
            }
            if !improved {
                // objective is flat to machine precision along the Newton direction
                let (g, _) = self.derivatives(&theta)?;
                grad_norm = g.norm();
                return Ok(Solution {
                    theta,
                    objective: obj,
                    grad_norm,
                    iterations: it + 1,
                    converged: grad_norm <= GRAD_TOL,
                });
            }
        }
        Ok(Solution {
            theta,
            objective: obj,
            grad_norm,
            iterations: MAX_ITERS,
            converged: false,
        })
    }
}

/// Solves `H d = g`, falling back to a damped system or the gradient itself.
fn newton_step(g: &DVector<f64>, h: DMatrix<f64>) -> DVector<f64> {
    let scale = h.diagonal().amax().max(1e-300);
    let mut ridge = 0.0;
    for _ in 0..20 {
        let mut hh = h.clone();
        for i in 0..hh.nrows() {
            hh[(i, i)] += ridge;
        }
        if let Some(ch) = hh.cholesky() {
            return ch.solve(g);
        }
        ridge = if ridge == 0.0 { 1e-12 * scale } else { ridge * 10.0 };
    }
    g.clone()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derivatives_match_finite_differences() {
        let features: Vec<Vec<f64>> = (0..40).map(|i| vec![(i as f64 * 0.37).sin() * 3.0, 1.0, (i as f64).cos()]).collect();
        let is_target: Vec<bool> = (0..40).map(|i| i % 3 == 0).collect();
        let p = Problem {
            features: &features,
            is_target: &is_target,
            prior: 0.2,
            ridge: vec![0.01, 0.02, 0.0],
            anchor: vec![1.0, 0.0, 0.0],
        };
        let theta = [0.7, -0.3, 0.2];
        let (g, h) = p.derivatives(&theta).unwrap();
        let eps = 1e-6;
        for k in 0..3 {
            let mut up = theta;
            let mut dn = theta;
            up[k] += eps;
            dn[k] -= eps;
            let fd = (p.objective(&up).unwrap() - p.objective(&dn).unwrap()) / (2.0 * eps);
            assert!((fd - g[k]).abs() < 1e-7, "grad {k}");
            let (gu, _) = p.derivatives(&up).unwrap();
            let (gd, _) = p.derivatives(&dn).unwrap();
            for j in 0..3 {
                assert!(((gu[j] - gd[j]) / (2.0 * eps) - h[(j, k)]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn stable_helpers() {
        assert_eq!(softplus(1000.0), 1000.0);
        assert!(softplus(-1000.0) >= 0.0 && softplus(-1000.0) < 1e-300);
        assert_eq!(sigmoid(-1000.0), 0.0);
        assert_eq!(logit(0.5), 0.0);
    }
}
