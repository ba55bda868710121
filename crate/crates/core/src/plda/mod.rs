//! Two-covariance PLDA.
//!
//! Generative model: `x = μ + y + ε` with speaker variable `y ~ N(0, Φ_b)` and
//! channel/session noise `ε ~ N(0, Φ_w)`. Training is EM with μ fixed to the
//! global sample mean; verification scores are the same-speaker vs
//! different-speaker log-likelihood ratio of a single enrollment and a single
//! test embedding.

mod io;
mod sample;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use io::{load_model, load_model_binary, save_model, save_model_binary, ModelFile, Provenance};
pub use sample::{sample_embeddings, DomainTransform};

use crate::embedspace::{Embedding, EmbeddingSet};
use crate::error::{Error, Result};
use crate::linalg::{
    is_exactly_symmetric, is_psd, mean_and_cov, mean_diag, spd_inverse, spd_logdet, sym_eigen,
    symmetrize, symmetrized, Matrix, Vector,
};
use crate::metrics::{Trial, TrialRecord, TrialScores};

/// Relative covariance floor used by initialization and EM.
pub const COV_FLOOR_REL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct PldaModel {
    pub mu: Vector,
    pub phi_b: Matrix,
    pub phi_w: Matrix,
}

impl PldaModel {
    /// Builds a model, symmetrizing both covariances.
    pub fn new(mu: Vector, phi_b: Matrix, phi_w: Matrix) -> Result<Self> {
        let d = mu.len();
        if d == 0 || phi_b.shape() != (d, d) || phi_w.shape() != (d, d) {
            return Err(Error::Shape(format!(
                "PLDA model with mean dim {d}, Φ_b {:?}, Φ_w {:?}",
                phi_b.shape(),
                phi_w.shape()
            )));
        }
        let model = Self {
            mu,
            phi_b: symmetrized(phi_b),
            phi_w: symmetrized(phi_w),
        };
        model.validate()?;
        Ok(model)
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    /// Total covariance `Φ = Φ_b + Φ_w`.
    pub fn total_cov(&self) -> Matrix {
        symmetrized(&self.phi_b + &self.phi_w)
    }

    /// Symmetry, finiteness, Φ_b PSD and Φ_w PD.
    pub fn validate(&self) -> Result<()> {
        let all_finite = self.mu.iter().chain(self.phi_b.iter()).chain(self.phi_w.iter()).all(|v| v.is_finite());
        if !all_finite {
            return Err(Error::Numerical("PLDA model has non-finite entries".into()));
        }
        if !is_exactly_symmetric(&self.phi_b) || !is_exactly_symmetric(&self.phi_w) {
            return Err(Error::Numerical("PLDA covariances are not symmetric".into()));
        }
        if !is_psd(&self.phi_b, 1e-10) {
            return Err(Error::Numerical("Φ_b is not positive semidefinite".into()));
        }
        let (w_eig, _) = sym_eigen(&self.phi_w);
        if !(w_eig[0] > 0.0) {
            return Err(Error::Numerical("Φ_w is not positive definite".into()));
        }
        Ok(())
    }

    /// Precomputes the quadratic forms used by [`score_llr`].
    pub fn scorer(&self) -> Result<LlrScorer> {
        LlrScorer::new(self)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PldaTrainConfig {
    pub max_iters: usize,
    pub loglik_rel_tol: f64,
    /// Reserved for randomized initializers; the default initializer is
    /// data-driven and ignores it.
    pub seed: u64,
}

impl Default for PldaTrainConfig {
    fn default() -> Self {
        Self {
            max_iters: 100,
            loglik_rel_tol: 1e-7,
            seed: 0,
        }
    }
}

impl PldaTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(Error::InvalidArgument("max_iters must be at least 1".into()));
        }
        if !(self.loglik_rel_tol > 0.0) {
            return Err(Error::InvalidArgument("loglik_rel_tol must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub model: PldaModel,
    /// Observed-data log-likelihood before the first and after every EM iteration.
    pub loglik_trace: Vec<f64>,
    pub converged: bool,
}

/// Per-speaker sufficient statistics, relative to the global mean.
struct SpeakerStats {
    n: usize,
    /// `x̄_s − μ`
    mean_dev: Vector,
    /// `Σ_i (x_i − x̄_s)(x_i − x̄_s)^T`
    scatter: Matrix,
}

fn speaker_stats(data: &EmbeddingSet, mu: &Vector) -> Result<Vec<SpeakerStats>> {
    let d = data.dim();
    let groups = data.speaker_groups()?;
    Ok(groups
        .iter()
        .map(|(_, idx)| {
            let rows = idx.iter().map(|&i| data.items()[i].vector.as_slice());
            let (mean, cov, n) = mean_and_cov(rows, d);
            let scatter = if n > 1 { cov * (n - 1) as f64 } else { Matrix::zeros(d, d) };
            SpeakerStats {
                n,
                mean_dev: mean - mu,
                scatter,
            }
        })
        .collect())
}

/// Clamps eigenvalues below `floor` up to `floor`. This is the constrained
/// maximizer of the Gaussian M-step objective over `{A ⪰ floor·I}`.
fn clamp_eigen(a: &Matrix, floor: f64) -> Matrix {
    let (values, vectors) = sym_eigen(a);
    if values[0] >= floor {
        return symmetrized(a.clone());
    }
    let n = a.nrows();
    let scaled = Matrix::from_fn(n, n, |i, j| vectors[(i, j)] * values[j].max(floor));
    symmetrized(&scaled * vectors.transpose())
}

/// Groups speakers by segment count so each distinct count shares one factorization.
fn distinct_counts(stats: &[SpeakerStats]) -> Vec<usize> {
    let mut counts: Vec<usize> = stats.iter().map(|s| s.n).collect();
    counts.sort_unstable();
    counts.dedup();
    counts
}

/// Marginal log-likelihood of all speakers under `(Φ_b, Φ_w)`.
fn log_likelihood(stats: &[SpeakerStats], phi_b: &Matrix, phi_w: &Matrix) -> Result<f64> {
    let d = phi_b.nrows() as f64;
    let w_inv = spd_inverse(phi_w)?;
    let w_logdet = spd_logdet(phi_w)?;
    let counts = distinct_counts(stats);
    let per_count = counts
        .iter()
        .map(|&n| {
            let c = symmetrized(phi_w + phi_b * n as f64);
            Ok((n, spd_inverse(&c)?, spd_logdet(&c)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let two_pi = (2.0 * std::f64::consts::PI).ln();
    let terms: Vec<f64> = stats
        .par_iter()
        .map(|s| {
            let (_, c_inv, c_logdet) = per_count.iter().find(|(n, _, _)| *n == s.n).unwrap();
            let n = s.n as f64;
            let within = w_inv.component_mul(&s.scatter).sum();
            let between = n * s.mean_dev.dot(&(c_inv * &s.mean_dev));
            -0.5 * (n * d * two_pi + (n - 1.0) * w_logdet + c_logdet + within + between)
        })
        .collect();
    Ok(terms.iter().sum())
}

/// Trains a two-covariance PLDA model by EM.
///
/// Speaker reductions are computed in parallel and summed in speaker order, so
/// the result does not depend on the thread count.
pub fn train_plda(data: &EmbeddingSet, cfg: &PldaTrainConfig) -> Result<TrainOutput> {
    cfg.validate()?;
    let d = data.dim();
    let (mu, total, n_total) = mean_and_cov(data.iter().map(|e| e.vector.as_slice()), d);
    let stats = speaker_stats(data, &mu)?;
    if stats.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "PLDA training needs at least 2 speakers, got {}",
            stats.len()
        )));
    }
    if n_total <= d {
        log::warn!("PLDA training with {n_total} segments in dimension {d}; covariances will lean on the floor");
    }
    let n_spk = stats.len() as f64;
    let scale = mean_diag(&total).abs().max(f64::MIN_POSITIVE);
    let floor = COV_FLOOR_REL * scale;

    let mut phi_w = stats.iter().fold(Matrix::zeros(d, d), |acc, s| acc + &s.scatter) / n_total as f64;
    let mut phi_b = stats
        .iter()
        .fold(Matrix::zeros(d, d), |acc, s| acc + &s.mean_dev * s.mean_dev.transpose())
        / n_spk;
    symmetrize(&mut phi_w);
    symmetrize(&mut phi_b);
    for m in [&mut phi_w, &mut phi_b] {
        if sym_eigen(m).0[0] < floor {
            for i in 0..d {
                m[(i, i)] += floor;
            }
        }
    }

    let mut trace = vec![log_likelihood(&stats, &phi_b, &phi_w)?];
    let mut converged = false;
    for _ in 0..cfg.max_iters {
        let counts = distinct_counts(&stats);
        // K_n = (Φ_w + n Φ_b)^{-1}; posterior mean B K_n n(x̄−μ), covariance B − n B K_n B
        let gains = counts
            .iter()
            .map(|&n| {
                let k = spd_inverse(&symmetrized(&phi_w + &phi_b * n as f64))?;
                let bk = &phi_b * &k;
                let post_cov = symmetrized(&phi_b - &bk * &phi_b * n as f64);
                Ok((n, bk, post_cov))
            })
            .collect::<Result<Vec<_>>>()?;
        let moments: Vec<(Matrix, Matrix)> = stats
            .par_iter()
            .map(|s| {
                let (_, bk, post_cov) = gains.iter().find(|(n, _, _)| *n == s.n).unwrap();
                let n = s.n as f64;
                let m = bk * &s.mean_dev * n;
                let b_part = &m * m.transpose() + post_cov;
                let r = &s.mean_dev - &m;
                let w_part = &s.scatter + (&r * r.transpose()) * n + post_cov * n;
                (b_part, w_part)
            })
            .collect();
        let mut new_b = Matrix::zeros(d, d);
        let mut new_w = Matrix::zeros(d, d);
        for (b, w) in &moments {
            new_b += b;
            new_w += w;
        }
        phi_b = clamp_eigen(&symmetrized(new_b / n_spk), floor);
        phi_w = clamp_eigen(&symmetrized(new_w / n_total as f64), floor);

        let ll = log_likelihood(&stats, &phi_b, &phi_w)?;
        let prev = *trace.last().unwrap();
        trace.push(ll);
        if !ll.is_finite() {
            return Err(Error::Numerical("PLDA log-likelihood became non-finite".into()));
        }
        if (ll - prev) / prev.abs().max(1e-300) < cfg.loglik_rel_tol {
            converged = true;
            break;
        }
    }
    let model = PldaModel::new(mu, phi_b, phi_w)?;
    Ok(TrainOutput {
        model,
        loglik_trace: trace,
        converged,
    })
}

/// Precomputed two-covariance LLR.
///
/// With `Φ = Φ_b + Φ_w` and `[[P, Q], [Q, P]] = [[Φ, Φ_b], [Φ_b, Φ]]^{-1}`:
/// `LLR = c − ½(e'ᵀ A e' + t'ᵀ A t') − e'ᵀ Q t'` where `A = P − Φ^{-1}`,
/// `c = log|Φ| − ½ log|[[Φ, Φ_b], [Φ_b, Φ]]|` and primes denote centering.
#[derive(Debug, Clone)]
pub struct LlrScorer {
    mu: Vector,
    a: Matrix,
    q: Matrix,
    constant: f64,
}

impl LlrScorer {
    pub fn new(model: &PldaModel) -> Result<Self> {
        let phi = model.total_cov();
        let phi_inv = spd_inverse(&phi)?;
        // Schur complement S = Φ − Φ_b Φ^{-1} Φ_b; P = S^{-1}; Q = −Φ^{-1} Φ_b P
        let schur = symmetrized(&phi - &model.phi_b * &phi_inv * &model.phi_b);
        let p = spd_inverse(&schur)?;
        let q = symmetrized(-(&phi_inv * &model.phi_b * &p));
        let a = symmetrized(&p - &phi_inv);
        // log|joint| = log|Φ| + log|S|
        let constant = 0.5 * (spd_logdet(&phi)? - spd_logdet(&schur)?);
        Ok(Self {
            mu: model.mu.clone(),
            a,
            q,
            constant,
        })
    }

    fn center(&self, v: &[f64]) -> Result<Vector> {
        if v.len() != self.mu.len() {
            return Err(Error::Shape(format!("vector dim {} vs model dim {}", v.len(), self.mu.len())));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidArgument("non-finite embedding component".into()));
        }
        Ok(Vector::from_iterator(v.len(), v.iter().zip(self.mu.iter()).map(|(x, m)| x - m)))
    }

    fn bilinear(m: &Matrix, x: &Vector, y: &Vector) -> f64 {
        x.dot(&(m * y))
    }

    /// Exactly symmetric in its arguments.
    pub fn score_vectors(&self, enroll: &[f64], test: &[f64]) -> Result<f64> {
        let e = self.center(enroll)?;
        let t = self.center(test)?;
        let quad = Self::bilinear(&self.a, &e, &e) + Self::bilinear(&self.a, &t, &t);
        let cross = Self::bilinear(&self.q, &e, &t) + Self::bilinear(&self.q, &t, &e);
        Ok(self.constant - 0.5 * quad - 0.5 * cross)
    }

    pub fn score(&self, enroll: &Embedding, test: &Embedding) -> Result<f64> {
        self.score_vectors(&enroll.vector, &test.vector)
    }
}

pub fn score_llr(model: &PldaModel, enroll: &Embedding, test: &Embedding) -> Result<f64> {
    model.scorer()?.score(enroll, test)
}

/// Scores every trial against the given sets, preserving trial order.
pub fn score_trials(
    model: &PldaModel,
    enroll_set: &EmbeddingSet,
    test_set: &EmbeddingSet,
    trials: &[Trial],
) -> Result<TrialScores> {
    let scorer = model.scorer()?;
    score_trials_with(enroll_set, test_set, trials, true, |e, t| scorer.score(e, t))
}

/// Resolves trial ids and applies `score` to each pair, in parallel or serially.
/// Output order and values do not depend on the mode.
pub fn score_trials_with<F>(
    enroll_set: &EmbeddingSet,
    test_set: &EmbeddingSet,
    trials: &[Trial],
    parallel: bool,
    score: F,
) -> Result<TrialScores>
where
    F: Fn(&Embedding, &Embedding) -> Result<f64> + Sync,
{
    let one = |(i, t): (usize, &Trial)| -> Result<TrialRecord> {
        let line = i + 1;
        let e = enroll_set.get(&t.enroll_id).ok_or_else(|| Error::UnknownId {
            line,
            id: t.enroll_id.clone(),
        })?;
        let s = test_set.get(&t.test_id).ok_or_else(|| Error::UnknownId {
            line,
            id: t.test_id.clone(),
        })?;
        Ok(TrialRecord::from_trial(t, score(e, s)?))
    };
    let records = if parallel {
        trials.par_iter().enumerate().map(one).collect::<Result<Vec<_>>>()?
    } else {
        trials.iter().enumerate().map(one).collect::<Result<Vec<_>>>()?
    };
    TrialScores::new(records)
}
