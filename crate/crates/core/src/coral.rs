//! CORAL and CORAL+ adaptation of PLDA covariances towards an in-domain set.
//!
//! CORAL whitens with the out-of-domain total covariance and re-colours with
//! the in-domain one, giving pseudo in-domain covariances `Mᵀ Φ M`. CORAL+
//! keeps the out-of-domain model and adds, per covariance, the part of the
//! pseudo in-domain covariance that exceeds it: after simultaneous
//! diagonalization `Bᵀ Φ_out B = I`, `Bᵀ Φ_c B = E`, the increment is
//! `weight · B^{-T} max(E, I) B^{-1}`.

use serde::{Deserialize, Serialize};

use crate::embedspace::EmbeddingSet;
use crate::error::{Error, Result};
use crate::linalg::{
    floor_spd, mean_and_cov, spd_inv_sqrt, spd_sqrt, sym_eigen, symmetrized, Matrix, Vector,
};
use crate::plda::{PldaModel, COV_FLOOR_REL};

/// Mean, unbiased total covariance and sample count of one domain.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainStats {
    pub mean: Vector,
    pub total_cov: Matrix,
    pub count: usize,
}

pub fn estimate_domain_stats(set: &EmbeddingSet) -> Result<DomainStats> {
    if set.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "domain statistics need at least 2 embeddings, got {}",
            set.len()
        )));
    }
    if set.len() < set.dim() + 1 {
        log::warn!(
            "domain covariance from {} embeddings in dimension {} is rank deficient",
            set.len(),
            set.dim()
        );
    }
    let (mean, total_cov, count) = mean_and_cov(set.iter().map(|e| e.vector.as_slice()), set.dim());
    Ok(DomainStats { mean, total_cov, count })
}

/// `M = Φ_out^{-1/2} Φ_in^{1/2}` with symmetric roots, so that `Mᵀ Φ_out M = Φ_in`.
pub fn coral_transform(ood: &DomainStats, ind: &DomainStats) -> Result<Matrix> {
    coral_transform_cov(&ood.total_cov, &ind.total_cov)
}

pub fn coral_transform_cov(phi_out: &Matrix, phi_in: &Matrix) -> Result<Matrix> {
    if phi_out.shape() != phi_in.shape() || !phi_out.is_square() {
        return Err(Error::Shape(format!(
            "CORAL covariances {:?} and {:?}",
            phi_out.shape(),
            phi_in.shape()
        )));
    }
    let whiten = spd_inv_sqrt(phi_out).map_err(|e| Error::Numerical(format!("out-of-domain covariance: {e}")))?;
    let recolor = spd_sqrt(phi_in).map_err(|e| Error::Numerical(format!("in-domain covariance: {e}")))?;
    Ok(whiten * recolor)
}

fn congruence(m: &Matrix, a: &Matrix) -> Matrix {
    symmetrized(m.transpose() * a * m)
}

/// Pseudo in-domain model `Φ_{b,c} = Mᵀ Φ_b M`, `Φ_{w,c} = Mᵀ Φ_w M`; mean unchanged.
pub fn adapt_plda_coral(model: &PldaModel, m: &Matrix) -> Result<PldaModel> {
    let d = model.dim();
    if m.shape() != (d, d) {
        return Err(Error::Shape(format!("CORAL transform {:?} for model dim {d}", m.shape())));
    }
    PldaModel::new(model.mu.clone(), congruence(m, &model.phi_b), congruence(m, &model.phi_w))
}

/// Basis `B` and diagonal `E` with `Bᵀ Φ_o B = I` and `Bᵀ Φ_c B = diag(E)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulDiag {
    pub basis: Matrix,
    pub diag: Vector,
}

/// Solves `Φ_c b = λ Φ_o b` via the Cholesky factor of `Φ_o`.
///
/// With `Φ_o = L Lᵀ`, the symmetric matrix `L^{-1} Φ_c L^{-T} = V E Vᵀ` gives
/// `B = L^{-T} V`. Eigenvalues are returned in ascending order and clipped at 0.
pub fn simultaneous_diagonalize(phi_o: &Matrix, phi_c: &Matrix) -> Result<SimulDiag> {
    if phi_o.shape() != phi_c.shape() || !phi_o.is_square() {
        return Err(Error::Shape(format!("{:?} vs {:?}", phi_o.shape(), phi_c.shape())));
    }
    let n = phi_o.nrows();
    let chol = symmetrized(phi_o.clone())
        .cholesky()
        .ok_or_else(|| Error::Numerical("Φ_o is not positive definite".into()))?;
    let l = chol.l();
    let l_inv = l
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Numerical("Cholesky factor is singular".into()))?;
    let reduced = symmetrized(&l_inv * phi_c * l_inv.transpose());
    let (values, vectors) = sym_eigen(&reduced);
    let basis = l_inv.transpose() * vectors;
    let diag = Vector::from_iterator(n, values.iter().map(|v| v.max(0.0)));
    Ok(SimulDiag { basis, diag })
}

/// CORAL+ weights: `gamma` for the between-class, `beta` for the within-class covariance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CoralPlusConfig {
    pub gamma: f64,
    pub beta: f64,
}

impl Default for CoralPlusConfig {
    fn default() -> Self {
        Self {
            gamma: 0.5,
            beta: 0.5,
        }
    }
}

impl CoralPlusConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0 && self.beta >= 0.0) || !self.gamma.is_finite() || !self.beta.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "CORAL+ weights must be finite and nonnegative (gamma {}, beta {})",
                self.gamma, self.beta
            )));
        }
        Ok(())
    }
}

/// `weight · B^{-T} max(E, I) B^{-1}` for the pair `(Φ_out, Φ_c)`.
///
/// `B^{-T} max(E, I) B^{-1} = Φ_out B max(E, I) Bᵀ Φ_out`, which needs no inverse.
pub fn coral_plus_increment(phi_out: &Matrix, phi_c: &Matrix, weight: f64) -> Result<Matrix> {
    let sd = simultaneous_diagonalize(phi_out, phi_c)?;
    let n = phi_out.nrows();
    let left = phi_out * &sd.basis;
    let scaled = Matrix::from_fn(n, n, |i, j| left[(i, j)] * sd.diag[j].max(1.0));
    Ok(symmetrized(scaled * left.transpose() * weight))
}

fn adapt_one(phi_out: &Matrix, phi_c: &Matrix, weight: f64) -> Result<Matrix> {
    if weight == 0.0 {
        return Ok(phi_out.clone());
    }
    let mut out = symmetrized(phi_out + coral_plus_increment(phi_out, phi_c, weight)?);
    floor_spd(&mut out, COV_FLOOR_REL);
    Ok(out)
}

/// Full CORAL+ pipeline: CORAL transform from the total covariances, pseudo
/// in-domain covariances, then the regularized update of Φ_b and Φ_w.
/// The mean is left alone; see [`recenter`].
pub fn adapt_plda_coral_plus(model: &PldaModel, ind: &DomainStats, cfg: &CoralPlusConfig) -> Result<PldaModel> {
    cfg.validate()?;
    let d = model.dim();
    if ind.total_cov.shape() != (d, d) || ind.mean.len() != d {
        return Err(Error::Shape(format!("in-domain statistics do not match model dim {d}")));
    }
    let m = coral_transform_cov(&model.total_cov(), &ind.total_cov)?;
    let pseudo = adapt_plda_coral(model, &m)?;
    let (phi_b, phi_w) = rayon::join(
        || adapt_one(&model.phi_b, &pseudo.phi_b, cfg.gamma),
        || adapt_one(&model.phi_w, &pseudo.phi_w, cfg.beta),
    );
    PldaModel::new(model.mu.clone(), phi_b?, phi_w?)
}

/// Plain CORAL adaptation from in-domain statistics.
pub fn adapt_plda_coral_from_stats(model: &PldaModel, ind: &DomainStats) -> Result<PldaModel> {
    let m = coral_transform_cov(&model.total_cov(), &ind.total_cov)?;
    adapt_plda_coral(model, &m)
}

/// Covariance adaptation leaves the mean untouched; scoring in-domain trials
/// re-centres the model on the in-domain sample mean.
pub fn recenter(model: &PldaModel, mean: &[f64]) -> Result<PldaModel> {
    if mean.len() != model.dim() {
        return Err(Error::Shape(format!("mean of dim {} for model dim {}", mean.len(), model.dim())));
    }
    Ok(PldaModel {
        mu: Vector::from_column_slice(mean),
        ..model.clone()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedspace::Embedding;
    use crate::linalg::{frobenius, is_psd, rel_frobenius};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_spd(d: usize, rng: &mut impl Rng) -> Matrix {
        let a = Matrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
        symmetrized(&a * a.transpose() + Matrix::identity(d, d) * 0.1)
    }

    fn stats(cov: Matrix) -> DomainStats {
        let d = cov.nrows();
        DomainStats {
            mean: Vector::zeros(d),
            total_cov: cov,
            count: 100,
        }
    }

    #[test]
    fn domain_stats_two_points() {
        let set = EmbeddingSet::new(
            2,
            vec![Embedding::new("a", vec![1.0, 0.0]), Embedding::new("b", vec![-1.0, 0.0])],
        )
        .unwrap();
        let s = estimate_domain_stats(&set).unwrap();
        assert_eq!(s.mean.as_slice(), &[0.0, 0.0]);
        assert_eq!(s.total_cov, Matrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 0.0]));
        let one = EmbeddingSet::new(2, vec![Embedding::new("a", vec![1.0, 0.0])]).unwrap();
        assert!(estimate_domain_stats(&one).is_err());
    }

    #[test]
    fn domain_stats_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 10000;
        let items = (0..n)
            .map(|i| {
                let v: Vec<f64> = (0..4).map(|_| rng.sample(rand_distr::StandardNormal)).collect();
                Embedding::new(format!("{i}"), v)
            })
            .collect();
        let s = estimate_domain_stats(&EmbeddingSet::new(4, items).unwrap()).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                // sd of a variance estimate √(2/n), of a covariance √(1/n)
                let (want, sd) = if i == j { (1.0, (2.0 / n as f64).sqrt()) } else { (0.0, (1.0 / n as f64).sqrt()) };
                assert!((s.total_cov[(i, j)] - want).abs() < 3.0 * sd);
            }
        }
    }

    #[test]
    fn transform_examples() {
        let m = coral_transform(&stats(Matrix::from_element(1, 1, 4.0)), &stats(Matrix::from_element(1, 1, 9.0))).unwrap();
        assert!((m[(0, 0)] - 1.5).abs() < 1e-14);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random_spd(5, &mut rng);
        let same = coral_transform(&stats(a.clone()), &stats(a)).unwrap();
        assert!(frobenius(&(same - Matrix::identity(5, 5))) < 1e-10);
    }

    #[test]
    fn transform_recolors() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let (out, inn) = (random_spd(6, &mut rng), random_spd(6, &mut rng));
            let m = coral_transform_cov(&out, &inn).unwrap();
            assert!(rel_frobenius(&(m.transpose() * &out * &m), &inn) < 1e-10);
        }
    }

    #[test]
    fn transform_rejects_singular() {
        let sing = Matrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert!(coral_transform_cov(&sing, &Matrix::identity(2, 2)).is_err());
    }

    fn model(d: usize, rng: &mut impl Rng) -> PldaModel {
        PldaModel::new(Vector::from_element(d, 0.3), random_spd(d, rng), random_spd(d, rng)).unwrap()
    }

    #[test]
    fn coral_scaling_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = model(3, &mut rng);
        assert_eq!(adapt_plda_coral(&m, &Matrix::identity(3, 3)).unwrap(), m);
        let twice = adapt_plda_coral(&m, &(Matrix::identity(3, 3) * 2.0)).unwrap();
        assert!(rel_frobenius(&twice.phi_b, &(&m.phi_b * 4.0)) < 1e-15);
        assert!(rel_frobenius(&twice.phi_w, &(&m.phi_w * 4.0)) < 1e-15);
        assert!(adapt_plda_coral(&m, &Matrix::identity(2, 2)).is_err());
    }

    #[test]
    fn coral_matches_naive_triple_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = model(5, &mut rng);
        let t = Matrix::from_fn(5, 5, |_, _| rng.random_range(-1.0..1.0));
        let out = adapt_plda_coral(&m, &t).unwrap();
        for (got, src) in [(&out.phi_b, &m.phi_b), (&out.phi_w, &m.phi_w)] {
            for i in 0..5 {
                for j in 0..5 {
                    let mut want = 0.0;
                    for k in 0..5 {
                        for l in 0..5 {
                            want += t[(k, i)] * src[(k, l)] * t[(l, j)];
                        }
                    }
                    assert!((got[(i, j)] - want).abs() <= 1e-12 * want.abs().max(1.0));
                }
            }
        }
    }

    #[test]
    fn simul_diag_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..10 {
            let (o, c) = (random_spd(5, &mut rng), random_spd(5, &mut rng));
            let sd = simultaneous_diagonalize(&o, &c).unwrap();
            let b = &sd.basis;
            assert!(frobenius(&(b.transpose() * &o * b - Matrix::identity(5, 5))) < 1e-8);
            assert!(frobenius(&(b.transpose() * &c * b - Matrix::from_diagonal(&sd.diag))) < 1e-8);
        }
    }

    #[test]
    fn simul_diag_reductions() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let c = random_spd(4, &mut rng);
        let sd = simultaneous_diagonalize(&Matrix::identity(4, 4), &c).unwrap();
        let (vals, _) = sym_eigen(&c);
        assert!((&sd.diag - vals).amax() < 1e-10);
        let sd2 = simultaneous_diagonalize(&c, &c).unwrap();
        assert!(sd2.diag.iter().all(|v| (v - 1.0).abs() < 1e-10));
        assert!(simultaneous_diagonalize(&-c.clone(), &c).is_err());
    }

    #[test]
    fn zero_weights_are_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let m = model(4, &mut rng);
        let ind = stats(random_spd(4, &mut rng));
        let cfg = CoralPlusConfig {
            gamma: 0.0,
            beta: 0.0,
        };
        assert_eq!(adapt_plda_coral_plus(&m, &ind, &cfg).unwrap(), m);
    }

    #[test]
    fn dominated_case_scales_by_one_plus_weight() {
        // Φ_in = ¼ Φ_out ⇒ M = ½ I-like congruence, pseudo covariances ¼ of the originals, E = ¼ ≤ 1
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let m = model(4, &mut rng);
        let ind = stats(m.total_cov() * 0.25);
        let cfg = CoralPlusConfig {
            gamma: 0.5,
            beta: 0.3,
        };
        let out = adapt_plda_coral_plus(&m, &ind, &cfg).unwrap();
        assert!(rel_frobenius(&out.phi_b, &(&m.phi_b * 1.5)) < 1e-8);
        assert!(rel_frobenius(&out.phi_w, &(&m.phi_w * 1.3)) < 1e-8);
    }

    #[test]
    fn increment_is_psd() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..50 {
            let m = model(4, &mut rng);
            let ind = stats(random_spd(4, &mut rng));
            let out = adapt_plda_coral_plus(&m, &ind, &CoralPlusConfig::default()).unwrap();
            assert!(is_psd(&(&out.phi_b - &m.phi_b), 1e-10));
            assert!(is_psd(&(&out.phi_w - &m.phi_w), 1e-10));
        }
    }

    #[test]
    fn increment_independent_of_eigenvector_order() {
        // Reverse and sign-flip the generalized eigenvectors; the increment must not change.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (o, c) = (random_spd(5, &mut rng), random_spd(5, &mut rng));
        let sd = simultaneous_diagonalize(&o, &c).unwrap();
        let n = 5;
        let perm: Vec<usize> = (0..n).rev().collect();
        let b2 = Matrix::from_fn(n, n, |i, j| -sd.basis[(i, perm[j])]);
        let e2 = Vector::from_fn(n, |j, _| sd.diag[perm[j]]);
        let via = |b: &Matrix, e: &Vector| {
            let b_inv = b.clone().try_inverse().unwrap();
            b_inv.transpose() * Matrix::from_diagonal(&e.map(|v| v.max(1.0))) * b_inv
        };
        let direct = coral_plus_increment(&o, &c, 1.0).unwrap();
        assert!(rel_frobenius(&via(&sd.basis, &sd.diag), &direct) < 1e-8);
        assert!(rel_frobenius(&via(&b2, &e2), &direct) < 1e-8);
    }
}
