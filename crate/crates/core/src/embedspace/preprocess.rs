use serde::{Deserialize, Serialize};

use super::{l2_norm, EmbeddingSet};
use crate::error::{Error, Result};
use crate::linalg::{mean_and_cov, mean_diag, serde_row_major, sym_eigen, Matrix, Vector, ROOT_FLOOR_REL};

/// Centering, whitening and optional length normalization, in that order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessChain {
    pub mean: Vec<f64>,
    /// `W` with `W^T Σ W = I`; applied as `W^T (v − mean)`.
    #[serde(with = "serde_row_major")]
    pub whitener: Matrix,
    pub apply_length_norm: bool,
}

impl PreprocessChain {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Transforms one vector.
    pub fn transform(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.dim() {
            return Err(Error::Shape(format!("vector dim {} vs chain dim {}", v.len(), self.dim())));
        }
        let centered = Vector::from_iterator(v.len(), v.iter().zip(&self.mean).map(|(x, m)| x - m));
        let mut out: Vec<f64> = self.whitener.tr_mul(&centered).iter().copied().collect();
        if self.apply_length_norm {
            let n = l2_norm(&out);
            if n == 0.0 {
                return Err(Error::InvalidArgument("cannot length-normalize a zero vector".into()));
            }
            out.iter_mut().for_each(|x| *x /= n);
        }
        Ok(out)
    }
}

/// Fits mean and symmetric-eigendecomposition whitener `W = U Λ^{-1/2}`.
pub fn fit_preprocess(train: &EmbeddingSet, apply_length_norm: bool) -> Result<PreprocessChain> {
    let d = train.dim();
    if train.len() < d + 1 {
        return Err(Error::InvalidArgument(format!(
            "whitening a {d}-dimensional space needs at least {} embeddings, got {}",
            d + 1,
            train.len()
        )));
    }
    let (mean, cov, _) = mean_and_cov(train.iter().map(|e| e.vector.as_slice()), d);
    let (values, vectors) = sym_eigen(&cov);
    let floor = ROOT_FLOOR_REL * mean_diag(&cov);
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    if !(min > floor) {
        return Err(Error::Numerical(format!(
            "training covariance is rank deficient (smallest eigenvalue {min:.3e} <= {floor:.3e}); \
             reduce the embedding dimension before whitening"
        )));
    }
    let whitener = Matrix::from_fn(d, d, |i, j| vectors[(i, j)] / values[j].sqrt());
    Ok(PreprocessChain {
        mean: mean.iter().copied().collect(),
        whitener,
        apply_length_norm,
    })
}

/// Applies the chain to every embedding, keeping ids and metadata.
pub fn apply_preprocess(chain: &PreprocessChain, set: &EmbeddingSet) -> Result<EmbeddingSet> {
    if set.dim() != chain.dim() {
        return Err(Error::Shape(format!("set dim {} vs chain dim {}", set.dim(), chain.dim())));
    }
    let items = set
        .iter()
        .map(|e| {
            let vector = chain
                .transform(&e.vector)
                .map_err(|err| Error::InvalidArgument(format!("embedding {:?}: {err}", e.id)))?;
            Ok(super::Embedding { vector, ..e.clone() })
        })
        .collect::<Result<Vec<_>>>()?;
    EmbeddingSet::new(chain.dim(), items)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedspace::Embedding;
    use crate::linalg::frobenius;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn set_from(rows: Vec<Vec<f64>>) -> EmbeddingSet {
        let d = rows[0].len();
        let items = rows
            .into_iter()
            .enumerate()
            .map(|(i, v)| Embedding::new(format!("e{i}"), v))
            .collect();
        EmbeddingSet::new(d, items).unwrap()
    }

    // Direct recomputation of the sample covariance, independent of linalg::mean_and_cov.
    fn naive_cov(set: &EmbeddingSet) -> Matrix {
        let d = set.dim();
        let n = set.len() as f64;
        let mut mean = vec![0.0; d];
        for e in set {
            for k in 0..d {
                mean[k] += e.vector[k] / n;
            }
        }
        Matrix::from_fn(d, d, |i, j| {
            set.iter()
                .map(|e| (e.vector[i] - mean[i]) * (e.vector[j] - mean[j]))
                .sum::<f64>()
                / (n - 1.0)
        })
    }

    fn gaussian_set(d: usize, n: usize, seed: u64) -> EmbeddingSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mix = Matrix::from_fn(d, d, |_, _| StandardNormal.sample(&mut rng));
        let rows = (0..n)
            .map(|_| {
                let z = Vector::from_fn(d, |_, _| StandardNormal.sample(&mut rng));
                let x = &mix * z;
                x.iter().enumerate().map(|(k, v)| v + k as f64).collect()
            })
            .collect();
        set_from(rows)
    }

    #[test]
    fn scalar_variance_four_gives_half() {
        // {−√2, √2}: unbiased variance 2·2/1 = 4
        let c = 2.0f64.sqrt();
        let set = set_from(vec![vec![-c], vec![c]]);
        let chain = fit_preprocess(&set, false).unwrap();
        assert!((chain.whitener[(0, 0)].abs() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn whitened_covariance_is_identity() {
        let set = gaussian_set(6, 200, 7);
        let chain = fit_preprocess(&set, false).unwrap();
        let out = apply_preprocess(&chain, &set).unwrap();
        let err = frobenius(&(naive_cov(&out) - Matrix::identity(6, 6)));
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn whitening_identity_data() {
        // ±e_k pairs: zero mean, covariance 2/(n−1)·I before scaling
        let d = 3;
        let mut rows = Vec::new();
        for k in 0..d {
            for s in [-1.0, 1.0] {
                let mut v = vec![0.0; d];
                v[k] = s;
                rows.push(v);
            }
        }
        let n = rows.len() as f64;
        let scale = ((n - 1.0) / 2.0).sqrt();
        let set = set_from(rows.into_iter().map(|v| v.into_iter().map(|x| x * scale).collect()).collect());
        let chain = fit_preprocess(&set, false).unwrap();
        assert!(chain.mean.iter().all(|m| m.abs() < 1e-15));
        let wtw = chain.whitener.transpose() * &chain.whitener;
        assert!(frobenius(&(wtw - Matrix::identity(d, d))) < 1e-12);
    }

    #[test]
    fn mean_maps_to_zero_and_length_norm_is_unit() {
        let set = gaussian_set(4, 50, 3);
        let chain = fit_preprocess(&set, false).unwrap();
        let z = chain.transform(&chain.mean.clone()).unwrap();
        assert!(z.iter().all(|v| v.abs() < 1e-12));

        let normed = PreprocessChain {
            apply_length_norm: true,
            ..chain
        };
        for e in apply_preprocess(&normed, &set).unwrap().iter() {
            assert!((l2_norm(&e.vector) - 1.0).abs() < 1e-12);
        }
        assert!(normed.transform(&normed.mean.clone()).is_err());
    }

    #[test]
    fn rank_deficient_rejected() {
        let rows = (0..10).map(|i| vec![i as f64, 2.0 * i as f64]).collect();
        let err = fit_preprocess(&set_from(rows), false).unwrap_err();
        assert!(err.to_string().contains("reduce the embedding dimension"));
    }

    #[test]
    fn too_few_items_rejected() {
        let set = gaussian_set(4, 4, 1);
        assert!(fit_preprocess(&set, false).is_err());
    }

    #[test]
    fn affine_before_length_norm() {
        let set = gaussian_set(3, 40, 9);
        let chain = fit_preprocess(&set, false).unwrap();
        let v = [0.3, -1.2, 2.0];
        let base = chain.transform(&v).unwrap();
        let alpha = 2.5;
        let scaled: Vec<f64> = v.iter().zip(&chain.mean).map(|(x, m)| alpha * (x - m) + m).collect();
        let out = chain.transform(&scaled).unwrap();
        for (a, b) in out.iter().zip(&base) {
            assert!((a - alpha * b).abs() < 1e-10);
        }
    }

    #[test]
    fn metadata_preserved() {
        let mut set = gaussian_set(2, 10, 4).into_items();
        set[0] = set[0].clone().with_speaker("s").with_duration(1.5).with_partition("p");
        let set = EmbeddingSet::new(2, set).unwrap();
        let chain = fit_preprocess(&set, true).unwrap();
        let out = apply_preprocess(&chain, &set).unwrap();
        assert_eq!(out.items()[0].speaker.as_deref(), Some("s"));
        assert_eq!(out.items()[0].duration_s, Some(1.5));
        assert_eq!(out.items()[0].partition.as_deref(), Some("p"));
    }
}
