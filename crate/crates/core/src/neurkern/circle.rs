use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Scale `s` and margin `m` of the circle loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CircleLossParams {
    pub s: f64,
    pub m: f64,
}

impl CircleLossParams {
    /// Setting used for the CNN extractors.
    pub const CNN: Self = Self { s: 60.0, m: 0.35 };
    /// Setting used for the TDNN extractors.
    pub const TDNN: Self = Self { s: 60.0, m: 0.40 };

    pub fn validate(&self) -> Result<()> {
        if !(self.s > 0.0) || !self.s.is_finite() {
            return Err(Error::InvalidArgument(format!("circle loss scale must be positive, got {}", self.s)));
        }
        if !(self.m > 0.0 && self.m < 1.0) {
            return Err(Error::InvalidArgument(format!("circle loss margin must be in (0, 1), got {}", self.m)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CircleLoss {
    pub loss: f64,
    /// ∂loss/∂cos θ_j for every class.
    pub grad: Vec<f64>,
}

/// Circle loss over precomputed class cosines.
///
/// Logits are `s(m² − (1 − cos θ_y)²)` for the target class and
/// `s(cos² θ_j − m²)` for the others; the loss is the softmax cross-entropy of
/// the target, evaluated through log-sum-exp.
pub fn circle_loss(cosines: &[f64], target_index: usize, params: &CircleLossParams) -> Result<CircleLoss> {
    params.validate()?;
    if cosines.len() < 2 {
        return Err(Error::InvalidArgument("circle loss needs at least two classes".into()));
    }
    if target_index >= cosines.len() {
        return Err(Error::InvalidArgument(format!(
            "target index {target_index} out of range for {} classes",
            cosines.len()
        )));
    }
    if let Some(c) = cosines.iter().find(|c| !(-1.0..=1.0).contains(*c)) {
        return Err(Error::InvalidArgument(format!("cosine {c} outside [-1, 1]")));
    }
    let (s, m) = (params.s, params.m);
    let m2 = m * m;
    let logits: Vec<f64> = cosines
        .iter()
        .enumerate()
        .map(|(j, &c)| {
            if j == target_index {
                s * (m2 - (1.0 - c) * (1.0 - c))
            } else {
                s * (c * c - m2)
            }
        })
        .collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let lse = max + total.ln();
    let loss = (lse - logits[target_index]).max(0.0);
    let grad = cosines
        .iter()
        .enumerate()
        .map(|(j, &c)| {
            let p = weights[j] / total;
            if j == target_index {
                (p - 1.0) * 2.0 * s * (1.0 - c)
            } else {
                p * 2.0 * s * c
            }
        })
        .collect();
    Ok(CircleLoss { loss, grad })
}

/// Cosines between an embedding and each class weight vector.
pub fn class_cosines(embedding: &[f64], class_weights: &[Vec<f64>]) -> Result<Vec<f64>> {
    class_weights
        .iter()
        .map(|w| crate::embedspace::cosine(embedding, w))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn two_class_extreme_example() {
        let out = circle_loss(&[1.0, -1.0], 0, &CircleLossParams::CNN).unwrap();
        // target logit 7.35, negative logit 52.65
        let want = 45.3 + (-45.3f64).exp().ln_1p();
        assert!((out.loss - want).abs() < 1e-10, "{}", out.loss);
        assert_eq!(format!("{:.2}", out.loss), "45.30");
    }

    #[test]
    fn uniform_cosines_symmetric_gradient() {
        let out = circle_loss(&[0.3; 6], 2, &CircleLossParams::TDNN).unwrap();
        let others: Vec<f64> = out.grad.iter().enumerate().filter(|(j, _)| *j != 2).map(|(_, g)| *g).collect();
        assert!(others.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn errors() {
        let p = CircleLossParams::CNN;
        assert!(circle_loss(&[0.1, 0.2], 2, &p).is_err());
        assert!(circle_loss(&[0.1], 0, &p).is_err());
        assert!(circle_loss(&[1.5, 0.0], 0, &p).is_err());
        assert!(circle_loss(&[0.1, 0.2], 0, &CircleLossParams { s: 60.0, m: 1.0 }).is_err());
    }

    #[test]
    fn stable_at_large_scale() {
        let p = CircleLossParams { s: 1000.0, m: 0.35 };
        for cos in [[-1.0, 1.0, 1.0], [1.0, -1.0, -1.0], [0.0, 0.0, 0.0]] {
            let out = circle_loss(&cos, 0, &p).unwrap();
            assert!(out.loss.is_finite() && out.grad.iter().all(|g| g.is_finite()));
        }
    }

    #[test]
    fn gradient_signs_and_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let c: Vec<f64> = (0..5).map(|_| rng.random_range(0.0..1.0)).collect();
            let out = circle_loss(&c, 0, &CircleLossParams::CNN).unwrap();
            assert!(out.loss >= 0.0);
            assert!(out.grad[0] <= 0.0);
            assert!(out.grad[1..].iter().all(|g| *g >= 0.0));
            let mut perm = c.clone();
            perm[1..].reverse();
            let p = circle_loss(&perm, 0, &CircleLossParams::CNN).unwrap();
            assert!((p.loss - out.loss).abs() <= 1e-12 * out.loss.max(1.0));
        }
    }

    #[test]
    fn cosines_helper() {
        let c = class_cosines(&[1.0, 0.0], &[vec![2.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert_eq!(c, vec![1.0, 0.0]);
    }
}
