use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::PldaModel;
use crate::embedspace::{Embedding, EmbeddingSet};
use crate::error::{Error, Result};
use crate::linalg::{sym_map, Matrix, Vector};

/// Affine map `x ↦ A x + shift` applied after sampling to emulate a domain shift.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainTransform {
    pub matrix: Matrix,
    pub shift: Vector,
}

impl DomainTransform {
    pub fn identity(d: usize) -> Self {
        Self {
            matrix: Matrix::identity(d, d),
            shift: Vector::zeros(d),
        }
    }

    pub fn apply(&self, x: &Vector) -> Vector {
        &self.matrix * x + &self.shift
    }
}

/// Symmetric PSD square root with negative eigenvalues clipped to zero.
fn psd_root(a: &Matrix) -> Matrix {
    sym_map(a, |v| v.max(0.0).sqrt())
}

/// Draws `n_speakers × n_per_speaker` embeddings from the model.
///
/// Ids are `spk{s:05}-{i:03}` with speaker label `spk{s:05}`. The draw order is
/// fixed, so the output depends only on `seed`.
pub fn sample_embeddings(
    model: &PldaModel,
    n_speakers: usize,
    n_per_speaker: usize,
    seed: u64,
    domain_transform: Option<&DomainTransform>,
) -> Result<EmbeddingSet> {
    model.validate()?;
    if n_speakers == 0 || n_per_speaker == 0 {
        return Err(Error::InvalidArgument("sample sizes must be at least 1".into()));
    }
    let d = model.dim();
    if let Some(t) = domain_transform {
        if t.matrix.shape() != (d, d) || t.shift.len() != d {
            return Err(Error::Shape(format!("domain transform does not match model dim {d}")));
        }
    }
    let root_b = psd_root(&model.phi_b);
    let root_w = psd_root(&model.phi_w);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = |rng: &mut ChaCha8Rng| Vector::from_fn(d, |_, _| StandardNormal.sample(rng));
    let mut items = Vec::with_capacity(n_speakers * n_per_speaker);
    for s in 0..n_speakers {
        let y = &root_b * normal(&mut rng);
        let speaker = format!("spk{s:05}");
        for i in 0..n_per_speaker {
            let mut x = &model.mu + &y + &root_w * normal(&mut rng);
            if let Some(t) = domain_transform {
                x = t.apply(&x);
            }
            items.push(Embedding::new(format!("{speaker}-{i:03}"), x.iter().copied().collect()).with_speaker(speaker.clone()));
        }
    }
    EmbeddingSet::new(d, items)
}
