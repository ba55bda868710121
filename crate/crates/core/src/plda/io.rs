use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::PldaModel;
use crate::error::{Error, Result};
use crate::linalg::{Matrix, Vector};
use crate::neurkern::tensor::Tensor;

pub const MODEL_FILE_VERSION: u32 = 1;

/// How an adapted model was produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    /// `"coral"` or `"coral+"`.
    pub method: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    /// In-domain mean to centre on before scoring.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub center: Option<Vec<f64>>,
}

/// JSON model schema; covariances are flat row-major arrays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub version: u32,
    pub dim: usize,
    pub mu: Vec<f64>,
    pub phi_b: Vec<f64>,
    pub phi_w: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
}

fn row_major(m: &Matrix) -> Vec<f64> {
    (0..m.nrows()).flat_map(|i| (0..m.ncols()).map(move |j| m[(i, j)])).collect()
}

impl ModelFile {
    pub fn from_model(model: &PldaModel, provenance: Option<Provenance>) -> Self {
        Self {
            version: MODEL_FILE_VERSION,
            dim: model.dim(),
            mu: model.mu.iter().copied().collect(),
            phi_b: row_major(&model.phi_b),
            phi_w: row_major(&model.phi_w),
            provenance,
        }
    }

    pub fn to_model(&self) -> Result<PldaModel> {
        if self.version != MODEL_FILE_VERSION {
            return Err(Error::format("PLDA model", 0, format!("unsupported version {}", self.version)));
        }
        let d = self.dim;
        if self.mu.len() != d || self.phi_b.len() != d * d || self.phi_w.len() != d * d {
            return Err(Error::format("PLDA model", 0, format!("array lengths do not match dim {d}")));
        }
        PldaModel::new(
            Vector::from_column_slice(&self.mu),
            Matrix::from_row_slice(d, d, &self.phi_b),
            Matrix::from_row_slice(d, d, &self.phi_w),
        )
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

pub fn save_model(model: &PldaModel, provenance: Option<Provenance>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = ModelFile::from_model(model, provenance).to_json()?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<(PldaModel, Option<Provenance>)> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: ModelFile = serde_json::from_str(&text)?;
    Ok((file.to_model()?, file.provenance))
}

/// Binary variant: three consecutive tensor records (μ, Φ_b, Φ_w) in `f32`.
pub fn save_model_binary(model: &PldaModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let d = model.dim();
    let f = |v: Vec<f64>| v.into_iter().map(|x| x as f32).collect::<Vec<f32>>();
    let mut bytes = Tensor::new(vec![d], f(model.mu.iter().copied().collect()))?.to_bytes();
    bytes.extend(Tensor::new(vec![d, d], f(row_major(&model.phi_b)))?.to_bytes());
    bytes.extend(Tensor::new(vec![d, d], f(row_major(&model.phi_w)))?.to_bytes());
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_model_binary(path: impl AsRef<Path>) -> Result<PldaModel> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (mu, used) = Tensor::from_bytes_prefix(&bytes)?;
    let (b, used_b) = Tensor::from_bytes_prefix(&bytes[used..])?;
    let (w, used_w) = Tensor::from_bytes_prefix(&bytes[used + used_b..])?;
    if used + used_b + used_w != bytes.len() {
        return Err(Error::format("PLDA model", 0, "trailing bytes"));
    }
    let d = mu.dims.first().copied().unwrap_or(0);
    if mu.dims.len() != 1 || b.dims != [d, d] || w.dims != [d, d] {
        return Err(Error::format("PLDA model", 0, "tensor shapes do not form a model"));
    }
    let f = |t: &Tensor| t.data.iter().map(|&x| x as f64).collect::<Vec<f64>>();
    PldaModel::new(
        Vector::from_vec(f(&mu)),
        Matrix::from_row_slice(d, d, &f(&b)),
        Matrix::from_row_slice(d, d, &f(&w)),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> PldaModel {
        PldaModel::new(
            Vector::from_vec(vec![0.1, -0.3]),
            Matrix::from_row_slice(2, 2, &[2.0, 0.1 + 0.2, 0.1 + 0.2, 1.0 / 3.0]),
            Matrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.7]),
        )
        .unwrap()
    }

    #[test]
    fn json_roundtrip_is_exact() {
        let m = model();
        let prov = Some(Provenance {
            method: "coral+".into(),
            gamma: Some(0.5),
            beta: Some(0.25),
            center: Some(vec![0.5, 1.0]),
        });
        let text = ModelFile::from_model(&m, prov.clone()).to_json().unwrap();
        let back: ModelFile = serde_json::from_str(&text).unwrap();
        assert_eq!(back.to_model().unwrap(), m);
        assert_eq!(back.provenance, prov);
        assert!(!ModelFile::from_model(&m, None).to_json().unwrap().contains("provenance"));
    }

    #[test]
    fn binary_roundtrip_within_f32() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.bin");
        let m = model();
        save_model_binary(&m, &p).unwrap();
        let back = load_model_binary(&p).unwrap();
        assert!((back.phi_b[(1, 1)] - 1.0 / 3.0).abs() < 1e-7);
    }

    #[test]
    fn rejects_wrong_lengths() {
        let mut f = ModelFile::from_model(&model(), None);
        f.phi_w.pop();
        assert!(f.to_model().is_err());
    }
}
