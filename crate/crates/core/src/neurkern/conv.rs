use rayon::prelude::*;

use super::Real;
use crate::error::{Error, Result};

/// Dense 4-D tensor in `[d0, d1, d2, d3]` row-major order, used both for
/// activations `[N, C, H, W]` and kernels `[C_out, C_in, K, K]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4<T> {
    pub dims: [usize; 4],
    pub data: Vec<T>,
}

impl<T: Real> Tensor4<T> {
    pub fn zeros(dims: [usize; 4]) -> Self {
        Self {
            dims,
            data: vec![T::zero(); dims.iter().product()],
        }
    }

    pub fn from_vec(dims: [usize; 4], data: Vec<T>) -> Result<Self> {
        if dims.iter().product::<usize>() != data.len() {
            return Err(Error::Shape(format!("dims {dims:?} do not match {} values", data.len())));
        }
        Ok(Self { dims, data })
    }

    #[inline]
    pub fn idx(&self, a: usize, b: usize, c: usize, d: usize) -> usize {
        ((a * self.dims[1] + b) * self.dims[2] + c) * self.dims[3] + d
    }

    #[inline]
    pub fn at(&self, a: usize, b: usize, c: usize, d: usize) -> T {
        self.data[self.idx(a, b, c, d)]
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        assert_eq!(self.dims, other.dims);
        self.data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (a, b)| m.max((*a - *b).abs()))
    }

    pub fn cast<U: Real>(&self) -> Tensor4<U> {
        Tensor4 {
            dims: self.dims,
            data: self.data.iter().map(|v| U::from(*v).unwrap()).collect(),
        }
    }
}

/// Stride-1 cross-correlation with zero padding `(K−1)/2`, preserving H and W.
pub fn conv2d_forward<T: Real>(input: &Tensor4<T>, kernel: &Tensor4<T>, bias: &[T]) -> Result<Tensor4<T>> {
    let [n, c1, h, w] = input.dims;
    let [c2, kc1, kh, kw] = kernel.dims;
    if kc1 != c1 || kh != kw || kh % 2 == 0 || bias.len() != c2 {
        return Err(Error::Shape(format!(
            "conv input {:?}, kernel {:?}, bias {}",
            input.dims,
            kernel.dims,
            bias.len()
        )));
    }
    let pad = (kh / 2) as isize;
    let mut out = Tensor4::zeros([n, c2, h, w]);
    let plane = c2 * h * w;
    out.data.par_chunks_mut(plane.max(1)).enumerate().for_each(|(b, chunk)| {
        for o in 0..c2 {
            for y in 0..h {
                for x in 0..w {
                    let mut acc = bias[o];
                    for i in 0..c1 {
                        for ky in 0..kh {
                            let sy = y as isize + ky as isize - pad;
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let sx = x as isize + kx as isize - pad;
                                if sx < 0 || sx >= w as isize {
                                    continue;
                                }
                                acc = acc + input.at(b, i, sy as usize, sx as usize) * kernel.at(o, i, ky, kx);
                            }
                        }
                    }
                    chunk[(o * h + y) * w + x] = acc;
                }
            }
        }
    });
    Ok(out)
}

/// Inference-mode batch-norm statistics for one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm<T> {
    pub mean: Vec<T>,
    pub std: Vec<T>,
    pub scale: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Real> BatchNorm<T> {
    /// μ = 0, σ = 1, γ = 1, β = 0.
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![T::zero(); channels],
            std: vec![T::one(); channels],
            scale: vec![T::one(); channels],
            bias: vec![T::zero(); channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.channels();
        if self.std.len() != c || self.scale.len() != c || self.bias.len() != c {
            return Err(Error::Shape("batch-norm vectors differ in length".into()));
        }
        if let Some(j) = self.std.iter().position(|s| !(*s > T::zero())) {
            return Err(Error::InvalidArgument(format!("batch-norm std of channel {j} is not positive")));
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> BatchNorm<U> {
        let f = |v: &Vec<T>| v.iter().map(|x| U::from(*x).unwrap()).collect();
        BatchNorm {
            mean: f(&self.mean),
            std: f(&self.std),
            scale: f(&self.scale),
            bias: f(&self.bias),
        }
    }
}

/// `(x − μ_j) γ_j / σ_j + β_j` per channel `j`.
pub fn batchnorm_forward<T: Real>(input: &Tensor4<T>, bn: &BatchNorm<T>) -> Result<Tensor4<T>> {
    bn.validate()?;
    let [_, c, h, w] = input.dims;
    if c != bn.channels() {
        return Err(Error::Shape(format!("input has {c} channels, batch norm {}", bn.channels())));
    }
    let mut out = input.clone();
    let hw = h * w;
    for (k, chunk) in out.data.chunks_mut(hw.max(1)).enumerate() {
        let j = k % c;
        for v in chunk {
            *v = (*v - bn.mean[j]) * bn.scale[j] / bn.std[j] + bn.bias[j];
        }
    }
    Ok(out)
}
