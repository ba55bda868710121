use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::conv::{batchnorm_forward, conv2d_forward, BatchNorm, Tensor4};
use super::tensor::Tensor;
use super::Real;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum BranchKernel<T> {
    /// `[C_out, C_in, K, K]` with `K ∈ {1, 3}`.
    Conv(Tensor4<T>),
    /// Channel-preserving identity map.
    Identity,
}

/// One conv (or identity) path followed by its batch norm.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvBranch<T> {
    pub kernel: BranchKernel<T>,
    pub bn: BatchNorm<T>,
}

impl<T: Real> ConvBranch<T> {
    /// `(C_out, C_in, K)`; the identity branch reports `K = 1`.
    pub fn shape(&self) -> Result<(usize, usize, usize)> {
        self.bn.validate()?;
        let c = self.bn.channels();
        match &self.kernel {
            BranchKernel::Identity => Ok((c, c, 1)),
            BranchKernel::Conv(k) => {
                let [c2, c1, kh, kw] = k.dims;
                if kh != kw || !(kh == 1 || kh == 3) {
                    return Err(Error::Shape(format!("branch kernel must be 1x1 or 3x3, got {kh}x{kw}")));
                }
                if c2 != c {
                    return Err(Error::Shape(format!("kernel has {c2} outputs, batch norm {c}")));
                }
                Ok((c2, c1, kh))
            }
        }
    }

    /// Reference forward `bn(conv(x))`.
    pub fn forward(&self, input: &Tensor4<T>) -> Result<Tensor4<T>> {
        let (c2, _, _) = self.shape()?;
        let pre = match &self.kernel {
            BranchKernel::Identity => {
                if input.dims[1] != c2 {
                    return Err(Error::Shape("identity branch needs matching channels".into()));
                }
                input.clone()
            }
            BranchKernel::Conv(k) => conv2d_forward(input, k, &vec![T::zero(); c2])?,
        };
        batchnorm_forward(&pre, &self.bn)
    }
}

/// 3×3 branch plus optional 1×1 and identity branches, summed.
#[derive(Debug, Clone, PartialEq)]
pub struct RepVggBlock<T> {
    pub branch3: ConvBranch<T>,
    pub branch1: Option<ConvBranch<T>>,
    pub identity: Option<ConvBranch<T>>,
}

impl<T: Real> RepVggBlock<T> {
    /// `(C_out, C_in)` after checking every branch agrees.
    pub fn channels(&self) -> Result<(usize, usize)> {
        let (c2, c1, k) = self.branch3.shape()?;
        if k != 3 {
            return Err(Error::Shape("branch3 must hold a 3x3 kernel".into()));
        }
        if let Some(b) = &self.branch1 {
            if matches!(b.kernel, BranchKernel::Identity) || b.shape()? != (c2, c1, 1) {
                return Err(Error::Shape("branch1 must be a 1x1 conv with the block's channels".into()));
            }
        }
        if let Some(b) = &self.identity {
            if !matches!(b.kernel, BranchKernel::Identity) {
                return Err(Error::Shape("identity branch must use the identity kernel".into()));
            }
            if c1 != c2 || b.shape()?.0 != c2 {
                return Err(Error::Shape("identity branch requires C_in = C_out".into()));
            }
        }
        Ok((c2, c1))
    }

    pub fn branches(&self) -> impl Iterator<Item = &ConvBranch<T>> {
        std::iter::once(&self.branch3).chain(self.branch1.iter()).chain(self.identity.iter())
    }

    /// Training-time forward: sum of every branch's `bn(conv(x))`.
    pub fn forward(&self, input: &Tensor4<T>) -> Result<Tensor4<T>> {
        self.channels()?;
        let mut out = self.branch3.forward(input)?;
        for b in self.branch1.iter().chain(self.identity.iter()) {
            let y = b.forward(input)?;
            out.data.iter_mut().zip(&y.data).for_each(|(o, v)| *o = *o + *v);
        }
        Ok(out)
    }

    pub fn cast<U: Real>(&self) -> RepVggBlock<U> {
        let cb = |b: &ConvBranch<T>| ConvBranch {
            kernel: match &b.kernel {
                BranchKernel::Identity => BranchKernel::Identity,
                BranchKernel::Conv(k) => BranchKernel::Conv(k.cast()),
            },
            bn: b.bn.cast(),
        };
        RepVggBlock {
            branch3: cb(&self.branch3),
            branch1: self.branch1.as_ref().map(cb),
            identity: self.identity.as_ref().map(cb),
        }
    }
}

/// A single 3×3 convolution with bias.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedConv<T> {
    pub kernel: Tensor4<T>,
    pub bias: Vec<T>,
}

impl<T: Real> FusedConv<T> {
    pub fn forward(&self, input: &Tensor4<T>) -> Result<Tensor4<T>> {
        conv2d_forward(input, &self.kernel, &self.bias)
    }
}

/// Folds a branch's batch norm into a 3×3 kernel and bias.
///
/// Per output channel `j`: `W'_j = (γ_j/σ_j) W_j` and `b'_j = β_j − μ_j γ_j/σ_j`.
/// 1×1 kernels land on the centre tap; the identity branch becomes a centred
/// Dirac kernel on matching channel pairs.
pub fn fold_bn_into_conv<T: Real>(branch: &ConvBranch<T>) -> Result<FusedConv<T>> {
    let (c2, c1, k) = branch.shape()?;
    let mut kernel = Tensor4::zeros([c2, c1, 3, 3]);
    let off = (3 - k) / 2;
    for o in 0..c2 {
        let t = branch.bn.scale[o] / branch.bn.std[o];
        for i in 0..c1 {
            match &branch.kernel {
                BranchKernel::Identity => {
                    if i == o {
                        let at = kernel.idx(o, i, 1, 1);
                        kernel.data[at] = t;
                    }
                }
                BranchKernel::Conv(w) => {
                    for y in 0..k {
                        for x in 0..k {
                            let at = kernel.idx(o, i, y + off, x + off);
                            kernel.data[at] = w.at(o, i, y, x) * t;
                        }
                    }
                }
            }
        }
    }
    let bias = (0..c2)
        .map(|j| branch.bn.bias[j] - branch.bn.mean[j] * branch.bn.scale[j] / branch.bn.std[j])
        .collect();
    Ok(FusedConv { kernel, bias })
}

/// Re-parameterizes a multi-branch block into one 3×3 convolution.
pub fn fuse_repvgg_block<T: Real>(block: &RepVggBlock<T>) -> Result<FusedConv<T>> {
    let (c2, c1) = block.channels()?;
    let mut kernel = Tensor4::zeros([c2, c1, 3, 3]);
    let mut bias = vec![T::zero(); c2];
    for b in block.branches() {
        let f = fold_bn_into_conv(b)?;
        kernel.data.iter_mut().zip(&f.kernel.data).for_each(|(a, v)| *a = *a + *v);
        bias.iter_mut().zip(&f.bias).for_each(|(a, v)| *a = *a + *v);
    }
    Ok(FusedConv { kernel, bias })
}

fn random_bn(c: usize, rng: &mut impl Rng) -> BatchNorm<f64> {
    BatchNorm {
        mean: (0..c).map(|_| rng.random_range(-1.0..1.0)).collect(),
        std: (0..c).map(|_| rng.random_range(0.5..2.0)).collect(),
        scale: (0..c).map(|_| rng.random_range(-1.5..1.5)).collect(),
        bias: (0..c).map(|_| rng.random_range(-1.0..1.0)).collect(),
    }
}

fn random_kernel(dims: [usize; 4], rng: &mut impl Rng) -> Tensor4<f64> {
    let n = dims.iter().product();
    Tensor4 {
        dims,
        data: (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
    }
}

/// A block with random weights and batch-norm statistics (`f64`; use
/// [`RepVggBlock::cast`] for `f32`).
pub fn random_block(channels: usize, with_1x1: bool, with_identity: bool, rng: &mut impl Rng) -> RepVggBlock<f64> {
    let c = channels;
    RepVggBlock {
        branch3: ConvBranch {
            kernel: BranchKernel::Conv(random_kernel([c, c, 3, 3], rng)),
            bn: random_bn(c, rng),
        },
        branch1: with_1x1.then(|| ConvBranch {
            kernel: BranchKernel::Conv(random_kernel([c, c, 1, 1], rng)),
            bn: random_bn(c, rng),
        }),
        identity: with_identity.then(|| ConvBranch {
            kernel: BranchKernel::Identity,
            bn: random_bn(c, rng),
        }),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BnDef {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub scale: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvBranchDef {
    /// Tensor file, relative to the manifest's directory.
    pub kernel: PathBuf,
    pub bn: BnDef,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentityBranchDef {
    pub bn: BnDef,
}

/// JSON description of a RepVGG block on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockManifest {
    pub branch3: ConvBranchDef,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub branch1: Option<ConvBranchDef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub identity: Option<IdentityBranchDef>,
}

impl From<&BnDef> for BatchNorm<f64> {
    fn from(s: &BnDef) -> Self {
        BatchNorm {
            mean: s.mean.clone(),
            std: s.std.clone(),
            scale: s.scale.clone(),
            bias: s.bias.clone(),
        }
    }
}

impl From<&BatchNorm<f64>> for BnDef {
    fn from(b: &BatchNorm<f64>) -> Self {
        BnDef {
            mean: b.mean.clone(),
            std: b.std.clone(),
            scale: b.scale.clone(),
            bias: b.bias.clone(),
        }
    }
}

pub(crate) fn tensor4_from_file(t: &Tensor) -> Result<Tensor4<f64>> {
    let dims: [usize; 4] = t
        .dims
        .as_slice()
        .try_into()
        .map_err(|_| Error::Shape(format!("expected a rank-4 kernel, got dims {:?}", t.dims)))?;
    Tensor4::from_vec(dims, t.data.iter().map(|&v| v as f64).collect())
}

pub(crate) fn tensor4_to_file(t: &Tensor4<f64>) -> Tensor {
    Tensor {
        dims: t.dims.to_vec(),
        data: t.data.iter().map(|&v| v as f32).collect(),
    }
}

impl BlockManifest {
    pub fn load_block(&self, base: &Path) -> Result<RepVggBlock<f64>> {
        let conv = |s: &ConvBranchDef| -> Result<ConvBranch<f64>> {
            Ok(ConvBranch {
                kernel: BranchKernel::Conv(tensor4_from_file(&Tensor::load(base.join(&s.kernel))?)?),
                bn: (&s.bn).into(),
            })
        };
        let block = RepVggBlock {
            branch3: conv(&self.branch3)?,
            branch1: self.branch1.as_ref().map(conv).transpose()?,
            identity: self.identity.as_ref().map(|s| ConvBranch {
                kernel: BranchKernel::Identity,
                bn: (&s.bn).into(),
            }),
        };
        block.channels()?;
        Ok(block)
    }

    /// Writes kernel tensors next to `manifest_path` and the manifest itself.
    pub fn save_block(block: &RepVggBlock<f64>, manifest_path: &Path) -> Result<BlockManifest> {
        block.channels()?;
        let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
        let stem = manifest_path.file_stem().and_then(|s| s.to_str()).unwrap_or("block");
        let conv = |b: &ConvBranch<f64>, tag: &str| -> Result<ConvBranchDef> {
            let BranchKernel::Conv(k) = &b.kernel else {
                return Err(Error::Shape("expected a conv branch".into()));
            };
            let name = PathBuf::from(format!("{stem}.{tag}.tnsr"));
            tensor4_to_file(k).save(base.join(&name))?;
            Ok(ConvBranchDef {
                kernel: name,
                bn: (&b.bn).into(),
            })
        };
        let manifest = BlockManifest {
            branch3: conv(&block.branch3, "k3")?,
            branch1: block.branch1.as_ref().map(|b| conv(b, "k1")).transpose()?,
            identity: block.identity.as_ref().map(|b| IdentityBranchDef { bn: (&b.bn).into() }),
        };
        let text = serde_json::to_string_pretty(&manifest)? + "\n";
        std::fs::write(manifest_path, text).map_err(|e| Error::io(manifest_path, e))?;
        Ok(manifest)
    }
}

/// Reads a block manifest and the kernel tensors it references.
pub fn load_block_manifest(path: impl AsRef<Path>) -> Result<RepVggBlock<f64>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: BlockManifest = serde_json::from_str(&text)?;
    manifest.load_block(path.parent().unwrap_or_else(|| Path::new(".")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn conv_branch(dims: [usize; 4], data: Vec<f64>, bn: BatchNorm<f64>) -> ConvBranch<f64> {
        ConvBranch {
            kernel: BranchKernel::Conv(Tensor4::from_vec(dims, data).unwrap()),
            bn,
        }
    }

    #[test]
    fn fold_with_identity_bn_pads() {
        let b = conv_branch([1, 1, 1, 1], vec![2.5], BatchNorm::identity(1));
        let f = fold_bn_into_conv(&b).unwrap();
        assert_eq!(f.kernel.data, vec![0.0, 0.0, 0.0, 0.0, 2.5, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(f.bias, vec![0.0]);
    }

    #[test]
    fn fold_scalar_example() {
        let bn = BatchNorm {
            mean: vec![1.0],
            std: vec![2.0],
            scale: vec![4.0],
            bias: vec![3.0],
        };
        let f = fold_bn_into_conv(&conv_branch([1, 1, 1, 1], vec![2.0], bn)).unwrap();
        assert_eq!(f.kernel.data[4], 4.0);
        assert_eq!(f.bias, vec![1.0]);
    }

    #[test]
    fn fold_rejects_zero_std() {
        let bn = BatchNorm {
            std: vec![0.0],
            ..BatchNorm::identity(1)
        };
        assert!(fold_bn_into_conv(&conv_branch([1, 1, 1, 1], vec![1.0], bn)).is_err());
    }

    #[test]
    fn structural_sum() {
        let block = RepVggBlock {
            branch3: conv_branch([1, 1, 3, 3], vec![0.0; 9], BatchNorm::identity(1)),
            branch1: Some(conv_branch([1, 1, 1, 1], vec![1.0], BatchNorm::identity(1))),
            identity: Some(ConvBranch {
                kernel: BranchKernel::Identity,
                bn: BatchNorm::identity(1),
            }),
        };
        let f = fuse_repvgg_block(&block).unwrap();
        let mut want = vec![0.0; 9];
        want[4] = 2.0;
        assert_eq!(f.kernel.data, want);
        assert_eq!(f.bias, vec![0.0]);
    }

    #[test]
    fn only_branch3_identity_bn() {
        let w: Vec<f64> = (0..18).map(|v| v as f64 * 0.1).collect();
        let block = RepVggBlock {
            branch3: conv_branch([1, 2, 3, 3], w.clone(), BatchNorm::identity(1)),
            branch1: None,
            identity: None,
        };
        let f = fuse_repvgg_block(&block).unwrap();
        assert_eq!(f.kernel.data, w);
        assert_eq!(f.bias, vec![0.0]);
    }

    #[test]
    fn identity_needs_square_channels() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut block = random_block(2, false, true, &mut rng);
        block.branch3 = conv_branch([2, 3, 3, 3], vec![0.0; 54], BatchNorm::identity(2));
        assert!(fuse_repvgg_block(&block).is_err());
    }

    #[test]
    fn folded_branch_matches_conv_then_bn() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let block = random_block(3, true, true, &mut rng);
        let input = Tensor4::from_vec([2, 3, 6, 6], (0..216).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        for b in block.branches() {
            let folded = fold_bn_into_conv(b).unwrap().forward(&input).unwrap();
            let direct = b.forward(&input).unwrap();
            assert!(folded.max_abs_diff(&direct) < 1e-12);
        }
    }

    #[test]
    fn fused_matches_branches_c8() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let block = random_block(8, true, true, &mut rng);
        let input =
            Tensor4::from_vec([1, 8, 16, 16], (0..8 * 256).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let fused = fuse_repvgg_block(&block).unwrap();
        let err = fused.forward(&input).unwrap().max_abs_diff(&block.forward(&input).unwrap());
        assert!(err < 1e-10, "{err}");
        let b32 = block.cast::<f32>();
        let in32 = input.cast::<f32>();
        let err32 = fuse_repvgg_block(&b32).unwrap().forward(&in32).unwrap().max_abs_diff(&b32.forward(&in32).unwrap());
        assert!(err32 < 1e-4, "{err32}");
    }

    #[test]
    fn manifest_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let block = random_block(2, true, true, &mut rng);
        let path = dir.path().join("blk.json");
        BlockManifest::save_block(&block, &path).unwrap();
        let back = load_block_manifest(&path).unwrap();
        // kernels pass through f32 on disk
        let BranchKernel::Conv(k) = &back.branch3.kernel else { panic!() };
        let BranchKernel::Conv(k0) = &block.branch3.kernel else { panic!() };
        assert!(k.max_abs_diff(k0) < 1e-7);
        assert_eq!(back.identity.unwrap().bn, block.identity.unwrap().bn);
    }
}
