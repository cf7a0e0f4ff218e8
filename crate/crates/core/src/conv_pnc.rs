//! Convolutional repair at miniature scale.
//!
//! Feature maps are `N x H x W x C` tensors and kernels are stored
//! `k x k x C_in x C_out` (HWIO). Least-squares systems use the patch matrix
//! `P(X)` whose columns after the leading ones column are ordered
//! `(c_in, u, v)` with `c_in` slowest, and the matching kernel matrix
//! `mat(W)` of shape `(C_in k^2) x C_out`; so `flat(conv(X, W)) = P(X) mat(W)`.
//!
//! A block is `conv2(relu(bn2(conv1(relu(bn1(x)))))) + shortcut(x)` where the
//! `bn` maps are frozen per-channel affine constants. A member perturbs `conv1`
//! and refits `conv2`, gaining a bias, so its output matches the base `conv2`
//! output on calibration images.

use ndarray::{Array4, ArrayView4};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{
    derive_seed, gaussian_matrix, gaussian_vector, orthonormal_basis, seeded_rng, Matrix, SpdSystem,
};
use crate::serial::{decode_f64s, encode_f64s, VectorBlock};

pub type FeatureMap = Array4<f64>;
pub type Kernel = Array4<f64>;

/// Default rows per accumulation chunk. Memory only; results do not depend on it.
pub const DEFAULT_CHUNK: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Geometry {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Geometry {
    pub fn same(kernel: usize, stride: usize) -> Self {
        Self { kernel, stride, padding: kernel / 2 }
    }

    pub fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if self.kernel == 0 || self.stride == 0 {
            return Err(Error::InvalidGeometry("kernel and stride must be >= 1".into()));
        }
        let (hp, wp) = (h + 2 * self.padding, w + 2 * self.padding);
        if self.kernel > hp || self.kernel > wp {
            return Err(Error::InvalidGeometry(format!("kernel {} exceeds padded map {}x{}", self.kernel, hp, wp)));
        }
        Ok(((hp - self.kernel) / self.stride + 1, (wp - self.kernel) / self.stride + 1))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchDesign {
    pub matrix: Matrix,
    pub geometry: Geometry,
    pub out_hw: (usize, usize),
}

#[inline]
fn tap(x: &ArrayView4<f64>, n: usize, i: isize, j: isize, c: usize) -> f64 {
    let (_, h, w, _) = x.dim();
    if i < 0 || j < 0 || i as usize >= h || j as usize >= w {
        0.0
    } else {
        x[[n, i as usize, j as usize, c]]
    }
}

pub fn unfold_patches(map: &FeatureMap, geometry: Geometry) -> Result<PatchDesign> {
    let (n, h, w, c) = map.dim();
    let (ho, wo) = geometry.output_size(h, w)?;
    let k = geometry.kernel;
    let view = map.view();
    let mut m = Matrix::zeros(n * ho * wo, 1 + c * k * k);
    let (s, p) = (geometry.stride as isize, geometry.padding as isize);
    for b in 0..n {
        for i in 0..ho {
            for j in 0..wo {
                let row = b * ho * wo + i * wo + j;
                m[(row, 0)] = 1.0;
                for ch in 0..c {
                    for u in 0..k {
                        for v in 0..k {
                            let col = 1 + ch * k * k + u * k + v;
                            m[(row, col)] =
                                tap(&view, b, i as isize * s + u as isize - p, j as isize * s + v as isize - p, ch);
                        }
                    }
                }
            }
        }
    }
    Ok(PatchDesign { matrix: m, geometry, out_hw: (ho, wo) })
}

/// `mat(W)`: row `c k^2 + u k + v`, column `o`, from an HWIO kernel.
pub fn kernel_matrix(kernel: &Kernel) -> Matrix {
    let (k, _, cin, cout) = kernel.dim();
    Matrix::from_fn(cin * k * k, cout, |r, o| {
        let (c, rem) = (r / (k * k), r % (k * k));
        kernel[[rem / k, rem % k, c, o]]
    })
}

pub fn kernel_from_matrix(mat: &Matrix, k: usize, cin: usize, cout: usize) -> Result<Kernel> {
    if mat.shape() != (cin * k * k, cout) {
        return Err(Error::ShapeMismatch(format!(
            "kernel matrix {:?} does not match k={k}, c_in={cin}, c_out={cout}",
            mat.shape()
        )));
    }
    Ok(Kernel::from_shape_fn((k, k, cin, cout), |(u, v, c, o)| mat[(c * k * k + u * k + v, o)]))
}

/// Row-major flattening of an HWIO kernel (the layout basis columns use).
pub fn flatten_kernel(kernel: &Kernel) -> Vec<f64> {
    kernel.iter().copied().collect()
}

pub fn kernel_from_flat(flat: &[f64], shape: (usize, usize, usize, usize)) -> Result<Kernel> {
    Kernel::from_shape_vec(shape, flat.to_vec())
        .map_err(|e| Error::ShapeMismatch(format!("flat kernel of {} values: {e}", flat.len())))
}

/// Direct convolution with optional per-output-channel bias.
pub fn conv2d(map: &FeatureMap, kernel: &Kernel, bias: Option<&[f64]>, geometry: Geometry) -> Result<FeatureMap> {
    let (n, h, w, c) = map.dim();
    let (k, k2, cin, cout) = kernel.dim();
    if k != k2 || k != geometry.kernel {
        return Err(Error::InvalidGeometry(format!("kernel is {k}x{k2}, geometry says {}", geometry.kernel)));
    }
    if cin != c {
        return Err(Error::ShapeMismatch(format!("map has {c} channels, kernel expects {cin}")));
    }
    if let Some(b) = bias {
        if b.len() != cout {
            return Err(Error::ShapeMismatch("bias length differs from output channels".into()));
        }
    }
    let (ho, wo) = geometry.output_size(h, w)?;
    let (s, p) = (geometry.stride as isize, geometry.padding as isize);
    let view = map.view();
    let mut out = FeatureMap::zeros((n, ho, wo, cout));
    for b in 0..n {
        for i in 0..ho {
            for j in 0..wo {
                for o in 0..cout {
                    let mut acc = bias.map_or(0.0, |bb| bb[o]);
                    for u in 0..k {
                        for v in 0..k {
                            let (ii, jj) = (i as isize * s + u as isize - p, j as isize * s + v as isize - p);
                            for ch in 0..c {
                                acc += tap(&view, b, ii, jj, ch) * kernel[[u, v, ch, o]];
                            }
                        }
                    }
                    out[[b, i, j, o]] = acc;
                }
            }
        }
    }
    Ok(out)
}

/// `N H' W' x C` matrix with rows in `(n, i, j)` order.
pub fn flatten_map(map: &FeatureMap) -> Matrix {
    let (n, h, w, c) = map.dim();
    Matrix::from_fn(n * h * w, c, |r, ch| {
        let (b, rem) = (r / (h * w), r % (h * w));
        map[[b, rem / w, rem % w, ch]]
    })
}

pub fn unflatten_map(m: &Matrix, n: usize, h: usize, w: usize) -> Result<FeatureMap> {
    if m.nrows() != n * h * w {
        return Err(Error::ShapeMismatch("row count does not match n*h*w".into()));
    }
    Ok(FeatureMap::from_shape_fn((n, h, w, m.ncols()), |(b, i, j, c)| m[(b * h * w + i * w + j, c)]))
}

/// Frozen per-channel `scale * x + shift`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelAffine {
    pub scale: Vec<f64>,
    pub shift: Vec<f64>,
}

impl ChannelAffine {
    pub fn identity(channels: usize) -> Self {
        Self { scale: vec![1.0; channels], shift: vec![0.0; channels] }
    }

    pub fn apply_relu(&self, map: &FeatureMap) -> FeatureMap {
        let mut out = map.clone();
        for ((_, _, _, c), v) in out.indexed_iter_mut() {
            *v = (self.scale[c] * *v + self.shift[c]).max(0.0);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Shortcut {
    Identity,
    Projection(Kernel),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvBlockModel {
    pub conv1: Kernel,
    pub conv2: Kernel,
    /// Present only after a correction.
    pub conv2_bias: Option<Vec<f64>>,
    pub bn1: ChannelAffine,
    pub bn2: ChannelAffine,
    pub shortcut: Shortcut,
    pub stride: usize,
}

/// Intermediate values of one block evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockTrace {
    /// Input to `conv2`.
    pub conv2_input: FeatureMap,
    pub conv2_output: FeatureMap,
    pub shortcut: FeatureMap,
    pub output: FeatureMap,
}

impl ConvBlockModel {
    pub fn new(
        conv1: Kernel,
        conv2: Kernel,
        bn1: ChannelAffine,
        bn2: ChannelAffine,
        shortcut: Shortcut,
        stride: usize,
    ) -> Result<Self> {
        let (k1, k1b, cin, mid) = conv1.dim();
        let (k2, k2b, mid2, cout) = conv2.dim();
        if k1 != k1b || k2 != k2b || k1 % 2 == 0 || k2 % 2 == 0 {
            return Err(Error::InvalidGeometry("kernels must be square with odd size".into()));
        }
        if mid != mid2 {
            return Err(Error::ShapeMismatch(format!("conv1 emits {mid} channels, conv2 expects {mid2}")));
        }
        if bn1.scale.len() != cin || bn1.shift.len() != cin || bn2.scale.len() != mid || bn2.shift.len() != mid {
            return Err(Error::ShapeMismatch("normalization constants do not match channel counts".into()));
        }
        if stride == 0 {
            return Err(Error::InvalidGeometry("stride must be >= 1".into()));
        }
        match &shortcut {
            Shortcut::Identity => {
                if cin != cout || stride != 1 {
                    return Err(Error::ShapeMismatch("identity shortcut needs c_in == c_out and stride 1".into()));
                }
            }
            Shortcut::Projection(p) => {
                if p.dim() != (1, 1, cin, cout) {
                    return Err(Error::ShapeMismatch("projection shortcut must be 1x1 c_in -> c_out".into()));
                }
            }
        }
        let finite = conv1
            .iter()
            .chain(conv2.iter())
            .chain(bn1.scale.iter())
            .chain(bn1.shift.iter())
            .chain(bn2.scale.iter())
            .chain(bn2.shift.iter())
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::NonFiniteResult("conv block parameters".into()));
        }
        Ok(Self { conv1, conv2, conv2_bias: None, bn1, bn2, shortcut, stride })
    }

    /// He-scaled random kernels, normalization constants near identity.
    pub fn random(cin: usize, cout: usize, k: usize, stride: usize, seed: u64) -> Result<Self> {
        let mut rng = seeded_rng(seed);
        let kernel = |ci: usize, co: usize, kk: usize, rng: &mut rand_chacha::ChaCha8Rng| {
            let std = (2.0 / (ci * kk * kk) as f64).sqrt();
            let g = gaussian_matrix(1, kk * kk * ci * co, rng) * std;
            kernel_from_flat(g.as_slice(), (kk, kk, ci, co))
        };
        let conv1 = kernel(cin, cout, k, &mut rng)?;
        let conv2 = kernel(cout, cout, k, &mut rng)?;
        let shortcut = if cin == cout && stride == 1 {
            Shortcut::Identity
        } else {
            Shortcut::Projection(kernel(cin, cout, 1, &mut rng)?)
        };
        let affine = |c: usize, rng: &mut rand_chacha::ChaCha8Rng| ChannelAffine {
            scale: (0..c).map(|_| rng.random_range(0.8..1.2)).collect(),
            shift: (0..c).map(|_| rng.random_range(-0.1..0.1)).collect(),
        };
        let bn1 = affine(cin, &mut rng);
        let bn2 = affine(cout, &mut rng);
        Self::new(conv1, conv2, bn1, bn2, shortcut, stride)
    }

    pub fn conv1_geometry(&self) -> Geometry {
        Geometry::same(self.conv1.dim().0, self.stride)
    }

    pub fn conv2_geometry(&self) -> Geometry {
        Geometry::same(self.conv2.dim().0, 1)
    }

    pub fn in_channels(&self) -> usize {
        self.conv1.dim().2
    }

    pub fn out_channels(&self) -> usize {
        self.conv2.dim().3
    }

    pub fn trace(&self, x: &FeatureMap) -> Result<BlockTrace> {
        self.trace_with_conv1(x, &self.conv1)
    }

    /// Evaluation with `conv1` replaced.
    pub fn trace_with_conv1(&self, x: &FeatureMap, conv1: &Kernel) -> Result<BlockTrace> {
        if x.dim().3 != self.in_channels() {
            return Err(Error::ShapeMismatch(format!(
                "input has {} channels, block expects {}",
                x.dim().3,
                self.in_channels()
            )));
        }
        let a1 = self.bn1.apply_relu(x);
        let c1 = conv2d(&a1, conv1, None, self.conv1_geometry())?;
        let a2 = self.bn2.apply_relu(&c1);
        let c2 = conv2d(&a2, &self.conv2, self.conv2_bias.as_deref(), self.conv2_geometry())?;
        let sc = match &self.shortcut {
            Shortcut::Identity => x.clone(),
            Shortcut::Projection(p) => conv2d(x, p, None, Geometry { kernel: 1, stride: self.stride, padding: 0 })?,
        };
        let output = &c2 + &sc;
        Ok(BlockTrace { conv2_input: a2, conv2_output: c2, shortcut: sc, output })
    }

    pub fn forward(&self, x: &FeatureMap) -> Result<FeatureMap> {
        Ok(self.trace(x)?.output)
    }

    /// `[0; mat(W2)]` or `[b2; mat(W2)]` once a bias exists.
    pub fn conv2_theta(&self) -> Matrix {
        let mat = kernel_matrix(&self.conv2);
        let mut theta = mat.insert_row(0, 0.0);
        if let Some(b) = &self.conv2_bias {
            for (o, v) in b.iter().enumerate() {
                theta[(0, o)] = *v;
            }
        }
        theta
    }

    pub fn with_conv2_theta(&self, theta: &Matrix) -> Result<Self> {
        let (k, _, cin, cout) = self.conv2.dim();
        let kernel = kernel_from_matrix(&theta.rows(1, theta.nrows() - 1).into_owned(), k, cin, cout)?;
        let mut out = self.clone();
        out.conv2 = kernel;
        out.conv2_bias = Some(theta.row(0).iter().copied().collect());
        Ok(out)
    }

    pub fn with_conv1(&self, conv1: Kernel) -> Result<Self> {
        if conv1.dim() != self.conv1.dim() {
            return Err(Error::ShapeMismatch("replacement conv1 kernel shape".into()));
        }
        let mut out = self.clone();
        out.conv1 = conv1;
        Ok(out)
    }
}

/// Streaming `H = sum Ybar^T Ybar` and `beta = sum Ybar^T (T - Ybar Theta0)`.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalEqAccumulator {
    pub h: Matrix,
    pub beta: Matrix,
    pub rows_seen: usize,
    pub chunk_size: usize,
}

impl NormalEqAccumulator {
    pub fn new(dim: usize, outputs: usize, chunk_size: usize) -> Self {
        Self {
            h: Matrix::zeros(dim, dim),
            beta: Matrix::zeros(dim, outputs),
            rows_seen: 0,
            chunk_size: chunk_size.max(1),
        }
    }

    pub fn dim(&self) -> usize {
        self.h.nrows()
    }
}

/// Adds one chunk. `theta0` is `[bias; mat(W2)]` of the unperturbed conv.
pub fn accumulate_chunk(
    mut acc: NormalEqAccumulator,
    design_chunk: &Matrix,
    target_chunk: &Matrix,
    theta0: &Matrix,
) -> Result<NormalEqAccumulator> {
    if design_chunk.nrows() == 0 {
        return Ok(acc);
    }
    if design_chunk.ncols() != acc.dim() || theta0.nrows() != acc.dim() {
        return Err(Error::ShapeMismatch(format!(
            "chunk has {} columns, accumulator dimension is {}",
            design_chunk.ncols(),
            acc.dim()
        )));
    }
    if target_chunk.nrows() != design_chunk.nrows() || target_chunk.ncols() != acc.beta.ncols() {
        return Err(Error::ShapeMismatch("target chunk does not match design chunk".into()));
    }
    acc.h += design_chunk.tr_mul(design_chunk);
    acc.beta += design_chunk.tr_mul(&(target_chunk - design_chunk * theta0));
    acc.rows_seen += design_chunk.nrows();
    Ok(acc)
}

/// Feeds `design`/`targets` through the accumulator in row chunks.
pub fn accumulate_all(
    dim: usize,
    design: &Matrix,
    targets: &Matrix,
    theta0: &Matrix,
    chunk_size: usize,
) -> Result<NormalEqAccumulator> {
    let mut acc = NormalEqAccumulator::new(dim, targets.ncols(), chunk_size);
    let step = acc.chunk_size;
    let mut start = 0;
    while start < design.nrows() {
        let len = step.min(design.nrows() - start);
        acc = accumulate_chunk(
            acc,
            &design.rows(start, len).into_owned(),
            &targets.rows(start, len).into_owned(),
            theta0,
        )?;
        start += len;
    }
    Ok(acc)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvCorrection {
    pub theta: Matrix,
    pub kernel_delta: Matrix,
    pub bias: Vec<f64>,
}

/// `Theta - Theta0 = (H + lambda I)^{-1} beta`.
pub fn solve_conv_correction(acc: &NormalEqAccumulator, ridge: f64, theta0: &Matrix) -> Result<ConvCorrection> {
    if theta0.shape() != acc.beta.shape() {
        return Err(Error::ShapeMismatch("theta0 does not match accumulator".into()));
    }
    let delta = SpdSystem::new(acc.h.clone(), ridge)?.factor()?.solve(&acc.beta)?;
    let theta = theta0 + &delta;
    Ok(ConvCorrection {
        bias: theta.row(0).iter().copied().collect(),
        kernel_delta: delta.rows(1, delta.nrows() - 1).into_owned(),
        theta,
    })
}

pub fn conv_ridge_objective(design: &Matrix, targets: &Matrix, theta: &Matrix, theta0: &Matrix, ridge: f64) -> f64 {
    (design * theta - targets).norm_squared() + ridge * (theta - theta0).norm_squared()
}

/// Orthonormal basis of the flat (row-major HWIO) kernel space.
pub fn conv_kernel_basis(k: usize, cin: usize, cout: usize, rank: usize, seed: u64) -> Result<Matrix> {
    orthonormal_basis(k * k * cin * cout, rank, seed)
}

/// What the refit `conv2` is asked to reproduce.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvTarget {
    /// Base `conv2` outputs.
    ConvOutput,
    /// Base block outputs, with the shortcut added to the prediction as well.
    BlockOutput,
}

/// Builds the `(design, targets)` pair for refitting `conv2` under a perturbed
/// `conv1`, plus the shortcut offset used by `BlockOutput`.
pub fn conv_correction_system(
    block: &ConvBlockModel,
    perturbed_conv1: &Kernel,
    images: &FeatureMap,
    target: ConvTarget,
) -> Result<(Matrix, Matrix, Matrix)> {
    if images.dim().0 == 0 {
        return Err(Error::EmptyCalibration);
    }
    let base = block.trace(images)?;
    let pert = block.trace_with_conv1(images, perturbed_conv1)?;
    let design = unfold_patches(&pert.conv2_input, block.conv2_geometry())?.matrix;
    let shortcut = flatten_map(&base.shortcut);
    let targets = match target {
        ConvTarget::ConvOutput => flatten_map(&base.conv2_output),
        ConvTarget::BlockOutput => flatten_map(&base.output),
    };
    Ok((design, targets, shortcut))
}

/// Fits the perturbed block's `conv2` (and a new bias) by chunked ridge.
pub fn fit_conv2(
    block: &ConvBlockModel,
    perturbed_conv1: &Kernel,
    images: &FeatureMap,
    ridge: f64,
    chunk_size: usize,
    target: ConvTarget,
) -> Result<ConvCorrection> {
    let (design, targets, shortcut) = conv_correction_system(block, perturbed_conv1, images, target)?;
    let theta0 = block.conv2_theta();
    let adjusted = match target {
        ConvTarget::ConvOutput => targets,
        // block = P theta + shortcut, so the conv part must hit targets - shortcut
        ConvTarget::BlockOutput => &targets - &shortcut,
    };
    let acc = accumulate_all(theta0.nrows(), &design, &adjusted, &theta0, chunk_size)?;
    solve_conv_correction(&acc, ridge, &theta0)
}

/// A stack of blocks; the default has a 3-to-8 projection block and an
/// 8-to-8 identity block.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvNet {
    pub blocks: Vec<ConvBlockModel>,
}

impl ConvNet {
    pub fn random(channels: &[usize], k: usize, seed: u64) -> Result<Self> {
        if channels.len() < 2 {
            return Err(Error::InvalidConfig("need at least two channel counts".into()));
        }
        let blocks = channels
            .windows(2)
            .enumerate()
            .map(|(i, w)| ConvBlockModel::random(w[0], w[1], k, 1, derive_seed(seed, &[i as u64])))
            .collect::<Result<_>>()?;
        Ok(Self { blocks })
    }

    pub fn default_tiny(seed: u64) -> Result<Self> {
        Self::random(&[3, 8, 8], 3, seed)
    }

    /// Inputs to every block followed by the final output.
    pub fn block_inputs(&self, x: &FeatureMap) -> Result<Vec<FeatureMap>> {
        let mut out = vec![x.clone()];
        for b in &self.blocks {
            let next = b.forward(out.last().expect("nonempty"))?;
            out.push(next);
        }
        Ok(out)
    }

    pub fn forward(&self, x: &FeatureMap) -> Result<FeatureMap> {
        Ok(self.block_inputs(x)?.pop().expect("nonempty"))
    }
}

/// Settings for conv members.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvPncConfig {
    pub blocks: Vec<usize>,
    pub ensemble_size: usize,
    pub rank: usize,
    pub scale: f64,
    pub ridge: f64,
    pub chunk_size: usize,
    pub seed: u64,
}

impl Default for ConvPncConfig {
    fn default() -> Self {
        Self {
            blocks: vec![1],
            ensemble_size: 8,
            rank: 20,
            scale: 1.0,
            ridge: 1e-3,
            chunk_size: DEFAULT_CHUNK,
            seed: 0,
        }
    }
}

/// One member's repaired blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvMember {
    pub blocks: Vec<(usize, ConvBlockModel)>,
}

/// Independent per-block repairs, each against base-model targets computed
/// from cached base activations.
pub fn build_conv_members(net: &ConvNet, images: &FeatureMap, config: &ConvPncConfig) -> Result<Vec<ConvMember>> {
    if config.ensemble_size == 0 || config.rank == 0 {
        return Err(Error::InvalidConfig("ensemble size and rank must be >= 1".into()));
    }
    let inputs = net.block_inputs(images)?;
    let mut members = Vec::with_capacity(config.ensemble_size);
    let mut bases = Vec::new();
    for &b in &config.blocks {
        let block = net.blocks.get(b).ok_or_else(|| Error::InvalidLayer {
            index: b,
            reason: format!("network has {} blocks", net.blocks.len()),
        })?;
        let (k, _, cin, cout) = block.conv1.dim();
        bases.push(conv_kernel_basis(k, cin, cout, config.rank, derive_seed(config.seed, &[0xB0, b as u64]))?);
    }
    for m in 0..config.ensemble_size {
        let mut repaired = Vec::new();
        for (j, &b) in config.blocks.iter().enumerate() {
            let block = &net.blocks[b];
            let mut rng = seeded_rng(derive_seed(config.seed, &[0xC0, b as u64, m as u64]));
            let z = gaussian_vector(config.rank, &mut rng);
            let flat = &bases[j] * z * config.scale;
            let conv1 = &block.conv1 + &kernel_from_flat(flat.as_slice(), block.conv1.dim())?;
            let fit = fit_conv2(block, &conv1, &inputs[b], config.ridge, config.chunk_size, ConvTarget::ConvOutput)?;
            repaired.push((b, block.with_conv1(conv1)?.with_conv2_theta(&fit.theta)?));
        }
        members.push(ConvMember { blocks: repaired });
    }
    Ok(members)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorBlock {
    pub shape: [usize; 4],
    pub data: String,
}

impl TensorBlock {
    pub fn from_tensor(t: &Array4<f64>) -> Self {
        let (a, b, c, d) = t.dim();
        Self { shape: [a, b, c, d], data: encode_f64s(t.iter().copied()) }
    }

    pub fn to_tensor(&self) -> Result<Array4<f64>> {
        let v = decode_f64s(&self.data)?;
        let [a, b, c, d] = self.shape;
        Array4::from_shape_vec((a, b, c, d), v).map_err(|e| Error::CorruptFile(format!("tensor block: {e}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvBlockRecord {
    pub conv1: TensorBlock,
    pub conv2: TensorBlock,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub conv2_bias: Option<VectorBlock>,
    pub bn1_scale: VectorBlock,
    pub bn1_shift: VectorBlock,
    pub bn2_scale: VectorBlock,
    pub bn2_shift: VectorBlock,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub projection: Option<TensorBlock>,
    pub stride: usize,
}

/// Conv section of the shared model document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvSection {
    pub blocks: Vec<ConvBlockRecord>,
}

impl ConvNet {
    pub fn to_section(&self) -> ConvSection {
        ConvSection {
            blocks: self
                .blocks
                .iter()
                .map(|b| ConvBlockRecord {
                    conv1: TensorBlock::from_tensor(&b.conv1),
                    conv2: TensorBlock::from_tensor(&b.conv2),
                    conv2_bias: b.conv2_bias.as_deref().map(VectorBlock::from_slice),
                    bn1_scale: VectorBlock::from_slice(&b.bn1.scale),
                    bn1_shift: VectorBlock::from_slice(&b.bn1.shift),
                    bn2_scale: VectorBlock::from_slice(&b.bn2.scale),
                    bn2_shift: VectorBlock::from_slice(&b.bn2.shift),
                    projection: match &b.shortcut {
                        Shortcut::Identity => None,
                        Shortcut::Projection(p) => Some(TensorBlock::from_tensor(p)),
                    },
                    stride: b.stride,
                })
                .collect(),
        }
    }

    pub fn from_section(section: &ConvSection) -> Result<Self> {
        let blocks = section
            .blocks
            .iter()
            .map(|r| {
                let shortcut = match &r.projection {
                    None => Shortcut::Identity,
                    Some(p) => Shortcut::Projection(p.to_tensor()?),
                };
                let mut b = ConvBlockModel::new(
                    r.conv1.to_tensor()?,
                    r.conv2.to_tensor()?,
                    ChannelAffine { scale: r.bn1_scale.to_vec()?, shift: r.bn1_shift.to_vec()? },
                    ChannelAffine { scale: r.bn2_scale.to_vec()?, shift: r.bn2_shift.to_vec()? },
                    shortcut,
                    r.stride,
                )?;
                b.conv2_bias = r.conv2_bias.as_ref().map(|v| v.to_vec()).transpose()?;
                Ok(b)
            })
            .collect::<Result<_>>()?;
        Ok(Self { blocks })
    }

    pub fn to_text(&self) -> String {
        let mut doc = crate::net::ModelDocument::empty();
        doc.conv = Some(self.to_section());
        doc.to_text()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let doc = crate::net::ModelDocument::from_text(text)?;
        let section = doc.conv.ok_or_else(|| Error::CorruptFile("model file has no conv section".into()))?;
        Self::from_section(&section)
    }
}

/// Seeded synthetic images, `N x H x W x C`, smooth random fields plus noise.
pub fn synthetic_images(n: usize, size: usize, channels: usize, seed: u64) -> FeatureMap {
    let mut rng = seeded_rng(seed);
    let coarse = gaussian_matrix(n * channels, 4, &mut rng);
    let noise = gaussian_matrix(n, size * size * channels, &mut rng);
    FeatureMap::from_shape_fn((n, size, size, channels), |(b, i, j, c)| {
        let row = b * channels + c;
        let (fi, fj) = (i as f64 / size as f64, j as f64 / size as f64);
        coarse[(row, 0)]
            + coarse[(row, 1)] * (std::f64::consts::PI * fi).cos()
            + coarse[(row, 2)] * (std::f64::consts::PI * fj).sin()
            + coarse[(row, 3)] * fi * fj
            + 0.3 * noise[(b, (i * size + j) * channels + c)]
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand_map(n: usize, h: usize, w: usize, c: usize, seed: u64) -> FeatureMap {
        let g = gaussian_matrix(1, n * h * w * c, &mut seeded_rng(seed));
        FeatureMap::from_shape_vec((n, h, w, c), g.as_slice().to_vec()).unwrap()
    }

    fn rand_kernel(k: usize, cin: usize, cout: usize, seed: u64) -> Kernel {
        let g = gaussian_matrix(1, k * k * cin * cout, &mut seeded_rng(seed));
        kernel_from_flat(g.as_slice(), (k, k, cin, cout)).unwrap()
    }

    /// Independent convolution over an OIHW copy of the kernel.
    fn naive_conv(x: &FeatureMap, w_hwio: &Kernel, s: usize, p: usize) -> FeatureMap {
        let (n, h, w, c) = x.dim();
        let (k, _, _, o) = w_hwio.dim();
        let oihw = Array4::from_shape_fn((o, c, k, k), |(oo, cc, u, v)| w_hwio[[u, v, cc, oo]]);
        let ho = (h + 2 * p - k) / s + 1;
        let wo = (w + 2 * p - k) / s + 1;
        let mut out = FeatureMap::zeros((n, ho, wo, o));
        for b in 0..n {
            for oo in 0..o {
                for i in 0..ho {
                    for j in 0..wo {
                        let mut acc = 0.0;
                        for cc in 0..c {
                            for u in 0..k {
                                for v in 0..k {
                                    let ii = (i * s + u) as isize - p as isize;
                                    let jj = (j * s + v) as isize - p as isize;
                                    if ii >= 0 && jj >= 0 && (ii as usize) < h && (jj as usize) < w {
                                        acc += x[[b, ii as usize, jj as usize, cc]] * oihw[[oo, cc, u, v]];
                                    }
                                }
                            }
                        }
                        out[[b, i, j, oo]] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn one_by_one_patches_copy_the_map() {
        let x = rand_map(2, 3, 4, 5, 1);
        let d = unfold_patches(&x, Geometry { kernel: 1, stride: 1, padding: 0 }).unwrap();
        assert!(d.matrix.column(0).iter().all(|v| *v == 1.0));
        assert_eq!(d.matrix.columns(1, 5).into_owned(), flatten_map(&x));
    }

    #[test]
    fn full_size_kernel_gives_one_row() {
        let x = rand_map(1, 3, 3, 2, 2);
        let d = unfold_patches(&x, Geometry { kernel: 3, stride: 1, padding: 0 }).unwrap();
        assert_eq!(d.matrix.shape(), (1, 1 + 2 * 9));
        for c in 0..2 {
            for u in 0..3 {
                for v in 0..3 {
                    assert_eq!(d.matrix[(0, 1 + c * 9 + u * 3 + v)], x[[0, u, v, c]]);
                }
            }
        }
    }

    #[test]
    fn patch_product_matches_naive_convolution() {
        let x = rand_map(2, 6, 6, 3, 3);
        let w = rand_kernel(3, 3, 4, 4);
        let g = Geometry { kernel: 3, stride: 1, padding: 0 };
        let d = unfold_patches(&x, g).unwrap();
        let prod = d.matrix.columns(1, 27) * kernel_matrix(&w);
        let naive = flatten_map(&naive_conv(&x, &w, 1, 0));
        assert!((&prod - &naive).amax() < 1e-10);
        let direct = flatten_map(&conv2d(&x, &w, None, g).unwrap());
        assert!((direct - naive).amax() < 1e-10);
    }

    #[test]
    fn patch_identity_over_strides_and_padding() {
        for t in 0..20u64 {
            let s = 1 + (t % 2) as usize;
            let p = (t % 3 == 0) as usize;
            let x = rand_map(1 + (t % 2) as usize, 5 + (t % 3) as usize, 6, 2, 100 + t);
            let w = rand_kernel(3, 2, 3, 200 + t);
            let g = Geometry { kernel: 3, stride: s, padding: p };
            let d = unfold_patches(&x, g).unwrap();
            let prod = d.matrix.columns(1, 18) * kernel_matrix(&w);
            let naive = flatten_map(&naive_conv(&x, &w, s, p));
            assert!((&prod - &naive).amax() <= 1e-9 * naive.amax().max(1.0));
        }
    }

    #[test]
    fn bad_geometry_is_rejected() {
        let x = rand_map(1, 2, 2, 1, 0);
        assert!(matches!(
            unfold_patches(&x, Geometry { kernel: 3, stride: 1, padding: 0 }),
            Err(Error::InvalidGeometry(_))
        ));
        assert!(matches!(
            unfold_patches(&x, Geometry { kernel: 1, stride: 0, padding: 0 }),
            Err(Error::InvalidGeometry(_))
        ));
    }

    #[test]
    fn kernel_matrix_round_trip() {
        let w = rand_kernel(3, 2, 5, 9);
        let back = kernel_from_matrix(&kernel_matrix(&w), 3, 2, 5).unwrap();
        assert_eq!(back, w);
        let flat = flatten_kernel(&w);
        assert_eq!(kernel_from_flat(&flat, w.dim()).unwrap(), w);
    }

    fn random_chunks(seed: u64) -> (Matrix, Matrix, Matrix) {
        let mut rng = seeded_rng(seed);
        let y = crate::numerics::augment_ones(&gaussian_matrix(150, 9, &mut rng));
        let t = gaussian_matrix(150, 4, &mut rng);
        let theta0 = gaussian_matrix(10, 4, &mut rng).insert_row(0, 0.0).remove_row(1);
        (y, t, theta0)
    }

    #[test]
    fn empty_chunk_is_a_no_op() {
        let acc = NormalEqAccumulator::new(3, 2, 8);
        let out =
            accumulate_chunk(acc.clone(), &Matrix::zeros(0, 3), &Matrix::zeros(0, 2), &Matrix::zeros(3, 2)).unwrap();
        assert_eq!(out, acc);
    }

    #[test]
    fn chunking_does_not_change_normal_equations() {
        let (y, t, theta0) = random_chunks(1);
        let whole = accumulate_all(10, &y, &t, &theta0, 150).unwrap();
        assert!((&whole.h - y.tr_mul(&y)).amax() < 1e-12);
        for chunk in [1, 7, 64] {
            let acc = accumulate_all(10, &y, &t, &theta0, chunk).unwrap();
            assert_eq!(acc.rows_seen, 150);
            assert!((&acc.h - &whole.h).norm() <= 1e-10 * whole.h.norm());
            assert!((&acc.beta - &whole.beta).norm() <= 1e-10 * whole.beta.norm());
        }
        let wrong = accumulate_chunk(NormalEqAccumulator::new(4, 4, 1), &y, &t, &theta0);
        assert!(matches!(wrong, Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn unperturbed_block_needs_no_correction() {
        let block = ConvBlockModel::random(4, 4, 3, 1, 3).unwrap();
        let x = synthetic_images(3, 6, 4, 4);
        let fit = fit_conv2(&block, &block.conv1, &x, 1e-3, 16, ConvTarget::ConvOutput).unwrap();
        assert!(fit.kernel_delta.amax() < 1e-10);
        assert!(fit.bias.iter().all(|b| b.abs() < 1e-10));
    }

    #[test]
    fn huge_ridge_recovers_base_branch() {
        let block = ConvBlockModel::random(3, 4, 3, 1, 5).unwrap();
        let x = synthetic_images(2, 6, 3, 6);
        let pert = &block.conv1 + &rand_kernel(3, 3, 4, 7).mapv(|v| 0.3 * v);
        let (design, targets, _) = conv_correction_system(&block, &pert, &x, ConvTarget::ConvOutput).unwrap();
        let theta0 = block.conv2_theta();
        let acc = accumulate_all(theta0.nrows(), &design, &targets, &theta0, 64).unwrap();
        let lambda = 1e9;
        let fit = solve_conv_correction(&acc, lambda, &theta0).unwrap();
        let moved = (&fit.theta - &theta0).norm();
        assert!(moved <= acc.beta.norm() / lambda);
        assert!(moved <= 1e-6);
    }

    #[test]
    fn shortcut_targets_give_same_parameters() {
        for (cin, cout) in [(4, 4), (3, 5)] {
            let block = ConvBlockModel::random(cin, cout, 3, 1, 8).unwrap();
            let x = synthetic_images(2, 6, cin, 9);
            let pert = &block.conv1 + &rand_kernel(3, cin, cout, 10).mapv(|v| 0.2 * v);
            let a = fit_conv2(&block, &pert, &x, 1e-3, 64, ConvTarget::ConvOutput).unwrap();
            let b = fit_conv2(&block, &pert, &x, 1e-3, 64, ConvTarget::BlockOutput).unwrap();
            assert!((&a.theta - &b.theta).amax() < 1e-9);
        }
    }

    #[test]
    fn zero_scale_members_leave_block_unchanged() {
        let net = ConvNet::default_tiny(1).unwrap();
        let x = synthetic_images(3, 8, 3, 2);
        let cfg = ConvPncConfig { ensemble_size: 2, scale: 0.0, rank: 5, ..ConvPncConfig::default() };
        let members = build_conv_members(&net, &x, &cfg).unwrap();
        let inputs = net.block_inputs(&x).unwrap();
        for m in &members {
            let (b, block) = &m.blocks[0];
            let out = block.forward(&inputs[*b]).unwrap();
            assert!((&out - &inputs[*b + 1]).iter().fold(0.0_f64, |a, v| a.max(v.abs())) < 1e-9);
        }
    }

    #[test]
    fn correction_moves_block_back_toward_base() {
        let net = ConvNet::default_tiny(3).unwrap();
        let x = synthetic_images(4, 8, 3, 4);
        let inputs = net.block_inputs(&x).unwrap();
        for sigma in [0.25, 0.5, 1.0] {
            let cfg = ConvPncConfig { ensemble_size: 3, scale: sigma, rank: 10, ..ConvPncConfig::default() };
            let members = build_conv_members(&net, &x, &cfg).unwrap();
            for m in &members {
                let (b, fixed) = &m.blocks[0];
                let raw = net.blocks[*b].with_conv1(fixed.conv1.clone()).unwrap();
                let base = &inputs[*b + 1];
                let dist = |o: &FeatureMap| {
                    let d = flatten_map(&(o - base));
                    d.row_iter().map(|r| r.norm()).sum::<f64>() / d.nrows() as f64
                };
                let corrected = dist(&fixed.forward(&inputs[*b]).unwrap());
                let uncorrected = dist(&raw.forward(&inputs[*b]).unwrap());
                assert!(corrected < uncorrected, "sigma {sigma}: {corrected} vs {uncorrected}");
            }
        }
    }

    #[test]
    fn basis_examples() {
        let full = conv_kernel_basis(1, 2, 2, 4, 0).unwrap();
        assert!((full.transpose() * &full - Matrix::identity(4, 4)).amax() < 1e-10);
        assert!((&full * full.transpose() - Matrix::identity(4, 4)).amax() < 1e-10);
        assert!(matches!(conv_kernel_basis(1, 2, 2, 5, 0), Err(Error::InvalidRank { .. })));
    }

    #[test]
    fn conv_section_round_trip() {
        let mut net = ConvNet::default_tiny(4).unwrap();
        net.blocks[1].conv2_bias = Some(vec![0.5; 8]);
        let back = ConvNet::from_text(&net.to_text()).unwrap();
        assert_eq!(back, net);
    }
}
