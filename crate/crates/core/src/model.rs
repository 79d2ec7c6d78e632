//! The probe classifier.
//!
//! `conv(3×3) → ReLU → maxpool2 → conv(3×3) → ReLU → maxpool2 → dense → ReLU → dense`,
//! trained from scratch with momentum SGD. Convolutions are lowered to GEMM
//! through im2col over a whole minibatch.
//!
//! The network code is generic over [`Real`] so the same forward/backward
//! path runs in `f32` for training and in `f64` for gradient checking.
//!
//! Mean losses are accumulated exactly: each per-sample cross-entropy is
//! quantized to `2⁻²⁴` and summed as an integer, which makes the mean
//! independent of batching, evaluation order and dataset duplication.

use std::fmt::Debug;
use std::fs;
use std::path::Path;

use num_traits::Float;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::imageops::{affine_transform, Image};
use crate::policy::{apply_sub_policy, Partners, PolicySet, SubPolicy};
use crate::rng::{self, tag, Stream};

const CHECKPOINT_MAGIC: &[u8; 4] = b"FAAM";
const CHECKPOINT_VERSION: u32 = 1;
const EVAL_BATCH: usize = 64;
const LOSS_QUANTUM: f64 = (1u64 << 24) as f64;

/// Floating-point type the network can run in.
pub trait Real: Float + Debug + Default + Send + Sync + 'static {
    /// `C ← α·A·B + β·C` on strided row/column layouts.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );

    fn from_f64(v: f64) -> Self;

    fn to_f64(self) -> f64;
}

fn span(rows: usize, cols: usize, rs: isize, cs: isize) -> usize {
    if rows == 0 || cols == 0 {
        0
    } else {
        (rows - 1) * rs as usize + (cols - 1) * cs as usize + 1
    }
}

macro_rules! impl_real {
    ($t:ty, $gemm:path) => {
        impl Real for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                beta: Self,
                c: &mut [Self],
                rsc: isize,
                csc: isize,
            ) {
                assert!(rsa >= 0 && csa >= 0 && rsb >= 0 && csb >= 0 && rsc >= 0 && csc >= 0);
                assert!(a.len() >= span(m, k, rsa, csa));
                assert!(b.len() >= span(k, n, rsb, csb));
                assert!(c.len() >= span(m, n, rsc, csc));
                // SAFETY: every index reachable from the strides is in bounds (checked above),
                // and `c` is exclusively borrowed.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        rsc,
                        csc,
                    )
                }
            }

            fn from_f64(v: f64) -> Self {
                v as $t
            }

            fn to_f64(self) -> f64 {
                self as f64
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

/// Shape of the probe network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Architecture {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub conv1: usize,
    pub conv2: usize,
    pub kernel: usize,
    pub hidden: usize,
    pub classes: usize,
}

impl Architecture {
    /// Default probe: 16 and 32 filters of 3×3, 64 hidden units.
    pub fn probe(height: usize, width: usize, channels: usize, classes: usize) -> Self {
        Self {
            height,
            width,
            channels,
            conv1: 16,
            conv2: 32,
            kernel: 3,
            hidden: 64,
            classes,
        }
    }

    pub fn for_dataset(data: &Dataset) -> Self {
        let (h, w, c) = data.shape();
        Self::probe(h, w, c, data.class_count())
    }

    pub fn validate(&self) -> Result<()> {
        if self.height < 4 || self.width < 4 {
            return Err(Error::Argument(format!(
                "probe needs images of at least 4x4, got {}x{}",
                self.height, self.width
            )));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::Argument("kernel size must be odd".into()));
        }
        if [self.channels, self.conv1, self.conv2, self.hidden].contains(&0) || self.classes < 2 {
            return Err(Error::Argument(format!("degenerate architecture {self:?}")));
        }
        Ok(())
    }

    fn mid(&self) -> (usize, usize) {
        (self.height / 2, self.width / 2)
    }

    fn low(&self) -> (usize, usize) {
        (self.height / 4, self.width / 4)
    }

    fn flat(&self) -> usize {
        let (h, w) = self.low();
        self.conv2 * h * w
    }

    /// Lengths of the eight tensors, in storage order.
    pub fn tensor_lens(&self) -> [usize; 8] {
        let kk = self.kernel * self.kernel;
        [
            self.conv1 * self.channels * kk,
            self.conv1,
            self.conv2 * self.conv1 * kk,
            self.conv2,
            self.hidden * self.flat(),
            self.hidden,
            self.classes * self.hidden,
            self.classes,
        ]
    }

    fn fan_ins(&self) -> [usize; 4] {
        let kk = self.kernel * self.kernel;
        [self.channels * kk, self.conv1 * kk, self.flat(), self.hidden]
    }

    fn accepts(&self, img: &Image) -> bool {
        img.height() == self.height && img.width() == self.width && img.channels() == self.channels
    }
}

/// Network tensors in storage order:
/// conv1 weights, conv1 bias, conv2 weights, conv2 bias, dense1 weights,
/// dense1 bias, dense2 weights, dense2 bias. Weights are row-major `[out, in]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Weights<T>(pub Vec<Vec<T>>);

impl<T: Real> Weights<T> {
    pub fn zeros(arch: &Architecture) -> Self {
        Weights(arch.tensor_lens().iter().map(|&n| vec![T::zero(); n]).collect())
    }

    pub fn cast<U: Real>(&self) -> Weights<U> {
        Weights(
            self.0
                .iter()
                .map(|t| t.iter().map(|&v| U::from_f64(v.to_f64())).collect())
                .collect(),
        )
    }

    fn is_finite(&self) -> bool {
        self.0.iter().flatten().all(|v| v.is_finite())
    }
}

/// Trained (or freshly initialized) probe parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub arch: Architecture,
    pub weights: Weights<f32>,
    /// Number of SGD steps taken so far.
    pub steps: u64,
}

impl ModelParams {
    /// He-scaled uniform weights, zero biases.
    pub fn init(arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut stream = rng::stream(seed, &[tag::INIT]);
        let mut weights = Weights::<f32>::zeros(&arch);
        for (layer, fan_in) in arch.fan_ins().into_iter().enumerate() {
            let bound = (6.0 / fan_in as f64).sqrt();
            for w in &mut weights.0[2 * layer] {
                *w = stream.random_range(-bound..bound) as f32;
            }
        }
        Ok(Self {
            arch,
            weights,
            steps: 0,
        })
    }

    /// SHA-256 of the architecture and every weight, hex-encoded.
    pub fn param_hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(format!("{:?}", self.arch).as_bytes());
        for t in &self.weights.0 {
            for v in t {
                hasher.update(v.to_le_bytes());
            }
        }
        hex::encode(hasher.finalize())
    }

    /// Versioned binary checkpoint: `FAAM`, version, architecture, step
    /// counter, then each tensor as a `u64` length and little-endian `f32`s.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let a = &self.arch;
        for v in [a.height, a.width, a.channels, a.conv1, a.conv2, a.kernel, a.hidden, a.classes] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.extend_from_slice(&self.steps.to_le_bytes());
        out.extend_from_slice(&(self.weights.0.len() as u32).to_le_bytes());
        for t in &self.weights.0 {
            out.extend_from_slice(&(t.len() as u64).to_le_bytes());
            for v in t {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(r.error(0, "missing FAAM magic"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(r.error(4, &format!("unsupported checkpoint version {version}")));
        }
        let mut dims = [0usize; 8];
        for d in &mut dims {
            *d = r.u32()? as usize;
        }
        let [height, width, channels, conv1, conv2, kernel, hidden, classes] = dims;
        let arch = Architecture {
            height,
            width,
            channels,
            conv1,
            conv2,
            kernel,
            hidden,
            classes,
        };
        arch.validate().map_err(|e| r.error(8, &e.to_string()))?;
        let steps = r.u64()?;
        let count_at = r.pos;
        let count = r.u32()? as usize;
        let lens = arch.tensor_lens();
        if count != lens.len() {
            return Err(r.error(count_at, &format!("expected {} tensors, found {count}", lens.len())));
        }
        let mut tensors = Vec::with_capacity(count);
        for expected in lens {
            let at = r.pos;
            let len = r.u64()? as usize;
            if len != expected {
                return Err(r.error(at, &format!("tensor length {len}, architecture needs {expected}")));
            }
            let raw = r.take(len * 4)?;
            tensors.push(
                raw.chunks_exact(4)
                    .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                    .collect(),
            );
        }
        if r.pos != bytes.len() {
            return Err(r.error(r.pos, "trailing bytes after last tensor"));
        }
        Ok(Self {
            arch,
            weights: Weights(tensors),
            steps,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Reader<'_> {
    fn error(&self, offset: usize, message: &str) -> Error {
        Error::Parse {
            path: self.path.to_path_buf(),
            offset: offset as u64,
            message: message.to_string(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(self.error(self.bytes.len(), "truncated checkpoint"));
        };
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Activations kept from the forward pass for backpropagation.
struct Forward<T> {
    batch: usize,
    cols1: Vec<T>,
    act1: Vec<T>,
    arg1: Vec<u32>,
    cols2: Vec<T>,
    act2: Vec<T>,
    arg2: Vec<u32>,
    flat: Vec<T>,
    hidden: Vec<T>,
    logits: Vec<T>,
}

/// Lays `images` out as `[C, B·H·W]` scaled to `[0, 1]`.
fn input_planes<T: Real>(arch: &Architecture, images: &[&Image]) -> Vec<T> {
    let hw = arch.height * arch.width;
    let c = arch.channels;
    let b = images.len();
    let scale = T::from_f64(1.0 / 255.0);
    let mut out = vec![T::zero(); c * b * hw];
    for (bi, img) in images.iter().enumerate() {
        for (i, &v) in img.pixels().iter().enumerate() {
            let (p, ch) = (i / c, i % c);
            out[ch * b * hw + bi * hw + p] = T::from_f64(f64::from(v)) * scale;
        }
    }
    out
}

/// `[C, B·H·W]` → `[C·k·k, B·H·W]` with zero "same" padding.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Real>(input: &[T], c: usize, b: usize, h: usize, w: usize, k: usize) -> Vec<T> {
    let n = b * h * w;
    let pad = (k / 2) as isize;
    let mut cols = vec![T::zero(); c * k * k * n];
    for ch in 0..c {
        let plane = &input[ch * n..(ch + 1) * n];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((ch * k + ky) * k + kx) * n..][..n];
                let (dy, dx) = (ky as isize - pad, kx as isize - pad);
                for bi in 0..b {
                    for y in 0..h {
                        let sy = y as isize + dy;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let dst = bi * h * w + y * w;
                        let src = bi * h * w + sy as usize * w;
                        for x in 0..w {
                            let sx = x as isize + dx;
                            if sx >= 0 && sx < w as isize {
                                row[dst + x] = plane[src + sx as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`].
fn col2im<T: Real>(cols: &[T], c: usize, b: usize, h: usize, w: usize, k: usize) -> Vec<T> {
    let n = b * h * w;
    let pad = (k / 2) as isize;
    let mut out = vec![T::zero(); c * n];
    for ch in 0..c {
        let plane = &mut out[ch * n..(ch + 1) * n];
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((ch * k + ky) * k + kx) * n..][..n];
                let (dy, dx) = (ky as isize - pad, kx as isize - pad);
                for bi in 0..b {
                    for y in 0..h {
                        let sy = y as isize + dy;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let dst = bi * h * w + y * w;
                        let src = bi * h * w + sy as usize * w;
                        for x in 0..w {
                            let sx = x as isize + dx;
                            if sx >= 0 && sx < w as isize {
                                plane[src + sx as usize] = plane[src + sx as usize] + row[dst + x];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// `out[f, :] = relu(W[f, :] · cols + bias[f])`.
fn conv_relu<T: Real>(weights: &[T], bias: &[T], cols: &[T], filters: usize, depth: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); filters * n];
    for (f, row) in out.chunks_exact_mut(n).enumerate() {
        row.fill(bias[f]);
    }
    T::gemm(
        filters, depth, n, T::one(), weights, depth as isize, 1, cols, n as isize, 1, T::one(), &mut out, n as isize, 1,
    );
    for v in &mut out {
        *v = v.max(T::zero());
    }
    out
}

/// 2×2 max pooling of `[F, B·H·W]` (floor), returning values and source positions.
fn maxpool<T: Real>(input: &[T], f: usize, b: usize, h: usize, w: usize) -> (Vec<T>, Vec<u32>) {
    let (ho, wo) = (h / 2, w / 2);
    let n_in = b * h * w;
    let n_out = b * ho * wo;
    let mut out = vec![T::zero(); f * n_out];
    let mut arg = vec![0u32; f * n_out];
    for fi in 0..f {
        let plane = &input[fi * n_in..(fi + 1) * n_in];
        for bi in 0..b {
            for y in 0..ho {
                for x in 0..wo {
                    let base = bi * h * w + 2 * y * w + 2 * x;
                    let mut best = base;
                    for cand in [base + 1, base + w, base + w + 1] {
                        if plane[cand] > plane[best] {
                            best = cand;
                        }
                    }
                    let o = fi * n_out + bi * ho * wo + y * wo + x;
                    out[o] = plane[best];
                    arg[o] = best as u32;
                }
            }
        }
    }
    (out, arg)
}

fn unpool<T: Real>(grad: &[T], arg: &[u32], f: usize, n_in: usize) -> Vec<T> {
    let n_out = grad.len() / f;
    let mut out = vec![T::zero(); f * n_in];
    for fi in 0..f {
        for j in 0..n_out {
            let idx = fi * n_in + arg[fi * n_out + j] as usize;
            out[idx] = out[idx] + grad[fi * n_out + j];
        }
    }
    out
}

fn dense<T: Real>(weights: &[T], bias: &[T], input: &[T], out_dim: usize, in_dim: usize, b: usize, relu: bool) -> Vec<T> {
    let mut out = vec![T::zero(); out_dim * b];
    for (o, row) in out.chunks_exact_mut(b).enumerate() {
        row.fill(bias[o]);
    }
    T::gemm(
        out_dim, in_dim, b, T::one(), weights, in_dim as isize, 1, input, b as isize, 1, T::one(), &mut out, b as isize, 1,
    );
    if relu {
        for v in &mut out {
            *v = v.max(T::zero());
        }
    }
    out
}

fn forward<T: Real>(arch: &Architecture, w: &Weights<T>, images: &[&Image]) -> Forward<T> {
    let b = images.len();
    let k = arch.kernel;
    let (h1, w1) = (arch.height, arch.width);
    let (h2, w2) = arch.mid();
    let (h3, w3) = arch.low();
    let x = input_planes::<T>(arch, images);

    let cols1 = im2col(&x, arch.channels, b, h1, w1, k);
    let act1 = conv_relu(&w.0[0], &w.0[1], &cols1, arch.conv1, arch.channels * k * k, b * h1 * w1);
    let (pool1, arg1) = maxpool(&act1, arch.conv1, b, h1, w1);

    let cols2 = im2col(&pool1, arch.conv1, b, h2, w2, k);
    let act2 = conv_relu(&w.0[2], &w.0[3], &cols2, arch.conv2, arch.conv1 * k * k, b * h2 * w2);
    let (pool2, arg2) = maxpool(&act2, arch.conv2, b, h2, w2);

    let p = h3 * w3;
    let d = arch.flat();
    let mut flat = vec![T::zero(); d * b];
    for f in 0..arch.conv2 {
        for bi in 0..b {
            for q in 0..p {
                flat[(f * p + q) * b + bi] = pool2[f * b * p + bi * p + q];
            }
        }
    }
    let hidden = dense(&w.0[4], &w.0[5], &flat, arch.hidden, d, b, true);
    let logits = dense(&w.0[6], &w.0[7], &hidden, arch.classes, arch.hidden, b, false);
    Forward {
        batch: b,
        cols1,
        act1,
        arg1,
        cols2,
        act2,
        arg2,
        flat,
        hidden,
        logits,
    }
}

/// Cross-entropy of column `bi` of `[classes, B]` logits, with its softmax.
fn cross_entropy<T: Real>(logits: &[T], classes: usize, b: usize, bi: usize, label: usize) -> (f64, Vec<f64>) {
    let z: Vec<f64> = (0..classes).map(|c| logits[c * b + bi].to_f64()).collect();
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = z.iter().map(|v| (v - max).exp()).sum();
    let log_norm = max + sum.ln();
    let probs = z.iter().map(|v| (v - log_norm).exp()).collect();
    (log_norm - z[label], probs)
}

/// `dW = dOut · Inᵀ` (`[out, n]` × `[in, n]`ᵀ) and bias gradient as row sums.
fn weight_grads<T: Real>(d_out: &[T], input: &[T], out_dim: usize, in_dim: usize, n: usize, grads: &mut [Vec<T>]) {
    let (gw, gb) = grads.split_at_mut(1);
    let (gw, gb) = (&mut gw[0], &mut gb[0]);
    T::gemm(
        out_dim, n, in_dim, T::one(), d_out, n as isize, 1, input, 1, n as isize, T::one(), gw, in_dim as isize, 1,
    );
    for (o, row) in d_out.chunks_exact(n).enumerate() {
        gb[o] = row.iter().fold(gb[o], |acc, &v| acc + v);
    }
}

/// `dIn = Wᵀ · dOut` (`[out, in]`ᵀ × `[out, n]`).
fn input_grads<T: Real>(weights: &[T], d_out: &[T], out_dim: usize, in_dim: usize, n: usize) -> Vec<T> {
    let mut d_in = vec![T::zero(); in_dim * n];
    T::gemm(
        in_dim, out_dim, n, T::one(), weights, 1, in_dim as isize, d_out, n as isize, 1, T::zero(), &mut d_in, n as isize, 1,
    );
    d_in
}

fn relu_mask<T: Real>(grad: &mut [T], act: &[T]) {
    for (g, &a) in grad.iter_mut().zip(act) {
        if a <= T::zero() {
            *g = T::zero();
        }
    }
}

fn backward<T: Real>(arch: &Architecture, w: &Weights<T>, fwd: &Forward<T>, mut d_logits: Vec<T>) -> Weights<T> {
    let b = fwd.batch;
    let k = arch.kernel;
    let (h1, w1) = (arch.height, arch.width);
    let (h2, w2) = arch.mid();
    let (h3, w3) = arch.low();
    let d = arch.flat();
    let mut g = Weights::<T>::zeros(arch);
    let mut gs = std::mem::take(&mut g.0);
    let (g01, rest) = gs.split_at_mut(2);
    let (g23, rest) = rest.split_at_mut(2);
    let (g45, g67) = rest.split_at_mut(2);

    weight_grads(&d_logits, &fwd.hidden, arch.classes, arch.hidden, b, g67);
    let mut d_hidden = input_grads(&w.0[6], &d_logits, arch.classes, arch.hidden, b);
    d_logits.clear();
    relu_mask(&mut d_hidden, &fwd.hidden);

    weight_grads(&d_hidden, &fwd.flat, arch.hidden, d, b, g45);
    let d_flat = input_grads(&w.0[4], &d_hidden, arch.hidden, d, b);

    let p = h3 * w3;
    let mut d_pool2 = vec![T::zero(); arch.conv2 * b * p];
    for f in 0..arch.conv2 {
        for bi in 0..b {
            for q in 0..p {
                d_pool2[f * b * p + bi * p + q] = d_flat[(f * p + q) * b + bi];
            }
        }
    }
    let n2 = b * h2 * w2;
    let mut d_act2 = unpool(&d_pool2, &fwd.arg2, arch.conv2, n2);
    relu_mask(&mut d_act2, &fwd.act2);
    let depth2 = arch.conv1 * k * k;
    weight_grads(&d_act2, &fwd.cols2, arch.conv2, depth2, n2, g23);
    let d_cols2 = input_grads(&w.0[2], &d_act2, arch.conv2, depth2, n2);
    let d_pool1 = col2im(&d_cols2, arch.conv1, b, h2, w2, k);

    let n1 = b * h1 * w1;
    let mut d_act1 = unpool(&d_pool1, &fwd.arg1, arch.conv1, n1);
    relu_mask(&mut d_act1, &fwd.act1);
    let depth1 = arch.channels * k * k;
    weight_grads(&d_act1, &fwd.cols1, arch.conv1, depth1, n1, g01);

    g.0 = gs;
    g
}

fn check_batch(arch: &Architecture, images: &[&Image], need_labels: bool) -> Result<()> {
    for img in images {
        if !arch.accepts(img) {
            return Err(Error::Argument(format!(
                "image is {}x{}x{}, model expects {}x{}x{}",
                img.height(),
                img.width(),
                img.channels(),
                arch.height,
                arch.width,
                arch.channels
            )));
        }
        if need_labels && img.label() as usize >= arch.classes {
            return Err(Error::Argument(format!(
                "label {} out of range for {} classes",
                img.label(),
                arch.classes
            )));
        }
    }
    Ok(())
}

/// Mean cross-entropy over a batch and its gradient, in precision `T`.
///
/// Unquantized; intended for gradient checks and custom training loops.
pub fn batch_loss_and_grad<T: Real>(arch: &Architecture, weights: &Weights<T>, images: &[&Image]) -> Result<(f64, Weights<T>)> {
    if images.is_empty() {
        return Err(Error::Argument("empty batch".into()));
    }
    check_batch(arch, images, true)?;
    let fwd = forward(arch, weights, images);
    let b = images.len();
    let mut total = 0.0;
    let mut d_logits = vec![T::zero(); arch.classes * b];
    for (bi, img) in images.iter().enumerate() {
        let label = img.label() as usize;
        let (l, probs) = cross_entropy(&fwd.logits, arch.classes, b, bi, label);
        total += l;
        for (c, p) in probs.into_iter().enumerate() {
            let target = if c == label { 1.0 } else { 0.0 };
            d_logits[c * b + bi] = T::from_f64((p - target) / b as f64);
        }
    }
    let grads = backward(arch, weights, &fwd, d_logits);
    Ok((total / b as f64, grads))
}

/// Mean cross-entropy over a batch in precision `T`, without gradients.
pub fn batch_loss<T: Real>(arch: &Architecture, weights: &Weights<T>, images: &[&Image]) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::Argument("empty batch".into()));
    }
    check_batch(arch, images, true)?;
    let fwd = forward(arch, weights, images);
    let b = images.len();
    let total: f64 = images
        .iter()
        .enumerate()
        .map(|(bi, img)| cross_entropy(&fwd.logits, arch.classes, b, bi, img.label() as usize).0)
        .sum();
    Ok(total / b as f64)
}

/// Loss and accuracy of a model on a set of images.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub loss: f64,
    pub accuracy: f64,
    pub count: usize,
}

#[derive(Default)]
struct Tally {
    quanta: i64,
    correct: usize,
    count: usize,
}

impl Tally {
    fn add_batch(&mut self, params: &ModelParams, batch: &[Image]) -> Result<()> {
        let refs: Vec<&Image> = batch.iter().collect();
        check_batch(&params.arch, &refs, true)?;
        let fwd = forward(&params.arch, &params.weights, &refs);
        let (classes, b) = (params.arch.classes, refs.len());
        for (bi, img) in refs.iter().enumerate() {
            let label = img.label() as usize;
            let (l, probs) = cross_entropy(&fwd.logits, classes, b, bi, label);
            if !l.is_finite() {
                return Err(Error::Numeric(format!("non-finite loss {l} during evaluation")));
            }
            self.quanta += (l * LOSS_QUANTUM).round() as i64;
            self.correct += usize::from(argmax(&probs) == label);
            self.count += 1;
        }
        Ok(())
    }

    fn finish(self) -> Result<Metrics> {
        if self.count == 0 {
            return Err(Error::Argument("cannot evaluate on an empty dataset".into()));
        }
        Ok(Metrics {
            loss: self.quanta as f64 / LOSS_QUANTUM / self.count as f64,
            accuracy: self.correct as f64 / self.count as f64,
            count: self.count,
        })
    }
}

/// First index of the maximum.
fn argmax(values: &[f64]) -> usize {
    values
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}

/// Loss and accuracy over any stream of images (e.g. an augmented dataset).
/// Never modifies `params`.
pub fn evaluate_stream<I>(params: &ModelParams, images: I) -> Result<Metrics>
where
    I: IntoIterator<Item = Result<Image>>,
{
    let mut tally = Tally::default();
    let mut batch = Vec::with_capacity(EVAL_BATCH);
    for img in images {
        batch.push(img?);
        if batch.len() == EVAL_BATCH {
            tally.add_batch(params, &batch)?;
            batch.clear();
        }
    }
    if !batch.is_empty() {
        tally.add_batch(params, &batch)?;
    }
    tally.finish()
}

pub fn evaluate(params: &ModelParams, images: &[Image]) -> Result<Metrics> {
    evaluate_stream(params, images.iter().cloned().map(Ok))
}

/// Mean cross-entropy `L(θ | D)`.
pub fn loss(params: &ModelParams, data: &Dataset) -> Result<f64> {
    Ok(evaluate(params, data.images())?.loss)
}

/// Fraction of argmax-correct predictions `R(θ | D)`; ties go to the lowest class.
pub fn accuracy(params: &ModelParams, data: &Dataset) -> Result<f64> {
    Ok(evaluate(params, data.images())?.accuracy)
}

/// Softmax class probabilities for one image.
pub fn predict(params: &ModelParams, img: &Image) -> Result<Vec<f64>> {
    check_batch(&params.arch, &[img], false)?;
    let fwd = forward(&params.arch, &params.weights, &[img]);
    Ok(cross_entropy(&fwd.logits, params.arch.classes, 1, 0, 0).1)
}

/// SGD hyperparameters and optional augmentation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Each image in each epoch gets one sub-policy drawn uniformly from the set's pool.
    #[serde(skip)]
    pub augmentation: Option<PolicySet>,
    /// Random ±2 px shifts and horizontal flips before policy augmentation.
    pub baseline_aug: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 32,
            learning_rate: 0.02,
            momentum: 0.9,
            weight_decay: 5e-4,
            seed: 0,
            augmentation: None,
            baseline_aug: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Argument(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Argument("epochs and batch size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(Error::Argument("momentum must be in [0, 1) and weight decay non-negative".into()));
        }
        Ok(())
    }
}

/// Mean minibatch loss of each epoch.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epoch_losses: Vec<f64>,
}

fn baseline_augment(img: &Image, rng: &mut Stream) -> Result<Image> {
    let dx = f64::from(rng.random_range(-2i32..=2));
    let dy = f64::from(rng.random_range(-2i32..=2));
    let flip = rng.random_bool(0.5);
    let (sx, tx) = if flip { (-1.0, img.width() as f64 - 1.0 + dx) } else { (1.0, dx) };
    affine_transform(img, [[sx, 0.0, tx], [0.0, 1.0, dy]], [0, 0, 0])
}

pub fn train(init: &ModelParams, data: &Dataset, cfg: &TrainConfig) -> Result<ModelParams> {
    Ok(train_logged(init, data, cfg)?.0)
}

/// Trains from `init` with momentum SGD. Deterministic given `cfg.seed`:
/// the minibatch order and the augmentation draws use separate streams, so
/// an augmentation that leaves every image unchanged yields the same weights
/// as no augmentation.
pub fn train_logged(init: &ModelParams, data: &Dataset, cfg: &TrainConfig) -> Result<(ModelParams, TrainLog)> {
    cfg.validate()?;
    let arch = init.arch;
    let refs: Vec<&Image> = data.images().iter().collect();
    check_batch(&arch, &refs, true)?;
    let pool: Option<Vec<SubPolicy>> = cfg.augmentation.as_ref().map(PolicySet::sub_policy_pool);
    if pool.as_ref().is_some_and(Vec::is_empty) {
        return Err(Error::Argument("augmentation policy set has no sub-policies".into()));
    }

    let mut shuffle = rng::stream(cfg.seed, &[tag::SHUFFLE]);
    let mut aug = rng::stream(cfg.seed, &[tag::AUGMENT]);
    let mut params = init.clone();
    let mut velocity = Weights::<f32>::zeros(&arch);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut log = TrainLog::default();
    let (lr, mu, wd) = (cfg.learning_rate as f32, cfg.momentum as f32, cfg.weight_decay as f32);

    for _ in 0..cfg.epochs {
        order.shuffle(&mut shuffle);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let mut batch = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let mut img = data.images()[i].clone();
                if cfg.baseline_aug {
                    img = baseline_augment(&img, &mut aug)?;
                }
                if let Some(pool) = &pool {
                    let sp = &pool[aug.random_range(0..pool.len())];
                    let partners = Partners::new(data.images(), Some(i));
                    img = apply_sub_policy(&img, sp, &mut aug, Some(&partners))?;
                }
                batch.push(img);
            }
            let batch_refs: Vec<&Image> = batch.iter().collect();
            let (batch_loss, grads) = batch_loss_and_grad(&arch, &params.weights, &batch_refs)?;
            params.steps += 1;
            if !batch_loss.is_finite() {
                return Err(Error::Diverged {
                    step: params.steps,
                    loss: batch_loss,
                });
            }
            for (t, ((w, v), g)) in params
                .weights
                .0
                .iter_mut()
                .zip(velocity.0.iter_mut())
                .zip(&grads.0)
                .enumerate()
            {
                let decay = if t % 2 == 0 { wd } else { 0.0 };
                for ((wi, vi), &gi) in w.iter_mut().zip(v.iter_mut()).zip(g) {
                    *vi = mu * *vi + gi + decay * *wi;
                    *wi -= lr * *vi;
                }
            }
            if !params.weights.is_finite() {
                return Err(Error::Diverged {
                    step: params.steps,
                    loss: f64::NAN,
                });
            }
            epoch_loss += batch_loss;
            batches += 1;
        }
        log.epoch_losses.push(epoch_loss / batches as f64);
    }
    Ok((params, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_dataset, SynthSpec};
    use crate::policy::{Policy, SubPolicy};

    fn tiny_arch() -> Architecture {
        Architecture {
            height: 6,
            width: 6,
            channels: 1,
            conv1: 2,
            conv2: 3,
            kernel: 3,
            hidden: 5,
            classes: 3,
        }
    }

    fn random_images(arch: &Architecture, n: usize, seed: u64) -> Vec<Image> {
        let mut s = rng::stream(seed, &[]);
        (0..n)
            .map(|i| {
                let px = (0..arch.height * arch.width * arch.channels).map(|_| s.random()).collect();
                Image::new(arch.height, arch.width, arch.channels, px, (i % arch.classes) as u32).unwrap()
            })
            .collect()
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for (arch, seed) in [(tiny_arch(), 1), (Architecture { channels: 3, height: 9, width: 7, ..tiny_arch() }, 2)] {
            let init = ModelParams::init(arch, seed).unwrap();
            let mut w64: Weights<f64> = init.weights.cast();
            // non-zero biases so that every path carries gradient
            let mut s = rng::stream(seed, &[99]);
            for t in [1, 3, 5, 7] {
                for v in &mut w64.0[t] {
                    *v = s.random_range(-0.1..0.1);
                }
            }
            let images = random_images(&arch, 4, seed);
            let refs: Vec<&Image> = images.iter().collect();
            let (_, analytic) = batch_loss_and_grad(&arch, &w64, &refs).unwrap();
            let step = 1e-4;
            for t in 0..8 {
                let mut num = Vec::new();
                for i in 0..w64.0[t].len() {
                    let orig = w64.0[t][i];
                    w64.0[t][i] = orig + step;
                    let plus = batch_loss(&arch, &w64, &refs).unwrap();
                    w64.0[t][i] = orig - step;
                    let minus = batch_loss(&arch, &w64, &refs).unwrap();
                    w64.0[t][i] = orig;
                    num.push((plus - minus) / (2.0 * step));
                }
                let diff: f64 = num.iter().zip(&analytic.0[t]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                let norm: f64 = num.iter().map(|a| a * a).sum::<f64>().sqrt()
                    + analytic.0[t].iter().map(|a| a * a).sum::<f64>().sqrt();
                assert!(diff <= 1e-3 * norm.max(1e-8), "tensor {t}: {diff} vs {norm}");
            }
        }
    }

    #[test]
    fn zero_output_model_has_log_c_loss() {
        let arch = Architecture::probe(8, 8, 1, 4);
        let params = ModelParams {
            arch,
            weights: Weights::zeros(&arch),
            steps: 0,
        };
        let images = random_images(&arch, 10, 3);
        let m = evaluate(&params, &images).unwrap();
        assert!((m.loss - 4f64.ln()).abs() < 1e-6);
        // constant output: argmax ties resolve to class 0
        let zeros = images.iter().filter(|i| i.label() == 0).count() as f64;
        assert_eq!(m.accuracy, zeros / 10.0);
        let probs = predict(&params, &images[0]).unwrap();
        assert!(probs.iter().all(|&p| (p - 0.25).abs() < 1e-12));
    }

    #[test]
    fn loss_is_duplication_invariant_and_batch_independent() {
        let data = synth_dataset(&SynthSpec::new(3, 30), 4).unwrap();
        let params = ModelParams::init(Architecture::for_dataset(&data), 8).unwrap();
        let single = loss(&params, &data).unwrap();
        let doubled: Vec<Image> = data.images().iter().chain(data.images()).cloned().collect();
        assert_eq!(evaluate(&params, &doubled).unwrap().loss, single);
        let serial: f64 = data
            .images()
            .iter()
            .map(|img| batch_loss(&params.arch, &params.weights, &[img]).unwrap())
            .sum::<f64>()
            / data.len() as f64;
        assert!((serial - single).abs() <= 1e-6 * single.abs());
        assert_eq!(loss(&params, &data).unwrap(), single);
    }

    #[test]
    fn softmax_sums_to_one() {
        let arch = Architecture::probe(8, 8, 3, 5);
        let params = ModelParams::init(arch, 2).unwrap();
        for img in random_images(&arch, 8, 4) {
            let s: f64 = predict(&params, &img).unwrap().iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn evaluation_errors() {
        let arch = Architecture::probe(8, 8, 1, 2);
        let params = ModelParams::init(arch, 0).unwrap();
        assert!(evaluate(&params, &[]).is_err());
        let wrong = Image::filled(9, 8, 1, 0, 0).unwrap();
        assert!(predict(&params, &wrong).is_err());
        let label = Image::filled(8, 8, 1, 0, 7).unwrap();
        assert!(evaluate(&params, &[label]).is_err());
    }

    #[test]
    fn one_epoch_reduces_loss() {
        let data = synth_dataset(&SynthSpec::new(2, 5), 1).unwrap();
        let init = ModelParams::init(Architecture::for_dataset(&data), 1).unwrap();
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 2,
            ..TrainConfig::default()
        };
        let trained = train(&init, &data, &cfg).unwrap();
        assert!(loss(&trained, &data).unwrap() < loss(&init, &data).unwrap());
        assert_eq!(trained.steps, 5);
    }

    #[test]
    fn training_is_deterministic_and_identity_aug_is_free() {
        let data = synth_dataset(&SynthSpec::new(2, 20), 2).unwrap();
        let init = ModelParams::init(Architecture::for_dataset(&data), 3).unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            seed: 5,
            ..TrainConfig::default()
        };
        let a = train(&init, &data, &cfg).unwrap();
        let b = train(&init, &data, &cfg).unwrap();
        assert_eq!(a.param_hash(), b.param_hash());

        let identity = PolicySet::from_sub_policies(Policy::identity(5, 2).sub_policies).unwrap();
        let with_identity = train(
            &init,
            &data,
            &TrainConfig {
                augmentation: Some(identity),
                ..cfg.clone()
            },
        )
        .unwrap();
        assert_eq!(with_identity.weights, a.weights);

        let involution: SubPolicy = "Invert:1:0,Invert:1:0".parse().unwrap();
        let double_invert = PolicySet::from_sub_policies(vec![involution]).unwrap();
        let with_invert = train(
            &init,
            &data,
            &TrainConfig {
                augmentation: Some(double_invert),
                ..cfg
            },
        )
        .unwrap();
        assert_eq!(with_invert.weights, a.weights);
    }

    #[test]
    fn divergence_is_reported() {
        let data = synth_dataset(&SynthSpec::new(2, 8), 2).unwrap();
        let init = ModelParams::init(Architecture::for_dataset(&data), 3).unwrap();
        let cfg = TrainConfig {
            learning_rate: 1e30,
            epochs: 3,
            ..TrainConfig::default()
        };
        assert!(matches!(train(&init, &data, &cfg), Err(Error::Diverged { .. })));
        let bad = TrainConfig {
            learning_rate: 0.0,
            ..TrainConfig::default()
        };
        assert!(train(&init, &data, &bad).is_err());
    }

    #[test]
    fn checkpoint_round_trip_and_corruption() {
        let arch = Architecture::probe(12, 10, 3, 4);
        let params = ModelParams {
            steps: 17,
            ..ModelParams::init(arch, 6).unwrap()
        };
        let bytes = params.to_bytes();
        assert_eq!(&bytes[..4], b"FAAM");
        let path = Path::new("mem");
        assert_eq!(ModelParams::from_bytes(&bytes, path).unwrap(), params);
        assert!(matches!(
            ModelParams::from_bytes(&bytes[..bytes.len() - 3], path),
            Err(Error::Parse { .. })
        ));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(ModelParams::from_bytes(&bad, path).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(ModelParams::from_bytes(&extra, path).is_err());
    }
}
