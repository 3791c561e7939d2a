//! Fusion actor-critic: a two-layer CNN over the raster, dense branches for
//! LiDAR, semantic and PID inputs, a shared 128-unit trunk and linear heads.
//! Parameters live in one flat vector; forward and backward passes are
//! hand-derived and batched through GEMM.

use std::ops::Range;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::Observation;
use crate::linalg::{gemm, Scalar};

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;
const KERNEL: usize = 3;
const STRIDE: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    pub height: usize,
    pub width: usize,
    pub rays: usize,
    pub semantic_dim: usize,
    pub conv1: usize,
    pub conv2: usize,
    pub image_dense: usize,
    pub lidar_dense: usize,
    pub semantic_dense: usize,
    pub pid_dense: usize,
    pub fusion: usize,
    pub log_std_init: f64,
    pub precision: Precision,
}

/// Arithmetic used inside forward and backward passes. Parameters and
/// optimizer state are always stored as `f64`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            rays: 180,
            semantic_dim: 32,
            conv1: 8,
            conv2: 16,
            image_dense: 64,
            lidar_dense: 32,
            semantic_dense: 32,
            pid_dense: 8,
            fusion: 128,
            log_std_init: -0.5,
            precision: Precision::F32,
        }
    }
}

fn conv_out(n: usize) -> usize {
    if n < KERNEL {
        0
    } else {
        (n - KERNEL) / STRIDE + 1
    }
}

impl NetConfig {
    /// The miniature double-precision network used for gradient checks.
    pub fn tiny() -> Self {
        Self { height: 8, width: 8, rays: 16, semantic_dim: 8, precision: Precision::F64, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let widths = [self.conv1, self.conv2, self.image_dense, self.lidar_dense, self.semantic_dense, self.pid_dense, self.fusion];
        if widths.contains(&0) || self.rays == 0 || self.semantic_dim == 0 {
            return Err(Error::Config("network widths and input sizes must be positive".into()));
        }
        if conv_out(conv_out(self.height)) == 0 || conv_out(conv_out(self.width)) == 0 {
            return Err(Error::Config(format!("raster {}x{} is too small for two stride-2 convolutions", self.height, self.width)));
        }
        if !(LOG_STD_MIN..=LOG_STD_MAX).contains(&self.log_std_init) {
            return Err(Error::Config("log_std_init must lie in [-5, 2]".into()));
        }
        Ok(())
    }
}

/// Offsets of every tensor inside the flat parameter vector, in declaration
/// order. Weight matrices are stored `[inputs x outputs]`, row-major; conv
/// kernels are `[(ky, kx, c_in) x c_out]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub h1: usize,
    pub w1: usize,
    pub h2: usize,
    pub w2: usize,
    pub conv1_w: Range<usize>,
    pub conv1_b: Range<usize>,
    pub conv2_w: Range<usize>,
    pub conv2_b: Range<usize>,
    pub image_w: Range<usize>,
    pub image_b: Range<usize>,
    pub lidar_w: Range<usize>,
    pub lidar_b: Range<usize>,
    pub semantic_w: Range<usize>,
    pub semantic_b: Range<usize>,
    pub pid_w: Range<usize>,
    pub pid_b: Range<usize>,
    pub fusion_w: Range<usize>,
    pub fusion_b: Range<usize>,
    pub actor_w: Range<usize>,
    pub actor_b: Range<usize>,
    pub log_std: Range<usize>,
    pub critic_w: Range<usize>,
    pub critic_b: Range<usize>,
    pub total: usize,
}

impl Layout {
    pub fn new(c: &NetConfig) -> Self {
        let mut at = 0;
        let mut take = |n: usize| {
            let r = at..at + n;
            at += n;
            r
        };
        let (h1, w1) = (conv_out(c.height), conv_out(c.width));
        let (h2, w2) = (conv_out(h1), conv_out(w1));
        let flat = h2 * w2 * c.conv2;
        let cat = c.image_dense + c.lidar_dense + c.semantic_dense + c.pid_dense;
        let conv1_w = take(KERNEL * KERNEL * c.conv1);
        let conv1_b = take(c.conv1);
        let conv2_w = take(KERNEL * KERNEL * c.conv1 * c.conv2);
        let conv2_b = take(c.conv2);
        let image_w = take(flat * c.image_dense);
        let image_b = take(c.image_dense);
        let lidar_w = take(c.rays * c.lidar_dense);
        let lidar_b = take(c.lidar_dense);
        let semantic_w = take(c.semantic_dim * c.semantic_dense);
        let semantic_b = take(c.semantic_dense);
        let pid_w = take(c.pid_dense);
        let pid_b = take(c.pid_dense);
        let fusion_w = take(cat * c.fusion);
        let fusion_b = take(c.fusion);
        let actor_w = take(c.fusion * 2);
        let actor_b = take(2);
        let log_std = take(2);
        let critic_w = take(c.fusion);
        let critic_b = take(1);
        Self {
            h1,
            w1,
            h2,
            w2,
            conv1_w,
            conv1_b,
            conv2_w,
            conv2_b,
            image_w,
            image_b,
            lidar_w,
            lidar_b,
            semantic_w,
            semantic_b,
            pid_w,
            pid_b,
            fusion_w,
            fusion_b,
            actor_w,
            actor_b,
            log_std,
            critic_w,
            critic_b,
            total: at,
        }
    }

    /// Named tensors in declaration order.
    pub fn tensors(&self) -> Vec<(&'static str, Range<usize>)> {
        vec![
            ("conv1_w", self.conv1_w.clone()),
            ("conv1_b", self.conv1_b.clone()),
            ("conv2_w", self.conv2_w.clone()),
            ("conv2_b", self.conv2_b.clone()),
            ("image_w", self.image_w.clone()),
            ("image_b", self.image_b.clone()),
            ("lidar_w", self.lidar_w.clone()),
            ("lidar_b", self.lidar_b.clone()),
            ("semantic_w", self.semantic_w.clone()),
            ("semantic_b", self.semantic_b.clone()),
            ("pid_w", self.pid_w.clone()),
            ("pid_b", self.pid_b.clone()),
            ("fusion_w", self.fusion_w.clone()),
            ("fusion_b", self.fusion_b.clone()),
            ("actor_w", self.actor_w.clone()),
            ("actor_b", self.actor_b.clone()),
            ("log_std", self.log_std.clone()),
            ("critic_w", self.critic_w.clone()),
            ("critic_b", self.critic_b.clone()),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionNet {
    pub config: NetConfig,
    pub params: Vec<f64>,
    #[serde(skip, default)]
    layout: Option<Layout>,
}

/// Policy and value outputs for a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyOutput {
    /// `[n x 2]` row-major.
    pub mean: Vec<f64>,
    /// Clamped log standard deviation, shared by all samples.
    pub log_std: [f64; 2],
    pub value: Vec<f64>,
}

#[derive(Debug, Clone)]
struct Cache<S> {
    n: usize,
    raster: Vec<S>,
    act1: Vec<S>,
    cols2: Vec<S>,
    act2: Vec<S>,
    lidar_in: Vec<S>,
    semantic_in: Vec<S>,
    pid_in: Vec<S>,
    concat: Vec<S>,
    fused: Vec<S>,
}

#[derive(Debug, Clone)]
enum CacheInner {
    F32(Cache<f32>),
    F64(Cache<f64>),
}

/// Activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache(CacheInner);

fn he_init(rng: &mut ChaCha8Rng, w: &mut [f64], fan_in: usize, gain: f64) {
    let n = Normal::new(0.0, gain * (2.0 / fan_in as f64).sqrt()).expect("positive std");
    for v in w {
        *v = n.sample(rng);
    }
}

fn relu<S: Scalar>(v: &mut [S]) {
    for x in v {
        if *x < S::ZERO {
            *x = S::ZERO;
        }
    }
}

/// `out[n x o] = x[n x i] * w[i x o] + b`.
fn dense<S: Scalar>(n: usize, i: usize, o: usize, x: &[S], w: &[S], b: &[S], out: &mut [S]) {
    for row in out.chunks_exact_mut(o) {
        row.copy_from_slice(b);
    }
    gemm(n, i, o, S::from_f64(1.0), x, (i, 1), w, (o, 1), S::from_f64(1.0), out, (o, 1));
}

/// Gradients of a dense layer given `dy[n x o]`; accumulates into `dw`, `db`
/// and, when requested, writes `dx[n x i]`.
#[allow(clippy::too_many_arguments)]
fn dense_backward<S: Scalar>(n: usize, i: usize, o: usize, x: &[S], w: &[S], dy: &[S], dw: &mut [S], db: &mut [S], dx: Option<&mut [S]>) {
    let one = S::from_f64(1.0);
    gemm(i, n, o, one, x, (1, i), dy, (o, 1), one, dw, (o, 1));
    for row in dy.chunks_exact(o) {
        for (g, &d) in db.iter_mut().zip(row) {
            *g = g.add(d);
        }
    }
    if let Some(dx) = dx {
        gemm(n, o, i, one, dy, (o, 1), w, (1, o), S::ZERO, dx, (i, 1));
    }
}

fn relu_mask<S: Scalar>(grad: &mut [S], act: &[S]) {
    for (g, &a) in grad.iter_mut().zip(act) {
        if a <= S::ZERO {
            *g = S::ZERO;
        }
    }
}

/// im2col for a 3x3 stride-2 convolution over a channels-last input
/// `[n, h, w, c]`. Output rows are `(sample, oy, ox)`, columns `(ky, kx, c)`.
#[allow(clippy::too_many_arguments)]
fn im2col<S: Scalar>(input: &[S], n: usize, h: usize, w: usize, c: usize, oh: usize, ow: usize, cols: &mut [S]) {
    let k = KERNEL * KERNEL * c;
    let span = KERNEL * c;
    let mut row = 0;
    for s in 0..n {
        let base = s * h * w * c;
        for oy in 0..oh {
            for ox in 0..ow {
                let dst = &mut cols[row * k..(row + 1) * k];
                for ky in 0..KERNEL {
                    let src = base + ((oy * STRIDE + ky) * w + ox * STRIDE) * c;
                    dst[ky * span..(ky + 1) * span].copy_from_slice(&input[src..src + span]);
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of `im2col`: scatters column gradients back onto the input.
#[allow(clippy::too_many_arguments)]
fn col2im<S: Scalar>(cols: &[S], n: usize, h: usize, w: usize, c: usize, oh: usize, ow: usize, grad: &mut [S]) {
    grad.fill(S::ZERO);
    let k = KERNEL * KERNEL * c;
    let span = KERNEL * c;
    let mut row = 0;
    for s in 0..n {
        let base = s * h * w * c;
        for oy in 0..oh {
            for ox in 0..ow {
                let src = &cols[row * k..(row + 1) * k];
                for ky in 0..KERNEL {
                    let dst = base + ((oy * STRIDE + ky) * w + ox * STRIDE) * c;
                    for (g, &v) in grad[dst..dst + span].iter_mut().zip(&src[ky * span..(ky + 1) * span]) {
                        *g = g.add(v);
                    }
                }
                row += 1;
            }
        }
    }
}

/// Single-channel 3x3 stride-2 convolution written out directly; as a GEMM
/// its inner dimensions (9 and `c_out`) are too small to be efficient.
#[allow(clippy::too_many_arguments)]
fn conv1_forward<S: Scalar>(raster: &[S], n: usize, h: usize, w: usize, oh: usize, ow: usize, weight: &[S], bias: &[S], out: &mut [S]) {
    match bias.len() {
        8 => conv1_forward_n::<S, 8>(raster, n, h, w, oh, ow, weight, bias, out),
        16 => conv1_forward_n::<S, 16>(raster, n, h, w, oh, ow, weight, bias, out),
        _ => conv1_forward_dyn(raster, n, h, w, oh, ow, weight, bias, out),
    }
}

/// Raster offsets of the nine kernel taps relative to the window corner.
fn taps(w: usize) -> [usize; 9] {
    std::array::from_fn(|k| (k / KERNEL) * w + k % KERNEL)
}

#[allow(clippy::too_many_arguments)]
fn conv1_forward_n<S: Scalar, const N: usize>(raster: &[S], n: usize, h: usize, w: usize, oh: usize, ow: usize, weight: &[S], bias: &[S], out: &mut [S]) {
    let wk: [[S; N]; 9] = std::array::from_fn(|k| std::array::from_fn(|f| weight[k * N + f]));
    let b: [S; N] = std::array::from_fn(|f| bias[f]);
    let off = taps(w);
    let mut rows = out.chunks_exact_mut(N);
    for s in 0..n {
        let img = &raster[s * h * w..(s + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let base = oy * STRIDE * w + ox * STRIDE;
                let x: [S; 9] = std::array::from_fn(|k| img[base + off[k]]);
                let mut acc = b;
                for k in 0..9 {
                    for f in 0..N {
                        acc[f] = acc[f].add(x[k].mul(wk[k][f]));
                    }
                }
                rows.next().expect("output sized to positions").copy_from_slice(&acc);
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv1_forward_dyn<S: Scalar>(raster: &[S], n: usize, h: usize, w: usize, oh: usize, ow: usize, weight: &[S], bias: &[S], out: &mut [S]) {
    let co = bias.len();
    let off = taps(w);
    let mut row = 0;
    for s in 0..n {
        let img = &raster[s * h * w..(s + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let base = oy * STRIDE * w + ox * STRIDE;
                let o = &mut out[row * co..(row + 1) * co];
                o.copy_from_slice(bias);
                for (k, &d) in off.iter().enumerate() {
                    let x = img[base + d];
                    for (acc, &wv) in o.iter_mut().zip(&weight[k * co..(k + 1) * co]) {
                        *acc = acc.add(x.mul(wv));
                    }
                }
                row += 1;
            }
        }
    }
}

/// Weight and bias gradients of [`conv1_forward`].
#[allow(clippy::too_many_arguments)]
fn conv1_backward<S: Scalar>(raster: &[S], n: usize, h: usize, w: usize, oh: usize, ow: usize, dy: &[S], dw: &mut [S], db: &mut [S]) {
    match db.len() {
        8 => conv1_backward_n::<S, 8>(raster, n, h, w, oh, ow, dy, dw, db),
        16 => conv1_backward_n::<S, 16>(raster, n, h, w, oh, ow, dy, dw, db),
        _ => conv1_backward_dyn(raster, n, h, w, oh, ow, dy, dw, db),
    }
}

#[allow(clippy::too_many_arguments)]
fn conv1_backward_n<S: Scalar, const N: usize>(raster: &[S], n: usize, h: usize, w: usize, oh: usize, ow: usize, dy: &[S], dw: &mut [S], db: &mut [S]) {
    let mut gw = [[S::ZERO; N]; 9];
    let mut gb = [S::ZERO; N];
    let off = taps(w);
    let mut rows = dy.chunks_exact(N);
    for s in 0..n {
        let img = &raster[s * h * w..(s + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let base = oy * STRIDE * w + ox * STRIDE;
                let x: [S; 9] = std::array::from_fn(|k| img[base + off[k]]);
                let d: [S; N] = rows.next().expect("gradient sized to positions").try_into().expect("chunk of N");
                for f in 0..N {
                    gb[f] = gb[f].add(d[f]);
                }
                for k in 0..9 {
                    for f in 0..N {
                        gw[k][f] = gw[k][f].add(x[k].mul(d[f]));
                    }
                }
            }
        }
    }
    for k in 0..9 {
        for f in 0..N {
            dw[k * N + f] = dw[k * N + f].add(gw[k][f]);
        }
    }
    for f in 0..N {
        db[f] = db[f].add(gb[f]);
    }
}

#[allow(clippy::too_many_arguments)]
fn conv1_backward_dyn<S: Scalar>(raster: &[S], n: usize, h: usize, w: usize, oh: usize, ow: usize, dy: &[S], dw: &mut [S], db: &mut [S]) {
    let co = db.len();
    let off = taps(w);
    let mut row = 0;
    for s in 0..n {
        let img = &raster[s * h * w..(s + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let base = oy * STRIDE * w + ox * STRIDE;
                let d = &dy[row * co..(row + 1) * co];
                for (g, &v) in db.iter_mut().zip(d) {
                    *g = g.add(v);
                }
                for (k, &o) in off.iter().enumerate() {
                    let x = img[base + o];
                    for (g, &v) in dw[k * co..(k + 1) * co].iter_mut().zip(d) {
                        *g = g.add(x.mul(v));
                    }
                }
                row += 1;
            }
        }
    }
}

fn convert<S: Scalar>(v: &[f64]) -> Vec<S> {
    v.iter().map(|&x| S::from_f64(x)).collect()
}

fn forward_impl<S: Scalar>(c: &NetConfig, l: &Layout, p: &[S], batch: &[&Observation]) -> (Vec<f64>, Vec<f64>, Cache<S>) {
    let n = batch.len();
    let (h, w) = (c.height, c.width);
    let (r1, r2) = (l.h1 * l.w1, l.h2 * l.w2);
    let k2 = KERNEL * KERNEL * c.conv1;

    let mut raster = Vec::with_capacity(n * h * w);
    let mut lidar_in = Vec::with_capacity(n * c.rays);
    let mut semantic_in = Vec::with_capacity(n * c.semantic_dim);
    let mut pid_in = Vec::with_capacity(n);
    for o in batch {
        raster.extend(o.raster.pixels.iter().map(|&v| S::from_f64(v)));
        lidar_in.extend(o.lidar_norm.iter().map(|&v| S::from_f64(v)));
        semantic_in.extend(o.semantic.iter().map(|&v| S::from_f64(v)));
        pid_in.push(S::from_f64(o.pid_norm));
    }

    let mut act1 = vec![S::ZERO; n * r1 * c.conv1];
    conv1_forward(&raster, n, h, w, l.h1, l.w1, &p[l.conv1_w.clone()], &p[l.conv1_b.clone()], &mut act1);
    relu(&mut act1);

    let mut cols2 = vec![S::ZERO; n * r2 * k2];
    im2col(&act1, n, l.h1, l.w1, c.conv1, l.h2, l.w2, &mut cols2);
    let mut act2 = vec![S::ZERO; n * r2 * c.conv2];
    dense(n * r2, k2, c.conv2, &cols2, &p[l.conv2_w.clone()], &p[l.conv2_b.clone()], &mut act2);
    relu(&mut act2);

    let flat = r2 * c.conv2;
    let cat = c.image_dense + c.lidar_dense + c.semantic_dense + c.pid_dense;
    let mut concat = vec![S::ZERO; n * cat];
    // Each branch writes straight into its slice of the concatenation.
    let mut branch = |x: &[S], i: usize, o: usize, off: usize, wr: &Range<usize>, br: &Range<usize>| {
        let bias = &p[br.clone()];
        for row in concat.chunks_exact_mut(cat) {
            row[off..off + o].copy_from_slice(bias);
        }
        gemm(n, i, o, S::from_f64(1.0), x, (i, 1), &p[wr.clone()], (o, 1), S::from_f64(1.0), &mut concat[off..], (cat, 1));
    };
    branch(&act2, flat, c.image_dense, 0, &l.image_w, &l.image_b);
    branch(&lidar_in, c.rays, c.lidar_dense, c.image_dense, &l.lidar_w, &l.lidar_b);
    branch(&semantic_in, c.semantic_dim, c.semantic_dense, c.image_dense + c.lidar_dense, &l.semantic_w, &l.semantic_b);
    branch(&pid_in, 1, c.pid_dense, c.image_dense + c.lidar_dense + c.semantic_dense, &l.pid_w, &l.pid_b);
    relu(&mut concat);

    let mut fused = vec![S::ZERO; n * c.fusion];
    dense(n, cat, c.fusion, &concat, &p[l.fusion_w.clone()], &p[l.fusion_b.clone()], &mut fused);
    relu(&mut fused);

    let mut mean = vec![S::ZERO; n * 2];
    dense(n, c.fusion, 2, &fused, &p[l.actor_w.clone()], &p[l.actor_b.clone()], &mut mean);
    let mut value = vec![S::ZERO; n];
    dense(n, c.fusion, 1, &fused, &p[l.critic_w.clone()], &p[l.critic_b.clone()], &mut value);

    let cache = Cache { n, raster, act1, cols2, act2, lidar_in, semantic_in, pid_in, concat, fused };
    (mean.iter().map(|v| v.to_f64()).collect(), value.iter().map(|v| v.to_f64()).collect(), cache)
}

fn backward_impl<S: Scalar>(c: &NetConfig, l: &Layout, p: &[S], cache: &Cache<S>, d_mean: &[f64], d_value: &[f64]) -> Vec<S> {
    let n = cache.n;
    let mut g = vec![S::ZERO; l.total];
    let (r1, r2) = (l.h1 * l.w1, l.h2 * l.w2);
    let k2 = KERNEL * KERNEL * c.conv1;
    let cat = c.image_dense + c.lidar_dense + c.semantic_dense + c.pid_dense;
    let d_mean: Vec<S> = convert(d_mean);
    let d_value: Vec<S> = convert(d_value);

    // Splits `g` into disjoint weight and bias gradient slices.
    fn wb<'a, S>(g: &'a mut [S], w: &Range<usize>, b: &Range<usize>) -> (&'a mut [S], &'a mut [S]) {
        let (lo, hi) = g.split_at_mut(b.start);
        (&mut lo[w.clone()], &mut hi[..b.len()])
    }

    // Heads.
    let mut d_fused = vec![S::ZERO; n * c.fusion];
    let (dw, db) = wb(&mut g, &l.actor_w, &l.actor_b);
    dense_backward(n, c.fusion, 2, &cache.fused, &p[l.actor_w.clone()], &d_mean, dw, db, Some(&mut d_fused));
    let mut d_fused_v = vec![S::ZERO; n * c.fusion];
    let (dw, db) = wb(&mut g, &l.critic_w, &l.critic_b);
    dense_backward(n, c.fusion, 1, &cache.fused, &p[l.critic_w.clone()], &d_value, dw, db, Some(&mut d_fused_v));
    for (a, &b) in d_fused.iter_mut().zip(&d_fused_v) {
        *a = a.add(b);
    }
    relu_mask(&mut d_fused, &cache.fused);

    // Trunk.
    let mut d_concat = vec![S::ZERO; n * cat];
    let (dw, db) = wb(&mut g, &l.fusion_w, &l.fusion_b);
    dense_backward(n, cat, c.fusion, &cache.concat, &p[l.fusion_w.clone()], &d_fused, dw, db, Some(&mut d_concat));
    relu_mask(&mut d_concat, &cache.concat);

    // Branches read their slice of the concatenation gradient in place.
    let one = S::from_f64(1.0);
    let branch_grad = |g: &mut [S], x: &[S], i: usize, o: usize, off: usize, wr: &Range<usize>, br: &Range<usize>| {
        let (dw, db) = wb(g, wr, br);
        gemm(i, n, o, one, x, (1, i), &d_concat[off..], (cat, 1), one, dw, (o, 1));
        for row in d_concat.chunks_exact(cat) {
            for (gb, &d) in db.iter_mut().zip(&row[off..off + o]) {
                *gb = gb.add(d);
            }
        }
    };
    let flat = r2 * c.conv2;
    branch_grad(&mut g, &cache.act2, flat, c.image_dense, 0, &l.image_w, &l.image_b);
    branch_grad(&mut g, &cache.lidar_in, c.rays, c.lidar_dense, c.image_dense, &l.lidar_w, &l.lidar_b);
    let off = c.image_dense + c.lidar_dense;
    branch_grad(&mut g, &cache.semantic_in, c.semantic_dim, c.semantic_dense, off, &l.semantic_w, &l.semantic_b);
    let off = off + c.semantic_dense;
    branch_grad(&mut g, &cache.pid_in, 1, c.pid_dense, off, &l.pid_w, &l.pid_b);

    // Image branch input gradient.
    let mut d_act2 = vec![S::ZERO; n * flat];
    gemm(n, c.image_dense, flat, one, &d_concat, (cat, 1), &p[l.image_w.clone()], (1, c.image_dense), S::ZERO, &mut d_act2, (flat, 1));
    relu_mask(&mut d_act2, &cache.act2);
    let mut d_cols2 = vec![S::ZERO; n * r2 * k2];
    let (dw, db) = wb(&mut g, &l.conv2_w, &l.conv2_b);
    dense_backward(n * r2, k2, c.conv2, &cache.cols2, &p[l.conv2_w.clone()], &d_act2, dw, db, Some(&mut d_cols2));
    let mut d_act1 = vec![S::ZERO; n * r1 * c.conv1];
    col2im(&d_cols2, n, l.h1, l.w1, c.conv1, l.h2, l.w2, &mut d_act1);
    relu_mask(&mut d_act1, &cache.act1);
    let (dw, db) = wb(&mut g, &l.conv1_w, &l.conv1_b);
    conv1_backward(&cache.raster, n, c.height, c.width, l.h1, l.w1, &d_act1, dw, db);
    g
}

pub struct FrozenNet<'a> {
    net: &'a FusionNet,
    p32: Option<Vec<f32>>,
}

impl FrozenNet<'_> {
    pub fn forward(&self, batch: &[&Observation]) -> Result<PolicyOutput> {
        Ok(self.net.forward_with(self.p32.as_deref(), batch)?.0)
    }

    pub fn forward_one(&self, obs: &Observation) -> Result<([f64; 2], [f64; 2], f64)> {
        let out = self.forward(&[obs])?;
        Ok(([out.mean[0], out.mean[1]], out.log_std, out.value[0]))
    }
}

impl FusionNet {
    pub fn new(config: NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let l = Layout::new(&config);
        let mut p = vec![0.0; l.total];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = &config;
        let cat = c.image_dense + c.lidar_dense + c.semantic_dense + c.pid_dense;
        he_init(&mut rng, &mut p[l.conv1_w.clone()], KERNEL * KERNEL, 1.0);
        he_init(&mut rng, &mut p[l.conv2_w.clone()], KERNEL * KERNEL * c.conv1, 1.0);
        he_init(&mut rng, &mut p[l.image_w.clone()], l.h2 * l.w2 * c.conv2, 1.0);
        he_init(&mut rng, &mut p[l.lidar_w.clone()], c.rays, 1.0);
        he_init(&mut rng, &mut p[l.semantic_w.clone()], c.semantic_dim, 1.0);
        he_init(&mut rng, &mut p[l.pid_w.clone()], 1, 1.0);
        he_init(&mut rng, &mut p[l.fusion_w.clone()], cat, 1.0);
        // Small policy head so the initial mean is near zero.
        he_init(&mut rng, &mut p[l.actor_w.clone()], c.fusion, 0.01);
        he_init(&mut rng, &mut p[l.critic_w.clone()], c.fusion, 0.5);
        p[l.log_std.clone()].fill(c.log_std_init);
        // Slightly positive biases keep ReLUs alive at start.
        for r in [&l.conv1_b, &l.conv2_b, &l.image_b, &l.lidar_b, &l.semantic_b, &l.pid_b, &l.fusion_b] {
            for v in &mut p[r.clone()] {
                *v = rng.random_range(0.0..0.01);
            }
        }
        Ok(Self { config, params: p, layout: Some(l) })
    }

    /// Rebuilds a network from stored parameters.
    pub fn from_params(config: NetConfig, params: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let l = Layout::new(&config);
        if params.len() != l.total {
            return Err(Error::Shape { context: "network parameters", expected: l.total, got: params.len() });
        }
        if params.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("network parameters"));
        }
        Ok(Self { config, params, layout: Some(l) })
    }

    pub fn layout(&self) -> Layout {
        self.layout.clone().unwrap_or_else(|| Layout::new(&self.config))
    }

    fn layout_ref(&self) -> std::borrow::Cow<'_, Layout> {
        match &self.layout {
            Some(l) => std::borrow::Cow::Borrowed(l),
            None => std::borrow::Cow::Owned(Layout::new(&self.config)),
        }
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Clamped log standard deviations.
    pub fn log_std(&self) -> [f64; 2] {
        let s = &self.params[self.layout_ref().log_std.clone()];
        [s[0].clamp(LOG_STD_MIN, LOG_STD_MAX), s[1].clamp(LOG_STD_MIN, LOG_STD_MAX)]
    }

    fn check_obs(&self, obs: &Observation) -> Result<()> {
        let c = &self.config;
        if obs.raster.height != c.height || obs.raster.width != c.width || obs.raster.pixels.len() != c.height * c.width {
            return Err(Error::Shape { context: "raster pixels", expected: c.height * c.width, got: obs.raster.pixels.len() });
        }
        if obs.lidar_norm.len() != c.rays {
            return Err(Error::Shape { context: "lidar rays", expected: c.rays, got: obs.lidar_norm.len() });
        }
        if obs.semantic.len() != c.semantic_dim {
            return Err(Error::Shape { context: "semantic dim", expected: c.semantic_dim, got: obs.semantic.len() });
        }
        Ok(())
    }

    pub fn forward(&self, batch: &[&Observation]) -> Result<(PolicyOutput, ForwardCache)> {
        self.forward_with(None, batch)
    }

    /// A read-only view with parameters converted once to the compute
    /// precision, for many forward passes between updates.
    pub fn frozen(&self) -> FrozenNet<'_> {
        let p32 = (self.config.precision == Precision::F32).then(|| convert(&self.params));
        FrozenNet { net: self, p32 }
    }

    fn forward_with(&self, p32: Option<&[f32]>, batch: &[&Observation]) -> Result<(PolicyOutput, ForwardCache)> {
        for o in batch {
            self.check_obs(o)?;
        }
        let l = self.layout_ref();
        let (mean, value, cache) = match self.config.precision {
            Precision::F64 => {
                let (m, v, c) = forward_impl(&self.config, &l, &self.params, batch);
                (m, v, ForwardCache(CacheInner::F64(c)))
            }
            Precision::F32 => {
                let owned;
                let p = match p32 {
                    Some(p) => p,
                    None => {
                        owned = convert::<f32>(&self.params);
                        &owned
                    }
                };
                let (m, v, c) = forward_impl(&self.config, &l, p, batch);
                (m, v, ForwardCache(CacheInner::F32(c)))
            }
        };
        if mean.iter().chain(&value).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("policy/value output"));
        }
        Ok((PolicyOutput { mean, log_std: self.log_std(), value }, cache))
    }

    /// Convenience forward for one observation: `(mean, log_std, value)`.
    pub fn forward_one(&self, obs: &Observation) -> Result<([f64; 2], [f64; 2], f64)> {
        let (out, _) = self.forward(&[obs])?;
        Ok(([out.mean[0], out.mean[1]], out.log_std, out.value[0]))
    }

    /// Backpropagates `d_mean[n x 2]`, `d_log_std` (w.r.t. the clamped value)
    /// and `d_value[n]`, returning the gradient in parameter layout.
    pub fn backward(&self, cache: &ForwardCache, d_mean: &[f64], d_log_std: [f64; 2], d_value: &[f64]) -> Vec<f64> {
        let l = self.layout_ref();
        let mut g: Vec<f64> = match &cache.0 {
            CacheInner::F64(c) => backward_impl(&self.config, &l, &self.params, c, d_mean, d_value),
            CacheInner::F32(c) => {
                let p: Vec<f32> = convert(&self.params);
                backward_impl(&self.config, &l, &p, c, d_mean, d_value).into_iter().map(f64::from).collect()
            }
        };
        for (j, r) in l.log_std.clone().enumerate() {
            let raw = self.params[r];
            g[r] = if (LOG_STD_MIN..=LOG_STD_MAX).contains(&raw) { d_log_std[j] } else { 0.0 };
        }
        g
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::perception::LaneRaster;

    fn random_obs(c: &NetConfig, rng: &mut ChaCha8Rng) -> Observation {
        let mut raster = LaneRaster::blank(c.height, c.width, 6.0);
        for v in &mut raster.pixels {
            *v = rng.random_range(0.0..1.0);
        }
        Observation {
            raster,
            lidar_norm: (0..c.rays).map(|_| rng.random_range(0.0..1.0)).collect(),
            pid_norm: rng.random_range(-1.0..1.0),
            semantic: (0..c.semantic_dim).map(|_| rng.random_range(-2.0..2.0)).collect(),
        }
    }

    /// Straightforward loops, no im2col or GEMM.
    fn naive_forward(net: &FusionNet, o: &Observation) -> ([f64; 2], f64) {
        let c = &net.config;
        let l = net.layout();
        let p = &net.params;
        let relu = |x: f64| x.max(0.0);
        let mut a1 = vec![vec![vec![0.0; c.conv1]; l.w1]; l.h1];
        for y in 0..l.h1 {
            for x in 0..l.w1 {
                for f in 0..c.conv1 {
                    let mut s = p[l.conv1_b.start + f];
                    for ky in 0..3 {
                        for kx in 0..3 {
                            s += o.raster.get(2 * y + ky, 2 * x + kx) * p[l.conv1_w.start + (ky * 3 + kx) * c.conv1 + f];
                        }
                    }
                    a1[y][x][f] = relu(s);
                }
            }
        }
        let mut flat = Vec::new();
        for y in 0..l.h2 {
            for x in 0..l.w2 {
                for f in 0..c.conv2 {
                    let mut s = p[l.conv2_b.start + f];
                    for ky in 0..3 {
                        for kx in 0..3 {
                            for ch in 0..c.conv1 {
                                let row = (ky * 3 + kx) * c.conv1 + ch;
                                s += a1[2 * y + ky][2 * x + kx][ch] * p[l.conv2_w.start + row * c.conv2 + f];
                            }
                        }
                    }
                    flat.push(relu(s));
                }
            }
        }
        let lin = |x: &[f64], w: &Range<usize>, b: &Range<usize>, act: bool| -> Vec<f64> {
            let o = b.len();
            (0..o)
                .map(|j| {
                    let s = p[b.start + j] + x.iter().enumerate().map(|(i, v)| v * p[w.start + i * o + j]).sum::<f64>();
                    if act {
                        relu(s)
                    } else {
                        s
                    }
                })
                .collect()
        };
        let mut cat = lin(&flat, &l.image_w, &l.image_b, true);
        cat.extend(lin(&o.lidar_norm, &l.lidar_w, &l.lidar_b, true));
        cat.extend(lin(&o.semantic, &l.semantic_w, &l.semantic_b, true));
        cat.extend(lin(&[o.pid_norm], &l.pid_w, &l.pid_b, true));
        let fused = lin(&cat, &l.fusion_w, &l.fusion_b, true);
        let mean = lin(&fused, &l.actor_w, &l.actor_b, false);
        let value = lin(&fused, &l.critic_w, &l.critic_b, false);
        ([mean[0], mean[1]], value[0])
    }

    #[test]
    fn default_parameter_count() {
        let l = Layout::new(&NetConfig::default());
        assert_eq!((l.h1, l.w1, l.h2, l.w2), (31, 31, 15, 15));
        let expected = 9 * 8 + 8 + 72 * 16 + 16 + 3600 * 64 + 64 + 180 * 32 + 32 + 32 * 32 + 32 + 8 + 8 + 136 * 128 + 128 + 256 + 2 + 2 + 128 + 1;
        assert_eq!(l.total, expected);
        let tiny = Layout::new(&NetConfig::tiny());
        assert_eq!((tiny.h1, tiny.h2), (3, 1));
    }

    #[test]
    fn batched_forward_matches_naive_loops() {
        let f64_default = NetConfig { precision: Precision::F64, ..NetConfig::default() };
        for cfg in [NetConfig::tiny(), NetConfig { height: 16, width: 12, ..NetConfig::tiny() }, f64_default] {
            let mut net = FusionNet::new(cfg, 3).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            // Larger head weights so the comparison is not trivially near zero.
            let l = net.layout();
            for v in &mut net.params[l.actor_w.clone()] {
                *v = rng.random_range(-0.3..0.3);
            }
            let obs: Vec<_> = (0..3).map(|_| random_obs(&cfg, &mut rng)).collect();
            let refs: Vec<_> = obs.iter().collect();
            let (out, _) = net.forward(&refs).unwrap();
            for (i, o) in obs.iter().enumerate() {
                let (m, v) = naive_forward(&net, o);
                assert!((out.mean[2 * i] - m[0]).abs() < 1e-10);
                assert!((out.mean[2 * i + 1] - m[1]).abs() < 1e-10);
                assert!((out.value[i] - v).abs() < 1e-10, "{} vs {}", out.value[i], v);
            }
        }
    }

    #[test]
    fn same_seed_same_outputs() {
        let cfg = NetConfig::tiny();
        let a = FusionNet::new(cfg, 5).unwrap();
        let b = FusionNet::new(cfg, 5).unwrap();
        assert_eq!(a.params, b.params);
        let o = random_obs(&cfg, &mut ChaCha8Rng::seed_from_u64(1));
        let x = a.forward_one(&o).unwrap();
        let y = b.forward_one(&o).unwrap();
        assert_eq!(format!("{x:?}"), format!("{y:?}"));
        assert_eq!(a.log_std(), [-0.5, -0.5]);
    }

    #[test]
    fn single_precision_tracks_double() {
        let cfg = NetConfig { precision: Precision::F64, ..NetConfig::default() };
        let a = FusionNet::new(cfg, 6).unwrap();
        let b = FusionNet::from_params(NetConfig { precision: Precision::F32, ..cfg }, a.params.clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let obs: Vec<_> = (0..4).map(|_| random_obs(&cfg, &mut rng)).collect();
        let refs: Vec<_> = obs.iter().collect();
        let (oa, ca) = a.forward(&refs).unwrap();
        let (ob, cb) = b.forward(&refs).unwrap();
        for (x, y) in oa.value.iter().zip(&ob.value) {
            assert!((x - y).abs() < 1e-4 * (1.0 + x.abs()));
        }
        let dm = vec![0.3; 8];
        let dv = vec![-0.2; 4];
        let ga = a.backward(&ca, &dm, [0.1, 0.2], &dv);
        let gb = b.backward(&cb, &dm, [0.1, 0.2], &dv);
        let scale = ga.iter().map(|v| v.abs()).fold(0.0, f64::max);
        for (x, y) in ga.iter().zip(&gb) {
            assert!((x - y).abs() < 1e-4 * scale);
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        let net = FusionNet::new(NetConfig::tiny(), 1).unwrap();
        let mut o = random_obs(&NetConfig::tiny(), &mut ChaCha8Rng::seed_from_u64(1));
        o.lidar_norm.pop();
        assert!(net.forward_one(&o).is_err());
        assert!(FusionNet::from_params(NetConfig::tiny(), vec![0.0; 3]).is_err());
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let (n, h, w, c) = (2, 9, 7, 3);
        let (oh, ow) = (conv_out(h), conv_out(w));
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x: Vec<f64> = (0..n * h * w * c).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..n * oh * ow * 9 * c).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut cols = vec![0.0; y.len()];
        im2col(&x, n, h, w, c, oh, ow, &mut cols);
        let mut back = vec![0.0; x.len()];
        col2im(&y, n, h, w, c, oh, ow, &mut back);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }
}
