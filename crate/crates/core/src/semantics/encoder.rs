//! Toy vision-language encoder: patch embedding, LoRA-augmented attention,
//! learned queries cross-attending to image features, and a pooled output.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::perception::LaneRaster;
use crate::semantics::caption::Caption;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub d: usize,
    pub lora_rank: usize,
    pub n_queries: usize,
    pub patch: usize,
    pub seed: u64,
    /// Initialize LoRA B factors with this standard deviation instead of zero.
    pub lora_b_std: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { d: 32, lora_rank: 4, n_queries: 4, patch: 16, seed: 7, lora_b_std: 0.0 }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.n_queries == 0 || self.patch == 0 {
            return Err(Error::Config("semantics.d, n_queries and patch must be positive".into()));
        }
        if self.lora_rank == 0 || self.lora_rank >= self.d {
            return Err(Error::Config("semantics.lora_rank must satisfy 0 < r < d".into()));
        }
        if !(self.lora_b_std >= 0.0 && self.lora_b_std.is_finite()) {
            return Err(Error::Config("semantics.lora_b_std must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// Projections of one attention block. The LoRA factors perturb the query
/// and key projections as `W + B A`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionBlock {
    pub w_q: Mat,
    pub w_k: Mat,
    pub w_v: Mat,
    /// r x d.
    pub a_q: Mat,
    pub a_k: Mat,
    /// d x r.
    pub b_q: Mat,
    pub b_k: Mat,
}

impl AttentionBlock {
    fn random(d: usize, r: usize, b_std: f64, rng: &mut ChaCha8Rng) -> Self {
        let w = 1.0 / (d as f64).sqrt();
        Self {
            w_q: gaussian(d, d, w, rng),
            w_k: gaussian(d, d, w, rng),
            w_v: gaussian(d, d, w, rng),
            a_q: gaussian(r, d, w, rng),
            a_k: gaussian(r, d, w, rng),
            b_q: gaussian(d, r, b_std, rng),
            b_k: gaussian(d, r, b_std, rng),
        }
    }

    pub fn lora_delta_q(&self) -> Mat {
        self.b_q.matmul(&self.a_q)
    }

    pub fn lora_delta_k(&self) -> Mat {
        self.b_k.matmul(&self.a_k)
    }

    pub fn dim(&self) -> usize {
        self.w_q.rows
    }
}

fn gaussian(rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> Mat {
    if std == 0.0 {
        return Mat::zeros(rows, cols);
    }
    let n = Normal::new(0.0, std).expect("positive std");
    Mat::from_fn(rows, cols, |_, _| n.sample(rng))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderWeights {
    pub config: EncoderConfig,
    /// vocab x d.
    pub token_embedding: Mat,
    /// patch^2 x d.
    pub patch_proj: Mat,
    pub patch_bias: Vec<f64>,
    pub query_self: AttentionBlock,
    pub cross: AttentionBlock,
    pub text_self: AttentionBlock,
    /// m x d.
    pub q_learned: Mat,
    /// d x d.
    pub out_proj: Mat,
}

impl EncoderWeights {
    pub fn new(vocab_size: usize, cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let (d, r) = (cfg.d, cfg.lora_rank);
        let pp = cfg.patch * cfg.patch;
        let token_embedding = gaussian(vocab_size, d, 1.0, &mut rng);
        let patch_proj = gaussian(pp, d, 1.0 / (pp as f64).sqrt(), &mut rng);
        let patch_bias = gaussian(1, d, 0.1, &mut rng).data;
        let query_self = AttentionBlock::random(d, r, cfg.lora_b_std, &mut rng);
        let cross = AttentionBlock::random(d, r, cfg.lora_b_std, &mut rng);
        let text_self = AttentionBlock::random(d, r, cfg.lora_b_std, &mut rng);
        let q_learned = gaussian(cfg.n_queries, d, 1.0, &mut rng);
        let out_proj = gaussian(d, d, 1.0 / (d as f64).sqrt(), &mut rng);
        Ok(Self { config: cfg.clone(), token_embedding, patch_proj, patch_bias, query_self, cross, text_self, q_learned, out_proj })
    }

    pub fn d(&self) -> usize {
        self.config.d
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemanticEmbedding {
    pub e: Vec<f64>,
}

/// Non-overlapping row-major patches, each flattened row-major and mapped
/// through `patch_proj` plus bias.
pub fn encode_image_features(raster: &LaneRaster, w: &EncoderWeights) -> Result<Mat> {
    let p = w.config.patch;
    if raster.height % p != 0 || raster.width % p != 0 {
        return Err(Error::InvalidArgument(format!(
            "raster {}x{} is not divisible into {p}x{p} patches",
            raster.height, raster.width
        )));
    }
    let (ph, pw) = (raster.height / p, raster.width / p);
    let mut patches = Mat::zeros(ph * pw, p * p);
    for bi in 0..ph {
        for bj in 0..pw {
            let row = patches.row_mut(bi * pw + bj);
            for i in 0..p {
                for j in 0..p {
                    row[i * p + j] = raster.get(bi * p + i, bj * p + j);
                }
            }
        }
    }
    let mut feats = patches.matmul(&w.patch_proj);
    for i in 0..feats.rows {
        for (f, b) in feats.row_mut(i).iter_mut().zip(&w.patch_bias) {
            *f += b;
        }
    }
    Ok(feats)
}

/// Row-wise softmax, max-subtracted.
pub fn softmax_rows(s: &Mat) -> Mat {
    let mut out = s.clone();
    for i in 0..out.rows {
        let row = out.row_mut(i);
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
    out
}

fn check_input(x: &Mat, d: usize, what: &'static str) -> Result<()> {
    if x.cols != d {
        return Err(Error::Shape { context: what, expected: d, got: x.cols });
    }
    if x.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(what));
    }
    Ok(())
}

/// Attention of queries `xq` over keys/values `xkv`. Returns the output and
/// the softmax weights.
pub fn attention_with_weights(xq: &Mat, xkv: &Mat, block: &AttentionBlock, use_lora: bool) -> Result<(Mat, Mat)> {
    let d = block.dim();
    check_input(xq, d, "attention queries")?;
    check_input(xkv, d, "attention keys")?;
    let (wq, wk) = if use_lora {
        (block.w_q.add(&block.lora_delta_q()), block.w_k.add(&block.lora_delta_k()))
    } else {
        (block.w_q.clone(), block.w_k.clone())
    };
    let q = xq.matmul(&wq);
    let k = xkv.matmul(&wk);
    let v = xkv.matmul(&block.w_v);
    let p = softmax_rows(&q.matmul_t(&k).scale(1.0 / (d as f64).sqrt()));
    Ok((p.matmul(&v), p))
}

pub fn attention(xq: &Mat, xkv: &Mat, block: &AttentionBlock, use_lora: bool) -> Result<Mat> {
    attention_with_weights(xq, xkv, block, use_lora).map(|(o, _)| o)
}

/// LoRA-augmented self-attention.
pub fn lora_attention(x: &Mat, block: &AttentionBlock, use_lora: bool) -> Result<Mat> {
    attention(x, x, block, use_lora)
}

/// Full pipeline. With `include_image = false` the image features are
/// replaced by zeros, which removes the raster's influence entirely.
pub fn encode_semantics_with(caption: &Caption, raster: &LaneRaster, w: &EncoderWeights, include_image: bool) -> Result<SemanticEmbedding> {
    let d = w.d();
    let q_prime = lora_attention(&w.q_learned, &w.query_self, true)?;
    let v_img = if include_image {
        encode_image_features(raster, w)?
    } else {
        let p = w.config.patch;
        Mat::zeros((raster.height / p).max(1) * (raster.width / p).max(1), d)
    };
    let v_prime = attention(&q_prime, &v_img, &w.cross, false)?;

    let ids = caption.content_ids();
    let mut pooled_in = v_prime;
    if !ids.is_empty() {
        let mut emb = Mat::zeros(ids.len(), d);
        for (i, &id) in ids.iter().enumerate() {
            if id >= w.token_embedding.rows {
                return Err(Error::InvalidArgument(format!("token id {id} out of range")));
            }
            emb.row_mut(i).copy_from_slice(w.token_embedding.row(id));
        }
        let t = lora_attention(&emb, &w.text_self, true)?;
        pooled_in = t.vstack(&pooled_in);
    }
    let pooled = Mat::from_vec(1, d, pooled_in.mean_rows());
    let e = pooled.matmul(&w.out_proj).data;
    if e.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("semantic embedding"));
    }
    Ok(SemanticEmbedding { e })
}

pub fn encode_semantics(caption: &Caption, raster: &LaneRaster, w: &EncoderWeights) -> Result<SemanticEmbedding> {
    encode_semantics_with(caption, raster, w, true)
}
