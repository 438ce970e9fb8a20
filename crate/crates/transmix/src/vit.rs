//! Minimal vision transformer with a class token.
//!
//! The model is a stack of pre-norm blocks (multi-head self-attention plus
//! an MLP, both with residual connections) over patch embeddings. Every
//! forward pass records, per block and per head, the attention row from the
//! class token to all tokens; the head-averaged patch attention derived from
//! it drives the attention-weighted label assignment in `mix_augment` and
//! the saliency orderings in `robustness_eval`.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Tensor};

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub image_h: usize,
    pub image_w: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub depth: usize,
    pub num_classes: usize,
    pub mlp_ratio: f64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_h == 0 || self.image_w == 0 {
            return Err(Error::Config("image and patch sizes must be positive".into()));
        }
        if self.image_h % self.patch_size != 0 || self.image_w % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image {}x{} not divisible by patch size {}",
                self.image_h, self.image_w, self.patch_size
            )));
        }
        if self.embed_dim == 0 || self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "embed dim {} must be a positive multiple of head count {}",
                self.embed_dim, self.heads
            )));
        }
        if self.depth == 0 {
            return Err(Error::Config("depth must be at least 1".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("need at least 2 classes".into()));
        }
        if self.channels == 0 {
            return Err(Error::Config("need at least 1 channel".into()));
        }
        if !(self.mlp_ratio > 0.0) {
            return Err(Error::Config("mlp_ratio must be positive".into()));
        }
        Ok(())
    }

    /// Patch grid dimensions (rows, cols).
    pub fn patch_grid(&self) -> (usize, usize) {
        (self.image_h / self.patch_size, self.image_w / self.patch_size)
    }

    pub fn num_patches(&self) -> usize {
        let (h, w) = self.patch_grid();
        h * w
    }

    /// Token count including the class token.
    pub fn tokens(&self) -> usize {
        1 + self.num_patches()
    }

    /// Flattened per-patch feature length.
    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn mlp_hidden(&self) -> usize {
        ((self.embed_dim as f64 * self.mlp_ratio).round() as usize).max(1)
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.image_h * self.image_w
    }
}

#[derive(Clone)]
pub struct NormParams<T: Real> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

/// One attention head's projection matrices (embed_dim × head_dim each).
#[derive(Clone)]
pub struct HeadParams<T: Real> {
    pub wq: Tensor<T>,
    pub bq: Tensor<T>,
    pub wk: Tensor<T>,
    pub bk: Tensor<T>,
    pub wv: Tensor<T>,
    pub bv: Tensor<T>,
}

#[derive(Clone)]
pub struct BlockParams<T: Real> {
    pub norm1: NormParams<T>,
    pub heads: Vec<HeadParams<T>>,
    pub out_weight: Tensor<T>,
    pub out_bias: Tensor<T>,
    pub norm2: NormParams<T>,
    pub mlp_w1: Tensor<T>,
    pub mlp_b1: Tensor<T>,
    pub mlp_w2: Tensor<T>,
    pub mlp_b2: Tensor<T>,
}

/// All trainable state of the model.
#[derive(Clone)]
pub struct Parameters<T: Real> {
    pub patch_weight: Tensor<T>,
    pub patch_bias: Tensor<T>,
    pub class_token: Tensor<T>,
    pub pos_embed: Tensor<T>,
    pub blocks: Vec<BlockParams<T>>,
    pub final_norm: NormParams<T>,
    pub head_weight: Tensor<T>,
    pub head_bias: Tensor<T>,
}

pub const LAYER_NORM_EPS: f64 = 1e-6;

fn trunc_normal<T: Real>(rng: &mut ChaCha8Rng, std: f64) -> T {
    // Resample outside ±2σ.
    loop {
        let v: f64 = rng.sample::<f64, _>(StandardNormal) * std;
        if v.abs() <= 2.0 * std {
            return T::from_f64(v);
        }
    }
}

fn weight<T: Real>(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let values: Vec<T> = (0..n).map(|_| trunc_normal(rng, 0.02)).collect();
    Tensor::param(shape, values).expect("positive dims")
}

fn zeros_param<T: Real>(shape: Vec<usize>) -> Tensor<T> {
    let n: usize = shape.iter().product();
    Tensor::param(shape, vec![T::zero(); n]).expect("positive dims")
}

fn ones_param<T: Real>(shape: Vec<usize>) -> Tensor<T> {
    let n: usize = shape.iter().product();
    Tensor::param(shape, vec![T::one(); n]).expect("positive dims")
}

impl<T: Real> Parameters<T> {
    /// Truncated-normal (std 0.02) weights, zero biases and class token.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.embed_dim;
        let dk = cfg.head_dim();
        let blocks = (0..cfg.depth)
            .map(|_| BlockParams {
                norm1: NormParams {
                    gamma: ones_param(vec![d]),
                    beta: zeros_param(vec![d]),
                },
                heads: (0..cfg.heads)
                    .map(|_| HeadParams {
                        wq: weight(&mut rng, vec![d, dk]),
                        bq: zeros_param(vec![dk]),
                        wk: weight(&mut rng, vec![d, dk]),
                        bk: zeros_param(vec![dk]),
                        wv: weight(&mut rng, vec![d, dk]),
                        bv: zeros_param(vec![dk]),
                    })
                    .collect(),
                out_weight: weight(&mut rng, vec![d, d]),
                out_bias: zeros_param(vec![d]),
                norm2: NormParams {
                    gamma: ones_param(vec![d]),
                    beta: zeros_param(vec![d]),
                },
                mlp_w1: weight(&mut rng, vec![d, cfg.mlp_hidden()]),
                mlp_b1: zeros_param(vec![cfg.mlp_hidden()]),
                mlp_w2: weight(&mut rng, vec![cfg.mlp_hidden(), d]),
                mlp_b2: zeros_param(vec![d]),
            })
            .collect();
        Ok(Parameters {
            patch_weight: weight(&mut rng, vec![cfg.patch_dim(), d]),
            patch_bias: zeros_param(vec![d]),
            class_token: zeros_param(vec![1, d]),
            pos_embed: weight(&mut rng, vec![cfg.tokens(), d]),
            blocks,
            final_norm: NormParams {
                gamma: ones_param(vec![d]),
                beta: zeros_param(vec![d]),
            },
            head_weight: weight(&mut rng, vec![d, cfg.num_classes]),
            head_bias: zeros_param(vec![cfg.num_classes]),
        })
    }

    /// Canonical (name, tensor) listing; the order is fixed and drives the
    /// optimizer state layout and the checkpoint file.
    pub fn named(&self) -> Vec<(String, Tensor<T>)> {
        let mut out: Vec<(String, Tensor<T>)> = vec![
            ("patch_proj.weight".into(), self.patch_weight.clone()),
            ("patch_proj.bias".into(), self.patch_bias.clone()),
            ("class_token".into(), self.class_token.clone()),
            ("pos_embed".into(), self.pos_embed.clone()),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("block{i}.norm1.gamma"), b.norm1.gamma.clone()));
            out.push((format!("block{i}.norm1.beta"), b.norm1.beta.clone()));
            for (h, head) in b.heads.iter().enumerate() {
                out.push((format!("block{i}.head{h}.wq"), head.wq.clone()));
                out.push((format!("block{i}.head{h}.bq"), head.bq.clone()));
                out.push((format!("block{i}.head{h}.wk"), head.wk.clone()));
                out.push((format!("block{i}.head{h}.bk"), head.bk.clone()));
                out.push((format!("block{i}.head{h}.wv"), head.wv.clone()));
                out.push((format!("block{i}.head{h}.bv"), head.bv.clone()));
            }
            out.push((format!("block{i}.attn_out.weight"), b.out_weight.clone()));
            out.push((format!("block{i}.attn_out.bias"), b.out_bias.clone()));
            out.push((format!("block{i}.norm2.gamma"), b.norm2.gamma.clone()));
            out.push((format!("block{i}.norm2.beta"), b.norm2.beta.clone()));
            out.push((format!("block{i}.mlp.w1"), b.mlp_w1.clone()));
            out.push((format!("block{i}.mlp.b1"), b.mlp_b1.clone()));
            out.push((format!("block{i}.mlp.w2"), b.mlp_w2.clone()));
            out.push((format!("block{i}.mlp.b2"), b.mlp_b2.clone()));
        }
        out.push(("final_norm.gamma".into(), self.final_norm.gamma.clone()));
        out.push(("final_norm.beta".into(), self.final_norm.beta.clone()));
        out.push(("head.weight".into(), self.head_weight.clone()));
        out.push(("head.bias".into(), self.head_bias.clone()));
        out
    }

    pub fn zero_grads(&self) {
        for (_, t) in self.named() {
            t.zero_grad();
        }
    }

    pub fn all_finite(&self) -> bool {
        self.named().iter().all(|(_, t)| t.is_finite())
    }

    pub fn num_values(&self) -> usize {
        self.named().iter().map(|(_, t)| t.numel()).sum()
    }
}

/// Split an image into non-overlapping patches, row-major over the patch
/// grid; within a patch, features are laid out channel-major. The inverse
/// [`unpatchify`] reassembles the image exactly.
pub fn patchify<T: Real>(image: &[T], cfg: &ModelConfig) -> Result<Tensor<T>> {
    cfg.validate()?;
    if image.len() != cfg.image_len() {
        return Err(Error::Config(format!(
            "image has {} values, config expects {}",
            image.len(),
            cfg.image_len()
        )));
    }
    let ps = cfg.patch_size;
    let (grid_h, grid_w) = cfg.patch_grid();
    let (h, w, c) = (cfg.image_h, cfg.image_w, cfg.channels);
    let mut out = vec![T::zero(); cfg.num_patches() * cfg.patch_dim()];
    let mut idx = 0;
    for gy in 0..grid_h {
        for gx in 0..grid_w {
            for ch in 0..c {
                for py in 0..ps {
                    let src = ch * h * w + (gy * ps + py) * w + gx * ps;
                    for px in 0..ps {
                        out[idx] = image[src + px];
                        idx += 1;
                    }
                }
            }
        }
    }
    Tensor::from_vec(vec![cfg.num_patches(), cfg.patch_dim()], out)
}

/// Inverse of [`patchify`].
pub fn unpatchify<T: Real>(patches: &[T], cfg: &ModelConfig) -> Result<Vec<T>> {
    if patches.len() != cfg.num_patches() * cfg.patch_dim() {
        return Err(Error::Config(format!(
            "patch matrix has {} values, config expects {}",
            patches.len(),
            cfg.num_patches() * cfg.patch_dim()
        )));
    }
    let ps = cfg.patch_size;
    let (grid_h, grid_w) = cfg.patch_grid();
    let (h, w, c) = (cfg.image_h, cfg.image_w, cfg.channels);
    let mut image = vec![T::zero(); cfg.image_len()];
    let mut idx = 0;
    for gy in 0..grid_h {
        for gx in 0..grid_w {
            for ch in 0..c {
                for py in 0..ps {
                    let dst = ch * h * w + (gy * ps + py) * w + gx * ps;
                    for px in 0..ps {
                        image[dst + px] = patches[idx];
                        idx += 1;
                    }
                }
            }
        }
    }
    Ok(image)
}

/// z = [class_token; patches·W + b] + positional embedding.
pub fn embed<T: Real>(
    tape: &mut Tape<T>,
    patches: &Tensor<T>,
    params: &Parameters<T>,
) -> Result<Tensor<T>> {
    let proj = tape.matmul(patches, &params.patch_weight)?;
    let proj = tape.add_row(&proj, &params.patch_bias)?;
    let tokens = tape.concat_rows(&[params.class_token.clone(), proj])?;
    tape.add(&tokens, &params.pos_embed)
}

/// One pre-norm transformer block. Returns the new token matrix and each
/// head's full token-to-token attention matrix.
pub fn attention_block<T: Real>(
    tape: &mut Tape<T>,
    z: &Tensor<T>,
    block: &BlockParams<T>,
    head_dim: usize,
) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
    let normed = tape.layer_norm(z, &block.norm1.gamma, &block.norm1.beta, T::from_f64(LAYER_NORM_EPS))?;
    let scale = T::from_f64(1.0 / (head_dim as f64).sqrt());
    let mut attns = Vec::with_capacity(block.heads.len());
    let mut head_outs = Vec::with_capacity(block.heads.len());
    for head in &block.heads {
        let q = tape.matmul(&normed, &head.wq)?;
        let q = tape.add_row(&q, &head.bq)?;
        let k = tape.matmul(&normed, &head.wk)?;
        let k = tape.add_row(&k, &head.bk)?;
        let v = tape.matmul(&normed, &head.wv)?;
        let v = tape.add_row(&v, &head.bv)?;
        let scores = tape.matmul_bt(&q, &k)?;
        let scores = tape.scale(&scores, scale);
        let attn = tape.softmax_rows(&scores)?;
        head_outs.push(tape.matmul(&attn, &v)?);
        attns.push(attn);
    }
    let merged = tape.concat_cols(&head_outs)?;
    let projected = tape.matmul(&merged, &block.out_weight)?;
    let projected = tape.add_row(&projected, &block.out_bias)?;
    let z = tape.add(z, &projected)?;

    let normed2 = tape.layer_norm(&z, &block.norm2.gamma, &block.norm2.beta, T::from_f64(LAYER_NORM_EPS))?;
    let hidden = tape.matmul(&normed2, &block.mlp_w1)?;
    let hidden = tape.add_row(&hidden, &block.mlp_b1)?;
    let activated = tape.gelu(&hidden);
    let mlp_out = tape.matmul(&activated, &block.mlp_w2)?;
    let mlp_out = tape.add_row(&mlp_out, &block.mlp_b2)?;
    let z = tape.add(&z, &mlp_out)?;
    Ok((z, attns))
}

/// Head-averaged class-to-patch attention: mean over heads of the class
/// row's entries 1..p. The class-to-class entry is dropped, not
/// renormalized.
pub fn class_attention(head_class_rows: &[Vec<f64>]) -> Vec<f64> {
    let heads = head_class_rows.len();
    let tokens = head_class_rows[0].len();
    let mut out = vec![0.0; tokens - 1];
    for row in head_class_rows {
        for (o, &v) in out.iter_mut().zip(&row[1..]) {
            *o += v;
        }
    }
    for o in &mut out {
        *o /= heads as f64;
    }
    out
}

/// Product of head-averaged attention matrices across blocks (later blocks
/// multiplied on the left); returns the class row's patch entries. Factors
/// are the raw attention matrices, without a residual-connection correction.
pub fn attention_rollout(mean_matrices: &[Vec<f64>], tokens: usize) -> Vec<f64> {
    let mut product = mean_matrices[0].clone();
    for mat in &mean_matrices[1..] {
        let mut next = vec![0.0; tokens * tokens];
        for i in 0..tokens {
            for t in 0..tokens {
                let m_it = mat[i * tokens + t];
                for j in 0..tokens {
                    next[i * tokens + j] += m_it * product[t * tokens + j];
                }
            }
        }
        product = next;
    }
    product[1..tokens].to_vec()
}

/// Attention record for one image and one block.
#[derive(Debug, Clone)]
pub struct BlockAttention {
    /// Per head: the class token's attention row over all 1+p tokens.
    pub head_class_rows: Vec<Vec<f64>>,
    /// Head-averaged full (1+p)×(1+p) attention matrix (rollout input).
    pub mean_matrix: Vec<f64>,
}

/// Attention record for one image across all blocks.
#[derive(Debug, Clone)]
pub struct ClassAttention {
    pub tokens: usize,
    pub blocks: Vec<BlockAttention>,
}

impl ClassAttention {
    /// Head-averaged patch attention of one block (length p, values in [0,1]).
    pub fn patch_attention(&self, block: usize) -> Vec<f64> {
        class_attention(&self.blocks[block].head_class_rows)
    }

    pub fn last_patch_attention(&self) -> Vec<f64> {
        self.patch_attention(self.blocks.len() - 1)
    }

    pub fn rollout(&self) -> Vec<f64> {
        let mats: Vec<Vec<f64>> = self.blocks.iter().map(|b| b.mean_matrix.clone()).collect();
        attention_rollout(&mats, self.tokens)
    }
}

/// Batch forward output: logits plus per-image attention records.
pub struct ForwardOutput<T: Real> {
    pub logits: Tensor<T>,
    pub attention: Vec<ClassAttention>,
}

fn record_attention<T: Real>(attns: &[Tensor<T>], tokens: usize) -> BlockAttention {
    let mut head_class_rows = Vec::with_capacity(attns.len());
    let mut mean_matrix = vec![0.0f64; tokens * tokens];
    for attn in attns {
        let values = attn.to_vec();
        head_class_rows.push(values[..tokens].iter().map(|v| v.as_f64()).collect());
        for (m, v) in mean_matrix.iter_mut().zip(&values) {
            *m += v.as_f64();
        }
    }
    let inv = 1.0 / attns.len() as f64;
    for m in &mut mean_matrix {
        *m *= inv;
    }
    BlockAttention {
        head_class_rows,
        mean_matrix,
    }
}

/// Full model forward over a batch of flat C×H×W images.
pub fn forward<T: Real>(
    tape: &mut Tape<T>,
    images: &[Vec<T>],
    params: &Parameters<T>,
    cfg: &ModelConfig,
) -> Result<ForwardOutput<T>> {
    if images.is_empty() {
        return Err(Error::Contract("forward on an empty batch".into()));
    }
    let tokens = cfg.tokens();
    let mut per_image_logits = Vec::with_capacity(images.len());
    let mut attention = Vec::with_capacity(images.len());
    for image in images {
        let patches = patchify(image, cfg)?;
        let mut z = embed(tape, &patches, params)?;
        let mut blocks = Vec::with_capacity(cfg.depth);
        for block in &params.blocks {
            let (z_next, attns) = attention_block(tape, &z, block, cfg.head_dim())?;
            blocks.push(record_attention(&attns, tokens));
            z = z_next;
        }
        let normed = tape.layer_norm(
            &z,
            &params.final_norm.gamma,
            &params.final_norm.beta,
            T::from_f64(LAYER_NORM_EPS),
        )?;
        let cls = tape.slice_rows(&normed, 0, 1)?;
        let logits = tape.matmul(&cls, &params.head_weight)?;
        let logits = tape.add_row(&logits, &params.head_bias)?;
        per_image_logits.push(logits);
        attention.push(ClassAttention { tokens, blocks });
    }
    let logits = tape.concat_rows(&per_image_logits)?;
    Ok(ForwardOutput { logits, attention })
}
