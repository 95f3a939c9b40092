//! Tiny visual and text transformers mapping images and token sequences into
//! one shared embedding space.
//!
//! Both encoders are pre-norm transformers: patchified pixels (visual) or
//! token lookups (text) plus learned absolute positions, `depth` blocks of
//! multi-head attention and a GELU MLP, a final layer norm, pooling, and a
//! linear projection to the shared width `H`. Outputs are intentionally left
//! unnormalized; cosine-space losses and evaluation normalize where they need
//! to.
//!
//! Sequences are processed one sample at a time on the tape. Text batches are
//! truncated to the longest real length in the batch and shorter rows mask
//! their padding columns out of attention with a large negative additive
//! constant, so padding never influences an embedding.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, UclError};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;
use crate::text::TokenizedText;

/// Additive attention-mask value for padding columns; large enough that the
/// masked weight underflows to exactly zero after softmax.
const MASK_VALUE: f64 = -1e9;
const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;
/// MLP expansion factor.
const MLP_EXPAND: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    MeanOverMask,
    FirstToken,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VisualEncoderConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub out_dim: usize,
}

impl VisualEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(UclError::config(format!(
                "image size {} must be a positive multiple of patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.heads == 0 || self.width % self.heads != 0 {
            return Err(UclError::config(format!(
                "width {} must be divisible by heads {}",
                self.width, self.heads
            )));
        }
        if self.width == 0 || self.depth == 0 || self.out_dim == 0 {
            return Err(UclError::config("width, depth, and out_dim must be positive"));
        }
        Ok(())
    }

    /// Patches per image: (image_size / patch_size)².
    pub fn patches(&self) -> usize {
        let g = self.image_size / self.patch_size;
        g * g
    }

    /// Flattened patch dimensionality: 3 channels x patch².
    pub fn patch_dim(&self) -> usize {
        3 * self.patch_size * self.patch_size
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextEncoderConfig {
    pub vocab_size: usize,
    pub max_len: usize,
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub out_dim: usize,
    pub pooling: Pooling,
}

impl TextEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 3 {
            return Err(UclError::config(
                "vocab_size must cover at least the reserved PAD/OOV/BOS ids",
            ));
        }
        if self.max_len == 0 {
            return Err(UclError::config("max_len must be positive"));
        }
        if self.heads == 0 || self.width % self.heads != 0 {
            return Err(UclError::config(format!(
                "width {} must be divisible by heads {}",
                self.width, self.heads
            )));
        }
        if self.width == 0 || self.depth == 0 || self.out_dim == 0 {
            return Err(UclError::config("width, depth, and out_dim must be positive"));
        }
        Ok(())
    }
}

/// Tape handles for every parameter, keyed by parameter name.
pub type ParamNodes = BTreeMap<String, NodeId>;

/// A visual and a text encoder sharing the output dimension `H`.
#[derive(Debug, Clone)]
pub struct EncoderPair {
    pub visual: VisualEncoderConfig,
    pub text: TextEncoderConfig,
    pub params: BTreeMap<String, Tensor>,
}

fn normal_tensor(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("valid std");
    let numel: usize = shape.iter().product();
    let data = (0..numel).map(|_| dist.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape/data agree")
}

fn push_block(
    params: &mut BTreeMap<String, Tensor>,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    width: usize,
) {
    let hidden = MLP_EXPAND * width;
    params.insert(format!("{prefix}.ln1.gain"), Tensor::filled(&[width], 1.0));
    params.insert(format!("{prefix}.ln1.bias"), Tensor::zeros(&[width]));
    // No bias on the key projection: softmax rows are shift-invariant, so a
    // key bias adds the same q·b to every logit in a row and its gradient is
    // identically zero — a dead parameter that only adds noise to finite-
    // difference checks.
    for proj in ["wq", "wk", "wv", "wo"] {
        params.insert(
            format!("{prefix}.attn.{proj}.weight"),
            normal_tensor(rng, &[width, width], INIT_STD),
        );
        if proj != "wk" {
            params.insert(format!("{prefix}.attn.{proj}.bias"), Tensor::zeros(&[width]));
        }
    }
    params.insert(format!("{prefix}.ln2.gain"), Tensor::filled(&[width], 1.0));
    params.insert(format!("{prefix}.ln2.bias"), Tensor::zeros(&[width]));
    params.insert(
        format!("{prefix}.mlp.fc1.weight"),
        normal_tensor(rng, &[width, hidden], INIT_STD),
    );
    params.insert(format!("{prefix}.mlp.fc1.bias"), Tensor::zeros(&[hidden]));
    params.insert(
        format!("{prefix}.mlp.fc2.weight"),
        normal_tensor(rng, &[hidden, width], INIT_STD),
    );
    params.insert(format!("{prefix}.mlp.fc2.bias"), Tensor::zeros(&[width]));
}

impl EncoderPair {
    /// Deterministically initialize both encoders from a seed: linear weights
    /// and embeddings from N(0, 0.02), norm gains 1, biases 0.
    pub fn init(visual: VisualEncoderConfig, text: TextEncoderConfig, seed: u64) -> Result<Self> {
        visual.validate()?;
        text.validate()?;
        if visual.out_dim != text.out_dim {
            return Err(UclError::config(format!(
                "shared-space mismatch: visual out_dim {} vs text out_dim {}",
                visual.out_dim, text.out_dim
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = BTreeMap::new();

        params.insert(
            "visual.patch_embed.weight".to_string(),
            normal_tensor(&mut rng, &[visual.patch_dim(), visual.width], INIT_STD),
        );
        params.insert(
            "visual.patch_embed.bias".to_string(),
            Tensor::zeros(&[visual.width]),
        );
        params.insert(
            "visual.pos".to_string(),
            normal_tensor(&mut rng, &[visual.patches(), visual.width], INIT_STD),
        );
        for d in 0..visual.depth {
            push_block(&mut params, &mut rng, &format!("visual.block{d}"), visual.width);
        }
        params.insert(
            "visual.ln_out.gain".to_string(),
            Tensor::filled(&[visual.width], 1.0),
        );
        params.insert("visual.ln_out.bias".to_string(), Tensor::zeros(&[visual.width]));
        params.insert(
            "visual.proj.weight".to_string(),
            normal_tensor(&mut rng, &[visual.width, visual.out_dim], INIT_STD),
        );
        params.insert("visual.proj.bias".to_string(), Tensor::zeros(&[visual.out_dim]));

        params.insert(
            "text.tok_embed".to_string(),
            normal_tensor(&mut rng, &[text.vocab_size, text.width], INIT_STD),
        );
        params.insert(
            "text.pos".to_string(),
            normal_tensor(&mut rng, &[text.max_len, text.width], INIT_STD),
        );
        for d in 0..text.depth {
            push_block(&mut params, &mut rng, &format!("text.block{d}"), text.width);
        }
        params.insert(
            "text.ln_out.gain".to_string(),
            Tensor::filled(&[text.width], 1.0),
        );
        params.insert("text.ln_out.bias".to_string(), Tensor::zeros(&[text.width]));
        params.insert(
            "text.proj.weight".to_string(),
            normal_tensor(&mut rng, &[text.width, text.out_dim], INIT_STD),
        );
        params.insert("text.proj.bias".to_string(), Tensor::zeros(&[text.out_dim]));

        Ok(EncoderPair {
            visual,
            text,
            params,
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Register every parameter on a tape. With `trainable` set the leaves
    /// accumulate gradients during backward.
    pub fn leaves(&self, tape: &mut Tape, trainable: bool) -> ParamNodes {
        self.params
            .iter()
            .map(|(name, tensor)| (name.clone(), tape.leaf(tensor.clone(), trainable)))
            .collect()
    }
}

fn node(nodes: &ParamNodes, name: &str) -> Result<NodeId> {
    nodes
        .get(name)
        .copied()
        .ok_or_else(|| UclError::contract(format!("missing parameter node {name:?}")))
}

fn linear(tape: &mut Tape, x: NodeId, nodes: &ParamNodes, prefix: &str) -> Result<NodeId> {
    let w = node(nodes, &format!("{prefix}.weight"))?;
    let b = node(nodes, &format!("{prefix}.bias"))?;
    let y = tape.matmul(x, w)?;
    tape.add_row_vec(y, b)
}

/// One pre-norm transformer block over a `[T x width]` sequence. `mask` is an
/// optional `[T x T]` additive attention bias.
fn block_forward(
    tape: &mut Tape,
    nodes: &ParamNodes,
    prefix: &str,
    x: NodeId,
    mask: Option<NodeId>,
    heads: usize,
) -> Result<NodeId> {
    let width = tape.value(x).cols();
    let dh = width / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let ln1g = node(nodes, &format!("{prefix}.ln1.gain"))?;
    let ln1b = node(nodes, &format!("{prefix}.ln1.bias"))?;
    let h = tape.layer_norm_rows(x, ln1g, ln1b, LN_EPS)?;
    let q = linear(tape, h, nodes, &format!("{prefix}.attn.wq"))?;
    let wk = node(nodes, &format!("{prefix}.attn.wk.weight"))?;
    let k = tape.matmul(h, wk)?;
    let v = linear(tape, h, nodes, &format!("{prefix}.attn.wv"))?;

    let mut head_outputs = Vec::with_capacity(heads);
    for hi in 0..heads {
        let qh = tape.slice_cols(q, hi * dh, dh)?;
        let kh = tape.slice_cols(k, hi * dh, dh)?;
        let vh = tape.slice_cols(v, hi * dh, dh)?;
        let kt = tape.transpose(kh)?;
        let raw = tape.matmul(qh, kt)?;
        let mut scores = tape.scale(raw, scale);
        if let Some(m) = mask {
            scores = tape.add(scores, m)?;
        }
        let attn = tape.softmax_rows(scores)?;
        head_outputs.push(tape.matmul(attn, vh)?);
    }
    let merged = tape.concat_cols(&head_outputs)?;
    let attn_out = linear(tape, merged, nodes, &format!("{prefix}.attn.wo"))?;
    let x = tape.add(x, attn_out)?;

    let ln2g = node(nodes, &format!("{prefix}.ln2.gain"))?;
    let ln2b = node(nodes, &format!("{prefix}.ln2.bias"))?;
    let h = tape.layer_norm_rows(x, ln2g, ln2b, LN_EPS)?;
    let h = linear(tape, h, nodes, &format!("{prefix}.mlp.fc1"))?;
    let h = tape.gelu(h);
    let mlp_out = linear(tape, h, nodes, &format!("{prefix}.mlp.fc2"))?;
    tape.add(x, mlp_out)
}

/// Flatten one image of a `[B x 3 x S x S]` batch into `[P x patch_dim]`
/// rows, channel-major within each patch. Pure data movement, off-tape.
fn patchify(images: &Tensor, b: usize, cfg: &VisualEncoderConfig) -> Tensor {
    let s = cfg.image_size;
    let p = cfg.patch_size;
    let grid = s / p;
    let image = &images.data()[b * 3 * s * s..(b + 1) * 3 * s * s];
    let mut data = Vec::with_capacity(cfg.patches() * cfg.patch_dim());
    for gy in 0..grid {
        for gx in 0..grid {
            for c in 0..3 {
                for py in 0..p {
                    for px in 0..p {
                        let y = gy * p + py;
                        let x = gx * p + px;
                        data.push(image[c * s * s + y * s + x]);
                    }
                }
            }
        }
    }
    Tensor::new(vec![cfg.patches(), cfg.patch_dim()], data).expect("patch layout")
}

fn check_image_batch(images: &Tensor, cfg: &VisualEncoderConfig) -> Result<usize> {
    let shape = images.shape();
    if shape.len() != 4 || shape[1] != 3 || shape[2] != cfg.image_size || shape[3] != cfg.image_size
    {
        return Err(UclError::shape(format!(
            "expected image batch [B x 3 x {0} x {0}], got {shape:?}",
            cfg.image_size
        )));
    }
    Ok(shape[0])
}

/// Run the visual trunk for one image: `[P x width]` sequence after the final
/// layer norm, before pooling/projection.
fn visual_trunk(
    tape: &mut Tape,
    cfg: &VisualEncoderConfig,
    nodes: &ParamNodes,
    images: &Tensor,
    b: usize,
) -> Result<NodeId> {
    let patches = tape.constant(patchify(images, b, cfg));
    let embedded = linear(tape, patches, nodes, "visual.patch_embed")?;
    let pos = node(nodes, "visual.pos")?;
    let mut x = tape.add(embedded, pos)?;
    for d in 0..cfg.depth {
        x = block_forward(tape, nodes, &format!("visual.block{d}"), x, None, cfg.heads)?;
    }
    let g = node(nodes, "visual.ln_out.gain")?;
    let bias = node(nodes, "visual.ln_out.bias")?;
    tape.layer_norm_rows(x, g, bias, LN_EPS)
}

/// Encode an image batch to `[B x H]` embeddings (unnormalized).
pub fn encode_images(
    tape: &mut Tape,
    cfg: &VisualEncoderConfig,
    nodes: &ParamNodes,
    images: &Tensor,
) -> Result<NodeId> {
    let batch = check_image_batch(images, cfg)?;
    if batch == 0 {
        return Ok(tape.constant(Tensor::zeros(&[0, cfg.out_dim])));
    }
    let mut rows = Vec::with_capacity(batch);
    for b in 0..batch {
        let trunk = visual_trunk(tape, cfg, nodes, images, b)?;
        let pooled = tape.mean_rows(trunk)?;
        rows.push(linear(tape, pooled, nodes, "visual.proj")?);
    }
    tape.concat_rows(&rows)
}

/// Per-patch embeddings projected to `H`: a `[B*P x H]` tensor, image-major
/// row order. The mean over an image's `P` rows equals its `encode_images`
/// embedding because the projection is affine.
pub fn encode_feature_map(
    tape: &mut Tape,
    cfg: &VisualEncoderConfig,
    nodes: &ParamNodes,
    images: &Tensor,
) -> Result<NodeId> {
    let batch = check_image_batch(images, cfg)?;
    if batch == 0 {
        return Ok(tape.constant(Tensor::zeros(&[0, cfg.out_dim])));
    }
    let mut maps = Vec::with_capacity(batch);
    for b in 0..batch {
        let trunk = visual_trunk(tape, cfg, nodes, images, b)?;
        maps.push(linear(tape, trunk, nodes, "visual.proj")?);
    }
    tape.concat_rows(&maps)
}

/// Encode a token batch to `[B x H]` embeddings (unnormalized). All rows must
/// be tokenized to exactly `max_len`; ids must be inside the vocabulary.
pub fn encode_texts(
    tape: &mut Tape,
    cfg: &TextEncoderConfig,
    nodes: &ParamNodes,
    tokens: &[TokenizedText],
) -> Result<NodeId> {
    for t in tokens {
        if t.ids.len() != cfg.max_len {
            return Err(UclError::contract(format!(
                "token row has length {}, expected max_len {}",
                t.ids.len(),
                cfg.max_len
            )));
        }
        if t.valid_len == 0 || t.valid_len > cfg.max_len {
            return Err(UclError::contract(format!(
                "token row valid_len {} out of range 1..={}",
                t.valid_len, cfg.max_len
            )));
        }
        for &id in &t.ids {
            if id >= cfg.vocab_size {
                return Err(UclError::Vocab {
                    id,
                    vocab_size: cfg.vocab_size,
                });
            }
        }
    }
    if tokens.is_empty() {
        return Ok(tape.constant(Tensor::zeros(&[0, cfg.out_dim])));
    }
    // Truncate the whole batch to its longest real row; shorter rows mask the
    // remaining padding columns out of attention.
    let seq_len = tokens.iter().map(|t| t.valid_len).max().unwrap();

    let embed = node(nodes, "text.tok_embed")?;
    let pos_table = node(nodes, "text.pos")?;
    let pos = tape.slice_rows(pos_table, 0, seq_len)?;
    let g = node(nodes, "text.ln_out.gain")?;
    let bias = node(nodes, "text.ln_out.bias")?;

    let mut rows = Vec::with_capacity(tokens.len());
    for t in tokens {
        let looked_up = tape.gather_rows(embed, &t.ids[..seq_len])?;
        let mut x = tape.add(looked_up, pos)?;
        let mask = if t.valid_len < seq_len {
            let mut m = Tensor::zeros(&[seq_len, seq_len]);
            for i in 0..seq_len {
                for j in t.valid_len..seq_len {
                    m.data_mut()[i * seq_len + j] = MASK_VALUE;
                }
            }
            Some(tape.constant(m))
        } else {
            None
        };
        for d in 0..cfg.depth {
            x = block_forward(tape, nodes, &format!("text.block{d}"), x, mask, cfg.heads)?;
        }
        let x = tape.layer_norm_rows(x, g, bias, LN_EPS)?;
        let pooled = match cfg.pooling {
            Pooling::MeanOverMask => {
                let valid = tape.slice_rows(x, 0, t.valid_len)?;
                tape.mean_rows(valid)?
            }
            Pooling::FirstToken => tape.slice_rows(x, 0, 1)?,
        };
        rows.push(linear(tape, pooled, nodes, "text.proj")?);
    }
    tape.concat_rows(&rows)
}
