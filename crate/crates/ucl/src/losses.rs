//! The unified contrastive objective and its ingredients.
//!
//! Classification and image-text alignment are treated as one family of
//! softmax losses that differ only in where the comparison rows come from:
//!
//! * linear classification — raw inner products against a learned weight
//!   matrix;
//! * cosine classification — the same with both sides L2-normalized and a
//!   temperature;
//! * InfoNCE alignment — cosine logits against the other captions in the
//!   batch, diagonal targets;
//! * meta-classification — cosine logits against class weights generated
//!   on the fly by the text encoder from rendered label sentences, which
//!   lets gradients reach both encoders from plain labeled images.
//!
//! `unified_loss` scores a mixed batch with one loss per side and combines
//! them as a per-sample weighted mean.

use crate::encoders::{encode_texts, ParamNodes, TextEncoderConfig, VisualEncoderConfig};
use crate::error::{Result, UclError};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;
use crate::text::TokenizedText;

const NORM_EPS: f64 = 1e-12;

/// Softmax temperature; stored as a plain value, optionally trainable as
/// log tau (clamped so tau stays in `[0.005, 1]`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Temperature {
    tau: f64,
    learnable: bool,
}

pub const TAU_MIN: f64 = 0.005;
pub const TAU_MAX: f64 = 1.0;

impl Temperature {
    pub fn fixed(tau: f64) -> Result<Self> {
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(UclError::config(format!("temperature must be positive, got {tau}")));
        }
        Ok(Temperature {
            tau,
            learnable: false,
        })
    }

    pub fn learnable(tau: f64) -> Result<Self> {
        let mut t = Temperature::fixed(tau)?;
        t.learnable = true;
        t.tau = clamp_tau(tau);
        Ok(t)
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn is_learnable(&self) -> bool {
        self.learnable
    }

    pub fn log_tau(&self) -> f64 {
        self.tau.ln()
    }

    /// Replace the value from an updated log-tau parameter, clamping into the
    /// legal range.
    pub fn set_from_log_tau(&mut self, log_tau: f64) {
        self.tau = clamp_tau(log_tau.exp());
    }
}

pub fn clamp_tau(tau: f64) -> f64 {
    tau.clamp(TAU_MIN, TAU_MAX)
}

/// Temperature as seen by a loss on a tape: either a constant divisor or a
/// live log-tau leaf that receives gradients.
#[derive(Debug, Clone, Copy)]
pub enum TauNode {
    Fixed(f64),
    /// `[1]` leaf holding log tau.
    LogTauLeaf(NodeId),
}

impl TauNode {
    /// Scale `[m x n]` logits by 1/tau.
    fn apply(self, tape: &mut Tape, logits: NodeId) -> Result<NodeId> {
        match self {
            TauNode::Fixed(tau) => Ok(tape.scale(logits, 1.0 / tau)),
            TauNode::LogTauLeaf(id) => {
                let rows = tape.value(logits).rows();
                let neg = tape.scale(id, -1.0);
                let inv_tau = tape.exp(neg);
                let per_row = tape.broadcast_scalar(inv_tau, rows)?;
                tape.scale_rows(logits, per_row)
            }
        }
    }
}

/// A parametric classifier: one weight row per class in the shared space.
#[derive(Debug, Clone, PartialEq)]
pub struct CosineClassifier {
    weights: Tensor,
}

impl CosineClassifier {
    pub fn new(weights: Tensor) -> Result<Self> {
        if weights.shape().len() != 2 {
            return Err(UclError::shape(format!(
                "classifier weights must be [N x H], got {:?}",
                weights.shape()
            )));
        }
        weights.assert_finite("classifier weights")?;
        Ok(CosineClassifier { weights })
    }

    pub fn classes(&self) -> usize {
        self.weights.rows()
    }

    pub fn dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    pub fn leaf(&self, tape: &mut Tape, trainable: bool) -> NodeId {
        tape.leaf(self.weights.clone(), trainable)
    }
}

/// One training batch with a classification side and an alignment side;
/// either side may be empty.
#[derive(Debug, Clone)]
pub struct MixedBatch {
    /// `[Bc x 3 x S x S]`.
    pub cls_images: Tensor,
    pub cls_labels: Vec<usize>,
    /// `[Ba x 3 x S x S]`.
    pub align_images: Tensor,
    pub align_tokens: Vec<TokenizedText>,
}

impl MixedBatch {
    pub fn n_cls(&self) -> usize {
        self.cls_labels.len()
    }

    pub fn n_align(&self) -> usize {
        self.align_tokens.len()
    }

    pub fn validate(&self, n_classes: usize) -> Result<()> {
        if self.cls_images.shape()[0] != self.n_cls() {
            return Err(UclError::contract(format!(
                "classification side: {} images vs {} labels",
                self.cls_images.shape()[0],
                self.n_cls()
            )));
        }
        if self.align_images.shape()[0] != self.n_align() {
            return Err(UclError::contract(format!(
                "alignment side: {} images vs {} captions",
                self.align_images.shape()[0],
                self.n_align()
            )));
        }
        for &l in &self.cls_labels {
            if l >= n_classes {
                return Err(UclError::contract(format!(
                    "label {l} out of range for {n_classes} classes"
                )));
            }
        }
        Ok(())
    }
}

/// Mean cross-entropy over raw inner-product logits `features . W^T`.
pub fn linear_ce_loss(
    tape: &mut Tape,
    features: NodeId,
    w: NodeId,
    labels: &[usize],
) -> Result<NodeId> {
    let wt = tape.transpose(w)?;
    let logits = tape.matmul(features, wt)?;
    tape.cross_entropy_mean(logits, labels)
}

/// Cosine-classifier cross-entropy: both sides row-normalized, logits divided
/// by the temperature.
pub fn cosine_ce_loss(
    tape: &mut Tape,
    features: NodeId,
    w: NodeId,
    labels: &[usize],
    tau: TauNode,
) -> Result<NodeId> {
    let nf = tape.l2_normalize_rows(features, NORM_EPS)?;
    let nw = tape.l2_normalize_rows(w, NORM_EPS)?;
    let nwt = tape.transpose(nw)?;
    let logits = tape.matmul(nf, nwt)?;
    let scaled = tau.apply(tape, logits)?;
    tape.cross_entropy_mean(scaled, labels)
}

/// In-batch image-text contrastive loss with diagonal targets. Image-anchored
/// by default; `symmetric` averages in the text-anchored direction.
pub fn infonce_loss(
    tape: &mut Tape,
    img_emb: NodeId,
    txt_emb: NodeId,
    tau: TauNode,
    symmetric: bool,
) -> Result<NodeId> {
    let b = tape.value(img_emb).rows();
    if tape.value(txt_emb).rows() != b {
        return Err(UclError::shape(format!(
            "paired batch sizes differ: {b} images vs {} texts",
            tape.value(txt_emb).rows()
        )));
    }
    if b == 0 {
        return Err(UclError::contract("InfoNCE over an empty batch"));
    }
    let ni = tape.l2_normalize_rows(img_emb, NORM_EPS)?;
    let nt = tape.l2_normalize_rows(txt_emb, NORM_EPS)?;
    let ntt = tape.transpose(nt)?;
    let logits = tape.matmul(ni, ntt)?;
    let scaled = tau.apply(tape, logits)?;
    let diagonal: Vec<usize> = (0..b).collect();
    let img_to_txt = tape.cross_entropy_mean(scaled, &diagonal)?;
    if !symmetric {
        return Ok(img_to_txt);
    }
    let transposed = tape.transpose(scaled)?;
    let txt_to_img = tape.cross_entropy_mean(transposed, &diagonal)?;
    let sum = tape.add(img_to_txt, txt_to_img)?;
    Ok(tape.scale(sum, 0.5))
}

/// Classification with the text encoder as the classifier: encode all `N`
/// rendered label sentences into weight rows, then apply the cosine loss.
/// Gradients flow into both encoders.
pub fn meta_classifier_loss(
    tape: &mut Tape,
    text_cfg: &TextEncoderConfig,
    nodes: &ParamNodes,
    img_emb: NodeId,
    catalogue_tokens: &[TokenizedText],
    labels: &[usize],
    tau: TauNode,
) -> Result<NodeId> {
    if catalogue_tokens.is_empty() {
        return Err(UclError::contract("meta classifier needs a non-empty catalogue"));
    }
    for &l in labels {
        if l >= catalogue_tokens.len() {
            return Err(UclError::contract(format!(
                "label {l} out of range for catalogue of {}",
                catalogue_tokens.len()
            )));
        }
    }
    let w = encode_texts(tape, text_cfg, nodes, catalogue_tokens)?;
    cosine_ce_loss(tape, img_emb, w, labels, tau)
}

/// How the classification side of a mixed batch is scored.
#[derive(Debug, Clone, Copy)]
pub enum ClsHead<'a> {
    /// Deep fusion: class weights generated by the text encoder from the
    /// catalogue's rendered labels.
    Meta {
        catalogue_tokens: &'a [TokenizedText],
    },
    /// Split head: a private linear classifier, raw inner products.
    Linear { w: NodeId },
}

/// Total plus per-side components of a unified-loss evaluation.
#[derive(Debug, Clone, Copy)]
pub struct UnifiedLossOutput {
    pub total: NodeId,
    pub cls: Option<NodeId>,
    pub align: Option<NodeId>,
    pub n_cls: usize,
    pub n_align: usize,
}

/// Score a mixed batch: classification side per `head`, alignment side by
/// InfoNCE, combined as a per-sample weighted mean. An empty side returns the
/// other component as the total, exactly.
#[allow(clippy::too_many_arguments)]
pub fn unified_loss(
    tape: &mut Tape,
    visual_cfg: &VisualEncoderConfig,
    text_cfg: &TextEncoderConfig,
    nodes: &ParamNodes,
    batch: &MixedBatch,
    head: ClsHead,
    tau: TauNode,
    symmetric_infonce: bool,
) -> Result<UnifiedLossOutput> {
    let n_cls = batch.n_cls();
    let n_align = batch.n_align();
    if n_cls == 0 && n_align == 0 {
        return Err(UclError::contract("unified loss over an empty mixed batch"));
    }

    let cls = if n_cls > 0 {
        let emb = crate::encoders::encode_images(tape, visual_cfg, nodes, &batch.cls_images)?;
        Some(match head {
            ClsHead::Meta { catalogue_tokens } => meta_classifier_loss(
                tape,
                text_cfg,
                nodes,
                emb,
                catalogue_tokens,
                &batch.cls_labels,
                tau,
            )?,
            ClsHead::Linear { w } => linear_ce_loss(tape, emb, w, &batch.cls_labels)?,
        })
    } else {
        None
    };

    let align = if n_align > 0 {
        let img = crate::encoders::encode_images(tape, visual_cfg, nodes, &batch.align_images)?;
        let txt = encode_texts(tape, text_cfg, nodes, &batch.align_tokens)?;
        Some(infonce_loss(tape, img, txt, tau, symmetric_infonce)?)
    } else {
        None
    };

    let total = match (cls, align) {
        (Some(c), None) => c,
        (None, Some(a)) => a,
        (Some(c), Some(a)) => {
            let denom = (n_cls + n_align) as f64;
            let wc = tape.scale(c, n_cls as f64 / denom);
            let wa = tape.scale(a, n_align as f64 / denom);
            tape.add(wc, wa)?
        }
        (None, None) => unreachable!("guarded above"),
    };

    Ok(UnifiedLossOutput {
        total,
        cls,
        align,
        n_cls,
        n_align,
    })
}
