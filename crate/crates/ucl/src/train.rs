//! The training loop: mixed batches through the unified loss, reverse sweep,
//! global-norm clipping, AdamW with warmup+cosine learning rates, periodic
//! checkpoints, and a per-step loss log.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::checkpoint::save_checkpoint;
use crate::data::{BatchStream, Dataset};
use crate::encoders::{ParamNodes, Pooling, TextEncoderConfig, VisualEncoderConfig};
use crate::error::{Result, UclError};
use crate::losses::{unified_loss, ClsHead, TauNode, UnifiedLossOutput};
use crate::optim::{
    adamw_step, clip_global_norm, lr_at, OptimHyperparams, OptimState, Schedule,
};
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::text::{render_label, TokenizedText};

/// Which classification head the unified objective trains.
///
/// `deep_fusion` generates classifier weights from the text encoder
/// (the meta-classifier), `split_head` keeps a private linear classifier next
/// to the contrastive head, `sup_only` and `vl_only` are the single-task
/// baselines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    DeepFusion,
    SplitHead,
    SupOnly,
    VlOnly,
}

impl TrainMode {
    pub fn as_str(self) -> &'static str {
        match self {
            TrainMode::DeepFusion => "deep_fusion",
            TrainMode::SplitHead => "split_head",
            TrainMode::SupOnly => "sup_only",
            TrainMode::VlOnly => "vl_only",
        }
    }

    fn uses_linear_head(self) -> bool {
        matches!(self, TrainMode::SplitHead | TrainMode::SupOnly)
    }
}

impl FromStr for TrainMode {
    type Err = UclError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "deep_fusion" => Ok(TrainMode::DeepFusion),
            "split_head" => Ok(TrainMode::SplitHead),
            "sup_only" => Ok(TrainMode::SupOnly),
            "vl_only" => Ok(TrainMode::VlOnly),
            other => Err(UclError::config(format!(
                "unknown mode '{other}' (expected deep_fusion, split_head, sup_only, or vl_only)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default = "d_width")]
    pub width: usize,
    #[serde(default = "d_depth")]
    pub depth: usize,
    #[serde(default = "d_heads")]
    pub heads: usize,
    #[serde(default = "d_out_dim")]
    pub out_dim: usize,
    #[serde(default = "d_patch")]
    pub patch_size: usize,
    #[serde(default = "d_pooling")]
    pub pooling: Pooling,
    #[serde(default = "d_tau")]
    pub tau: f64,
    #[serde(default)]
    pub learnable_tau: bool,
}

fn d_width() -> usize {
    64
}
fn d_depth() -> usize {
    1
}
fn d_heads() -> usize {
    4
}
fn d_out_dim() -> usize {
    64
}
fn d_patch() -> usize {
    8
}
fn d_pooling() -> Pooling {
    Pooling::MeanOverMask
}
fn d_tau() -> f64 {
    0.05
}

impl Default for ModelSection {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields defaulted")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSection {
    #[serde(default = "d_lr")]
    pub lr: f64,
    #[serde(default = "d_wd")]
    pub weight_decay: f64,
    #[serde(default = "d_beta1")]
    pub beta1: f64,
    #[serde(default = "d_beta2")]
    pub beta2: f64,
    #[serde(default = "d_eps")]
    pub eps: f64,
    #[serde(default = "d_clip")]
    pub clip_norm: f64,
}

fn d_lr() -> f64 {
    2e-4
}
fn d_wd() -> f64 {
    0.01
}
fn d_beta1() -> f64 {
    0.9
}
fn d_beta2() -> f64 {
    0.999
}
fn d_eps() -> f64 {
    1e-8
}
fn d_clip() -> f64 {
    5.0
}

impl Default for OptimizerSection {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields defaulted")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSection {
    #[serde(default = "d_steps")]
    pub steps: usize,
    #[serde(default = "d_warmup_frac")]
    pub warmup_frac: f64,
    #[serde(default)]
    pub lr_min: f64,
}

fn d_steps() -> usize {
    1500
}
fn d_warmup_frac() -> f64 {
    0.05
}

impl Default for ScheduleSection {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields defaulted")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatchSection {
    #[serde(default = "d_batch_size")]
    pub size: usize,
    /// Classification : alignment sample ratio.
    #[serde(default = "d_ratio")]
    pub ratio: [usize; 2],
}

fn d_batch_size() -> usize {
    8
}
fn d_ratio() -> [usize; 2] {
    [3, 1]
}

impl Default for BatchSection {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields defaulted")
    }
}

/// The run.json schema. Unknown keys anywhere are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Dataset directory produced by gen-data.
    pub data: PathBuf,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub optimizer: OptimizerSection,
    #[serde(default)]
    pub schedule: ScheduleSection,
    #[serde(default)]
    pub batch: BatchSection,
    #[serde(default = "d_mode")]
    pub mode: TrainMode,
    #[serde(default = "d_enriched")]
    pub enriched: bool,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "d_ckpt_every")]
    pub checkpoint_every: usize,
    #[serde(default)]
    pub symmetric_infonce: bool,
}

fn d_mode() -> TrainMode {
    TrainMode::DeepFusion
}
fn d_enriched() -> bool {
    true
}
fn d_ckpt_every() -> usize {
    100
}

impl TrainConfig {
    pub fn with_data(data: PathBuf) -> Self {
        let mut config: TrainConfig =
            serde_json::from_str(r#"{"data": ""}"#).expect("all other fields defaulted");
        config.data = data;
        config
    }

    /// Effective classification : alignment ratio; single-task modes ignore
    /// the configured ratio.
    pub fn effective_ratio(&self) -> (usize, usize) {
        match self.mode {
            TrainMode::SupOnly => (1, 0),
            TrainMode::VlOnly => (0, 1),
            _ => (self.batch.ratio[0], self.batch.ratio[1]),
        }
    }

    pub fn schedule(&self) -> Result<Schedule> {
        let steps = self.schedule.steps;
        if steps == 0 {
            return Err(UclError::config("schedule has zero steps"));
        }
        if !(0.0..1.0).contains(&self.schedule.warmup_frac) {
            return Err(UclError::config("warmup_frac must be in [0, 1)"));
        }
        let warmup = ((steps as f64 * self.schedule.warmup_frac).round() as usize).min(steps - 1);
        Schedule::new(warmup, steps, self.optimizer.lr, self.schedule.lr_min)
    }

    pub fn hyperparams(&self) -> OptimHyperparams {
        OptimHyperparams {
            lr_base: self.optimizer.lr,
            weight_decay: self.optimizer.weight_decay,
            beta1: self.optimizer.beta1,
            beta2: self.optimizer.beta2,
            eps: self.optimizer.eps,
        }
    }
}

/// Everything an evaluation needs to rebuild the model around a checkpoint;
/// written next to it as model.json.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelMeta {
    pub visual: VisualEncoderConfig,
    pub text: TextEncoderConfig,
    pub mode: TrainMode,
    pub enriched: bool,
    pub tau: f64,
    pub learnable_tau: bool,
    pub n_train_classes: usize,
    pub data: PathBuf,
    pub config_hash: String,
}

/// One loss-log line. Absent sides (single-task modes) serialize as empty
/// CSV fields.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRow {
    pub step: usize,
    pub total: f64,
    pub cls: Option<f64>,
    pub align: Option<f64>,
    pub lr: f64,
}

pub fn loss_csv(rows: &[LossRow]) -> String {
    let mut out = String::from("step,total,cls_loss,align_loss,lr\n");
    let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for row in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            row.step,
            row.total,
            cell(row.cls),
            cell(row.align),
            row.lr
        ));
    }
    out
}

pub struct TrainResult {
    pub visual: VisualEncoderConfig,
    pub text: TextEncoderConfig,
    pub params: BTreeMap<String, Tensor>,
    pub optim: OptimState,
    pub history: Vec<LossRow>,
    /// Checkpoint files written during the run (periodic + final).
    pub written: Vec<PathBuf>,
}

/// Derive encoder configurations from a train config plus the dataset it
/// points at (image size and vocabulary are data properties).
pub fn encoder_configs(
    config: &TrainConfig,
    dataset: &Dataset,
) -> Result<(VisualEncoderConfig, TextEncoderConfig)> {
    let visual = VisualEncoderConfig {
        image_size: dataset.config.image_size,
        patch_size: config.model.patch_size,
        width: config.model.width,
        depth: config.model.depth,
        heads: config.model.heads,
        out_dim: config.model.out_dim,
    };
    let text = TextEncoderConfig {
        vocab_size: dataset.vocab.size(),
        max_len: dataset.vocab.max_len,
        width: config.model.width,
        depth: config.model.depth,
        heads: config.model.heads,
        out_dim: config.model.out_dim,
        pooling: config.model.pooling,
    };
    visual.validate()?;
    text.validate()?;
    Ok((visual, text))
}

/// Initialize the full trainable parameter set for a mode: both encoders,
/// plus `head.w` for linear-head modes and `log_tau` when learnable.
pub fn init_params(
    config: &TrainConfig,
    dataset: &Dataset,
) -> Result<(VisualEncoderConfig, TextEncoderConfig, BTreeMap<String, Tensor>)> {
    let (visual, text) = encoder_configs(config, dataset)?;
    let pair = crate::encoders::EncoderPair::init(visual, text, config.seed)?;
    let mut params = pair.params;
    if config.mode.uses_linear_head() {
        let n = dataset.train.catalogue.len();
        let h = config.model.out_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(21);
        let normal = Normal::new(0.0, 0.02).expect("valid std");
        let data: Vec<f64> = (0..n * h).map(|_| normal.sample(&mut rng)).collect();
        params.insert("head.w".to_string(), Tensor::new(vec![n, h], data)?);
    }
    if config.model.learnable_tau {
        let tau = crate::losses::Temperature::learnable(config.model.tau)?;
        params.insert("log_tau".to_string(), Tensor::scalar(tau.log_tau()));
    }
    Ok((visual, text, params))
}

/// Tokenized catalogue labels used by the meta-classifier head: the first
/// prompt template rendered over the training catalogue, with or without
/// description enrichment.
pub fn catalogue_tokens(dataset: &Dataset, enriched: bool) -> Result<Vec<TokenizedText>> {
    let template = dataset
        .prompts
        .first()
        .ok_or_else(|| UclError::contract("dataset has no prompt templates"))?;
    dataset
        .train
        .catalogue
        .iter()
        .map(|entry| {
            let label = render_label(entry, template, 0, enriched)?;
            Ok(dataset.vocab.tokenize(&label.text))
        })
        .collect()
}

struct StepOutcome {
    total: f64,
    cls: Option<f64>,
    align: Option<f64>,
}

fn leaf_all(tape: &mut Tape, params: &BTreeMap<String, Tensor>) -> ParamNodes {
    params
        .iter()
        .map(|(name, tensor)| (name.clone(), tape.leaf(tensor.clone(), true)))
        .collect()
}

/// Run the optimization loop. When `out_dir` is given, checkpoints land
/// there (`ckpt_<step>.bin` every `checkpoint_every` steps, `checkpoint.bin`
/// at the end) and a NaN abort leaves an abort.json diagnostic behind.
pub fn train_run(
    config: &TrainConfig,
    dataset: &Dataset,
    out_dir: Option<&Path>,
) -> Result<TrainResult> {
    let (visual, text, mut params) = init_params(config, dataset)?;
    let schedule = config.schedule()?;
    let ratio = config.effective_ratio();
    let mut stream = BatchStream::new(
        &dataset.train,
        &dataset.vocab,
        dataset.config.image_size,
        config.batch.size,
        ratio,
        config.seed,
    )?;
    let cat_tokens = catalogue_tokens(dataset, config.enriched)?;
    let mut optim = OptimState::new(&params, config.hyperparams());
    let mut history: Vec<LossRow> = Vec::with_capacity(config.schedule.steps);
    let mut written = Vec::new();

    for step in 0..config.schedule.steps {
        let batch = stream.next_batch();
        batch.validate(dataset.train.catalogue.len())?;

        let mut tape = Tape::new();
        let nodes = leaf_all(&mut tape, &params);
        let tau = if config.model.learnable_tau {
            TauNode::LogTauLeaf(nodes["log_tau"])
        } else {
            TauNode::Fixed(config.model.tau)
        };
        let head = if config.mode.uses_linear_head() {
            ClsHead::Linear { w: nodes["head.w"] }
        } else {
            ClsHead::Meta {
                catalogue_tokens: &cat_tokens,
            }
        };
        let out: UnifiedLossOutput = unified_loss(
            &mut tape,
            &visual,
            &text,
            &nodes,
            &batch,
            head,
            tau,
            config.symmetric_infonce,
        )?;

        let total = tape.scalar_value(out.total);
        if !total.is_finite() {
            let msg = format!("non-finite total loss {total}");
            if let Some(dir) = out_dir {
                dump_abort_diagnostics(dir, step, total, &history);
            }
            return Err(UclError::Numeric { step, msg });
        }
        tape.backward(out.total)?;

        let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();
        for (name, &id) in &nodes {
            if let Some(g) = tape.grad(id) {
                grads.insert(name.clone(), g.clone());
            }
        }
        clip_global_norm(&mut grads, config.optimizer.clip_norm)?;
        let lr = lr_at(&schedule, step)?;
        adamw_step(&mut params, &grads, &mut optim, lr)?;

        let outcome = StepOutcome {
            total,
            cls: out.cls.map(|id| tape.scalar_value(id)),
            align: out.align.map(|id| tape.scalar_value(id)),
        };
        history.push(LossRow {
            step,
            total: outcome.total,
            cls: outcome.cls,
            align: outcome.align,
            lr,
        });

        if let Some(dir) = out_dir {
            let done = step + 1;
            if config.checkpoint_every > 0 && done % config.checkpoint_every == 0 {
                let path = dir.join(format!("ckpt_{done:06}.bin"));
                save_checkpoint(&path, &params, Some(&optim))?;
                written.push(path);
            }
        }
    }

    if let Some(dir) = out_dir {
        let path = dir.join("checkpoint.bin");
        save_checkpoint(&path, &params, Some(&optim))?;
        written.push(path);
    }

    Ok(TrainResult {
        visual,
        text,
        params,
        optim,
        history,
        written,
    })
}

fn dump_abort_diagnostics(dir: &Path, step: usize, total: f64, history: &[LossRow]) {
    // NaN is not valid JSON, so the offending value is stringified.
    let recent: Vec<String> = history
        .iter()
        .rev()
        .take(5)
        .map(|r| format!("step {}: total {}", r.step, r.total))
        .collect();
    let body = serde_json::json!({
        "step": step,
        "total": total.to_string(),
        "recent": recent,
    });
    let _ = std::fs::write(
        dir.join("abort.json"),
        serde_json::to_string_pretty(&body).unwrap_or_default(),
    );
}
