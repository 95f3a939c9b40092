//! Evaluation harnesses: zero-shot classification from text-generated
//! weights with prompt ensembling, few-shot probes over a frozen encoder,
//! cross-modal retrieval, and dense patch-level classification with bilinear
//! score upsampling.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::encoders::{
    encode_feature_map, encode_images, encode_texts, EncoderPair, ParamNodes, TextEncoderConfig,
    VisualEncoderConfig,
};
use crate::error::{Result, UclError};
use crate::losses::{cosine_ce_loss, TauNode};
use crate::optim::{adamw_step, OptimHyperparams, OptimState};
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::text::{build_prompt_ensemble, ClassEntry, TokenizedText, Vocabulary};

/// How many images to push through one tape when embedding large sets.
const EMBED_CHUNK: usize = 16;

/// A frozen model for inference: encoder configurations plus the parameter
/// tensors they index. All evaluation forwards run without gradients.
#[derive(Debug, Clone)]
pub struct Model {
    pub visual: VisualEncoderConfig,
    pub text: TextEncoderConfig,
    pub params: BTreeMap<String, Tensor>,
}

impl Model {
    /// Wrap parameters, verifying that every tensor the encoders will index
    /// is present with the right shape (guards against mismatched
    /// checkpoint/metadata pairs).
    pub fn new(
        visual: VisualEncoderConfig,
        text: TextEncoderConfig,
        params: BTreeMap<String, Tensor>,
    ) -> Result<Self> {
        let reference = EncoderPair::init(visual, text, 0)?;
        for (name, tensor) in &reference.params {
            let got = params.get(name).ok_or_else(|| {
                UclError::contract(format!("checkpoint is missing parameter '{name}'"))
            })?;
            if got.shape() != tensor.shape() {
                return Err(UclError::shape(format!(
                    "parameter '{name}' has shape {:?}, model expects {:?}",
                    got.shape(),
                    tensor.shape()
                )));
            }
        }
        Ok(Model {
            visual,
            text,
            params,
        })
    }

    pub fn untrained(
        visual: VisualEncoderConfig,
        text: TextEncoderConfig,
        seed: u64,
    ) -> Result<Self> {
        let pair = EncoderPair::init(visual, text, seed)?;
        Ok(Model {
            visual,
            text,
            params: pair.params,
        })
    }

    fn leaves(&self, tape: &mut Tape) -> ParamNodes {
        self.params
            .iter()
            .map(|(name, tensor)| (name.clone(), tape.leaf(tensor.clone(), false)))
            .collect()
    }

    /// Embed `[B x 3 x S x S]` images to `[B x H]`, in chunks.
    pub fn embed_images(&self, images: &Tensor) -> Result<Tensor> {
        let b = images.shape()[0];
        let per = images.numel() / b.max(1);
        let mut out = Vec::with_capacity(b * self.visual.out_dim);
        for start in (0..b).step_by(EMBED_CHUNK) {
            let len = EMBED_CHUNK.min(b - start);
            let chunk = Tensor::new(
                vec![len, 3, self.visual.image_size, self.visual.image_size],
                images.data()[start * per..(start + len) * per].to_vec(),
            )?;
            let mut tape = Tape::new();
            let nodes = self.leaves(&mut tape);
            let emb = encode_images(&mut tape, &self.visual, &nodes, &chunk)?;
            out.extend_from_slice(tape.value(emb).data());
        }
        Tensor::new(vec![b, self.visual.out_dim], out)
    }

    /// Embed tokenized texts to `[B x H]`, in chunks.
    pub fn embed_texts(&self, tokens: &[TokenizedText]) -> Result<Tensor> {
        let mut out = Vec::with_capacity(tokens.len() * self.text.out_dim);
        for chunk in tokens.chunks(EMBED_CHUNK.max(1)) {
            let mut tape = Tape::new();
            let nodes = self.leaves(&mut tape);
            let emb = encode_texts(&mut tape, &self.text, &nodes, chunk)?;
            out.extend_from_slice(tape.value(emb).data());
        }
        Tensor::new(vec![tokens.len(), self.text.out_dim], out)
    }

    /// Per-patch embeddings `[B*P x H]` (image-major, patches row-major).
    pub fn feature_map(&self, images: &Tensor) -> Result<Tensor> {
        let b = images.shape()[0];
        let per = images.numel() / b.max(1);
        let p = self.visual.patches();
        let mut out = Vec::with_capacity(b * p * self.visual.out_dim);
        for start in (0..b).step_by(EMBED_CHUNK) {
            let len = EMBED_CHUNK.min(b - start);
            let chunk = Tensor::new(
                vec![len, 3, self.visual.image_size, self.visual.image_size],
                images.data()[start * per..(start + len) * per].to_vec(),
            )?;
            let mut tape = Tape::new();
            let nodes = self.leaves(&mut tape);
            let features = encode_feature_map(&mut tape, &self.visual, &nodes, &chunk)?;
            out.extend_from_slice(tape.value(features).data());
        }
        Tensor::new(vec![b * p, self.visual.out_dim], out)
    }
}

// ---- classifier weights ----------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    TextGenerated,
    RandomInit,
    Trained,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackgroundRow {
    None,
    /// Embed the literal word "background" through the same prompt pipeline.
    TextGenerated,
    /// A free embedding, exempt from the unit-norm invariant until trained.
    FreeTrainable,
}

/// A classifier matrix `[rows x H]`: one row per class, optionally followed
/// by a single background row. Class rows are unit-norm within 1e-6 at
/// construction; a free-trainable background row is exempt and gets
/// renormalized only for scoring.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierWeights {
    matrix: Tensor,
    pub provenance: Provenance,
    pub background: BackgroundRow,
}

const ROW_NORM_TOL: f64 = 1e-6;

fn normalize_rows(matrix: &mut Tensor) {
    let (n, h) = (matrix.rows(), matrix.cols());
    for r in 0..n {
        let row = &mut matrix.data_mut()[r * h..(r + 1) * h];
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            for v in row {
                *v /= norm;
            }
        }
    }
}

impl ClassifierWeights {
    pub fn from_rows(
        matrix: Tensor,
        provenance: Provenance,
        background: BackgroundRow,
    ) -> Result<Self> {
        if matrix.shape().len() != 2 {
            return Err(UclError::shape(format!(
                "classifier weights must be rank-2, got {:?}",
                matrix.shape()
            )));
        }
        matrix.assert_finite("classifier weights")?;
        let rows = matrix.rows();
        let min_rows = if background == BackgroundRow::None { 1 } else { 2 };
        if rows < min_rows {
            return Err(UclError::contract("classifier weights need at least one class row"));
        }
        let weights = ClassifierWeights {
            matrix,
            provenance,
            background,
        };
        let exempt_last = background == BackgroundRow::FreeTrainable;
        let checked = if exempt_last { rows - 1 } else { rows };
        for r in 0..checked {
            let norm = weights.row_norm(r);
            if (norm - 1.0).abs() > ROW_NORM_TOL {
                return Err(UclError::contract(format!(
                    "classifier row {r} has norm {norm}, expected 1 within {ROW_NORM_TOL}"
                )));
            }
        }
        Ok(weights)
    }

    fn row_norm(&self, r: usize) -> f64 {
        let h = self.matrix.cols();
        self.matrix.data()[r * h..(r + 1) * h]
            .iter()
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// Rows excluding any background row.
    pub fn n_classes(&self) -> usize {
        match self.background {
            BackgroundRow::None => self.matrix.rows(),
            _ => self.matrix.rows() - 1,
        }
    }

    pub fn rows(&self) -> usize {
        self.matrix.rows()
    }

    pub fn dim(&self) -> usize {
        self.matrix.cols()
    }

    pub fn matrix(&self) -> &Tensor {
        &self.matrix
    }

    /// All rows unit-normalized — the form every cosine scorer consumes.
    pub fn scoring_matrix(&self) -> Tensor {
        let mut m = self.matrix.clone();
        normalize_rows(&mut m);
        m
    }
}

/// Per class: tokenize every prompt variant, embed, normalize each variant,
/// average, renormalize. With `BackgroundRow::TextGenerated` a synthetic
/// "background" class goes through the identical pipeline as the last row.
pub fn build_zeroshot_classifier(
    model: &Model,
    catalogue: &[ClassEntry],
    templates: &[String],
    enriched: bool,
    vocab: &Vocabulary,
    background: BackgroundRow,
) -> Result<ClassifierWeights> {
    if catalogue.is_empty() {
        return Err(UclError::contract("empty catalogue"));
    }
    if background == BackgroundRow::FreeTrainable {
        return Err(UclError::contract(
            "free-trainable background rows are appended explicitly, not text-generated",
        ));
    }
    let h = model.text.out_dim;
    let mut entries: Vec<ClassEntry> = catalogue.to_vec();
    if background == BackgroundRow::TextGenerated {
        entries.push(ClassEntry::new(entries.len(), "background", ""));
    }
    let mut rows = Vec::with_capacity(entries.len() * h);
    for entry in &entries {
        // An empty description with enriched=true would be a template error;
        // fall back to the plain rendering for such entries.
        let enrich_entry = enriched && !entry.description.is_empty();
        let labels = build_prompt_ensemble(entry, templates, enrich_entry)?;
        let tokens: Vec<TokenizedText> =
            labels.iter().map(|l| vocab.tokenize(&l.text)).collect();
        let embs = model.embed_texts(&tokens)?;
        let mut mean = vec![0.0; h];
        for v in 0..tokens.len() {
            let row = embs.row(v);
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            for (m, x) in mean.iter_mut().zip(row) {
                *m += x / norm;
            }
        }
        for m in &mut mean {
            *m /= tokens.len() as f64;
        }
        let norm = mean.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        rows.extend(mean.into_iter().map(|m| m / norm));
    }
    ClassifierWeights::from_rows(
        Tensor::new(vec![entries.len(), h], rows)?,
        Provenance::TextGenerated,
        background,
    )
}

/// Append a caller-supplied free background row (not norm-checked).
pub fn append_free_background(weights: &ClassifierWeights, row: &[f64]) -> Result<ClassifierWeights> {
    if weights.background != BackgroundRow::None {
        return Err(UclError::contract("weights already carry a background row"));
    }
    if row.len() != weights.dim() {
        return Err(UclError::shape(format!(
            "background row has {} entries, weights have dim {}",
            row.len(),
            weights.dim()
        )));
    }
    let mut data = weights.matrix.data().to_vec();
    data.extend_from_slice(row);
    ClassifierWeights::from_rows(
        Tensor::new(vec![weights.rows() + 1, weights.dim()], data)?,
        weights.provenance,
        BackgroundRow::FreeTrainable,
    )
}

// ---- zero-shot classification ----------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct PerClass {
    pub class_index: usize,
    pub correct: usize,
    pub total: usize,
}

impl PerClass {
    pub fn accuracy(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifyOutcome {
    pub top1: f64,
    /// Present when the task has at least 5 classes.
    pub top5: Option<f64>,
    pub per_class: Vec<PerClass>,
    pub predictions: Vec<usize>,
}

/// Cosine scores of embeddings against the class rows (background excluded).
fn class_scores(embeddings: &Tensor, weights: &ClassifierWeights) -> Result<Vec<Vec<f64>>> {
    if embeddings.cols() != weights.dim() {
        return Err(UclError::shape(format!(
            "embedding dim {} vs classifier dim {}",
            embeddings.cols(),
            weights.dim()
        )));
    }
    let n = weights.n_classes();
    let h = weights.dim();
    let matrix = weights.scoring_matrix();
    let mut all = Vec::with_capacity(embeddings.rows());
    for i in 0..embeddings.rows() {
        let e = embeddings.row(i);
        let e_norm = e.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        let mut scores = Vec::with_capacity(n);
        for c in 0..n {
            let w = &matrix.data()[c * h..(c + 1) * h];
            let dot: f64 = e.iter().zip(w).map(|(a, b)| a * b).sum();
            scores.push(dot / e_norm);
        }
        all.push(scores);
    }
    Ok(all)
}

/// Argmax with ties broken toward the lowest class index.
pub fn argmax_lowest(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Indices of the top-k scores, ordered by (score desc, index asc).
fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .expect("finite scores")
            .then(a.cmp(&b))
    });
    order.truncate(k);
    order
}

/// Classify pre-computed embeddings. Separated from the image path so tests
/// can probe argmax-level invariances directly.
pub fn classify_embeddings(
    embeddings: &Tensor,
    weights: &ClassifierWeights,
    labels: &[usize],
) -> Result<ClassifyOutcome> {
    if embeddings.rows() != labels.len() {
        return Err(UclError::shape(format!(
            "{} embeddings vs {} labels",
            embeddings.rows(),
            labels.len()
        )));
    }
    let n = weights.n_classes();
    if n < 2 {
        return Err(UclError::contract("classification needs at least 2 classes"));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= n) {
        return Err(UclError::contract(format!(
            "label {bad} out of range for {n} classes"
        )));
    }
    let scores = class_scores(embeddings, weights)?;
    let mut per_class: Vec<PerClass> = (0..n)
        .map(|class_index| PerClass {
            class_index,
            correct: 0,
            total: 0,
        })
        .collect();
    let mut predictions = Vec::with_capacity(labels.len());
    let mut top1_hits = 0usize;
    let mut top5_hits = 0usize;
    for (row, &label) in scores.iter().zip(labels) {
        let pred = argmax_lowest(row);
        predictions.push(pred);
        per_class[label].total += 1;
        if pred == label {
            per_class[label].correct += 1;
            top1_hits += 1;
        }
        if n >= 5 && top_k(row, 5).contains(&label) {
            top5_hits += 1;
        }
    }
    let count = labels.len().max(1) as f64;
    Ok(ClassifyOutcome {
        top1: top1_hits as f64 / count,
        top5: (n >= 5).then(|| top5_hits as f64 / count),
        per_class,
        predictions,
    })
}

/// Embed images and classify them against the weights.
pub fn zeroshot_classify(
    model: &Model,
    weights: &ClassifierWeights,
    images: &Tensor,
    labels: &[usize],
) -> Result<ClassifyOutcome> {
    let embeddings = model.embed_images(images)?;
    classify_embeddings(&embeddings, weights, labels)
}

// ---- few-shot probe --------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub enum ProbeInit<'a> {
    TextGenerated(&'a ClassifierWeights),
    RandomInit { seed: u64 },
}

#[derive(Debug, Clone)]
pub struct ProbeOutcome {
    pub weights: ClassifierWeights,
    pub query: ClassifyOutcome,
}

/// Optimize only the `[N x H]` weight matrix with cosine-CE on the support
/// embeddings; both encoders stay frozen. `steps == 0` returns the
/// initialization unchanged, so a text-generated init reproduces zero-shot
/// classification exactly.
#[allow(clippy::too_many_arguments)]
pub fn fewshot_probe(
    model: &Model,
    n_classes: usize,
    support_images: &Tensor,
    support_labels: &[usize],
    query_images: &Tensor,
    query_labels: &[usize],
    init: ProbeInit,
    steps: usize,
    lr: f64,
    tau: f64,
) -> Result<ProbeOutcome> {
    if n_classes < 2 {
        return Err(UclError::contract("probe needs at least 2 classes"));
    }
    for class in 0..n_classes {
        if !support_labels.contains(&class) {
            return Err(UclError::contract(format!(
                "class {class} has no support examples"
            )));
        }
    }
    let h = model.visual.out_dim;
    let mut w = match init {
        ProbeInit::TextGenerated(weights) => {
            if weights.background != BackgroundRow::None {
                return Err(UclError::contract("probe weights must not carry a background row"));
            }
            if weights.n_classes() != n_classes || weights.dim() != h {
                return Err(UclError::shape(format!(
                    "init weights are {}x{}, probe needs {n_classes}x{h}",
                    weights.n_classes(),
                    weights.dim()
                )));
            }
            weights.matrix().clone()
        }
        ProbeInit::RandomInit { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(31);
            let normal = Normal::new(0.0, 0.02).expect("valid std");
            let mut m = Tensor::new(
                vec![n_classes, h],
                (0..n_classes * h).map(|_| normal.sample(&mut rng)).collect(),
            )?;
            normalize_rows(&mut m);
            m
        }
    };

    let support = model.embed_images(support_images)?;
    if steps > 0 {
        let mut params = BTreeMap::new();
        params.insert("probe.w".to_string(), w);
        let hyper = OptimHyperparams {
            lr_base: lr,
            weight_decay: 0.0,
            ..OptimHyperparams::default()
        };
        let mut state = OptimState::new(&params, hyper);
        for _ in 0..steps {
            let mut tape = Tape::new();
            let features = tape.constant(support.clone());
            let w_leaf = tape.leaf(params["probe.w"].clone(), true);
            let loss = cosine_ce_loss(
                &mut tape,
                features,
                w_leaf,
                support_labels,
                TauNode::Fixed(tau),
            )?;
            tape.backward(loss)?;
            let mut grads = BTreeMap::new();
            grads.insert(
                "probe.w".to_string(),
                tape.grad(w_leaf)
                    .ok_or_else(|| UclError::contract("probe weights received no gradient"))?
                    .clone(),
            );
            adamw_step(&mut params, &grads, &mut state, lr)?;
        }
        w = params.remove("probe.w").expect("probe parameter");
        normalize_rows(&mut w);
    }

    let provenance = match (steps, init) {
        (0, ProbeInit::TextGenerated(_)) => Provenance::TextGenerated,
        (0, ProbeInit::RandomInit { .. }) => Provenance::RandomInit,
        _ => Provenance::Trained,
    };
    let weights = ClassifierWeights::from_rows(w, provenance, BackgroundRow::None)?;
    let query_emb = model.embed_images(query_images)?;
    let query = classify_embeddings(&query_emb, &weights, query_labels)?;
    Ok(ProbeOutcome { weights, query })
}

/// Deterministically split record indices into a k-shot support set and a
/// query set: shuffle by seed, take the first `k` occurrences of each class
/// as support, leave the rest as queries. Errors if any class has fewer than
/// `k` examples or if the query set would be empty.
pub fn support_query_split(
    labels: &[usize],
    n_classes: usize,
    k: usize,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    use rand::seq::SliceRandom;
    if k == 0 {
        return Err(UclError::contract("k-shot split needs k >= 1"));
    }
    let mut order: Vec<usize> = (0..labels.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(41);
    order.shuffle(&mut rng);
    let mut taken = vec![0usize; n_classes];
    let mut support = Vec::with_capacity(n_classes * k);
    let mut query = Vec::new();
    for idx in order {
        let label = labels[idx];
        if label >= n_classes {
            return Err(UclError::contract(format!(
                "label {label} out of range for {n_classes} classes"
            )));
        }
        if taken[label] < k {
            taken[label] += 1;
            support.push(idx);
        } else {
            query.push(idx);
        }
    }
    if let Some(class) = taken.iter().position(|&t| t < k) {
        return Err(UclError::contract(format!(
            "class {class} has only {} examples, need {k} for support",
            taken[class]
        )));
    }
    if query.is_empty() {
        return Err(UclError::contract("no query examples left after support split"));
    }
    Ok((support, query))
}

// ---- retrieval -------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalReport {
    /// R@k for image queries retrieving their paired text.
    pub image_to_text: BTreeMap<usize, f64>,
    /// R@k for text queries retrieving their paired image.
    pub text_to_image: BTreeMap<usize, f64>,
}

fn cosine_matrix(a: &Tensor, b: &Tensor) -> Vec<Vec<f64>> {
    let norm = |row: &[f64]| row.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    let mut out = Vec::with_capacity(a.rows());
    for i in 0..a.rows() {
        let ra = a.row(i);
        let na = norm(ra);
        let mut row = Vec::with_capacity(b.rows());
        for j in 0..b.rows() {
            let rb = b.row(j);
            let dot: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
            row.push(dot / (na * norm(rb)));
        }
        out.push(row);
    }
    out
}

/// Rank of candidate `target` for one query's score row, counting candidates
/// that strictly beat it plus lower-indexed exact ties.
fn rank_of(scores: &[f64], target: usize) -> usize {
    let mut rank = 0;
    for (j, &s) in scores.iter().enumerate() {
        if s > scores[target] || (s == scores[target] && j < target) {
            rank += 1;
        }
    }
    rank
}

/// R@k both directions for position-paired embeddings.
pub fn retrieval_recall(
    img_embs: &Tensor,
    txt_embs: &Tensor,
    ks: &[usize],
) -> Result<RetrievalReport> {
    if img_embs.rows() != txt_embs.rows() || img_embs.cols() != txt_embs.cols() {
        return Err(UclError::shape(format!(
            "image embeddings {:?} vs text embeddings {:?}",
            img_embs.shape(),
            txt_embs.shape()
        )));
    }
    if img_embs.rows() == 0 {
        return Err(UclError::contract("retrieval over zero pairs"));
    }
    let n = img_embs.rows();
    let i2t = cosine_matrix(img_embs, txt_embs);
    let mut report = RetrievalReport {
        image_to_text: BTreeMap::new(),
        text_to_image: BTreeMap::new(),
    };
    let mut ranks_i2t = Vec::with_capacity(n);
    let mut ranks_t2i = Vec::with_capacity(n);
    for q in 0..n {
        ranks_i2t.push(rank_of(&i2t[q], q));
        let column: Vec<f64> = (0..n).map(|i| i2t[i][q]).collect();
        ranks_t2i.push(rank_of(&column, q));
    }
    for &k in ks {
        if k == 0 {
            return Err(UclError::contract("R@0 is not defined"));
        }
        let frac = |ranks: &[usize]| ranks.iter().filter(|&&r| r < k).count() as f64 / n as f64;
        report.image_to_text.insert(k, frac(&ranks_i2t));
        report.text_to_image.insert(k, frac(&ranks_t2i));
    }
    Ok(report)
}

// ---- dense segmentation ----------------------------------------------------

/// Bilinear upsample a `g x g` grid to `s x s` (half-pixel-center sampling).
pub fn bilinear_upsample(grid: &[f64], g: usize, s: usize) -> Vec<f64> {
    assert_eq!(grid.len(), g * g, "grid size mismatch");
    let mut out = vec![0.0; s * s];
    let scale = g as f64 / s as f64;
    for y in 0..s {
        let sy = ((y as f64 + 0.5) * scale - 0.5).clamp(0.0, (g - 1) as f64);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(g - 1);
        let fy = sy - y0 as f64;
        for x in 0..s {
            let sx = ((x as f64 + 0.5) * scale - 0.5).clamp(0.0, (g - 1) as f64);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(g - 1);
            let fx = sx - x0 as f64;
            let top = grid[y0 * g + x0] * (1.0 - fx) + grid[y0 * g + x1] * fx;
            let bottom = grid[y1 * g + x0] * (1.0 - fx) + grid[y1 * g + x1] * fx;
            out[y * s + x] = top * (1.0 - fy) + bottom * fy;
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseReport {
    pub miou: f64,
    /// IoU per weight row (class rows, then the background row if present),
    /// restricted to rows whose union is non-empty.
    pub per_class_iou: BTreeMap<usize, f64>,
    pub predictions: Vec<Vec<usize>>,
}

/// mIoU between predicted and ground-truth label grids: intersections and
/// unions accumulate globally over all images, and the mean runs over rows
/// with non-empty union.
pub fn miou_from_labels(
    predictions: &[Vec<usize>],
    ground_truth: &[Vec<usize>],
    n_rows: usize,
) -> Result<(f64, BTreeMap<usize, f64>)> {
    if predictions.len() != ground_truth.len() {
        return Err(UclError::shape("prediction/mask count mismatch"));
    }
    let mut inter = vec![0usize; n_rows];
    let mut union = vec![0usize; n_rows];
    for (pred, gt) in predictions.iter().zip(ground_truth) {
        if pred.len() != gt.len() {
            return Err(UclError::shape("prediction/mask size mismatch"));
        }
        for (&p, &g) in pred.iter().zip(gt) {
            if p >= n_rows || g >= n_rows {
                return Err(UclError::contract(format!(
                    "label out of range: pred {p}, gt {g}, rows {n_rows}"
                )));
            }
            if p == g {
                inter[p] += 1;
                union[p] += 1;
            } else {
                union[p] += 1;
                union[g] += 1;
            }
        }
    }
    let mut per_class = BTreeMap::new();
    for c in 0..n_rows {
        if union[c] > 0 {
            per_class.insert(c, inter[c] as f64 / union[c] as f64);
        }
    }
    if per_class.is_empty() {
        return Err(UclError::contract("no class has a non-empty union"));
    }
    let miou = per_class.values().sum::<f64>() / per_class.len() as f64;
    Ok((miou, per_class))
}

/// Dense zero-shot classification: per-patch cosine scores per weight row,
/// each row's score map bilinearly upsampled to pixel resolution, argmax per
/// pixel, then global mIoU against the masks.
pub fn dense_zeroshot_segment(
    model: &Model,
    weights: &ClassifierWeights,
    images: &Tensor,
    masks: &[Vec<usize>],
) -> Result<DenseReport> {
    let b = images.shape()[0];
    let s = model.visual.image_size;
    if masks.len() != b {
        return Err(UclError::shape(format!(
            "{b} images vs {} masks",
            masks.len()
        )));
    }
    for mask in masks {
        if mask.len() != s * s {
            return Err(UclError::shape(format!(
                "mask has {} entries, image has {}",
                mask.len(),
                s * s
            )));
        }
    }
    let g = s / model.visual.patch_size;
    let p = g * g;
    let rows = weights.rows();
    let h = weights.dim();
    let matrix = weights.scoring_matrix();
    let features = model.feature_map(images)?;

    let mut predictions = Vec::with_capacity(b);
    for img in 0..b {
        // Cosine score map per weight row at patch resolution.
        let mut score_maps = vec![vec![0.0; p]; rows];
        for patch in 0..p {
            let f = features.row(img * p + patch);
            let f_norm = f.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            for (c, map) in score_maps.iter_mut().enumerate() {
                let w = &matrix.data()[c * h..(c + 1) * h];
                let dot: f64 = f.iter().zip(w).map(|(a, b)| a * b).sum();
                map[patch] = dot / f_norm;
            }
        }
        let upsampled: Vec<Vec<f64>> = score_maps
            .iter()
            .map(|map| bilinear_upsample(map, g, s))
            .collect();
        let mut label_grid = vec![0usize; s * s];
        for pix in 0..s * s {
            let scores: Vec<f64> = upsampled.iter().map(|m| m[pix]).collect();
            label_grid[pix] = argmax_lowest(&scores);
        }
        predictions.push(label_grid);
    }

    let (miou, per_class_iou) = miou_from_labels(&predictions, masks, rows)?;
    Ok(DenseReport {
        miou,
        per_class_iou,
        predictions,
    })
}

// ---- report type -----------------------------------------------------------

/// Flat metric table plus per-class breakdown, as persisted by the CLI.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metrics: BTreeMap<String, f64>,
    pub per_class: Vec<(usize, f64)>,
    pub seed: u64,
    pub config_hash: String,
}

impl EvalReport {
    pub fn validate(&self) -> Result<()> {
        for (name, &value) in &self.metrics {
            if !value.is_finite() {
                return Err(UclError::contract(format!(
                    "metric '{name}' is not finite: {value}"
                )));
            }
            let ranged = name.contains("acc") || name.contains("recall") || name.contains("miou");
            if ranged && !(0.0..=1.0).contains(&value) {
                return Err(UclError::contract(format!(
                    "metric '{name}' = {value} outside [0, 1]"
                )));
            }
        }
        for ks in [["recall_at_1", "recall_at_5"], ["recall_at_5", "recall_at_10"]] {
            for prefix in ["i2t_", "t2i_"] {
                let lo = self.metrics.get(&format!("{prefix}{}", ks[0]));
                let hi = self.metrics.get(&format!("{prefix}{}", ks[1]));
                if let (Some(&lo), Some(&hi)) = (lo, hi) {
                    if lo > hi {
                        return Err(UclError::contract(format!(
                            "{prefix}{} = {lo} exceeds {prefix}{} = {hi}",
                            ks[0], ks[1]
                        )));
                    }
                }
            }
        }
        for (class, acc) in &self.per_class {
            if !(0.0..=1.0).contains(acc) {
                return Err(UclError::contract(format!(
                    "per-class accuracy for {class} outside [0, 1]"
                )));
            }
        }
        Ok(())
    }
}

/// CSV breakdown `class_index,correct,total,accuracy`.
pub fn per_class_csv(per_class: &[PerClass]) -> String {
    let mut out = String::from("class_index,correct,total,accuracy\n");
    for pc in per_class {
        out.push_str(&format!(
            "{},{},{},{}\n",
            pc.class_index,
            pc.correct,
            pc.total,
            pc.accuracy()
        ));
    }
    out
}
