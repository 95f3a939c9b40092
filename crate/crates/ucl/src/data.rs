//! Procedural compositional scenes: deterministic shape rasterization,
//! templated captions, train/eval splits with held-out (color, shape)
//! combinations, and the mixed-batch sampler.
//!
//! A scene is one colored shape (4 colors x 4 shapes = 16 classes) at one
//! cell of a 4x4 grid, small or large, over a gray background with additive
//! noise. Class identity is the (color, shape) pair; size, position,
//! background, and noise vary freely, so captions carry strictly more
//! information than class labels — the same asymmetry the unified objective
//! exploits. Images are rendered on demand from compact specs; nothing
//! pixel-shaped is stored on disk unless PPM export is requested.

use std::collections::BTreeSet;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, UclError};
use crate::losses::MixedBatch;
use crate::tensor::Tensor;
use crate::text::{build_prompt_ensemble, ClassEntry, Vocabulary};

pub const GRID: usize = 4;
pub const NUM_COLORS: usize = 4;
pub const NUM_SHAPES: usize = 4;
pub const NUM_COMBOS: usize = NUM_COLORS * NUM_SHAPES;
/// Background shade levels: `level * BACKGROUND_STEP`, level in `0..8`.
pub const BACKGROUND_LEVELS: usize = 8;
const BACKGROUND_STEP: f64 = 0.045;
const NOISE_AMPLITUDE: f64 = 0.03;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
}

pub const COLORS: [Color; NUM_COLORS] = [Color::Red, Color::Green, Color::Blue, Color::Yellow];

impl Color {
    pub fn word(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
        }
    }

    fn rgb(self) -> [f64; 3] {
        match self {
            Color::Red => [0.85, 0.15, 0.15],
            Color::Green => [0.15, 0.80, 0.20],
            Color::Blue => [0.15, 0.25, 0.85],
            Color::Yellow => [0.85, 0.80, 0.15],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Square,
    Circle,
    Triangle,
    Cross,
}

pub const SHAPES: [Shape; NUM_SHAPES] = [Shape::Square, Shape::Circle, Shape::Triangle, Shape::Cross];

impl Shape {
    pub fn word(self) -> &'static str {
        match self {
            Shape::Square => "square",
            Shape::Circle => "circle",
            Shape::Triangle => "triangle",
            Shape::Cross => "cross",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SizeClass {
    Small,
    Large,
}

impl SizeClass {
    fn radius_fraction(self) -> f64 {
        match self {
            SizeClass::Small => 0.27,
            SizeClass::Large => 0.46,
        }
    }
}

/// Everything needed to rasterize one scene deterministically.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub color: Color,
    pub shape: Shape,
    pub size: SizeClass,
    /// (row, col) cell of the 4x4 grid.
    pub cell: (usize, usize),
    /// Background shade level in `0..BACKGROUND_LEVELS`.
    pub background_level: usize,
    /// Render no object at all: an empty foreground mask over plain noise.
    /// A slice of training alignment pairs uses this to caption the
    /// background by itself.
    #[serde(default)]
    pub background_only: bool,
    pub noise_seed: u64,
}

impl SceneSpec {
    /// Canonical (color-major) class combo index in `0..16`.
    pub fn combo(&self) -> usize {
        let ci = COLORS.iter().position(|c| *c == self.color).unwrap();
        let si = SHAPES.iter().position(|s| *s == self.shape).unwrap();
        ci * NUM_SHAPES + si
    }

    pub fn quadrant(&self) -> &'static str {
        match (self.cell.0 < GRID / 2, self.cell.1 < GRID / 2) {
            (true, true) => "top left",
            (true, false) => "top right",
            (false, true) => "bottom left",
            (false, false) => "bottom right",
        }
    }
}

pub fn combo_color_shape(combo: usize) -> (Color, Shape) {
    (COLORS[combo / NUM_SHAPES], SHAPES[combo % NUM_SHAPES])
}

/// One-sentence geometric gloss; distinct for every (color, shape) pair.
pub fn class_description(color: Color, shape: Shape) -> String {
    let body = match shape {
        Shape::Square => "a four sided shape with equal straight sides",
        Shape::Circle => "a perfectly round shape with no corners",
        Shape::Triangle => "a three cornered shape with a flat base",
        Shape::Cross => "two crossing bars forming a plus sign",
    };
    format!("{body} drawn in {}", color.word())
}

// ---- rendering -------------------------------------------------------------

fn inside(shape: Shape, dx: f64, dy: f64, r: f64) -> bool {
    match shape {
        Shape::Square => dx.abs() <= r && dy.abs() <= r,
        Shape::Circle => dx * dx + dy * dy <= r * r,
        Shape::Triangle => dy >= -r && dy <= r && dx.abs() <= (dy + r) / 2.0,
        Shape::Cross => {
            (dx.abs() <= r / 3.0 && dy.abs() <= r) || (dy.abs() <= r / 3.0 && dx.abs() <= r)
        }
    }
}

/// Rasterize a scene into `[3 x S x S]` values in `[0, 1]`, returning the
/// pre-noise foreground mask alongside (row-major `S*S` booleans).
pub fn render_scene_with_mask(spec: &SceneSpec, image_size: usize) -> (Tensor, Vec<bool>) {
    let s = image_size;
    let cell_px = s as f64 / GRID as f64;
    let cy = (spec.cell.0 as f64 + 0.5) * cell_px;
    let cx = (spec.cell.1 as f64 + 0.5) * cell_px;
    let r = spec.size.radius_fraction() * cell_px;
    let bg = spec.background_level as f64 * BACKGROUND_STEP;
    let fg = spec.color.rgb();

    let mut mask = vec![false; s * s];
    if !spec.background_only {
        for y in 0..s {
            for x in 0..s {
                let dy = y as f64 + 0.5 - cy;
                let dx = x as f64 + 0.5 - cx;
                mask[y * s + x] = inside(spec.shape, dx, dy, r);
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.noise_seed);
    let mut data = vec![0.0; 3 * s * s];
    for c in 0..3 {
        for p in 0..s * s {
            let base = if mask[p] { fg[c] } else { bg };
            let noisy = base + rng.gen_range(-NOISE_AMPLITUDE..NOISE_AMPLITUDE);
            data[c * s * s + p] = noisy.clamp(0.0, 1.0);
        }
    }
    (
        Tensor::new(vec![3, s, s], data).expect("image layout"),
        mask,
    )
}

pub fn render_scene(spec: &SceneSpec, image_size: usize) -> Tensor {
    render_scene_with_mask(spec, image_size).0
}

/// Render a list of specs into one `[B x 3 x S x S]` batch tensor.
pub fn render_batch(specs: &[&SceneSpec], image_size: usize) -> Tensor {
    let s = image_size;
    let mut data = Vec::with_capacity(specs.len() * 3 * s * s);
    for spec in specs {
        data.extend_from_slice(render_scene(spec, s).data());
    }
    Tensor::new(vec![specs.len(), 3, s, s], data).expect("batch layout")
}

// ---- captions --------------------------------------------------------------

const OPENERS: [&str; 6] = [
    "a photo of",
    "a picture of",
    "an image of",
    "a rendering of",
    "a scene with",
    "you can see",
];
const SMALL_WORDS: [&str; 2] = ["small", "little"];
const LARGE_WORDS: [&str; 2] = ["large", "big"];
/// Shade words for the lower and upper halves of the background range. Half
/// the captions mention the background, which grounds the word itself (it
/// appears across all classes) and its shade (it tracks the rendered level) —
/// the dense harness leans on that grounding for its background row.
const BACKGROUND_WORDS: [&str; 2] = ["dark", "gray"];
const DISTRACTORS: [&str; 5] = [
    "outdoors",
    "on a plain backdrop",
    "at dusk",
    "with soft lighting",
    "against empty space",
];

fn shade_word(background_level: usize) -> &'static str {
    BACKGROUND_WORDS[background_level * BACKGROUND_WORDS.len() / BACKGROUND_LEVELS]
}

/// Templated caption always naming color, shape, size, and quadrant, with
/// randomized opener/ordering, a background mention in half the captions,
/// and a distractor tail at the configured rate. Object-free scenes caption
/// the background shade alone.
pub fn caption_scene(spec: &SceneSpec, rng: &mut ChaCha8Rng, distractor_rate: f64) -> String {
    let opener = OPENERS[rng.gen_range(0..OPENERS.len())];
    if spec.background_only {
        return format!("{opener} a {} background", shade_word(spec.background_level));
    }
    let size_word = match spec.size {
        SizeClass::Small => SMALL_WORDS[rng.gen_range(0..SMALL_WORDS.len())],
        SizeClass::Large => LARGE_WORDS[rng.gen_range(0..LARGE_WORDS.len())],
    };
    let color = spec.color.word();
    let shape = spec.shape.word();
    let quad = spec.quadrant();
    let quad_phrase = match rng.gen_range(0..3) {
        0 => format!("in the {quad} of the frame"),
        1 => format!("near the {quad} corner"),
        _ => format!("toward the {quad} side"),
    };
    let mut caption = match rng.gen_range(0..3) {
        0 => format!("{opener} a {size_word} {color} {shape} {quad_phrase}"),
        1 => format!("{opener} a {color} {shape}, {size_word} in size, {quad_phrase}"),
        _ => format!("{opener} the {size_word} {shape} colored {color} {quad_phrase}"),
    };
    if rng.gen_bool(0.5) {
        caption.push_str(&format!(
            " on a {} background",
            shade_word(spec.background_level)
        ));
    }
    if rng.gen_bool(distractor_rate) {
        caption.push(' ');
        caption.push_str(DISTRACTORS[rng.gen_range(0..DISTRACTORS.len())]);
    }
    caption
}

// ---- splits ----------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationRecord {
    pub spec: SceneSpec,
    pub class_index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentRecord {
    pub spec: SceneSpec,
    pub caption: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub classification: Vec<ClassificationRecord>,
    pub alignment: Vec<AlignmentRecord>,
    pub catalogue: Vec<ClassEntry>,
    pub held_out_class_ids: Vec<usize>,
}

/// Generator configuration, persisted as dataset.json.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    #[serde(default = "default_image_size")]
    pub image_size: usize,
    #[serde(default = "default_train_per_class")]
    pub train_per_class: usize,
    #[serde(default = "default_eval_per_class")]
    pub eval_per_class: usize,
    #[serde(default = "default_train_alignment_pairs")]
    pub train_alignment_pairs: usize,
    #[serde(default = "default_eval_alignment_pairs")]
    pub eval_alignment_pairs: usize,
    /// Held-out (color, shape) combos, absent from all training records.
    #[serde(default = "default_held_out")]
    pub held_out: Vec<(Color, Shape)>,
    /// Rename two visually distinct training classes to one shared name with
    /// distinct descriptions.
    #[serde(default)]
    pub duplicate_names: bool,
    #[serde(default = "default_distractor_rate")]
    pub distractor_rate: f64,
    /// Fraction of training alignment pairs rendered without an object and
    /// captioned as plain background, giving the word "background" a direct
    /// visual referent.
    #[serde(default = "default_background_pair_rate")]
    pub background_pair_rate: f64,
    #[serde(default = "default_max_len")]
    pub max_len: usize,
    #[serde(default)]
    pub export_ppm: bool,
    #[serde(default)]
    pub seed: u64,
}

fn default_image_size() -> usize {
    32
}
fn default_train_per_class() -> usize {
    50
}
fn default_eval_per_class() -> usize {
    20
}
fn default_train_alignment_pairs() -> usize {
    800
}
fn default_eval_alignment_pairs() -> usize {
    64
}
fn default_distractor_rate() -> f64 {
    0.3
}
fn default_background_pair_rate() -> f64 {
    0.1
}
fn default_max_len() -> usize {
    32
}
/// Diagonal combos: every color and every shape still appears in training.
fn default_held_out() -> Vec<(Color, Shape)> {
    (0..NUM_COLORS).map(|i| (COLORS[i], SHAPES[i])).collect()
}

impl Default for DatasetConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields defaulted")
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.image_size % GRID != 0 {
            return Err(UclError::config(format!(
                "image_size {} must be a positive multiple of {GRID}",
                self.image_size
            )));
        }
        let held: BTreeSet<usize> = self
            .held_out
            .iter()
            .map(|&(c, s)| {
                COLORS.iter().position(|x| *x == c).unwrap() * NUM_SHAPES
                    + SHAPES.iter().position(|x| *x == s).unwrap()
            })
            .collect();
        if held.len() != self.held_out.len() {
            return Err(UclError::config("held_out combos must be distinct"));
        }
        if held.len() >= NUM_COMBOS {
            return Err(UclError::config(
                "held_out cannot cover every (color, shape) combo",
            ));
        }
        if !(0.0..=1.0).contains(&self.distractor_rate) {
            return Err(UclError::config("distractor_rate must be in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.background_pair_rate) {
            return Err(UclError::config("background_pair_rate must be in [0, 1]"));
        }
        let seen = NUM_COMBOS - held.len();
        let distinct_eval_tuples = seen * 2 * 4; // combo x size x quadrant
        if self.eval_alignment_pairs > distinct_eval_tuples {
            return Err(UclError::config(format!(
                "eval_alignment_pairs {} exceeds the {} distinct (combo, size, quadrant) tuples",
                self.eval_alignment_pairs, distinct_eval_tuples
            )));
        }
        if self.max_len < 4 {
            return Err(UclError::config("max_len too small for captions"));
        }
        Ok(())
    }

    fn held_out_combos(&self) -> BTreeSet<usize> {
        self.held_out
            .iter()
            .map(|&(c, s)| {
                COLORS.iter().position(|x| *x == c).unwrap() * NUM_SHAPES
                    + SHAPES.iter().position(|x| *x == s).unwrap()
            })
            .collect()
    }
}

fn random_spec(combo: usize, rng: &mut ChaCha8Rng) -> SceneSpec {
    let (color, shape) = combo_color_shape(combo);
    SceneSpec {
        color,
        shape,
        size: if rng.gen_bool(0.5) {
            SizeClass::Small
        } else {
            SizeClass::Large
        },
        cell: (rng.gen_range(0..GRID), rng.gen_range(0..GRID)),
        background_level: rng.gen_range(0..BACKGROUND_LEVELS),
        background_only: false,
        noise_seed: rng.gen(),
    }
}

/// Build the train and eval splits.
///
/// Catalogue ordering puts the seen classes first (indices `0..n_seen`) and
/// held-out classes after them, so the training catalogue is a strict prefix
/// of the evaluation catalogue and class indices agree across splits.
pub fn build_splits(config: &DatasetConfig) -> Result<(DatasetSplit, DatasetSplit)> {
    config.validate()?;
    let held = config.held_out_combos();
    let seen_combos: Vec<usize> = (0..NUM_COMBOS).filter(|c| !held.contains(c)).collect();
    let held_combos: Vec<usize> = held.iter().copied().collect();
    let n_seen = seen_combos.len();

    let mut full_catalogue = Vec::with_capacity(NUM_COMBOS);
    for (idx, &combo) in seen_combos.iter().chain(held_combos.iter()).enumerate() {
        let (color, shape) = combo_color_shape(combo);
        full_catalogue.push(ClassEntry::new(
            idx,
            format!("{} {}", color.word(), shape.word()),
            class_description(color, shape),
        ));
    }
    if config.duplicate_names {
        // First seen pair differing in both color and shape: visually
        // distinct classes collapsed onto one ambiguous name. Their
        // descriptions keep telling them apart.
        let mut chosen = None;
        'outer: for i in 0..n_seen {
            for j in (i + 1)..n_seen {
                let (ci, si) = combo_color_shape(seen_combos[i]);
                let (cj, sj) = combo_color_shape(seen_combos[j]);
                if ci != cj && si != sj {
                    chosen = Some((i, j));
                    break 'outer;
                }
            }
        }
        let (i, j) = chosen.ok_or_else(|| {
            UclError::config("duplicate_names needs two seen classes differing in color and shape")
        })?;
        full_catalogue[i].name = "widget".to_string();
        full_catalogue[j].name = "widget".to_string();
    }

    // Map canonical combo -> catalogue class index.
    let mut combo_to_class = vec![usize::MAX; NUM_COMBOS];
    for (idx, &combo) in seen_combos.iter().chain(held_combos.iter()).enumerate() {
        combo_to_class[combo] = idx;
    }

    let mut rng_train_cls = ChaCha8Rng::seed_from_u64(config.seed);
    rng_train_cls.set_stream(1);
    let mut rng_train_align = ChaCha8Rng::seed_from_u64(config.seed);
    rng_train_align.set_stream(2);
    let mut rng_eval_cls = ChaCha8Rng::seed_from_u64(config.seed);
    rng_eval_cls.set_stream(3);
    let mut rng_eval_align = ChaCha8Rng::seed_from_u64(config.seed);
    rng_eval_align.set_stream(4);

    let mut train_classification = Vec::with_capacity(n_seen * config.train_per_class);
    for &combo in &seen_combos {
        for _ in 0..config.train_per_class {
            train_classification.push(ClassificationRecord {
                spec: random_spec(combo, &mut rng_train_cls),
                class_index: combo_to_class[combo],
            });
        }
    }

    let mut train_alignment = Vec::with_capacity(config.train_alignment_pairs);
    for _ in 0..config.train_alignment_pairs {
        let spec = if rng_train_align.gen_bool(config.background_pair_rate) {
            SceneSpec {
                color: COLORS[0],
                shape: SHAPES[0],
                size: SizeClass::Small,
                cell: (0, 0),
                background_level: rng_train_align.gen_range(0..BACKGROUND_LEVELS),
                background_only: true,
                noise_seed: rng_train_align.gen(),
            }
        } else {
            let combo = seen_combos[rng_train_align.gen_range(0..n_seen)];
            random_spec(combo, &mut rng_train_align)
        };
        let caption = caption_scene(&spec, &mut rng_train_align, config.distractor_rate);
        train_alignment.push(AlignmentRecord { spec, caption });
    }

    let mut eval_classification = Vec::with_capacity(NUM_COMBOS * config.eval_per_class);
    for class_index in 0..NUM_COMBOS {
        let combo = seen_combos
            .iter()
            .chain(held_combos.iter())
            .nth(class_index)
            .copied()
            .unwrap();
        for _ in 0..config.eval_per_class {
            eval_classification.push(ClassificationRecord {
                spec: random_spec(combo, &mut rng_eval_cls),
                class_index,
            });
        }
    }

    // Evaluation alignment pairs are drawn over distinct
    // (combo, size, quadrant) tuples so every caption identifies a unique
    // record; distractors are disabled to keep retrieval judgments clean.
    let mut tuples = Vec::new();
    for &combo in &seen_combos {
        for &size in &[SizeClass::Small, SizeClass::Large] {
            for q in 0..4 {
                tuples.push((combo, size, q));
            }
        }
    }
    tuples.shuffle(&mut rng_eval_align);
    let mut eval_alignment = Vec::with_capacity(config.eval_alignment_pairs);
    for &(combo, size, q) in tuples.iter().take(config.eval_alignment_pairs) {
        let (color, shape) = combo_color_shape(combo);
        let cell = (
            (q / 2) * (GRID / 2) + rng_eval_align.gen_range(0..GRID / 2),
            (q % 2) * (GRID / 2) + rng_eval_align.gen_range(0..GRID / 2),
        );
        let spec = SceneSpec {
            color,
            shape,
            size,
            cell,
            background_level: rng_eval_align.gen_range(0..BACKGROUND_LEVELS),
            background_only: false,
            noise_seed: rng_eval_align.gen(),
        };
        let caption = caption_scene(&spec, &mut rng_eval_align, 0.0);
        eval_alignment.push(AlignmentRecord { spec, caption });
    }

    let train = DatasetSplit {
        classification: train_classification,
        alignment: train_alignment,
        catalogue: full_catalogue[..n_seen].to_vec(),
        held_out_class_ids: Vec::new(),
    };
    let eval = DatasetSplit {
        classification: eval_classification,
        alignment: eval_alignment,
        catalogue: full_catalogue,
        held_out_class_ids: (n_seen..NUM_COMBOS).collect(),
    };
    Ok((train, eval))
}

/// Vocabulary over everything the model can see during training: captions
/// plus every prompt-template rendering (enriched) of the training catalogue.
pub fn build_vocabulary(
    train: &DatasetSplit,
    templates: &[String],
    max_len: usize,
) -> Result<Vocabulary> {
    let mut corpus: Vec<String> = train.alignment.iter().map(|r| r.caption.clone()).collect();
    for entry in &train.catalogue {
        for label in build_prompt_ensemble(entry, templates, true)? {
            corpus.push(label.text);
        }
    }
    Vocabulary::build(&corpus, max_len)
}

// ---- batching --------------------------------------------------------------

/// Deterministic mixed-batch sampler: each side runs its own epoch clock,
/// shuffling per epoch and emitting every record exactly once per epoch.
pub struct BatchStream<'a> {
    split: &'a DatasetSplit,
    vocab: &'a Vocabulary,
    image_size: usize,
    n_cls: usize,
    n_align: usize,
    cls_order: Vec<usize>,
    cls_pos: usize,
    align_order: Vec<usize>,
    align_pos: usize,
    rng_cls: ChaCha8Rng,
    rng_align: ChaCha8Rng,
}

impl<'a> BatchStream<'a> {
    pub fn new(
        split: &'a DatasetSplit,
        vocab: &'a Vocabulary,
        image_size: usize,
        batch_size: usize,
        ratio: (usize, usize),
        seed: u64,
    ) -> Result<Self> {
        let parts = ratio.0 + ratio.1;
        if parts == 0 {
            return Err(UclError::config("batch ratio cannot be 0:0"));
        }
        if batch_size == 0 || batch_size % parts != 0 {
            return Err(UclError::config(format!(
                "batch size {batch_size} not divisible by ratio parts {}:{}",
                ratio.0, ratio.1
            )));
        }
        let unit = batch_size / parts;
        let n_cls = unit * ratio.0;
        let n_align = unit * ratio.1;
        if n_cls > 0 && split.classification.is_empty() {
            return Err(UclError::contract("no classification records to sample"));
        }
        if n_align > 0 && split.alignment.is_empty() {
            return Err(UclError::contract("no alignment records to sample"));
        }
        let mut rng_cls = ChaCha8Rng::seed_from_u64(seed);
        rng_cls.set_stream(11);
        let mut rng_align = ChaCha8Rng::seed_from_u64(seed);
        rng_align.set_stream(12);
        Ok(BatchStream {
            split,
            vocab,
            image_size,
            n_cls,
            n_align,
            cls_order: Vec::new(),
            cls_pos: 0,
            align_order: Vec::new(),
            align_pos: 0,
            rng_cls,
            rng_align,
        })
    }

    pub fn sides(&self) -> (usize, usize) {
        (self.n_cls, self.n_align)
    }

    /// Record indices for the next batch, advancing both epoch clocks.
    pub fn next_indices(&mut self) -> (Vec<usize>, Vec<usize>) {
        let mut cls = Vec::with_capacity(self.n_cls);
        for _ in 0..self.n_cls {
            if self.cls_pos >= self.cls_order.len() {
                self.cls_order = (0..self.split.classification.len()).collect();
                self.cls_order.shuffle(&mut self.rng_cls);
                self.cls_pos = 0;
            }
            cls.push(self.cls_order[self.cls_pos]);
            self.cls_pos += 1;
        }
        let mut align = Vec::with_capacity(self.n_align);
        for _ in 0..self.n_align {
            if self.align_pos >= self.align_order.len() {
                self.align_order = (0..self.split.alignment.len()).collect();
                self.align_order.shuffle(&mut self.rng_align);
                self.align_pos = 0;
            }
            align.push(self.align_order[self.align_pos]);
            self.align_pos += 1;
        }
        (cls, align)
    }

    pub fn next_batch(&mut self) -> MixedBatch {
        let (cls_ids, align_ids) = self.next_indices();
        let cls_specs: Vec<&SceneSpec> = cls_ids
            .iter()
            .map(|&i| &self.split.classification[i].spec)
            .collect();
        let align_specs: Vec<&SceneSpec> = align_ids
            .iter()
            .map(|&i| &self.split.alignment[i].spec)
            .collect();
        MixedBatch {
            cls_images: render_batch(&cls_specs, self.image_size),
            cls_labels: cls_ids
                .iter()
                .map(|&i| self.split.classification[i].class_index)
                .collect(),
            align_images: render_batch(&align_specs, self.image_size),
            align_tokens: align_ids
                .iter()
                .map(|&i| self.vocab.tokenize(&self.split.alignment[i].caption))
                .collect(),
        }
    }
}

// ---- persistence -----------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SplitsFile {
    train: DatasetSplit,
    eval: DatasetSplit,
}

pub struct Dataset {
    pub config: DatasetConfig,
    pub train: DatasetSplit,
    pub eval: DatasetSplit,
    pub vocab: Vocabulary,
    pub prompts: Vec<String>,
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<PathBuf> {
    let path = dir.join(name);
    let mut body = serde_json::to_string_pretty(value)?;
    body.push('\n');
    std::fs::write(&path, body)?;
    Ok(path)
}

pub fn save_dataset(dir: &Path, dataset: &Dataset) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    written.push(write_json(dir, "dataset.json", &dataset.config)?);
    written.push(write_json(
        dir,
        "splits.json",
        &SplitsFile {
            train: dataset.train.clone(),
            eval: dataset.eval.clone(),
        },
    )?);
    written.push(write_json(dir, "vocab.json", &dataset.vocab)?);
    let prompts_path = dir.join("prompts.txt");
    crate::text::write_prompts(&prompts_path, &dataset.prompts)?;
    written.push(prompts_path);
    let classes_path = dir.join("classes.jsonl");
    crate::text::write_classes_jsonl(&classes_path, &dataset.eval.catalogue)?;
    written.push(classes_path);
    Ok(written)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let config: DatasetConfig =
        serde_json::from_str(&std::fs::read_to_string(dir.join("dataset.json"))?)?;
    let splits: SplitsFile =
        serde_json::from_str(&std::fs::read_to_string(dir.join("splits.json"))?)?;
    let vocab: Vocabulary =
        serde_json::from_str(&std::fs::read_to_string(dir.join("vocab.json"))?)?;
    let prompts = crate::text::read_prompts(&dir.join("prompts.txt"))?;
    Ok(Dataset {
        config,
        train: splits.train,
        eval: splits.eval,
        vocab,
        prompts,
    })
}

/// Export a scene as an 8-bit binary PPM (P6).
pub fn write_ppm(path: &Path, image: &Tensor) -> Result<()> {
    let shape = image.shape();
    if shape.len() != 3 || shape[0] != 3 || shape[1] != shape[2] {
        return Err(UclError::shape(format!(
            "PPM export expects [3 x S x S], got {shape:?}"
        )));
    }
    let s = shape[1];
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(out, "P6\n{s} {s}\n255\n")?;
    let mut bytes = Vec::with_capacity(3 * s * s);
    for p in 0..s * s {
        for c in 0..3 {
            let v = image.data()[c * s * s + p];
            bytes.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    out.write_all(&bytes)?;
    out.flush()?;
    Ok(())
}

/// Export every record's image as `cls_{i}.ppm` / `align_{i}.ppm` under
/// `dir/images`, using up to `threads` worker threads.
pub fn export_ppm_images(
    dir: &Path,
    split: &DatasetSplit,
    image_size: usize,
    threads: usize,
) -> Result<Vec<PathBuf>> {
    let image_dir = dir.join("images");
    std::fs::create_dir_all(&image_dir)?;
    let jobs: Vec<(PathBuf, SceneSpec)> = split
        .classification
        .iter()
        .enumerate()
        .map(|(i, r)| (image_dir.join(format!("cls_{i:05}.ppm")), r.spec))
        .chain(
            split
                .alignment
                .iter()
                .enumerate()
                .map(|(i, r)| (image_dir.join(format!("align_{i:05}.ppm")), r.spec)),
        )
        .collect();
    let threads = threads.max(1);
    let chunk = jobs.len().div_ceil(threads.min(jobs.len()).max(1));
    std::thread::scope(|scope| -> Result<()> {
        let mut handles = Vec::new();
        for part in jobs.chunks(chunk) {
            handles.push(scope.spawn(move || -> Result<()> {
                for (path, spec) in part {
                    write_ppm(path, &render_scene(spec, image_size))?;
                }
                Ok(())
            }));
        }
        for h in handles {
            h.join().expect("ppm worker panicked")?;
        }
        Ok(())
    })?;
    Ok(jobs.into_iter().map(|(p, _)| p).collect())
}
