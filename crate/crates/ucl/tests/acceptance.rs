//! Release acceptance suite: one test per shipping criterion, named a01..a12.
//! Every test ends by printing `acceptance NN (<topic>): pass`, so a
//! `--nocapture` run reads as a checklist. Criteria that need trained models
//! share lazily built worlds (a fixed dataset plus a grid of training runs)
//! to keep the whole suite inside a desk-scale wall-clock budget.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

use ucl::cli::unified_grad_check;
use ucl::data::{
    build_splits, build_vocabulary, render_batch, render_scene_with_mask, Dataset, DatasetConfig,
    SceneSpec,
};
use ucl::encoders::{
    encode_images, encode_texts, EncoderPair, Pooling, TextEncoderConfig, VisualEncoderConfig,
};
use ucl::eval::{
    build_zeroshot_classifier, classify_embeddings, dense_zeroshot_segment, fewshot_probe,
    retrieval_recall, support_query_split, BackgroundRow, ClassifyOutcome, Model, ProbeInit,
};
use ucl::losses::{
    cosine_ce_loss, infonce_loss, linear_ce_loss, meta_classifier_loss, unified_loss, ClsHead,
    MixedBatch, TauNode,
};
use ucl::optim::{clip_global_norm, lr_at, Schedule};
use ucl::tape::{grad_check, NodeId, Tape};
use ucl::tensor::Tensor;
use ucl::text::{default_prompt_templates, duplicate_name_stats, ClassEntry, Vocabulary};
use ucl::train::{catalogue_tokens, train_run, TrainConfig, TrainResult};

const SEEDS: [u64; 3] = [0, 1, 2];
const TAU: f64 = 0.05;

fn pass(id: &str, topic: &str) {
    println!("acceptance {id} ({topic}): pass");
}

fn median3(mut values: Vec<f64>) -> f64 {
    assert_eq!(values.len(), 3);
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    values[1]
}

// ---- shared worlds ---------------------------------------------------------

fn make_dataset(config: DatasetConfig) -> Dataset {
    let (train, eval) = build_splits(&config).expect("valid dataset config");
    let prompts = default_prompt_templates();
    let vocab = build_vocabulary(&train, &prompts, config.max_len).expect("vocabulary");
    Dataset {
        config,
        train,
        eval,
        vocab,
        prompts,
    }
}

fn base_train_config(mode: &str, seed: u64) -> TrainConfig {
    let mut config = TrainConfig::with_data(PathBuf::from("in-memory"));
    config.mode = mode.parse().expect("known mode");
    config.seed = seed;
    config
}

/// The ablation grid every directional criterion reads from: all four
/// training modes, three seeds each, default configuration throughout.
struct ModeWorld {
    dataset: Dataset,
    runs: BTreeMap<(&'static str, u64), TrainResult>,
    /// Wall-clock total for the twelve training runs.
    wall: Duration,
    eval_images: Tensor,
    eval_labels: Vec<usize>,
}

static MODE_WORLD: OnceLock<ModeWorld> = OnceLock::new();

fn mode_world() -> &'static ModeWorld {
    MODE_WORLD.get_or_init(|| {
        let dataset = make_dataset(DatasetConfig::default());
        let mut runs = BTreeMap::new();
        let start = Instant::now();
        for mode in ["deep_fusion", "split_head", "sup_only", "vl_only"] {
            for seed in SEEDS {
                let config = base_train_config(mode, seed);
                let result = train_run(&config, &dataset, None).expect("training run");
                runs.insert((mode, seed), result);
            }
        }
        let wall = start.elapsed();
        let (eval_images, eval_labels) = eval_classification_batch(&dataset);
        ModeWorld {
            dataset,
            runs,
            wall,
            eval_images,
            eval_labels,
        }
    })
}

/// Duplicate-name world: two training classes share the name "widget" and
/// only their descriptions tell them apart; three enriched runs on top.
struct DupWorld {
    dataset: Dataset,
    runs: Vec<TrainResult>,
    per_seed_wall: Vec<Duration>,
}

static DUP_WORLD: OnceLock<DupWorld> = OnceLock::new();

fn dup_world() -> &'static DupWorld {
    DUP_WORLD.get_or_init(|| {
        let dataset = make_dataset(DatasetConfig {
            duplicate_names: true,
            ..DatasetConfig::default()
        });
        let mut runs = Vec::new();
        let mut per_seed_wall = Vec::new();
        for seed in SEEDS {
            let config = base_train_config("deep_fusion", seed);
            let start = Instant::now();
            runs.push(train_run(&config, &dataset, None).expect("duplicate-name run"));
            per_seed_wall.push(start.elapsed());
        }
        DupWorld {
            dataset,
            runs,
            per_seed_wall,
        }
    })
}

/// A dedicated alignment-heavy run for the retrieval criterion: image-text
/// training only, symmetric loss, double batch, twice the steps.
static RETRIEVAL_RUN: OnceLock<TrainResult> = OnceLock::new();

fn retrieval_run() -> &'static TrainResult {
    RETRIEVAL_RUN.get_or_init(|| {
        let dataset = &mode_world().dataset;
        let mut config = base_train_config("vl_only", 0);
        config.symmetric_infonce = true;
        config.batch.size = 16;
        config.schedule.steps = 3000;
        train_run(&config, dataset, None).expect("retrieval run")
    })
}

fn model_of(run: &TrainResult) -> Model {
    Model::new(run.visual, run.text, run.params.clone()).expect("checkpointed parameters")
}

fn eval_classification_batch(dataset: &Dataset) -> (Tensor, Vec<usize>) {
    let specs: Vec<&SceneSpec> = dataset
        .eval
        .classification
        .iter()
        .map(|r| &r.spec)
        .collect();
    let labels = dataset
        .eval
        .classification
        .iter()
        .map(|r| r.class_index)
        .collect();
    (render_batch(&specs, dataset.config.image_size), labels)
}

fn zeroshot_weights(
    model: &Model,
    dataset: &Dataset,
    catalogue: &[ClassEntry],
    enriched: bool,
    background: BackgroundRow,
) -> ucl::eval::ClassifierWeights {
    build_zeroshot_classifier(
        model,
        catalogue,
        &dataset.prompts,
        enriched,
        &dataset.vocab,
        background,
    )
    .expect("classifier weights")
}

/// Accuracy over the subset of samples whose label passes the filter.
fn subset_accuracy(outcome: &ClassifyOutcome, keep: impl Fn(usize) -> bool) -> f64 {
    let mut correct = 0usize;
    let mut total = 0usize;
    for pc in &outcome.per_class {
        if keep(pc.class_index) {
            correct += pc.correct;
            total += pc.total;
        }
    }
    correct as f64 / total.max(1) as f64
}

/// Full 16-way zero-shot outcome for one trained run.
fn zeroshot_outcome(world: &ModeWorld, run: &TrainResult, enriched: bool) -> ClassifyOutcome {
    let model = model_of(run);
    let weights = zeroshot_weights(
        &model,
        &world.dataset,
        &world.dataset.eval.catalogue,
        enriched,
        BackgroundRow::None,
    );
    let emb = model.embed_images(&world.eval_images).expect("embeddings");
    classify_embeddings(&emb, &weights, &world.eval_labels).expect("classification")
}

/// 12-way accuracy over seen-class eval images, scored through the text
/// encoder (the deep-fusion classifier route).
fn seen12_text(world: &ModeWorld, run: &TrainResult, enriched: bool) -> f64 {
    let model = model_of(run);
    let weights = zeroshot_weights(
        &model,
        &world.dataset,
        &world.dataset.train.catalogue,
        enriched,
        BackgroundRow::None,
    );
    let (images, labels) = seen_eval_subset(world);
    let emb = model.embed_images(&images).expect("embeddings");
    classify_embeddings(&emb, &weights, &labels)
        .expect("classification")
        .top1
}

/// 12-way accuracy over seen-class eval images, scored with a trained linear
/// head (raw inner products, the supervised-baseline route).
fn seen12_linear(world: &ModeWorld, run: &TrainResult) -> f64 {
    let head = run.params.get("head.w").expect("linear-head checkpoint");
    let model = model_of(run);
    let (images, labels) = seen_eval_subset(world);
    let emb = model.embed_images(&images).expect("embeddings");
    let mut hits = 0usize;
    for (row, &label) in labels.iter().enumerate() {
        let f = emb.row(row);
        let mut best = (0usize, f64::NEG_INFINITY);
        for c in 0..head.rows() {
            let score: f64 = f.iter().zip(head.row(c)).map(|(a, b)| a * b).sum();
            if score > best.1 {
                best = (c, score);
            }
        }
        if best.0 == label {
            hits += 1;
        }
    }
    hits as f64 / labels.len() as f64
}

fn seen_eval_subset(world: &ModeWorld) -> (Tensor, Vec<usize>) {
    let n_seen = world.dataset.train.catalogue.len();
    let keep: Vec<usize> = (0..world.eval_labels.len())
        .filter(|&i| world.eval_labels[i] < n_seen)
        .collect();
    let specs: Vec<&SceneSpec> = keep
        .iter()
        .map(|&i| &world.dataset.eval.classification[i].spec)
        .collect();
    let labels = keep.iter().map(|&i| world.eval_labels[i]).collect();
    (
        render_batch(&specs, world.dataset.config.image_size),
        labels,
    )
}

// ---- a01 -------------------------------------------------------------------

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let numel = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..numel).map(|_| rng.gen_range(lo..hi)).collect(),
    )
    .unwrap()
}

/// Reduce any op output to a scalar with generic (fixed random) weights so
/// that no gradient path is structurally zero.
fn weighted_sum(tape: &mut Tape, id: NodeId, weights: &Tensor) -> NodeId {
    let w = tape.constant(weights.clone());
    let prod = tape.mul(id, w).unwrap();
    tape.sum_all(prod)
}

#[test]
fn a01_gradient_correctness() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst: (f64, &'static str) = (0.0, "none");
    let mut ops = 0usize;

    // Every differentiable primitive, exercised at a generic point.
    let mut check = |name: &'static str,
                     params: Vec<Tensor>,
                     build: &dyn Fn(&mut Tape, &[NodeId]) -> ucl::Result<NodeId>| {
        let err = grad_check(build, &params, 1e-5).expect(name);
        assert!(err < 1e-5, "{name}: max relative error {err:.3e}");
        if err > worst.0 {
            worst = (err, name);
        }
        ops += 1;
    };

    let a23 = rand_tensor(&mut rng, &[2, 3], -1.0, 1.0);
    let b23 = rand_tensor(&mut rng, &[2, 3], -1.0, 1.0);
    let w23 = rand_tensor(&mut rng, &[2, 3], -1.0, 1.0);
    let w32 = rand_tensor(&mut rng, &[3, 2], -1.0, 1.0);
    let b34 = rand_tensor(&mut rng, &[3, 4], -1.0, 1.0);
    let w24 = rand_tensor(&mut rng, &[2, 4], -1.0, 1.0);
    let v3 = rand_tensor(&mut rng, &[3], -1.0, 1.0);
    let v2 = rand_tensor(&mut rng, &[2], -1.0, 1.0);
    let w43 = rand_tensor(&mut rng, &[4, 3], -1.0, 1.0);
    let w21 = rand_tensor(&mut rng, &[2, 1], -1.0, 1.0);
    let w25 = rand_tensor(&mut rng, &[2, 5], -1.0, 1.0);
    let w13 = rand_tensor(&mut rng, &[1, 3], -1.0, 1.0);
    let pos23 = rand_tensor(&mut rng, &[2, 3], 0.5, 2.0);
    let scalar1 = rand_tensor(&mut rng, &[1], -1.0, 1.0);
    let w4 = rand_tensor(&mut rng, &[4], -1.0, 1.0);

    let wa = w23.clone();
    check("add", vec![a23.clone(), b23.clone()], &|t, p| {
        let y = t.add(p[0], p[1])?;
        Ok(weighted_sum(t, y, &wa))
    });
    let ws = w23.clone();
    check("sub", vec![a23.clone(), b23.clone()], &|t, p| {
        let y = t.sub(p[0], p[1])?;
        Ok(weighted_sum(t, y, &ws))
    });
    let wm = w23.clone();
    check("mul", vec![a23.clone(), b23.clone()], &|t, p| {
        let y = t.mul(p[0], p[1])?;
        Ok(weighted_sum(t, y, &wm))
    });
    let wsc = w23.clone();
    check("scale", vec![a23.clone()], &|t, p| {
        let y = t.scale(p[0], -1.7);
        Ok(weighted_sum(t, y, &wsc))
    });
    let wrv = w23.clone();
    check("add_row_vec", vec![a23.clone(), v3.clone()], &|t, p| {
        let y = t.add_row_vec(p[0], p[1])?;
        Ok(weighted_sum(t, y, &wrv))
    });
    let wsr = w23.clone();
    check("scale_rows", vec![a23.clone(), v2.clone()], &|t, p| {
        let y = t.scale_rows(p[0], p[1])?;
        Ok(weighted_sum(t, y, &wsr))
    });
    let wmm = w24.clone();
    check("matmul", vec![a23.clone(), b34.clone()], &|t, p| {
        let y = t.matmul(p[0], p[1])?;
        Ok(weighted_sum(t, y, &wmm))
    });
    let wt = w32.clone();
    check("transpose", vec![a23.clone()], &|t, p| {
        let y = t.transpose(p[0])?;
        Ok(weighted_sum(t, y, &wt))
    });
    let wsm = w23.clone();
    check("softmax_rows", vec![a23.clone()], &|t, p| {
        let y = t.softmax_rows(p[0])?;
        Ok(weighted_sum(t, y, &wsm))
    });
    let wl2 = w23.clone();
    check("l2_normalize_rows", vec![a23.clone()], &|t, p| {
        let y = t.l2_normalize_rows(p[0], 1e-12)?;
        Ok(weighted_sum(t, y, &wl2))
    });
    let wln = w23.clone();
    check(
        "layer_norm_rows",
        vec![a23.clone(), v3.clone(), v3.clone()],
        &|t, p| {
            let y = t.layer_norm_rows(p[0], p[1], p[2], 1e-5)?;
            Ok(weighted_sum(t, y, &wln))
        },
    );
    let wg = w23.clone();
    check("gelu", vec![a23.clone()], &|t, p| {
        let y = t.gelu(p[0]);
        Ok(weighted_sum(t, y, &wg))
    });
    let wlog = w23.clone();
    check("log", vec![pos23.clone()], &|t, p| {
        let y = t.log(p[0]);
        Ok(weighted_sum(t, y, &wlog))
    });
    let wexp = w23.clone();
    check("exp", vec![a23.clone()], &|t, p| {
        let y = t.exp(p[0]);
        Ok(weighted_sum(t, y, &wexp))
    });
    let wbs = w4.clone();
    check("broadcast_scalar", vec![scalar1.clone()], &|t, p| {
        let y = t.broadcast_scalar(p[0], 4)?;
        Ok(weighted_sum(t, y, &wbs))
    });
    // Duplicate ids so gather gradients must accumulate.
    let wgr = w43.clone();
    check("gather_rows", vec![a23.clone()], &|t, p| {
        let y = t.gather_rows(p[0], &[0, 1, 1, 0])?;
        Ok(weighted_sum(t, y, &wgr))
    });
    let wsum = w13.clone();
    check("sum_rows", vec![a23.clone()], &|t, p| {
        let y = t.sum_rows(p[0])?;
        Ok(weighted_sum(t, y, &wsum))
    });
    let wmean = w13.clone();
    check("mean_rows", vec![a23.clone()], &|t, p| {
        let y = t.mean_rows(p[0])?;
        Ok(weighted_sum(t, y, &wmean))
    });
    check("sum_all", vec![a23.clone()], &|t, p| Ok(t.sum_all(p[0])));
    check("mean_all", vec![a23.clone()], &|t, p| t.mean_all(p[0]));
    let wcr = w43.clone();
    check(
        "concat_rows",
        vec![a23.clone(), rand_tensor(&mut rng, &[2, 3], -1.0, 1.0)],
        &|t, p| {
            let y = t.concat_rows(&[p[0], p[1]])?;
            Ok(weighted_sum(t, y, &wcr))
        },
    );
    let wsl = w13.clone();
    check("slice_rows", vec![a23.clone()], &|t, p| {
        let y = t.slice_rows(p[0], 1, 1)?;
        Ok(weighted_sum(t, y, &wsl))
    });
    let wslc = w21.clone();
    check("slice_cols", vec![a23.clone()], &|t, p| {
        let y = t.slice_cols(p[0], 1, 1)?;
        Ok(weighted_sum(t, y, &wslc))
    });
    let wcc = w25.clone();
    check(
        "concat_cols",
        vec![a23.clone(), rand_tensor(&mut rng, &[2, 2], -1.0, 1.0)],
        &|t, p| {
            let y = t.concat_cols(&[p[0], p[1]])?;
            Ok(weighted_sum(t, y, &wcc))
        },
    );
    check("cross_entropy_mean", vec![w24.clone()], &|t, p| {
        t.cross_entropy_mean(p[0], &[3, 0])
    });
    assert_eq!(ops, 25, "primitive coverage drifted");

    // The full pipeline: both encoders, a mixed batch, the combined loss.
    let (err, param_count) = unified_grad_check(3).expect("unified gradient check");
    assert!(
        err < 1e-5,
        "unified loss: max relative error {err:.3e} over {param_count} parameters"
    );
    assert!(param_count < 2000, "toy model grew to {param_count} parameters");

    let elapsed = start.elapsed();
    assert!(
        elapsed < Duration::from_secs(60),
        "gradient checks took {elapsed:?}"
    );
    println!(
        "  worst primitive: {} at {:.3e}; unified {err:.3e} over {param_count} params in {elapsed:?}",
        worst.1, worst.0
    );
    pass("01", "gradient correctness");
}

// ---- a02 -------------------------------------------------------------------

fn naive_ce(logits: &[Vec<f64>], labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for (row, &label) in logits.iter().zip(labels) {
        let denom: f64 = row.iter().map(|&v| v.exp()).sum();
        total -= (row[label].exp() / denom).ln();
    }
    total / labels.len() as f64
}

fn naive_cosine_rows(a: &Tensor, b: &Tensor) -> Vec<Vec<f64>> {
    let norm = |row: &[f64]| row.iter().map(|v| v * v).sum::<f64>().sqrt();
    (0..a.rows())
        .map(|i| {
            (0..b.rows())
                .map(|j| {
                    let dot: f64 = a.row(i).iter().zip(b.row(j)).map(|(x, y)| x * y).sum();
                    dot / (norm(a.row(i)) * norm(b.row(j)))
                })
                .collect()
        })
        .collect()
}

#[test]
fn a02_loss_and_retrieval_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for case in 0..50 {
        let b = rng.gen_range(1..=8usize);
        let n = rng.gen_range(2..=16usize);
        let h = rng.gen_range(2..=12usize);
        let features = rand_tensor(&mut rng, &[b, h], -1.0, 1.0);
        let w = rand_tensor(&mut rng, &[n, h], -1.0, 1.0);
        let labels: Vec<usize> = (0..b).map(|_| rng.gen_range(0..n)).collect();

        // linear_ce_loss: raw inner-product logits.
        let mut tape = Tape::new();
        let f = tape.constant(features.clone());
        let wn = tape.constant(w.clone());
        let node = linear_ce_loss(&mut tape, f, wn, &labels).unwrap();
        let got = tape.scalar_value(node);
        let logits: Vec<Vec<f64>> = (0..b)
            .map(|i| {
                (0..n)
                    .map(|j| features.row(i).iter().zip(w.row(j)).map(|(x, y)| x * y).sum())
                    .collect()
            })
            .collect();
        let want = naive_ce(&logits, &labels);
        assert!(
            (got - want).abs() <= 1e-12,
            "linear case {case}: {got} vs {want}"
        );

        // cosine_ce_loss: normalized rows over temperature.
        let mut tape = Tape::new();
        let f = tape.constant(features.clone());
        let wn = tape.constant(w.clone());
        let node = cosine_ce_loss(&mut tape, f, wn, &labels, TauNode::Fixed(TAU)).unwrap();
        let got = tape.scalar_value(node);
        let cos = naive_cosine_rows(&features, &w);
        let scaled: Vec<Vec<f64>> = cos
            .iter()
            .map(|row| row.iter().map(|v| v / TAU).collect())
            .collect();
        let want = naive_ce(&scaled, &labels);
        assert!(
            (got - want).abs() <= 1e-12,
            "cosine case {case}: {got} vs {want}"
        );

        // infonce_loss, both directions, against the same cosine table.
        let txt = rand_tensor(&mut rng, &[b, h], -1.0, 1.0);
        for symmetric in [false, true] {
            let mut tape = Tape::new();
            let img_n = tape.constant(features.clone());
            let txt_n = tape.constant(txt.clone());
            let node =
                infonce_loss(&mut tape, img_n, txt_n, TauNode::Fixed(TAU), symmetric).unwrap();
            let got = tape.scalar_value(node);
            let cos = naive_cosine_rows(&features, &txt);
            let scaled: Vec<Vec<f64>> = cos
                .iter()
                .map(|row| row.iter().map(|v| v / TAU).collect())
                .collect();
            let diag: Vec<usize> = (0..b).collect();
            let i2t = naive_ce(&scaled, &diag);
            let want = if symmetric {
                let t: Vec<Vec<f64>> = (0..b)
                    .map(|i| (0..b).map(|j| scaled[j][i]).collect())
                    .collect();
                0.5 * (i2t + naive_ce(&t, &diag))
            } else {
                i2t
            };
            assert!(
                (got - want).abs() <= 1e-12,
                "infonce case {case} sym={symmetric}: {got} vs {want}"
            );
        }

        // retrieval_recall against a brute-force rank count.
        let report = retrieval_recall(&features, &txt, &[1, 5, 10]).unwrap();
        let cos = naive_cosine_rows(&features, &txt);
        for &k in &[1usize, 5, 10] {
            let mut i2t_hits = 0usize;
            let mut t2i_hits = 0usize;
            for q in 0..b {
                let rank_i2t = (0..b)
                    .filter(|&j| cos[q][j] > cos[q][q] || (cos[q][j] == cos[q][q] && j < q))
                    .count();
                if rank_i2t < k {
                    i2t_hits += 1;
                }
                let rank_t2i = (0..b)
                    .filter(|&i| cos[i][q] > cos[q][q] || (cos[i][q] == cos[q][q] && i < q))
                    .count();
                if rank_t2i < k {
                    t2i_hits += 1;
                }
            }
            assert_eq!(report.image_to_text[&k], i2t_hits as f64 / b as f64);
            assert_eq!(report.text_to_image[&k], t2i_hits as f64 / b as f64);
        }
    }
    pass("02", "loss and retrieval oracles");
}

// ---- a03 / a04 -------------------------------------------------------------

fn toy_pair() -> (VisualEncoderConfig, TextEncoderConfig, Vocabulary) {
    let corpus = ["red circle", "blue square", "green cross"];
    let vocab = Vocabulary::build(&corpus, 6).unwrap();
    let visual = VisualEncoderConfig {
        image_size: 16,
        patch_size: 8,
        width: 8,
        depth: 1,
        heads: 2,
        out_dim: 8,
    };
    let text = TextEncoderConfig {
        vocab_size: vocab.size(),
        max_len: 6,
        width: 8,
        depth: 1,
        heads: 2,
        out_dim: 8,
        pooling: Pooling::MeanOverMask,
    };
    (visual, text, vocab)
}

#[test]
fn a03_meta_classifier_bridges_to_cosine_loss() {
    let (visual, text, vocab) = toy_pair();
    let pair = EncoderPair::init(visual, text, 7).unwrap();
    let tokens: Vec<_> = ["red circle", "blue square", "green cross"]
        .iter()
        .map(|s| vocab.tokenize(s))
        .collect();
    let labels = [0usize, 2, 1, 0];

    // Stubbed text encoder: freeze its output and feed it to the cosine loss
    // as a plain weight matrix; the meta classifier must agree.
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let img = rand_tensor(&mut rng, &[4, 8], -1.0, 1.0);
    let mut tape = Tape::new();
    let nodes: BTreeMap<String, NodeId> = pair
        .params
        .iter()
        .map(|(k, v)| (k.clone(), tape.leaf(v.clone(), false)))
        .collect();
    let img_node = tape.constant(img.clone());
    let meta = meta_classifier_loss(
        &mut tape,
        &text,
        &nodes,
        img_node,
        &tokens,
        &labels,
        TauNode::Fixed(TAU),
    )
    .unwrap();
    let w_node = encode_texts(&mut tape, &text, &nodes, &tokens).unwrap();
    let w_frozen = tape.value(w_node).clone();
    let w_const = tape.constant(w_frozen);
    let cosine =
        cosine_ce_loss(&mut tape, img_node, w_const, &labels, TauNode::Fixed(TAU)).unwrap();
    let diff = (tape.scalar_value(meta) - tape.scalar_value(cosine)).abs();
    assert!(diff <= 1e-12, "stub mismatch {diff:.3e}");

    // Single-task batches: the combined loss must equal its only component
    // exactly, and that component must equal the standalone loss.
    let images = rand_tensor(&mut rng, &[2, 3, 16, 16], 0.0, 1.0);
    let empty_images = Tensor::new(vec![0, 3, 16, 16], vec![]).unwrap();
    let cls_batch = MixedBatch {
        cls_images: images.clone(),
        cls_labels: vec![0, 2],
        align_images: empty_images.clone(),
        align_tokens: vec![],
    };
    let mut tape = Tape::new();
    let nodes: BTreeMap<String, NodeId> = pair
        .params
        .iter()
        .map(|(k, v)| (k.clone(), tape.leaf(v.clone(), false)))
        .collect();
    let out = unified_loss(
        &mut tape,
        &visual,
        &text,
        &nodes,
        &cls_batch,
        ClsHead::Meta {
            catalogue_tokens: &tokens,
        },
        TauNode::Fixed(TAU),
        false,
    )
    .unwrap();
    assert_eq!(out.total, out.cls.unwrap(), "single-task total is its component");
    let direct = {
        let emb = encode_images(&mut tape, &visual, &nodes, &images).unwrap();
        meta_classifier_loss(
            &mut tape,
            &text,
            &nodes,
            emb,
            &tokens,
            &[0, 2],
            TauNode::Fixed(TAU),
        )
        .unwrap()
    };
    assert_eq!(
        tape.scalar_value(out.total),
        tape.scalar_value(direct),
        "classification-only batch equals the standalone loss"
    );

    let align_batch = MixedBatch {
        cls_images: empty_images,
        cls_labels: vec![],
        align_images: images.clone(),
        align_tokens: tokens[..2].to_vec(),
    };
    let mut tape = Tape::new();
    let nodes: BTreeMap<String, NodeId> = pair
        .params
        .iter()
        .map(|(k, v)| (k.clone(), tape.leaf(v.clone(), false)))
        .collect();
    let out = unified_loss(
        &mut tape,
        &visual,
        &text,
        &nodes,
        &align_batch,
        ClsHead::Meta {
            catalogue_tokens: &tokens,
        },
        TauNode::Fixed(TAU),
        false,
    )
    .unwrap();
    assert_eq!(out.total, out.align.unwrap());
    let direct = {
        let img_emb = encode_images(&mut tape, &visual, &nodes, &images).unwrap();
        let txt_emb = encode_texts(&mut tape, &text, &nodes, &tokens[..2]).unwrap();
        infonce_loss(&mut tape, img_emb, txt_emb, TauNode::Fixed(TAU), false).unwrap()
    };
    assert_eq!(
        tape.scalar_value(out.total),
        tape.scalar_value(direct),
        "alignment-only batch equals the standalone loss"
    );
    pass("03", "meta-classifier bridge identities");
}

#[test]
fn a04_label_gradients_reach_text_encoder_only_in_deep_fusion() {
    let (visual, text, vocab) = toy_pair();
    let pair = EncoderPair::init(visual, text, 11).unwrap();
    let tokens: Vec<_> = ["red circle", "blue square", "green cross"]
        .iter()
        .map(|s| vocab.tokenize(s))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let batch = MixedBatch {
        cls_images: rand_tensor(&mut rng, &[3, 3, 16, 16], 0.0, 1.0),
        cls_labels: vec![1, 0, 2],
        align_images: Tensor::new(vec![0, 3, 16, 16], vec![]).unwrap(),
        align_tokens: vec![],
    };

    let grad_norms = |head_kind: &str| -> BTreeMap<String, f64> {
        let mut tape = Tape::new();
        let mut nodes: BTreeMap<String, NodeId> = pair
            .params
            .iter()
            .map(|(k, v)| (k.clone(), tape.leaf(v.clone(), true)))
            .collect();
        let head_w = rand_tensor(&mut ChaCha8Rng::seed_from_u64(8), &[3, 8], -0.1, 0.1);
        let head_node = tape.leaf(head_w, true);
        nodes.insert("head.w".to_string(), head_node);
        let head = match head_kind {
            "meta" => ClsHead::Meta {
                catalogue_tokens: &tokens,
            },
            _ => ClsHead::Linear { w: head_node },
        };
        let out = unified_loss(
            &mut tape,
            &visual,
            &text,
            &nodes,
            &batch,
            head,
            TauNode::Fixed(TAU),
            false,
        )
        .unwrap();
        tape.backward(out.total).unwrap();
        nodes
            .iter()
            .map(|(name, &id)| {
                let norm = tape
                    .grad(id)
                    .map(|g| g.data().iter().map(|v| v * v).sum::<f64>().sqrt())
                    .unwrap_or(0.0);
                (name.clone(), norm)
            })
            .collect()
    };

    let deep = grad_norms("meta");
    let split = grad_norms("linear");
    let text_params: Vec<&String> = pair.params.keys().filter(|k| k.starts_with("text.")).collect();
    assert!(!text_params.is_empty());
    for name in &text_params {
        assert!(
            deep[*name] > 0.0,
            "deep fusion: text parameter {name} received no gradient"
        );
        assert_eq!(
            split[*name], 0.0,
            "split head: text parameter {name} received a label gradient"
        );
    }
    for name in pair.params.keys().filter(|k| k.starts_with("visual.")) {
        assert!(deep[name] > 0.0, "visual parameter {name} dead under deep fusion");
        assert!(split[name] > 0.0, "visual parameter {name} dead under split head");
    }
    assert!(split["head.w"] > 0.0, "linear head received no gradient");
    pass("04", "split-head gradient contrast");
}

// ---- a05 -------------------------------------------------------------------

/// 2-way discrimination between the two same-named classes, over their eval
/// images, using the given catalogue weights.
fn widget_pair_accuracy(
    model: &Model,
    dataset: &Dataset,
    weights: &ucl::eval::ClassifierWeights,
    widgets: (usize, usize),
) -> f64 {
    let keep: Vec<usize> = (0..dataset.eval.classification.len())
        .filter(|&i| {
            let c = dataset.eval.classification[i].class_index;
            c == widgets.0 || c == widgets.1
        })
        .collect();
    let specs: Vec<&SceneSpec> = keep
        .iter()
        .map(|&i| &dataset.eval.classification[i].spec)
        .collect();
    let labels: Vec<usize> = keep
        .iter()
        .map(|&i| dataset.eval.classification[i].class_index)
        .collect();
    let emb = model
        .embed_images(&render_batch(&specs, dataset.config.image_size))
        .unwrap();
    let matrix = weights.scoring_matrix();
    let mut hits = 0usize;
    for (row, &label) in labels.iter().enumerate() {
        let f = emb.row(row);
        let score = |c: usize| -> f64 { f.iter().zip(matrix.row(c)).map(|(a, b)| a * b).sum() };
        // Ties break toward the lower class index, as everywhere else.
        let pred = if score(widgets.0) >= score(widgets.1) {
            widgets.0
        } else {
            widgets.1
        };
        if pred == label {
            hits += 1;
        }
    }
    hits as f64 / labels.len() as f64
}

#[test]
fn a05_description_enrichment_separates_duplicate_names() {
    let world = dup_world();
    let dataset = &world.dataset;
    let widgets: Vec<usize> = dataset
        .train
        .catalogue
        .iter()
        .filter(|e| e.name == "widget")
        .map(|e| e.index)
        .collect();
    assert_eq!(widgets.len(), 2, "expected one injected duplicate pair");
    let pair = (widgets[0], widgets[1]);

    // Plain labels render identically for the pair, so their classifier rows
    // coincide and pairwise discrimination is stuck at the tie-break.
    let plain = catalogue_tokens(dataset, false).unwrap();
    assert_eq!(plain[pair.0].ids, plain[pair.1].ids, "plain labels must collide");
    let enriched = catalogue_tokens(dataset, true).unwrap();
    assert_ne!(enriched[pair.0].ids, enriched[pair.1].ids, "descriptions must differ");

    let mut trained_acc = Vec::new();
    for (i, run) in world.runs.iter().enumerate() {
        let model = model_of(run);
        let plain_weights = build_zeroshot_classifier(
            &model,
            &dataset.train.catalogue,
            &dataset.prompts,
            false,
            &dataset.vocab,
            BackgroundRow::None,
        )
        .unwrap();
        assert_eq!(
            plain_weights.matrix().row(pair.0),
            plain_weights.matrix().row(pair.1),
            "identical names must produce identical rows without enrichment"
        );
        let tie = widget_pair_accuracy(&model, dataset, &plain_weights, pair);
        assert_eq!(
            tie, 0.5,
            "tie-break degeneracy should absorb one class entirely"
        );

        let enriched_weights = build_zeroshot_classifier(
            &model,
            &dataset.train.catalogue,
            &dataset.prompts,
            true,
            &dataset.vocab,
            BackgroundRow::None,
        )
        .unwrap();
        trained_acc.push(widget_pair_accuracy(&model, dataset, &enriched_weights, pair));
        assert!(
            world.per_seed_wall[i] < Duration::from_secs(120),
            "duplicate-name run took {:?}",
            world.per_seed_wall[i]
        );
    }
    let med = median3(trained_acc.clone());
    assert!(
        med >= 0.75,
        "enriched discrimination median {med:.3} (runs {trained_acc:?})"
    );
    println!("  widget discrimination per seed: {trained_acc:?}");
    pass("05", "description enrichment");
}

// ---- a06 -------------------------------------------------------------------

#[test]
fn a06_mode_ablation_order_on_held_out_classes() {
    let world = mode_world();
    let n_seen = world.dataset.train.catalogue.len();
    let held = |mode: &'static str| -> Vec<f64> {
        SEEDS
            .iter()
            .map(|&s| {
                let run = &world.runs[&(mode, s)];
                let enriched = true; // training default
                let outcome = zeroshot_outcome(world, run, enriched);
                subset_accuracy(&outcome, |c| c >= n_seen)
            })
            .collect()
    };
    let deep_held = held("deep_fusion");
    let split_held = held("split_head");
    let vl_held = held("vl_only");
    let d = median3(deep_held.clone());
    let s = median3(split_held.clone());
    let v = median3(vl_held.clone());
    println!("  held-out medians: deep {d:.3} split {s:.3} vl {v:.3}");
    println!("  per-seed: deep {deep_held:?} split {split_held:?} vl {vl_held:?}");
    assert!(d >= s, "deep fusion ({d:.3}) fell below split head ({s:.3})");
    assert!(d >= v, "deep fusion ({d:.3}) fell below image-text-only ({v:.3})");

    let deep_seen: Vec<f64> = SEEDS
        .iter()
        .map(|&s| seen12_text(world, &world.runs[&("deep_fusion", s)], true))
        .collect();
    let sup_seen: Vec<f64> = SEEDS
        .iter()
        .map(|&s| seen12_linear(world, &world.runs[&("sup_only", s)]))
        .collect();
    let ds = median3(deep_seen.clone());
    let ss = median3(sup_seen.clone());
    println!("  seen-class medians: deep-fusion text route {ds:.3}, supervised linear head {ss:.3}");
    assert!(
        ds >= ss - 0.03,
        "deep fusion gave up more than 3 points of supervised accuracy ({ds:.3} vs {ss:.3})"
    );

    assert!(
        world.wall < Duration::from_secs(900),
        "twelve training runs took {:?}",
        world.wall
    );
    pass("06", "directional mode ablation");
}

// ---- a07 -------------------------------------------------------------------

#[test]
fn a07_text_initialized_probe_beats_random_init() {
    let world = mode_world();
    let dataset = &world.dataset;
    let n_classes = dataset.eval.catalogue.len();
    let (support_idx, query_idx) =
        support_query_split(&world.eval_labels, n_classes, 1, 0).unwrap();
    let gather = |idx: &[usize]| -> (Tensor, Vec<usize>) {
        let specs: Vec<&SceneSpec> = idx
            .iter()
            .map(|&i| &dataset.eval.classification[i].spec)
            .collect();
        let labels = idx.iter().map(|&i| world.eval_labels[i]).collect();
        (render_batch(&specs, dataset.config.image_size), labels)
    };
    let (support_images, support_labels) = gather(&support_idx);
    let (query_images, query_labels) = gather(&query_idx);
    let (steps, lr) = (25, 0.002);

    let mut gains = Vec::new();
    for &seed in &SEEDS {
        let run = &world.runs[&("deep_fusion", seed)];
        let model = model_of(run);
        let text_weights = zeroshot_weights(
            &model,
            dataset,
            &dataset.eval.catalogue,
            true,
            BackgroundRow::None,
        );

        // steps=0 with a text init is zero-shot classification, exactly.
        let frozen = fewshot_probe(
            &model,
            n_classes,
            &support_images,
            &support_labels,
            &query_images,
            &query_labels,
            ProbeInit::TextGenerated(&text_weights),
            0,
            lr,
            TAU,
        )
        .unwrap();
        let query_emb = model.embed_images(&query_images).unwrap();
        let zeroshot = classify_embeddings(&query_emb, &text_weights, &query_labels).unwrap();
        assert_eq!(
            frozen.query.top1, zeroshot.top1,
            "an untouched text init must reproduce zero-shot accuracy"
        );

        let text_probe = fewshot_probe(
            &model,
            n_classes,
            &support_images,
            &support_labels,
            &query_images,
            &query_labels,
            ProbeInit::TextGenerated(&text_weights),
            steps,
            lr,
            TAU,
        )
        .unwrap();
        let random_probe = fewshot_probe(
            &model,
            n_classes,
            &support_images,
            &support_labels,
            &query_images,
            &query_labels,
            ProbeInit::RandomInit { seed },
            steps,
            lr,
            TAU,
        )
        .unwrap();
        gains.push(text_probe.query.top1 - random_probe.query.top1);
    }
    let med = median3(gains.clone());
    println!("  one-shot init gains per seed: {gains:?}");
    assert!(
        med >= 0.05,
        "text initialization gained only {med:.3} over random"
    );
    pass("07", "few-shot text initialization");
}

// ---- a08 -------------------------------------------------------------------

#[test]
fn a08_retrieval_recall_on_converged_run() {
    let world = mode_world();
    let dataset = &world.dataset;
    let run = retrieval_run();
    let model = model_of(run);
    let specs: Vec<&SceneSpec> = dataset.eval.alignment.iter().map(|r| &r.spec).collect();
    let images = render_batch(&specs, dataset.config.image_size);
    let tokens: Vec<_> = dataset
        .eval
        .alignment
        .iter()
        .map(|r| dataset.vocab.tokenize(&r.caption))
        .collect();
    let img_emb = model.embed_images(&images).unwrap();
    let txt_emb = model.embed_texts(&tokens).unwrap();
    assert_eq!(img_emb.rows(), 64, "expected the 64-pair evaluation set");

    let report = retrieval_recall(&img_emb, &txt_emb, &[1, 5, 10]).unwrap();
    let i2t = report.image_to_text[&1];
    let t2i = report.text_to_image[&1];
    println!(
        "  converged run: image->text R@1 {i2t:.4}, text->image R@1 {t2i:.4}"
    );
    assert!(i2t >= 0.9, "image->text R@1 {i2t:.4}");
    assert!(t2i >= 0.9, "text->image R@1 {t2i:.4}");

    // Nested cutoffs can never decrease, on this run and on every default
    // deep-fusion run.
    let mut reports = vec![report];
    for &seed in &SEEDS {
        let m = model_of(&world.runs[&("deep_fusion", seed)]);
        let ie = m.embed_images(&images).unwrap();
        let te = m.embed_texts(&tokens).unwrap();
        reports.push(retrieval_recall(&ie, &te, &[1, 5, 10]).unwrap());
    }
    for r in &reports {
        assert!(r.image_to_text[&1] <= r.image_to_text[&5]);
        assert!(r.image_to_text[&5] <= r.image_to_text[&10]);
        assert!(r.text_to_image[&1] <= r.text_to_image[&5]);
        assert!(r.text_to_image[&5] <= r.text_to_image[&10]);
    }

    // Brute-force oracle agreement on the converged embeddings.
    let cos = naive_cosine_rows(&img_emb, &txt_emb);
    let n = img_emb.rows();
    for &k in &[1usize, 5, 10] {
        let mut i2t_hits = 0usize;
        let mut t2i_hits = 0usize;
        for q in 0..n {
            if (0..n)
                .filter(|&j| cos[q][j] > cos[q][q] || (cos[q][j] == cos[q][q] && j < q))
                .count()
                < k
            {
                i2t_hits += 1;
            }
            if (0..n)
                .filter(|&i| cos[i][q] > cos[q][q] || (cos[i][q] == cos[q][q] && i < q))
                .count()
                < k
            {
                t2i_hits += 1;
            }
        }
        assert_eq!(reports[0].image_to_text[&k], i2t_hits as f64 / n as f64);
        assert_eq!(reports[0].text_to_image[&k], t2i_hits as f64 / n as f64);
    }
    pass("08", "retrieval recall sanity");
}

// ---- a09 -------------------------------------------------------------------

#[test]
fn a09_dense_segmentation_improves_with_training() {
    let world = mode_world();
    let dataset = &world.dataset;
    let s = dataset.config.image_size;
    // A class-stratified 64-image subset keeps the harness quick.
    let picks: Vec<usize> = (0..dataset.eval.classification.len()).step_by(5).collect();
    let background = dataset.eval.catalogue.len();
    let mut image_data = Vec::new();
    let mut masks = Vec::new();
    for &i in &picks {
        let record = &dataset.eval.classification[i];
        let (image, fg) = render_scene_with_mask(&record.spec, s);
        image_data.extend_from_slice(image.data());
        masks.push(
            fg.iter()
                .map(|&f| if f { record.class_index } else { background })
                .collect::<Vec<usize>>(),
        );
    }
    let images = Tensor::new(vec![picks.len(), 3, s, s], image_data).unwrap();

    for &seed in &SEEDS {
        let run = &world.runs[&("deep_fusion", seed)];
        let trained = model_of(run);
        let untrained = Model::untrained(run.visual, run.text, seed).unwrap();
        let miou_of = |model: &Model| -> f64 {
            let weights = zeroshot_weights(
                model,
                dataset,
                &dataset.eval.catalogue,
                true,
                BackgroundRow::TextGenerated,
            );
            dense_zeroshot_segment(model, &weights, &images, &masks)
                .unwrap()
                .miou
        };
        let trained_miou = miou_of(&trained);
        let untrained_miou = miou_of(&untrained);
        println!(
            "  seed {seed}: trained mIoU {trained_miou:.4}, untrained {untrained_miou:.4}"
        );
        assert!(
            trained_miou > untrained_miou,
            "seed {seed}: dense transfer did not improve ({trained_miou:.4} vs {untrained_miou:.4})"
        );
    }
    pass("09", "dense open-vocabulary direction");
}

// ---- a10 -------------------------------------------------------------------

#[test]
fn a10_duplicate_name_audit_matches_reference_and_construction() {
    // The reference-scale catalogue: 18657 singleton names plus 1593 pairs
    // is 21843 entries, 14.59% of which share a name.
    let mut entries = Vec::with_capacity(21_843);
    for i in 0..18_657 {
        entries.push(ClassEntry::new(entries.len(), format!("solo{i}"), ""));
    }
    for i in 0..1_593 {
        for _ in 0..2 {
            entries.push(ClassEntry::new(entries.len(), format!("pair{i}"), ""));
        }
    }
    assert_eq!(entries.len(), 21_843);
    let stats = duplicate_name_stats(&entries);
    assert_eq!(stats.total, 21_843);
    assert_eq!(stats.unique, 18_657);
    assert!(
        (stats.ratio - 0.1459).abs() <= 0.0005,
        "repetition ratio {:.5}",
        stats.ratio
    );
    assert_eq!(stats.histogram.get(&1), Some(&18_657));
    assert_eq!(stats.histogram.get(&2), Some(&3_186));
    assert_eq!(stats.histogram.len(), 2);

    // Synthetic histogram with mixed group sizes, matched exactly.
    let mut mixed = Vec::new();
    for name in ["ant", "bee", "cat"] {
        mixed.push(ClassEntry::new(mixed.len(), name, ""));
    }
    for name in ["dog", "dog", "elk", "elk"] {
        mixed.push(ClassEntry::new(mixed.len(), name, ""));
    }
    for _ in 0..5 {
        mixed.push(ClassEntry::new(mixed.len(), "fox", ""));
    }
    let stats = duplicate_name_stats(&mixed);
    let expected: BTreeMap<usize, usize> = [(1, 3), (2, 4), (5, 5)].into_iter().collect();
    assert_eq!(stats.histogram, expected);
    assert_eq!(stats.total, 12);
    assert_eq!(stats.unique, 3);

    // The injected duplicate pair in the generated dataset shows up as one
    // 2-group among otherwise unique names.
    let dataset = &dup_world().dataset;
    let stats = duplicate_name_stats(&dataset.train.catalogue);
    assert_eq!(stats.total, 12);
    assert_eq!(stats.histogram.get(&2), Some(&2));
    assert_eq!(stats.unique, 10);
    pass("10", "duplicate-name audit");
}

// ---- a11 -------------------------------------------------------------------

fn ucl_bin(args: &[&str]) {
    let status = Command::new(env!("CARGO_BIN_EXE_ucl"))
        .args(args)
        .env("UCL_THREADS", "1")
        .status()
        .expect("spawn the ucl binary");
    assert!(status.success(), "ucl {args:?} exited with {status}");
}

fn assert_same_bytes(a: &Path, b: &Path) {
    let left = std::fs::read(a).unwrap_or_else(|_| panic!("missing {}", a.display()));
    let right = std::fs::read(b).unwrap_or_else(|_| panic!("missing {}", b.display()));
    assert_eq!(left, right, "{} differs from {}", a.display(), b.display());
}

#[test]
fn a11_cli_runs_are_byte_deterministic() {
    let tmp = TempDir::new().unwrap();
    let root = tmp.path();
    let write = |name: &str, body: &str| -> String {
        let path = root.join(name);
        std::fs::write(&path, body).unwrap();
        path.display().to_string()
    };
    let gen_cfg = write(
        "gen.json",
        r#"{"image_size": 16, "train_per_class": 4, "eval_per_class": 3,
            "train_alignment_pairs": 32, "eval_alignment_pairs": 8,
            "max_len": 24, "export_ppm": true}"#,
    );
    let data1 = root.join("data1");
    let data2 = root.join("data2");
    for data in [&data1, &data2] {
        ucl_bin(&[
            "gen-data",
            "--config",
            &gen_cfg,
            "--out",
            &data.display().to_string(),
            "--seed",
            "7",
        ]);
    }
    for name in [
        "dataset.json",
        "splits.json",
        "classes.jsonl",
        "prompts.json",
        "vocab.json",
        "metrics.json",
    ] {
        assert_same_bytes(&data1.join(name), &data2.join(name));
    }
    // One exported image spot-checked byte-for-byte.
    let ppm: Vec<_> = std::fs::read_dir(data1.join("images"))
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    assert!(!ppm.is_empty());
    assert_same_bytes(
        &data1.join("images").join(&ppm[0]),
        &data2.join("images").join(&ppm[0]),
    );

    let train_cfg = write(
        "train.json",
        &format!(
            r#"{{"data": "{}", "schedule": {{"steps": 30}}, "checkpoint_every": 15}}"#,
            data1.display()
        ),
    );
    let run1 = root.join("run1");
    let run2 = root.join("run2");
    for run in [&run1, &run2] {
        ucl_bin(&[
            "train",
            "--config",
            &train_cfg,
            "--out",
            &run.display().to_string(),
            "--seed",
            "3",
        ]);
    }
    for name in [
        "checkpoint.bin",
        "ckpt_000015.bin",
        "ckpt_000030.bin",
        "metrics.json",
        "loss.csv",
        "model.json",
    ] {
        assert_same_bytes(&run1.join(name), &run2.join(name));
    }

    let eval_cfg = write("eval.json", &format!(r#"{{"data": "{}"}}"#, data1.display()));
    let ckpt = run1.join("checkpoint.bin").display().to_string();
    for (cmd, extra) in [
        ("eval-zeroshot", Some("per_class.csv")),
        ("eval-fewshot", None),
        ("eval-retrieval", None),
        ("eval-dense", Some("iou.csv")),
    ] {
        let out1 = root.join(format!("{cmd}1"));
        let out2 = root.join(format!("{cmd}2"));
        for out in [&out1, &out2] {
            ucl_bin(&[
                cmd,
                "--ckpt",
                &ckpt,
                "--config",
                &eval_cfg,
                "--out",
                &out.display().to_string(),
                "--seed",
                "5",
            ]);
        }
        assert_same_bytes(&out1.join("metrics.json"), &out2.join("metrics.json"));
        if let Some(csv) = extra {
            assert_same_bytes(&out1.join(csv), &out2.join(csv));
        }
    }

    let classes = data1.join("classes.jsonl").display().to_string();
    let stats1 = root.join("stats1");
    let stats2 = root.join("stats2");
    for out in [&stats1, &stats2] {
        ucl_bin(&[
            "label-stats",
            "--classes",
            &classes,
            "--out",
            &out.display().to_string(),
        ]);
    }
    assert_same_bytes(&stats1.join("stats.json"), &stats2.join("stats.json"));
    assert_same_bytes(&stats1.join("metrics.json"), &stats2.join("metrics.json"));

    let gc1 = root.join("gc1");
    let gc2 = root.join("gc2");
    for out in [&gc1, &gc2] {
        ucl_bin(&[
            "grad-check",
            "--seed",
            "3",
            "--out",
            &out.display().to_string(),
        ]);
    }
    assert_same_bytes(&gc1.join("metrics.json"), &gc2.join("metrics.json"));
    pass("11", "CLI determinism");
}

// ---- a12 -------------------------------------------------------------------

#[test]
fn a12_schedule_boundaries_and_clip_bound() {
    let schedule = Schedule::new(75, 1500, 2e-4, 0.0).unwrap();
    assert_eq!(lr_at(&schedule, 0).unwrap(), 0.0);
    assert_eq!(lr_at(&schedule, 75).unwrap(), 2e-4);
    assert_eq!(lr_at(&schedule, 1500).unwrap(), 0.0);
    let floored = Schedule::new(10, 200, 3e-3, 1e-5).unwrap();
    assert_eq!(lr_at(&floored, 10).unwrap(), 3e-3);
    assert_eq!(lr_at(&floored, 200).unwrap(), 1e-5);

    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for case in 0..1000 {
        let mut grads = BTreeMap::new();
        let tensors = rng.gen_range(1..=4usize);
        for t in 0..tensors {
            let len = rng.gen_range(1..=24usize);
            let scale = 10f64.powf(rng.gen_range(-3.0..3.0));
            grads.insert(
                format!("g{t}"),
                rand_tensor(&mut rng, &[len], -scale, scale),
            );
        }
        clip_global_norm(&mut grads, 5.0).unwrap();
        let norm: f64 = grads
            .values()
            .map(|g| g.data().iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        assert!(norm <= 5.0 + 1e-9, "case {case}: post-clip norm {norm}");
    }
    pass("12", "schedule and clip exactness");
}
