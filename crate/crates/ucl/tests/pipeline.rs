//! End-to-end smoke tests: the full library pipeline at toy scale, plus the
//! command-line contract for malformed invocations. Scale is kept small so
//! the whole file runs in seconds; the statistical claims live in the
//! acceptance suite instead.

use std::path::PathBuf;
use std::process::Command;

use tempfile::TempDir;

use ucl::checkpoint::load_checkpoint;
use ucl::data::{
    build_splits, build_vocabulary, render_batch, render_scene_with_mask, Dataset, DatasetConfig,
    SceneSpec,
};
use ucl::eval::{
    build_zeroshot_classifier, classify_embeddings, dense_zeroshot_segment, fewshot_probe,
    retrieval_recall, support_query_split, BackgroundRow, Model, ProbeInit,
};
use ucl::tensor::Tensor;
use ucl::text::default_prompt_templates;
use ucl::train::{train_run, TrainConfig};

fn tiny_dataset() -> Dataset {
    let config = DatasetConfig {
        image_size: 16,
        train_per_class: 4,
        eval_per_class: 2,
        train_alignment_pairs: 24,
        eval_alignment_pairs: 8,
        max_len: 24,
        ..DatasetConfig::default()
    };
    let (train, eval) = build_splits(&config).unwrap();
    let prompts = default_prompt_templates();
    let vocab = build_vocabulary(&train, &prompts, config.max_len).unwrap();
    Dataset {
        config,
        train,
        eval,
        vocab,
        prompts,
    }
}

fn tiny_train_config() -> TrainConfig {
    let mut config = TrainConfig::with_data(PathBuf::from("in-memory"));
    config.model.width = 16;
    config.model.heads = 2;
    config.model.out_dim = 16;
    config.schedule.steps = 60;
    config.checkpoint_every = 30;
    config
}

#[test]
fn library_pipeline_runs_end_to_end() {
    let dataset = tiny_dataset();
    let config = tiny_train_config();
    let tmp = TempDir::new().unwrap();
    let result = train_run(&config, &dataset, Some(tmp.path())).unwrap();

    // The loop ran to completion and the loss moved in the right direction.
    assert_eq!(result.history.len(), 60);
    assert!(result.history.iter().all(|r| r.total.is_finite()));
    let mean = |rows: &[ucl::train::LossRow]| {
        rows.iter().map(|r| r.total).sum::<f64>() / rows.len() as f64
    };
    assert!(
        mean(&result.history[50..]) < mean(&result.history[..10]),
        "loss did not decrease: head {:.4} tail {:.4}",
        mean(&result.history[..10]),
        mean(&result.history[50..])
    );
    // Deep fusion classifies through the text tower; no linear head exists.
    assert!(!result.params.contains_key("head.w"));

    // Checkpoints: periodic and final, and the final one round-trips.
    for name in ["ckpt_000030.bin", "ckpt_000060.bin", "checkpoint.bin"] {
        assert!(tmp.path().join(name).is_file(), "missing {name}");
    }
    let restored = load_checkpoint(&tmp.path().join("checkpoint.bin")).unwrap();
    assert_eq!(restored.params, result.params);

    // Zero-shot classification over the full catalogue.
    let model = Model::new(result.visual, result.text, result.params.clone()).unwrap();
    let weights = build_zeroshot_classifier(
        &model,
        &dataset.eval.catalogue,
        &dataset.prompts,
        true,
        &dataset.vocab,
        BackgroundRow::None,
    )
    .unwrap();
    let specs: Vec<&SceneSpec> = dataset
        .eval
        .classification
        .iter()
        .map(|r| &r.spec)
        .collect();
    let labels: Vec<usize> = dataset
        .eval
        .classification
        .iter()
        .map(|r| r.class_index)
        .collect();
    let emb = model
        .embed_images(&render_batch(&specs, dataset.config.image_size))
        .unwrap();
    let outcome = classify_embeddings(&emb, &weights, &labels).unwrap();
    assert!((0.0..=1.0).contains(&outcome.top1));
    assert_eq!(
        outcome.per_class.iter().map(|p| p.total).sum::<usize>(),
        labels.len()
    );

    // Few-shot probe over the same embedding space.
    let (support, query) = support_query_split(&labels, dataset.eval.catalogue.len(), 1, 0).unwrap();
    assert_eq!(support.len(), dataset.eval.catalogue.len());
    let gather = |idx: &[usize]| {
        let s: Vec<&SceneSpec> = idx.iter().map(|&i| specs[i]).collect();
        let l: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        (render_batch(&s, dataset.config.image_size), l)
    };
    let (si, sl) = gather(&support);
    let (qi, ql) = gather(&query);
    let probe = fewshot_probe(
        &model,
        dataset.eval.catalogue.len(),
        &si,
        &sl,
        &qi,
        &ql,
        ProbeInit::TextGenerated(&weights),
        5,
        0.002,
        config.model.tau,
    )
    .unwrap();
    assert!((0.0..=1.0).contains(&probe.query.top1));

    // Retrieval over the eval alignment pairs.
    let pair_specs: Vec<&SceneSpec> = dataset.eval.alignment.iter().map(|r| &r.spec).collect();
    let tokens: Vec<_> = dataset
        .eval
        .alignment
        .iter()
        .map(|r| dataset.vocab.tokenize(&r.caption))
        .collect();
    let img = model
        .embed_images(&render_batch(&pair_specs, dataset.config.image_size))
        .unwrap();
    let txt = model.embed_texts(&tokens).unwrap();
    let report = retrieval_recall(&img, &txt, &[1, 5]).unwrap();
    assert!(report.image_to_text[&1] <= report.image_to_text[&5]);
    assert!(report.text_to_image[&1] <= report.text_to_image[&5]);

    // Dense transfer: a handful of images with pixel masks.
    let s = dataset.config.image_size;
    let background = dataset.eval.catalogue.len();
    let mut image_data = Vec::new();
    let mut masks = Vec::new();
    for record in dataset.eval.classification.iter().step_by(8) {
        let (image, fg) = render_scene_with_mask(&record.spec, s);
        image_data.extend_from_slice(image.data());
        masks.push(
            fg.iter()
                .map(|&f| if f { record.class_index } else { background })
                .collect::<Vec<usize>>(),
        );
    }
    let images = Tensor::new(vec![masks.len(), 3, s, s], image_data).unwrap();
    let dense_weights = build_zeroshot_classifier(
        &model,
        &dataset.eval.catalogue,
        &dataset.prompts,
        true,
        &dataset.vocab,
        BackgroundRow::TextGenerated,
    )
    .unwrap();
    let dense = dense_zeroshot_segment(&model, &dense_weights, &images, &masks).unwrap();
    assert!((0.0..=1.0).contains(&dense.miou));
    assert_eq!(dense.predictions.len(), masks.len());
}

// ---- CLI contract ----------------------------------------------------------

fn run_ucl(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_ucl"))
        .args(args)
        .output()
        .expect("spawn the ucl binary")
}

#[test]
fn cli_rejects_malformed_invocations() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("out").display().to_string();
    let missing = tmp.path().join("nope.json").display().to_string();
    let bad_json = tmp.path().join("bad.json");
    std::fs::write(&bad_json, "{not json").unwrap();
    let bad_json = bad_json.display().to_string();
    let unknown_field = tmp.path().join("unknown.json");
    std::fs::write(&unknown_field, r#"{"imagesize": 32}"#).unwrap();
    let unknown_field = unknown_field.display().to_string();

    let cases: Vec<(&str, Vec<&str>)> = vec![
        ("unknown subcommand", vec!["frobnicate"]),
        ("no arguments", vec![]),
        ("missing required flag", vec!["gen-data", "--out", &out]),
        (
            "nonexistent config",
            vec!["gen-data", "--config", &missing, "--out", &out],
        ),
        (
            "malformed json",
            vec!["gen-data", "--config", &bad_json, "--out", &out],
        ),
        (
            "unknown config field",
            vec!["gen-data", "--config", &unknown_field, "--out", &out],
        ),
        (
            "missing checkpoint",
            vec![
                "eval-zeroshot",
                "--ckpt",
                &missing,
                "--config",
                &missing,
                "--out",
                &out,
            ],
        ),
    ];
    for (what, args) in cases {
        let output = run_ucl(&args);
        assert!(
            !output.status.success(),
            "{what}: expected a nonzero exit (args {args:?})"
        );
        assert!(
            !output.stderr.is_empty(),
            "{what}: expected a diagnostic on stderr"
        );
    }
}

#[test]
fn cli_train_rejects_unknown_config_fields() {
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("train.json");
    // A typo in a tuning field must fail loudly at parse time, not fall back
    // to the default it was meant to override.
    std::fs::write(
        &cfg,
        r#"{"data": "/nonexistent", "optimizer": {"learning_rate": 0.001}}"#,
    )
    .unwrap();
    let output = run_ucl(&[
        "train",
        "--config",
        &cfg.display().to_string(),
        "--out",
        &tmp.path().join("out").display().to_string(),
    ]);
    assert!(!output.status.success());
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(
        stderr.contains("learning_rate"),
        "diagnostic should name the offending field: {stderr}"
    );
}
