//! Cross-module behavior: monitor isolation, chance-level calibration,
//! resume equivalence, memorization on a fixed batch, and the
//! five-mode smoke matrix.

use slip::datapipe::{
    make_batch, synth_generate, AugmentConfig, BatchCtx, BatchMode, BpeVocab, Corpus, SynthSpec,
};
use slip::encoders::{ModelConfig, SlipModel};
use slip::eval::ZeroShotData;
use slip::harness::{
    load_zeroshot_data, resolve_config, run_pretrain, DataSection, EvalSection, ExperimentConfig,
    ModelSelect, Overrides,
};
use slip::objectives::{slip_loss_simclr, EmbeddingBundle, SlipLossConfig};
use slip::tensor::Tape;
use slip::trainer::{
    adamw_step, cosine_lr, zeroshot_monitor, AdamState, OptimConfig, ParamSet, TrainMode, Trainer,
};
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

fn corpus_dir(name: &str, n: usize, holdout: usize) -> PathBuf {
    let dir = std::env::temp_dir().join("slip_pipeline_test").join(name);
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    let spec = SynthSpec {
        num_images: n,
        holdout_images: holdout,
        seed: 11,
        ..SynthSpec::default()
    };
    synth_generate(&spec, &dir).unwrap();
    dir
}

fn vocab_for(corpus: &Corpus) -> BpeVocab {
    slip::datapipe::bpe_train(&corpus.all_captions(), 300).unwrap()
}

fn nano_trainer<'a>(
    corpus: &'a Corpus,
    vocab: &'a BpeVocab,
    mode: TrainMode,
    steps: u64,
    seed: u64,
) -> Trainer<'a> {
    Trainer::new(
        SlipModel::init(&ModelConfig::vit_nano(), seed).unwrap(),
        OptimConfig {
            batch_size: 8,
            base_lr: 1e-3,
            total_steps: Some(steps),
            warmup_steps: Some(1),
            ..OptimConfig::default()
        },
        SlipLossConfig::default(),
        mode,
        corpus,
        None,
        vocab,
        AugmentConfig::default(),
        seed,
    )
    .unwrap()
}

#[test]
fn untrained_zero_shot_is_chance_level() {
    let dir = corpus_dir("chance", 16, 144);
    let data = load_zeroshot_data(
        &dir.join("manifest_eval.jsonl"),
        &dir.join("classes.txt"),
        &dir.join("templates.txt"),
        &AugmentConfig::default(),
        0,
    )
    .unwrap();
    let vocab = BpeVocab::bytes_only();
    let k = data.class_names.len() as f64;
    let n = data.labels.len() as f64;
    let sigma = ((1.0 / k) * (1.0 - 1.0 / k) / n).sqrt();
    // median over a few fresh inits keeps one unlucky draw from failing us
    let mut accs: Vec<f64> = (0..3)
        .map(|seed| {
            let model = SlipModel::init(&ModelConfig::vit_nano(), 100 + seed).unwrap();
            zeroshot_monitor(&model, &data, &vocab).unwrap()
        })
        .collect();
    accs.sort_by(f64::total_cmp);
    let median = accs[1];
    assert!(
        (median - 1.0 / k).abs() <= 3.0 * sigma,
        "untrained accuracy {median} vs chance {} (3 sigma {})",
        1.0 / k,
        3.0 * sigma
    );
}

#[test]
fn monitoring_does_not_change_training() {
    let dir = corpus_dir("monitor_iso", 16, 16);
    let corpus = Corpus::load(&dir.join("manifest.jsonl")).unwrap();
    let vocab = vocab_for(&corpus);
    let data = load_zeroshot_data(
        &dir.join("manifest_eval.jsonl"),
        &dir.join("classes.txt"),
        &dir.join("templates.txt"),
        &AugmentConfig::default(),
        0,
    )
    .unwrap();

    let losses_with = {
        let mut t = nano_trainer(&corpus, &vocab, TrainMode::Slip, 4, 21);
        let mut out = Vec::new();
        for _ in 0..4 {
            let m = t.step().unwrap();
            let _ = zeroshot_monitor(&t.model, &data, &vocab).unwrap();
            out.push(m.total_loss.to_bits());
        }
        out
    };
    let losses_without = {
        let mut t = nano_trainer(&corpus, &vocab, TrainMode::Slip, 4, 21);
        (0..4).map(|_| t.step().unwrap().total_loss.to_bits()).collect::<Vec<_>>()
    };
    assert_eq!(losses_with, losses_without);
}

#[test]
fn resume_reproduces_next_losses_bit_exactly() {
    let dir = corpus_dir("resume_losses", 16, 0);
    let corpus = Corpus::load(&dir.join("manifest.jsonl")).unwrap();
    let vocab = vocab_for(&corpus);

    // uninterrupted reference: 5 + 10 steps
    let mut reference = nano_trainer(&corpus, &vocab, TrainMode::Slip, 15, 33);
    let mut ref_losses = Vec::new();
    for _ in 0..15 {
        ref_losses.push(reference.step().unwrap().total_loss.to_bits());
    }

    // interrupted run: 5 steps, checkpoint, fresh trainer, 10 more
    let mut first = nano_trainer(&corpus, &vocab, TrainMode::Slip, 15, 33);
    for _ in 0..5 {
        first.step().unwrap();
    }
    let ckpt = std::env::temp_dir().join("slip_pipeline_test").join("resume_losses.ckpt");
    slip::trainer::save_checkpoint(
        &ckpt,
        &first.model,
        &first.opt_state,
        slip::trainer::CheckpointMeta {
            fingerprint: 1,
            step: first.step,
            root_seed: 33,
        },
    )
    .unwrap();

    let (model, opt, meta) =
        slip::trainer::load_checkpoint(&ckpt, &ModelConfig::vit_nano(), 1, false).unwrap();
    let mut resumed = nano_trainer(&corpus, &vocab, TrainMode::Slip, 15, 33);
    resumed.model = model;
    resumed.opt_state = opt;
    resumed.step = meta.step;
    let mut tail = Vec::new();
    for _ in 0..10 {
        tail.push(resumed.step().unwrap().total_loss.to_bits());
    }
    assert_eq!(&ref_losses[5..], &tail[..]);
}

#[test]
fn fixed_batch_memorization_halves_the_loss() {
    // repeated steps on one literal batch: the overfit sanity check of
    // the training machinery
    let dir = corpus_dir("memorize", 8, 0);
    let corpus = Corpus::load(&dir.join("manifest.jsonl")).unwrap();
    let vocab = vocab_for(&corpus);
    let aug = AugmentConfig::default();
    let ctx = BatchCtx {
        corpus: &corpus,
        ssl_corpus: None,
        vocab: &vocab,
        context_length: 32,
        augment: &aug,
        mode: BatchMode::Slip,
        seed: 5,
    };
    let batch = make_batch(&ctx, 0, &[0, 1, 2, 3, 4, 5, 6, 7], None).unwrap();
    let views: Vec<&slip::tensor::Tensor<f32>> = batch
        .iter()
        .map(|b| b.x_i.as_ref().unwrap())
        .chain(batch.iter().map(|b| b.x_1.as_ref().unwrap()))
        .chain(batch.iter().map(|b| b.x_2.as_ref().unwrap()))
        .collect();
    let stacked = slip::trainer::stack_views(&views).unwrap();
    let seqs: Vec<_> = batch.iter().map(|b| b.y_t.clone().unwrap()).collect();

    let mut model = SlipModel::init(&ModelConfig::vit_nano(), 3).unwrap();
    let optim = OptimConfig {
        base_lr: 3e-3,
        ..OptimConfig::default()
    };
    let mut state = AdamState::default();
    let mut first = None;
    let mut last = 0.0f32;
    for step in 0..50u64 {
        let lr = cosine_lr(step, 50, 5, optim.base_lr, 0.0).unwrap();
        let tape = Tape::new();
        let attached = model.attach(&tape).unwrap();
        let w = attached.image_encode(&stacked).unwrap();
        let wi = w.narrow0(0, 8).unwrap();
        let w1 = w.narrow0(8, 8).unwrap();
        let w2 = w.narrow0(16, 8).unwrap();
        let wt = attached.text_encode(&seqs).unwrap();
        let (zi, zt) = attached.project_clip(&wi, &wt).unwrap();
        let (z1, z2) = attached.project_ssl(&w1, &w2).unwrap();
        let out = slip_loss_simclr(
            &EmbeddingBundle {
                zi,
                zt,
                z1,
                z2,
                log_logit_scale: attached.log_logit_scale.clone(),
            },
            &SlipLossConfig::default(),
        )
        .unwrap();
        let loss = out.total.item();
        assert!(loss.is_finite());
        first.get_or_insert(loss);
        last = loss;
        let grads = out.total.backward().unwrap();
        let mut grad_map = BTreeMap::new();
        attached.visit(&mut |p, t, _| {
            if let Some(g) = grads.get(t) {
                grad_map.insert(p.to_string(), g.data().to_vec());
            }
        });
        adamw_step(&mut model, &grad_map, &mut state, lr, &optim).unwrap();
        model.clamp_logit_scale();
    }
    let first = first.unwrap();
    assert!(
        last < first * 0.5,
        "memorization failed: first {first}, last {last}"
    );
}

#[test]
fn all_five_modes_complete_a_smoke_run() {
    let dir = corpus_dir("mode_matrix", 16, 8);
    let ssl_dir = corpus_dir("mode_matrix_ssl", 16, 0);
    for (i, mode) in [
        TrainMode::Slip,
        TrainMode::Clip,
        TrainMode::Simclr,
        TrainMode::Decoupled,
        TrainMode::SslThenClip,
    ]
    .iter()
    .enumerate()
    {
        let cfg = ExperimentConfig {
            mode: *mode,
            seed: 50 + i as u64,
            out_dir: dir.join(format!("run_{i}")).display().to_string(),
            model: ModelSelect {
                preset: Some("vit_nano".into()),
                config: None,
            },
            optim: OptimConfig {
                batch_size: 8,
                total_steps: Some(20),
                warmup_steps: Some(2),
                ..OptimConfig::default()
            },
            loss: SlipLossConfig::default(),
            data: DataSection {
                manifest: dir.join("manifest.jsonl").display().to_string(),
                ssl_manifest: matches!(mode, TrainMode::Decoupled)
                    .then(|| ssl_dir.join("manifest.jsonl").display().to_string()),
                vocab_size: 300,
                vocab_file: None,
                augment: AugmentConfig::default(),
            },
            eval: Some(EvalSection {
                eval_manifest: dir.join("manifest_eval.jsonl").display().to_string(),
                class_names: dir.join("classes.txt").display().to_string(),
                templates: dir.join("templates.txt").display().to_string(),
                monitor_every: 10,
                max_eval_images: 8,
            }),
            checkpoint_every: 10,
            ssl_pretrain_steps: Some(10),
        };
        let resolved = resolve_config(cfg, Path::new("."), &Overrides::default()).unwrap();
        let out = run_pretrain(&resolved, false).unwrap();
        assert_eq!(out.total_steps, 20, "{mode:?}");
        let m = out.final_metrics.expect("metrics");
        assert!(m.total_loss.is_finite(), "{mode:?}");
        assert!(out.run_dir.join("metrics.csv").exists());
        // the monitor appended an accuracy at the end of the run
        assert!(out.last_zeroshot.is_some(), "{mode:?}");
    }
}

#[test]
fn clip_mode_metrics_have_zero_ssl_column() {
    let dir = corpus_dir("clip_csv", 16, 0);
    let cfg = ExperimentConfig {
        mode: TrainMode::Clip,
        seed: 9,
        out_dir: dir.join("run").display().to_string(),
        model: ModelSelect {
            preset: Some("vit_nano".into()),
            config: None,
        },
        optim: OptimConfig {
            batch_size: 8,
            total_steps: Some(5),
            warmup_steps: Some(1),
            ..OptimConfig::default()
        },
        loss: SlipLossConfig::default(),
        data: DataSection {
            manifest: dir.join("manifest.jsonl").display().to_string(),
            ssl_manifest: None,
            vocab_size: 300,
            vocab_file: None,
            augment: AugmentConfig::default(),
        },
        eval: None,
        checkpoint_every: 0,
        ssl_pretrain_steps: None,
    };
    let resolved = resolve_config(cfg, Path::new("."), &Overrides::default()).unwrap();
    let out = run_pretrain(&resolved, false).unwrap();
    let csv = fs::read_to_string(out.run_dir.join("metrics.csv")).unwrap();
    for line in csv.lines().skip(1) {
        let ssl_loss = line.split(',').nth(4).unwrap();
        assert_eq!(ssl_loss, "0");
    }
}

#[test]
fn zero_shot_data_survives_template_permutation() {
    // the monitor's accuracy is invariant to template order
    let dir = corpus_dir("tmpl_perm", 8, 32);
    let corpus = Corpus::load(&dir.join("manifest.jsonl")).unwrap();
    let vocab = vocab_for(&corpus);
    let model = SlipModel::init(&ModelConfig::vit_nano(), 77).unwrap();
    let base = load_zeroshot_data(
        &dir.join("manifest_eval.jsonl"),
        &dir.join("classes.txt"),
        &dir.join("templates.txt"),
        &AugmentConfig::default(),
        0,
    )
    .unwrap();
    let mut reversed_templates = base.templates.clone();
    reversed_templates.reverse();
    let permuted = ZeroShotData {
        templates: reversed_templates,
        class_names: base.class_names.clone(),
        images: base.images.clone(),
        labels: base.labels.clone(),
    };
    let a = zeroshot_monitor(&model, &base, &vocab).unwrap();
    let b = zeroshot_monitor(&model, &permuted, &vocab).unwrap();
    assert_eq!(a, b);
}
