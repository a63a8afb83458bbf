//! Orderings between the evaluation settings on one briefly
//! pre-trained checkpoint: finetuning at least matches the probe, and
//! a frozen-encoder finetune collapses to probe-like behavior.

use slip::datapipe::{synth_generate, AugmentConfig, BpeVocab, Corpus, SynthSpec};
use slip::encoders::{ModelConfig, SlipModel};
use slip::eval::{extract_features, finetune, linear_probe, FinetuneConfig, ProbeConfig};
use slip::harness::load_labeled_images;
use slip::objectives::SlipLossConfig;
use slip::trainer::{OptimConfig, TrainMode, Trainer};
use std::fs;
use std::path::PathBuf;

fn setup_corpus(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join("slip_eval_protocol").join(name);
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    let spec = SynthSpec {
        num_images: 64,
        holdout_images: 128,
        seed: 40,
        shapes: vec!["square".into(), "circle".into()],
        colors: vec!["red".into(), "blue".into()],
        ..SynthSpec::default()
    };
    synth_generate(&spec, &dir).unwrap();
    dir
}

fn pretrain_briefly(dir: &PathBuf) -> SlipModel {
    let corpus = Corpus::load(&dir.join("manifest.jsonl")).unwrap();
    let vocab = slip::datapipe::bpe_train(&corpus.all_captions(), 300).unwrap();
    let mut trainer = Trainer::new(
        SlipModel::init(&ModelConfig::vit_nano(), 8).unwrap(),
        OptimConfig {
            batch_size: 16,
            base_lr: 3e-3,
            total_steps: Some(300),
            warmup_steps: Some(15),
            ..OptimConfig::default()
        },
        SlipLossConfig::default(),
        TrainMode::Slip,
        &corpus,
        None,
        &vocab,
        AugmentConfig::default(),
        8,
    )
    .unwrap();
    for _ in 0..300 {
        trainer.step().unwrap();
    }
    trainer.model
}

#[test]
fn finetune_orderings_against_the_probe() {
    let dir = setup_corpus("orderings");
    let model = pretrain_briefly(&dir);
    let classes = slip::harness::read_lines(&dir.join("classes.txt")).unwrap();
    let aug = AugmentConfig::default();
    let labeled = load_labeled_images(&dir.join("manifest_eval.jsonl"), &classes, &aug, 0).unwrap();

    // split held-out labeled data into probe-train / probe-test halves
    let half = labeled.labels.len() / 2;
    let order: Vec<usize> = (0..labeled.labels.len()).collect();
    let (train_idx, test_idx) = order.split_at(half);
    let (train_images, train_labels) = {
        let (imgs, labels) = (labeled.images.clone(), labeled.labels.clone());
        let s = imgs.shape()[1];
        let stride = s * s * 3;
        let mut data = Vec::new();
        let mut lab = Vec::new();
        for &i in train_idx {
            data.extend_from_slice(&imgs.data()[i * stride..(i + 1) * stride]);
            lab.push(labels[i]);
        }
        (
            slip::tensor::Tensor::from_vec(vec![train_idx.len(), s, s, 3], data).unwrap(),
            lab,
        )
    };
    let (test_images, test_labels) = {
        let s = labeled.images.shape()[1];
        let stride = s * s * 3;
        let mut data = Vec::new();
        let mut lab = Vec::new();
        for &i in test_idx {
            data.extend_from_slice(&labeled.images.data()[i * stride..(i + 1) * stride]);
            lab.push(labeled.labels[i]);
        }
        (
            slip::tensor::Tensor::from_vec(vec![test_idx.len(), s, s, 3], data).unwrap(),
            lab,
        )
    };

    let feat_train = extract_features(&model, &train_images).unwrap();
    let feat_test = extract_features(&model, &test_images).unwrap();

    let train_set = slip::eval::LabeledImages {
        images: train_images,
        labels: train_labels.clone(),
        num_classes: classes.len(),
    };
    let test_set = slip::eval::LabeledImages {
        images: test_images,
        labels: test_labels.clone(),
        num_classes: classes.len(),
    };

    let mut probe_accs = Vec::new();
    let mut finetune_accs = Vec::new();
    let mut frozen_accs = Vec::new();
    for seed in 0..3u64 {
        let probe = linear_probe(
            &feat_train,
            &train_labels,
            &feat_test,
            &test_labels,
            &ProbeConfig {
                epochs: 100,
                seed,
                ..ProbeConfig::default()
            },
        )
        .unwrap();
        probe_accs.push(probe.accuracy);

        let ft_cfg = FinetuneConfig {
            epochs: 25,
            base_lr: 1.5e-3,
            layer_decay: 0.65,
            batch_size: 16,
            seed,
            ..FinetuneConfig::default()
        };
        finetune_accs.push(finetune(&model, &train_set, &test_set, &ft_cfg).unwrap());

        let frozen_cfg = FinetuneConfig {
            encoder_lr_mult: 0.0,
            ..ft_cfg
        };
        frozen_accs.push(finetune(&model, &train_set, &test_set, &frozen_cfg).unwrap());
    }
    probe_accs.sort_by(f64::total_cmp);
    finetune_accs.sort_by(f64::total_cmp);
    frozen_accs.sort_by(f64::total_cmp);
    let (probe_med, ft_med, frozen_med) = (probe_accs[1], finetune_accs[1], frozen_accs[1]);

    assert!(
        ft_med >= probe_med,
        "finetune median {ft_med} below probe median {probe_med}"
    );
    assert!(
        (frozen_med - probe_med).abs() <= 0.02 + 1e-9,
        "frozen-encoder finetune {frozen_med} not within 2% of probe {probe_med}"
    );
}

#[test]
fn layer_decay_one_reduces_to_uniform_lr() {
    // with decay 1.0 every multiplier is 1; the run must behave like a
    // plain finetune (smoke assertion: it trains and scores sanely)
    let dir = setup_corpus("uniform_lr");
    let model = pretrain_briefly(&dir);
    let classes = slip::harness::read_lines(&dir.join("classes.txt")).unwrap();
    let aug = AugmentConfig::default();
    let labeled = load_labeled_images(&dir.join("manifest_eval.jsonl"), &classes, &aug, 64).unwrap();
    let cfg = FinetuneConfig {
        epochs: 3,
        layer_decay: 1.0,
        batch_size: 16,
        ..FinetuneConfig::default()
    };
    let acc = finetune(&model, &labeled, &labeled, &cfg).unwrap();
    assert!(acc >= 0.25, "uniform-lr finetune collapsed: {acc}");
}

#[test]
fn vocab_file_error_paths() {
    let dir = std::env::temp_dir().join("slip_eval_protocol").join("vocab_err");
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    fs::write(dir.join("not_vocab.txt"), "garbage\n").unwrap();
    assert!(BpeVocab::load(&dir.join("not_vocab.txt")).is_err());
    assert!(BpeVocab::load(&dir.join("missing.txt")).is_err());
}
