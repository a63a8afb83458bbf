//! Linear classification on frozen features: extracts pre-projection
//! encoder representations of a labeled synthetic split and trains only
//! a linear layer with SGD + momentum (no weight decay).
//!
//! ```bash
//! cargo run --release -p slip --example linear_probe
//! ```

use slip::datapipe::{synth_generate, AugmentConfig, Corpus, SynthSpec};
use slip::encoders::{ModelConfig, SlipModel};
use slip::eval::{extract_features, linear_probe, ProbeConfig};
use slip::harness::load_labeled_images;
use slip::objectives::SlipLossConfig;
use slip::trainer::{OptimConfig, TrainMode, Trainer};

fn main() {
    let dir = std::env::temp_dir().join("slip_linear_probe");
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).expect("temp dir");
    let spec = SynthSpec {
        num_images: 128,
        holdout_images: 256,
        seed: 2,
        shapes: vec!["square".into(), "circle".into()],
        colors: vec!["red".into(), "blue".into()],
        ..SynthSpec::default()
    };
    synth_generate(&spec, &dir).expect("generate");
    let corpus = Corpus::load(&dir.join("manifest.jsonl")).expect("corpus");
    let vocab = slip::datapipe::bpe_train(&corpus.all_captions(), 512).expect("vocab");
    let classes = slip::harness::read_lines(&dir.join("classes.txt")).expect("classes");

    let mut trainer = Trainer::new(
        SlipModel::init(&ModelConfig::vit_nano(), 2).expect("init"),
        OptimConfig {
            batch_size: 16,
            base_lr: 1.2e-3,
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
        2,
    )
    .expect("trainer");
    println!("pre-training 300 steps...");
    for _ in 0..300 {
        trainer.step().expect("step");
    }
    let model = trainer.model;

    // held-out labeled data, split into probe train / probe test halves
    let labeled = load_labeled_images(
        &dir.join("manifest_eval.jsonl"),
        &classes,
        &AugmentConfig::default(),
        0,
    )
    .expect("labeled");
    let n = labeled.labels.len();
    let s = labeled.images.shape()[1];
    let stride = s * s * 3;
    let half = n / 2;
    let slice = |lo: usize, hi: usize| {
        let data = labeled.images.data()[lo * stride..hi * stride].to_vec();
        (
            slip::tensor::Tensor::from_vec(vec![hi - lo, s, s, 3], data).expect("slice"),
            labeled.labels[lo..hi].to_vec(),
        )
    };
    let (train_imgs, train_labels) = slice(0, half);
    let (test_imgs, test_labels) = slice(half, n);

    let feat_train = extract_features(&model, &train_imgs).expect("features");
    let feat_test = extract_features(&model, &test_imgs).expect("features");
    println!("features: {:?} (frozen, pre-projection)", feat_train.shape());

    let result = linear_probe(
        &feat_train,
        &train_labels,
        &feat_test,
        &test_labels,
        &ProbeConfig::default(),
    )
    .expect("probe");
    println!(
        "probe accuracy: {:.3} over {} classes (chance {:.3})",
        result.accuracy,
        classes.len(),
        1.0 / classes.len() as f64
    );
}
