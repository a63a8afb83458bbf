//! End-to-end finetuning with layerwise learning-rate decay: all
//! image-encoder weights train under AdamW with exponentially smaller
//! learning rates for earlier layers, while a fresh linear head learns
//! the labels.
//!
//! ```bash
//! cargo run --release -p slip --example finetune
//! ```

use slip::datapipe::{synth_generate, AugmentConfig, Corpus, SynthSpec};
use slip::encoders::{ModelConfig, SlipModel};
use slip::eval::{finetune, FinetuneConfig};
use slip::harness::load_labeled_images;
use slip::objectives::SlipLossConfig;
use slip::trainer::{layerwise_lr_scale, OptimConfig, TrainMode, Trainer};

fn main() {
    let dir = std::env::temp_dir().join("slip_finetune");
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).expect("temp dir");
    let spec = SynthSpec {
        num_images: 64,
        holdout_images: 128,
        seed: 3,
        shapes: vec!["square".into(), "circle".into()],
        colors: vec!["red".into(), "blue".into()],
        ..SynthSpec::default()
    };
    synth_generate(&spec, &dir).expect("generate");
    let corpus = Corpus::load(&dir.join("manifest.jsonl")).expect("corpus");
    let vocab = slip::datapipe::bpe_train(&corpus.all_captions(), 512).expect("vocab");
    let classes = slip::harness::read_lines(&dir.join("classes.txt")).expect("classes");

    let mut trainer = Trainer::new(
        SlipModel::init(&ModelConfig::vit_nano(), 3).expect("init"),
        OptimConfig {
            batch_size: 16,
            base_lr: 1.2e-3,
            total_steps: Some(200),
            warmup_steps: Some(10),
            ..OptimConfig::default()
        },
        SlipLossConfig::default(),
        TrainMode::Slip,
        &corpus,
        None,
        &vocab,
        AugmentConfig::default(),
        3,
    )
    .expect("trainer");
    println!("pre-training 200 steps...");
    for _ in 0..200 {
        trainer.step().expect("step");
    }
    let model = trainer.model;

    // the layerwise multipliers of a 4-block tower at decay 0.65
    for path in ["image.pos", "image.blocks.0.attn.wq", "image.blocks.3.mlp.w2", "head.w"] {
        let mult = layerwise_lr_scale(path, model.cfg.vit.depth, 0.65).expect("depth mapping");
        println!("lr multiplier {path:<24} = {mult:.4}");
    }

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
    let slice = |lo: usize, hi: usize| slip::eval::LabeledImages {
        images: slip::tensor::Tensor::from_vec(
            vec![hi - lo, s, s, 3],
            labeled.images.data()[lo * stride..hi * stride].to_vec(),
        )
        .expect("slice"),
        labels: labeled.labels[lo..hi].to_vec(),
        num_classes: classes.len(),
    };
    let train = slice(0, half);
    let test = slice(half, n);

    let acc = finetune(
        &model,
        &train,
        &test,
        &FinetuneConfig {
            epochs: 15,
            batch_size: 16,
            ..FinetuneConfig::default()
        },
    )
    .expect("finetune");
    println!("finetuned test accuracy: {acc:.3}");
}
