//! Zero-shot classification with prompt ensembling: pre-trains briefly
//! on a synthetic corpus, builds one exemplar embedding per class by
//! averaging the embeddings of several filled prompt templates, and
//! classifies a held-out labeled split by cosine similarity.
//!
//! ```bash
//! cargo run --release -p slip --example zero_shot
//! ```

use slip::datapipe::{synth_generate, AugmentConfig, Corpus, SynthSpec};
use slip::encoders::{ModelConfig, SlipModel};
use slip::eval::{build_zeroshot_classifier, zeroshot_predict};
use slip::harness::load_labeled_images;
use slip::objectives::SlipLossConfig;
use slip::trainer::{OptimConfig, TrainMode, Trainer};

fn main() {
    let dir = std::env::temp_dir().join("slip_zero_shot");
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).expect("temp dir");
    let spec = SynthSpec {
        num_images: 256,
        holdout_images: 128,
        seed: 1,
        ..SynthSpec::default()
    };
    synth_generate(&spec, &dir).expect("generate");
    let corpus = Corpus::load(&dir.join("manifest.jsonl")).expect("corpus");
    let vocab = slip::datapipe::bpe_train(&corpus.all_captions(), 512).expect("vocab");
    let classes = slip::harness::read_lines(&dir.join("classes.txt")).expect("classes");
    let templates = slip::harness::read_lines(&dir.join("templates.txt")).expect("templates");

    let mut trainer = Trainer::new(
        SlipModel::init(&ModelConfig::vit_nano(), 1).expect("init"),
        OptimConfig {
            batch_size: 16,
            base_lr: 1.2e-3,
            total_steps: Some(400),
            warmup_steps: Some(20),
            ..OptimConfig::default()
        },
        SlipLossConfig::default(),
        TrainMode::Slip,
        &corpus,
        None,
        &vocab,
        AugmentConfig::default(),
        1,
    )
    .expect("trainer");
    println!("pre-training 400 steps...");
    for _ in 0..400 {
        trainer.step().expect("step");
    }
    let model = trainer.model;

    let classifier =
        build_zeroshot_classifier(&model, &classes, &templates, &vocab, true).expect("classifier");
    let eval = load_labeled_images(
        &dir.join("manifest_eval.jsonl"),
        &classes,
        &AugmentConfig::default(),
        0,
    )
    .expect("eval set");
    let preds = zeroshot_predict(&classifier, &eval.images, &model).expect("predict");
    let correct = preds.iter().zip(&eval.labels).filter(|(p, l)| p == l).count();
    println!(
        "zero-shot accuracy over {} classes: {:.3} (chance {:.3})",
        classes.len(),
        correct as f64 / eval.labels.len() as f64,
        1.0 / classes.len() as f64
    );
    for (name, pred) in classes.iter().zip(&preds).take(4) {
        let _ = name;
        println!("example prediction: {}", classifier.class_names[*pred]);
    }
}
