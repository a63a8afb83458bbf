//! A minutes-long joint pre-training run: renders a small synthetic
//! corpus, trains the BPE vocabulary, runs the combined
//! language-image + self-supervised objective, and watches in-batch
//! retrieval climb.
//!
//! ```bash
//! cargo run --release -p slip --example pretrain_tiny
//! ```

use slip::datapipe::{synth_generate, AugmentConfig, Corpus, SynthSpec};
use slip::encoders::{ModelConfig, SlipModel};
use slip::objectives::SlipLossConfig;
use slip::trainer::{OptimConfig, TrainMode, Trainer};

fn main() {
    let dir = std::env::temp_dir().join("slip_pretrain_tiny");
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).expect("temp dir");
    let spec = SynthSpec {
        num_images: 64,
        seed: 7,
        ..SynthSpec::default()
    };
    synth_generate(&spec, &dir).expect("generate");
    let corpus = Corpus::load(&dir.join("manifest.jsonl")).expect("load corpus");
    println!("corpus: {} records, e.g. {:?}", corpus.len(), corpus.records[0].captions[0]);

    let vocab = slip::datapipe::bpe_train(&corpus.all_captions(), 512).expect("train vocab");
    println!("vocab: {} ids ({} merges)", vocab.vocab_size(), vocab.merges().len());

    // identity global crops make the tiny corpus memorizable quickly;
    // the SSL branch keeps its full augmentation recipe
    let augment = AugmentConfig {
        global_area: (1.0, 1.0),
        flip_p: 0.0,
        ..AugmentConfig::default()
    };
    let steps = 300;
    let mut trainer = Trainer::new(
        SlipModel::init(&ModelConfig::vit_nano(), 0).expect("init"),
        OptimConfig {
            batch_size: 16,
            base_lr: 1.2e-3,
            weight_decay: 0.0,
            total_steps: Some(steps),
            warmup_steps: Some(10),
            ..OptimConfig::default()
        },
        SlipLossConfig::default(),
        TrainMode::Slip,
        &corpus,
        None,
        &vocab,
        augment,
        0,
    )
    .expect("trainer");

    let start = std::time::Instant::now();
    for i in 0..steps {
        let m = trainer.step().expect("step");
        if i % 25 == 0 || i == steps - 1 {
            println!(
                "step {:>4}  lr {:.2e}  total {:.4}  clip {:.4}  ssl {:.4}  retrieval {:.2}",
                m.step,
                m.lr,
                m.total_loss,
                m.clip_loss,
                m.ssl_loss,
                m.in_batch_top1.unwrap_or(0.0)
            );
        }
    }
    println!("{steps} steps in {:.1?}", start.elapsed());
}
