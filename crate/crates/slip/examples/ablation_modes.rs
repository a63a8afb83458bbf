//! The training-mode matrix: joint training, language-image only,
//! self-supervision only, decoupled SSL images, and the two-phase
//! SSL-then-language schedule, each run for a short smoke budget.
//!
//! ```bash
//! cargo run --release -p slip --example ablation_modes
//! ```

use slip::datapipe::{synth_generate, AugmentConfig, SynthSpec};
use slip::harness::{resolve_config, run_pretrain, DataSection, ExperimentConfig, ModelSelect, Overrides};
use slip::objectives::SlipLossConfig;
use slip::trainer::{OptimConfig, TrainMode};
use std::path::Path;

fn main() {
    let dir = std::env::temp_dir().join("slip_ablation_modes");
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).expect("temp dir");
    synth_generate(&SynthSpec { num_images: 32, seed: 4, ..SynthSpec::default() }, &dir.join("main"))
        .expect("generate");
    synth_generate(&SynthSpec { num_images: 32, seed: 5, ..SynthSpec::default() }, &dir.join("ssl"))
        .expect("generate");

    for mode in [
        TrainMode::Slip,
        TrainMode::Clip,
        TrainMode::Simclr,
        TrainMode::Decoupled,
        TrainMode::SslThenClip,
    ] {
        let cfg = ExperimentConfig {
            mode,
            seed: 4,
            out_dir: dir.join(format!("run_{mode:?}")).display().to_string(),
            model: ModelSelect {
                preset: Some("vit_nano".into()),
                config: None,
            },
            optim: OptimConfig {
                batch_size: 8,
                total_steps: Some(30),
                warmup_steps: Some(3),
                ..OptimConfig::default()
            },
            loss: SlipLossConfig::default(),
            data: DataSection {
                manifest: dir.join("main/manifest.jsonl").display().to_string(),
                ssl_manifest: matches!(mode, TrainMode::Decoupled)
                    .then(|| dir.join("ssl/manifest.jsonl").display().to_string()),
                vocab_size: 400,
                vocab_file: None,
                augment: AugmentConfig::default(),
            },
            eval: None,
            checkpoint_every: 0,
            ssl_pretrain_steps: Some(15),
        };
        let resolved = resolve_config(cfg, Path::new("."), &Overrides::default()).expect("resolve");
        let out = run_pretrain(&resolved, false).expect("run");
        let m = out.final_metrics.expect("metrics");
        println!(
            "{mode:?}: {} steps, final total {:.4} (clip {:.4}, ssl {:.4})",
            out.total_steps, m.total_loss, m.clip_loss, m.ssl_loss
        );
    }
}
