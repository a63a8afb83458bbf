//! Renders one synthetic image and writes a grid of its augmented
//! views: the global crop the language-image branch sees and the heavy
//! two-view recipe the self-supervised branch sees.
//!
//! ```bash
//! cargo run --release -p slip --example augment_gallery
//! ```

use slip::datapipe::{global_crop, ssl_augment, synth_generate, AugmentConfig, Corpus, SynthSpec};
use slip::datapipe::image::{save_png, ImageBuf};

fn main() {
    let dir = std::env::temp_dir().join("slip_augment_gallery");
    std::fs::create_dir_all(&dir).expect("temp dir");
    let spec = SynthSpec {
        num_images: 4,
        seed: 5,
        ..SynthSpec::default()
    };
    synth_generate(&spec, &dir).expect("generate");
    let corpus = Corpus::load(&dir.join("manifest.jsonl")).expect("load");
    let src = &corpus.images[0];
    println!("source caption: {:?}", corpus.records[0].captions[0]);

    // un-standardized config so the tensors stay in display range
    let cfg = AugmentConfig {
        channel_mean: [0.0; 3],
        channel_std: [1.0; 3],
        ..AugmentConfig::default()
    };

    let cols = 6usize;
    let s = cfg.image_size;
    let mut grid = ImageBuf::new(cols * (s + 2), 2 * (s + 2));
    let paste = |grid: &mut ImageBuf, view: &slip::tensor::Tensor<f32>, row: usize, col: usize| {
        for y in 0..s {
            for x in 0..s {
                let i = (y * s + x) * 3;
                let px = [view.data()[i], view.data()[i + 1], view.data()[i + 2]];
                grid.set_pixel(col * (s + 2) + x, row * (s + 2) + y, px);
            }
        }
    };

    for col in 0..cols {
        let mut g_rng = slip::rng::stream(9, "gallery-global", &[col as u64]);
        let mut s_rng = slip::rng::stream(9, "gallery-ssl", &[col as u64]);
        paste(&mut grid, &global_crop(src, &mut g_rng, &cfg).expect("crop"), 0, col);
        paste(&mut grid, &ssl_augment(src, &mut s_rng, &cfg).expect("aug"), 1, col);
    }
    let out = dir.join("gallery.png");
    save_png(&out, &grid).expect("write gallery");
    println!("wrote {} (top row: global crops, bottom row: SSL views)", out.display());
}
