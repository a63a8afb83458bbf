//! Procedural shapes-and-colors corpus.
//!
//! Renders one colored geometric shape per image on a noisy gray
//! background and captions it from templates. The (color, shape) pair
//! is the class label, generation is balanced and fully determined by
//! the seed, so held-out splits with exact chance levels are easy to
//! construct.

use super::image::{save_png, ImageBuf};
use super::{DataError, ManifestRecord};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub num_images: usize,
    pub image_size: usize,
    pub shapes: Vec<String>,
    pub colors: Vec<String>,
    /// Templates with `{color}` and `{shape}` slots (and optional
    /// `{size}` / `{pos}` slots filled from the rendered geometry);
    /// each record keeps two filled variants so caption sampling has a
    /// real choice.
    pub caption_templates: Vec<String>,
    pub seed: u64,
    /// Extra labeled images written to a separate eval manifest.
    pub holdout_images: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            num_images: 64,
            image_size: 32,
            shapes: vec!["square".into(), "circle".into(), "triangle".into()],
            colors: vec!["red".into(), "green".into(), "blue".into()],
            caption_templates: vec![
                "a photo of a {size}{color} {shape} {pos}".into(),
                "an image of a {size}{color} {shape} {pos}".into(),
                "a picture showing a {size}{color} {shape} {pos}".into(),
                "the {size}{color} {shape} {pos}".into(),
            ],
            seed: 0,
            holdout_images: 0,
        }
    }
}

/// Zero-shot prompt templates matching the caption distribution; `{}`
/// receives the class name.
pub const ZEROSHOT_TEMPLATES: &[&str] = &[
    "a photo of a {}",
    "an image of a {}",
    "a picture showing a {}",
    "the {}",
];

fn base_color(name: &str) -> Option<[f32; 3]> {
    Some(match name {
        "red" => [0.85, 0.15, 0.15],
        "green" => [0.15, 0.80, 0.20],
        "blue" => [0.15, 0.25, 0.85],
        "yellow" => [0.88, 0.85, 0.12],
        "magenta" => [0.85, 0.15, 0.80],
        "cyan" => [0.15, 0.80, 0.82],
        _ => return None,
    })
}

fn shape_hit(name: &str, dx: f32, dy: f32, r: f32) -> Option<bool> {
    Some(match name {
        "square" => dx.abs() < r && dy.abs() < r,
        "circle" => dx * dx + dy * dy < r * r,
        "triangle" => dy > -r && dy < r && dx.abs() < (dy + r) * 0.58,
        "ring" => {
            let d2 = dx * dx + dy * dy;
            d2 < r * r && d2 > (0.55 * r) * (0.55 * r)
        }
        "cross" => (dx.abs() < 0.35 * r || dy.abs() < 0.35 * r) && dx.abs() < r && dy.abs() < r,
        "diamond" => dx.abs() + dy.abs() < 1.2 * r,
        _ => return None,
    })
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.shapes.len() < 2 || self.colors.len() < 2 {
            return Err(DataError::Config(
                "synthetic corpus needs at least 2 shapes and 2 colors".into(),
            ));
        }
        if self.num_images == 0 || self.image_size < 8 {
            return Err(DataError::Config("num_images must be > 0, image_size >= 8".into()));
        }
        if self.caption_templates.is_empty() {
            return Err(DataError::Config("need at least one caption template".into()));
        }
        for t in &self.caption_templates {
            if !t.contains("{color}") || !t.contains("{shape}") {
                return Err(DataError::Config(format!(
                    "caption template {t:?} must contain {{color}} and {{shape}}"
                )));
            }
        }
        for s in &self.shapes {
            if shape_hit(s, 0.0, 0.0, 1.0).is_none() {
                return Err(DataError::Config(format!(
                    "unknown shape {s:?} (square, circle, triangle, ring, cross, diamond)"
                )));
            }
        }
        for c in &self.colors {
            if base_color(c).is_none() {
                return Err(DataError::Config(format!(
                    "unknown color {c:?} (red, green, blue, yellow, magenta, cyan)"
                )));
            }
        }
        Ok(())
    }

    pub fn class_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for color in &self.colors {
            for shape in &self.shapes {
                names.push(format!("{color} {shape}"));
            }
        }
        names
    }
}

/// Visual attributes of one rendered instance beyond its class: size
/// bucket, 3x3 position cell, and background brightness. Each enters
/// the caption, and within a class the generator hands out distinct
/// `(size, cell, background)` tuples for as long as combinations last,
/// so captions separate instances the way real web captions do.
struct Placement {
    cx: f64,
    cy: f64,
    radius: f64,
    background: f64,
    size_bucket: usize,
    cell: usize,
    bg_bucket: usize,
}

const SIZE_RANGES: [(f64, f64); 3] = [(0.16, 0.20), (0.22, 0.26), (0.28, 0.32)];
const SIZE_WORDS: [&str; 3] = ["small ", "", "big "];
const BG_LEVELS: [f64; 3] = [0.32, 0.50, 0.68];
const BG_WORDS: [&str; 3] = ["on a dark background", "", "on a light background"];
const CELL_CENTERS: [f64; 3] = [0.30, 0.50, 0.70];

impl Placement {
    fn from_combo(combo: usize, rng: &mut impl Rng) -> Placement {
        let size_bucket = combo % 3;
        let cell = (combo / 3) % 9;
        let bg_bucket = combo / 27;
        let (rlo, rhi) = SIZE_RANGES[size_bucket];
        let radius = rng.random_range(rlo..rhi);
        let jitter = 0.045;
        let (col, row) = (cell % 3, cell / 3);
        let clamp = |v: f64| v.clamp(radius + 0.02, 0.98 - radius);
        Placement {
            cx: clamp(CELL_CENTERS[col] + rng.random_range(-jitter..jitter)),
            cy: clamp(CELL_CENTERS[row] + rng.random_range(-jitter..jitter)),
            radius,
            background: BG_LEVELS[bg_bucket],
            size_bucket,
            cell,
            bg_bucket,
        }
    }

    fn size_word(&self) -> &'static str {
        SIZE_WORDS[self.size_bucket]
    }

    fn bg_words(&self) -> &'static str {
        BG_WORDS[self.bg_bucket]
    }

    fn pos_words(&self) -> String {
        let row = ["top", "", "bottom"][self.cell / 3];
        let col = ["left", "", "right"][self.cell % 3];
        match (row, col) {
            ("", "") => "in the middle".to_string(),
            ("", c) => format!("on the {c}"),
            (r, "") => format!("at the {r}"),
            (r, c) => format!("in the {r} {c}"),
        }
    }
}

/// 3 sizes x 9 cells x 3 backgrounds.
const COMBOS_PER_CLASS: usize = 81;

/// Distinct-first combo assignment: record `k` of a class gets the
/// `k`-th entry of a seed-keyed permutation of all combos, wrapping
/// only when a class outgrows the combo space.
fn combo_for(spec: &SynthSpec, split: &str, class_idx: usize, within_class: usize) -> usize {
    let mut perm: Vec<usize> = (0..COMBOS_PER_CLASS).collect();
    let mut rng = crate::rng::stream(
        spec.seed,
        "synth-combos",
        &[split_salt(split), class_idx as u64],
    );
    for i in (1..perm.len()).rev() {
        perm.swap(i, rng.random_range(0..=i));
    }
    perm[within_class % COMBOS_PER_CLASS]
}

fn render(spec: &SynthSpec, color: &str, shape: &str, place: &Placement, rng: &mut impl Rng) -> ImageBuf {
    let s = spec.image_size;
    let mut img = ImageBuf::new(s, s);
    // noisy background around the instance's brightness level
    let bg = place.background as f32;
    for y in 0..s {
        for x in 0..s {
            let g = bg + rng.random_range(-0.13..0.13) as f32;
            let tint = rng.random_range(-0.04..0.04) as f32;
            img.set_pixel(x, y, [g + tint, g, g - tint]);
        }
    }
    let mut rgb = base_color(color).expect("validated color");
    for c in rgb.iter_mut() {
        *c = (*c + rng.random_range(-0.08..0.08) as f32).clamp(0.0, 1.0);
    }
    let cx = s as f32 * place.cx as f32;
    let cy = s as f32 * place.cy as f32;
    let r = s as f32 * place.radius as f32;
    for y in 0..s {
        for x in 0..s {
            let dx = x as f32 + 0.5 - cx;
            let dy = y as f32 + 0.5 - cy;
            if shape_hit(shape, dx, dy, r).expect("validated shape") {
                // mild per-pixel shading keeps edges from being flat
                let shade = 1.0 - 0.15 * ((dx * dx + dy * dy).sqrt() / r).min(1.0);
                img.set_pixel(x, y, [rgb[0] * shade, rgb[1] * shade, rgb[2] * shade]);
            }
        }
    }
    img
}

fn make_record(
    spec: &SynthSpec,
    split: &str,
    index: usize,
    image_dir: &Path,
    out_dir: &Path,
) -> Result<ManifestRecord, DataError> {
    let classes = spec.class_names();
    let class_idx = index % classes.len();
    let color = &spec.colors[class_idx / spec.shapes.len()];
    let shape = &spec.shapes[class_idx % spec.shapes.len()];

    let mut rng = crate::rng::stream(spec.seed, "synth", &[split_salt(split), index as u64]);
    let within_class = index / classes.len();
    let place = Placement::from_combo(combo_for(spec, split, class_idx, within_class), &mut rng);
    let img = render(spec, color, shape, &place, &mut rng);
    let file = format!("images/{split}_{index:05}.png");
    save_png(&image_dir.join(format!("{split}_{index:05}.png")), &img)?;

    // two distinct caption variants per record, each mentioning the
    // instance's size and position so captions are near-unique
    let mut order: Vec<usize> = (0..spec.caption_templates.len()).collect();
    for i in (1..order.len()).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    let captions: Vec<String> = order
        .iter()
        .take(2.min(order.len()))
        .map(|&t| {
            let cap = spec.caption_templates[t]
                .replace("{color}", color)
                .replace("{shape}", shape)
                .replace("{size}", place.size_word())
                .replace("{pos}", &format!("{} {}", place.pos_words(), place.bg_words()));
            cap.split_whitespace().collect::<Vec<_>>().join(" ")
        })
        .collect();
    let _ = out_dir; // path base for the manifest is relative
    Ok(ManifestRecord {
        image: file,
        captions,
        label: Some(format!("{color} {shape}")),
    })
}

fn split_salt(split: &str) -> u64 {
    match split {
        "train" => 0,
        _ => 1,
    }
}

/// Output of [`synth_generate`]: manifests plus the file layout on disk.
pub struct SynthOutput {
    pub train: Vec<ManifestRecord>,
    pub eval: Vec<ManifestRecord>,
    pub class_names: Vec<String>,
}

/// Renders the corpus under `out_dir`: `images/`, `manifest.jsonl`,
/// optional `manifest_eval.jsonl`, `classes.txt`, `templates.txt`.
pub fn synth_generate(spec: &SynthSpec, out_dir: &Path) -> Result<SynthOutput, DataError> {
    spec.validate()?;
    let image_dir = out_dir.join("images");
    fs::create_dir_all(&image_dir).map_err(|e| DataError::io(&image_dir, e))?;

    let train: Vec<ManifestRecord> = (0..spec.num_images)
        .map(|i| make_record(spec, "train", i, &image_dir, out_dir))
        .collect::<Result<_, _>>()?;
    let eval: Vec<ManifestRecord> = (0..spec.holdout_images)
        .map(|i| make_record(spec, "eval", i, &image_dir, out_dir))
        .collect::<Result<_, _>>()?;

    super::write_manifest(&out_dir.join("manifest.jsonl"), &train)?;
    if !eval.is_empty() {
        super::write_manifest(&out_dir.join("manifest_eval.jsonl"), &eval)?;
    }
    let class_names = spec.class_names();
    let classes_path = out_dir.join("classes.txt");
    fs::write(&classes_path, class_names.join("\n") + "\n").map_err(|e| DataError::io(&classes_path, e))?;
    let templates_path = out_dir.join("templates.txt");
    fs::write(&templates_path, ZEROSHOT_TEMPLATES.join("\n") + "\n")
        .map_err(|e| DataError::io(&templates_path, e))?;
    Ok(SynthOutput {
        train,
        eval,
        class_names,
    })
}
