//! The two augmentation branches.
//!
//! The language-image branch sees only a "global" random resized crop
//! covering 50-100% of the source image plus a horizontal flip. The
//! self-supervised branch layers the usual heavy recipe on top: an
//! aggressive crop (8-100%), color jitter, random grayscale, and
//! Gaussian blur. Every transform draws from the caller's RNG, so a
//! fixed sub-stream seed reproduces a view bit for bit.

use super::image::{crop, resize_bilinear, ImageBuf};
use super::DataError;
use crate::tensor::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub image_size: usize,
    /// Area-fraction range of the global (language-image) crop.
    pub global_area: (f64, f64),
    /// Area-fraction range of the SSL crop.
    pub ssl_area: (f64, f64),
    /// Aspect-ratio range for both crops.
    pub aspect: (f64, f64),
    pub flip_p: f64,
    pub jitter_p: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    /// Hue shift range in turns.
    pub hue: f64,
    pub grayscale_p: f64,
    pub blur_p: f64,
    pub blur_sigma: (f64, f64),
    pub channel_mean: [f32; 3],
    pub channel_std: [f32; 3],
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            image_size: 32,
            global_area: (0.5, 1.0),
            ssl_area: (0.08, 1.0),
            aspect: (0.75, 4.0 / 3.0),
            flip_p: 0.5,
            jitter_p: 0.8,
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.2,
            hue: 0.1,
            grayscale_p: 0.2,
            blur_p: 0.5,
            blur_sigma: (0.1, 2.0),
            channel_mean: [0.485, 0.456, 0.406],
            channel_std: [0.229, 0.224, 0.225],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CropParams {
    /// The continuous area fraction drawn, before pixel rounding.
    pub area_frac: f64,
    pub aspect: f64,
    pub x0: usize,
    pub y0: usize,
    pub w: usize,
    pub h: usize,
}

/// Draws crop parameters with the area fraction exactly uniform on
/// `area_range`. The aspect ratio is drawn log-uniform on the slice of
/// `aspect_range` that keeps the window inside the image, so no
/// rejection step distorts the area distribution.
pub fn sample_crop_params<R: Rng>(
    rng: &mut R,
    width: usize,
    height: usize,
    area_range: (f64, f64),
    aspect_range: (f64, f64),
) -> CropParams {
    let area_frac = rng.random_range(area_range.0..=area_range.1);
    // w = W*sqrt(A*aspect) <= W and h = H*sqrt(A/aspect) <= H bound the
    // feasible aspect interval to [A, 1/A] (for square-ish sources).
    let lo = aspect_range.0.max(area_frac);
    let hi = aspect_range.1.min(1.0 / area_frac);
    let (lo, hi) = if lo <= hi { (lo, hi) } else { (1.0, 1.0) };
    let aspect = (rng.random_range(lo.ln()..=hi.ln())).exp();
    let w = ((width as f64) * (area_frac * aspect).sqrt()).round().max(1.0) as usize;
    let h = ((height as f64) * (area_frac / aspect).sqrt()).round().max(1.0) as usize;
    let w = w.min(width);
    let h = h.min(height);
    let x0 = rng.random_range(0..=width - w);
    let y0 = rng.random_range(0..=height - h);
    CropParams {
        area_frac,
        aspect,
        x0,
        y0,
        w,
        h,
    }
}

fn random_resized_crop<R: Rng>(
    img: &ImageBuf,
    rng: &mut R,
    area: (f64, f64),
    aspect: (f64, f64),
    target: usize,
) -> ImageBuf {
    let p = sample_crop_params(rng, img.width, img.height, area, aspect);
    let window = crop(img, p.x0, p.y0, p.w, p.h);
    resize_bilinear(&window, target, target)
}

fn hflip(img: &ImageBuf) -> ImageBuf {
    let mut out = ImageBuf::new(img.width, img.height);
    for y in 0..img.height {
        for x in 0..img.width {
            out.set_pixel(x, y, img.pixel(img.width - 1 - x, y));
        }
    }
    out
}

fn luma(rgb: [f32; 3]) -> f32 {
    0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2]
}

fn apply_brightness(img: &mut ImageBuf, f: f32) {
    for v in img.data.iter_mut() {
        *v = (*v * f).clamp(0.0, 1.0);
    }
}

fn apply_contrast(img: &mut ImageBuf, f: f32) {
    let mean: f32 = img
        .data
        .chunks_exact(3)
        .map(|p| luma([p[0], p[1], p[2]]))
        .sum::<f32>()
        / (img.width * img.height) as f32;
    for v in img.data.iter_mut() {
        *v = (*v * f + mean * (1.0 - f)).clamp(0.0, 1.0);
    }
}

fn apply_saturation(img: &mut ImageBuf, f: f32) {
    for p in img.data.chunks_exact_mut(3) {
        let g = luma([p[0], p[1], p[2]]);
        for v in p.iter_mut() {
            *v = (*v * f + g * (1.0 - f)).clamp(0.0, 1.0);
        }
    }
}

fn rgb_to_hsv(rgb: [f32; 3]) -> [f32; 3] {
    let (r, g, b) = (rgb[0], rgb[1], rgb[2]);
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / delta).rem_euclid(6.0)
    } else if max == g {
        (b - r) / delta + 2.0
    } else {
        (r - g) / delta + 4.0
    } / 6.0;
    let s = if max == 0.0 { 0.0 } else { delta / max };
    [h, s, max]
}

fn hsv_to_rgb(hsv: [f32; 3]) -> [f32; 3] {
    let (h, s, v) = (hsv[0].rem_euclid(1.0) * 6.0, hsv[1], hsv[2]);
    let i = h.floor();
    let f = h - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i as i32 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn apply_hue(img: &mut ImageBuf, turns: f32) {
    for p in img.data.chunks_exact_mut(3) {
        let mut hsv = rgb_to_hsv([p[0], p[1], p[2]]);
        hsv[0] += turns;
        let rgb = hsv_to_rgb(hsv);
        p.copy_from_slice(&rgb);
    }
}

fn apply_grayscale(img: &mut ImageBuf) {
    for p in img.data.chunks_exact_mut(3) {
        let g = luma([p[0], p[1], p[2]]);
        p.copy_from_slice(&[g, g, g]);
    }
}

fn gaussian_blur(img: &ImageBuf, sigma: f32) -> ImageBuf {
    let radius = ((3.0 * sigma).ceil() as usize).max(1);
    let mut kernel = Vec::with_capacity(2 * radius + 1);
    for i in 0..=2 * radius {
        let d = i as f32 - radius as f32;
        kernel.push((-d * d / (2.0 * sigma * sigma)).exp());
    }
    let total: f32 = kernel.iter().sum();
    for k in kernel.iter_mut() {
        *k /= total;
    }
    let (w, h) = (img.width, img.height);
    let clamp = |v: isize, hi: usize| v.clamp(0, hi as isize - 1) as usize;
    // horizontal then vertical pass, edge replicate
    let mut tmp = ImageBuf::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0f32; 3];
            for (i, &k) in kernel.iter().enumerate() {
                let sx = clamp(x as isize + i as isize - radius as isize, w);
                let p = img.pixel(sx, y);
                for c in 0..3 {
                    acc[c] += k * p[c];
                }
            }
            tmp.set_pixel(x, y, acc);
        }
    }
    let mut out = ImageBuf::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0f32; 3];
            for (i, &k) in kernel.iter().enumerate() {
                let sy = clamp(y as isize + i as isize - radius as isize, h);
                let p = tmp.pixel(x, sy);
                for c in 0..3 {
                    acc[c] += k * p[c];
                }
            }
            out.set_pixel(x, y, acc);
        }
    }
    out
}

/// Channel-standardizes into an `[S, S, 3]` tensor.
pub fn to_standardized_tensor(img: &ImageBuf, cfg: &AugmentConfig) -> Tensor<f32> {
    let data: Vec<f32> = img
        .data
        .chunks_exact(3)
        .flat_map(|p| {
            [
                (p[0] - cfg.channel_mean[0]) / cfg.channel_std[0],
                (p[1] - cfg.channel_mean[1]) / cfg.channel_std[1],
                (p[2] - cfg.channel_mean[2]) / cfg.channel_std[2],
            ]
        })
        .collect();
    Tensor::from_vec(vec![img.height, img.width, 3], data).expect("image tensor shape")
}

fn check_source(img: &ImageBuf) -> Result<(), DataError> {
    if img.width < 2 || img.height < 2 {
        return Err(DataError::DegenerateImage {
            width: img.width,
            height: img.height,
        });
    }
    Ok(())
}

/// The language-image branch: global crop, flip, standardize.
pub fn global_crop<R: Rng>(
    img: &ImageBuf,
    rng: &mut R,
    cfg: &AugmentConfig,
) -> Result<Tensor<f32>, DataError> {
    check_source(img)?;
    let mut view = random_resized_crop(img, rng, cfg.global_area, cfg.aspect, cfg.image_size);
    if rng.random_range(0.0..1.0) < cfg.flip_p {
        view = hflip(&view);
    }
    Ok(to_standardized_tensor(&view, cfg))
}

/// The self-supervised branch: aggressive crop, color jitter,
/// grayscale, blur, flip, standardize.
pub fn ssl_augment<R: Rng>(
    img: &ImageBuf,
    rng: &mut R,
    cfg: &AugmentConfig,
) -> Result<Tensor<f32>, DataError> {
    check_source(img)?;
    let mut view = random_resized_crop(img, rng, cfg.ssl_area, cfg.aspect, cfg.image_size);
    if rng.random_range(0.0..1.0) < cfg.jitter_p {
        let b = rng.random_range((1.0 - cfg.brightness)..=(1.0 + cfg.brightness)) as f32;
        let c = rng.random_range((1.0 - cfg.contrast)..=(1.0 + cfg.contrast)) as f32;
        let s = rng.random_range((1.0 - cfg.saturation)..=(1.0 + cfg.saturation)) as f32;
        let h = rng.random_range(-cfg.hue..=cfg.hue) as f32;
        apply_brightness(&mut view, b);
        apply_contrast(&mut view, c);
        apply_saturation(&mut view, s);
        apply_hue(&mut view, h);
    }
    if rng.random_range(0.0..1.0) < cfg.grayscale_p {
        apply_grayscale(&mut view);
    }
    if rng.random_range(0.0..1.0) < cfg.blur_p {
        let sigma = rng.random_range(cfg.blur_sigma.0..=cfg.blur_sigma.1) as f32;
        view = gaussian_blur(&view, sigma);
    }
    if rng.random_range(0.0..1.0) < cfg.flip_p {
        view = hflip(&view);
    }
    Ok(to_standardized_tensor(&view, cfg))
}

/// Deterministic evaluation transform: resize to the model size.
pub fn eval_transform(img: &ImageBuf, cfg: &AugmentConfig) -> Tensor<f32> {
    let resized = resize_bilinear(img, cfg.image_size, cfg.image_size);
    to_standardized_tensor(&resized, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn test_image(size: usize) -> ImageBuf {
        let mut img = ImageBuf::new(size, size);
        for y in 0..size {
            for x in 0..size {
                img.set_pixel(
                    x,
                    y,
                    [
                        (x * 7 % 19) as f32 / 19.0,
                        (y * 11 % 23) as f32 / 23.0,
                        ((x + y) % 13) as f32 / 13.0,
                    ],
                );
            }
        }
        img
    }

    fn identity_cfg() -> AugmentConfig {
        AugmentConfig {
            image_size: 16,
            global_area: (1.0, 1.0),
            ssl_area: (1.0, 1.0),
            aspect: (1.0, 1.0),
            flip_p: 0.0,
            jitter_p: 0.0,
            grayscale_p: 0.0,
            blur_p: 0.0,
            channel_mean: [0.0; 3],
            channel_std: [1.0; 3],
            ..AugmentConfig::default()
        }
    }

    #[test]
    fn forced_identity_crop_is_plain_resize() {
        let img = test_image(16);
        let cfg = identity_cfg();
        let mut rng = crate::rng::stream(0, "aug-test", &[]);
        let out = global_crop(&img, &mut rng, &cfg).unwrap();
        let plain = to_standardized_tensor(&img, &cfg);
        assert!(out.bitwise_eq(&plain));
        let mut rng2 = crate::rng::stream(0, "aug-test", &[]);
        let ssl = ssl_augment(&img, &mut rng2, &cfg).unwrap();
        assert!(ssl.bitwise_eq(&plain));
    }

    #[test]
    fn same_seed_same_view() {
        let img = test_image(40);
        let cfg = AugmentConfig {
            image_size: 24,
            ..AugmentConfig::default()
        };
        for label in ["global", "ssl"] {
            let mut a = crate::rng::stream(9, label, &[1]);
            let mut b = crate::rng::stream(9, label, &[1]);
            let (va, vb) = if label == "global" {
                (global_crop(&img, &mut a, &cfg).unwrap(), global_crop(&img, &mut b, &cfg).unwrap())
            } else {
                (ssl_augment(&img, &mut a, &cfg).unwrap(), ssl_augment(&img, &mut b, &cfg).unwrap())
            };
            assert!(va.bitwise_eq(&vb));
        }
    }

    #[test]
    fn different_rng_states_give_different_views() {
        let img = test_image(40);
        let cfg = AugmentConfig {
            image_size: 24,
            ..AugmentConfig::default()
        };
        let mut differing = 0;
        for trial in 0..100u64 {
            let mut a = crate::rng::stream(1, "collide", &[trial, 0]);
            let mut b = crate::rng::stream(1, "collide", &[trial, 1]);
            let va = ssl_augment(&img, &mut a, &cfg).unwrap();
            let vb = ssl_augment(&img, &mut b, &cfg).unwrap();
            if !va.bitwise_eq(&vb) {
                differing += 1;
            }
        }
        assert!(differing >= 99, "only {differing}/100 pairs differed");
    }

    #[test]
    fn degenerate_source_rejected() {
        let img = ImageBuf::new(1, 1);
        let cfg = AugmentConfig::default();
        let mut rng = crate::rng::stream(0, "deg", &[]);
        assert!(matches!(
            global_crop(&img, &mut rng, &cfg),
            Err(DataError::DegenerateImage { .. })
        ));
    }

    #[test]
    fn crop_area_fraction_is_uniform() {
        // KS test at alpha = 0.01 over 10^4 draws of the continuous
        // area fraction.
        let mut rng = crate::rng::stream(4, "ks", &[]);
        let n = 10_000;
        let (lo, hi) = (0.5, 1.0);
        let mut fracs: Vec<f64> = (0..n)
            .map(|_| sample_crop_params(&mut rng, 64, 64, (lo, hi), (0.75, 4.0 / 3.0)).area_frac)
            .collect();
        fracs.sort_by(f64::total_cmp);
        let mut d_max = 0.0f64;
        for (i, &v) in fracs.iter().enumerate() {
            let cdf = (v - lo) / (hi - lo);
            let emp_hi = (i + 1) as f64 / n as f64;
            let emp_lo = i as f64 / n as f64;
            d_max = d_max.max((cdf - emp_lo).abs()).max((emp_hi - cdf).abs());
        }
        // Kolmogorov critical value c(0.01) = 1.628
        let critical = 1.628 / (n as f64).sqrt();
        assert!(d_max < critical, "KS statistic {d_max} >= {critical}");
    }

    #[test]
    fn crop_windows_stay_in_bounds() {
        let mut rng = crate::rng::stream(5, "bounds", &[]);
        for _ in 0..2000 {
            let p = sample_crop_params(&mut rng, 37, 41, (0.08, 1.0), (0.75, 4.0 / 3.0));
            assert!(p.x0 + p.w <= 37 && p.y0 + p.h <= 41);
            assert!(p.w >= 1 && p.h >= 1);
        }
    }

    #[test]
    fn grayscale_blur_preserve_shape_and_range() {
        let img = test_image(24);
        let blurred = gaussian_blur(&img, 1.3);
        assert_eq!((blurred.width, blurred.height), (24, 24));
        for &v in &blurred.data {
            assert!((0.0..=1.0).contains(&v));
        }
        let mut gray = img.clone();
        apply_grayscale(&mut gray);
        for p in gray.data.chunks_exact(3) {
            assert_eq!(p[0], p[1]);
            assert_eq!(p[1], p[2]);
        }
    }

    #[test]
    fn hue_rotation_roundtrip() {
        for rgb in [[0.8, 0.2, 0.1], [0.1, 0.9, 0.4], [0.3, 0.3, 0.9], [0.5, 0.5, 0.5]] {
            let hsv = rgb_to_hsv(rgb);
            let back = hsv_to_rgb(hsv);
            for c in 0..3 {
                assert!((rgb[c] - back[c]).abs() < 1e-5);
            }
        }
    }
}
