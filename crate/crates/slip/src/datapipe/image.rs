//! Image decode/encode and resampling.
//!
//! Two on-disk formats: PNG (8-bit RGB/RGBA/gray) and binary PPM (P6).
//! In memory an image is interleaved RGB `f32` in `[0,1]`.

use super::DataError;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

/// Interleaved RGB pixels in `[0,1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuf {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl ImageBuf {
    pub fn new(width: usize, height: usize) -> Self {
        ImageBuf {
            width,
            height,
            data: vec![0.0; width * height * 3],
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    fn to_u8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    fn from_u8(width: usize, height: usize, rgb: &[u8]) -> Self {
        ImageBuf {
            width,
            height,
            data: rgb.iter().map(|&b| f32::from(b) / 255.0).collect(),
        }
    }
}

pub fn load_image(path: &Path) -> Result<ImageBuf, DataError> {
    let mut file = BufReader::new(File::open(path).map_err(|e| DataError::io(path, e))?);
    let mut magic = [0u8; 2];
    file.read_exact(&mut magic).map_err(|e| DataError::io(path, e))?;
    let mut rest = Vec::new();
    file.read_to_end(&mut rest).map_err(|e| DataError::io(path, e))?;
    let mut bytes = magic.to_vec();
    bytes.extend_from_slice(&rest);
    match &magic {
        [0x89, b'P'] => decode_png(path, &bytes),
        [b'P', b'6'] => decode_ppm(path, &bytes),
        _ => Err(DataError::Decode {
            path: path.display().to_string(),
            reason: "unrecognized image magic (expected PNG or P6 PPM)".into(),
        }),
    }
}

fn decode_png(path: &Path, bytes: &[u8]) -> Result<ImageBuf, DataError> {
    let decoder = png::Decoder::new(std::io::Cursor::new(bytes));
    let mut reader = decoder.read_info().map_err(|e| DataError::Decode {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    let mut buf = vec![0u8; reader.output_buffer_size().unwrap_or(0)];
    let info = reader.next_frame(&mut buf).map_err(|e| DataError::Decode {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    let (w, h) = (info.width as usize, info.height as usize);
    let rgb: Vec<u8> = match info.color_type {
        png::ColorType::Rgb => buf[..w * h * 3].to_vec(),
        png::ColorType::Rgba => buf[..w * h * 4]
            .chunks_exact(4)
            .flat_map(|p| [p[0], p[1], p[2]])
            .collect(),
        png::ColorType::Grayscale => buf[..w * h].iter().flat_map(|&g| [g, g, g]).collect(),
        other => {
            return Err(DataError::Decode {
                path: path.display().to_string(),
                reason: format!("unsupported PNG color type {other:?}"),
            })
        }
    };
    Ok(ImageBuf::from_u8(w, h, &rgb))
}

fn decode_ppm(path: &Path, bytes: &[u8]) -> Result<ImageBuf, DataError> {
    let bad = |reason: &str| DataError::Decode {
        path: path.display().to_string(),
        reason: reason.into(),
    };
    let mut pos = 2usize; // past "P6"
    let mut fields = Vec::new();
    while fields.len() < 3 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated PPM header"));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ascii header"))?;
        fields.push(text.parse::<usize>().map_err(|_| bad("bad header field"))?);
    }
    pos += 1; // single whitespace after maxval
    let (w, h, maxval) = (fields[0], fields[1], fields[2]);
    if maxval != 255 {
        return Err(bad("only maxval 255 supported"));
    }
    let need = w * h * 3;
    if bytes.len() < pos + need {
        return Err(bad("truncated PPM payload"));
    }
    Ok(ImageBuf::from_u8(w, h, &bytes[pos..pos + need]))
}

pub fn save_png(path: &Path, image: &ImageBuf) -> Result<(), DataError> {
    let file = File::create(path).map_err(|e| DataError::io(path, e))?;
    let mut encoder = png::Encoder::new(
        BufWriter::new(file),
        image.width as u32,
        image.height as u32,
    );
    encoder.set_color(png::ColorType::Rgb);
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder.write_header().map_err(|e| DataError::Decode {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    writer
        .write_image_data(&image.to_u8())
        .map_err(|e| DataError::Decode {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
    Ok(())
}

pub fn save_ppm(path: &Path, image: &ImageBuf) -> Result<(), DataError> {
    let file = File::create(path).map_err(|e| DataError::io(path, e))?;
    let mut w = BufWriter::new(file);
    write!(w, "P6\n{} {}\n255\n", image.width, image.height).map_err(|e| DataError::io(path, e))?;
    w.write_all(&image.to_u8()).map_err(|e| DataError::io(path, e))?;
    Ok(())
}

/// Bilinear resize (half-pixel centers, edge clamp).
pub fn resize_bilinear(src: &ImageBuf, width: usize, height: usize) -> ImageBuf {
    if src.width == width && src.height == height {
        return src.clone();
    }
    let mut out = ImageBuf::new(width, height);
    let sx = src.width as f32 / width as f32;
    let sy = src.height as f32 / height as f32;
    for y in 0..height {
        let fy = ((y as f32 + 0.5) * sy - 0.5).max(0.0);
        let y0 = (fy.floor() as usize).min(src.height - 1);
        let y1 = (y0 + 1).min(src.height - 1);
        let wy = fy - y0 as f32;
        for x in 0..width {
            let fx = ((x as f32 + 0.5) * sx - 0.5).max(0.0);
            let x0 = (fx.floor() as usize).min(src.width - 1);
            let x1 = (x0 + 1).min(src.width - 1);
            let wx = fx - x0 as f32;
            let p00 = src.pixel(x0, y0);
            let p10 = src.pixel(x1, y0);
            let p01 = src.pixel(x0, y1);
            let p11 = src.pixel(x1, y1);
            let mut rgb = [0.0f32; 3];
            for c in 0..3 {
                let top = p00[c] * (1.0 - wx) + p10[c] * wx;
                let bot = p01[c] * (1.0 - wx) + p11[c] * wx;
                rgb[c] = top * (1.0 - wy) + bot * wy;
            }
            out.set_pixel(x, y, rgb);
        }
    }
    out
}

/// Crop `w x h` at `(x0, y0)`; caller guarantees bounds.
pub fn crop(src: &ImageBuf, x0: usize, y0: usize, w: usize, h: usize) -> ImageBuf {
    debug_assert!(x0 + w <= src.width && y0 + h <= src.height);
    let mut out = ImageBuf::new(w, h);
    for y in 0..h {
        let src_off = ((y0 + y) * src.width + x0) * 3;
        let dst_off = y * w * 3;
        out.data[dst_off..dst_off + w * 3].copy_from_slice(&src.data[src_off..src_off + w * 3]);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient_image(w: usize, h: usize) -> ImageBuf {
        let mut img = ImageBuf::new(w, h);
        for y in 0..h {
            for x in 0..w {
                img.set_pixel(x, y, [x as f32 / w as f32, y as f32 / h as f32, 0.25]);
            }
        }
        img
    }

    #[test]
    fn png_roundtrip() {
        let dir = std::env::temp_dir().join("slip_img_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("rt.png");
        let img = gradient_image(9, 7);
        save_png(&path, &img).unwrap();
        let back = load_image(&path).unwrap();
        assert_eq!(back.width, 9);
        assert_eq!(back.height, 7);
        // u8 quantization only
        for (a, b) in img.data.iter().zip(back.data.iter()) {
            assert!((a - b).abs() < 1.0 / 255.0 + 1e-6);
        }
    }

    #[test]
    fn ppm_roundtrip() {
        let dir = std::env::temp_dir().join("slip_img_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("rt.ppm");
        let img = gradient_image(5, 4);
        save_ppm(&path, &img).unwrap();
        let back = load_image(&path).unwrap();
        assert_eq!((back.width, back.height), (5, 4));
        for (a, b) in img.data.iter().zip(back.data.iter()) {
            assert!((a - b).abs() < 1.0 / 255.0 + 1e-6);
        }
    }

    #[test]
    fn resize_identity_is_noop() {
        let img = gradient_image(8, 8);
        let out = resize_bilinear(&img, 8, 8);
        assert_eq!(img, out);
    }

    #[test]
    fn resize_preserves_constant_images() {
        let mut img = ImageBuf::new(10, 6);
        for v in img.data.iter_mut() {
            *v = 0.42;
        }
        let out = resize_bilinear(&img, 4, 4);
        for &v in &out.data {
            assert!((v - 0.42).abs() < 1e-6);
        }
    }

    #[test]
    fn crop_extracts_window() {
        let img = gradient_image(8, 8);
        let c = crop(&img, 2, 3, 4, 2);
        assert_eq!((c.width, c.height), (4, 2));
        assert_eq!(c.pixel(0, 0), img.pixel(2, 3));
        assert_eq!(c.pixel(3, 1), img.pixel(5, 4));
    }
}
