//! Versioned binary checkpoints.
//!
//! Little-endian, length-prefixed named-tensor records behind a fixed
//! header (magic, version, config fingerprint, step, root seed) and a
//! trailer marker. Writes go through a temp file + rename, loads parse
//! the whole file before touching any state, and `save -> load -> save`
//! is byte-identical.

use super::optim::AdamState;
use crate::encoders::{ModelConfig, SlipModel};
use crate::tensor::Tensor;
use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

const MAGIC: &[u8; 8] = b"SLIPCKP\0";
const TRAILER: u32 = 0x454e_4421; // "END!"
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("checkpoint version {found} unsupported (expected {VERSION})")]
    VersionMismatch { found: u32 },
    #[error("checkpoint truncated")]
    Truncated,
    #[error("config fingerprint mismatch: checkpoint {found:#018x}, expected {expected:#018x} (pass allow_mismatch to override)")]
    FingerprintMismatch { expected: u64, found: u64 },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
}

fn io_err(path: &Path, source: std::io::Error) -> CheckpointError {
    CheckpointError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CheckpointMeta {
    pub fingerprint: u64,
    /// Next step index to execute on resume.
    pub step: u64,
    pub root_seed: u64,
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn name(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
    }
    fn tensor(&mut self, name: &str, shape: &[usize], data: &[f32]) {
        self.name(name);
        self.u32(shape.len() as u32);
        for &d in shape {
            self.u32(d as u32);
        }
        self.u64((data.len() * 4) as u64);
        for &v in data {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.buf.len() {
            return Err(CheckpointError::Truncated);
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn name(&mut self) -> Result<String, CheckpointError> {
        let len = self.u32()? as usize;
        if len > 4096 {
            return Err(CheckpointError::Corrupt("unreasonable name length".into()));
        }
        String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| CheckpointError::Corrupt("non-utf8 tensor name".into()))
    }
    fn tensor(&mut self) -> Result<(String, Vec<usize>, Vec<f32>), CheckpointError> {
        let name = self.name()?;
        let rank = self.u32()? as usize;
        if rank > 8 {
            return Err(CheckpointError::Corrupt(format!("rank {rank} too large")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u32()? as usize);
        }
        let bytes = self.u64()? as usize;
        let numel: usize = shape.iter().product();
        if bytes != numel * 4 {
            return Err(CheckpointError::Corrupt(format!(
                "{name}: payload {bytes} bytes does not match shape {shape:?}"
            )));
        }
        let raw = self.take(bytes)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok((name, shape, data))
    }
}

fn collect_params(model: &SlipModel) -> Vec<(String, Vec<usize>, Vec<f32>)> {
    let mut out = Vec::new();
    model.visit_params(&mut |path, t, _| {
        out.push((path.to_string(), t.shape().to_vec(), t.data().to_vec()));
    });
    out
}

pub fn save_checkpoint(
    path: &Path,
    model: &SlipModel,
    optimizer: &AdamState,
    meta: CheckpointMeta,
) -> Result<(), CheckpointError> {
    let mut w = Writer { buf: Vec::new() };
    w.buf.extend_from_slice(MAGIC);
    w.u32(VERSION);
    w.u64(meta.fingerprint);
    w.u64(meta.step);
    w.u64(meta.root_seed);

    let params = collect_params(model);
    w.u32(params.len() as u32);
    for (name, shape, data) in &params {
        w.tensor(name, shape, data);
    }

    w.u64(optimizer.step);
    w.u32((optimizer.m.len() + optimizer.v.len()) as u32);
    for (name, data) in &optimizer.m {
        w.tensor(&format!("m:{name}"), &[data.len()], data);
    }
    for (name, data) in &optimizer.v {
        w.tensor(&format!("v:{name}"), &[data.len()], data);
    }
    w.u32(TRAILER);

    let tmp = path.with_extension("tmp");
    let mut file = fs::File::create(&tmp).map_err(|e| io_err(&tmp, e))?;
    file.write_all(&w.buf).map_err(|e| io_err(&tmp, e))?;
    file.sync_all().map_err(|e| io_err(&tmp, e))?;
    drop(file);
    fs::rename(&tmp, path).map_err(|e| io_err(path, e))
}

struct Parsed {
    meta: CheckpointMeta,
    model_tensors: Vec<(String, Vec<usize>, Vec<f32>)>,
    opt_step: u64,
    opt_tensors: Vec<(String, Vec<usize>, Vec<f32>)>,
}

fn parse(path: &Path) -> Result<Parsed, CheckpointError> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .map_err(|e| io_err(path, e))?
        .read_to_end(&mut bytes)
        .map_err(|e| io_err(path, e))?;
    let mut r = Reader { buf: &bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CheckpointError::VersionMismatch { found: version });
    }
    let meta = CheckpointMeta {
        fingerprint: r.u64()?,
        step: r.u64()?,
        root_seed: r.u64()?,
    };
    let n_model = r.u32()? as usize;
    let mut model_tensors = Vec::with_capacity(n_model);
    for _ in 0..n_model {
        model_tensors.push(r.tensor()?);
    }
    let opt_step = r.u64()?;
    let n_opt = r.u32()? as usize;
    let mut opt_tensors = Vec::with_capacity(n_opt);
    for _ in 0..n_opt {
        opt_tensors.push(r.tensor()?);
    }
    if r.u32()? != TRAILER {
        return Err(CheckpointError::Truncated);
    }
    Ok(Parsed {
        meta,
        model_tensors,
        opt_step,
        opt_tensors,
    })
}

/// Loads a full training state. The checkpoint's config fingerprint
/// must match unless `allow_mismatch` is set.
pub fn load_checkpoint(
    path: &Path,
    cfg: &ModelConfig,
    expected_fingerprint: u64,
    allow_mismatch: bool,
) -> Result<(SlipModel, AdamState, CheckpointMeta), CheckpointError> {
    let parsed = parse(path)?;
    if parsed.meta.fingerprint != expected_fingerprint && !allow_mismatch {
        return Err(CheckpointError::FingerprintMismatch {
            expected: expected_fingerprint,
            found: parsed.meta.fingerprint,
        });
    }
    let mut model = SlipModel::init(cfg, 0)
        .map_err(|e| CheckpointError::Corrupt(format!("config rejected: {e}")))?;
    let mut by_name: BTreeMap<String, (Vec<usize>, Vec<f32>)> = parsed
        .model_tensors
        .into_iter()
        .map(|(n, s, d)| (n, (s, d)))
        .collect();
    let mut missing = Vec::new();
    let mut bad_shape = Vec::new();
    model.visit_params_mut(&mut |path, tensor, _| {
        match by_name.remove(path) {
            None => missing.push(path.to_string()),
            Some((shape, data)) => {
                if shape != tensor.shape() {
                    bad_shape.push(path.to_string());
                } else {
                    *tensor = Tensor::from_vec(shape, data).expect("validated shape");
                }
            }
        }
    });
    if !missing.is_empty() {
        return Err(CheckpointError::Corrupt(format!(
            "missing tensors: {}",
            missing.join(", ")
        )));
    }
    if !bad_shape.is_empty() {
        return Err(CheckpointError::Corrupt(format!(
            "shape mismatch for: {}",
            bad_shape.join(", ")
        )));
    }
    if !by_name.is_empty() {
        return Err(CheckpointError::Corrupt(format!(
            "unexpected tensors: {}",
            by_name.keys().cloned().collect::<Vec<_>>().join(", ")
        )));
    }

    let mut opt = AdamState {
        step: parsed.opt_step,
        ..AdamState::default()
    };
    for (name, _, data) in parsed.opt_tensors {
        if let Some(p) = name.strip_prefix("m:") {
            opt.m.insert(p.to_string(), data);
        } else if let Some(p) = name.strip_prefix("v:") {
            opt.v.insert(p.to_string(), data);
        } else {
            return Err(CheckpointError::Corrupt(format!(
                "optimizer tensor {name} lacks m:/v: prefix"
            )));
        }
    }
    Ok((model, opt, parsed.meta))
}

/// Applies only the `image.*` weights of a checkpoint onto `model`
/// (the SSL-pretrain-then-language-finetune handoff). Returns the
/// loaded parameter paths and the ones left at their fresh values.
pub fn load_image_encoder(
    path: &Path,
    model: &mut SlipModel,
) -> Result<(Vec<String>, Vec<String>), CheckpointError> {
    let parsed = parse(path)?;
    let by_name: BTreeMap<String, (Vec<usize>, Vec<f32>)> = parsed
        .model_tensors
        .into_iter()
        .filter(|(n, _, _)| n.starts_with("image."))
        .map(|(n, s, d)| (n, (s, d)))
        .collect();
    let mut applied = Vec::new();
    let mut fresh = Vec::new();
    let mut bad: Option<String> = None;
    model.visit_params_mut(&mut |p, tensor, _| match by_name.get(p) {
        Some((shape, data)) if shape == tensor.shape() => {
            *tensor = Tensor::from_vec(shape.clone(), data.clone()).expect("validated shape");
            applied.push(p.to_string());
        }
        Some(_) => bad = Some(p.to_string()),
        None => fresh.push(p.to_string()),
    });
    if let Some(p) = bad {
        return Err(CheckpointError::Corrupt(format!(
            "image encoder tensor {p} has incompatible shape"
        )));
    }
    if applied.is_empty() {
        return Err(CheckpointError::Corrupt("checkpoint holds no image.* tensors".into()));
    }
    Ok((applied, fresh))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::ModelConfig;

    fn tmp(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("slip_ckpt_test");
        fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    fn setup() -> (SlipModel, AdamState, CheckpointMeta) {
        let model = SlipModel::init(&ModelConfig::vit_nano(), 11).unwrap();
        let mut opt = AdamState::default();
        opt.step = 7;
        model.visit_params(&mut |p, t, _| {
            opt.m.insert(p.to_string(), vec![0.25; t.len()]);
            opt.v.insert(p.to_string(), vec![0.5; t.len()]);
        });
        let meta = CheckpointMeta {
            fingerprint: 0xdead_beef,
            step: 42,
            root_seed: 3,
        };
        (model, opt, meta)
    }

    #[test]
    fn roundtrip_restores_weights_bitwise() {
        let (model, opt, meta) = setup();
        let path = tmp("rt.ckpt");
        save_checkpoint(&path, &model, &opt, meta).unwrap();
        let (loaded, lopt, lmeta) =
            load_checkpoint(&path, &ModelConfig::vit_nano(), meta.fingerprint, false).unwrap();
        assert_eq!(lmeta, meta);
        assert_eq!(lopt.step, opt.step);
        let mut ok = true;
        model.visit_params(&mut |p, t, _| {
            let mut other: Option<Tensor<f32>> = None;
            loaded.visit_params(&mut |p2, t2, _| {
                if p2 == p {
                    other = Some(t2.clone());
                }
            });
            ok &= other.expect("param present").bitwise_eq(t);
        });
        assert!(ok);
        assert_eq!(lopt.m, opt.m);
        assert_eq!(lopt.v, opt.v);
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let (model, opt, meta) = setup();
        let p1 = tmp("b1.ckpt");
        let p2 = tmp("b2.ckpt");
        save_checkpoint(&p1, &model, &opt, meta).unwrap();
        let (loaded, lopt, lmeta) =
            load_checkpoint(&p1, &ModelConfig::vit_nano(), meta.fingerprint, false).unwrap();
        save_checkpoint(&p2, &loaded, &lopt, lmeta).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
    }

    #[test]
    fn fingerprint_mismatch_is_distinct_error_and_overridable() {
        let (model, opt, meta) = setup();
        let path = tmp("fp.ckpt");
        save_checkpoint(&path, &model, &opt, meta).unwrap();
        let err = load_checkpoint(&path, &ModelConfig::vit_nano(), 1, false).unwrap_err();
        assert!(matches!(err, CheckpointError::FingerprintMismatch { .. }));
        assert!(load_checkpoint(&path, &ModelConfig::vit_nano(), 1, true).is_ok());
    }

    #[test]
    fn truncation_detected_without_partial_state() {
        let (model, opt, meta) = setup();
        let path = tmp("trunc.ckpt");
        save_checkpoint(&path, &model, &opt, meta).unwrap();
        let bytes = fs::read(&path).unwrap();
        let cut = tmp("cut.ckpt");
        fs::write(&cut, &bytes[..bytes.len() / 2]).unwrap();
        let err = load_checkpoint(&cut, &ModelConfig::vit_nano(), meta.fingerprint, false).unwrap_err();
        assert!(matches!(err, CheckpointError::Truncated));
    }

    #[test]
    fn version_and_magic_are_distinct_errors() {
        let (model, opt, meta) = setup();
        let path = tmp("ver.ckpt");
        save_checkpoint(&path, &model, &opt, meta).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[8] = 99; // version field
        let bumped = tmp("ver2.ckpt");
        fs::write(&bumped, &bytes).unwrap();
        assert!(matches!(
            load_checkpoint(&bumped, &ModelConfig::vit_nano(), meta.fingerprint, false),
            Err(CheckpointError::VersionMismatch { found: 99 })
        ));
        let garbage = tmp("garbage.ckpt");
        fs::write(&garbage, b"not a checkpoint at all").unwrap();
        assert!(matches!(
            load_checkpoint(&garbage, &ModelConfig::vit_nano(), meta.fingerprint, false),
            Err(CheckpointError::BadMagic)
        ));
    }

    #[test]
    fn partial_image_encoder_load_reports_both_lists() {
        let (model, opt, meta) = setup();
        let path = tmp("partial.ckpt");
        save_checkpoint(&path, &model, &opt, meta).unwrap();
        let mut fresh_model = SlipModel::init(&ModelConfig::vit_nano(), 99).unwrap();
        let (applied, fresh) = load_image_encoder(&path, &mut fresh_model).unwrap();
        assert!(applied.iter().all(|p| p.starts_with("image.")));
        assert!(applied.contains(&"image.patch.w".to_string()));
        assert!(fresh.iter().all(|p| !p.starts_with("image.")));
        assert!(fresh.contains(&"logit_scale".to_string()));
        assert!(fresh_model.image.patch_w.bitwise_eq(&model.image.patch_w));
        assert!(!fresh_model.text.tok_emb.bitwise_eq(&model.text.tok_emb));
    }
}
