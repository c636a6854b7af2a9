//! Per-level checkpoint files. Each level serializes independently so levels
//! trained in separate processes (or on separate machines) assemble into a
//! full model by directory. A file is a `WFCK` magic, a little-endian u32
//! header length, a JSON header (version, model metadata, level index,
//! parameter manifest), and the state tensors concatenated as little-endian
//! f64 in manifest order.

use crate::autodiff::Tensor;
use crate::flow::{CouplingKind, FlowConfig, LevelFlow};
use crate::model::{LevelSpec, WaveletFlowModel};
use crate::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};

const MAGIC: &[u8; 4] = b"WFCK";
pub const FORMAT_VERSION: u32 = 1;

/// Model-wide metadata every level file carries; all levels of one model
/// must agree on it exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub n: usize,
    pub channels: usize,
    pub intensity_max: f64,
}

impl ModelMeta {
    pub fn of(model: &WaveletFlowModel) -> ModelMeta {
        ModelMeta {
            n: model.n(),
            channels: model.channels(),
            intensity_max: model.intensity_max(),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct FlowMeta {
    channels: usize,
    spatial: usize,
    steps: usize,
    conv_channels: usize,
    residual_blocks: usize,
    coupling: String,
    cond_channels: usize,
    actnorm_initialized: bool,
}

impl FlowMeta {
    fn of(flow: &LevelFlow) -> FlowMeta {
        let c = flow.config();
        FlowMeta {
            channels: c.channels,
            spatial: c.spatial,
            steps: c.steps,
            conv_channels: c.conv_channels,
            residual_blocks: c.residual_blocks,
            coupling: c.coupling.name().to_string(),
            cond_channels: c.cond_channels,
            actnorm_initialized: flow.actnorm_initialized(),
        }
    }

    fn config(&self) -> Result<FlowConfig> {
        Ok(FlowConfig {
            channels: self.channels,
            spatial: self.spatial,
            steps: self.steps,
            conv_channels: self.conv_channels,
            residual_blocks: self.residual_blocks,
            coupling: CouplingKind::parse(&self.coupling)?,
            cond_channels: self.cond_channels,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    model: ModelMeta,
    level: usize,
    flow: FlowMeta,
    manifest: Vec<ManifestEntry>,
}

/// Serialize one level to bytes.
pub fn encode_level(flow: &LevelFlow, meta: &ModelMeta, level: usize) -> Result<Vec<u8>> {
    let mut manifest = Vec::new();
    let mut payload: Vec<u8> = Vec::new();
    flow.visit_state(&mut |name, t| {
        manifest.push(ManifestEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset: payload.len(),
        });
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    });
    let header = Header {
        format_version: FORMAT_VERSION,
        model: meta.clone(),
        level,
        flow: FlowMeta::of(flow),
        manifest,
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let len = u32::try_from(header_bytes.len())
        .map_err(|_| Error::Checkpoint("header too large".into()))?;
    let mut out = Vec::with_capacity(8 + header_bytes.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(&header_bytes);
    out.extend_from_slice(&payload);
    Ok(out)
}

/// Parse level bytes back into a flow plus its metadata.
pub fn decode_level(bytes: &[u8]) -> Result<(LevelFlow, ModelMeta, usize)> {
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let len = u32::from_le_bytes([bytes[4], bytes[5], bytes[6], bytes[7]]) as usize;
    let header_end = 8 + len;
    if bytes.len() < header_end {
        return Err(Error::Checkpoint("truncated checkpoint header".into()));
    }
    let header: Header = serde_json::from_slice(&bytes[8..header_end])?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint format version {} (this build reads {})",
            header.format_version, FORMAT_VERSION
        )));
    }
    let payload = &bytes[header_end..];
    let cfg = header.flow.config()?;
    let mut rng = ChaCha12Rng::seed_from_u64(0);
    let mut flow = LevelFlow::new(cfg, &mut rng)?;
    let mut idx = 0usize;
    let mut err: Option<Error> = None;
    flow.visit_state_mut(&mut |name, t| {
        if err.is_some() {
            return;
        }
        let entry = match header.manifest.get(idx) {
            Some(e) => e,
            None => {
                err = Some(Error::Checkpoint(format!(
                    "manifest ends before parameter {name}"
                )));
                return;
            }
        };
        if entry.name != name || entry.shape != t.shape() {
            err = Some(Error::Checkpoint(format!(
                "manifest entry {idx} is {} {:?}, expected {} {:?}",
                entry.name,
                entry.shape,
                name,
                t.shape()
            )));
            return;
        }
        let n = t.data().len();
        let start = entry.offset;
        let end = start + 8 * n;
        if end > payload.len() {
            err = Some(Error::Checkpoint(format!(
                "payload too short for parameter {name}"
            )));
            return;
        }
        let mut vals = Vec::with_capacity(n);
        for i in 0..n {
            let mut b = [0u8; 8];
            b.copy_from_slice(&payload[start + 8 * i..start + 8 * (i + 1)]);
            vals.push(f64::from_le_bytes(b));
        }
        *t = Tensor::new(t.shape().to_vec(), vals).expect("shape preserved");
        idx += 1;
    });
    if let Some(e) = err {
        return Err(e);
    }
    if idx != header.manifest.len() {
        return Err(Error::Checkpoint(format!(
            "manifest lists {} tensors, flow has {}",
            header.manifest.len(),
            idx
        )));
    }
    let expect: usize = header.manifest.iter().map(|e| e.shape.iter().product::<usize>() * 8).sum();
    if payload.len() != expect {
        return Err(Error::Checkpoint(format!(
            "payload is {} bytes, manifest expects {}",
            payload.len(),
            expect
        )));
    }
    flow.set_actnorm_initialized(header.flow.actnorm_initialized);
    Ok((flow, header.model, header.level))
}

/// Canonical file name for a level within a checkpoint directory.
pub fn level_path(dir: &Path, level: usize) -> PathBuf {
    dir.join(format!("level_{level}.wfck"))
}

pub fn save_level(flow: &LevelFlow, meta: &ModelMeta, level: usize, path: &Path) -> Result<()> {
    let bytes = encode_level(flow, meta, level)?;
    fs::write(path, bytes)?;
    Ok(())
}

pub fn load_level(path: &Path) -> Result<(LevelFlow, ModelMeta, usize)> {
    let bytes = fs::read(path)?;
    decode_level(&bytes)
}

/// Write every level of a model into `dir` as `level_<i>.wfck`.
pub fn save_model(model: &WaveletFlowModel, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let meta = ModelMeta::of(model);
    let mut paths = Vec::new();
    for i in 0..model.num_levels() {
        let p = level_path(dir, i);
        save_level(model.level(i)?, &meta, i, &p)?;
        paths.push(p);
    }
    Ok(paths)
}

/// Assemble a model from per-level files in `dir`. All n+1 levels must be
/// present and carry identical model metadata.
pub fn load_model(dir: &Path) -> Result<WaveletFlowModel> {
    let base_path = level_path(dir, 0);
    if !base_path.exists() {
        return Err(Error::Checkpoint(format!("missing level 0 ({})", base_path.display())));
    }
    let (base, meta, idx) = load_level(&base_path)?;
    if idx != 0 {
        return Err(Error::Checkpoint(format!(
            "{} claims to be level {idx}",
            base_path.display()
        )));
    }
    let mut flows = vec![base];
    for i in 1..=meta.n {
        let p = level_path(dir, i);
        if !p.exists() {
            return Err(Error::Checkpoint(format!("missing level {i} ({})", p.display())));
        }
        let (flow, m, idx) = load_level(&p)?;
        if idx != i {
            return Err(Error::Checkpoint(format!(
                "{} claims to be level {idx}, expected {i}",
                p.display()
            )));
        }
        if m != meta {
            return Err(Error::Checkpoint(format!(
                "level {i} metadata {m:?} conflicts with level 0 metadata {meta:?}"
            )));
        }
        flows.push(flow);
    }
    let specs: Vec<LevelSpec> = flows
        .iter()
        .map(|f| {
            let c = f.config();
            LevelSpec {
                steps: c.steps,
                conv_channels: c.conv_channels,
                residual_blocks: c.residual_blocks,
                coupling: c.coupling,
            }
        })
        .collect();
    let mut rng = ChaCha12Rng::seed_from_u64(0);
    let mut model = WaveletFlowModel::with_intensity_max(
        meta.n,
        meta.channels,
        meta.intensity_max,
        &specs,
        &mut rng,
    )?;
    for (i, flow) in flows.into_iter().enumerate() {
        model.replace_level(i, flow)?;
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::LevelSpec;
    use crate::wavelet::ImagePlane;
    use rand::Rng;

    fn random_model(seed: u64) -> WaveletFlowModel {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let specs = vec![
            LevelSpec { steps: 2, conv_channels: 6, residual_blocks: 1, ..LevelSpec::default() },
            LevelSpec {
                steps: 2,
                conv_channels: 6,
                residual_blocks: 1,
                coupling: CouplingKind::Additive,
            },
            LevelSpec { steps: 3, conv_channels: 8, residual_blocks: 1, ..LevelSpec::default() },
        ];
        let mut model = WaveletFlowModel::new(2, 1, &specs, &mut rng).unwrap();
        for i in 0..3 {
            model.level_mut(i).unwrap().randomize_mixing(&mut rng).unwrap();
            model.level_mut(i).unwrap().randomize(&mut rng, 0.5).unwrap();
        }
        model
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let model = random_model(31);
        let meta = ModelMeta::of(&model);
        let bytes = encode_level(model.level(1).unwrap(), &meta, 1).unwrap();
        let (flow, meta2, level) = decode_level(&bytes).unwrap();
        assert_eq!(meta2, meta);
        assert_eq!(level, 1);
        let bytes2 = encode_level(&flow, &meta2, level).unwrap();
        assert_eq!(bytes, bytes2);
    }

    #[test]
    fn log_prob_is_bit_exact_across_roundtrip() {
        let model = random_model(32);
        let dir = tempfile::tempdir().unwrap();
        save_model(&model, dir.path()).unwrap();
        let loaded = load_model(dir.path()).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        for _ in 0..5 {
            let data: Vec<f64> = (0..16).map(|_| rng.gen::<f64>() * 256.0).collect();
            let img = ImagePlane::new(4, 1, data).unwrap();
            let a = model.log_prob(&img).unwrap();
            let b = loaded.log_prob(&img).unwrap();
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn missing_level_is_reported_by_index() {
        let model = random_model(33);
        let dir = tempfile::tempdir().unwrap();
        save_model(&model, dir.path()).unwrap();
        fs::remove_file(level_path(dir.path(), 2)).unwrap();
        let err = load_model(dir.path()).unwrap_err();
        match err {
            Error::Checkpoint(msg) => assert!(msg.contains("missing level 2"), "{msg}"),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn metadata_conflicts_are_rejected() {
        let model = random_model(34);
        let dir = tempfile::tempdir().unwrap();
        save_model(&model, dir.path()).unwrap();
        let other = ModelMeta { n: 2, channels: 1, intensity_max: 128.0 };
        save_level(model.level(1).unwrap(), &other, 1, &level_path(dir.path(), 1)).unwrap();
        let err = load_model(dir.path()).unwrap_err();
        match err {
            Error::Checkpoint(msg) => assert!(msg.contains("conflicts"), "{msg}"),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn version_and_magic_are_checked() {
        let model = random_model(35);
        let meta = ModelMeta::of(&model);
        let mut bytes = encode_level(model.level(0).unwrap(), &meta, 0).unwrap();
        assert!(decode_level(b"nope").is_err());
        let len = u32::from_le_bytes([bytes[4], bytes[5], bytes[6], bytes[7]]) as usize;
        let s = String::from_utf8(bytes[8..8 + len].to_vec()).unwrap();
        assert!(s.starts_with("{\"format_version\":1"));
        bytes[8 + 18] = b'9';
        let err = decode_level(&bytes).unwrap_err();
        match err {
            Error::Checkpoint(msg) => assert!(msg.contains("version"), "{msg}"),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let model = random_model(36);
        let meta = ModelMeta::of(&model);
        let bytes = encode_level(model.level(0).unwrap(), &meta, 0).unwrap();
        let err = decode_level(&bytes[..bytes.len() - 8]).unwrap_err();
        match err {
            Error::Checkpoint(msg) => {
                assert!(msg.contains("payload"), "{msg}");
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn actnorm_flag_survives_roundtrip() {
        let mut model = random_model(37);
        model.level_mut(0).unwrap().set_actnorm_initialized(false);
        let meta = ModelMeta::of(&model);
        let bytes = encode_level(model.level(0).unwrap(), &meta, 0).unwrap();
        let (flow, _, _) = decode_level(&bytes).unwrap();
        assert!(!flow.actnorm_initialized());
        let bytes = encode_level(model.level(1).unwrap(), &meta, 1).unwrap();
        let (flow, _, _) = decode_level(&bytes).unwrap();
        assert!(flow.actnorm_initialized());
    }

    #[test]
    fn assembled_model_matches_original_state() {
        let model = random_model(38);
        let dir = tempfile::tempdir().unwrap();
        save_model(&model, dir.path()).unwrap();
        let loaded = load_model(dir.path()).unwrap();
        assert_eq!(loaded.n(), model.n());
        assert_eq!(loaded.intensity_max(), model.intensity_max());
        for i in 0..model.num_levels() {
            let a = model.level(i).unwrap();
            let b = loaded.level(i).unwrap();
            let mut av: Vec<(String, Vec<f64>)> = Vec::new();
            a.visit_state(&mut |n, t| av.push((n.to_string(), t.data().to_vec())));
            let mut bv: Vec<(String, Vec<f64>)> = Vec::new();
            b.visit_state(&mut |n, t| bv.push((n.to_string(), t.data().to_vec())));
            assert_eq!(av, bv);
        }
    }
}
