//! Flat parameter vector with named segments, plus the binary tensor file
//! format shared by parameter snapshots and training checkpoints.
//!
//! File layout: `ICPNET01` magic, little-endian u64 header length, a JSON
//! header (schema version, config hash, endianness marker, named tensor
//! table, free-form metadata), then the tensor payloads as little-endian
//! f64. Loading refuses files whose config hash does not match.

use std::collections::HashMap;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::graph::build_plan;
use super::{NetError, NetworkConfig};
use crate::seeding::rng_from_seed;

const MAGIC: &[u8; 8] = b"ICPNET01";
const FILE_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentInfo {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

/// Layout of the flat parameter vector for a network config.
#[derive(Clone, Debug)]
pub struct ParamLayout {
    pub segments: Vec<SegmentInfo>,
    pub total: usize,
    pub config_hash: String,
    by_name: HashMap<String, usize>,
}

impl ParamLayout {
    pub fn build(cfg: &NetworkConfig) -> Result<Self, NetError> {
        cfg.validate()?;
        let plan = build_plan(cfg)?;
        let mut segments = Vec::new();
        let mut offset = 0;
        for (name, len) in plan.param_segments() {
            segments.push(SegmentInfo { name, offset, len });
            offset += len;
        }
        let by_name = segments.iter().enumerate().map(|(i, s)| (s.name.clone(), i)).collect();
        Ok(Self { segments, total: offset, config_hash: cfg.config_hash(), by_name })
    }

    pub fn segment(&self, name: &str) -> Option<&SegmentInfo> {
        self.by_name.get(name).map(|&i| &self.segments[i])
    }

    /// Segments whose name starts with `prefix` (a layer name freezes all
    /// of its pieces).
    pub fn segments_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = &'a SegmentInfo> {
        self.segments.iter().filter(move |s| s.name.starts_with(prefix))
    }
}

/// Flat parameter vector tied to a layout (and through it to a config).
#[derive(Clone, Debug)]
pub struct NetworkParameters {
    pub layout: ParamLayout,
    pub data: Vec<f64>,
}

impl NetworkParameters {
    pub fn zeros(cfg: &NetworkConfig) -> Result<Self, NetError> {
        let layout = ParamLayout::build(cfg)?;
        let data = vec![0.0; layout.total];
        Ok(Self { layout, data })
    }

    /// Glorot-uniform weights, unit affine scales, zero biases; the final
    /// head linear starts at zero so the initial prediction is the unit
    /// Gaussian (mu = 0, Sigma = I).
    pub fn init(cfg: &NetworkConfig, seed: u64) -> Result<Self, NetError> {
        let layout = ParamLayout::build(cfg)?;
        let plan = build_plan(cfg)?;
        let mut data = vec![0.0; layout.total];
        let mut rng = rng_from_seed(seed);
        for seg in &layout.segments {
            let slice = &mut data[seg.offset..seg.offset + seg.len];
            match plan.segment_kind(&seg.name) {
                SegmentKind::Weight { fan_in, fan_out, zero_init } => {
                    if zero_init {
                        continue;
                    }
                    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    for v in slice.iter_mut() {
                        *v = rng.random_range(-bound..bound);
                    }
                }
                SegmentKind::Bias => {}
                SegmentKind::AffineScale => slice.fill(1.0),
                SegmentKind::AffineShift => {}
            }
        }
        Ok(Self { layout, data })
    }

    pub fn segment_slice(&self, name: &str) -> Option<&[f64]> {
        self.layout.segment(name).map(|s| &self.data[s.offset..s.offset + s.len])
    }

    pub fn check_finite(&self) -> Result<(), NetError> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(NetError::NonFinite("network parameters"))
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), NetError> {
        let file = TensorFile {
            config_hash: self.layout.config_hash.clone(),
            meta: serde_json::json!({ "kind": "parameters" }),
            tensors: vec![("params".to_string(), self.data.clone())],
        };
        save_tensors(path, &file)
    }

    pub fn load(path: &Path, cfg: &NetworkConfig) -> Result<Self, NetError> {
        let layout = ParamLayout::build(cfg)?;
        let file = load_tensors(path)?;
        if file.config_hash != layout.config_hash {
            return Err(NetError::HashMismatch {
                params_hash: file.config_hash,
                config_hash: layout.config_hash,
            });
        }
        let data = file
            .tensors
            .into_iter()
            .find(|(n, _)| n == "params")
            .map(|(_, d)| d)
            .ok_or_else(|| NetError::ParamFile {
                path: path.display().to_string(),
                reason: "missing 'params' tensor".into(),
            })?;
        if data.len() != layout.total {
            return Err(NetError::ParamCount { have: data.len(), want: layout.total });
        }
        Ok(Self { layout, data })
    }
}

pub(crate) enum SegmentKind {
    Weight { fan_in: usize, fan_out: usize, zero_init: bool },
    Bias,
    AffineScale,
    AffineShift,
}

/// A bundle of named f64 tensors plus metadata, the on-disk unit.
#[derive(Clone, Debug)]
pub struct TensorFile {
    pub config_hash: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Vec<f64>)>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    schema_version: u32,
    config_hash: String,
    endianness: String,
    tensors: Vec<(String, usize)>,
    meta: serde_json::Value,
}

pub fn save_tensors(path: &Path, file: &TensorFile) -> Result<(), NetError> {
    let err = |reason: String| NetError::ParamFile { path: path.display().to_string(), reason };
    let header = Header {
        schema_version: FILE_SCHEMA_VERSION,
        config_hash: file.config_hash.clone(),
        endianness: "little".into(),
        tensors: file.tensors.iter().map(|(n, d)| (n.clone(), d.len())).collect(),
        meta: file.meta.clone(),
    };
    let header_json = serde_json::to_vec(&header).map_err(|e| err(e.to_string()))?;
    let mut out = fs::File::create(path).map_err(|e| err(e.to_string()))?;
    out.write_all(MAGIC).map_err(|e| err(e.to_string()))?;
    out.write_all(&(header_json.len() as u64).to_le_bytes()).map_err(|e| err(e.to_string()))?;
    out.write_all(&header_json).map_err(|e| err(e.to_string()))?;
    let mut payload = Vec::new();
    for (_, data) in &file.tensors {
        for v in data {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.write_all(&payload).map_err(|e| err(e.to_string()))
}

pub fn load_tensors(path: &Path) -> Result<TensorFile, NetError> {
    let err = |reason: String| NetError::ParamFile { path: path.display().to_string(), reason };
    let bytes = fs::read(path).map_err(|e| err(e.to_string()))?;
    if bytes.len() < 16 || &bytes[0..8] != MAGIC {
        return Err(err("bad magic".into()));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    if bytes.len() < 16 + header_len {
        return Err(err("truncated header".into()));
    }
    let header: Header =
        serde_json::from_slice(&bytes[16..16 + header_len]).map_err(|e| err(e.to_string()))?;
    if header.schema_version != FILE_SCHEMA_VERSION {
        return Err(err(format!("unsupported schema version {}", header.schema_version)));
    }
    if header.endianness != "little" {
        return Err(err(format!("unsupported endianness {}", header.endianness)));
    }
    let total: usize = header.tensors.iter().map(|(_, n)| n).sum();
    let payload = &bytes[16 + header_len..];
    if payload.len() != total * 8 {
        return Err(err(format!("payload {} bytes, expected {}", payload.len(), total * 8)));
    }
    let mut tensors = Vec::new();
    let mut cursor = 0;
    for (name, len) in header.tensors {
        let mut data = Vec::with_capacity(len);
        for i in 0..len {
            let start = (cursor + i) * 8;
            data.push(f64::from_le_bytes(payload[start..start + 8].try_into().unwrap()));
        }
        cursor += len;
        tensors.push((name, data));
    }
    Ok(TensorFile { config_hash: header.config_hash, meta: header.meta, tensors })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_is_consistent_and_final_head_zero() {
        let cfg = NetworkConfig::desk_scale();
        let params = NetworkParameters::init(&cfg, 1).unwrap();
        assert_eq!(params.data.len(), params.layout.total);
        let head_w = params.segment_slice("head.out.w").unwrap();
        assert!(head_w.iter().all(|&v| v == 0.0));
        let head_b = params.segment_slice("head.out.b").unwrap();
        assert!(head_b.iter().all(|&v| v == 0.0));
        // Affine scales start at one.
        let g = params.segment_slice("pre0.lin0.g").unwrap();
        assert!(g.iter().all(|&v| v == 1.0));
        // Weights are non-trivial.
        let w = params.segment_slice("pre0.lin0.w").unwrap();
        assert!(w.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn init_is_seed_deterministic() {
        let cfg = NetworkConfig::desk_scale();
        let a = NetworkParameters::init(&cfg, 7).unwrap();
        let b = NetworkParameters::init(&cfg, 7).unwrap();
        let c = NetworkParameters::init(&cfg, 8).unwrap();
        assert_eq!(a.data, b.data);
        assert_ne!(a.data, c.data);
    }

    #[test]
    fn save_load_round_trip_and_hash_check() {
        let cfg = NetworkConfig::desk_scale();
        let params = NetworkParameters::init(&cfg, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("params.bin");
        params.save(&path).unwrap();
        let back = NetworkParameters::load(&path, &cfg).unwrap();
        assert_eq!(params.data, back.data);

        let mut other = cfg.clone();
        other.dropout_rate = 0.5;
        match NetworkParameters::load(&path, &other) {
            Err(NetError::HashMismatch { params_hash, config_hash }) => {
                assert_ne!(params_hash, config_hash);
            }
            other => panic!("expected hash mismatch, got {other:?}"),
        }
    }
}
