//! On-disk formats.
//!
//! * Tensor container: `u64` LE header length, a JSON header
//!   (`name`, `dtype` `"f32"|"f64"`, `shape`, `byte_order` `"LE"`, optional
//!   `metadata`), then the raw little-endian row-major payload.
//! * Packed NVFP4: `"NVF4"`, version `u16`, ndim `u16`, dims `u64`…,
//!   block size `u32`, global scale as `f32`, one E4M3 byte per block, then
//!   codes two per byte (even element in the low nibble), zero-padded.
//!
//! Every write goes to a temporary file in the target directory and is renamed
//! into place.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::e4m3::{e4m3_from_bits, e4m3_to_bits};
use crate::error::{FaarError, Result};
use crate::micronet::{MicroNet, Stage2TraceRow};
use crate::nvfp4::{Nvfp4Code, QuantizedTensor, ScaleSet};
use crate::rounding::{init_rounding_vars, RoundingVars};
use crate::stage1::{LinearLayer, Stage1TraceRow};
use crate::tensor::Tensor;

pub const NVF4_MAGIC: &[u8; 4] = b"NVF4";
pub const NVF4_VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    fn parse(tag: &str) -> Option<Self> {
        match tag {
            "f32" => Some(Dtype::F32),
            "f64" => Some(Dtype::F64),
            _ => None,
        }
    }

    fn tag(self) -> &'static str {
        match self {
            Dtype::F32 => "f32",
            Dtype::F64 => "f64",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawHeader {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    byte_order: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    metadata: Option<serde_json::Value>,
}

/// Parsed container header.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorHeader {
    pub name: String,
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    pub metadata: Option<serde_json::Value>,
}

/// Writes `bytes` to `path` via a sibling temporary file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let file_name = path
        .file_name()
        .ok_or_else(|| {
            FaarError::InvalidArgument(format!("{} is not a file path", path.display()))
        })?
        .to_string_lossy();
    let tmp = dir.join(format!(".{file_name}.tmp{}", std::process::id()));
    let write = || -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(|e| {
        let _ = fs::remove_file(&tmp);
        FaarError::io(path, e)
    })
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| FaarError::io(path, e))
}

/// Serializes a tensor container in memory.
pub fn encode_container(
    t: &Tensor,
    name: &str,
    dtype: Dtype,
    metadata: Option<serde_json::Value>,
) -> Vec<u8> {
    let header = RawHeader {
        name: name.to_string(),
        dtype: dtype.tag().to_string(),
        shape: t.shape().to_vec(),
        byte_order: "LE".into(),
        metadata,
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(8 + json.len() + t.len() * dtype.width());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for &v in t.data() {
        match dtype {
            Dtype::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
            Dtype::F64 => out.extend_from_slice(&v.to_le_bytes()),
        }
    }
    out
}

/// Parses a tensor container; the header is validated before the payload is read.
pub fn decode_container(bytes: &[u8], path: &Path) -> Result<(TensorHeader, Tensor)> {
    let malformed = |detail: String| FaarError::MalformedHeader {
        path: path.to_path_buf(),
        detail,
    };
    if bytes.len() < 8 {
        return Err(malformed(
            "file shorter than the header length prefix".into(),
        ));
    }
    let header_len = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"));
    let header_end = usize::try_from(header_len)
        .ok()
        .and_then(|h| h.checked_add(8))
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| malformed(format!("header length {header_len} exceeds file size")))?;
    let raw: RawHeader = serde_json::from_slice(&bytes[8..header_end])
        .map_err(|e| malformed(format!("header JSON: {e}")))?;
    if raw.byte_order != "LE" {
        return Err(malformed(format!(
            "unsupported byte order {:?}",
            raw.byte_order
        )));
    }
    let dtype = Dtype::parse(&raw.dtype).ok_or_else(|| FaarError::DtypeMismatch {
        path: path.to_path_buf(),
        expected: "f32 or f64".into(),
        found: raw.dtype.clone(),
    })?;
    let count = raw
        .shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| malformed("shape overflows".into()))?;
    if raw.shape.is_empty() || count == 0 {
        return Err(FaarError::EmptyTensor("container holds no elements"));
    }
    let payload = &bytes[header_end..];
    let expected = count
        .checked_mul(dtype.width())
        .ok_or_else(|| malformed("payload size overflows".into()))?;
    if payload.len() < expected {
        return Err(FaarError::TruncatedPayload {
            path: path.to_path_buf(),
            expected,
            found: payload.len(),
        });
    }
    if payload.len() > expected {
        return Err(FaarError::TrailingBytes {
            path: path.to_path_buf(),
            expected,
            found: payload.len(),
        });
    }
    let data: Vec<f64> = match dtype {
        Dtype::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect(),
        Dtype::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect(),
    };
    let tensor = Tensor::new(raw.shape.clone(), data)?;
    Ok((
        TensorHeader {
            name: raw.name,
            dtype,
            shape: raw.shape,
            metadata: raw.metadata,
        },
        tensor,
    ))
}

/// Saves as `f64`.
pub fn save_tensor(t: &Tensor, name: &str, path: &Path) -> Result<()> {
    write_atomic(path, &encode_container(t, name, Dtype::F64, None))
}

pub fn save_tensor_with(
    t: &Tensor,
    name: &str,
    dtype: Dtype,
    metadata: Option<serde_json::Value>,
    path: &Path,
) -> Result<()> {
    write_atomic(path, &encode_container(t, name, dtype, metadata))
}

pub fn load_tensor(path: &Path) -> Result<Tensor> {
    Ok(load_tensor_with_header(path)?.1)
}

pub fn load_tensor_with_header(path: &Path) -> Result<(TensorHeader, Tensor)> {
    decode_container(&read_file(path)?, path)
}

/// Serialized size of a packed tensor.
pub fn packed_size(shape: &[usize], block_size: usize) -> usize {
    let n: usize = shape.iter().product();
    4 + 2 + 2 + 8 * shape.len() + 4 + 4 + n.div_ceil(block_size) + n.div_ceil(2)
}

pub fn pack_nvfp4_bytes(q: &QuantizedTensor) -> Vec<u8> {
    let scales = q.scales();
    let mut out = Vec::with_capacity(packed_size(q.shape(), scales.block_size));
    out.extend_from_slice(NVF4_MAGIC);
    out.extend_from_slice(&NVF4_VERSION.to_le_bytes());
    out.extend_from_slice(&(q.shape().len() as u16).to_le_bytes());
    for &d in q.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    out.extend_from_slice(&(scales.block_size as u32).to_le_bytes());
    out.extend_from_slice(&(scales.s_global as f32).to_le_bytes());
    for &s in &scales.s_block {
        out.push(e4m3_to_bits(s).expect("validated E4M3 block scale"));
    }
    for pair in q.codes().chunks(2) {
        let lo = pair[0].bits();
        let hi = pair.get(1).map_or(0, |c| c.bits());
        out.push(lo | (hi << 4));
    }
    out
}

pub fn unpack_nvfp4_bytes(bytes: &[u8], path: &Path) -> Result<QuantizedTensor> {
    let inconsistent = |detail: String| FaarError::SizeInconsistency {
        path: path.to_path_buf(),
        detail,
    };
    if bytes.len() < 8 || &bytes[..4] != NVF4_MAGIC {
        return Err(FaarError::BadMagic {
            path: path.to_path_buf(),
        });
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != NVF4_VERSION {
        return Err(FaarError::VersionMismatch {
            path: path.to_path_buf(),
            expected: NVF4_VERSION,
            found: version,
        });
    }
    let ndim = u16::from_le_bytes([bytes[6], bytes[7]]) as usize;
    let fixed = 8 + 8 * ndim + 4 + 4;
    if bytes.len() < fixed {
        return Err(inconsistent(format!(
            "{} bytes cannot hold a header with {ndim} dims",
            bytes.len()
        )));
    }
    let mut shape = Vec::with_capacity(ndim);
    for k in 0..ndim {
        let off = 8 + 8 * k;
        let d = u64::from_le_bytes(bytes[off..off + 8].try_into().expect("8 bytes"));
        shape.push(usize::try_from(d).map_err(|_| inconsistent(format!("dim {d} too large")))?);
    }
    let mut off = 8 + 8 * ndim;
    let block_size = u32::from_le_bytes(bytes[off..off + 4].try_into().expect("4 bytes")) as usize;
    off += 4;
    let s_global = f32::from_le_bytes(bytes[off..off + 4].try_into().expect("4 bytes")) as f64;
    off += 4;
    if block_size == 0 {
        return Err(inconsistent("block size 0".into()));
    }
    let n = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .filter(|&n| n > 0 && ndim > 0)
        .ok_or_else(|| inconsistent(format!("invalid shape {shape:?}")))?;
    let blocks = n.div_ceil(block_size);
    let expected = fixed + blocks + n.div_ceil(2);
    if bytes.len() != expected {
        return Err(inconsistent(format!(
            "expected {expected} bytes for shape {shape:?}, found {}",
            bytes.len()
        )));
    }
    let s_block: Vec<f64> = bytes[off..off + blocks]
        .iter()
        .map(|&b| e4m3_from_bits(b))
        .collect();
    off += blocks;
    let mut codes = Vec::with_capacity(n);
    for (k, &byte) in bytes[off..].iter().enumerate() {
        codes.push(Nvfp4Code::from_bits(byte & 0x0f));
        if 2 * k + 1 < n {
            codes.push(Nvfp4Code::from_bits(byte >> 4));
        } else if byte >> 4 != 0 {
            return Err(inconsistent("non-zero padding nibble".into()));
        }
    }
    let scales = ScaleSet {
        s_global,
        s_block,
        block_size,
    };
    QuantizedTensor::new(shape, codes, scales).map_err(|e| inconsistent(e.to_string()))
}

pub fn pack_nvfp4(q: &QuantizedTensor, path: &Path) -> Result<()> {
    write_atomic(path, &pack_nvfp4_bytes(q))
}

pub fn unpack_nvfp4(path: &Path) -> Result<QuantizedTensor> {
    unpack_nvfp4_bytes(&read_file(path)?, path)
}

/// Provenance stored with a rounding-variable checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub kind: String,
    pub layer: String,
    /// Weight file the variables were initialized from.
    pub source: String,
    pub scales: ScaleSet,
}

const CHECKPOINT_KIND: &str = "rounding_vars";

pub fn save_rounding_vars(rv: &RoundingVars, layer: &str, source: &str, path: &Path) -> Result<()> {
    let meta = CheckpointMeta {
        kind: CHECKPOINT_KIND.into(),
        layer: layer.into(),
        source: source.into(),
        scales: rv.scales().clone(),
    };
    let v = Tensor::new(rv.shape().to_vec(), rv.v().to_vec())?;
    let meta = serde_json::to_value(meta).expect("metadata serializes");
    save_tensor_with(&v, "v", Dtype::F64, Some(meta), path)
}

pub fn read_checkpoint_meta(path: &Path) -> Result<(CheckpointMeta, Tensor)> {
    let (header, v) = load_tensor_with_header(path)?;
    if header.dtype != Dtype::F64 {
        return Err(FaarError::DtypeMismatch {
            path: path.to_path_buf(),
            expected: "f64".into(),
            found: "f32".into(),
        });
    }
    let meta: CheckpointMeta = header
        .metadata
        .ok_or_else(|| FaarError::MalformedHeader {
            path: path.to_path_buf(),
            detail: "checkpoint has no metadata".into(),
        })
        .and_then(|m| {
            serde_json::from_value(m).map_err(|e| FaarError::MalformedHeader {
                path: path.to_path_buf(),
                detail: format!("checkpoint metadata: {e}"),
            })
        })?;
    if meta.kind != CHECKPOINT_KIND {
        return Err(FaarError::MalformedHeader {
            path: path.to_path_buf(),
            detail: format!(
                "expected a {CHECKPOINT_KIND} checkpoint, found {:?}",
                meta.kind
            ),
        });
    }
    Ok((meta, v))
}

/// Rebuilds rounding variables for `weights` from a checkpoint.
pub fn load_rounding_vars(path: &Path, weights: &Tensor) -> Result<(RoundingVars, CheckpointMeta)> {
    let (meta, v) = read_checkpoint_meta(path)?;
    if v.shape() != weights.shape() {
        return Err(FaarError::ShapeMismatch(format!(
            "checkpoint {} has shape {:?}, weights have {:?}",
            path.display(),
            v.shape(),
            weights.shape()
        )));
    }
    let mut rv = init_rounding_vars(weights, &meta.scales)?;
    rv.set_v(v.data())?;
    Ok((rv, meta))
}

/// Micro-network description: layer names and weight files relative to the
/// manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelManifest {
    pub layers: Vec<ManifestLayer>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestLayer {
    pub name: String,
    pub file: String,
    pub out_dim: usize,
    pub in_dim: usize,
}

/// Manifest of a packed NVFP4 export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PackedManifest {
    pub format: String,
    pub block_size: usize,
    pub layers: Vec<ManifestLayer>,
}

fn base_dir(manifest: &Path) -> PathBuf {
    manifest
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .map_or_else(|| PathBuf::from("."), Path::to_path_buf)
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| FaarError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| FaarError::MalformedHeader {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })
}

/// Writes each layer as `<name>.tensor` next to `manifest_path`.
pub fn save_micronet(net: &MicroNet, manifest_path: &Path) -> Result<()> {
    let dir = base_dir(manifest_path);
    let mut layers = Vec::new();
    for layer in net.layers() {
        let file = format!("{}.tensor", layer.name);
        save_tensor(layer.weights(), &layer.name, &dir.join(&file))?;
        layers.push(ManifestLayer {
            name: layer.name.clone(),
            file,
            out_dim: layer.out_dim(),
            in_dim: layer.in_dim(),
        });
    }
    write_json(&ModelManifest { layers }, manifest_path)
}

/// Returns the network and the weight path of each layer.
pub fn load_micronet(manifest_path: &Path) -> Result<(MicroNet, Vec<PathBuf>)> {
    let manifest: ModelManifest = read_json(manifest_path)?;
    let dir = base_dir(manifest_path);
    let mut layers = Vec::new();
    let mut paths = Vec::new();
    for entry in &manifest.layers {
        let path = dir.join(&entry.file);
        let w = load_tensor(&path)?;
        if w.shape() != [entry.out_dim, entry.in_dim] {
            return Err(FaarError::ShapeMismatch(format!(
                "{} has shape {:?}, manifest says [{}, {}]",
                path.display(),
                w.shape(),
                entry.out_dim,
                entry.in_dim
            )));
        }
        layers.push(LinearLayer::new(entry.name.clone(), w)?);
        paths.push(path);
    }
    Ok((MicroNet::new(layers)?, paths))
}

/// Packs each quantized layer to `<name>.nvf4` and writes the manifest.
pub fn save_packed_model(
    names: &[String],
    layers: &[QuantizedTensor],
    block_size: usize,
    manifest_path: &Path,
) -> Result<()> {
    let dir = base_dir(manifest_path);
    let mut entries = Vec::new();
    for (name, q) in names.iter().zip(layers) {
        let file = format!("{name}.nvf4");
        pack_nvfp4(q, &dir.join(&file))?;
        let (out_dim, in_dim) = match q.shape() {
            [o, i] => (*o, *i),
            other => (other[0], other[1..].iter().product()),
        };
        entries.push(ManifestLayer {
            name: name.clone(),
            file,
            out_dim,
            in_dim,
        });
    }
    write_json(
        &PackedManifest {
            format: "nvfp4".into(),
            block_size,
            layers: entries,
        },
        manifest_path,
    )
}

pub fn load_packed_model(manifest_path: &Path) -> Result<(PackedManifest, Vec<QuantizedTensor>)> {
    let manifest: PackedManifest = read_json(manifest_path)?;
    let dir = base_dir(manifest_path);
    let layers = manifest
        .layers
        .iter()
        .map(|l| unpack_nvfp4(&dir.join(&l.file)))
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, layers))
}

pub fn stage1_trace_csv(rows: &[Stage1TraceRow]) -> String {
    let mut s = String::from("step,mse_term,reg_term,beta\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{}\n",
            r.step, r.mse_term, r.reg_term, r.beta
        ));
    }
    s
}

pub fn stage2_trace_csv(rows: &[Stage2TraceRow]) -> String {
    let mut s = String::from("step,kl,mse,round,beta,total\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.step, r.kl, r.mse, r.round, r.beta, r.total
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nvfp4::quantize_rtn_auto;

    #[test]
    fn container_roundtrip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.tensor");
        let t = Tensor::matrix(2, 3, vec![1.0, -2.5, 3.25, 0.0, 1e-300, -7.0]).unwrap();
        save_tensor(&t, "w", &p).unwrap();
        assert_eq!(load_tensor(&p).unwrap(), t);

        let bytes = fs::read(&p).unwrap();
        let cut = dir.path().join("cut.tensor");
        fs::write(&cut, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(
            load_tensor(&cut),
            Err(FaarError::TruncatedPayload { .. })
        ));

        let mut long = bytes.clone();
        long.push(0);
        fs::write(&cut, &long).unwrap();
        assert!(matches!(
            load_tensor(&cut),
            Err(FaarError::TrailingBytes { .. })
        ));

        fs::write(&cut, b"\x05\0\0\0\0\0\0\0{bad}").unwrap();
        assert!(matches!(
            load_tensor(&cut),
            Err(FaarError::MalformedHeader { .. })
        ));

        let bf16 = br#"{"name":"x","dtype":"bf16","shape":[1],"byte_order":"LE"}"#;
        let mut b = (bf16.len() as u64).to_le_bytes().to_vec();
        b.extend_from_slice(bf16);
        b.extend_from_slice(&[0, 0]);
        fs::write(&cut, &b).unwrap();
        assert!(matches!(
            load_tensor(&cut),
            Err(FaarError::DtypeMismatch { .. })
        ));

        let empty = br#"{"name":"x","dtype":"f64","shape":[0],"byte_order":"LE"}"#;
        let mut b = (empty.len() as u64).to_le_bytes().to_vec();
        b.extend_from_slice(empty);
        fs::write(&cut, &b).unwrap();
        assert!(matches!(load_tensor(&cut), Err(FaarError::EmptyTensor(_))));
    }

    #[test]
    fn f32_container_casts() {
        let t = Tensor::new(vec![2], vec![0.1, 2.0]).unwrap();
        let bytes = encode_container(&t, "x", Dtype::F32, None);
        let (h, back) = decode_container(&bytes, Path::new("mem")).unwrap();
        assert_eq!(h.dtype, Dtype::F32);
        assert_eq!(back.data(), &[0.1f32 as f64, 2.0]);
    }

    #[test]
    fn three_elements_pad_high_nibble() {
        let t = Tensor::new(vec![3], vec![1.0, -2.0, 6.0]).unwrap();
        let q = quantize_rtn_auto(&t, 16).unwrap();
        let bytes = pack_nvfp4_bytes(&q);
        assert_eq!(bytes.len(), packed_size(&[3], 16));
        let codes = &bytes[bytes.len() - 2..];
        assert_eq!(codes[1] >> 4, 0);
        assert_eq!(codes[1] & 0x0f, q.codes()[2].bits());
        let back = unpack_nvfp4_bytes(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back, q);
    }

    #[test]
    fn packed_errors() {
        let t = Tensor::new(vec![5], vec![1.0, -2.0, 6.0, 0.1, 0.2]).unwrap();
        let bytes = pack_nvfp4_bytes(&quantize_rtn_auto(&t, 2).unwrap());
        let p = Path::new("mem");
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            unpack_nvfp4_bytes(&bad, p),
            Err(FaarError::BadMagic { .. })
        ));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(
            unpack_nvfp4_bytes(&bad, p),
            Err(FaarError::VersionMismatch { found: 9, .. })
        ));
        assert!(matches!(
            unpack_nvfp4_bytes(&bytes[..bytes.len() - 1], p),
            Err(FaarError::SizeInconsistency { .. })
        ));
        let mut bad = bytes.clone();
        *bad.last_mut().unwrap() |= 0x30;
        assert!(matches!(
            unpack_nvfp4_bytes(&bad, p),
            Err(FaarError::SizeInconsistency { .. })
        ));
    }

    #[test]
    fn checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let w = Tensor::matrix(3, 5, (0..15).map(|i| (i as f64 - 7.0) * 0.31).collect()).unwrap();
        let scales = crate::nvfp4::compute_scales(&w, 4).unwrap();
        let mut rv = init_rounding_vars(&w, &scales).unwrap();
        rv.v_mut()[3] = 0.77;
        let p = dir.path().join("fc.rv");
        save_rounding_vars(&rv, "fc", "w.tensor", &p).unwrap();
        let (back, meta) = load_rounding_vars(&p, &w).unwrap();
        assert_eq!(back, rv);
        assert_eq!(meta.source, "w.tensor");
        let other = Tensor::zeros(vec![2, 2]).unwrap();
        assert!(load_rounding_vars(&p, &other).is_err());
    }
}
