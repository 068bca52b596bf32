//! Persistence formats: binary feature files, tab-separated manifests, and
//! checkpoint containers.
//!
//! Everything on disk is little-endian and single precision; computation
//! stays in double precision in memory. Round-trips are bit-exact at the
//! stored (f32) precision on every platform.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::error::{Error, Result};
use crate::params::Params;
use crate::tensor::Tensor2D;

pub const FEATURE_MAGIC: [u8; 4] = *b"CMKT";
pub const FEATURE_VERSION: u32 = 1;
pub const CHECKPOINT_VERSION: u32 = 1;

fn format_err(path: &Path, offset: u64, message: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        offset,
        message: message.into(),
    }
}

/// Narrows to f32 and serializes little-endian, row-major.
fn tensor_bytes(t: &Tensor2D) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 * t.len());
    for &v in t.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

fn tensor_from_bytes(rows: usize, cols: usize, bytes: &[u8]) -> Tensor2D {
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Tensor2D::from_raw(rows, cols, data)
}

/// Writes a feature file: magic, version, rows, cols (u32 LE each), then
/// the payload floats.
pub fn write_feature(path: &Path, t: &Tensor2D) -> Result<()> {
    if !t.all_finite() {
        return Err(Error::numeric("refusing to write non-finite features"));
    }
    let mut buf = Vec::with_capacity(16 + 4 * t.len());
    buf.extend_from_slice(&FEATURE_MAGIC);
    buf.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    buf.extend_from_slice(&(t.rows() as u32).to_le_bytes());
    buf.extend_from_slice(&(t.cols() as u32).to_le_bytes());
    buf.extend_from_slice(&tensor_bytes(t));
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

/// Reads a feature file, verifying magic, version, and payload length.
pub fn read_feature(path: &Path) -> Result<Tensor2D> {
    let bytes = fs::read(path)?;
    if bytes.len() < 16 {
        return Err(format_err(
            path,
            bytes.len() as u64,
            format!("header truncated: {} bytes, need 16", bytes.len()),
        ));
    }
    if bytes[0..4] != FEATURE_MAGIC {
        return Err(format_err(path, 0, "bad magic, expected \"CMKT\""));
    }
    let version = u32::from_le_bytes([bytes[4], bytes[5], bytes[6], bytes[7]]);
    if version != FEATURE_VERSION {
        return Err(format_err(
            path,
            4,
            format!("unsupported version {}, expected {}", version, FEATURE_VERSION),
        ));
    }
    let rows = u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]) as usize;
    let cols = u32::from_le_bytes([bytes[12], bytes[13], bytes[14], bytes[15]]) as usize;
    let expected = 4 * rows * cols;
    let payload = &bytes[16..];
    if payload.len() != expected {
        return Err(format_err(
            path,
            16,
            format!(
                "payload is {} bytes, expected {} for {}x{}",
                payload.len(),
                expected,
                rows,
                cols
            ),
        ));
    }
    Ok(tensor_from_bytes(rows, cols, payload))
}

/// One utterance: id, feature file, transcript.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub utt_id: String,
    pub feature_path: PathBuf,
    pub transcript: String,
}

/// Reads `utt_id<TAB>feature_path<TAB>transcript` lines. Relative feature
/// paths resolve against the manifest's directory; referenced files must
/// exist; utterance ids must be unique.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("cannot read manifest {}: {}", path.display(), e)))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut seen = std::collections::BTreeSet::new();
    let mut entries = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        if raw.trim().is_empty() {
            continue;
        }
        let mut parts = raw.splitn(3, '\t');
        let (id, fp, transcript) = match (parts.next(), parts.next(), parts.next()) {
            (Some(a), Some(b), Some(c)) => (a, b, c),
            _ => {
                return Err(Error::Data(format!(
                    "{}:{}: expected utt_id<TAB>path<TAB>transcript",
                    path.display(),
                    lineno + 1
                )))
            }
        };
        if !seen.insert(id.to_string()) {
            return Err(Error::Data(format!(
                "{}:{}: duplicate utterance id '{}'",
                path.display(),
                lineno + 1,
                id
            )));
        }
        let fp = PathBuf::from(fp);
        let feature_path = if fp.is_absolute() { fp } else { base.join(fp) };
        if !feature_path.exists() {
            return Err(Error::Data(format!(
                "{}:{}: feature file {} does not exist",
                path.display(),
                lineno + 1,
                feature_path.display()
            )));
        }
        entries.push(ManifestEntry {
            utt_id: id.to_string(),
            feature_path,
            transcript: transcript.to_string(),
        });
    }
    Ok(entries)
}

/// Writes manifest lines; feature paths are recorded as given.
pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut out = String::new();
    for e in entries {
        out.push_str(&format!(
            "{}\t{}\t{}\n",
            e.utt_id,
            e.feature_path.display(),
            e.transcript
        ));
    }
    fs::write(path, out)?;
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct IndexEntry {
    name: String,
    rows: u32,
    cols: u32,
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    format_version: u32,
    config: Config,
    step: u64,
    index: Vec<IndexEntry>,
}

/// Deserialized checkpoint contents.
pub struct CheckpointData {
    pub config: Config,
    pub params: Params,
    /// Adam first/second moments when the checkpoint stored optimizer state.
    pub moments: Option<(Params, Params)>,
    pub step: u64,
}

const PARAM_PREFIX: &str = "p.";
const MOMENT1_PREFIX: &str = "m.";
const MOMENT2_PREFIX: &str = "v.";

/// Saves parameters (and optionally optimizer moments) as a JSON header +
/// contiguous f32 blob: 8-byte LE header length, header, blob.
pub fn save_checkpoint(
    path: &Path,
    config: &Config,
    params: &Params,
    moments: Option<(&Params, &Params)>,
    step: u64,
) -> Result<()> {
    let mut index = Vec::new();
    let mut blob = Vec::new();
    let mut push = |prefix: &str, table: &Params| {
        for (name, t) in table.iter() {
            index.push(IndexEntry {
                name: format!("{}{}", prefix, name),
                rows: t.rows() as u32,
                cols: t.cols() as u32,
                offset: blob.len() as u64,
            });
            blob.extend_from_slice(&tensor_bytes(t));
        }
    };
    push(PARAM_PREFIX, params);
    if let Some((m, v)) = moments {
        push(MOMENT1_PREFIX, m);
        push(MOMENT2_PREFIX, v);
    }
    let header = CheckpointHeader {
        format_version: CHECKPOINT_VERSION,
        config: config.clone(),
        step,
        index,
    };
    let header_json = serde_json::to_vec(&header)
        .map_err(|e| Error::Checkpoint(format!("cannot encode header: {}", e)))?;
    let mut buf = Vec::with_capacity(8 + header_json.len() + blob.len());
    buf.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header_json);
    buf.extend_from_slice(&blob);
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<CheckpointData> {
    let bytes = fs::read(path)?;
    if bytes.len() < 8 {
        return Err(format_err(path, bytes.len() as u64, "missing header length"));
    }
    let header_len = u64::from_le_bytes(bytes[0..8].try_into().unwrap()) as usize;
    if bytes.len() < 8 + header_len {
        return Err(format_err(path, 8, "header truncated"));
    }
    let header: CheckpointHeader = serde_json::from_slice(&bytes[8..8 + header_len])
        .map_err(|e| format_err(path, 8, format!("bad header JSON: {}", e)))?;
    if header.format_version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unknown checkpoint format_version {}, expected {}",
            header.format_version, CHECKPOINT_VERSION
        )));
    }
    let blob = &bytes[8 + header_len..];

    let mut tables: BTreeMap<&str, Params> = BTreeMap::new();
    let mut expected_offset = 0u64;
    for e in &header.index {
        if e.offset != expected_offset {
            return Err(format_err(
                path,
                8 + header_len as u64 + e.offset,
                format!("index entry '{}' not contiguous", e.name),
            ));
        }
        let n_bytes = 4 * (e.rows as usize) * (e.cols as usize);
        let start = e.offset as usize;
        if start + n_bytes > blob.len() {
            return Err(format_err(
                path,
                8 + header_len as u64 + e.offset,
                format!("blob truncated reading '{}'", e.name),
            ));
        }
        expected_offset += n_bytes as u64;
        let t = tensor_from_bytes(e.rows as usize, e.cols as usize, &blob[start..start + n_bytes]);
        let (prefix, bare) = e
            .name
            .split_at_checked(2)
            .ok_or_else(|| Error::Checkpoint(format!("malformed index name '{}'", e.name)))?;
        tables
            .entry(match prefix {
                "p." => "p",
                "m." => "m",
                "v." => "v",
                _ => {
                    return Err(Error::Checkpoint(format!(
                        "unknown index prefix in '{}'",
                        e.name
                    )))
                }
            })
            .or_default()
            .insert(bare, t);
    }
    if expected_offset != blob.len() as u64 {
        return Err(format_err(
            path,
            8 + header_len as u64 + expected_offset,
            format!(
                "blob has {} trailing bytes",
                blob.len() as u64 - expected_offset
            ),
        ));
    }
    let params = tables.remove("p").unwrap_or_default();
    let moments = match (tables.remove("m"), tables.remove("v")) {
        (Some(m), Some(v)) => Some((m, v)),
        (None, None) => None,
        _ => {
            return Err(Error::Checkpoint(
                "checkpoint has one Adam moment table but not the other".into(),
            ))
        }
    };
    Ok(CheckpointData {
        config: header.config,
        params,
        moments,
        step: header.step,
    })
}

/// Arithmetic mean of the parameter tables of several checkpoints.
/// Names and shapes must agree across all of them.
pub fn average_checkpoints(paths: &[PathBuf]) -> Result<Params> {
    if paths.is_empty() {
        return Err(Error::Checkpoint("no checkpoints to average".into()));
    }
    let first = load_checkpoint(&paths[0])?.params;
    let mut sums: BTreeMap<String, Tensor2D> = first
        .iter()
        .map(|(n, t)| (n.clone(), t.clone()))
        .collect();
    for p in &paths[1..] {
        let next = load_checkpoint(p)?.params;
        if next.len() != sums.len() {
            return Err(Error::Checkpoint(format!(
                "{} has {} parameters, expected {}",
                p.display(),
                next.len(),
                sums.len()
            )));
        }
        for (name, t) in next.iter() {
            let acc = sums.get_mut(name).ok_or_else(|| {
                Error::Checkpoint(format!("{} missing parameter '{}'", p.display(), name))
            })?;
            if acc.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter '{}' shape {:?} vs {:?}",
                    name,
                    acc.shape(),
                    t.shape()
                )));
            }
            acc.add_assign(t);
        }
    }
    let n = paths.len() as f64;
    let mut out = Params::new();
    for (name, t) in sums {
        out.insert(name, t.scale(1.0 / n));
    }
    Ok(out)
}
