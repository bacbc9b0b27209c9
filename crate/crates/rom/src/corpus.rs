//! Scene-pair corpus files.
//!
//! A corpus is JSON Lines, one [`ScenePair`] per line tagged `"schema": 1`.
//! Visual features are either embedded in each record or stored in a sidecar
//! binary next to the corpus (`<corpus>.bin`): an 8-byte magic, a
//! little-endian `u64` header length, a JSON header declaring the shapes, and
//! little-endian `f32` rows, pair by pair, image 1 before image 2.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rom_core::scene::ScenePair;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CORPUS_SCHEMA: u32 = 1;
const SIDECAR_MAGIC: &[u8; 8] = b"ROMFEAT\0";
const SIDECAR_VERSION: u32 = 1;

/// Where visual features are written.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FeatureStorage {
    #[default]
    Embedded,
    Sidecar,
}

#[derive(Serialize)]
struct RecordOut<'a> {
    schema: u32,
    #[serde(flatten)]
    pair: &'a ScenePair,
    #[serde(skip_serializing_if = "Option::is_none")]
    sidecar: Option<SidecarRef>,
}

#[derive(Deserialize)]
struct RecordIn {
    schema: u32,
    #[serde(flatten)]
    pair: ScenePair,
    #[serde(default)]
    sidecar: Option<SidecarRef>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
struct SidecarRef {
    index: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct SidecarHeader {
    format: String,
    version: u32,
    dtype: String,
    d_viz: usize,
    /// `[M, N]` per pair.
    shapes: Vec<[usize; 2]>,
}

pub fn sidecar_path(corpus: &Path) -> PathBuf {
    let mut s = corpus.as_os_str().to_owned();
    s.push(".bin");
    PathBuf::from(s)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

pub(crate) fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::io(path, e))
}

/// Writes a JSON Lines file from serializable records.
pub(crate) fn write_jsonl<S: Serialize>(
    path: &Path,
    records: impl IntoIterator<Item = S>,
) -> Result<()> {
    let mut w = create(path)?;
    for r in records {
        serde_json::to_writer(&mut w, &r).map_err(|e| Error::json(path, e))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Parses every non-blank line of a JSON Lines file.
pub(crate) fn read_jsonl<D: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<D>> {
    let mut out = Vec::new();
    for (k, line) in open(path)?.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line)
            .map_err(|e| Error::format(path, format!("line {}: {e}", k + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_corpus(path: &Path, pairs: &[ScenePair], storage: FeatureStorage) -> Result<()> {
    match storage {
        FeatureStorage::Embedded => write_jsonl(
            path,
            pairs.iter().map(|pair| RecordOut {
                schema: CORPUS_SCHEMA,
                pair,
                sidecar: None,
            }),
        ),
        FeatureStorage::Sidecar => {
            write_sidecar(&sidecar_path(path), pairs)?;
            let stripped: Vec<ScenePair> = pairs
                .iter()
                .map(|p| ScenePair {
                    features1: Vec::new(),
                    features2: Vec::new(),
                    ..p.clone()
                })
                .collect();
            write_jsonl(
                path,
                stripped.iter().enumerate().map(|(index, pair)| RecordOut {
                    schema: CORPUS_SCHEMA,
                    pair,
                    sidecar: Some(SidecarRef { index }),
                }),
            )
        }
    }
}

fn feature_width(path: &Path, pairs: &[ScenePair]) -> Result<usize> {
    let mut rows = pairs
        .iter()
        .flat_map(|p| p.features1.iter().chain(&p.features2));
    let d = rows.next().map_or(0, Vec::len);
    if rows.any(|r| r.len() != d) {
        return Err(Error::format(path, "feature rows of different widths"));
    }
    Ok(d)
}

fn write_sidecar(path: &Path, pairs: &[ScenePair]) -> Result<()> {
    let header = SidecarHeader {
        format: "rom-features".into(),
        version: SIDECAR_VERSION,
        dtype: "f32le".into(),
        d_viz: feature_width(path, pairs)?,
        shapes: pairs
            .iter()
            .map(|p| [p.features1.len(), p.features2.len()])
            .collect(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::json(path, e))?;
    let mut w = create(path)?;
    let io = |e| Error::io(path, e);
    w.write_all(SIDECAR_MAGIC).map_err(io)?;
    w.write_all(&(json.len() as u64).to_le_bytes())
        .map_err(io)?;
    w.write_all(&json).map_err(io)?;
    for p in pairs {
        for row in p.features1.iter().chain(&p.features2) {
            for x in row {
                w.write_all(&x.to_le_bytes()).map_err(io)?;
            }
        }
    }
    w.flush().map_err(io)
}

/// Reads the length-prefixed JSON header that follows `magic`.
pub(crate) fn read_header<D: serde::de::DeserializeOwned>(
    path: &Path,
    r: &mut impl Read,
    magic: &[u8; 8],
) -> Result<D> {
    let mut m = [0u8; 8];
    r.read_exact(&mut m)
        .map_err(|_| Error::format(path, "file too short for header"))?;
    if &m != magic {
        return Err(Error::format(path, "bad magic bytes"));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)
        .map_err(|_| Error::format(path, "file too short for header"))?;
    let len = u64::from_le_bytes(len);
    if len > 1 << 32 {
        return Err(Error::format(
            path,
            format!("implausible header length {len}"),
        ));
    }
    let mut json = vec![0u8; len as usize];
    r.read_exact(&mut json)
        .map_err(|_| Error::format(path, "truncated header"))?;
    serde_json::from_slice(&json).map_err(|e| Error::format(path, format!("header: {e}")))
}

/// Reads exactly `count` little-endian floats and requires the end of file
/// right after them when `last` is set.
pub(crate) fn read_f32s(
    path: &Path,
    r: &mut impl Read,
    count: usize,
    last: bool,
) -> Result<Vec<f32>> {
    let mut bytes = vec![0u8; count * 4];
    r.read_exact(&mut bytes).map_err(|_| {
        Error::format(
            path,
            format!("truncated payload, expected {count} more floats"),
        )
    })?;
    if last {
        let mut probe = [0u8; 1];
        if r.read(&mut probe).map_err(|e| Error::io(path, e))? != 0 {
            return Err(Error::format(path, "trailing bytes after payload"));
        }
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

type FeatureRows = (Vec<Vec<f32>>, Vec<Vec<f32>>);

fn read_sidecar(path: &Path) -> Result<Vec<FeatureRows>> {
    let mut r = open(path)?;
    let h: SidecarHeader = read_header(path, &mut r, SIDECAR_MAGIC)?;
    if h.format != "rom-features" || h.dtype != "f32le" {
        return Err(Error::format(path, "not a rom-features f32le sidecar"));
    }
    if h.version != SIDECAR_VERSION {
        return Err(Error::format(
            path,
            format!("sidecar version {} (expected {SIDECAR_VERSION})", h.version),
        ));
    }
    let d = h.d_viz;
    let mut out = Vec::with_capacity(h.shapes.len());
    for (k, &[m, n]) in h.shapes.iter().enumerate() {
        let flat = read_f32s(path, &mut r, (m + n) * d, k + 1 == h.shapes.len())?;
        let mut rows: Vec<Vec<f32>> = if d == 0 {
            vec![Vec::new(); m + n]
        } else {
            flat.chunks_exact(d).map(<[f32]>::to_vec).collect()
        };
        let second = rows.split_off(m);
        out.push((rows, second));
    }
    Ok(out)
}

/// Reads a corpus, resolving sidecar features, and validates every pair.
pub fn read_corpus(path: &Path) -> Result<Vec<ScenePair>> {
    let records: Vec<RecordIn> = read_jsonl(path)?;
    let mut sidecar: Option<Vec<FeatureRows>> = None;
    let mut out = Vec::with_capacity(records.len());
    for (k, rec) in records.into_iter().enumerate() {
        if rec.schema != CORPUS_SCHEMA {
            return Err(Error::format(
                path,
                format!(
                    "record {}: schema {} (expected {CORPUS_SCHEMA})",
                    k + 1,
                    rec.schema
                ),
            ));
        }
        let mut pair = rec.pair;
        if let Some(SidecarRef { index }) = rec.sidecar {
            if sidecar.is_none() {
                sidecar = Some(read_sidecar(&sidecar_path(path))?);
            }
            let rows = sidecar.as_ref().and_then(|s| s.get(index)).ok_or_else(|| {
                Error::format(
                    path,
                    format!("record {}: sidecar index {index} out of range", k + 1),
                )
            })?;
            pair.features1 = rows.0.clone();
            pair.features2 = rows.1.clone();
        }
        pair.validate()
            .map_err(|e| Error::format(path, format!("record {}: {e}", k + 1)))?;
        out.push(pair);
    }
    Ok(out)
}
