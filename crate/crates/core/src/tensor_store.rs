//! On-disk exchange format for per-head query/key tensors and run manifests.
//!
//! A tensor file is a single UTF-8 JSON header line followed immediately by
//! the raw little-endian row-major payload:
//!
//! ```text
//! {"dtype":"f32","shape":[T,d],"layout":"row_major","endian":"little"}\n<payload>
//! ```
//!
//! A run directory holds `manifest.json` at its root and one `q.bin`/`k.bin`
//! pair per head under `layer_{L}/head_{H}/`.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::matrix::Matrix;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("malformed tensor header: {0}")]
    MalformedHeader(String),
    #[error("payload holds {actual} bytes but shape {shape:?} needs {expected}")]
    ShapeMismatch {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("unsupported dtype `{0}`")]
    UnsupportedDtype(String),
    #[error("invalid manifest: {0}")]
    InvalidManifest(String),
    #[error("layer {layer} head {head}: missing file {path}")]
    MissingFile {
        layer: usize,
        head: usize,
        path: PathBuf,
    },
    #[error(
        "layer {layer} head {head}: tensor {path} has shape {actual:?}, expected {expected:?}"
    )]
    InconsistentShape {
        layer: usize,
        head: usize,
        path: PathBuf,
        expected: [usize; 2],
        actual: Vec<usize>,
    },
    #[error("layer {layer} head {head} is not part of this run")]
    UnknownHead { layer: usize, head: usize },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TensorError + '_ {
    move |source| TensorError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F16,
}

impl Dtype {
    pub fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F16 => 2,
        }
    }

    fn tag(self) -> &'static str {
        match self {
            Dtype::F32 => "f32",
            Dtype::F16 => "f16",
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct RawHeader {
    dtype: String,
    shape: Vec<usize>,
    layout: String,
    endian: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorHeader {
    pub dtype: Dtype,
    pub shape: Vec<usize>,
}

impl TensorHeader {
    pub fn payload_len(&self) -> Option<usize> {
        self.shape
            .iter()
            .try_fold(self.dtype.width(), |acc, &n| acc.checked_mul(n))
    }

    fn parse(line: &[u8]) -> Result<Self, TensorError> {
        let raw: RawHeader = serde_json::from_slice(line)
            .map_err(|e| TensorError::MalformedHeader(e.to_string()))?;
        if raw.layout != "row_major" {
            return Err(TensorError::MalformedHeader(format!(
                "layout `{}` (only row_major)",
                raw.layout
            )));
        }
        if raw.endian != "little" {
            return Err(TensorError::MalformedHeader(format!(
                "endian `{}` (only little)",
                raw.endian
            )));
        }
        let dtype = match raw.dtype.as_str() {
            "f32" => Dtype::F32,
            "f16" => Dtype::F16,
            other => return Err(TensorError::UnsupportedDtype(other.to_string())),
        };
        Ok(Self {
            dtype,
            shape: raw.shape,
        })
    }

    fn to_line(&self) -> String {
        let raw = RawHeader {
            dtype: self.dtype.tag().to_string(),
            shape: self.shape.clone(),
            layout: "row_major".to_string(),
            endian: "little".to_string(),
        };
        let mut line = serde_json::to_string(&raw).expect("header serializes");
        line.push('\n');
        line
    }
}

fn split_header(bytes: &[u8]) -> Result<(TensorHeader, &[u8]), TensorError> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| TensorError::MalformedHeader("no newline after header".into()))?;
    Ok((TensorHeader::parse(&bytes[..nl])?, &bytes[nl + 1..]))
}

/// Decodes an in-memory tensor file into a rank-2 matrix. `f16` payloads are
/// widened to `f32`.
pub fn decode_tensor(bytes: &[u8]) -> Result<Matrix, TensorError> {
    let (header, payload) = split_header(bytes)?;
    let [rows, cols] = header.shape[..] else {
        return Err(TensorError::MalformedHeader(format!(
            "expected rank 2, got shape {:?}",
            header.shape
        )));
    };
    let expected = header
        .payload_len()
        .ok_or_else(|| TensorError::MalformedHeader("shape overflows".into()))?;
    if payload.len() != expected {
        return Err(TensorError::ShapeMismatch {
            shape: header.shape,
            expected,
            actual: payload.len(),
        });
    }
    let data: Vec<f32> = match header.dtype {
        Dtype::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect(),
        Dtype::F16 => payload
            .chunks_exact(2)
            .map(|c| half::f16::from_le_bytes([c[0], c[1]]).to_f32())
            .collect(),
    };
    Ok(Matrix::from_vec(rows, cols, data).expect("length checked against header"))
}

/// Encodes a matrix as an `f32` tensor file.
pub fn encode_tensor(m: &Matrix) -> Vec<u8> {
    let header = TensorHeader {
        dtype: Dtype::F32,
        shape: m.shape().to_vec(),
    };
    let line = header.to_line();
    let mut out = Vec::with_capacity(line.len() + m.as_slice().len() * 4);
    out.extend_from_slice(line.as_bytes());
    for x in m.as_slice() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Matrix, TensorError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode_tensor(&bytes)
}

pub fn write_tensor(path: impl AsRef<Path>, m: &Matrix) -> Result<(), TensorError> {
    let path = path.as_ref();
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    let mut f = File::create(path).map_err(io_err(path))?;
    f.write_all(&encode_tensor(m)).map_err(io_err(path))
}

/// Reads only the header line and reports the payload byte count from the
/// file length, without loading the payload.
pub fn read_header(path: impl AsRef<Path>) -> Result<(TensorHeader, u64), TensorError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(io_err(path))?;
    let total = file.metadata().map_err(io_err(path))?.len();
    let mut reader = BufReader::new(file);
    let mut line = Vec::new();
    // Headers are short; cap the read so a headerless binary blob fails fast.
    (&mut reader)
        .take(64 * 1024)
        .read_until(b'\n', &mut line)
        .map_err(io_err(path))?;
    if line.last() != Some(&b'\n') {
        return Err(TensorError::MalformedHeader(
            "no newline after header".into(),
        ));
    }
    let header = TensorHeader::parse(&line[..line.len() - 1])?;
    Ok((header, total - line.len() as u64))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadFiles {
    pub layer: usize,
    pub head: usize,
    pub q: PathBuf,
    pub k: PathBuf,
}

/// Metadata for one exported run. Serialized as `manifest.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub model: String,
    pub num_layers: usize,
    pub num_heads: usize,
    #[serde(rename = "T")]
    pub t: usize,
    pub d: usize,
    pub b_q: usize,
    pub b_k: usize,
    pub l_d: usize,
    pub files: Vec<HeadFiles>,
    #[serde(default)]
    pub reference_tokens: Option<Vec<i64>>,
    #[serde(default)]
    pub needle_span: Option<(usize, usize)>,
}

impl RunManifest {
    /// Conventional relative paths for a head's tensors.
    pub fn default_paths(layer: usize, head: usize) -> (PathBuf, PathBuf) {
        let dir = PathBuf::from(format!("layer_{layer}")).join(format!("head_{head}"));
        (dir.join("q.bin"), dir.join("k.bin"))
    }

    /// File map covering every (layer, head) with the conventional paths.
    pub fn default_files(num_layers: usize, num_heads: usize) -> Vec<HeadFiles> {
        (0..num_layers)
            .flat_map(|layer| {
                (0..num_heads).map(move |head| {
                    let (q, k) = Self::default_paths(layer, head);
                    HeadFiles { layer, head, q, k }
                })
            })
            .collect()
    }

    fn validate(&self) -> Result<BTreeMap<(usize, usize), HeadFiles>, TensorError> {
        let bad = |msg: String| Err(TensorError::InvalidManifest(msg));
        if self.t == 0 {
            return bad("T must be >= 1".into());
        }
        if self.d == 0 {
            return bad("d must be >= 1".into());
        }
        if self.b_q == 0 || self.b_k == 0 {
            return bad("block sizes must be >= 1".into());
        }
        if self.l_d >= self.num_layers {
            return bad(format!(
                "l_d = {} must be below num_layers = {}",
                self.l_d, self.num_layers
            ));
        }
        let mut index = BTreeMap::new();
        for entry in &self.files {
            if entry.layer >= self.num_layers || entry.head >= self.num_heads {
                return bad(format!(
                    "file entry for layer {} head {} is out of range",
                    entry.layer, entry.head
                ));
            }
            if index
                .insert((entry.layer, entry.head), entry.clone())
                .is_some()
            {
                return bad(format!(
                    "duplicate file entry for layer {} head {}",
                    entry.layer, entry.head
                ));
            }
        }
        for layer in 0..self.num_layers {
            for head in 0..self.num_heads {
                if !index.contains_key(&(layer, head)) {
                    return bad(format!("no file entry for layer {layer} head {head}"));
                }
            }
        }
        Ok(index)
    }
}

/// One head's query and key tensors.
#[derive(Debug, Clone)]
pub struct AttentionInputs {
    pub layer: usize,
    pub head: usize,
    pub q: Matrix,
    pub k: Matrix,
}

/// A validated run directory. Tensors are read on demand, one head at a time.
#[derive(Debug, Clone)]
pub struct Run {
    root: PathBuf,
    manifest: RunManifest,
    index: BTreeMap<(usize, usize), HeadFiles>,
}

/// Loads and validates a run. `path` may be the run directory or its
/// `manifest.json`. Every referenced tensor is checked for presence and a
/// `[T, d]` header; payloads are not read.
pub fn load_run(path: impl AsRef<Path>) -> Result<Run, TensorError> {
    let path = path.as_ref();
    let (root, manifest_path) = if path.is_dir() {
        (path.to_path_buf(), path.join(MANIFEST_FILE))
    } else {
        let root = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        (root, path.to_path_buf())
    };
    let text = fs::read_to_string(&manifest_path).map_err(io_err(&manifest_path))?;
    let manifest: RunManifest =
        serde_json::from_str(&text).map_err(|e| TensorError::InvalidManifest(e.to_string()))?;
    let index = manifest.validate()?;
    let expected = [manifest.t, manifest.d];
    for entry in index.values() {
        for rel in [&entry.q, &entry.k] {
            let full = root.join(rel);
            if !full.is_file() {
                return Err(TensorError::MissingFile {
                    layer: entry.layer,
                    head: entry.head,
                    path: full,
                });
            }
            let (header, payload) = read_header(&full)?;
            if header.shape != expected {
                return Err(TensorError::InconsistentShape {
                    layer: entry.layer,
                    head: entry.head,
                    path: full,
                    expected,
                    actual: header.shape,
                });
            }
            let needed = header.payload_len().unwrap_or(usize::MAX) as u64;
            if payload != needed {
                return Err(TensorError::ShapeMismatch {
                    shape: header.shape,
                    expected: needed as usize,
                    actual: payload as usize,
                });
            }
        }
    }
    Ok(Run {
        root,
        manifest,
        index,
    })
}

impl Run {
    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> &RunManifest {
        &self.manifest
    }

    /// All (layer, head) pairs in ascending order.
    pub fn heads(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.index.keys().copied()
    }

    pub fn inputs(&self, layer: usize, head: usize) -> Result<AttentionInputs, TensorError> {
        let entry = self
            .index
            .get(&(layer, head))
            .ok_or(TensorError::UnknownHead { layer, head })?;
        let load = |rel: &Path| -> Result<Matrix, TensorError> {
            let full = self.root.join(rel);
            let m = read_tensor(&full)?;
            if m.shape() != [self.manifest.t, self.manifest.d] {
                return Err(TensorError::InconsistentShape {
                    layer,
                    head,
                    path: full,
                    expected: [self.manifest.t, self.manifest.d],
                    actual: m.shape().to_vec(),
                });
            }
            Ok(m)
        };
        Ok(AttentionInputs {
            layer,
            head,
            q: load(&entry.q)?,
            k: load(&entry.k)?,
        })
    }
}

/// Writes a manifest and its tensors under `root`. `tensors` is called once
/// per file entry and returns that head's (Q, K).
pub fn write_run(
    root: impl AsRef<Path>,
    manifest: &RunManifest,
    mut tensors: impl FnMut(usize, usize) -> (Matrix, Matrix),
) -> Result<(), TensorError> {
    let root = root.as_ref();
    fs::create_dir_all(root).map_err(io_err(root))?;
    for entry in &manifest.files {
        let (q, k) = tensors(entry.layer, entry.head);
        write_tensor(root.join(&entry.q), &q)?;
        write_tensor(root.join(&entry.k), &k)?;
    }
    let path = root.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    fs::write(&path, text).map_err(io_err(&path))
}
