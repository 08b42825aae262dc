use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use rayon::prelude::*;
use stream_trace::flow::MaskSet;
use stream_trace::oracle::DEFAULT_MAX_DENSE_T;
use stream_trace::tensor_store::{load_run, Run, MANIFEST_FILE};
use stream_trace::SparseBlockMask;

pub const USAGE: u8 = 2;
pub const DATA: u8 = 3;
pub const EVALUATOR: u8 = 4;

/// An error carrying the process exit code it should map to.
#[derive(Debug)]
pub struct Coded {
    pub code: u8,
    pub inner: anyhow::Error,
}

impl fmt::Display for Coded {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#}", self.inner)
    }
}

impl std::error::Error for Coded {}

pub trait WithCode<T> {
    fn code(self, code: u8) -> anyhow::Result<T>;
}

impl<T, E: Into<anyhow::Error>> WithCode<T> for Result<T, E> {
    fn code(self, code: u8) -> anyhow::Result<T> {
        self.map_err(|e| coded(code, e.into()))
    }
}

pub fn coded(code: u8, inner: anyhow::Error) -> anyhow::Error {
    anyhow::Error::new(Coded { code, inner })
}

pub fn usage(msg: impl fmt::Display) -> anyhow::Error {
    coded(USAGE, anyhow!("{msg}"))
}

pub fn exit_code(err: &anyhow::Error) -> u8 {
    err.downcast_ref::<Coded>().map(|c| c.code).unwrap_or(DATA)
}

/// Loads a run directory. A missing directory or manifest is a usage error;
/// anything wrong inside an existing run is a data error.
pub fn open_run(path: &Path) -> anyhow::Result<Run> {
    let manifest = if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    };
    if !manifest.is_file() {
        return Err(usage(format!("no run manifest at {}", manifest.display())));
    }
    load_run(path)
        .with_context(|| format!("loading run {}", path.display()))
        .code(DATA)
}

/// Dense guard: the explicit flag wins, then `STREAM_MAX_DENSE_T`.
pub fn dense_guard(flag: Option<usize>) -> anyhow::Result<usize> {
    if let Some(t) = flag {
        return Ok(t);
    }
    match std::env::var("STREAM_MAX_DENSE_T") {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| usage(format!("STREAM_MAX_DENSE_T is not a count: {v:?}"))),
        Err(_) => Ok(DEFAULT_MAX_DENSE_T),
    }
}

/// Heads of the run restricted to the requested layers and heads.
pub fn select_heads(
    run: &Run,
    layers: &Option<IndexList>,
    heads: &Option<IndexList>,
) -> anyhow::Result<Vec<(usize, usize)>> {
    let keep = |set: &Option<IndexList>, x: usize| set.as_ref().is_none_or(|s| s.0.contains(&x));
    let out: Vec<_> = run
        .heads()
        .filter(|&(l, h)| keep(layers, l) && keep(heads, h))
        .collect();
    if out.is_empty() {
        return Err(usage(
            "no (layer, head) in the run matches --layers/--heads",
        ));
    }
    Ok(out)
}

pub fn pool(jobs: usize) -> anyhow::Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .context("building worker pool")
}

/// Runs `f` for every head on the pool; results keep the input order.
pub fn per_head<T: Send>(
    pool: &rayon::ThreadPool,
    heads: &[(usize, usize)],
    f: impl Fn(usize, usize) -> anyhow::Result<T> + Sync,
) -> anyhow::Result<Vec<T>> {
    pool.install(|| {
        heads
            .par_iter()
            .map(|&(l, h)| f(l, h).with_context(|| format!("layer {l} head {h}")))
            .collect()
    })
}

/// Writes `contents` next to `path` and renames it into place.
pub fn write_atomic(path: &Path, contents: &[u8]) -> anyhow::Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)
        .with_context(|| format!("creating temp file in {}", dir.display()))?;
    tmp.write_all(contents)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path)
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn mask_file_name(layer: usize, head: usize) -> String {
    format!("layer_{layer}_head_{head}.json")
}

fn parse_mask_file_name(name: &str) -> Option<(usize, usize)> {
    let rest = name.strip_prefix("layer_")?.strip_suffix(".json")?;
    let (l, h) = rest.split_once("_head_")?;
    Some((l.parse().ok()?, h.parse().ok()?))
}

pub fn read_mask(path: &Path) -> anyhow::Result<SparseBlockMask> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    SparseBlockMask::from_json(&text).with_context(|| format!("parsing {}", path.display()))
}

/// Every `layer_{L}_head_{H}.json` mask in `dir`.
pub fn read_mask_dir(dir: &Path) -> anyhow::Result<MaskSet> {
    let entries = fs::read_dir(dir)
        .with_context(|| format!("reading mask directory {}", dir.display()))
        .code(USAGE)?;
    let mut files: Vec<(usize, usize, PathBuf)> = Vec::new();
    for entry in entries {
        let path = entry?.path();
        if let Some(key) = path
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(parse_mask_file_name)
        {
            files.push((key.0, key.1, path));
        }
    }
    if files.is_empty() {
        return Err(usage(format!("no mask files in {}", dir.display())));
    }
    let mut out = MaskSet::new();
    for (l, h, path) in files {
        out.insert((l, h), read_mask(&path).code(DATA)?);
    }
    Ok(out)
}

/// Sorted, deduplicated indices parsed from `0,2-5`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexList(pub Vec<usize>);

pub fn parse_list(s: &str) -> Result<IndexList, String> {
    let mut out = BTreeSet::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        match part.split_once('-') {
            Some((a, b)) => {
                let a: usize = a.parse().map_err(|_| format!("bad range {part:?}"))?;
                let b: usize = b.parse().map_err(|_| format!("bad range {part:?}"))?;
                out.extend(a..=b);
            }
            None => {
                out.insert(part.parse().map_err(|_| format!("bad index {part:?}"))?);
            }
        }
    }
    Ok(IndexList(out.into_iter().collect()))
}
