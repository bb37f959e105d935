//! On-disk cache of intersection graphs.
//!
//! Each entry is keyed by the scene path and the graph parameters. The
//! metadata records the input's modification time, length and SHA-256: a
//! matching time and length is trusted as is, anything else is re-hashed.
//! The graph file carries its own hash so truncation or edits are caught.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::UNIX_EPOCH;

use anyhow::{Context, Result};
use log::{info, warn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use splatdeform::graph::{OffsetSampling, SplatGraph};
use splatdeform::pipeline::{scene_graph, PipelineConfig};
use splatdeform::SplatSet;

const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CacheStatus {
    Hit,
    Miss,
    /// The entry existed but failed validation.
    Rebuilt,
    Disabled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Meta {
    version: u32,
    input: PathBuf,
    input_mtime_ns: u128,
    input_len: u64,
    input_sha256: String,
    epsilon_factor: f64,
    sampling: OffsetSampling,
    graph_sha256: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn file_stamp(path: &Path) -> Result<(u128, u64)> {
    let md = fs::metadata(path).with_context(|| format!("reading metadata of {}", path.display()))?;
    let mtime = md.modified()?.duration_since(UNIX_EPOCH).map(|d| d.as_nanos()).unwrap_or(0);
    Ok((mtime, md.len()))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).with_context(|| format!("creating {}", tmp.display()))?;
    f.write_all(bytes)?;
    f.sync_all()?;
    fs::rename(&tmp, path).with_context(|| format!("renaming {}", tmp.display()))?;
    Ok(())
}

pub struct GraphCache {
    dir: Option<PathBuf>,
}

impl GraphCache {
    pub fn new(dir: PathBuf) -> Self {
        GraphCache { dir: Some(dir) }
    }

    pub fn disabled() -> Self {
        GraphCache { dir: None }
    }

    /// Paths of the graph and metadata files for `input`.
    pub fn entry(&self, input: &Path, config: &PipelineConfig) -> Option<(PathBuf, PathBuf)> {
        let dir = self.dir.as_ref()?;
        let canonical = fs::canonicalize(input).unwrap_or_else(|_| input.to_path_buf());
        let params = serde_json::to_string(&(config.epsilon_factor, config.sampling)).expect("plain data");
        let key = sha256_hex(format!("{}\n{params}", canonical.display()).as_bytes());
        let stem = format!("graph-{}", &key[..16]);
        Some((dir.join(format!("{stem}.txt")), dir.join(format!("{stem}.json"))))
    }

    /// Returns the cached graph for `input` or builds and stores it.
    pub fn load_or_build(&self, input: &Path, splats: &SplatSet, config: &PipelineConfig) -> Result<(SplatGraph, CacheStatus)> {
        let Some((graph_path, meta_path)) = self.entry(input, config) else {
            return Ok((scene_graph(splats, config)?, CacheStatus::Disabled));
        };
        let status = match self.lookup(input, &graph_path, &meta_path, splats.len(), config) {
            Lookup::Hit(g) => {
                info!("graph cache hit: {}", graph_path.display());
                return Ok((g, CacheStatus::Hit));
            }
            Lookup::Missing => CacheStatus::Miss,
            Lookup::Stale(reason) => {
                info!("graph cache stale ({reason}), rebuilding");
                CacheStatus::Miss
            }
            Lookup::Corrupt(reason) => {
                warn!("graph cache entry {} is corrupt ({reason}); rebuilding", graph_path.display());
                CacheStatus::Rebuilt
            }
        };
        let graph = scene_graph(splats, config)?;
        self.store(input, &graph_path, &meta_path, &graph, config)?;
        Ok((graph, status))
    }

    fn lookup(&self, input: &Path, graph_path: &Path, meta_path: &Path, nodes: usize, config: &PipelineConfig) -> Lookup {
        let Ok(meta_text) = fs::read_to_string(meta_path) else {
            return Lookup::Missing;
        };
        let meta: Meta = match serde_json::from_str(&meta_text) {
            Ok(m) => m,
            Err(e) => return Lookup::Corrupt(format!("metadata: {e}")),
        };
        if meta.version != VERSION || meta.epsilon_factor != config.epsilon_factor || meta.sampling != config.sampling {
            return Lookup::Stale("parameters changed".into());
        }
        let Ok((mtime, len)) = file_stamp(input) else {
            return Lookup::Stale("input unreadable".into());
        };
        if mtime != meta.input_mtime_ns || len != meta.input_len {
            let Ok(bytes) = fs::read(input) else {
                return Lookup::Stale("input unreadable".into());
            };
            if sha256_hex(&bytes) != meta.input_sha256 {
                return Lookup::Stale("input changed".into());
            }
            // same content under a new timestamp: refresh the stamp
            let refreshed = Meta { input_mtime_ns: mtime, input_len: len, ..meta.clone() };
            if let Ok(text) = serde_json::to_string_pretty(&refreshed) {
                let _ = write_atomic(meta_path, text.as_bytes());
            }
        }
        let bytes = match fs::read(graph_path) {
            Ok(b) => b,
            Err(e) => return Lookup::Corrupt(format!("graph file: {e}")),
        };
        if sha256_hex(&bytes) != meta.graph_sha256 {
            return Lookup::Corrupt("graph checksum mismatch".into());
        }
        match SplatGraph::read_text(bytes.as_slice()) {
            Ok(g) if g.node_count() == nodes => Lookup::Hit(g),
            Ok(g) => Lookup::Corrupt(format!("graph has {} nodes, scene has {nodes}", g.node_count())),
            Err(e) => Lookup::Corrupt(e.to_string()),
        }
    }

    fn store(&self, input: &Path, graph_path: &Path, meta_path: &Path, graph: &SplatGraph, config: &PipelineConfig) -> Result<()> {
        if let Some(dir) = graph_path.parent() {
            fs::create_dir_all(dir).with_context(|| format!("creating cache directory {}", dir.display()))?;
        }
        let mut text = Vec::new();
        graph.write_text(&mut text)?;
        let (mtime, len) = file_stamp(input)?;
        let meta = Meta {
            version: VERSION,
            input: input.to_path_buf(),
            input_mtime_ns: mtime,
            input_len: len,
            input_sha256: sha256_hex(&fs::read(input)?),
            epsilon_factor: config.epsilon_factor,
            sampling: config.sampling,
            graph_sha256: sha256_hex(&text),
        };
        write_atomic(graph_path, &text)?;
        write_atomic(meta_path, serde_json::to_string_pretty(&meta)?.as_bytes())?;
        Ok(())
    }
}

enum Lookup {
    Hit(SplatGraph),
    Missing,
    Stale(String),
    Corrupt(String),
}
