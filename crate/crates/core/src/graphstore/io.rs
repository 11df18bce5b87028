//! On-disk graph directory:
//!
//! ```text
//! meta.json     {"name", "num_nodes", "feature_dim", "has_labels"}
//! edges.tsv     "u<TAB>v" per line, 0-based, either orientation
//! features.bin  row-major little-endian f32, num_nodes × feature_dim
//! labels.tsv    optional, one 0/1 per line
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{AttributedGraph, Csr};
use crate::diffkernel::Matrix;
use crate::error::{Error, Result};

pub const META_FILE: &str = "meta.json";
pub const EDGES_FILE: &str = "edges.tsv";
pub const FEATURES_FILE: &str = "features.bin";
pub const LABELS_FILE: &str = "labels.tsv";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    name: String,
    num_nodes: usize,
    feature_dim: usize,
    has_labels: bool,
}

fn read_required(path: &Path) -> Result<Vec<u8>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    String::from_utf8(read_required(path)?)
        .map_err(|_| Error::Data(format!("{} is not valid UTF-8", path.display())))
}

/// Row-major little-endian `f32` encoding used by `features.bin`.
pub fn encode_f32(m: &Matrix) -> Vec<u8> {
    let mut bytes = Vec::with_capacity(m.len() * 4);
    for &x in m.as_slice() {
        bytes.extend_from_slice(&(x as f32).to_le_bytes());
    }
    bytes
}

pub fn decode_f32(bytes: &[u8]) -> Vec<f64> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect()
}

pub fn load_graph(dir: impl AsRef<Path>) -> Result<AttributedGraph> {
    let dir = dir.as_ref();
    let meta: Meta = serde_json::from_str(&read_text(&dir.join(META_FILE))?)
        .map_err(|e| Error::Data(format!("{}: {e}", dir.join(META_FILE).display())))?;
    let n = meta.num_nodes;

    let edges_path = dir.join(EDGES_FILE);
    let mut edges = Vec::new();
    for (lineno, line) in read_text(&edges_path)?.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split('\t');
        let parse = |s: Option<&str>| -> Result<usize> {
            s.and_then(|s| s.trim().parse().ok()).ok_or_else(|| {
                Error::Data(format!(
                    "{}:{}: malformed edge line '{line}'",
                    edges_path.display(),
                    lineno + 1
                ))
            })
        };
        let u = parse(parts.next())?;
        let v = parse(parts.next())?;
        if parts.next().is_some() {
            return Err(Error::Data(format!(
                "{}:{}: expected two columns",
                edges_path.display(),
                lineno + 1
            )));
        }
        edges.push((u, v));
    }
    let (adjacency, self_loops) = Csr::from_edges(n, edges)?;
    if self_loops > 0 {
        log::warn!("{}: dropped {self_loops} self-loop(s)", edges_path.display());
    }

    let features_path = dir.join(FEATURES_FILE);
    let bytes = read_required(&features_path)?;
    let expected = n * meta.feature_dim * 4;
    if bytes.len() != expected {
        let detail = if bytes.len() % 4 == 0 && meta.feature_dim > 0 {
            format!(
                "feature row count mismatch: {} rows for {n} nodes",
                bytes.len() / 4 / meta.feature_dim
            )
        } else {
            format!("malformed binary length: {} bytes, expected {expected}", bytes.len())
        };
        return Err(Error::Data(format!("{}: {detail}", features_path.display())));
    }
    let features = Matrix::from_vec(n, meta.feature_dim, decode_f32(&bytes))?;

    let labels = if meta.has_labels {
        let labels_path = dir.join(LABELS_FILE);
        let mut labels = Vec::with_capacity(n);
        for line in read_text(&labels_path)?.lines() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            match line {
                "0" => labels.push(0),
                "1" => labels.push(1),
                _ => return Err(Error::Data("label value outside {0,1}".into())),
            }
        }
        Some(labels)
    } else {
        None
    };

    AttributedGraph::new(meta.name, adjacency, features, labels)
}

/// Writes `graph` as a graph directory, creating `dir` if needed.
pub fn save_graph(graph: &AttributedGraph, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let write = |name: &str, bytes: &[u8]| -> Result<PathBuf> {
        let path = dir.join(name);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    };

    let meta = Meta {
        name: graph.name.clone(),
        num_nodes: graph.num_nodes(),
        feature_dim: graph.feature_dim(),
        has_labels: graph.has_labels(),
    };
    write(META_FILE, serde_json::to_string_pretty(&meta)?.as_bytes())?;

    let mut edges = String::new();
    for (u, v) in graph.adjacency().undirected_edges() {
        edges.push_str(&format!("{u}\t{v}\n"));
    }
    write(EDGES_FILE, edges.as_bytes())?;

    write(FEATURES_FILE, &encode_f32(graph.features()))?;

    let labels_path = dir.join(LABELS_FILE);
    match graph.labels() {
        Some(labels) => {
            let text: String = labels.iter().map(|l| format!("{l}\n")).collect();
            write(LABELS_FILE, text.as_bytes())?;
        }
        None if labels_path.exists() => {
            fs::remove_file(&labels_path).map_err(|e| Error::io(&labels_path, e))?;
        }
        None => {}
    }
    Ok(())
}
