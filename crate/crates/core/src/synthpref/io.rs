//! JSONL dataset files: a `meta` header line followed by one annotator per line.
//!
//! A dataset on disk is a directory holding `train.jsonl` and `eval.jsonl`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AnnotatorSample, Dataset};
use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub embedding_dim: usize,
    pub n_types: usize,
    pub schema: u32,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    meta: DatasetMeta,
}

pub fn save_split(path: &Path, meta: DatasetMeta, samples: &[AnnotatorSample]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut put = |line: String| writeln!(w, "{line}").map_err(|e| Error::io(path, e));
    put(serde_json::to_string(&Header { meta }).expect("header serializes"))?;
    for s in samples {
        put(serde_json::to_string(s).expect("sample serializes"))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads one split. Line numbers in errors are 1-based and count the header.
pub fn load_split(path: &Path) -> Result<(DatasetMeta, Vec<AnnotatorSample>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut meta: Option<DatasetMeta> = None;
    let mut samples = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let Some(m) = meta else {
            let h: Header = serde_json::from_str(&line).map_err(|e| Error::Parse {
                line: lineno,
                msg: format!("expected meta header: {e}"),
            })?;
            if h.meta.schema != SCHEMA_VERSION {
                return Err(Error::Parse {
                    line: lineno,
                    msg: format!("unsupported schema {}", h.meta.schema),
                });
            }
            meta = Some(h.meta);
            continue;
        };
        let s: AnnotatorSample = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: lineno,
            msg: e.to_string(),
        })?;
        if s.pairs.is_empty() {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("user {} has no pairs", s.user_id),
            });
        }
        for (k, p) in s.pairs.iter().enumerate() {
            if p.e_w.len() != m.embedding_dim || p.e_l.len() != m.embedding_dim {
                return Err(Error::Parse {
                    line: lineno,
                    msg: format!(
                        "pair {k}: embedding dim {}/{} does not match header {}",
                        p.e_w.len(),
                        p.e_l.len(),
                        m.embedding_dim
                    ),
                });
            }
        }
        samples.push(s);
    }
    let meta = meta.ok_or(Error::NoSamples)?;
    if samples.is_empty() {
        return Err(Error::NoSamples);
    }
    Ok((meta, samples))
}

pub fn save_dataset(dir: &Path, ds: &Dataset) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let meta = DatasetMeta {
        embedding_dim: ds.embedding_dim,
        n_types: ds.n_types,
        schema: SCHEMA_VERSION,
    };
    save_split(&dir.join("train.jsonl"), meta, &ds.train)?;
    save_split(&dir.join("eval.jsonl"), meta, &ds.eval)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let (mt, train) = load_split(&dir.join("train.jsonl"))?;
    let (me, eval) = load_split(&dir.join("eval.jsonl"))?;
    if mt != me {
        return Err(Error::config(format!(
            "train and eval headers disagree: {mt:?} vs {me:?}"
        )));
    }
    let ds = Dataset {
        train,
        eval,
        embedding_dim: mt.embedding_dim,
        n_types: mt.n_types,
    };
    ds.validate()?;
    Ok(ds)
}
