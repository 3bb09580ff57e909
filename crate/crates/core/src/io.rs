//! Corpus files, embedding caches and atomic artifact writes.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| Error::io(path, std::io::Error::other("path has no file name")))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let write = || -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    /// Deterministic 80/10/10 assignment from the record id.
    pub fn from_id(id: &str) -> Split {
        let h = id
            .bytes()
            .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ u64::from(b)).wrapping_mul(0x100_0000_01b3));
        match h % 10 {
            8 => Split::Valid,
            9 => Split::Test,
            _ => Split::Train,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Text { query: String, code: String },
    Vectors { qvec: Vec<f64>, cvec: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusRecord {
    pub id: String,
    pub split: Split,
    pub payload: Payload,
}

impl CorpusRecord {
    pub fn text(id: impl Into<String>, split: Split, query: impl Into<String>, code: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            split,
            payload: Payload::Text {
                query: query.into(),
                code: code.into(),
            },
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    split: Option<Split>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    query: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    code: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    qvec: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    cvec: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Corpus {
    pub records: Vec<CorpusRecord>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn split(&self, split: Split) -> Vec<&CorpusRecord> {
        self.records.iter().filter(|r| r.split == split).collect()
    }

    pub fn stats(&self) -> SplitStats {
        let mut s = SplitStats::default();
        for r in &self.records {
            match r.split {
                Split::Train => s.train += 1,
                Split::Valid => s.valid += 1,
                Split::Test => s.test += 1,
            }
        }
        s
    }

    pub fn is_text(&self) -> bool {
        matches!(self.records.first().map(|r| &r.payload), Some(Payload::Text { .. }))
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            let mut raw = RawRecord {
                id: Some(r.id.clone()),
                split: Some(r.split),
                query: None,
                code: None,
                qvec: None,
                cvec: None,
            };
            match &r.payload {
                Payload::Text { query, code } => {
                    raw.query = Some(query.clone());
                    raw.code = Some(code.clone());
                }
                Payload::Vectors { qvec, cvec } => {
                    raw.qvec = Some(qvec.clone());
                    raw.cvec = Some(cvec.clone());
                }
            }
            out.push_str(&serde_json::to_string(&raw).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write(path, self.to_jsonl().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Corpus> {
        let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::parse(BufReader::new(f)).map_err(|e| match e {
            Error::Io { source, .. } => Error::io(path, source),
            other => other,
        })
    }

    pub fn parse(reader: impl BufRead) -> Result<Corpus> {
        let mut records = Vec::new();
        let mut seen = HashSet::new();
        let mut text_mode: Option<bool> = None;
        for (i, line) in reader.lines().enumerate() {
            let lineno = i + 1;
            let line = line.map_err(|e| Error::io("<corpus>", e))?;
            if line.trim().is_empty() {
                continue;
            }
            let raw: RawRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
                line: lineno,
                msg: e.to_string(),
            })?;
            let has_text = raw.query.is_some() || raw.code.is_some();
            let has_vec = raw.qvec.is_some() || raw.cvec.is_some();
            let payload = match (has_text, has_vec) {
                (true, true) => {
                    return Err(Error::Schema(format!(
                        "line {lineno}: record has both text and vector fields"
                    )))
                }
                (false, false) => {
                    return Err(Error::Schema(format!("line {lineno}: record has no payload")))
                }
                (true, false) => match (raw.query, raw.code) {
                    (Some(query), Some(code)) => Payload::Text { query, code },
                    _ => {
                        return Err(Error::Schema(format!(
                            "line {lineno}: text records need both \"query\" and \"code\""
                        )))
                    }
                },
                (false, true) => match (raw.qvec, raw.cvec) {
                    (Some(qvec), Some(cvec)) => {
                        if qvec.len() != cvec.len() || qvec.is_empty() {
                            return Err(Error::Schema(format!(
                                "line {lineno}: qvec and cvec must be nonempty and equally long"
                            )));
                        }
                        Payload::Vectors { qvec, cvec }
                    }
                    _ => {
                        return Err(Error::Schema(format!(
                            "line {lineno}: vector records need both \"qvec\" and \"cvec\""
                        )))
                    }
                },
            };
            match text_mode {
                None => text_mode = Some(has_text),
                Some(t) if t != has_text => {
                    return Err(Error::Schema(format!(
                        "line {lineno}: file mixes text and vector records"
                    )))
                }
                _ => {}
            }
            let id = raw.id.unwrap_or_else(|| format!("rec-{}", records.len()));
            if !seen.insert(id.clone()) {
                return Err(Error::Schema(format!("line {lineno}: duplicate id `{id}`")));
            }
            let split = raw.split.unwrap_or_else(|| Split::from_id(&id));
            records.push(CorpusRecord { id, split, payload });
        }
        if let Some(Payload::Vectors { qvec, .. }) = records.first().map(|r| &r.payload) {
            let dim = qvec.len();
            if records.iter().any(|r| matches!(&r.payload, Payload::Vectors { qvec, .. } if qvec.len() != dim)) {
                return Err(Error::Schema("vector records disagree on dimension".into()));
            }
        }
        Ok(Corpus { records })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SplitStats {
    pub train: usize,
    pub valid: usize,
    pub test: usize,
}

impl fmt::Display for SplitStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:>10} {:>10} {:>10} {:>10}", "Training", "Validation", "Test", "Codebase")?;
        write!(f, "{:>10} {:>10} {:>10} {:>10}", self.train, self.valid, self.test, self.test)
    }
}

pub const CACHE_MAGIC: &[u8; 4] = b"RAEC";
pub const CACHE_VERSION: u16 = 1;
const CACHE_HEADER: usize = 4 + 2 + 4 + 4;

/// Serializes a matrix as an embedding cache (f32 payload).
pub fn encode_embedding_cache(m: &Tensor) -> Result<Vec<u8>> {
    let count = u32::try_from(m.rows()).map_err(|_| Error::Format("row count exceeds u32".into()))?;
    let dim = u32::try_from(m.cols()).map_err(|_| Error::Format("dimension exceeds u32".into()))?;
    let mut buf = Vec::with_capacity(CACHE_HEADER + m.len() * 4);
    buf.extend_from_slice(CACHE_MAGIC);
    buf.extend_from_slice(&CACHE_VERSION.to_le_bytes());
    buf.extend_from_slice(&count.to_le_bytes());
    buf.extend_from_slice(&dim.to_le_bytes());
    for &v in m.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(buf)
}

pub fn decode_embedding_cache(buf: &[u8], expected_dim: Option<usize>) -> Result<Tensor> {
    if buf.len() < CACHE_HEADER {
        return Err(Error::Format("embedding cache shorter than its header".into()));
    }
    if &buf[..4] != CACHE_MAGIC {
        return Err(Error::Format(format!("bad cache magic {:?}", String::from_utf8_lossy(&buf[..4]))));
    }
    let version = u16::from_le_bytes([buf[4], buf[5]]);
    if version != CACHE_VERSION {
        return Err(Error::Format(format!("unsupported cache version {version}")));
    }
    let count = u32::from_le_bytes(buf[6..10].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(buf[10..14].try_into().unwrap()) as usize;
    if let Some(want) = expected_dim {
        if want != dim {
            return Err(Error::Format(format!("cache dimension {dim}, expected {want}")));
        }
    }
    let payload = count
        .checked_mul(dim)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::Format("count × dim overflows".into()))?;
    let body = &buf[CACHE_HEADER..];
    if body.len() != payload {
        return Err(Error::Format(format!(
            "cache payload is {} bytes, header implies {payload}",
            body.len()
        )));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
        .collect();
    Tensor::new(vec![count, dim], data)
}

pub fn write_embedding_cache(path: &Path, m: &Tensor) -> Result<()> {
    atomic_write(path, &encode_embedding_cache(m)?)
}

pub fn read_embedding_cache(path: &Path, expected_dim: Option<usize>) -> Result<Tensor> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_embedding_cache(&buf, expected_dim)
}
