//! Embedding datasets exchanged with the extractor.
//!
//! A dataset is two files that share a record count:
//!
//! - `*.mbic`: a 16-byte header (`b"MBIC"`, `u32` version, `u32` rows, `u32`
//!   columns, all little-endian) followed by `rows * columns` little-endian
//!   `f32` values in row-major order. Row `i` is the vector of record id `i`.
//! - `*.meta.jsonl`: one header line carrying the task, then one JSON object
//!   per record with the keys `id`, `fields`, `consolidated_text`, `label` and
//!   `perplexity_score`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"MBIC";
pub const FORMAT_VERSION: u32 = 1;
pub const HEADER_LEN: usize = 16;
pub const METADATA_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt embedding header: {0}")]
    CorruptHeader(String),
    #[error("unsupported embedding format version {0}")]
    UnsupportedVersion(u32),
    #[error("record count mismatch: embedding file has {embeddings}, metadata has {metadata}")]
    CountMismatch { embeddings: usize, metadata: usize },
    #[error("record {id}: expected {expected} values, found {found}")]
    DimensionMismatch { id: usize, expected: usize, found: usize },
    #[error("embedding payload has {0} trailing bytes")]
    TrailingBytes(usize),
    #[error("duplicate record id {id}")]
    DuplicateId { id: usize },
    #[error("record ids are not dense: id {id} is out of range 0..{n}")]
    IdOutOfRange { id: usize, n: usize },
    #[error("record {id}: vector contains a non-finite value")]
    NonFinite { id: usize },
    #[error("record {id}: label {label:?} is not valid for task {task}")]
    InvalidLabel { id: usize, label: String, task: Task },
    #[error("record {id}: consolidated text is empty")]
    EmptyText { id: usize },
    #[error("metadata line {line}: {source}")]
    Json {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("metadata header: {0}")]
    BadMetadataHeader(String),
    #[error("unknown record id {id}")]
    UnknownId { id: usize },
}

impl StoreError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        StoreError::Io { path: path.display().to_string(), source }
    }
}

/// Benchmark task a dataset belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    HaluevalQa,
    HaluevalDialogue,
    HaluevalSummarization,
    Fever,
}

impl Task {
    pub const ALL: [Task; 4] = [Task::HaluevalQa, Task::HaluevalDialogue, Task::HaluevalSummarization, Task::Fever];

    pub fn as_str(self) -> &'static str {
        match self {
            Task::HaluevalQa => "halueval_qa",
            Task::HaluevalDialogue => "halueval_dialogue",
            Task::HaluevalSummarization => "halueval_summarization",
            Task::Fever => "fever",
        }
    }

    /// Label alphabet; the position of a label is its class index.
    pub fn labels(self) -> &'static [&'static str] {
        match self {
            Task::Fever => &["supported", "refuted"],
            _ => &["yes", "no"],
        }
    }

    pub fn num_classes(self) -> usize {
        self.labels().len()
    }

    pub fn class_of(self, label: &str) -> Option<usize> {
        self.labels().iter().position(|l| *l == label)
    }

    /// Record fields the prompt template reads, in template order.
    pub fn field_names(self) -> &'static [&'static str] {
        match self {
            Task::HaluevalQa => &["knowledge", "question", "answer"],
            Task::HaluevalDialogue => &["knowledge", "dialogue_history", "response"],
            Task::HaluevalSummarization => &["document", "summary"],
            Task::Fever => &["claim"],
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Task::ALL.into_iter().find(|t| t.as_str() == s).ok_or_else(|| format!("unknown task {s:?}"))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExampleRecord {
    pub id: usize,
    pub fields: BTreeMap<String, String>,
    pub consolidated_text: String,
    pub label: String,
    pub vector: Vec<f32>,
    pub perplexity_score: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct MetadataLine {
    id: usize,
    fields: BTreeMap<String, String>,
    consolidated_text: String,
    label: String,
    perplexity_score: Option<f64>,
}

/// First line of a metadata file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetadataHeader {
    pub schema_version: u32,
    pub task: Task,
    /// How the extractor concatenated fields into the consolidated text.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text_template: Option<String>,
}

/// Validated, immutable collection of embedded examples. `records[i].id == i`.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingDataset {
    task: Task,
    dim: usize,
    text_template: Option<String>,
    records: Vec<ExampleRecord>,
}

impl EmbeddingDataset {
    /// Validates the dataset invariants and orders records by id.
    pub fn new(task: Task, dim: usize, mut records: Vec<ExampleRecord>) -> Result<Self, StoreError> {
        if dim == 0 {
            return Err(StoreError::CorruptHeader("embedding width is zero".into()));
        }
        let n = records.len();
        let mut seen = BTreeSet::new();
        for r in &records {
            if !seen.insert(r.id) {
                return Err(StoreError::DuplicateId { id: r.id });
            }
        }
        for r in &records {
            if r.id >= n {
                return Err(StoreError::IdOutOfRange { id: r.id, n });
            }
            validate_record(task, dim, r)?;
        }
        records.sort_by_key(|r| r.id);
        Ok(Self { task, dim, text_template: None, records })
    }

    pub fn with_text_template(mut self, template: impl Into<String>) -> Self {
        self.text_template = Some(template.into());
        self
    }

    pub fn task(&self) -> Task {
        self.task
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[ExampleRecord] {
        &self.records
    }

    pub fn text_template(&self) -> Option<&str> {
        self.text_template.as_deref()
    }

    pub fn get(&self, id: usize) -> Result<&ExampleRecord, StoreError> {
        self.records.get(id).ok_or(StoreError::UnknownId { id })
    }

    /// Class index of every record, in id order.
    pub fn class_indices(&self) -> Vec<usize> {
        self.records.iter().map(|r| self.task.class_of(&r.label).expect("validated label")).collect()
    }

    /// Embeddings of the given ids as an `ids.len() x dim` matrix.
    pub fn matrix_of(&self, ids: &[usize]) -> Result<DMatrix<f64>, StoreError> {
        let mut m = DMatrix::zeros(ids.len(), self.dim);
        for (row, &id) in ids.iter().enumerate() {
            let rec = self.get(id)?;
            for (col, &v) in rec.vector.iter().enumerate() {
                m[(row, col)] = f64::from(v);
            }
        }
        Ok(m)
    }

    /// All embeddings, row `i` holding record `i`.
    pub fn matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.len(), self.dim, |i, j| f64::from(self.records[i].vector[j]))
    }

    pub fn save(&self, embedding_path: &Path, metadata_path: &Path) -> Result<(), StoreError> {
        let data: Vec<f32> = self.records.iter().flat_map(|r| r.vector.iter().copied()).collect();
        let bytes = encode_block(self.len(), self.dim, &data);
        fs::write(embedding_path, bytes).map_err(|e| StoreError::io(embedding_path, e))?;
        fs::write(metadata_path, self.metadata_bytes()).map_err(|e| StoreError::io(metadata_path, e))
    }

    fn metadata_bytes(&self) -> Vec<u8> {
        let header = MetadataHeader {
            schema_version: METADATA_SCHEMA_VERSION,
            task: self.task,
            text_template: self.text_template.clone(),
        };
        let mut out = Vec::new();
        serde_json::to_writer(&mut out, &header).expect("header serializes");
        out.push(b'\n');
        for r in &self.records {
            let line = MetadataLine {
                id: r.id,
                fields: r.fields.clone(),
                consolidated_text: r.consolidated_text.clone(),
                label: r.label.clone(),
                perplexity_score: r.perplexity_score,
            };
            serde_json::to_writer(&mut out, &line).expect("record serializes");
            out.push(b'\n');
        }
        out
    }
}

fn validate_record(task: Task, dim: usize, r: &ExampleRecord) -> Result<(), StoreError> {
    if r.vector.len() != dim {
        return Err(StoreError::DimensionMismatch { id: r.id, expected: dim, found: r.vector.len() });
    }
    if r.vector.iter().any(|v| !v.is_finite()) {
        return Err(StoreError::NonFinite { id: r.id });
    }
    if r.consolidated_text.is_empty() {
        return Err(StoreError::EmptyText { id: r.id });
    }
    if task.class_of(&r.label).is_none() {
        return Err(StoreError::InvalidLabel { id: r.id, label: r.label.clone(), task });
    }
    Ok(())
}

/// A row-major `f32` matrix as stored in one `.mbic` block.
#[derive(Clone, Debug, PartialEq)]
pub struct MatrixBlock {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

pub fn encode_block(rows: usize, cols: usize, data: &[f32]) -> Vec<u8> {
    assert_eq!(rows * cols, data.len(), "block shape does not match data");
    let mut out = Vec::with_capacity(HEADER_LEN + data.len() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(rows as u32).to_le_bytes());
    out.extend_from_slice(&(cols as u32).to_le_bytes());
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

/// Decodes one block from the front of `bytes`, returning it and the rest.
///
/// A short payload is reported against the first record id it cannot fill.
pub fn decode_block(bytes: &[u8]) -> Result<(MatrixBlock, &[u8]), StoreError> {
    if bytes.len() < HEADER_LEN {
        return Err(StoreError::CorruptHeader(format!("file is {} bytes, header needs {HEADER_LEN}", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(StoreError::CorruptHeader(format!("bad magic {:?}", String::from_utf8_lossy(&bytes[..4]))));
    }
    let version = read_u32(bytes, 4);
    if version != FORMAT_VERSION {
        return Err(StoreError::UnsupportedVersion(version));
    }
    let rows = read_u32(bytes, 8) as usize;
    let cols = read_u32(bytes, 12) as usize;
    if cols == 0 && rows > 0 {
        return Err(StoreError::CorruptHeader("zero columns".into()));
    }
    let payload = &bytes[HEADER_LEN..];
    let available = payload.len() / 4;
    let needed = rows * cols;
    if available < needed {
        let id = available / cols;
        return Err(StoreError::DimensionMismatch { id, expected: cols, found: available - id * cols });
    }
    let data =
        payload[..needed * 4].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
    Ok((MatrixBlock { rows, cols, data }, &payload[needed * 4..]))
}

/// Reads a single-block `.mbic` file; trailing bytes are an error.
pub fn read_embeddings(path: &Path) -> Result<MatrixBlock, StoreError> {
    let bytes = fs::read(path).map_err(|e| StoreError::io(path, e))?;
    let (block, rest) = decode_block(&bytes)?;
    if !rest.is_empty() {
        return Err(StoreError::TrailingBytes(rest.len()));
    }
    Ok(block)
}

/// Parses a metadata file into its header and records (vectors left empty).
pub fn read_metadata(path: &Path) -> Result<(MetadataHeader, Vec<ExampleRecord>), StoreError> {
    let file = fs::File::open(path).map_err(|e| StoreError::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let first = lines
        .next()
        .ok_or_else(|| StoreError::BadMetadataHeader("metadata file is empty".into()))?
        .map_err(|e| StoreError::io(path, e))?;
    let header: MetadataHeader = serde_json::from_str(&first).map_err(|source| StoreError::Json { line: 1, source })?;
    if header.schema_version != METADATA_SCHEMA_VERSION {
        return Err(StoreError::BadMetadataHeader(format!("unsupported schema_version {}", header.schema_version)));
    }
    let mut records = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line.map_err(|e| StoreError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let m: MetadataLine = serde_json::from_str(&line).map_err(|source| StoreError::Json { line: i + 2, source })?;
        records.push(ExampleRecord {
            id: m.id,
            fields: m.fields,
            consolidated_text: m.consolidated_text,
            label: m.label,
            vector: Vec::new(),
            perplexity_score: m.perplexity_score,
        });
    }
    Ok((header, records))
}

pub fn load_dataset(embedding_path: &Path, metadata_path: &Path) -> Result<EmbeddingDataset, StoreError> {
    let block = read_embeddings(embedding_path)?;
    let (header, mut records) = read_metadata(metadata_path)?;
    if block.rows != records.len() {
        return Err(StoreError::CountMismatch { embeddings: block.rows, metadata: records.len() });
    }
    let n = records.len();
    let mut seen = BTreeSet::new();
    for r in &records {
        if !seen.insert(r.id) {
            return Err(StoreError::DuplicateId { id: r.id });
        }
        if r.id >= n {
            return Err(StoreError::IdOutOfRange { id: r.id, n });
        }
    }
    for r in &mut records {
        let start = r.id * block.cols;
        r.vector = block.data[start..start + block.cols].to_vec();
    }
    let ds = EmbeddingDataset::new(header.task, block.cols, records)?;
    Ok(match header.text_template {
        Some(t) => ds.with_text_template(t),
        None => ds,
    })
}

/// Demonstration pool and evaluation ids after removing selected demos.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HoldoutSplit {
    pub demo_pool: Vec<usize>,
    pub eval_set: Vec<usize>,
}

pub fn split_holdout(dataset: &EmbeddingDataset, demo_ids: &[usize]) -> Result<HoldoutSplit, StoreError> {
    let mut demos = BTreeSet::new();
    for &id in demo_ids {
        if id >= dataset.len() {
            return Err(StoreError::UnknownId { id });
        }
        demos.insert(id);
    }
    let eval_set = (0..dataset.len()).filter(|id| !demos.contains(id)).collect();
    Ok(HoldoutSplit { demo_pool: demos.into_iter().collect(), eval_set })
}

/// Writes `bytes` to `path` through a sibling temp file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), StoreError> {
    let tmp = path.with_extension(match path.extension() {
        Some(ext) => format!("{}.tmp", ext.to_string_lossy()),
        None => "tmp".to_string(),
    });
    let mut f = fs::File::create(&tmp).map_err(|e| StoreError::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| StoreError::io(&tmp, e))?;
    f.sync_all().map_err(|e| StoreError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| StoreError::io(path, e))
}
