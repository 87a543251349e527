//! Exhaustive cosine-similarity indices and their on-disk format.
//!
//! Each index is stored as `index_<kind>.meta`, a JSON header line followed
//! by one JSON record per line, and `index_<kind>.vec`, a row-major matrix of
//! little-endian `f32`.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write as _};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::embedding::{cosine, EmbeddingError, EmbeddingVector, EMBEDDING_DIM};
use super::ingest::{Dimension, IngestReport, KnowledgeRecord};
use super::KbError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IndexKind {
    TutorialStructure,
    TutorialDetails,
    ExecutionScripts,
    CommandDocumentation,
}

impl IndexKind {
    pub const ALL: [IndexKind; 4] = [
        IndexKind::TutorialStructure,
        IndexKind::TutorialDetails,
        IndexKind::ExecutionScripts,
        IndexKind::CommandDocumentation,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            IndexKind::TutorialStructure => "tutorial_structure",
            IndexKind::TutorialDetails => "tutorial_details",
            IndexKind::ExecutionScripts => "execution_scripts",
            IndexKind::CommandDocumentation => "command_documentation",
        }
    }

    /// Case metadata is stored alongside file contents.
    pub fn for_dimension(dimension: Dimension) -> IndexKind {
        match dimension {
            Dimension::DirectoryStructure => IndexKind::TutorialStructure,
            Dimension::CaseMetadata | Dimension::FileContent => IndexKind::TutorialDetails,
            Dimension::ExecutionScript => IndexKind::ExecutionScripts,
            Dimension::CommandDoc => IndexKind::CommandDocumentation,
        }
    }

    pub fn meta_file(self) -> String {
        format!("index_{}.meta", self.as_str())
    }

    pub fn vec_file(self) -> String {
        format!("index_{}.vec", self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredDocument {
    pub record_id: String,
    pub similarity: f64,
    pub record: KnowledgeRecord,
}

#[derive(Debug, Serialize, Deserialize)]
struct MetaHeader {
    kind: IndexKind,
    rows: usize,
    dim: usize,
}

/// Flat index over one kind of record.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorIndex {
    kind: IndexKind,
    records: Vec<KnowledgeRecord>,
    vectors: Vec<f32>,
    norms: Vec<f64>,
}

impl VectorIndex {
    pub fn new(kind: IndexKind) -> Self {
        Self {
            kind,
            records: Vec::new(),
            vectors: Vec::new(),
            norms: Vec::new(),
        }
    }

    pub fn kind(&self) -> IndexKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[KnowledgeRecord] {
        &self.records
    }

    pub fn push(&mut self, record: KnowledgeRecord, vector: &EmbeddingVector) {
        self.records.push(record);
        self.vectors.extend_from_slice(vector.values());
        self.norms.push(vector.norm());
    }

    fn row(&self, i: usize) -> &[f32] {
        &self.vectors[i * EMBEDDING_DIM..(i + 1) * EMBEDDING_DIM]
    }

    /// Scores every stored vector that passes `keep`, best first, ties by
    /// ascending record id. Exact: no approximation is involved.
    pub fn ranked_by(
        &self,
        query: &EmbeddingVector,
        mut keep: impl FnMut(&KnowledgeRecord) -> bool,
    ) -> Vec<ScoredDocument> {
        let mut scored: Vec<(f64, usize)> = (0..self.len())
            .filter(|&i| keep(&self.records[i]))
            .map(|i| {
                (
                    cosine(query.values(), query.norm(), self.row(i), self.norms[i]),
                    i,
                )
            })
            .collect();
        scored.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap_or(Ordering::Equal)
                .then_with(|| {
                    self.records[a.1]
                        .record_id
                        .cmp(&self.records[b.1].record_id)
                })
        });
        scored
            .into_iter()
            .map(|(similarity, i)| ScoredDocument {
                record_id: self.records[i].record_id.clone(),
                similarity,
                record: self.records[i].clone(),
            })
            .collect()
    }

    /// The `n` most similar documents.
    pub fn top_k(&self, query: &EmbeddingVector, n: usize) -> Vec<ScoredDocument> {
        let mut all = self.ranked_by(query, |_| true);
        all.truncate(n);
        all
    }

    fn write(&self, dir: &Path) -> Result<(), KbError> {
        let meta_path = dir.join(self.kind.meta_file());
        let vec_path = dir.join(self.kind.vec_file());
        let mut meta = String::new();
        let header = MetaHeader {
            kind: self.kind,
            rows: self.len(),
            dim: EMBEDDING_DIM,
        };
        meta.push_str(&serde_json::to_string(&header).expect("header serializes"));
        meta.push('\n');
        for record in &self.records {
            meta.push_str(&serde_json::to_string(record).expect("record serializes"));
            meta.push('\n');
        }
        fs::write(&meta_path, meta).map_err(|e| KbError::io(&meta_path, e))?;
        let file = fs::File::create(&vec_path).map_err(|e| KbError::io(&vec_path, e))?;
        let mut out = BufWriter::new(file);
        for v in &self.vectors {
            out.write_all(&v.to_le_bytes())
                .map_err(|e| KbError::io(&vec_path, e))?;
        }
        out.flush().map_err(|e| KbError::io(&vec_path, e))
    }

    fn read(dir: &Path, kind: IndexKind) -> Result<Self, KbError> {
        let meta_path = dir.join(kind.meta_file());
        let vec_path = dir.join(kind.vec_file());
        if !meta_path.is_file() || !vec_path.is_file() {
            return Err(KbError::MissingIndex(kind));
        }
        let corrupt = |msg: String| KbError::CorruptIndex { kind, message: msg };
        let file = fs::File::open(&meta_path).map_err(|e| KbError::io(&meta_path, e))?;
        let mut lines = BufReader::new(file).lines();
        let header: MetaHeader = match lines.next() {
            Some(Ok(line)) => {
                serde_json::from_str(&line).map_err(|e| corrupt(format!("header: {e}")))?
            }
            _ => return Err(corrupt("missing header".into())),
        };
        if header.dim != EMBEDDING_DIM || header.kind != kind {
            return Err(corrupt(format!("header {header:?} does not match")));
        }
        let mut records = Vec::with_capacity(header.rows);
        for line in lines {
            let line = line.map_err(|e| KbError::io(&meta_path, e))?;
            if !line.trim().is_empty() {
                records.push(
                    serde_json::from_str(&line).map_err(|e| corrupt(format!("record: {e}")))?,
                );
            }
        }
        let bytes = fs::read(&vec_path).map_err(|e| KbError::io(&vec_path, e))?;
        if records.len() != header.rows || bytes.len() != header.rows * EMBEDDING_DIM * 4 {
            return Err(corrupt(format!(
                "expected {} rows, found {} records and {} bytes",
                header.rows,
                records.len(),
                bytes.len()
            )));
        }
        let vectors: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let norms = vectors
            .chunks_exact(EMBEDDING_DIM)
            .map(|row| {
                row.iter()
                    .map(|&v| f64::from(v) * f64::from(v))
                    .sum::<f64>()
                    .sqrt()
            })
            .collect();
        Ok(Self {
            kind,
            records,
            vectors,
            norms,
        })
    }
}

/// The four indices.
#[derive(Debug, Clone, PartialEq)]
pub struct KnowledgeBase {
    indices: BTreeMap<IndexKind, VectorIndex>,
}

impl KnowledgeBase {
    pub fn empty() -> Self {
        Self {
            indices: IndexKind::ALL
                .iter()
                .map(|&k| (k, VectorIndex::new(k)))
                .collect(),
        }
    }

    pub fn index(&self, kind: IndexKind) -> Result<&VectorIndex, KbError> {
        self.indices.get(&kind).ok_or(KbError::MissingIndex(kind))
    }

    pub fn counts(&self) -> BTreeMap<IndexKind, usize> {
        self.indices.iter().map(|(k, v)| (*k, v.len())).collect()
    }

    /// Writes all four indices plus the ingestion report.
    pub fn write(&self, dir: &Path, report: &IngestReport) -> Result<(), KbError> {
        fs::create_dir_all(dir).map_err(|e| KbError::io(dir, e))?;
        for index in self.indices.values() {
            index.write(dir)?;
        }
        let report_path = dir.join("ingest_report.txt");
        fs::write(&report_path, report.to_string()).map_err(|e| KbError::io(&report_path, e))
    }

    /// Loads whichever indices exist; use [`index`](Self::index) to require one.
    pub fn load(dir: &Path) -> Result<Self, KbError> {
        if !dir.is_dir() {
            return Err(KbError::io(
                dir,
                std::io::Error::new(std::io::ErrorKind::NotFound, "no such directory"),
            ));
        }
        let mut indices = BTreeMap::new();
        for kind in IndexKind::ALL {
            match VectorIndex::read(dir, kind) {
                Ok(index) => {
                    indices.insert(kind, index);
                }
                Err(KbError::MissingIndex(_)) => {}
                Err(e) => return Err(e),
            }
        }
        if indices.is_empty() {
            return Err(KbError::MissingIndex(IndexKind::TutorialDetails));
        }
        Ok(Self { indices })
    }
}

/// Embeds every record and routes it to the index of its dimension.
pub fn build_index(
    records: &[KnowledgeRecord],
    embed: &dyn Fn(&str) -> Result<EmbeddingVector, EmbeddingError>,
) -> Result<KnowledgeBase, EmbeddingError> {
    let mut kb = KnowledgeBase::empty();
    for record in records {
        let vector = embed(&record.text).map_err(|e| EmbeddingError::Record {
            record_id: record.record_id.clone(),
            message: e.to_string(),
        })?;
        kb.indices
            .get_mut(&IndexKind::for_dimension(record.dimension))
            .expect("all kinds present")
            .push(record.clone(), &vector);
    }
    Ok(kb)
}
