//! On-disk index artifact.
//!
//! A directory holding:
//!
//! * `meta.json`    format version, snapshot date, BM25 parameters, embedding model
//! * `corpus.json`  the records, in the corpus export shape
//! * `lexical.json` the serialized inverted index
//! * `vectors.bin`  optional; little-endian embedding table (see [`write_vectors`])

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Bm25Params, DocRef, IndexError, LexicalIndex, VectorIndex};
use crate::corpus::{self, preprocess, CdeRecord, Corpus, LoadOptions};

pub const FORMAT_VERSION: u32 = 1;

const VECTOR_MAGIC: &[u8; 4] = b"CDEV";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexMeta {
    pub format_version: u32,
    pub snapshot_date: String,
    pub record_count: usize,
    pub bm25: Bm25Params,
    pub embedding_model: Option<String>,
    pub embedding_dimension: Option<usize>,
}

/// Everything a query needs: the records plus both indexes.
#[derive(Debug, Clone)]
pub struct IndexBundle {
    pub meta: IndexMeta,
    pub corpus: Corpus,
    pub lexical: LexicalIndex,
    pub vectors: Option<VectorIndex>,
}

impl IndexBundle {
    /// Builds the lexical index. Attach embeddings with [`IndexBundle::with_vectors`].
    pub fn build(records: Vec<CdeRecord>, params: Bm25Params, snapshot_date: &str) -> Result<Self, IndexError> {
        let docs: Vec<_> = records.iter().map(preprocess).collect();
        let lexical = LexicalIndex::build(&docs, params, snapshot_date)?;
        let corpus = Corpus::new(records).map_err(|e| IndexError::Corrupt(e.to_string()))?;
        Ok(Self {
            meta: IndexMeta {
                format_version: FORMAT_VERSION,
                snapshot_date: snapshot_date.to_string(),
                record_count: corpus.len(),
                bm25: params,
                embedding_model: None,
                embedding_dimension: None,
            },
            corpus,
            lexical,
            vectors: None,
        })
    }

    /// A bundle over zero records. Searches return nothing.
    pub fn empty(params: Bm25Params, snapshot_date: &str) -> Self {
        Self {
            meta: IndexMeta {
                format_version: FORMAT_VERSION,
                snapshot_date: snapshot_date.to_string(),
                record_count: 0,
                bm25: params,
                embedding_model: None,
                embedding_dimension: None,
            },
            corpus: Corpus::default(),
            lexical: LexicalIndex::empty(params, snapshot_date),
            vectors: None,
        }
    }

    pub fn with_vectors(mut self, vectors: VectorIndex) -> Result<Self, IndexError> {
        if vectors.len() != self.corpus.len() {
            return Err(IndexError::Corrupt(format!(
                "{} vectors for {} records",
                vectors.len(),
                self.corpus.len()
            )));
        }
        if let Some(missing) = vectors.docs().iter().find(|d| !self.corpus.contains(&d.tiny_id)) {
            return Err(IndexError::Corrupt(format!("vector for unknown record `{}`", missing.tiny_id)));
        }
        self.meta.embedding_model = Some(vectors.model().to_string());
        self.meta.embedding_dimension = Some(vectors.dimension());
        self.vectors = Some(vectors);
        Ok(self)
    }

    /// Embedding inputs in corpus order, one per record.
    pub fn embedding_inputs(&self) -> Vec<(DocRef, String)> {
        self.corpus
            .records()
            .iter()
            .map(|r| {
                let doc = preprocess(r);
                (
                    DocRef {
                        tiny_id: doc.tiny_id,
                        collection: doc.collection,
                    },
                    doc.embedding_text,
                )
            })
            .collect()
    }

    pub fn save(&self, dir: &Path) -> Result<(), IndexError> {
        fs::create_dir_all(dir)?;
        write_json(&dir.join("meta.json"), &self.meta)?;
        fs::write(dir.join("corpus.json"), corpus::serialize_corpus(self.corpus.records()))?;
        write_json(&dir.join("lexical.json"), &self.lexical)?;
        let vectors_path = dir.join("vectors.bin");
        match &self.vectors {
            Some(v) => {
                let mut w = BufWriter::new(fs::File::create(&vectors_path)?);
                write_vectors(&mut w, v)?;
                w.flush()?;
            }
            None if vectors_path.exists() => fs::remove_file(vectors_path)?,
            None => {}
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, IndexError> {
        let meta: IndexMeta = read_json(&dir.join("meta.json"))?;
        if meta.format_version != FORMAT_VERSION {
            return Err(IndexError::VersionMismatch {
                found: meta.format_version,
                expected: FORMAT_VERSION,
            });
        }
        let loaded = corpus::load_corpus(
            BufReader::new(fs::File::open(dir.join("corpus.json"))?),
            &LoadOptions::default(),
        )
        .map_err(|e| IndexError::Corrupt(e.to_string()))?;
        if !loaded.rejections.is_empty() {
            return Err(IndexError::Corrupt(format!(
                "{} stored records fail validation",
                loaded.rejections.len()
            )));
        }
        let corpus = Corpus::new(loaded.records).map_err(|e| IndexError::Corrupt(e.to_string()))?;
        let lexical: LexicalIndex = read_json(&dir.join("lexical.json"))?;
        lexical.check_invariants()?;
        if lexical.doc_count() != corpus.len() || meta.record_count != corpus.len() {
            return Err(IndexError::Corrupt("record count differs between files".into()));
        }
        let vectors = match &meta.embedding_model {
            Some(_) => {
                let mut r = BufReader::new(fs::File::open(dir.join("vectors.bin"))?);
                Some(read_vectors(&mut r)?)
            }
            None => None,
        };
        if let (Some(v), Some(dim)) = (&vectors, meta.embedding_dimension) {
            if v.dimension() != dim || Some(v.model()) != meta.embedding_model.as_deref() {
                return Err(IndexError::Corrupt("vectors.bin disagrees with meta.json".into()));
            }
        }
        Ok(Self {
            meta,
            corpus,
            lexical,
            vectors,
        })
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), IndexError> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    serde_json::to_writer(&mut w, value)?;
    w.flush()?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, IndexError> {
    Ok(serde_json::from_reader(BufReader::new(fs::File::open(path)?))?)
}

fn write_str<W: Write>(w: &mut W, s: &str) -> std::io::Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())
}

fn read_u32<R: Read>(r: &mut R) -> std::io::Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_str<R: Read>(r: &mut R) -> Result<String, IndexError> {
    let len = read_u32(r)? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|_| IndexError::Corrupt("non-utf8 string in vectors.bin".into()))
}

/// Layout: `CDEV`, version, dimension, count, model string, then per document
/// its id, collection and `dimension` f32 values. Integers are u32 LE; strings
/// are a u32 byte length followed by UTF-8.
pub fn write_vectors<W: Write>(w: &mut W, index: &VectorIndex) -> std::io::Result<()> {
    w.write_all(VECTOR_MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(index.dimension() as u32).to_le_bytes())?;
    w.write_all(&(index.len() as u32).to_le_bytes())?;
    write_str(w, index.model())?;
    for (i, doc) in index.docs().iter().enumerate() {
        write_str(w, &doc.tiny_id)?;
        write_str(w, &doc.collection)?;
        for x in index.vector(i) {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_vectors<R: Read>(r: &mut R) -> Result<VectorIndex, IndexError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != VECTOR_MAGIC {
        return Err(IndexError::Corrupt("vectors.bin has a bad magic number".into()));
    }
    let version = read_u32(r)?;
    if version != FORMAT_VERSION {
        return Err(IndexError::VersionMismatch {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let dimension = read_u32(r)? as usize;
    let count = read_u32(r)? as usize;
    let model = read_str(r)?;
    let mut docs = Vec::with_capacity(count);
    let mut data = Vec::with_capacity(count * dimension);
    let mut buf = [0u8; 4];
    for _ in 0..count {
        let tiny_id = read_str(r)?;
        let collection = read_str(r)?;
        for _ in 0..dimension {
            r.read_exact(&mut buf)?;
            data.push(f32::from_le_bytes(buf));
        }
        docs.push(DocRef { tiny_id, collection });
    }
    Ok(VectorIndex::from_parts(model, dimension, docs, data))
}
