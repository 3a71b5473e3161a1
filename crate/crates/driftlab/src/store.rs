//! In-memory vector store with deterministic top-k cosine retrieval.
//!
//! Documents keep their insertion order; retrieval ties are broken by earlier
//! insertion, so repeated queries over an unchanged store always return the
//! same ranking. Snapshots round-trip through JSON with bitwise-identical
//! embeddings.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embed::{self, EmbedError, EmbeddingVector};

/// Metadata key holding the provenance label (`external` / `internal`).
pub const META_IFC_LABEL: &str = "ifc_label";
/// Metadata key naming the prohibited field a syntactic directive targets.
pub const META_NORM_DIRECTIVE: &str = "norm_directive";
/// Metadata key naming the prohibited field a semantic norm targets.
pub const META_SEMANTIC_NORM: &str = "semantic_norm";
/// Metadata key recording which session wrote the document back
/// (`-1` for uploads and preloaded background documents).
pub const META_ORIGIN_SESSION: &str = "origin_session";
/// Metadata key marking a document whose text was replaced by neutral filler
/// while keeping the original embedding.
pub const META_FILLER_OF: &str = "filler_of";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum StoreError {
    #[error("store is empty")]
    EmptyStore,
    #[error("duplicate document id {0:?}")]
    DuplicateId(String),
    #[error("document {0:?} not found")]
    NotFound(String),
    #[error("embedding dimension {got} does not match store dimension {want}")]
    DimensionMismatch { got: usize, want: usize },
    #[error("document {id:?} embedding does not match its text and carries no filler marker")]
    EmbeddingMismatch { id: String },
    #[error("snapshot parse error: {0}")]
    Snapshot(String),
    #[error(transparent)]
    Embed(#[from] EmbedError),
}

/// One embedded record plus its string metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub text: String,
    pub embedding: EmbeddingVector,
    pub metadata: BTreeMap<String, String>,
}

impl Document {
    /// Embed `text` at the given dimension and attach metadata.
    pub fn new(
        id: impl Into<String>,
        text: impl Into<String>,
        metadata: BTreeMap<String, String>,
        dimension: usize,
    ) -> Result<Self, EmbedError> {
        let text = text.into();
        let embedding = embed::embed_with_dimension(&text, dimension)?;
        Ok(Self {
            id: id.into(),
            text,
            embedding,
            metadata,
        })
    }

    pub fn ifc_label(&self) -> Option<&str> {
        self.metadata.get(META_IFC_LABEL).map(String::as_str)
    }

    pub fn norm_directive(&self) -> Option<&str> {
        self.metadata.get(META_NORM_DIRECTIVE).map(String::as_str)
    }

    pub fn semantic_norm(&self) -> Option<&str> {
        self.metadata.get(META_SEMANTIC_NORM).map(String::as_str)
    }

    /// Session index that wrote this document back, if any.
    pub fn origin_session(&self) -> Option<i64> {
        self.metadata
            .get(META_ORIGIN_SESSION)
            .and_then(|v| v.parse().ok())
            .filter(|v| *v >= 0)
    }

    pub fn is_filler(&self) -> bool {
        self.metadata.contains_key(META_FILLER_OF)
    }
}

/// Insertion-ordered collection of documents sharing one embedding dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryStore {
    docs: Vec<Document>,
    ids: BTreeSet<String>,
    dimension: usize,
}

/// One retrieval hit: the document and its cosine similarity to the query.
#[derive(Debug, Clone)]
pub struct RetrievalHit<'a> {
    pub doc: &'a Document,
    pub similarity: f64,
}

impl MemoryStore {
    pub fn new(dimension: usize) -> Self {
        Self {
            docs: Vec::new(),
            ids: BTreeSet::new(),
            dimension,
        }
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    /// Documents in insertion order.
    pub fn docs(&self) -> &[Document] {
        &self.docs
    }

    pub fn get(&self, id: &str) -> Option<&Document> {
        self.docs.iter().find(|d| d.id == id)
    }

    pub fn contains(&self, id: &str) -> bool {
        self.ids.contains(id)
    }

    pub fn add(&mut self, doc: Document) -> Result<(), StoreError> {
        if self.ids.contains(&doc.id) {
            return Err(StoreError::DuplicateId(doc.id));
        }
        if doc.embedding.dimension() != self.dimension {
            return Err(StoreError::DimensionMismatch {
                got: doc.embedding.dimension(),
                want: self.dimension,
            });
        }
        self.ids.insert(doc.id.clone());
        self.docs.push(doc);
        Ok(())
    }

    /// Embed `text` and add it under `id`.
    pub fn add_text(
        &mut self,
        id: impl Into<String>,
        text: impl Into<String>,
        metadata: BTreeMap<String, String>,
    ) -> Result<(), StoreError> {
        let doc = Document::new(id, text, metadata, self.dimension)?;
        self.add(doc)
    }

    /// Copy of this store without the named document. Insertion order of the
    /// remaining documents is preserved.
    pub fn without(&self, id: &str) -> Result<MemoryStore, StoreError> {
        if !self.ids.contains(id) {
            return Err(StoreError::NotFound(id.to_string()));
        }
        let mut out = MemoryStore::new(self.dimension);
        for doc in &self.docs {
            if doc.id != id {
                out.add(doc.clone()).expect("subset of a valid store");
            }
        }
        Ok(out)
    }

    /// Top-k documents by descending cosine similarity to `query`.
    /// Ties break toward the earlier-inserted document.
    pub fn top_k(&self, query: &str, k: usize) -> Result<Vec<RetrievalHit<'_>>, StoreError> {
        assert!(k >= 1, "top_k requires k >= 1");
        if self.docs.is_empty() {
            return Err(StoreError::EmptyStore);
        }
        let query_vec = embed::embed_with_dimension(query, self.dimension)?;
        Ok(self.top_k_embedded(&query_vec, k))
    }

    /// Same as [`top_k`](Self::top_k) but for a pre-embedded query.
    pub fn top_k_embedded(&self, query: &EmbeddingVector, k: usize) -> Vec<RetrievalHit<'_>> {
        let mut scored: Vec<(usize, f64)> = self
            .docs
            .iter()
            .enumerate()
            .map(|(i, d)| (i, embed::cosine_similarity(query, &d.embedding)))
            .collect();
        // Similarities are finite (unit vectors), so the comparator is total.
        scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        scored
            .into_iter()
            .take(k)
            .map(|(i, similarity)| RetrievalHit {
                doc: &self.docs[i],
                similarity,
            })
            .collect()
    }

    /// Which of `queries` retrieve `doc_id` within top-k, as query indices.
    pub fn retrieval_coverage(
        &self,
        doc_id: &str,
        queries: &[String],
        k: usize,
    ) -> Result<BTreeSet<usize>, StoreError> {
        if !self.contains(doc_id) {
            return Err(StoreError::NotFound(doc_id.to_string()));
        }
        let mut covered = BTreeSet::new();
        for (qi, query) in queries.iter().enumerate() {
            if self.top_k(query, k)?.iter().any(|hit| hit.doc.id == doc_id) {
                covered.insert(qi);
            }
        }
        Ok(covered)
    }

    /// Serialize to a JSON document array (id, text, metadata, embedding values).
    pub fn export_snapshot(&self) -> String {
        serde_json::to_string_pretty(&self.docs).expect("documents serialize")
    }

    /// Rebuild a store from [`export_snapshot`](Self::export_snapshot) output.
    ///
    /// Every document must either embed to exactly its stored vector or carry
    /// a `filler_of` marker explaining the override.
    pub fn import_snapshot(json: &str, dimension: usize) -> Result<MemoryStore, StoreError> {
        let docs: Vec<Document> =
            serde_json::from_str(json).map_err(|e| StoreError::Snapshot(e.to_string()))?;
        let mut store = MemoryStore::new(dimension);
        for doc in docs {
            if !doc.is_filler() {
                let expect = embed::embed_with_dimension(&doc.text, dimension)?;
                if expect != doc.embedding {
                    return Err(StoreError::EmbeddingMismatch { id: doc.id });
                }
            }
            store.add(doc)?;
        }
        Ok(store)
    }
}
