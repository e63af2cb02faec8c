//! Loading graphs and embeddings into one shared id space.

use std::path::{Path, PathBuf};

use ckg_core::config::ReasonerConfig;
use ckg_core::embedding::{hash_embed, read_embedding_file, register_texts, table_from_records, EmbeddingTable};
use ckg_core::kg_store::{Ckg, Triple, Vocab};
use ckg_core::{Error, Result};

/// Seed for hash embeddings. Fixed so that vectors depend on text alone,
/// like a real encoder's.
pub const HASH_SEED: u64 = 0;

#[derive(Debug, Clone)]
pub enum EmbeddingSource {
    File(PathBuf),
    /// Hash vectors of `embedding_dim` components.
    Hash,
}

/// An inverse-augmented training graph plus the forward triples of any
/// extra files, all sharing the graph's registry.
pub struct Dataset {
    pub graph: Ckg,
    pub extra: Vec<Ckg>,
}

impl Dataset {
    pub fn load(train: &Path, extra: &[&Path]) -> Result<Self> {
        let mut graph = Ckg::load_triples(train, None)?.add_inverse_relations()?;
        let mut vocab = graph.vocab().clone();
        let mut loaded = Vec::with_capacity(extra.len());
        for path in extra {
            let g = Ckg::load_triples(path, Some(vocab))?;
            vocab = g.vocab().clone();
            loaded.push(g);
        }
        graph.adopt_vocab(vocab)?;
        Ok(Self { graph, extra: loaded })
    }

    pub fn forward(&self, i: usize) -> Vec<Triple> {
        self.extra[i].forward_triples().copied().collect()
    }

    /// Adds node texts that appear in no triple file, e.g. an unseen query head.
    pub fn extend_nodes<'a>(&mut self, texts: impl IntoIterator<Item = &'a str>) -> Result<()> {
        let mut vocab: Vocab = self.graph.vocab().clone();
        for t in texts {
            vocab.nodes.intern(t);
        }
        self.graph.adopt_vocab(vocab)
    }

    /// Embeds every registered node. File records for texts outside the
    /// triple files are registered first, so they can be queried.
    pub fn embed(&mut self, source: &EmbeddingSource, cfg: &ReasonerConfig) -> Result<EmbeddingTable> {
        match source {
            EmbeddingSource::Hash => hash_embed(self.graph.nodes(), cfg.embedding_dim, HASH_SEED),
            EmbeddingSource::File(path) => {
                let (dim, records) = read_embedding_file(path)?;
                let mut vocab = self.graph.vocab().clone();
                register_texts(&mut vocab.nodes, &records);
                self.graph.adopt_vocab(vocab)?;
                table_from_records(self.graph.nodes(), dim, records)
            }
        }
    }
}

/// Fails with a coverage error unless `text` is a registered node.
pub fn require_node(g: &Ckg, text: &str) -> Result<ckg_core::kg_store::NodeId> {
    g.nodes().get(text).ok_or_else(|| Error::Coverage {
        missing: vec![text.to_string()],
        total: 1,
    })
}
