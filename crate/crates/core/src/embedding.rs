//! Node embeddings and cosine similarity.
//!
//! Vectors are stored as `f32`, row-major, one row per node id. Norms and
//! dot products are accumulated in `f64`.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::kg_store::{NodeId, NodeTable};
use crate::numfmt::sig9;

/// Cosine similarity of two vectors, clamped to `[-1, 1]`.
pub fn cosine(u: &[f32], v: &[f32]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::Shape(format!(
            "cosine of vectors with lengths {} and {}",
            u.len(),
            v.len()
        )));
    }
    let nu = norm(u);
    let nv = norm(v);
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::Domain("cosine of a zero-norm vector".into()));
    }
    Ok(cosine_with_norms(u, v, nu, nv))
}

#[inline]
pub(crate) fn dot(u: &[f32], v: &[f32]) -> f64 {
    u.iter().zip(v).map(|(&a, &b)| a as f64 * b as f64).sum()
}

#[inline]
pub(crate) fn norm(u: &[f32]) -> f64 {
    dot(u, u).sqrt()
}

#[inline]
pub(crate) fn cosine_with_norms(u: &[f32], v: &[f32], nu: f64, nv: f64) -> f64 {
    (dot(u, v) / (nu * nv)).clamp(-1.0, 1.0)
}

/// Dense embeddings for node ids `0..len()`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    data: Vec<f32>,
    norms: Vec<f64>,
}

impl EmbeddingTable {
    /// Builds a table from row vectors; row `i` belongs to node id `i`.
    pub fn from_rows(dim: usize, rows: Vec<Vec<f32>>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Shape("embedding dimension must be positive".into()));
        }
        let mut data = Vec::with_capacity(rows.len() * dim);
        let mut norms = Vec::with_capacity(rows.len());
        for (i, row) in rows.into_iter().enumerate() {
            if row.len() != dim {
                return Err(Error::Shape(format!(
                    "row {i} has length {}, expected {dim}",
                    row.len()
                )));
            }
            if row.iter().any(|x| !x.is_finite()) {
                return Err(Error::Domain(format!("row {i} has a non-finite entry")));
            }
            let n = norm(&row);
            if n == 0.0 {
                return Err(Error::Domain(format!("row {i} has zero norm")));
            }
            norms.push(n);
            data.extend_from_slice(&row);
        }
        Ok(Self { dim, data, norms })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.norms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.norms.is_empty()
    }

    pub fn contains(&self, id: NodeId) -> bool {
        id.index() < self.len()
    }

    pub fn vector(&self, id: NodeId) -> &[f32] {
        let i = id.index();
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn norm(&self, id: NodeId) -> f64 {
        self.norms[id.index()]
    }

    /// Cosine between two stored nodes. A node is exactly similar to itself.
    #[inline]
    pub fn cosine(&self, a: NodeId, b: NodeId) -> f64 {
        if a == b {
            return 1.0;
        }
        cosine_with_norms(self.vector(a), self.vector(b), self.norm(a), self.norm(b))
    }

    /// Applies `vectors[i] <- matrix * vectors[i]` for a row-major
    /// `dim x dim` matrix.
    pub fn transformed(&self, matrix: &[f64]) -> Result<Self> {
        let d = self.dim;
        if matrix.len() != d * d {
            return Err(Error::Shape(format!(
                "adapter has {} entries, expected {}",
                matrix.len(),
                d * d
            )));
        }
        let rows = (0..self.len())
            .map(|i| {
                let v = self.vector(NodeId(i as u32));
                (0..d)
                    .map(|r| {
                        let row = &matrix[r * d..(r + 1) * d];
                        row.iter().zip(v).map(|(&m, &x)| m * x as f64).sum::<f64>() as f32
                    })
                    .collect()
            })
            .collect();
        Self::from_rows(d, rows)
    }

    /// Writes the table in the embedding file format.
    pub fn save(&self, nodes: &NodeTable, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = String::new();
        let n = self.len().min(nodes.len());
        let _ = writeln!(out, "{} {}", n, self.dim);
        for i in 0..n {
            let id = NodeId(i as u32);
            out.push_str(nodes.text(id));
            out.push('\n');
            let row: Vec<String> = self.vector(id).iter().map(|&x| sig9(x as f64)).collect();
            out.push_str(&row.join(" "));
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

/// One `(text, vector)` record of an embedding file.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRecord {
    pub text: String,
    pub vector: Vec<f32>,
}

/// Parses an embedding file into its declared dimension and records.
pub fn read_embedding_file(path: impl AsRef<Path>) -> Result<(usize, Vec<EmbeddingRecord>)> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_embedding_text(&text, path)
}

pub fn parse_embedding_text(text: &str, origin: &Path) -> Result<(usize, Vec<EmbeddingRecord>)> {
    let mut lines = text.split('\n').map(|l| l.strip_suffix('\r').unwrap_or(l)).enumerate();
    let (_, header) = lines.next().ok_or_else(|| Error::parse(origin, 1, "missing header"))?;
    let fields: Vec<&str> = header.split(' ').collect();
    let parse_usize = |s: &str| s.parse::<usize>().ok();
    let (n, d) = match fields.as_slice() {
        [a, b] => match (parse_usize(a), parse_usize(b)) {
            (Some(n), Some(d)) if d > 0 => (n, d),
            _ => return Err(Error::parse(origin, 1, "header must be \"<n> <d>\" with d > 0")),
        },
        _ => return Err(Error::parse(origin, 1, "header must be \"<n> <d>\"")),
    };
    let mut records = Vec::with_capacity(n);
    for _ in 0..n {
        let (ln, node_text) = lines
            .next()
            .ok_or_else(|| Error::parse(origin, 2 + 2 * records.len(), format!("expected {n} records")))?;
        if node_text.is_empty() || node_text.contains('\t') {
            return Err(Error::parse(origin, ln + 1, "invalid node text"));
        }
        let (ln, values) = lines
            .next()
            .ok_or_else(|| Error::parse(origin, ln + 2, "missing vector line"))?;
        let vector: Vec<f32> = values
            .split(' ')
            .map(|s| s.parse::<f32>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::parse(origin, ln + 1, format!("bad float: {e}")))?;
        if vector.len() != d {
            return Err(Error::parse(
                origin,
                ln + 1,
                format!("expected {d} values, found {}", vector.len()),
            ));
        }
        records.push(EmbeddingRecord {
            text: node_text.to_string(),
            vector,
        });
    }
    if let Some((ln, extra)) = lines.find(|(_, l)| !l.is_empty()) {
        return Err(Error::parse(
            origin,
            ln + 1,
            format!("unexpected content after {n} records: {extra:?}"),
        ));
    }
    Ok((d, records))
}

/// Arranges records by node id. Every node of `nodes` must be covered and
/// every record must name a known node.
pub fn table_from_records(nodes: &NodeTable, dim: usize, records: Vec<EmbeddingRecord>) -> Result<EmbeddingTable> {
    let mut rows: Vec<Option<Vec<f32>>> = vec![None; nodes.len()];
    for rec in records {
        let id = nodes
            .get(&rec.text)
            .ok_or_else(|| Error::Lookup(format!("embedding for unknown node {:?}", rec.text)))?;
        if rec.vector.len() != dim {
            return Err(Error::Shape(format!(
                "vector for {:?} has length {}, expected {dim}",
                rec.text,
                rec.vector.len()
            )));
        }
        let slot = &mut rows[id.index()];
        if slot.is_some() {
            return Err(Error::Domain(format!("duplicate embedding for {:?}", rec.text)));
        }
        *slot = Some(rec.vector);
    }
    let missing: Vec<NodeId> = rows
        .iter()
        .enumerate()
        .filter(|(_, r)| r.is_none())
        .map(|(i, _)| NodeId(i as u32))
        .collect();
    if !missing.is_empty() {
        return Err(Error::Coverage {
            missing: missing.iter().take(10).map(|&id| nodes.text(id).to_string()).collect(),
            total: missing.len(),
        });
    }
    EmbeddingTable::from_rows(dim, rows.into_iter().map(Option::unwrap).collect())
}

/// Loads an embedding file covering every node of `nodes`.
pub fn load_embeddings(path: impl AsRef<Path>, nodes: &NodeTable) -> Result<EmbeddingTable> {
    let (dim, records) = read_embedding_file(path)?;
    table_from_records(nodes, dim, records)
}

/// Deterministic unit vectors keyed on `(seed, text)`.
///
/// Stands in for a text encoder in tests and offline runs: equal texts get
/// equal vectors, distinct texts get nearly orthogonal ones at moderate `dim`.
pub fn hash_embed(nodes: &NodeTable, dim: usize, seed: u64) -> Result<EmbeddingTable> {
    if dim < 2 {
        return Err(Error::Domain(format!("hash embedding dim must be >= 2, got {dim}")));
    }
    let rows = nodes.iter().map(|(_, text)| hash_vector(text, dim, seed)).collect();
    EmbeddingTable::from_rows(dim, rows)
}

pub fn hash_vector(text: &str, dim: usize, seed: u64) -> Vec<f32> {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(text.as_bytes());
    let key: [u8; 32] = hasher.finalize().into();
    let mut rng = ChaCha8Rng::from_seed(key);
    loop {
        let raw: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let n = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            return raw.iter().map(|x| (x / n) as f32).collect();
        }
    }
}

/// Maps texts to ids for every record, interning unknown texts.
pub fn register_texts(nodes: &mut NodeTable, records: &[EmbeddingRecord]) -> HashMap<String, NodeId> {
    records
        .iter()
        .map(|r| (r.text.clone(), nodes.intern(&r.text)))
        .collect()
}
