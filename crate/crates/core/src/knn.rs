//! k-nearest-neighbour retrieval by cosine similarity.
//!
//! Exact mode is a full scan and is the reference behaviour. Approximate mode
//! is an inverted-file index: nodes are bucketed by spherical k-means and a
//! query scans only the `probes` closest buckets.
//!
//! Results are ordered by descending score, ties by ascending node id.

use std::cmp::Ordering;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::embedding::{cosine_with_norms, norm, EmbeddingTable};
use crate::error::{Error, Result};
use crate::kg_store::NodeId;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KnnMode {
    Exact,
    Approximate { clusters: usize, probes: usize, seed: u64 },
}

#[derive(Debug, Clone)]
pub struct KnnIndex<'a> {
    table: &'a EmbeddingTable,
    mode: KnnMode,
    ivf: Option<Ivf>,
}

#[derive(Debug, Clone)]
struct Ivf {
    centroids: Vec<Vec<f32>>,
    centroid_norms: Vec<f64>,
    members: Vec<Vec<NodeId>>,
}

/// Total order used for every ranked list: score descending, id ascending.
#[inline]
pub(crate) fn rank_order(a: &(NodeId, f64), b: &(NodeId, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then(a.0.cmp(&b.0))
}

fn top_k(mut scored: Vec<(NodeId, f64)>, k: usize) -> Vec<(NodeId, f64)> {
    if k < scored.len() {
        scored.select_nth_unstable_by(k - 1, rank_order);
        scored.truncate(k);
    }
    scored.sort_by(rank_order);
    scored
}

impl<'a> KnnIndex<'a> {
    pub fn exact(table: &'a EmbeddingTable) -> Self {
        Self {
            table,
            mode: KnnMode::Exact,
            ivf: None,
        }
    }

    pub fn build(table: &'a EmbeddingTable, mode: KnnMode) -> Result<Self> {
        let ivf = match mode {
            KnnMode::Exact => None,
            KnnMode::Approximate { clusters, probes, seed } => {
                if clusters == 0 || probes == 0 {
                    return Err(Error::Domain("cluster and probe counts must be positive".into()));
                }
                Some(Ivf::build(table, clusters, seed))
            }
        };
        Ok(Self { table, mode, ivf })
    }

    pub fn table(&self) -> &'a EmbeddingTable {
        self.table
    }

    pub fn mode(&self) -> KnnMode {
        self.mode
    }

    /// Nearest nodes to an arbitrary query vector.
    pub fn knn(&self, query: &[f32], k: usize) -> Result<Vec<(NodeId, f64)>> {
        self.check(query.len(), k)?;
        let qn = norm(query);
        if qn == 0.0 {
            return Err(Error::Domain("knn query has zero norm".into()));
        }
        Ok(self.search(query, qn, None, k))
    }

    /// Nearest nodes to a stored node; the node itself scores exactly 1.
    pub fn knn_node(&self, node: NodeId, k: usize) -> Result<Vec<(NodeId, f64)>> {
        if !self.table.contains(node) {
            return Err(Error::Domain(format!("node {} has no embedding", node.0)));
        }
        self.check(self.table.dim(), k)?;
        Ok(self.search(self.table.vector(node), self.table.norm(node), Some(node), k))
    }

    fn check(&self, len: usize, k: usize) -> Result<()> {
        if self.table.is_empty() {
            return Err(Error::Domain("knn on an empty embedding table".into()));
        }
        if len != self.table.dim() {
            return Err(Error::Shape(format!(
                "query has length {len}, table dim is {}",
                self.table.dim()
            )));
        }
        if k == 0 {
            return Err(Error::Domain("k must be at least 1".into()));
        }
        Ok(())
    }

    fn score(&self, query: &[f32], qn: f64, self_id: Option<NodeId>, id: NodeId) -> f64 {
        if Some(id) == self_id {
            return 1.0;
        }
        cosine_with_norms(query, self.table.vector(id), qn, self.table.norm(id))
    }

    fn search(&self, query: &[f32], qn: f64, self_id: Option<NodeId>, k: usize) -> Vec<(NodeId, f64)> {
        let scored: Vec<(NodeId, f64)> = match (&self.ivf, self.mode) {
            (Some(ivf), KnnMode::Approximate { probes, .. }) => ivf
                .probe(query, qn, probes)
                .flat_map(|bucket| ivf.members[bucket].iter())
                .map(|&id| (id, self.score(query, qn, self_id, id)))
                .collect(),
            _ => (0..self.table.len() as u32)
                .map(NodeId)
                .map(|id| (id, self.score(query, qn, self_id, id)))
                .collect(),
        };
        top_k(scored, k)
    }
}

impl Ivf {
    fn build(table: &EmbeddingTable, clusters: usize, seed: u64) -> Self {
        let n = table.len();
        let clusters = clusters.min(n.max(1));
        let dim = table.dim();
        let mut order: Vec<u32> = (0..n as u32).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let mut centroids: Vec<Vec<f32>> = order[..clusters]
            .iter()
            .map(|&i| table.vector(NodeId(i)).to_vec())
            .collect();
        let mut assignment = vec![0usize; n];
        for _ in 0..10 {
            let norms: Vec<f64> = centroids.iter().map(|c| norm(c)).collect();
            for (i, slot) in assignment.iter_mut().enumerate() {
                let id = NodeId(i as u32);
                *slot = nearest(&centroids, &norms, table.vector(id), table.norm(id));
            }
            let mut sums = vec![vec![0f64; dim]; clusters];
            for (i, &c) in assignment.iter().enumerate() {
                let id = NodeId(i as u32);
                let inv = 1.0 / table.norm(id);
                for (s, &x) in sums[c].iter_mut().zip(table.vector(id)) {
                    *s += x as f64 * inv;
                }
            }
            for (c, sum) in sums.into_iter().enumerate() {
                let len = sum.iter().map(|x| x * x).sum::<f64>().sqrt();
                // an emptied cluster keeps its previous centroid
                if len > 0.0 {
                    centroids[c] = sum.iter().map(|x| (x / len) as f32).collect();
                }
            }
        }
        let centroid_norms: Vec<f64> = centroids.iter().map(|c| norm(c)).collect();
        let mut members = vec![Vec::new(); clusters];
        for i in 0..n {
            let id = NodeId(i as u32);
            let c = nearest(&centroids, &centroid_norms, table.vector(id), table.norm(id));
            members[c].push(id);
        }
        Self {
            centroids,
            centroid_norms,
            members,
        }
    }

    fn probe(&self, query: &[f32], qn: f64, probes: usize) -> impl Iterator<Item = usize> {
        let mut scored: Vec<(NodeId, f64)> = self
            .centroids
            .iter()
            .zip(&self.centroid_norms)
            .enumerate()
            .map(|(c, (v, &vn))| (NodeId(c as u32), cosine_with_norms(query, v, qn, vn)))
            .collect();
        scored.sort_by(rank_order);
        scored.truncate(probes);
        scored.into_iter().map(|(c, _)| c.index())
    }
}

fn nearest(centroids: &[Vec<f32>], norms: &[f64], v: &[f32], vn: f64) -> usize {
    let mut best = 0;
    let mut best_score = f64::NEG_INFINITY;
    for (c, (cv, &cn)) in centroids.iter().zip(norms).enumerate() {
        let s = if cn > 0.0 {
            cosine_with_norms(v, cv, vn, cn)
        } else {
            -1.0
        };
        if s > best_score {
            best = c;
            best_score = s;
        }
    }
    best
}

/// Mean fraction of the exact top-`k` that `approx` also returns, over the
/// given query nodes.
pub fn recall_at_k(approx: &KnnIndex<'_>, exact: &KnnIndex<'_>, queries: &[NodeId], k: usize) -> Result<f64> {
    if queries.is_empty() {
        return Err(Error::Domain("recall needs at least one query".into()));
    }
    let mut total = 0.0;
    for &q in queries {
        let truth: Vec<NodeId> = exact.knn_node(q, k)?.into_iter().map(|(id, _)| id).collect();
        let got = approx.knn_node(q, k)?;
        let hit = got.iter().filter(|(id, _)| truth.contains(id)).count();
        total += hit as f64 / truth.len() as f64;
    }
    Ok(total / queries.len() as f64)
}
