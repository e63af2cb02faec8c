//! One weak-unification step.
//!
//! From the frontier node `t` of a partial proof whose rightmost atom is
//! `r(t, X)`: retrieve the nearest nodes to `t`, pool their outgoing triples
//! into a candidate set, take every candidate tail as a hypothesis for `X`,
//! and score each (candidate, hypothesis) pair as
//!
//! ```text
//! U[i][j] = min(cos(t, head_i), cos(tail_i, h_j))
//! ```
//!
//! i.e. both argument matches conjoined under the min t-norm. A candidate's
//! score is its row maximum.

use std::fmt;

use crate::embedding::EmbeddingTable;
use crate::error::{Error, Result};
use crate::kg_store::{Ckg, NodeId, RelationId, Triple};
use crate::knn::KnnIndex;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Term {
    Var(String),
    Const(NodeId),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Atom {
    pub relation: RelationId,
    pub arg1: Term,
    pub arg2: Term,
}

impl Atom {
    pub fn is_ground(&self) -> bool {
        matches!((&self.arg1, &self.arg2), (Term::Const(_), Term::Const(_)))
    }
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Term::Var(name) => f.write_str(name),
            Term::Const(id) => write!(f, "{id}"),
        }
    }
}

/// Candidate triples pooled from the frontier's nearest neighbours.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CandidateSet {
    /// Ascending indices into the graph's triple list.
    indices: Vec<usize>,
    triples: Vec<Triple>,
    pub source_nodes: Vec<NodeId>,
}

impl CandidateSet {
    /// Builds a set from triple indices in any order; duplicates collapse.
    pub fn from_indices(g: &Ckg, indices: impl IntoIterator<Item = usize>, source_nodes: Vec<NodeId>) -> Self {
        let mut indices: Vec<usize> = indices.into_iter().collect();
        indices.sort_unstable();
        indices.dedup();
        let triples = indices.iter().map(|&i| g.triple(i)).collect();
        Self {
            indices,
            triples,
            source_nodes,
        }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn triples(&self) -> &[Triple] {
        &self.triples
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    /// Keeps only the triples over `relation`.
    pub fn filter_relation(&self, relation: RelationId) -> Self {
        let (indices, triples) = self
            .indices
            .iter()
            .zip(&self.triples)
            .filter(|(_, t)| t.relation == relation)
            .map(|(&i, &t)| (i, t))
            .unzip();
        Self {
            indices,
            triples,
            source_nodes: self.source_nodes.clone(),
        }
    }

    /// Drops triples that satisfy `pred`.
    pub fn without(&self, mut pred: impl FnMut(&Triple) -> bool) -> Self {
        let (indices, triples) = self
            .indices
            .iter()
            .zip(&self.triples)
            .filter(|(_, t)| !pred(t))
            .map(|(&i, &t)| (i, t))
            .unzip();
        Self {
            indices,
            triples,
            source_nodes: self.source_nodes.clone(),
        }
    }
}

/// Pools the outgoing triples of the `k_nodes` nearest neighbours of
/// `frontier` (the frontier itself included, as its own nearest neighbour).
pub fn gather_candidates(g: &Ckg, index: &KnnIndex<'_>, frontier: NodeId, k_nodes: usize) -> Result<CandidateSet> {
    let neighbours = index.knn_node(frontier, k_nodes)?;
    let source_nodes: Vec<NodeId> = neighbours.into_iter().map(|(id, _)| id).collect();
    let indices: Vec<usize> = source_nodes.iter().flat_map(|&v| g.head_range(v)).collect();
    Ok(CandidateSet::from_indices(g, indices, source_nodes))
}

/// Distinct candidate tails, ascending.
pub fn build_hypotheses(c: &CandidateSet) -> Vec<NodeId> {
    let mut tails: Vec<NodeId> = c.triples.iter().map(|t| t.tail).collect();
    tails.sort_unstable();
    tails.dedup();
    tails
}

/// The `|C| x |H|` similarity matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct UnificationMatrix {
    rows: usize,
    scores: Vec<f64>,
    pub hypotheses: Vec<NodeId>,
}

impl UnificationMatrix {
    pub fn new(rows: usize, scores: Vec<f64>, hypotheses: Vec<NodeId>) -> Result<Self> {
        if scores.len() != rows * hypotheses.len() {
            return Err(Error::Shape(format!(
                "{} scores for a {}x{} matrix",
                scores.len(),
                rows,
                hypotheses.len()
            )));
        }
        Ok(Self {
            rows,
            scores,
            hypotheses,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.hypotheses.len()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.scores[i * self.cols() + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.scores[i * c..(i + 1) * c]
    }

    /// Row maximum and the first column attaining it.
    pub fn row_max(&self, i: usize) -> (f64, usize) {
        let mut best = (f64::NEG_INFINITY, 0);
        for (j, &s) in self.row(i).iter().enumerate() {
            if s > best.0 {
                best = (s, j);
            }
        }
        best
    }
}

pub fn score_matrix(
    table: &EmbeddingTable,
    c: &CandidateSet,
    hypotheses: &[NodeId],
    frontier: NodeId,
) -> Result<UnificationMatrix> {
    if c.is_empty() || hypotheses.is_empty() {
        return Err(Error::Domain(
            "score_matrix needs at least one candidate and hypothesis".into(),
        ));
    }
    let check = |id: NodeId| {
        if table.contains(id) {
            Ok(())
        } else {
            Err(Error::Domain(format!("node {} has no embedding", id.0)))
        }
    };
    check(frontier)?;
    for &h in hypotheses {
        check(h)?;
    }
    let mut scores = Vec::with_capacity(c.len() * hypotheses.len());
    for t in &c.triples {
        check(t.head)?;
        check(t.tail)?;
        let head_match = table.cosine(frontier, t.head);
        scores.extend(hypotheses.iter().map(|&h| head_match.min(table.cosine(t.tail, h))));
    }
    UnificationMatrix::new(c.len(), scores, hypotheses.to_vec())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredCandidate {
    /// Index of the triple in the graph.
    pub index: usize,
    pub triple: Triple,
    pub score: f64,
    pub best_hypothesis: NodeId,
}

/// Scores candidates by row maximum, sorts (score desc, triple index asc) and
/// keeps the best `k_triples`.
pub fn select_candidates(u: &UnificationMatrix, c: &CandidateSet, k_triples: usize) -> Result<Vec<ScoredCandidate>> {
    if u.rows() != c.len() {
        return Err(Error::Shape(format!(
            "matrix has {} rows but there are {} candidates",
            u.rows(),
            c.len()
        )));
    }
    let mut out: Vec<ScoredCandidate> = (0..c.len())
        .map(|i| {
            let (score, j) = u.row_max(i);
            ScoredCandidate {
                index: c.indices[i],
                triple: c.triples[i],
                score,
                best_hypothesis: u.hypotheses[j],
            }
        })
        .collect();
    out.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.index.cmp(&b.index)));
    out.truncate(k_triples);
    Ok(out)
}
