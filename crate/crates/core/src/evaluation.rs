//! Filtered link-prediction metrics, bidirectional evaluation and dataset
//! statistics.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt::Write as _;

use rayon::prelude::*;

use crate::config::ReasonerConfig;
use crate::error::{Error, Result};
use crate::kg_store::{Ckg, NodeId, RelationTable, Triple};
use crate::reasoner::{squash, Engine, Query, SCORE_FLOOR};

/// Rank of `gold` among `scores`, ignoring `valid_others`. Ties count
/// against gold. A gold missing from `scores` takes the floor score.
pub fn filtered_rank(scores: &HashMap<NodeId, f64>, gold: NodeId, valid_others: &HashSet<NodeId>) -> usize {
    let g = scores.get(&gold).copied().unwrap_or(SCORE_FLOOR);
    1 + scores
        .iter()
        .filter(|&(e, &s)| *e != gold && !valid_others.contains(e) && s >= g)
        .count()
}

/// [`filtered_rank`] over entities `0..entity_count`, where entities missing
/// from `surfaced` hold the floor score.
pub fn sparse_filtered_rank(
    surfaced: &HashMap<NodeId, f64>,
    entity_count: usize,
    gold: NodeId,
    valid_others: &HashSet<NodeId>,
) -> usize {
    let g = surfaced.get(&gold).copied().unwrap_or(SCORE_FLOOR);
    let mut rank = 1 + surfaced
        .iter()
        .filter(|&(e, &s)| *e != gold && !valid_others.contains(e) && s >= g)
        .count();
    if SCORE_FLOOR >= g {
        let mut excluded: HashSet<NodeId> = surfaced.keys().copied().collect();
        excluded.extend(valid_others.iter().copied().filter(|e| e.index() < entity_count));
        if gold.index() < entity_count {
            excluded.insert(gold);
        }
        rank += entity_count - excluded.len();
    }
    rank
}

pub fn mrr(ranks: &[usize]) -> Result<f64> {
    if ranks.is_empty() {
        return Err(Error::Domain("mrr of an empty rank list".into()));
    }
    Ok(ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / ranks.len() as f64)
}

/// Fraction of ranks at or below `k`; 0 for an empty list.
pub fn hits_at(ranks: &[usize], k: usize) -> f64 {
    if ranks.is_empty() {
        return 0.0;
    }
    ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Direction {
    Forward,
    Inverse,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub query: Query,
    pub gold: NodeId,
    pub direction: Direction,
    pub rank: usize,
    /// True when the query could not be run and took the floor rank.
    pub failed: bool,
}

/// Every valid completion of `(head, relation)` across a set of graphs,
/// in both directions.
#[derive(Debug, Clone, Default)]
pub struct KnownFacts {
    tails: HashMap<Query, HashSet<NodeId>>,
}

impl KnownFacts {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds forward triple `t` and its inverse under `relations`.
    pub fn insert(&mut self, relations: &RelationTable, t: &Triple) -> Result<()> {
        let inv = relations
            .inverse_of(t.relation)
            .ok_or_else(|| Error::Domain("known facts need an inverse-augmented relation table".into()))?;
        self.tails
            .entry(Query {
                relation: t.relation,
                head: t.head,
            })
            .or_default()
            .insert(t.tail);
        self.tails
            .entry(Query {
                relation: inv,
                head: t.tail,
            })
            .or_default()
            .insert(t.head);
        Ok(())
    }

    pub fn from_graphs<'a>(relations: &RelationTable, graphs: impl IntoIterator<Item = &'a Ckg>) -> Result<Self> {
        let mut k = Self::new();
        for g in graphs {
            for t in g.forward_triples() {
                k.insert(relations, t)?;
            }
        }
        Ok(k)
    }

    /// Valid tails of `q` other than `gold`.
    pub fn others(&self, q: Query, gold: NodeId) -> HashSet<NodeId> {
        self.tails
            .get(&q)
            .map(|s| s.iter().copied().filter(|&e| e != gold).collect())
            .unwrap_or_default()
    }
}

/// Anything that scores answers to a query. Entities not returned hold the
/// floor score.
pub trait QueryScorer: Sync {
    fn score(&self, q: Query) -> Result<HashMap<NodeId, f64>>;
    /// Whether `node` can take part in a query at all.
    fn covers(&self, node: NodeId) -> bool;
}

/// Scores queries with the reasoner, mapping proof scores through
/// [`squash`].
pub struct EngineScorer<'a, 'e> {
    pub engine: &'a Engine<'e>,
    pub cfg: &'a ReasonerConfig,
}

impl QueryScorer for EngineScorer<'_, '_> {
    fn score(&self, q: Query) -> Result<HashMap<NodeId, f64>> {
        Ok(self
            .engine
            .answer_query(q, self.cfg)?
            .into_iter()
            .map(|a| (a.tail, squash(a.score)))
            .collect())
    }

    fn covers(&self, node: NodeId) -> bool {
        self.engine.table.contains(node)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Metrics {
    pub mrr: f64,
    pub hits1: f64,
    pub hits3: f64,
    pub hits10: f64,
}

impl Metrics {
    fn from_ranks(ranks: &[usize]) -> Self {
        if ranks.is_empty() {
            return Self::default();
        }
        Self {
            mrr: mrr(ranks).expect("non-empty"),
            hits1: hits_at(ranks, 1),
            hits3: hits_at(ranks, 3),
            hits10: hits_at(ranks, 10),
        }
    }

    fn average(a: &Self, b: &Self) -> Self {
        Self {
            mrr: (a.mrr + b.mrr) / 2.0,
            hits1: (a.hits1 + b.hits1) / 2.0,
            hits3: (a.hits3 + b.hits3) / 2.0,
            hits10: (a.hits10 + b.hits10) / 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub triples: usize,
    /// Test triples with an endpoint the scorer cannot handle.
    pub failures: usize,
    pub overall: Metrics,
    pub forward: Metrics,
    pub inverse: Metrics,
    /// Forward and inverse records for each test triple, in input order.
    pub records: Vec<EvalRecord>,
}

fn pct(x: f64) -> String {
    format!("{:.2}", 100.0 * x)
}

impl EvalReport {
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{} triples evaluated", self.triples);
        let _ = writeln!(out, "hard failures: {}", self.failures);
        let m = &self.overall;
        let _ = writeln!(out, "MRR: {}", pct(m.mrr));
        let _ = writeln!(out, "HITS@1: {}", pct(m.hits1));
        let _ = writeln!(out, "HITS@3: {}", pct(m.hits3));
        let _ = writeln!(out, "HITS@10: {}", pct(m.hits10));
        for (name, m) in [("forward", &self.forward), ("inverse", &self.inverse)] {
            let _ = writeln!(
                out,
                "{name}: MRR {} HITS@1 {} HITS@3 {} HITS@10 {}",
                pct(m.mrr),
                pct(m.hits1),
                pct(m.hits3),
                pct(m.hits10)
            );
        }
        out
    }

    /// `key<TAB>value` lines.
    pub fn render_tsv(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "triples\t{}", self.triples);
        let _ = writeln!(out, "failures\t{}", self.failures);
        for (prefix, m) in [
            ("", &self.overall),
            ("forward_", &self.forward),
            ("inverse_", &self.inverse),
        ] {
            let _ = writeln!(out, "{prefix}MRR\t{}", pct(m.mrr));
            let _ = writeln!(out, "{prefix}HITS@1\t{}", pct(m.hits1));
            let _ = writeln!(out, "{prefix}HITS@3\t{}", pct(m.hits3));
            let _ = writeln!(out, "{prefix}HITS@10\t{}", pct(m.hits10));
        }
        out
    }
}

/// Scores `(h, r, ?)` and `(t, r^-1, ?)` for every forward test triple and
/// averages the two directions. `entity_count` is the number of candidate
/// answers; an unscorable triple takes rank `entity_count` both ways.
pub fn evaluate(
    scorer: &impl QueryScorer,
    test: &[Triple],
    known: &KnownFacts,
    relations: &RelationTable,
    entity_count: usize,
) -> Result<EvalReport> {
    let per_triple: Vec<[EvalRecord; 2]> = test
        .par_iter()
        .map(|t| {
            let inv = relations
                .inverse_of(t.relation)
                .ok_or_else(|| Error::Domain("evaluation needs an inverse-augmented relation table".into()))?;
            let dirs = [
                (
                    Direction::Forward,
                    Query {
                        relation: t.relation,
                        head: t.head,
                    },
                    t.tail,
                ),
                (
                    Direction::Inverse,
                    Query {
                        relation: inv,
                        head: t.tail,
                    },
                    t.head,
                ),
            ];
            let failed = !(scorer.covers(t.head) && scorer.covers(t.tail));
            let mut out = Vec::with_capacity(2);
            for (direction, query, gold) in dirs {
                let rank = if failed {
                    entity_count.max(1)
                } else {
                    let scores = scorer.score(query)?;
                    sparse_filtered_rank(&scores, entity_count, gold, &known.others(query, gold))
                };
                out.push(EvalRecord {
                    query,
                    gold,
                    direction,
                    rank,
                    failed,
                });
            }
            let [a, b]: [EvalRecord; 2] = out.try_into().expect("two directions");
            Ok([a, b])
        })
        .collect::<Result<_>>()?;

    let fwd: Vec<usize> = per_triple.iter().map(|[f, _]| f.rank).collect();
    let inv: Vec<usize> = per_triple.iter().map(|[_, i]| i.rank).collect();
    let forward = Metrics::from_ranks(&fwd);
    let inverse = Metrics::from_ranks(&inv);
    Ok(EvalReport {
        triples: test.len(),
        failures: per_triple.iter().filter(|[f, _]| f.failed).count(),
        overall: Metrics::average(&forward, &inverse),
        forward,
        inverse,
        records: per_triple.into_iter().flatten().collect(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetStats {
    pub node_count: usize,
    pub edge_count: usize,
    pub avg_in_degree: f64,
    /// `edges / (nodes * (nodes - 1))`.
    pub density: f64,
    pub unseen_node_ratio: f64,
    pub unseen_edge_ratio: f64,
    pub relation_count: usize,
}

impl DatasetStats {
    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "nodes\t{}", self.node_count);
        let _ = writeln!(out, "edges\t{}", self.edge_count);
        let _ = writeln!(out, "relations\t{}", self.relation_count);
        let _ = writeln!(out, "avg_in_degree\t{:.4}", self.avg_in_degree);
        let _ = writeln!(out, "density |E|/(|N|(|N|-1))\t{:.3e}", self.density);
        let _ = writeln!(out, "unseen_nodes\t{:.4}", self.unseen_node_ratio);
        let _ = writeln!(out, "unseen_edges\t{:.4}", self.unseen_edge_ratio);
        out
    }
}

fn endpoint_texts(g: &Ckg) -> HashSet<&str> {
    g.forward_triples()
        .flat_map(|t| [g.nodes().text(t.head), g.nodes().text(t.tail)])
        .collect()
}

/// Table-style statistics over the forward triples of `train` and `test`
/// together. The graphs may use different registries; identity is by text.
pub fn compute_stats(train: &Ckg, test: &Ckg) -> DatasetStats {
    let key = |g: &Ckg, t: &Triple| {
        (
            g.nodes().text(t.head).to_owned(),
            g.relations().get(t.relation).name.clone(),
            g.nodes().text(t.tail).to_owned(),
        )
    };
    let mut edges: HashSet<(String, String, String)> = train.forward_triples().map(|t| key(train, t)).collect();
    edges.extend(test.forward_triples().map(|t| key(test, t)));
    let nodes: HashSet<&str> = edges.iter().flat_map(|(h, _, t)| [h.as_str(), t.as_str()]).collect();
    let relations: HashSet<&str> = edges.iter().map(|(_, r, _)| r.as_str()).collect();

    let train_nodes = endpoint_texts(train);
    let test_nodes = endpoint_texts(test);
    let unseen_nodes = test_nodes.iter().filter(|n| !train_nodes.contains(*n)).count();
    let test_edges: Vec<&Triple> = test.forward_triples().collect();
    let unseen_edges = test_edges
        .iter()
        .filter(|t| {
            !train_nodes.contains(test.nodes().text(t.head)) || !train_nodes.contains(test.nodes().text(t.tail))
        })
        .count();

    let n = nodes.len();
    let e = edges.len();
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    DatasetStats {
        node_count: n,
        edge_count: e,
        avg_in_degree: ratio(e, n),
        density: if n < 2 {
            0.0
        } else {
            e as f64 / (n as f64 * (n as f64 - 1.0))
        },
        unseen_node_ratio: ratio(unseen_nodes, test_nodes.len()),
        unseen_edge_ratio: ratio(unseen_edges, test_edges.len()),
        relation_count: relations.len(),
    }
}

/// Forward test triples with at least one endpoint that never appears in a
/// train triple. Both graphs must share one registry.
pub fn carve_unseen_split(train: &Ckg, test: &[Triple]) -> Vec<Triple> {
    let seen: BTreeSet<NodeId> = train.forward_triples().flat_map(|t| [t.head, t.tail]).collect();
    test.iter()
        .filter(|t| !seen.contains(&t.head) || !seen.contains(&t.tail))
        .copied()
        .collect()
}

/// A scorer that ranks the gold answers of `facts` first; for tests and
/// sanity checks of the metric pipeline.
pub struct OracleScorer<'a> {
    pub facts: &'a KnownFacts,
}

impl QueryScorer for OracleScorer<'_> {
    fn score(&self, q: Query) -> Result<HashMap<NodeId, f64>> {
        Ok(self
            .facts
            .tails
            .get(&q)
            .map(|s| s.iter().map(|&e| (e, 1.0)).collect())
            .unwrap_or_default())
    }

    fn covers(&self, _: NodeId) -> bool {
        true
    }
}
