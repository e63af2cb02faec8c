//! Training driver.
//!
//! Each epoch answers every training query and scores the surfaced answers
//! with a cross-entropy over squashed proof scores (gold tails as positives,
//! surfaced tails that are not known facts as negatives). Rule bodies are
//! harvested separately: each training fact is proved with the fact itself
//! hidden, by a wider search that tries `explore_top_m` relations per step.
//! Among the shortest sequences that prove a fact, those with the highest
//! confidence over the whole epoch (share of their answers that are known
//! facts) are kept, and the predictor is fitted to them by teacher forcing. When the adapter is enabled, the cross-entropy gradient
//! flows through the attaining cosine of each proof into a square matrix
//! applied to the frozen node embeddings.
//!
//! The learning rate is multiplied by `lr_decay` after any epoch whose dev
//! loss fails to decrease. Without a dev set the predictor's fitting loss is
//! watched instead.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::ReasonerConfig;
use crate::embedding::EmbeddingTable;
use crate::error::{Error, Result};
use crate::kg_store::{Ckg, NodeId, RelationId, RelationTable, Triple};
use crate::knn::KnnIndex;
use crate::predictor::{extract_training_sequences, Adapter, Checkpoint, PredictorShape, RelationPredictorParams};
use crate::reasoner::{squash, Engine, ProofState, Query, RankedAnswer, SCORE_FLOOR};

/// A query with its gold tails and the other tails known to be true.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingQuery {
    pub query: Query,
    pub gold: BTreeSet<NodeId>,
    /// Known-true tails that are not gold; never used as negatives.
    pub known: BTreeSet<NodeId>,
}

/// One query per `(head, relation)` of `g`, gold = all its tails.
pub fn queries_from_graph(g: &Ckg) -> Vec<TrainingQuery> {
    let mut grouped: BTreeMap<Query, BTreeSet<NodeId>> = BTreeMap::new();
    for t in g.triples() {
        grouped
            .entry(Query {
                relation: t.relation,
                head: t.head,
            })
            .or_default()
            .insert(t.tail);
    }
    grouped
        .into_iter()
        .map(|(query, gold)| TrainingQuery {
            query,
            gold,
            known: BTreeSet::new(),
        })
        .collect()
}

/// Queries for held-out forward triples in both directions. Tails already
/// in `train` for the same query are recorded as known.
pub fn heldout_queries(train: &Ckg, heldout: &[Triple]) -> Result<Vec<TrainingQuery>> {
    let rels = train.relations();
    let mut grouped: BTreeMap<Query, BTreeSet<NodeId>> = BTreeMap::new();
    for t in heldout {
        let inv = rels
            .inverse_of(t.relation)
            .ok_or_else(|| Error::Domain("held-out queries need an inverse-augmented graph".into()))?;
        grouped
            .entry(Query {
                relation: t.relation,
                head: t.head,
            })
            .or_default()
            .insert(t.tail);
        grouped
            .entry(Query {
                relation: inv,
                head: t.tail,
            })
            .or_default()
            .insert(t.head);
    }
    Ok(grouped
        .into_iter()
        .map(|(query, gold)| {
            let known = if train.nodes().contains(query.head) {
                train
                    .triples_with_head(query.head)
                    .map(|ts| {
                        ts.iter()
                            .filter(|t| t.relation == query.relation && !gold.contains(&t.tail))
                            .map(|t| t.tail)
                            .collect()
                    })
                    .unwrap_or_default()
            } else {
                BTreeSet::new()
            };
            TrainingQuery { query, gold, known }
        })
        .collect())
}

/// Cross-entropy of one query's answers against its gold set.
pub fn query_loss(answers: &[RankedAnswer], q: &TrainingQuery) -> f64 {
    answer_set_loss(answers.iter().map(|a| (a.tail, a.score)), q)
}

/// [`query_loss`] over raw `(tail, proof score)` pairs, one per tail.
pub fn answer_set_loss(answers: impl IntoIterator<Item = (NodeId, f64)>, q: &TrainingQuery) -> f64 {
    let mut loss = 0.0;
    let mut found = 0;
    for (tail, score) in answers {
        if q.gold.contains(&tail) {
            loss -= squash(score).ln();
            found += 1;
        } else if !q.known.contains(&tail) {
            loss -= (1.0 - squash(score)).ln();
        }
    }
    loss - (q.gold.len() - found) as f64 * SCORE_FLOOR.ln()
}

/// What one masked search says about the relation sequences it followed.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Harvest {
    /// Sequences with a fully unified proof of the target.
    pub candidates: Vec<Vec<RelationId>>,
    /// Per sequence: score mass on gold or known tails, and total mass.
    pub tallies: BTreeMap<Vec<RelationId>, (f64, f64)>,
}

/// Collect the candidate rule bodies for one gold tail of a query, given
/// proofs found with the query's own fact hidden, plus confidence tallies
/// for every sequence the search followed.
///
/// Only fully unified proofs, whose every step matched its frontier node
/// exactly, yield candidates. Bodies that follow a relation and then its
/// inverse are never candidates: they only step back into the neighbourhood
/// they came from.
///
/// A tally weighs each tail a sequence ends on by its clamped proof score,
/// so near-orthogonal soft matches barely count.
pub fn harvest(proofs: &[ProofState], q: &TrainingQuery, target: NodeId, relations: &RelationTable) -> Harvest {
    let mut per_seq: BTreeMap<Vec<RelationId>, HashMap<NodeId, f64>> = BTreeMap::new();
    let mut exact: BTreeSet<Vec<RelationId>> = BTreeSet::new();
    for p in proofs {
        let tail = p.tail().expect("deposited proofs have steps");
        let seq = p.relation_sequence();
        if tail == target && p.steps.iter().all(|s| s.frontier == s.triple.head) {
            exact.insert(seq.clone());
        }
        let e = per_seq.entry(seq).or_default().entry(tail).or_insert(f64::NEG_INFINITY);
        *e = e.max(p.score);
    }
    let mut out = Harvest::default();
    for (seq, reached) in per_seq {
        let backtracks = seq[1..].windows(2).any(|w| relations.inverse_of(w[0]) == Some(w[1]));
        if !backtracks && exact.contains(&seq) {
            out.candidates.push(seq.clone());
        }
        let mut tally = (0.0, 0.0);
        for (tail, s) in reached {
            let w = s.max(0.0);
            if q.gold.contains(&tail) || q.known.contains(&tail) {
                tally.0 += w;
            }
            tally.1 += w;
        }
        out.tallies.insert(seq, tally);
    }
    out
}

/// Sum tallies over many harvests into a confidence per sequence.
pub fn sequence_confidence<'a>(harvests: impl IntoIterator<Item = &'a Harvest>) -> BTreeMap<Vec<RelationId>, f64> {
    let mut sums: BTreeMap<Vec<RelationId>, (f64, f64)> = BTreeMap::new();
    for h in harvests {
        for (seq, (pos, total)) in &h.tallies {
            let e = sums.entry(seq.clone()).or_default();
            e.0 += pos;
            e.1 += total;
        }
    }
    sums.into_iter()
        .map(|(seq, (pos, total))| (seq, if total > 0.0 { pos / total } else { 0.0 }))
        .collect()
}

/// The shortest candidates of `h`, and among those the most confident.
pub fn select_candidates(h: &Harvest, confidence: &BTreeMap<Vec<RelationId>, f64>) -> Vec<Vec<RelationId>> {
    let conf = |s: &Vec<RelationId>| confidence.get(s).copied().unwrap_or(0.0);
    let Some(len) = h.candidates.iter().map(Vec::len).min() else {
        return Vec::new();
    };
    let shortest = || h.candidates.iter().filter(move |s| s.len() == len);
    let best = shortest().map(conf).fold(f64::NEG_INFINITY, f64::max);
    shortest().filter(|s| conf(s) >= best - 1e-12).cloned().collect()
}

/// Learning-rate schedule: decay whenever the monitored loss fails to
/// decrease, unless it is already at the perfect-fit level.
#[derive(Debug, Clone, PartialEq)]
pub struct LrSchedule {
    pub lr: f64,
    pub decay: f64,
    previous: Option<f64>,
}

/// Per-query loss at or below which a model counts as converged.
pub const CONVERGED_LOSS: f64 = 1e-4;

impl LrSchedule {
    pub fn new(lr: f64, decay: f64) -> Self {
        Self {
            lr,
            decay,
            previous: None,
        }
    }

    /// Sets the reference loss without adjusting the rate.
    pub fn prime(&mut self, loss: f64) {
        self.previous = Some(loss);
    }

    pub fn observe(&mut self, loss: f64) -> f64 {
        if let Some(prev) = self.previous {
            if loss >= prev && loss > CONVERGED_LOSS {
                self.lr *= self.decay;
            }
        }
        self.previous = Some(loss);
        self.lr
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochReport {
    pub epoch: usize,
    /// Mean per-query cross-entropy on training queries.
    pub train_loss: f64,
    /// Mean teacher-forcing loss of the predictor before this epoch's updates.
    pub predictor_loss: Option<f64>,
    pub dev_loss: Option<f64>,
    /// Learning rate after the schedule saw this epoch.
    pub lr: f64,
    pub harvested: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub initial_dev_loss: Option<f64>,
    pub epochs: Vec<EpochReport>,
}

/// Predictor shape implied by a config and graph.
pub fn predictor_shape(g: &Ckg, cfg: &ReasonerConfig) -> PredictorShape {
    PredictorShape {
        relations: g.relations().len(),
        relation_dim: cfg.relation_dim,
        step_dim: cfg.step_dim,
        hidden: cfg.hidden_dim,
        max_step: cfg.max_depth,
    }
}

/// Mean per-query loss of `queries` under the inference search.
pub fn mean_query_loss(engine: &Engine<'_>, queries: &[TrainingQuery], cfg: &ReasonerConfig) -> Result<f64> {
    if queries.is_empty() {
        return Ok(0.0);
    }
    let losses: Vec<f64> = queries
        .par_iter()
        .map(|q| Ok(query_loss(&engine.answer_query(q.query, cfg)?, q)))
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / queries.len() as f64)
}

struct QueryOutcome {
    loss: f64,
    /// `(dL/dscore, proof)` for answers that contribute to the loss.
    sensitivities: Vec<(f64, ProofState)>,
}

/// The fact `r(h, t)` behind a query and gold tail, with its inverse.
fn fact_and_inverse(g: &Ckg, q: Query, tail: NodeId) -> Result<[Triple; 2]> {
    let inv = g
        .relations()
        .inverse_of(q.relation)
        .ok_or_else(|| Error::Domain("training expects an inverse-augmented graph".into()))?;
    Ok([Triple::new(q.head, q.relation, tail), Triple::new(tail, inv, q.head)])
}

/// Trains the predictor (and adapter, if enabled) on `train`, which must be
/// inverse-augmented. `table` holds the frozen node embeddings.
pub fn train_reasoner(
    train: &Ckg,
    table: &EmbeddingTable,
    dev: &[TrainingQuery],
    cfg: &ReasonerConfig,
    mut on_epoch: impl FnMut(&EpochReport),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if !train.is_augmented() {
        return Err(Error::Domain("training expects an inverse-augmented graph".into()));
    }
    let mut predictor = RelationPredictorParams::init(predictor_shape(train, cfg), cfg.seed)?;
    let mut adapter = cfg.adapter_enabled.then(|| Adapter::identity(table.dim()));
    let queries = queries_from_graph(train);
    let mut schedule = LrSchedule::new(cfg.learning_rate, cfg.lr_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x005e_ed0f_7a1e);

    let view = |adapter: &Option<Adapter>| -> Result<Option<EmbeddingTable>> {
        adapter.as_ref().map(|a| table.transformed(&a.matrix)).transpose()
    };

    let initial_dev_loss = if dev.is_empty() {
        None
    } else {
        let transformed = view(&adapter)?;
        let t = transformed.as_ref().unwrap_or(table);
        let index = KnnIndex::exact(t);
        let engine = Engine::new(train, t, &index, &predictor)?;
        Some(mean_query_loss(&engine, dev, cfg)?)
    };
    if let Some(l) = initial_dev_loss {
        schedule.prime(l);
    }

    let mut reports = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let transformed = view(&adapter)?;
        let t = transformed.as_ref().unwrap_or(table);
        let index = KnnIndex::exact(t);
        let engine = Engine::new(train, t, &index, &predictor)?;

        let pairs: Vec<(usize, NodeId)> = queries
            .iter()
            .enumerate()
            .flat_map(|(i, q)| q.gold.iter().map(move |&t| (i, t)))
            .collect();
        let harvests: Vec<Harvest> = pairs
            .par_iter()
            .map(|&(i, target)| {
                let q = &queries[i];
                let mask = fact_and_inverse(train, q.query, target)?;
                let proofs = engine.search_masked(q.query, cfg, cfg.explore_top_m, &mask)?;
                Ok(harvest(&proofs, q, target, train.relations()))
            })
            .collect::<Result<_>>()?;
        let outcomes: Vec<QueryOutcome> = queries
            .par_iter()
            .map(|q| {
                let answers = engine.answer_query(q.query, cfg)?;
                let loss = query_loss(&answers, q);
                let sensitivities = if adapter.is_some() {
                    score_sensitivities(&answers, q)
                } else {
                    Vec::new()
                };
                Ok(QueryOutcome { loss, sensitivities })
            })
            .collect::<Result<_>>()?;

        let mut train_loss = 0.0;
        for (i, o) in outcomes.iter().enumerate() {
            if !o.loss.is_finite() {
                return Err(Error::Numerical(format!(
                    "epoch {epoch}: non-finite loss on training query {i} ({})",
                    train.nodes().text(queries[i].query.head)
                )));
            }
            train_loss += o.loss;
        }
        train_loss /= queries.len().max(1) as f64;

        let confidence = sequence_confidence(&harvests);
        let sequences: Vec<Vec<RelationId>> = harvests
            .iter()
            .flat_map(|h| select_candidates(h, &confidence))
            .collect();
        let mut examples = extract_training_sequences(&sequences);
        let predictor_loss = if examples.is_empty() {
            None
        } else {
            Some(predictor.loss(&examples)?)
        };
        examples.shuffle(&mut rng);
        for batch in examples.chunks(cfg.batch_size) {
            let (report, grads) = predictor.loss_and_grad(batch)?;
            if !report.loss.is_finite() {
                return Err(Error::Numerical(format!("epoch {epoch}: non-finite predictor loss")));
            }
            predictor.sgd_step(&grads, schedule.lr).map_err(|e| match e {
                Error::Numerical(m) => Error::Numerical(format!("epoch {epoch}: {m}")),
                other => other,
            })?;
        }

        if let Some(a) = adapter.as_mut() {
            let mut grad = vec![0.0; a.dim * a.dim];
            for o in &outcomes {
                for (dscore, proof) in &o.sensitivities {
                    accumulate_adapter_grad(table, a, proof, *dscore, &mut grad);
                }
            }
            let scale = schedule.lr / queries.len().max(1) as f64;
            if let Some(pos) = grad.iter().position(|g| !g.is_finite()) {
                return Err(Error::Numerical(format!(
                    "epoch {epoch}: non-finite adapter gradient at {pos}"
                )));
            }
            for (m, g) in a.matrix.iter_mut().zip(&grad) {
                *m -= scale * g;
            }
        }

        let dev_loss = if dev.is_empty() {
            None
        } else {
            let transformed = view(&adapter)?;
            let t = transformed.as_ref().unwrap_or(table);
            let index = KnnIndex::exact(t);
            let engine = Engine::new(train, t, &index, &predictor)?;
            let l = mean_query_loss(&engine, dev, cfg)?;
            if !l.is_finite() {
                return Err(Error::Numerical(format!("epoch {epoch}: non-finite dev loss")));
            }
            Some(l)
        };
        let lr = schedule.observe(dev_loss.or(predictor_loss).unwrap_or(train_loss));
        let report = EpochReport {
            epoch,
            train_loss,
            predictor_loss,
            dev_loss,
            lr,
            harvested: sequences.len(),
        };
        on_epoch(&report);
        reports.push(report);
    }

    Ok(TrainOutcome {
        checkpoint: Checkpoint { predictor, adapter },
        initial_dev_loss,
        epochs: reports,
    })
}

/// `dL/dscore` for every answer whose squashed score is not clamped.
fn score_sensitivities(answers: &[RankedAnswer], q: &TrainingQuery) -> Vec<(f64, ProofState)> {
    let mut out = Vec::new();
    for a in answers {
        let p = squash(a.score);
        let unclamped = p > SCORE_FLOOR && p < 1.0 - SCORE_FLOOR;
        if !unclamped {
            continue;
        }
        let dl_dp = if q.gold.contains(&a.tail) {
            -1.0 / p
        } else if q.known.contains(&a.tail) {
            continue;
        } else {
            1.0 / (1.0 - p)
        };
        out.push((dl_dp * 0.5, a.proof.clone()));
    }
    out
}

/// Proof score recomputed under `adapter`, with the pair that attains it:
/// the minimum over steps of `min(cos(frontier, head), cos(tail, hypothesis))`,
/// ties to the earliest pair.
pub fn proof_score_under(
    table: &EmbeddingTable,
    adapter: &Adapter,
    proof: &ProofState,
) -> (f64, Option<(NodeId, NodeId)>) {
    let mut best = (f64::INFINITY, None);
    for s in &proof.steps {
        for (a, b) in [(s.frontier, s.triple.head), (s.triple.tail, s.best_hypothesis)] {
            let c = adapted_cosine(table, adapter, a, b);
            if c < best.0 {
                best = (c, Some((a, b)));
            }
        }
    }
    best
}

fn apply(adapter: &Adapter, v: &[f32]) -> Vec<f64> {
    let d = adapter.dim;
    (0..d)
        .map(|r| {
            adapter.matrix[r * d..(r + 1) * d]
                .iter()
                .zip(v)
                .map(|(&m, &x)| m * x as f64)
                .sum()
        })
        .collect()
}

pub fn adapted_cosine(table: &EmbeddingTable, adapter: &Adapter, a: NodeId, b: NodeId) -> f64 {
    if a == b {
        return 1.0;
    }
    let u = apply(adapter, table.vector(a));
    let v = apply(adapter, table.vector(b));
    let uv: f64 = u.iter().zip(&v).map(|(x, y)| x * y).sum();
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    (uv / (nu * nv)).clamp(-1.0, 1.0)
}

/// Adds `coef * d cos(Ax, Ay) / dA` to `grad` (row-major `dim x dim`).
pub fn add_cosine_adapter_grad(
    table: &EmbeddingTable,
    adapter: &Adapter,
    a: NodeId,
    b: NodeId,
    coef: f64,
    grad: &mut [f64],
) {
    if a == b {
        return;
    }
    let x = table.vector(a);
    let y = table.vector(b);
    let u = apply(adapter, x);
    let v = apply(adapter, y);
    let uv: f64 = u.iter().zip(&v).map(|(p, q)| p * q).sum();
    let nu2: f64 = u.iter().map(|p| p * p).sum();
    let nv2: f64 = v.iter().map(|p| p * p).sum();
    let (nu, nv) = (nu2.sqrt(), nv2.sqrt());
    let c = uv / (nu * nv);
    // dc/du = v/(|u||v|) - c u/|u|^2, dc/dv symmetric; dA = dc/du x^T + dc/dv y^T
    let du: Vec<f64> = u.iter().zip(&v).map(|(p, q)| q / (nu * nv) - c * p / nu2).collect();
    let dv: Vec<f64> = u.iter().zip(&v).map(|(p, q)| p / (nu * nv) - c * q / nv2).collect();
    let d = adapter.dim;
    for r in 0..d {
        let row = &mut grad[r * d..(r + 1) * d];
        let (gu, gv) = (coef * du[r], coef * dv[r]);
        for ((g, &xi), &yi) in row.iter_mut().zip(x).zip(y) {
            *g += gu * xi as f64 + gv * yi as f64;
        }
    }
}

fn accumulate_adapter_grad(
    table: &EmbeddingTable,
    adapter: &Adapter,
    proof: &ProofState,
    dscore: f64,
    grad: &mut [f64],
) {
    if let (_, Some((a, b))) = proof_score_under(table, adapter, proof) {
        add_cosine_adapter_grad(table, adapter, a, b, dscore, grad);
    }
}
