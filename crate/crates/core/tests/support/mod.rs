//! Fixtures and brute-force oracles shared by the integration and
//! acceptance tests.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet, HashMap};

use ckg_core::config::ReasonerConfig;
use ckg_core::embedding::{hash_embed, EmbeddingTable};
use ckg_core::evaluation::{evaluate, sparse_filtered_rank, EngineScorer, EvalReport, KnownFacts, QueryScorer};
use ckg_core::kg_store::{Ckg, NodeId, RelationId, Triple, Vocab};
use ckg_core::knn::KnnIndex;
use ckg_core::predictor::{PredictorShape, RelationPredictorParams, TrainingExample};
use ckg_core::reasoner::{Engine, Query};
use ckg_core::train::train_reasoner;
use ckg_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random inverse-augmented graph with `nodes` nodes named `n0..` and
/// relations `r0..`.
pub fn random_graph(rng: &mut ChaCha8Rng, nodes: usize, relations: usize, triples: usize) -> Ckg {
    let names: Vec<String> = (0..nodes).map(|i| format!("n{i}")).collect();
    let rels: Vec<String> = (0..relations).map(|i| format!("r{i}")).collect();
    let mut raw = Vec::new();
    for _ in 0..triples {
        let h = rng.random_range(0..nodes);
        let t = rng.random_range(0..nodes);
        let r = rng.random_range(0..relations);
        raw.push((names[h].clone(), rels[r].clone(), names[t].clone()));
    }
    Ckg::from_text_triples(raw.iter().map(|(h, r, t)| (h.as_str(), r.as_str(), t.as_str())), None)
        .unwrap()
        .add_inverse_relations()
        .unwrap()
}

pub fn hash_table(g: &Ckg, dim: usize, seed: u64) -> EmbeddingTable {
    hash_embed(g.nodes(), dim, seed).unwrap()
}

pub fn small_predictor(g: &Ckg, max_step: usize, seed: u64) -> RelationPredictorParams {
    let shape = PredictorShape {
        relations: g.relations().len(),
        relation_dim: 4,
        step_dim: 4,
        hidden: 8,
        max_step,
    };
    RelationPredictorParams::init(shape, seed).unwrap()
}

/// Walks every relation-filtered path of length `1..=depth` from the query
/// head, following the predictor's top-`m` relations at each step, never
/// revisiting the head or an earlier tail. A triple matched from frontier
/// `f` scores `cos(f, head)`; a path scores the minimum of its steps.
/// Returns the best score per tail, ordered by score then node id.
pub fn oracle_answers(
    g: &Ckg,
    table: &EmbeddingTable,
    predictor: &RelationPredictorParams,
    q: Query,
    top_m: usize,
    depth: usize,
) -> (Vec<(NodeId, f64)>, Vec<usize>) {
    let mut best: BTreeMap<NodeId, f64> = BTreeMap::new();
    let mut per_depth = vec![0usize; depth + 1];
    let mut visited = vec![q.head];
    walk(
        g,
        table,
        predictor,
        top_m,
        depth,
        q.head,
        q.relation,
        1,
        f64::INFINITY,
        &mut visited,
        &mut best,
        &mut per_depth,
    );
    let mut out: Vec<(NodeId, f64)> = best.into_iter().collect();
    out.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    (out, per_depth)
}

#[allow(clippy::too_many_arguments)]
fn walk(
    g: &Ckg,
    table: &EmbeddingTable,
    predictor: &RelationPredictorParams,
    top_m: usize,
    depth: usize,
    frontier: NodeId,
    prev: RelationId,
    step: usize,
    score: f64,
    visited: &mut Vec<NodeId>,
    best: &mut BTreeMap<NodeId, f64>,
    per_depth: &mut [usize],
) {
    if step > depth {
        return;
    }
    for (rel, _) in predictor.topm(prev, step, top_m).unwrap() {
        for t in g.triples().iter().filter(|t| t.relation == rel) {
            if visited.contains(&t.tail) {
                continue;
            }
            let s = score.min(table.cosine(frontier, t.head));
            per_depth[step] += 1;
            let e = best.entry(t.tail).or_insert(f64::NEG_INFINITY);
            if s > *e {
                *e = s;
            }
            visited.push(t.tail);
            walk(
                g,
                table,
                predictor,
                top_m,
                depth,
                t.tail,
                rel,
                step + 1,
                s,
                visited,
                best,
                per_depth,
            );
            visited.pop();
        }
    }
}

/// Retrieval knobs wide enough that the beam search keeps every path.
pub fn exhaustive_config(g: &Ckg, depth: usize, top_m: usize, beam: usize) -> ReasonerConfig {
    ReasonerConfig {
        max_depth: depth,
        k_nodes: g.nodes().len(),
        k_triples: g.len().max(1),
        k_answers: g.nodes().len(),
        beam_width: beam.max(1),
        top_m_relations: top_m,
        ..ReasonerConfig::default()
    }
}

/// Central-difference check of `loss_and_grad`.
pub struct GradCheck {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates whose perturbation flips the sign of some hidden
    /// pre-activation: the loss has a ReLU kink inside `[-eps, +eps]`, so
    /// the central difference does not estimate a derivative there.
    pub kinks: usize,
}

/// Signs of both hidden layers' pre-activations over a batch, recomputed
/// from the public parameters.
fn relu_pattern(p: &RelationPredictorParams, batch: &[TrainingExample]) -> Vec<bool> {
    let affine = |w: &ckg_core::predictor::Matrix, b: &ckg_core::predictor::Matrix, x: &[f64]| -> Vec<f64> {
        (0..w.rows)
            .map(|r| w.row(r).iter().zip(x).map(|(a, v)| a * v).sum::<f64>() + b.data[r])
            .collect()
    };
    let mut out = Vec::new();
    for e in batch {
        let mut x = p.relation_embeddings.row(e.prev.index()).to_vec();
        x.extend_from_slice(p.step_embeddings.row(e.step));
        let z1 = affine(&p.w1, &p.b1, &x);
        let h1: Vec<f64> = z1.iter().map(|v| v.max(0.0)).collect();
        let z2 = affine(&p.w2, &p.b2, &h1);
        out.extend(z1.iter().chain(&z2).map(|&v| v > 0.0));
    }
    out
}

pub fn grad_check(params: &RelationPredictorParams, batch: &[TrainingExample], eps: f64) -> GradCheck {
    let (_, grads) = params.loss_and_grad(batch).unwrap();
    let base = relu_pattern(params, batch);
    let mut out = GradCheck {
        max_rel_error: 0.0,
        checked: 0,
        kinks: 0,
    };
    let mut p = params.clone();
    for ti in 0..8 {
        for k in 0..params.tensors()[ti].data.len() {
            let orig = params.tensors()[ti].data[k];
            p.tensors_mut()[ti].data[k] = orig + eps;
            let fp = p.loss(batch).unwrap();
            let kink_p = relu_pattern(&p, batch) != base;
            p.tensors_mut()[ti].data[k] = orig - eps;
            let fm = p.loss(batch).unwrap();
            let kink_m = relu_pattern(&p, batch) != base;
            p.tensors_mut()[ti].data[k] = orig;
            if kink_p || kink_m {
                out.kinks += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * eps);
            let analytic = grads.tensors()[ti].data[k];
            let scale = analytic.abs().max(numeric.abs()).max(1e-6);
            out.max_rel_error = out.max_rel_error.max((analytic - numeric).abs() / scale);
            out.checked += 1;
        }
    }
    out
}

pub fn random_batch(rng: &mut ChaCha8Rng, relations: usize, max_step: usize, len: usize) -> Vec<TrainingExample> {
    (0..len)
        .map(|_| TrainingExample {
            prev: RelationId(rng.random_range(0..relations) as u32),
            step: rng.random_range(1..=max_step),
            gold: RelationId(rng.random_range(0..relations) as u32),
        })
        .collect()
}

/// Corpus generated by the transitive rule `r(X,Y) :- r(X,Z), r(Z,Y)`.
pub struct TransitiveCorpus {
    /// Inverse-augmented training graph.
    pub train: Ckg,
    /// Forward held-out 2-hop facts, in the training registry.
    pub heldout: Vec<Triple>,
    /// Every true fact (train and held-out closure), forward only.
    pub closure: Ckg,
}

/// Disjoint `r`-chains of length `chain_len` plus random `s` distractor
/// edges. Train keeps every chain edge and, for each 2-hop fact, keeps it
/// with probability `keep`; the rest are held out. Longer closure facts
/// stay in train.
pub fn transitive_corpus(
    seed: u64,
    chains: usize,
    chain_len: usize,
    distractors: usize,
    keep: f64,
) -> TransitiveCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let name = |c: usize, i: usize| format!("c{c}v{i}");
    let mut train: Vec<(String, String, String)> = Vec::new();
    let mut held: Vec<(String, String, String)> = Vec::new();
    let mut closure: Vec<(String, String, String)> = Vec::new();
    for c in 0..chains {
        for i in 0..chain_len {
            for j in i + 1..chain_len {
                let t = (name(c, i), "r".to_string(), name(c, j));
                closure.push(t.clone());
                match j - i {
                    1 => train.push(t),
                    2 if !rng.random_bool(keep) => held.push(t),
                    _ => train.push(t),
                }
            }
        }
    }
    let total = chains * chain_len;
    for _ in 0..distractors {
        let a = rng.random_range(0..total);
        let b = rng.random_range(0..total);
        if a != b {
            let t = (
                name(a / chain_len, a % chain_len),
                "s".to_string(),
                name(b / chain_len, b % chain_len),
            );
            closure.push(t.clone());
            train.push(t);
        }
    }
    let mut train_fwd =
        Ckg::from_text_triples(train.iter().map(|(h, r, t)| (h.as_str(), r.as_str(), t.as_str())), None).unwrap();
    let mut vocab: Vocab = train_fwd.vocab().clone();
    // held-out facts only use chain nodes, all of which occur in train
    for (h, _, t) in held.iter().chain(&closure) {
        vocab.nodes.intern(h);
        vocab.nodes.intern(t);
    }
    train_fwd.adopt_vocab(vocab.clone()).unwrap();
    let train = train_fwd.add_inverse_relations().unwrap();
    let rel_r = train.relations().lookup("r").unwrap();
    let heldout: Vec<Triple> = held
        .iter()
        .map(|(h, _, t)| Triple::new(train.nodes().get(h).unwrap(), rel_r, train.nodes().get(t).unwrap()))
        .collect();
    let closure = Ckg::from_text_triples(
        closure.iter().map(|(h, r, t)| (h.as_str(), r.as_str(), t.as_str())),
        Some(train.vocab().clone()),
    )
    .unwrap();
    TransitiveCorpus {
        train,
        heldout,
        closure,
    }
}

/// Result of training on one transitive corpus.
#[derive(Debug, Clone, Copy)]
pub struct LearnabilityRun {
    /// Held-out queries (both directions) whose gold tail ranks first.
    pub top1: usize,
    pub queries: usize,
    /// Whether `topm(r, 2, 1)` names `r` after training.
    pub probe_ok: bool,
}

/// Train on `transitive_corpus(seed, 6, 5, 12, 0.5)` and score the held-out
/// 2-hop facts, filtered against the full closure.
pub fn learnability_run(seed: u64, epochs: usize) -> LearnabilityRun {
    let corpus = transitive_corpus(seed, 6, 5, 12, 0.5);
    let g = &corpus.train;
    let table = hash_table(g, 64, seed);
    let cfg = ReasonerConfig {
        epochs,
        learning_rate: 0.3,
        explore_top_m: g.relations().len(),
        relation_dim: 8,
        step_dim: 8,
        hidden_dim: 16,
        batch_size: 32,
        seed,
        ..Default::default()
    };
    let out = train_reasoner(g, &table, &[], &cfg, |_| {}).unwrap();
    let predictor = &out.checkpoint.predictor;
    let index = KnnIndex::exact(&table);
    let engine = Engine::new(g, &table, &index, predictor).unwrap();
    let known = KnownFacts::from_graphs(g.relations(), [&corpus.closure]).unwrap();
    let scorer = EngineScorer {
        engine: &engine,
        cfg: &cfg,
    };
    let r = g.relations().lookup("r").unwrap();
    let r_inv = g.relations().inverse_of(r).unwrap();
    let mut run = LearnabilityRun {
        top1: 0,
        queries: 0,
        probe_ok: predictor.topm(r, 2, 1).unwrap()[0].0 == r,
    };
    for t in &corpus.heldout {
        let directions = [
            (
                Query {
                    relation: r,
                    head: t.head,
                },
                t.tail,
            ),
            (
                Query {
                    relation: r_inv,
                    head: t.tail,
                },
                t.head,
            ),
        ];
        for (q, gold) in directions {
            let scores = scorer.score(q).unwrap();
            let rank = sparse_filtered_rank(&scores, g.nodes().len(), gold, &known.others(q, gold));
            run.queries += 1;
            run.top1 += usize::from(rank == 1);
        }
    }
    run
}

/// Training fixture built around "Alex thanks Jesse":
/// several xIntent chains whose 2-hop closure is in train, plus the query
/// chain whose closure edge is missing, and some distractor relations.
pub const GRATITUDE_TRAIN: &str = "\
Alex thanks Jesse\txIntent\tAlex shows appreciation
Alex shows appreciation\txIntent\tto express gratitude
Alex drives Jesse there\txIntent\tAlex helps Jesse
Alex helps Jesse\txIntent\tto be of assistance
Alex drives Jesse there\txIntent\tto be of assistance
Alex cooks dinner\txIntent\tAlex feeds the family
Alex feeds the family\txIntent\tto care for others
Alex cooks dinner\txIntent\tto care for others
Alex studies hard\txIntent\tAlex passes the exam
Alex passes the exam\txIntent\tto graduate
Alex studies hard\txIntent\tto graduate
Alex saves money\txIntent\tAlex buys a house
Alex buys a house\txIntent\tto have a home
Alex saves money\txIntent\tto have a home
Alex thanks Jesse\txReact\tgrateful
Alex drives Jesse there\txWant\tto go home
Alex helps Jesse\toEffect\tJesse feels better
Alex cooks dinner\txNeed\tto buy groceries
Alex studies hard\txReact\ttired
Alex buys a house\txWant\tto move in
";

pub fn gratitude_graph() -> Ckg {
    Ckg::parse_triples(GRATITUDE_TRAIN, std::path::Path::new("gratitude"), None)
        .unwrap()
        .add_inverse_relations()
        .unwrap()
}

pub fn node_set(ids: impl IntoIterator<Item = NodeId>) -> BTreeSet<NodeId> {
    ids.into_iter().collect()
}

/// Train on [`GRATITUDE_TRAIN`], ask `xIntent(Alex thanks Jesse, ?)` and return
/// the explanation of the answer "to express gratitude", if it surfaces.
pub fn gratitude_explanation(seed: u64) -> Option<String> {
    let g = gratitude_graph();
    let table = hash_table(&g, 64, seed);
    let cfg = ReasonerConfig {
        epochs: 30,
        learning_rate: 0.3,
        explore_top_m: g.relations().len(),
        relation_dim: 8,
        step_dim: 8,
        hidden_dim: 16,
        batch_size: 32,
        seed,
        ..Default::default()
    };
    let out = train_reasoner(&g, &table, &[], &cfg, |_| {}).unwrap();
    let index = KnnIndex::exact(&table);
    let engine = Engine::new(&g, &table, &index, &out.checkpoint.predictor).unwrap();
    let q = Query {
        relation: g.relations().lookup("xIntent").unwrap(),
        head: g.nodes().get("Alex thanks Jesse").unwrap(),
    };
    let target = g.nodes().get("to express gratitude").unwrap();
    engine
        .answer_query(q, &cfg)
        .unwrap()
        .iter()
        .find(|a| a.tail == target)
        .map(|a| ckg_core::reasoner::explain(&g, a))
}

/// Fixed scores per query; queries it has no entry for surface nothing.
pub struct TableScorer(pub HashMap<Query, HashMap<NodeId, f64>>);

impl QueryScorer for TableScorer {
    fn score(&self, q: Query) -> Result<HashMap<NodeId, f64>> {
        Ok(self.0.get(&q).cloned().unwrap_or_default())
    }

    fn covers(&self, _node: NodeId) -> bool {
        true
    }
}

pub fn e(i: u32) -> NodeId {
    NodeId(i)
}

/// Ten entities e0..e9; test facts r(e0,e1), r(e2,e3), r(e4,e5), r(e6,e7),
/// r(e8,e9); one more known fact r(e0,e2).
pub fn toy_eval_fixture() -> (Ckg, Vec<Triple>, KnownFacts) {
    let text = "e0\tr\te1\ne2\tr\te3\ne4\tr\te5\ne6\tr\te7\ne8\tr\te9\ne0\tr\te2\n";
    let g = Ckg::parse_triples(text, std::path::Path::new("toy"), None)
        .unwrap()
        .add_inverse_relations()
        .unwrap();
    for i in 0..10 {
        assert_eq!(g.nodes().get(&format!("e{i}")), Some(e(i)));
    }
    let r = g.relations().lookup("r").unwrap();
    let test: Vec<Triple> = (0..5)
        .map(|i| Triple {
            head: e(2 * i),
            relation: r,
            tail: e(2 * i + 1),
        })
        .collect();
    assert!(test.iter().all(|t| g.forward_triples().any(|f| f == t)));
    let known = KnownFacts::from_graphs(g.relations(), [&g]).unwrap();
    (g, test, known)
}

pub fn scores(pairs: &[(u32, f64)]) -> HashMap<NodeId, f64> {
    pairs.iter().map(|&(i, s)| (e(i), s)).collect()
}

/// The five-triple hand-scored fixture. Expected ranks, forward then inverse
/// per triple: 1,1 3,2 5,3 10,1 1,9.
pub fn five_triple_report() -> EvalReport {
    let (g, test, known) = toy_eval_fixture();
    let r = g.relations().lookup("r").unwrap();
    let inv = g.relations().inverse_of(r).unwrap();
    let fwd = |h| Query {
        relation: r,
        head: e(h),
    };
    let back = |h| Query {
        relation: inv,
        head: e(h),
    };
    let table = HashMap::from([
        // e2 outscores gold e1 but is a known fact: rank 1
        (fwd(0), scores(&[(1, 0.7), (2, 0.9), (3, 0.6)])),
        // e4 above, e5 tied (counts against gold): rank 3
        (fwd(2), scores(&[(3, 0.5), (4, 0.8), (5, 0.5)])),
        // four above: rank 5
        (fwd(4), scores(&[(5, 0.4), (1, 0.9), (2, 0.8), (3, 0.7), (6, 0.6)])),
        // fwd(6) surfaces nothing: gold ties with all 9 others at the floor, rank 10
        (fwd(8), scores(&[(9, 0.99)])),
        (back(1), scores(&[(0, 0.8)])),
        // e0 is not a known r^-1 answer for e3: rank 2
        (back(3), scores(&[(2, 0.3), (0, 0.5)])),
        // e7, e8 above: rank 3
        (back(5), scores(&[(4, 0.2), (7, 0.3), (8, 0.3), (9, 0.1)])),
        (back(7), scores(&[(6, 0.9)])),
        // e1..e7 above, e0 tied, head e9 at the floor: rank 9
        (
            back(9),
            scores(&[
                (8, 0.1),
                (0, 0.1),
                (1, 0.2),
                (2, 0.3),
                (3, 0.4),
                (4, 0.5),
                (5, 0.6),
                (6, 0.7),
                (7, 0.8),
            ]),
        ),
    ]);
    evaluate(&TableScorer(table), &test, &known, g.relations(), 10).unwrap()
}
