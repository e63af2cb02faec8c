//! Backward chaining with weak unification.
//!
//! A query `r_q(h, ?)` starts the rule `r_q(h, X)`. At each step the
//! predictor proposes the next body relation from the previous one, the
//! frontier node's neighbourhood supplies candidate triples, and the best
//! unified candidates extend the proof. A proof scores the minimum of its
//! step scores; every proof that survives the beam proposes its last tail as
//! an answer.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::config::ReasonerConfig;
use crate::embedding::EmbeddingTable;
use crate::error::{Error, Result};
use crate::kg_store::{Ckg, NodeId, RelationId, Triple};
use crate::knn::KnnIndex;
use crate::predictor::RelationPredictorParams;
use crate::unifier::{build_hypotheses, gather_candidates, score_matrix, select_candidates, ScoredCandidate};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Query {
    pub relation: RelationId,
    pub head: NodeId,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProofStep {
    /// Relation proposed by the predictor for this atom.
    pub relation: RelationId,
    /// Node the atom's first argument was bound to before unification.
    pub frontier: NodeId,
    pub triple: Triple,
    pub triple_index: usize,
    pub best_hypothesis: NodeId,
    pub score: f64,
}

/// A partial derivation. `score` is the minimum step score (`+inf` before the
/// first step).
#[derive(Debug, Clone, PartialEq)]
pub struct ProofState {
    pub query: Query,
    pub frontier: NodeId,
    pub steps: Vec<ProofStep>,
    pub score: f64,
}

impl ProofState {
    pub fn start(query: Query) -> Self {
        Self {
            query,
            frontier: query.head,
            steps: Vec::new(),
            score: f64::INFINITY,
        }
    }

    pub fn depth(&self) -> usize {
        self.steps.len()
    }

    /// Whether `node` is the query head or a tail already on this path.
    pub fn visits(&self, node: NodeId) -> bool {
        self.query.head == node || self.steps.iter().any(|s| s.triple.tail == node)
    }

    fn extend(&self, relation: RelationId, cand: &ScoredCandidate) -> Self {
        let mut steps = self.steps.clone();
        steps.push(ProofStep {
            relation,
            frontier: self.frontier,
            triple: cand.triple,
            triple_index: cand.index,
            best_hypothesis: cand.best_hypothesis,
            score: cand.score,
        });
        let score = self.score.min(cand.score);
        debug_assert!(score <= self.score);
        Self {
            query: self.query,
            frontier: cand.triple.tail,
            steps,
            score,
        }
    }

    /// Minimum over the step scores, recomputed from scratch.
    pub fn recomputed_score(&self) -> f64 {
        self.steps.iter().map(|s| s.score).fold(f64::INFINITY, f64::min)
    }

    /// Relation sequence `(r_q, r_0, ..., r_K)`.
    pub fn relation_sequence(&self) -> Vec<RelationId> {
        std::iter::once(self.query.relation)
            .chain(self.steps.iter().map(|s| s.relation))
            .collect()
    }

    pub fn tail(&self) -> Option<NodeId> {
        self.steps.last().map(|s| s.triple.tail)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankedAnswer {
    pub tail: NodeId,
    pub score: f64,
    pub proof: ProofState,
    pub rendered_rule: String,
}

/// Maps a proof score in `[-1, 1]` to a probability in `(0, 1)`.
pub fn squash(score: f64) -> f64 {
    ((score + 1.0) / 2.0).clamp(SCORE_FLOOR, 1.0 - SCORE_FLOOR)
}

/// Probability assigned to entities no proof reaches.
pub const SCORE_FLOOR: f64 = 1e-6;

/// Everything a query needs: graph, embeddings, neighbour index, predictor.
#[derive(Debug, Clone, Copy)]
pub struct Engine<'a> {
    pub graph: &'a Ckg,
    pub table: &'a EmbeddingTable,
    pub index: &'a KnnIndex<'a>,
    pub predictor: &'a RelationPredictorParams,
}

impl<'a> Engine<'a> {
    pub fn new(
        graph: &'a Ckg,
        table: &'a EmbeddingTable,
        index: &'a KnnIndex<'a>,
        predictor: &'a RelationPredictorParams,
    ) -> Result<Self> {
        if predictor.shape.relations != graph.relations().len() {
            return Err(Error::Shape(format!(
                "predictor covers {} relations, graph has {}",
                predictor.shape.relations,
                graph.relations().len()
            )));
        }
        if let Some(t) = graph
            .triples()
            .iter()
            .find(|t| !table.contains(t.head) || !table.contains(t.tail))
        {
            return Err(Error::Domain(format!(
                "graph node in {} has no embedding",
                graph.render_triple(t)
            )));
        }
        Ok(Self {
            graph,
            table,
            index,
            predictor,
        })
    }

    fn check_query(&self, q: &Query) -> Result<()> {
        if q.relation.index() >= self.graph.relations().len() {
            return Err(Error::Lookup(format!("relation id {} out of range", q.relation.0)));
        }
        if !self.table.contains(q.head) {
            return Err(Error::Domain(format!("query head {} has no embedding", q.head.0)));
        }
        Ok(())
    }

    /// Runs the beam search and returns every proof that survived the beam,
    /// in deposit order (depth by depth, best first within a depth).
    pub fn search(&self, q: Query, cfg: &ReasonerConfig, top_m: usize) -> Result<Vec<ProofState>> {
        self.search_masked(q, cfg, top_m, &[])
    }

    /// [`Engine::search`] with the `masked` triples hidden from retrieval.
    pub fn search_masked(
        &self,
        q: Query,
        cfg: &ReasonerConfig,
        top_m: usize,
        masked: &[Triple],
    ) -> Result<Vec<ProofState>> {
        self.check_query(&q)?;
        if cfg.max_depth == 0 {
            return Err(Error::Domain("max_depth must be at least 1".into()));
        }
        if cfg.max_depth > self.predictor.shape.max_step {
            return Err(Error::Domain(format!(
                "max_depth {} exceeds the predictor's {} steps",
                cfg.max_depth, self.predictor.shape.max_step
            )));
        }
        let mut beam = vec![ProofState::start(q)];
        let mut deposited = Vec::new();
        for depth in 1..=cfg.max_depth {
            let mut next = Vec::new();
            for state in &beam {
                let prev = state.steps.last().map_or(q.relation, |s| s.relation);
                let relations = self.predictor.topm(prev, depth, top_m)?;
                let mut pooled = gather_candidates(self.graph, self.index, state.frontier, cfg.k_nodes)?;
                if !masked.is_empty() {
                    pooled = pooled.without(|t| masked.contains(t));
                }
                for (relation, _) in relations {
                    let cands = if cfg.relation_filter {
                        pooled.filter_relation(relation)
                    } else {
                        pooled.clone()
                    };
                    if cands.is_empty() {
                        continue;
                    }
                    let hyps = build_hypotheses(&cands);
                    let u = score_matrix(self.table, &cands, &hyps, state.frontier)?;
                    let ranked = select_candidates(&u, &cands, usize::MAX)?;
                    next.extend(
                        ranked
                            .iter()
                            .filter(|c| cfg.allow_revisit || !state.visits(c.triple.tail))
                            .take(cfg.k_triples)
                            .map(|c| state.extend(relation, c)),
                    );
                }
            }
            // stable: equal scores keep generation order
            next.sort_by(|a, b| b.score.total_cmp(&a.score));
            next.truncate(cfg.beam_width);
            if next.is_empty() {
                break;
            }
            deposited.extend(next.iter().cloned());
            beam = next;
        }
        Ok(deposited)
    }

    /// Ranked answers for `q`: one per tail (its best proof), score
    /// descending, ties by ascending node id.
    pub fn answer_query(&self, q: Query, cfg: &ReasonerConfig) -> Result<Vec<RankedAnswer>> {
        let proofs = self.search(q, cfg, cfg.top_m_relations)?;
        Ok(self.rank(proofs, cfg.k_answers))
    }

    pub(crate) fn rank(&self, proofs: Vec<ProofState>, k_answers: usize) -> Vec<RankedAnswer> {
        let mut best: HashMap<NodeId, ProofState> = HashMap::new();
        for p in proofs {
            let tail = p.tail().expect("deposited proofs have steps");
            match best.get(&tail) {
                Some(cur) if cur.score >= p.score => {}
                _ => {
                    best.insert(tail, p);
                }
            }
        }
        let mut answers: Vec<RankedAnswer> = best
            .into_iter()
            .map(|(tail, proof)| RankedAnswer {
                tail,
                score: proof.score,
                rendered_rule: render_rule(self.graph, &proof),
                proof,
            })
            .collect();
        answers.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.tail.cmp(&b.tail)));
        answers.truncate(k_answers);
        answers
    }

    /// Squashed score of `target` among the answers to `q`, or the floor.
    pub fn score_query_answer(&self, q: Query, target: NodeId, cfg: &ReasonerConfig) -> Result<f64> {
        Ok(self
            .answer_query(q, cfg)?
            .iter()
            .find(|a| a.tail == target)
            .map_or(SCORE_FLOOR, |a| squash(a.score)))
    }
}

const VARIABLES: [&str; 8] = ["Z", "W", "V", "U", "T", "S", "R", "Q"];

fn variable(i: usize, depth: usize) -> String {
    if i == 0 {
        "X".into()
    } else if i == depth {
        "Y".into()
    } else {
        VARIABLES.get(i - 1).map_or_else(|| format!("Z{i}"), |v| v.to_string())
    }
}

/// Abstract rule over relation names, e.g. `r(X,Y) :- a(X,Z), b(Z,Y)`.
pub fn rule_text(query_relation: &str, body: &[String]) -> String {
    let depth = body.len();
    let atoms: Vec<String> = body
        .iter()
        .enumerate()
        .map(|(i, r)| format!("{r}({},{})", variable(i, depth), variable(i + 1, depth)))
        .collect();
    format!("{query_relation}(X,Y) :- {}", atoms.join(", "))
}

pub fn render_rule(g: &Ckg, proof: &ProofState) -> String {
    let rels = g.relations();
    let body: Vec<String> = proof.steps.iter().map(|s| rels.display_name(s.relation)).collect();
    rule_text(&rels.display_name(proof.query.relation), &body)
}

/// A proof with names resolved, independent of any loaded graph.
#[derive(Debug, Clone, PartialEq)]
pub struct ProofRecord {
    pub query_relation: String,
    pub head: String,
    pub tail: String,
    pub score: f64,
    pub steps: Vec<StepRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub predicted: String,
    pub frontier: String,
    pub head: String,
    pub relation: String,
    pub tail: String,
    pub score: f64,
}

impl ProofRecord {
    pub fn from_answer(g: &Ckg, nodes: &crate::kg_store::NodeTable, a: &RankedAnswer) -> Self {
        let rels = g.relations();
        let text = |id: NodeId| nodes.text(id).to_string();
        Self {
            query_relation: rels.display_name(a.proof.query.relation),
            head: text(a.proof.query.head),
            tail: text(a.tail),
            score: a.score,
            steps: a
                .proof
                .steps
                .iter()
                .map(|s| StepRecord {
                    predicted: rels.display_name(s.relation),
                    frontier: text(s.frontier),
                    head: text(s.triple.head),
                    relation: rels.display_name(s.triple.relation),
                    tail: text(s.triple.tail),
                    score: s.score,
                })
                .collect(),
        }
    }

    pub fn rule(&self) -> String {
        let body: Vec<String> = self.steps.iter().map(|s| s.predicted.clone()).collect();
        rule_text(&self.query_relation, &body)
    }

    /// `a —r→ b —s→ c`; a weakly unified step shows `frontier ≈ head`.
    pub fn path(&self) -> String {
        let mut out = self.head.clone();
        for s in &self.steps {
            if s.head != s.frontier {
                let _ = write!(out, " ≈ {}", s.head);
            }
            let _ = write!(out, " —{}→ {}", s.relation, s.tail);
        }
        out
    }

    pub fn conclusion(&self) -> String {
        format!("{} ⇢{}⇢ {}", self.head, self.query_relation, self.tail)
    }

    /// Multi-line explanation.
    pub fn explain(&self) -> String {
        let scores: Vec<String> = self.steps.iter().map(|s| format!("{:.6}", s.score)).collect();
        format!(
            "rule: {}\npath: {}\nconclusion: {}\nstep scores: {}\n",
            self.rule(),
            self.path(),
            self.conclusion(),
            scores.join(", ")
        )
    }

    /// The explanation on one line, for answer listings.
    pub fn explain_line(&self) -> String {
        format!("{} | {} | {}", self.rule(), self.path(), self.conclusion())
    }

    fn write_to(&self, out: &mut String) {
        let _ = writeln!(
            out,
            "answer\t{}\t{}\t{}\t{:.17e}",
            self.query_relation, self.head, self.tail, self.score
        );
        for s in &self.steps {
            let _ = writeln!(
                out,
                "step\t{}\t{}\t{}\t{}\t{}\t{:.17e}",
                s.predicted, s.frontier, s.head, s.relation, s.tail, s.score
            );
        }
        out.push_str("end\n");
    }
}

/// Renders `answer` in the multi-line explanation format.
pub fn explain(g: &Ckg, answer: &RankedAnswer) -> String {
    ProofRecord::from_answer(g, g.nodes(), answer).explain()
}

/// Proof file: one block per answer, `answer`/`step`/`end` lines with
/// tab-separated fields.
pub fn render_proof_file(records: &[ProofRecord]) -> String {
    let mut out = String::new();
    for r in records {
        r.write_to(&mut out);
    }
    out
}

pub fn save_proof_file(records: &[ProofRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, render_proof_file(records)).map_err(|e| Error::io(path, e))
}

pub fn load_proof_file(path: impl AsRef<Path>) -> Result<Vec<ProofRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_proof_file(&text, path)
}

pub fn parse_proof_file(text: &str, origin: &Path) -> Result<Vec<ProofRecord>> {
    let mut out = Vec::new();
    let mut current: Option<ProofRecord> = None;
    let score = |s: &str, ln: usize| {
        s.parse::<f64>()
            .map_err(|e| Error::parse(origin, ln, format!("bad score: {e}")))
    };
    for (i, line) in text.lines().enumerate() {
        let ln = i + 1;
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        match (f[0], current.as_mut()) {
            ("answer", None) if f.len() == 5 => {
                current = Some(ProofRecord {
                    query_relation: f[1].into(),
                    head: f[2].into(),
                    tail: f[3].into(),
                    score: score(f[4], ln)?,
                    steps: Vec::new(),
                });
            }
            ("step", Some(rec)) if f.len() == 7 => rec.steps.push(StepRecord {
                predicted: f[1].into(),
                frontier: f[2].into(),
                head: f[3].into(),
                relation: f[4].into(),
                tail: f[5].into(),
                score: score(f[6], ln)?,
            }),
            ("end", Some(_)) if f.len() == 1 => out.push(current.take().expect("checked")),
            _ => return Err(Error::parse(origin, ln, format!("unexpected line {line:?}"))),
        }
    }
    if current.is_some() {
        return Err(Error::parse(origin, text.lines().count(), "unterminated proof block"));
    }
    Ok(out)
}
