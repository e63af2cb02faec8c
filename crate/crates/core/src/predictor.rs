//! Relation predictor: proposes the next body relation of a rule.
//!
//! The previous relation and the step number are looked up in two embedding
//! tables, concatenated, and passed through two affine+ReLU blocks and an
//! output affine layer whose logits are normalised by softmax over all
//! relations (inverses included).
//!
//! Everything is `f64` so gradients can be checked against central
//! differences.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kg_store::RelationId;
use crate::numfmt::sig9;

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    fn uniform(rows: usize, cols: usize, bound: f64, rng: &mut ChaCha8Rng) -> Self {
        let data = (0..rows * cols).map(|_| rng.random_range(-bound..=bound)).collect();
        Self { rows, cols, data }
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// `self * x + bias`
    fn affine(&self, x: &[f64], bias: &Matrix) -> Vec<f64> {
        (0..self.rows)
            .map(|r| self.row(r).iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + bias.data[r])
            .collect()
    }

    /// `self^T * y`
    fn transpose_mul(&self, y: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for (r, &yr) in y.iter().enumerate() {
            if yr == 0.0 {
                continue;
            }
            for (o, w) in out.iter_mut().zip(self.row(r)) {
                *o += w * yr;
            }
        }
        out
    }

    /// `self += scale * y x^T`
    fn add_outer(&mut self, y: &[f64], x: &[f64], scale: f64) {
        for (r, &yr) in y.iter().enumerate() {
            if yr == 0.0 {
                continue;
            }
            let f = yr * scale;
            for (w, xv) in self.row_mut(r).iter_mut().zip(x) {
                *w += f * xv;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PredictorShape {
    pub relations: usize,
    pub relation_dim: usize,
    pub step_dim: usize,
    pub hidden: usize,
    /// Largest step the predictor accepts.
    pub max_step: usize,
}

impl PredictorShape {
    fn validate(&self) -> Result<()> {
        if self.relations == 0 || self.relation_dim == 0 || self.step_dim == 0 || self.hidden == 0 || self.max_step == 0
        {
            return Err(Error::Shape(format!(
                "every predictor dimension must be positive: {self:?}"
            )));
        }
        Ok(())
    }
}

pub const TENSOR_NAMES: [&str; 8] = [
    "relation_embeddings",
    "step_embeddings",
    "W1",
    "b1",
    "W2",
    "b2",
    "Wout",
    "bout",
];

/// Predictor parameters. Also used to hold gradients of the same shape.
#[derive(Debug, Clone, PartialEq)]
pub struct RelationPredictorParams {
    pub shape: PredictorShape,
    pub relation_embeddings: Matrix,
    pub step_embeddings: Matrix,
    pub w1: Matrix,
    pub b1: Matrix,
    pub w2: Matrix,
    pub b2: Matrix,
    pub w_out: Matrix,
    pub b_out: Matrix,
}

impl RelationPredictorParams {
    pub fn zeros(shape: PredictorShape) -> Result<Self> {
        shape.validate()?;
        let input = shape.relation_dim + shape.step_dim;
        Ok(Self {
            shape,
            relation_embeddings: Matrix::zeros(shape.relations, shape.relation_dim),
            step_embeddings: Matrix::zeros(shape.max_step + 1, shape.step_dim),
            w1: Matrix::zeros(shape.hidden, input),
            b1: Matrix::zeros(1, shape.hidden),
            w2: Matrix::zeros(shape.hidden, shape.hidden),
            b2: Matrix::zeros(1, shape.hidden),
            w_out: Matrix::zeros(shape.relations, shape.hidden),
            b_out: Matrix::zeros(1, shape.relations),
        })
    }

    /// Uniform initialisation in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn init(shape: PredictorShape, seed: u64) -> Result<Self> {
        shape.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let input = shape.relation_dim + shape.step_dim;
        let b = |fan_in: usize| 1.0 / (fan_in as f64).sqrt();
        Ok(Self {
            shape,
            relation_embeddings: Matrix::uniform(shape.relations, shape.relation_dim, b(shape.relation_dim), &mut rng),
            step_embeddings: Matrix::uniform(shape.max_step + 1, shape.step_dim, b(shape.step_dim), &mut rng),
            w1: Matrix::uniform(shape.hidden, input, b(input), &mut rng),
            b1: Matrix::uniform(1, shape.hidden, b(input), &mut rng),
            w2: Matrix::uniform(shape.hidden, shape.hidden, b(shape.hidden), &mut rng),
            b2: Matrix::uniform(1, shape.hidden, b(shape.hidden), &mut rng),
            w_out: Matrix::uniform(shape.relations, shape.hidden, b(shape.hidden), &mut rng),
            b_out: Matrix::uniform(1, shape.relations, b(shape.hidden), &mut rng),
        })
    }

    pub fn tensors(&self) -> [&Matrix; 8] {
        [
            &self.relation_embeddings,
            &self.step_embeddings,
            &self.w1,
            &self.b1,
            &self.w2,
            &self.b2,
            &self.w_out,
            &self.b_out,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Matrix; 8] {
        [
            &mut self.relation_embeddings,
            &mut self.step_embeddings,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
            &mut self.w_out,
            &mut self.b_out,
        ]
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|m| m.data.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|m| m.data.iter().all(|x| x.is_finite()))
    }

    fn check_input(&self, prev: RelationId, step: usize) -> Result<()> {
        if prev.index() >= self.shape.relations {
            return Err(Error::Domain(format!(
                "relation {} outside predictor range 0..{}",
                prev.0, self.shape.relations
            )));
        }
        if step == 0 || step > self.shape.max_step {
            return Err(Error::Domain(format!(
                "step {step} outside 1..={}",
                self.shape.max_step
            )));
        }
        Ok(())
    }

    fn forward_cached(&self, prev: RelationId, step: usize) -> Activations {
        let mut x = self.relation_embeddings.row(prev.index()).to_vec();
        x.extend_from_slice(self.step_embeddings.row(step));
        let z1 = self.w1.affine(&x, &self.b1);
        let h1: Vec<f64> = z1.iter().map(|&v| v.max(0.0)).collect();
        let z2 = self.w2.affine(&h1, &self.b2);
        let h2: Vec<f64> = z2.iter().map(|&v| v.max(0.0)).collect();
        let logits = self.w_out.affine(&h2, &self.b_out);
        let probs = softmax(&logits);
        Activations {
            x,
            z1,
            h1,
            z2,
            h2,
            probs,
        }
    }

    /// Distribution over the next relation given the previous one and step.
    pub fn forward(&self, prev: RelationId, step: usize) -> Result<RelationDistribution> {
        self.check_input(prev, step)?;
        Ok(RelationDistribution {
            probs: self.forward_cached(prev, step).probs,
        })
    }

    /// The `m` most probable relations, ties by ascending id.
    pub fn topm(&self, prev: RelationId, step: usize, m: usize) -> Result<Vec<(RelationId, f64)>> {
        Ok(self.forward(prev, step)?.top(m))
    }

    /// Mean negative log-likelihood of the gold relations and its exact
    /// gradient.
    pub fn loss_and_grad(&self, batch: &[TrainingExample]) -> Result<(LossReport, RelationPredictorParams)> {
        if batch.is_empty() {
            return Err(Error::Domain("empty training batch".into()));
        }
        let mut grads = Self::zeros(self.shape)?;
        let scale = 1.0 / batch.len() as f64;
        let d_r = self.shape.relation_dim;
        let mut loss = 0.0;
        let mut clamped = 0;
        for ex in batch {
            self.check_input(ex.prev, ex.step)?;
            if ex.gold.index() >= self.shape.relations {
                return Err(Error::Domain(format!("gold relation {} out of range", ex.gold.0)));
            }
            let act = self.forward_cached(ex.prev, ex.step);
            let p_gold = act.probs[ex.gold.index()];
            if p_gold < PROB_FLOOR {
                clamped += 1;
            }
            loss -= p_gold.max(PROB_FLOOR).ln();

            let mut d_logits = act.probs.clone();
            d_logits[ex.gold.index()] -= 1.0;
            grads.w_out.add_outer(&d_logits, &act.h2, scale);
            add_scaled(&mut grads.b_out.data, &d_logits, scale);

            let mut d_z2 = self.w_out.transpose_mul(&d_logits);
            relu_mask(&mut d_z2, &act.z2);
            grads.w2.add_outer(&d_z2, &act.h1, scale);
            add_scaled(&mut grads.b2.data, &d_z2, scale);

            let mut d_z1 = self.w2.transpose_mul(&d_z2);
            relu_mask(&mut d_z1, &act.z1);
            grads.w1.add_outer(&d_z1, &act.x, scale);
            add_scaled(&mut grads.b1.data, &d_z1, scale);

            let d_x = self.w1.transpose_mul(&d_z1);
            add_scaled(grads.relation_embeddings.row_mut(ex.prev.index()), &d_x[..d_r], scale);
            add_scaled(grads.step_embeddings.row_mut(ex.step), &d_x[d_r..], scale);
        }
        Ok((
            LossReport {
                loss: loss * scale,
                clamped,
            },
            grads,
        ))
    }

    /// Mean negative log-likelihood only.
    pub fn loss(&self, batch: &[TrainingExample]) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::Domain("empty training batch".into()));
        }
        let mut loss = 0.0;
        for ex in batch {
            let p = self.forward(ex.prev, ex.step)?.probs[ex.gold.index()];
            loss -= p.max(PROB_FLOOR).ln();
        }
        Ok(loss / batch.len() as f64)
    }

    /// `params -= learning_rate * grads`. Parameters are untouched when a
    /// gradient is non-finite.
    pub fn sgd_step(&mut self, grads: &RelationPredictorParams, learning_rate: f64) -> Result<()> {
        if grads.shape != self.shape {
            return Err(Error::Shape("gradient shape differs from parameters".into()));
        }
        if learning_rate.is_nan() || learning_rate <= 0.0 {
            return Err(Error::Domain(format!(
                "learning rate must be positive, got {learning_rate}"
            )));
        }
        for (name, g) in TENSOR_NAMES.iter().zip(grads.tensors()) {
            if let Some(pos) = g.data.iter().position(|v| !v.is_finite()) {
                return Err(Error::Numerical(format!("non-finite gradient in {name}[{pos}]")));
            }
        }
        for (p, g) in self.tensors_mut().into_iter().zip(grads.tensors()) {
            add_scaled(&mut p.data, &g.data, -learning_rate);
        }
        Ok(())
    }
}

/// Probabilities below this are clamped inside the log.
pub const PROB_FLOOR: f64 = 1e-12;

struct Activations {
    x: Vec<f64>,
    z1: Vec<f64>,
    h1: Vec<f64>,
    z2: Vec<f64>,
    h2: Vec<f64>,
    probs: Vec<f64>,
}

fn add_scaled(dst: &mut [f64], src: &[f64], scale: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s * scale;
    }
}

fn relu_mask(grad: &mut [f64], pre: &[f64]) {
    for (g, &z) in grad.iter_mut().zip(pre) {
        if z <= 0.0 {
            *g = 0.0;
        }
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / sum).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RelationDistribution {
    pub probs: Vec<f64>,
}

impl RelationDistribution {
    pub fn top(&self, m: usize) -> Vec<(RelationId, f64)> {
        let mut ranked: Vec<(RelationId, f64)> = self
            .probs
            .iter()
            .enumerate()
            .map(|(i, &p)| (RelationId(i as u32), p))
            .collect();
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        ranked.truncate(m);
        ranked
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub loss: f64,
    /// Examples whose gold probability hit [`PROB_FLOOR`].
    pub clamped: usize,
}

/// One teacher-forcing example: after `prev` at `step`, predict `gold`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TrainingExample {
    pub prev: RelationId,
    pub step: usize,
    pub gold: RelationId,
}

/// Unrolls relation sequences `(r_q, r_0, ..., r_K)` of successful proofs
/// into `(r_q, 1, r_0), (r_0, 2, r_1), ...`.
pub fn extract_training_sequences(sequences: &[Vec<RelationId>]) -> Vec<TrainingExample> {
    sequences
        .iter()
        .flat_map(|seq| {
            seq.windows(2).enumerate().map(|(i, w)| TrainingExample {
                prev: w[0],
                step: i + 1,
                gold: w[1],
            })
        })
        .collect()
}

/// Square linear map applied to node embeddings before unification.
#[derive(Debug, Clone, PartialEq)]
pub struct Adapter {
    pub dim: usize,
    /// Row-major `dim x dim`.
    pub matrix: Vec<f64>,
}

impl Adapter {
    pub fn identity(dim: usize) -> Self {
        let mut matrix = vec![0.0; dim * dim];
        for i in 0..dim {
            matrix[i * dim + i] = 1.0;
        }
        Self { dim, matrix }
    }
}

/// A saved model: predictor plus optional embedding adapter.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub predictor: RelationPredictorParams,
    pub adapter: Option<Adapter>,
}

pub const CHECKPOINT_MAGIC: &str = "rpredict-v1";

impl Checkpoint {
    pub fn render(&self) -> String {
        let s = self.predictor.shape;
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{CHECKPOINT_MAGIC} {} {} {} {} {}",
            s.relations, s.relation_dim, s.step_dim, s.hidden, s.max_step
        );
        for (name, m) in TENSOR_NAMES.iter().zip(self.predictor.tensors()) {
            out.push_str(name);
            out.push('\n');
            write_rows(&mut out, m.cols, &m.data);
        }
        if let Some(a) = &self.adapter {
            let _ = writeln!(out, "adapter {}", a.dim);
            write_rows(&mut out, a.dim, &a.matrix);
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.render()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut lines = text
            .split('\n')
            .map(|l| l.strip_suffix('\r').unwrap_or(l))
            .enumerate()
            .filter(|(_, l)| !l.is_empty());
        let (_, header) = lines
            .next()
            .ok_or_else(|| Error::parse(origin, 1, "empty checkpoint"))?;
        let fields: Vec<&str> = header.split(' ').collect();
        if fields.len() != 6 || fields[0] != CHECKPOINT_MAGIC {
            return Err(Error::parse(
                origin,
                1,
                format!("expected \"{CHECKPOINT_MAGIC} <relations> <d_r> <d_s> <hidden> <max_step>\""),
            ));
        }
        let nums: Vec<usize> = fields[1..]
            .iter()
            .map(|f| f.parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::parse(origin, 1, format!("bad header number: {e}")))?;
        let shape = PredictorShape {
            relations: nums[0],
            relation_dim: nums[1],
            step_dim: nums[2],
            hidden: nums[3],
            max_step: nums[4],
        };
        let mut predictor =
            RelationPredictorParams::zeros(shape).map_err(|e| Error::parse(origin, 1, e.to_string()))?;
        for (name, m) in TENSOR_NAMES.iter().zip(predictor.tensors_mut()) {
            let (ln, line) = lines
                .next()
                .ok_or_else(|| Error::parse(origin, 0, format!("missing section {name}")))?;
            if line != *name {
                return Err(Error::parse(
                    origin,
                    ln + 1,
                    format!("expected section {name}, found {line:?}"),
                ));
            }
            read_rows(&mut lines, origin, m.rows, m.cols, &mut m.data)?;
        }
        let adapter = match lines.next() {
            None => None,
            Some((ln, line)) => {
                let dim = line
                    .strip_prefix("adapter ")
                    .and_then(|d| d.parse::<usize>().ok())
                    .ok_or_else(|| Error::parse(origin, ln + 1, format!("unexpected line {line:?}")))?;
                let mut matrix = vec![0.0; dim * dim];
                read_rows(&mut lines, origin, dim, dim, &mut matrix)?;
                Some(Adapter { dim, matrix })
            }
        };
        if let Some((ln, line)) = lines.next() {
            return Err(Error::parse(origin, ln + 1, format!("trailing content {line:?}")));
        }
        Ok(Self { predictor, adapter })
    }
}

fn write_rows(out: &mut String, cols: usize, data: &[f64]) {
    for row in data.chunks(cols.max(1)) {
        let cells: Vec<String> = row.iter().map(|&v| sig9(v)).collect();
        out.push_str(&cells.join(" "));
        out.push('\n');
    }
}

fn read_rows<'a>(
    lines: &mut impl Iterator<Item = (usize, &'a str)>,
    origin: &Path,
    rows: usize,
    cols: usize,
    dst: &mut [f64],
) -> Result<()> {
    for r in 0..rows {
        let (ln, line) = lines
            .next()
            .ok_or_else(|| Error::parse(origin, 0, format!("expected {rows} rows, found {r}")))?;
        let vals: Vec<f64> = line
            .split(' ')
            .map(|v| v.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::parse(origin, ln + 1, format!("bad number: {e}")))?;
        if vals.len() != cols {
            return Err(Error::parse(
                origin,
                ln + 1,
                format!("expected {cols} values, found {}", vals.len()),
            ));
        }
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(Error::parse(origin, ln + 1, "non-finite value"));
        }
        dst[r * cols..(r + 1) * cols].copy_from_slice(&vals);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn shape(relations: usize, d: usize, hidden: usize) -> PredictorShape {
        PredictorShape {
            relations,
            relation_dim: d,
            step_dim: d,
            hidden,
            max_step: 3,
        }
    }

    #[test]
    fn output_is_a_distribution() {
        let p = RelationPredictorParams::init(shape(5, 4, 8), 3).unwrap();
        for r in 0..5 {
            for k in 1..=3 {
                let d = p.forward(RelationId(r), k).unwrap();
                assert_abs_diff_eq!(d.probs.iter().sum::<f64>(), 1.0, epsilon = 1e-6);
                assert!(d.probs.iter().all(|&x| x >= 0.0));
            }
        }
    }

    #[test]
    fn zero_params_are_uniform() {
        let p = RelationPredictorParams::zeros(shape(4, 2, 2)).unwrap();
        let d = p.forward(RelationId(1), 2).unwrap();
        assert!(d.probs.iter().all(|&x| (x - 0.25).abs() < 1e-15));
    }

    #[test]
    fn step_out_of_range() {
        let p = RelationPredictorParams::zeros(shape(2, 2, 2)).unwrap();
        assert!(p.forward(RelationId(0), 0).is_err());
        assert!(p.forward(RelationId(0), 4).is_err());
        assert!(p.forward(RelationId(2), 1).is_err());
    }

    #[test]
    fn hand_computed_forward_pass() {
        // 2 relations, d_r = d_s = 2, hidden 2
        let mut p = RelationPredictorParams::zeros(shape(2, 2, 2)).unwrap();
        p.relation_embeddings.data = vec![1.0, 0.0, 0.0, 1.0];
        p.step_embeddings.data = vec![0.0, 0.0, 0.5, -0.5, 1.0, 1.0, 0.0, 0.0];
        p.w1.data = vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, -1.0];
        p.b1.data = vec![0.0, 0.1];
        p.w2.data = vec![1.0, 1.0, -1.0, 2.0];
        p.b2.data = vec![0.0, 0.0];
        p.w_out.data = vec![1.0, 0.0, 0.0, 1.0];
        p.b_out.data = vec![0.0, 0.2];
        // prev = r0, step = 1: x = [1, 0, 0.5, -0.5]
        // z1 = [1 + 0.5, 0 + 0.5 + 0.1] = [1.5, 0.6]; h1 = z1
        // z2 = [2.1, -1.5 + 1.2] = [2.1, -0.3]; h2 = [2.1, 0]
        // logits = [2.1, 0.2]
        let d = p.forward(RelationId(0), 1).unwrap();
        let e0 = (2.1f64).exp();
        let e1 = (0.2f64).exp();
        assert_abs_diff_eq!(d.probs[0], e0 / (e0 + e1), epsilon = 1e-6);
        assert_abs_diff_eq!(d.probs[1], e1 / (e0 + e1), epsilon = 1e-6);
    }

    #[test]
    fn logit_shift_invariance() {
        let p = RelationPredictorParams::init(shape(6, 4, 4), 1).unwrap();
        let mut q = p.clone();
        for b in q.b_out.data.iter_mut() {
            *b += 3.7;
        }
        let a = p.forward(RelationId(2), 2).unwrap();
        let b = q.forward(RelationId(2), 2).unwrap();
        for (x, y) in a.probs.iter().zip(&b.probs) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn topm_ordering() {
        let d = RelationDistribution {
            probs: vec![0.5, 0.3, 0.2],
        };
        assert_eq!(d.top(1), vec![(RelationId(0), 0.5)]);
        let ids: Vec<u32> = d.top(2).iter().map(|x| x.0 .0).collect();
        assert_eq!(ids, vec![0, 1]);
        assert_eq!(d.top(10).len(), 3);
        let tied = RelationDistribution { probs: vec![0.25; 4] };
        assert_eq!(tied.top(2).iter().map(|x| x.0 .0).collect::<Vec<_>>(), vec![0, 1]);
    }

    #[test]
    fn uniform_loss_is_ln2() {
        let p = RelationPredictorParams::zeros(shape(2, 2, 2)).unwrap();
        let batch = [TrainingExample {
            prev: RelationId(0),
            step: 1,
            gold: RelationId(1),
        }];
        let (report, _) = p.loss_and_grad(&batch).unwrap();
        assert_abs_diff_eq!(report.loss, std::f64::consts::LN_2, epsilon = 1e-12);
        assert_eq!(report.clamped, 0);
    }

    #[test]
    fn confident_model_has_zero_loss() {
        let mut p = RelationPredictorParams::zeros(shape(2, 2, 2)).unwrap();
        p.b_out.data = vec![-1000.0, 1000.0];
        let batch = [TrainingExample {
            prev: RelationId(0),
            step: 1,
            gold: RelationId(1),
        }];
        assert_eq!(p.loss(&batch).unwrap(), 0.0);
        let wrong = [TrainingExample {
            gold: RelationId(0),
            ..batch[0]
        }];
        let (report, _) = p.loss_and_grad(&wrong).unwrap();
        assert_eq!(report.clamped, 1);
        assert_abs_diff_eq!(report.loss, -(PROB_FLOOR.ln()), epsilon = 1e-9);
    }

    #[test]
    fn sgd_fixed_point_and_zeroing() {
        let p0 = RelationPredictorParams::init(shape(3, 2, 3), 5).unwrap();
        let mut p = p0.clone();
        let zero = RelationPredictorParams::zeros(p.shape).unwrap();
        p.sgd_step(&zero, 0.1).unwrap();
        assert_eq!(p, p0);
        let grads = p.clone();
        p.sgd_step(&grads, 1.0).unwrap();
        assert!(p.tensors().iter().all(|m| m.data.iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn sgd_rejects_non_finite_gradient() {
        let mut p = RelationPredictorParams::init(shape(3, 2, 3), 5).unwrap();
        let before = p.clone();
        let mut g = RelationPredictorParams::zeros(p.shape).unwrap();
        g.w2.data[1] = f64::NAN;
        assert!(matches!(p.sgd_step(&g, 0.1), Err(Error::Numerical(_))));
        assert_eq!(p, before);
    }

    #[test]
    fn one_step_reduces_uniform_loss() {
        let mut p = RelationPredictorParams::init(shape(2, 2, 2), 0).unwrap();
        for m in p.tensors_mut() {
            for v in m.data.iter_mut() {
                *v *= 1e-3;
            }
        }
        let batch = [TrainingExample {
            prev: RelationId(0),
            step: 1,
            gold: RelationId(1),
        }];
        let (before, g) = p.loss_and_grad(&batch).unwrap();
        p.sgd_step(&g, 0.5).unwrap();
        assert!(p.loss(&batch).unwrap() < before.loss);
    }

    #[test]
    fn unrolls_relation_sequences() {
        let r = |i| RelationId(i);
        let ex = |p, s, g| TrainingExample {
            prev: r(p),
            step: s,
            gold: r(g),
        };
        assert_eq!(
            extract_training_sequences(&[vec![r(0), r(1), r(2)]]),
            vec![ex(0, 1, 1), ex(1, 2, 2)]
        );
        assert_eq!(extract_training_sequences(&[vec![r(0), r(1)]]), vec![ex(0, 1, 1)]);
        let three = [vec![r(0), r(1)], vec![r(1), r(1), r(1), r(0)], vec![r(2), r(0), r(0)]];
        assert_eq!(extract_training_sequences(&three).len(), 1 + 3 + 2);
    }

    #[test]
    fn checkpoint_round_trip() {
        let p = RelationPredictorParams::init(shape(4, 3, 5), 9).unwrap();
        let ckpt = Checkpoint {
            predictor: p.clone(),
            adapter: Some(Adapter::identity(3)),
        };
        let text = ckpt.render();
        assert!(text.starts_with("rpredict-v1 4 3 3 5 3\nrelation_embeddings\n"));
        let back = Checkpoint::parse(&text, Path::new("c")).unwrap();
        assert_eq!(back.adapter, Some(Adapter::identity(3)));
        // re-serialising the parsed checkpoint is a fixed point
        assert_eq!(back.render(), text);
        let again = Checkpoint::parse(&back.render(), Path::new("c")).unwrap();
        for k in 1..=3 {
            let a = back.predictor.forward(RelationId(1), k).unwrap();
            let b = again.predictor.forward(RelationId(1), k).unwrap();
            assert_eq!(a, b);
            let orig = p.forward(RelationId(1), k).unwrap();
            for (x, y) in a.probs.iter().zip(&orig.probs) {
                assert!((x - y).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn checkpoint_rejects_bad_header() {
        assert!(Checkpoint::parse("rpredict-v2 1 1 1 1 1\n", Path::new("c")).is_err());
        assert!(Checkpoint::parse("rpredict-v1 1 1 1\n", Path::new("c")).is_err());
    }
}
