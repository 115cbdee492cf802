//! Training objectives for the set-prediction retriever.
//!
//! Per example, the set loss sums a class-rebalanced focal binary
//! cross-entropy over all `N` selection probabilities and `1 - cos` over every
//! matched real target. Across a batch, all matched (text, semantic) pairs
//! feed a CLIP-style contrastive loss whose soft targets come from the
//! averaged text-text and semantic-semantic similarity matrices.
//!
//! Each loss has a value-only entry point working on probabilities and
//! embeddings, and a gradient-carrying counterpart working on selection
//! logits and semantic matrices for the decoder's backward pass.

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::embedding::{cosine, Embedding};
use crate::error::{Error, Result};
use crate::matching::{Assignment, PredictionSet, TargetSet};

/// How per-example set losses combine over a batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    /// Literal batch sum.
    Sum,
    /// Batch mean; keeps the contrastive ratio comparable across batch sizes.
    #[default]
    Mean,
}

impl std::str::FromStr for Reduction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(Self::Sum),
            "mean" => Ok(Self::Mean),
            other => Err(Error::validation(format!("unknown loss reduction `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// Weight of the selection probability in the matching cost.
    pub mu: f64,
    /// Weight of the in-batch contrastive term.
    pub lambda_sc: f64,
    /// Focal exponent of the selection loss.
    pub gamma: f64,
    /// Expected number of positives per image; sets the class weights.
    pub pos_class_size: f64,
    /// Fixed inverse temperature of the contrastive loss.
    pub temperature_inv: f64,
    pub reduction: Reduction,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            mu: 0.5,
            lambda_sc: 0.1,
            gamma: 2.0,
            pos_class_size: 7.16,
            temperature_inv: 1.0,
            reduction: Reduction::Mean,
        }
    }
}

impl LossConfig {
    pub fn validate(&self, num_queries: usize) -> Result<()> {
        let positive = [
            ("mu", self.mu),
            ("pos_class_size", self.pos_class_size),
            ("temperature_inv", self.temperature_inv),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::validation(format!("loss.{name} must be positive, got {v}")));
            }
        }
        if !(self.lambda_sc >= 0.0 && self.gamma >= 0.0) {
            return Err(Error::validation("loss.lambda_sc and loss.gamma must be non-negative"));
        }
        if self.pos_class_size >= num_queries as f64 {
            return Err(Error::validation(format!(
                "loss.pos_class_size {} must be below the query count {num_queries}",
                self.pos_class_size
            )));
        }
        Ok(())
    }

    /// Selection-loss parameters for `n` queries.
    pub fn selection(&self, n: usize) -> SelectionLoss {
        let n = n as f64;
        SelectionLoss {
            gamma: self.gamma,
            w_pos: n / (2.0 * self.pos_class_size),
            w_neg: n / (2.0 * (n - self.pos_class_size)),
        }
    }
}

/// Focal exponent and per-class weights of the selection loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SelectionLoss {
    pub gamma: f64,
    pub w_pos: f64,
    pub w_neg: f64,
}

impl SelectionLoss {
    /// Plain binary cross-entropy.
    pub const BCE: SelectionLoss = SelectionLoss {
        gamma: 0.0,
        w_pos: 1.0,
        w_neg: 1.0,
    };
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Rebalanced focal BCE for one query:
/// `-w_pos c (1-p)^g ln p - w_neg (1-c) p^g ln(1-p)`.
pub fn selection_loss(positive: bool, p_hat: f64, sel: &SelectionLoss) -> Result<f64> {
    if !(p_hat > 0.0 && p_hat < 1.0) {
        return Err(Error::validation(format!("selection probability {p_hat} outside (0, 1)")));
    }
    Ok(if positive {
        -sel.w_pos * (1.0 - p_hat).powf(sel.gamma) * p_hat.ln()
    } else {
        -sel.w_neg * p_hat.powf(sel.gamma) * (1.0 - p_hat).ln()
    })
}

/// Same loss parameterized by the logit `z`, with `d loss / d z`.
pub fn selection_loss_logit(positive: bool, z: f64, sel: &SelectionLoss) -> (f64, f64) {
    let p = sigmoid(z);
    let g = sel.gamma;
    if positive {
        // -ln p = softplus(-z), dp/dz = p (1 - p)
        let nll = softplus(-z);
        let focal = (1.0 - p).powf(g);
        let grad = if g == 0.0 {
            -(1.0 - p)
        } else {
            -(1.0 - p).powf(g) * (g * p * nll + (1.0 - p))
        };
        (sel.w_pos * focal * nll, sel.w_pos * grad)
    } else {
        let nll = softplus(z);
        let focal = p.powf(g);
        let grad = if g == 0.0 {
            p
        } else {
            p.powf(g) * (g * (1.0 - p) * nll + p)
        };
        (sel.w_neg * focal * nll, sel.w_neg * grad)
    }
}

/// `1 - cos(v, v_hat)`.
pub fn similarity_loss(v: &Embedding, v_hat: &Embedding) -> Result<f64> {
    Ok(1.0 - cosine(v, v_hat)?)
}

/// Set loss of one example under a fixed assignment.
pub fn transq_loss(
    targets: &TargetSet,
    preds: &PredictionSet,
    assignment: &Assignment,
    cfg: &LossConfig,
) -> Result<f64> {
    check_assignment(targets, preds.len(), assignment)?;
    let sel = cfg.selection(preds.len());
    let mut total = 0.0;
    for (i, &j) in assignment.sigma.iter().enumerate() {
        total += selection_loss(!targets.is_empty_slot(i), preds.probs[j], &sel)?;
    }
    for (i, v) in targets.embeddings.iter().enumerate() {
        total += similarity_loss(v, &preds.semantics[assignment.sigma[i]])?;
    }
    Ok(total)
}

fn check_assignment(targets: &TargetSet, n: usize, assignment: &Assignment) -> Result<()> {
    if targets.size != n || assignment.sigma.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: assignment.sigma.len().min(targets.size),
        });
    }
    Ok(())
}

/// Set loss from logits and a semantic matrix whose rows are unit vectors.
///
/// Returns the loss with its gradients w.r.t. the logits and the semantic rows.
pub fn transq_loss_grad(
    targets: &TargetSet,
    logits: &[f64],
    semantics: &Array2<f64>,
    assignment: &Assignment,
    cfg: &LossConfig,
) -> Result<(f64, Vec<f64>, Array2<f64>)> {
    let n = logits.len();
    check_assignment(targets, n, assignment)?;
    let sel = cfg.selection(n);
    let mut loss = 0.0;
    let mut d_logits = vec![0.0; n];
    let mut d_sem = Array2::zeros(semantics.raw_dim());
    for (i, &j) in assignment.sigma.iter().enumerate() {
        let (l, g) = selection_loss_logit(!targets.is_empty_slot(i), logits[j], &sel);
        loss += l;
        d_logits[j] += g;
    }
    for (i, v) in targets.embeddings.iter().enumerate() {
        let j = assignment.sigma[i];
        let row = semantics.row(j);
        // Rows are unit vectors, so cos is the plain dot product.
        let c: f64 = row.iter().zip(v.as_slice()).map(|(a, b)| a * b).sum();
        loss += 1.0 - c;
        for (d, x) in d_sem.row_mut(j).iter_mut().zip(v.as_slice()) {
            *d -= x;
        }
    }
    Ok((loss, d_logits, d_sem))
}

/// Row-wise log-softmax.
fn log_softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

/// In-batch contrastive loss over matched (text, semantic) pairs.
///
/// Rows of `text` and `semantic` are paired. Returns 0 for an empty batch.
pub fn semantic_contrastive_loss(text: &[Embedding], semantic: &[Embedding], cfg: &LossConfig) -> Result<f64> {
    if text.len() != semantic.len() {
        return Err(Error::DimensionMismatch {
            expected: text.len(),
            got: semantic.len(),
        });
    }
    if text.is_empty() {
        return Ok(0.0);
    }
    let t = stack(text)?;
    let s = stack(semantic)?;
    Ok(contrastive_loss_grad(&t, &s, cfg.temperature_inv, false).0)
}

pub(crate) fn stack(rows: &[Embedding]) -> Result<Array2<f64>> {
    let d = rows[0].dim();
    let mut out = Array2::zeros((rows.len(), d));
    for (i, r) in rows.iter().enumerate() {
        if r.dim() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: r.dim(),
            });
        }
        out.row_mut(i).assign(&ndarray::ArrayView1::from(r.as_slice()));
    }
    Ok(out)
}

/// Contrastive loss and, when `with_grad`, its gradient w.r.t. `s`.
///
/// With `L = tau S T^T`, `P = softmax_rows(tau (T T^T + S S^T) / 2)`:
/// `loss = (CE_rows(L, P) + CE_rows(L^T, P^T)) / 2`. Targets depend on `S`
/// and are differentiated through.
pub fn contrastive_loss_grad(t: &Array2<f64>, s: &Array2<f64>, tau: f64, with_grad: bool) -> (f64, Array2<f64>) {
    let m = t.nrows();
    if m == 0 {
        return (0.0, Array2::zeros(s.raw_dim()));
    }
    let mf = m as f64;
    let logits = s.dot(&t.t()) * tau;
    let z = (t.dot(&t.t()) + s.dot(&s.t())) * (tau / 2.0);
    let targets = log_softmax_rows(&z).mapv(f64::exp);
    let log_a = log_softmax_rows(&logits);
    let log_b = log_softmax_rows(&logits.t().to_owned()).reversed_axes();

    let loss = -((&targets * &log_a).sum() + (&targets * &log_b).sum()) / (2.0 * mf);
    if !with_grad {
        return (loss, Array2::zeros(s.raw_dim()));
    }

    // d loss / d logits
    let col_mass = targets.sum_axis(Axis(0));
    let a = log_a.mapv(f64::exp);
    let b = log_b.mapv(f64::exp);
    let mut d_logits = (&a - &targets) + (&b * &col_mass.insert_axis(Axis(0)) - &targets);
    d_logits /= 2.0 * mf;

    // d loss / d targets, then back through the row softmax
    let d_targets = (&log_a + &log_b) * (-1.0 / (2.0 * mf));
    let inner = (&d_targets * &targets).sum_axis(Axis(1)).insert_axis(Axis(1));
    let d_z = &targets * &(&d_targets - &inner);

    let d_s = d_logits.dot(t) * tau + (&d_z + &d_z.t()).dot(s) * (tau / 2.0);
    (loss, d_s)
}

/// One example after matching.
#[derive(Debug, Clone)]
pub struct MatchedExample {
    pub targets: TargetSet,
    pub preds: PredictionSet,
    pub assignment: Assignment,
}

impl MatchedExample {
    /// (text, semantic) pairs for every real target.
    pub fn pairs(&self) -> impl Iterator<Item = (&Embedding, &Embedding)> {
        self.targets
            .embeddings
            .iter()
            .enumerate()
            .map(|(i, v)| (v, &self.preds.semantics[self.assignment.sigma[i]]))
    }
}

#[derive(Debug, Clone, Default)]
pub struct MatchedBatch {
    pub examples: Vec<MatchedExample>,
}

impl MatchedBatch {
    pub fn pair_count(&self) -> usize {
        self.examples.iter().map(|e| e.targets.real_count()).sum()
    }
}

/// Batch objective: reduced set losses plus `lambda` times the contrastive loss.
pub fn total_loss(batch: &MatchedBatch, cfg: &LossConfig) -> Result<f64> {
    let mut set_loss = 0.0;
    let mut text = Vec::new();
    let mut sem = Vec::new();
    for ex in &batch.examples {
        set_loss += transq_loss(&ex.targets, &ex.preds, &ex.assignment, cfg)?;
        for (v, s) in ex.pairs() {
            text.push(v.clone());
            sem.push(s.clone());
        }
    }
    if cfg.reduction == Reduction::Mean && !batch.examples.is_empty() {
        set_loss /= batch.examples.len() as f64;
    }
    let sc = if cfg.lambda_sc == 0.0 {
        0.0
    } else {
        semantic_contrastive_loss(&text, &sem, cfg)?
    };
    Ok(set_loss + cfg.lambda_sc * sc)
}
