//! Cross-modal interaction, the global transformer over clip features,
//! answer scoring and the QA loss.

use crate::attention::{add_position, MhsaStack, PositionEmbedding};
use crate::config::RunConfig;
use crate::error::{invalid, shape_err, Result};
use crate::tensor::{Graph, Initializer, ParamStore, Tensor, Var};

/// `x^qv = x^v + sum_m beta_m x^q_m` with `beta = softmax(x^v X_q^T)` over
/// the text rows marked `true` in `mask`. Returns `(X^qv, beta)`.
pub fn cross_modal_attention(g: &mut Graph<'_>, xv: Var, xq: Var, mask: &[bool]) -> Result<(Var, Var)> {
    if g.value(xq).rows() != mask.len() {
        return shape_err(
            "cross_modal_interact",
            format!("{} text rows, mask of {}", g.value(xq).rows(), mask.len()),
        );
    }
    if !mask.iter().any(|&m| m) {
        return invalid("cross-modal interaction with empty text");
    }
    let logits = g.matmul_nt(xv, xq)?;
    let beta = g.softmax_rows(logits, Some(mask))?;
    let ctx = g.matmul(beta, xq)?;
    Ok((g.add(xv, ctx)?, beta))
}

pub fn cross_modal_interact(g: &mut Graph<'_>, xv: Var, xq: Var, mask: &[bool]) -> Result<Var> {
    Ok(cross_modal_attention(g, xv, xq, mask)?.0)
}

/// Position embeddings, an MHSA stack over the `k` clip rows, mean-pooling.
#[derive(Clone, Debug, PartialEq)]
pub struct GlobalTransformer {
    pub k: usize,
    pub pos: PositionEmbedding,
    pub stack: MhsaStack,
}

impl GlobalTransformer {
    pub fn register(store: &mut ParamStore, init: &mut Initializer, cfg: &RunConfig) -> Result<Self> {
        let pos = PositionEmbedding::register(store, "global.pos", cfg.k, cfg.d)?;
        let stack = MhsaStack::register(store, init, "global.layer", cfg.d, cfg.heads, cfg.layers)?;
        Ok(Self { k: cfg.k, pos, stack })
    }

    /// Maps stacked `S * k x d` clip features to `S x d`.
    pub fn forward(&self, g: &mut Graph<'_>, clips: Var) -> Result<Var> {
        let rows = g.value(clips).rows();
        if self.k == 0 || rows == 0 || !rows.is_multiple_of(self.k) {
            return shape_err("global_transform", format!("{rows} rows for k = {}", self.k));
        }
        let x = add_position(g, clips, &self.pos, self.k)?;
        let x = self.stack.forward(g, x, self.k, None)?;
        g.group_mean(x, self.k)
    }
}

/// Raw per-candidate scores with the predicted index.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreVector {
    pub scores: Vec<f64>,
    pub argmax: usize,
}

impl ScoreVector {
    /// Ties resolve to the lowest index.
    pub fn new(scores: Vec<f64>) -> Result<Self> {
        if scores.is_empty() {
            return invalid("no candidate answers to score");
        }
        let mut argmax = 0;
        for (i, &s) in scores.iter().enumerate() {
            if s > scores[argmax] {
                argmax = i;
            }
        }
        Ok(Self { scores, argmax })
    }

    pub fn from_var(g: &Graph<'_>, scores: Var) -> Result<Self> {
        Self::new(g.value(scores).data().to_vec())
    }
}

fn check_candidates(g: &Graph<'_>, f: Var, answers: Var) -> Result<()> {
    if g.value(answers).rows() == 0 {
        return invalid("no candidate answers to score");
    }
    if g.value(f).cols() != g.value(answers).cols() {
        return shape_err(
            "score_answers",
            format!("{:?} against answers {:?}", g.shape(f), g.shape(answers)),
        );
    }
    Ok(())
}

/// `s = f^qv F_A^T` for a single `1 x d` video-question vector.
pub fn score_answers(g: &mut Graph<'_>, f_qv: Var, answers: Var) -> Result<Var> {
    check_candidates(g, f_qv, answers)?;
    if g.value(f_qv).rows() != 1 {
        return shape_err("score_answers", format!("f_qv has shape {:?}", g.shape(f_qv)));
    }
    g.matmul_nt(f_qv, answers)
}

/// `s_a = f^qv_a . f^A_a` when every candidate has its own video-question
/// vector (`|A| x d` each). Returns `1 x |A|`.
pub fn score_pairs(g: &mut Graph<'_>, f_qv: Var, answers: Var) -> Result<Var> {
    check_candidates(g, f_qv, answers)?;
    if g.shape(f_qv) != g.shape(answers) {
        return shape_err("score_pairs", format!("{:?} vs {:?}", g.shape(f_qv), g.shape(answers)));
    }
    let (a, d) = (g.value(answers).rows(), g.value(answers).cols());
    let prod = g.mul(f_qv, answers)?;
    let ones = g.constant(Tensor::full(&[d, 1], 1.0))?;
    let s = g.matmul(prod, ones)?;
    g.reshape(s, &[1, a])
}

/// `(f^qv F_A^T) * (f^q F_A^T)` elementwise.
pub fn joint_score(g: &mut Graph<'_>, f_qv: Var, f_q: Var, answers: Var) -> Result<Var> {
    let a = score_answers(g, f_qv, answers)?;
    let b = score_answers(g, f_q, answers)?;
    g.mul(a, b)
}

/// Softmax cross-entropy of the gold candidate over `1 x |A|` raw scores.
pub fn qa_loss(g: &mut Graph<'_>, scores: Var, gold: usize) -> Result<Var> {
    let n = g.value(scores).numel();
    if gold >= n {
        return invalid(format!("gold index {gold} out of {n} candidates"));
    }
    let logits = g.reshape(scores, &[1, n])?;
    g.cross_entropy(logits, &[gold])
}
