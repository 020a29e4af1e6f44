//! Video-description matching with sampled negatives, plus masked language
//! modeling on the positive description.

use rand::seq::index;
use rand::Rng;

use crate::error::{invalid, shape_err, Result};
use crate::tensor::{Graph, Initializer, ParamStore, Tensor, Var};
use crate::text::{Vocab, MASK, NUM_RESERVED};

/// `count` distinct sample indices drawn uniformly from `0..dataset_size`
/// excluding `own`.
pub fn sample_negatives<R: Rng + ?Sized>(dataset_size: usize, own: usize, count: usize, rng: &mut R) -> Result<Vec<usize>> {
    if own >= dataset_size {
        return invalid(format!("sample {own} outside dataset of {dataset_size}"));
    }
    if count == 0 || count > dataset_size - 1 {
        return invalid(format!(
            "cannot draw {count} negatives from {} other samples",
            dataset_size - 1
        ));
    }
    Ok(index::sample(rng, dataset_size - 1, count)
        .into_iter()
        .map(|i| if i >= own { i + 1 } else { i })
        .collect())
}

/// `-log(exp(f.p) / (exp(f.p) + sum_neg exp(f.n)))` for `1 x d` inputs and
/// `N_neg x d` negatives.
pub fn contrastive_loss(g: &mut Graph<'_>, f_qv: Var, f_pos: Var, f_negs: Var) -> Result<Var> {
    if g.value(f_negs).rows() == 0 {
        return invalid("contrastive loss needs at least one negative");
    }
    if g.value(f_qv).rows() != 1 || g.value(f_pos).rows() != 1 {
        return shape_err(
            "contrastive_loss",
            format!("f_qv {:?}, positive {:?}", g.shape(f_qv), g.shape(f_pos)),
        );
    }
    let texts = g.concat_rows(&[f_pos, f_negs])?;
    let logits = g.matmul_nt(f_qv, texts)?;
    g.cross_entropy(logits, &[0])
}

/// Corrupted copy of a token sequence and what to predict.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MlmTarget {
    pub tokens: Vec<usize>,
    pub positions: Vec<usize>,
    pub originals: Vec<usize>,
}

/// Each non-reserved token is picked with probability `prob`; a picked
/// token becomes `[MASK]` (80%), a uniformly random word (10%) or stays
/// as is (10%).
pub fn corrupt_tokens<R: Rng + ?Sized>(tokens: &[usize], vocab_size: usize, prob: f64, rng: &mut R) -> MlmTarget {
    let mut out = MlmTarget {
        tokens: tokens.to_vec(),
        positions: Vec::new(),
        originals: Vec::new(),
    };
    for (p, &t) in tokens.iter().enumerate() {
        if Vocab::is_reserved(t) || rng.random::<f64>() >= prob {
            continue;
        }
        out.positions.push(p);
        out.originals.push(t);
        let u: f64 = rng.random();
        if u < 0.8 {
            out.tokens[p] = MASK;
        } else if u < 0.9 {
            out.tokens[p] = rng.random_range(NUM_RESERVED..vocab_size);
        }
    }
    out
}

/// Linear map from contextual text features to vocabulary logits.
pub fn register_mlm_head(store: &mut ParamStore, init: &mut Initializer, d_text: usize, vocab_size: usize) -> Result<()> {
    init.linear(store, "mlm", d_text, vocab_size, true)?;
    Ok(())
}

/// Mean cross-entropy of the original ids at `rows` of `contextual`;
/// a constant zero when nothing was corrupted.
pub fn mlm_loss(g: &mut Graph<'_>, contextual: Var, rows: &[usize], originals: &[usize]) -> Result<Var> {
    if rows.len() != originals.len() {
        return shape_err("mlm_loss", format!("{} rows for {} targets", rows.len(), originals.len()));
    }
    if rows.is_empty() {
        return g.constant(Tensor::scalar(0.0));
    }
    let x = g.gather_rows(contextual, rows)?;
    let (w, b) = (g.param("mlm.w")?, g.param("mlm.b")?);
    let logits = g.matmul(x, w)?;
    let logits = g.add_row(logits, b)?;
    g.cross_entropy(logits, originals)
}
