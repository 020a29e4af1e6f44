//! Self-attention, post-norm multi-head self-attention layers and learnable
//! sinusoidal position tables.

use crate::error::{invalid, shape_err, Result};
use crate::tensor::{Graph, Initializer, ParamStore, Tensor, Var};

/// Single-head attention over one sequence:
/// `softmax_rows(X_k X_q^T / sqrt(d_k)) X_v`.
pub fn self_attention(g: &mut Graph<'_>, xq: Var, xk: Var, xv: Var) -> Result<Var> {
    let rows = g.value(xq).rows();
    if rows == 0 {
        return invalid("self-attention over an empty sequence");
    }
    g.attention(xq, xk, xv, 1, rows, None)
}

/// The attention weights `softmax_rows(X_k X_q^T / sqrt(d_k))` of one head.
pub fn attention_weights(xq: &Tensor, xk: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let (q, k) = (g.constant(xq.clone())?, g.constant(xk.clone())?);
    let dk = xq.cols();
    let logits = g.matmul_nt(k, q)?;
    let logits = g.scale(logits, 1.0 / (dk as f64).sqrt())?;
    let w = g.softmax_rows(logits, None)?;
    Ok(g.value(w).clone())
}

/// One multi-head self-attention block followed by skip + LayerNorm.
/// Weights live in the store under `prefix`.
#[derive(Clone, Debug, PartialEq)]
pub struct MhsaLayer {
    pub prefix: String,
    pub dim: usize,
    pub heads: usize,
}

impl MhsaLayer {
    /// Registers per-head query/key/value maps (stacked into d x d matrices,
    /// head `h` owning columns `h*d_k..(h+1)*d_k`), the output map and the
    /// LayerNorm gain/bias.
    pub fn register(
        store: &mut ParamStore,
        init: &mut Initializer,
        prefix: &str,
        dim: usize,
        heads: usize,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return shape_err("MhsaLayer", format!("dim {dim} not divisible by {heads} heads"));
        }
        for part in ["q", "k", "v", "c"] {
            init.linear(store, &format!("{prefix}.{part}"), dim, dim, true)?;
        }
        store.insert(format!("{prefix}.ln.g"), Tensor::full(&[dim], 1.0))?;
        store.insert(format!("{prefix}.ln.b"), Tensor::zeros(&[dim]))?;
        Ok(Self {
            prefix: prefix.to_string(),
            dim,
            heads,
        })
    }

    fn linear(&self, g: &mut Graph<'_>, x: Var, part: &str) -> Result<Var> {
        let w = g.param(&format!("{}.{part}.w", self.prefix))?;
        let b = g.param(&format!("{}.{part}.b", self.prefix))?;
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }

    /// `LN(W_c [h_1; ..; h_e] + X)` over stacked sequences of `seq_len` rows.
    pub fn forward(&self, g: &mut Graph<'_>, x: Var, seq_len: usize, key_mask: Option<&[bool]>) -> Result<Var> {
        if g.value(x).cols() != self.dim {
            return shape_err(
                "mhsa_layer",
                format!("input width {} != layer dim {}", g.value(x).cols(), self.dim),
            );
        }
        let q = self.linear(g, x, "q")?;
        let k = self.linear(g, x, "k")?;
        let v = self.linear(g, x, "v")?;
        let heads = g.attention(q, k, v, self.heads, seq_len, key_mask)?;
        let out = self.linear(g, heads, "c")?;
        let res = g.add(out, x)?;
        let gain = g.param(&format!("{}.ln.g", self.prefix))?;
        let bias = g.param(&format!("{}.ln.b", self.prefix))?;
        g.layer_norm(res, gain, bias)
    }
}

/// `H` untied layers applied in sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct MhsaStack {
    pub layers: Vec<MhsaLayer>,
}

impl MhsaStack {
    pub fn register(
        store: &mut ParamStore,
        init: &mut Initializer,
        prefix: &str,
        dim: usize,
        heads: usize,
        depth: usize,
    ) -> Result<Self> {
        let layers = (0..depth)
            .map(|i| MhsaLayer::register(store, init, &format!("{prefix}.{i}"), dim, heads))
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn forward(&self, g: &mut Graph<'_>, mut x: Var, seq_len: usize, key_mask: Option<&[bool]>) -> Result<Var> {
        for layer in &self.layers {
            x = layer.forward(g, x, seq_len, key_mask)?;
        }
        Ok(x)
    }
}

/// `table[pos, 2i] = sin(pos / 10000^(2i/dim))`, `table[pos, 2i+1] = cos(..)`.
pub fn sinusoidal_table(len: usize, dim: usize) -> Tensor {
    let mut data = vec![0.0; len * dim];
    for pos in 0..len {
        for c in 0..dim {
            let i = (c / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * i / dim as f64);
            data[pos * dim + c] = if c % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::matrix(len, dim, data).expect("table shape")
}

/// Trainable position table initialized sinusoidally.
#[derive(Clone, Debug, PartialEq)]
pub struct PositionEmbedding {
    pub name: String,
    pub len: usize,
    pub dim: usize,
}

impl PositionEmbedding {
    pub fn register(store: &mut ParamStore, name: &str, len: usize, dim: usize) -> Result<Self> {
        store.insert(name, sinusoidal_table(len, dim))?;
        Ok(Self {
            name: name.to_string(),
            len,
            dim,
        })
    }
}

/// `X + table[0..seq]`, applied to each stacked sequence of `seq_len` rows.
pub fn add_position(g: &mut Graph<'_>, x: Var, pe: &PositionEmbedding, seq_len: usize) -> Result<Var> {
    let rows = g.value(x).rows();
    if seq_len > pe.len {
        return invalid(format!("sequence length {seq_len} exceeds position table {}", pe.len));
    }
    if seq_len == 0 || !rows.is_multiple_of(seq_len) {
        return shape_err("add_position", format!("{rows} rows in sequences of {seq_len}"));
    }
    let table = g.param(&pe.name)?;
    let index: Vec<usize> = (0..rows).map(|r| r % seq_len).collect();
    let pos = g.gather_rows(table, &index)?;
    g.add(x, pos)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedStreams;

    fn mat(rows: usize, cols: usize, data: &[f64]) -> Tensor {
        Tensor::matrix(rows, cols, data.to_vec()).unwrap()
    }

    #[test]
    fn single_token_returns_values() {
        let mut g = Graph::new();
        let q = g.constant(mat(1, 3, &[0.3, -1.0, 2.0])).unwrap();
        let k = g.constant(mat(1, 3, &[1.0, 4.0, 0.5])).unwrap();
        let v = g.constant(mat(1, 3, &[7.0, 8.0, 9.0])).unwrap();
        let o = self_attention(&mut g, q, k, v).unwrap();
        assert_eq!(g.value(o).data(), &[7.0, 8.0, 9.0]);
    }

    #[test]
    fn equal_logits_average_values() {
        let mut g = Graph::new();
        let q = g.constant(mat(3, 2, &[1.0, 1.0, 1.0, 1.0, 1.0, 1.0])).unwrap();
        let k = g.constant(mat(3, 2, &[0.5, 0.5, 0.5, 0.5, 0.5, 0.5])).unwrap();
        let v = g.constant(mat(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 9.0])).unwrap();
        let o = self_attention(&mut g, q, k, v).unwrap();
        for r in 0..3 {
            assert!((g.value(o).at(r, 0) - 3.0).abs() < 1e-12);
            assert!((g.value(o).at(r, 1) - 5.0).abs() < 1e-12);
        }
    }

    #[test]
    fn two_token_hand_softmax() {
        // d_k = 1 and logits = K Q^T: row 0 is [0, ln 3], row 1 is [0, 0].
        let ln3 = 3f64.ln();
        let xq = mat(2, 1, &[0.0, ln3]);
        let xk = mat(2, 1, &[1.0, 0.0]);
        let w = attention_weights(&xq, &xk).unwrap();
        assert!((w.at(0, 0) - 0.25).abs() < 1e-12);
        assert!((w.at(0, 1) - 0.75).abs() < 1e-12);
        assert!((w.at(1, 0) - 0.5).abs() < 1e-12);
        // V = [[4, 0], [0, 8]], one column at a time (d_v = d_k).
        for (vcol, expect) in [([4.0, 0.0], [1.0, 2.0]), ([0.0, 8.0], [6.0, 4.0])] {
            let mut g = Graph::new();
            let q = g.constant(xq.clone()).unwrap();
            let k = g.constant(xk.clone()).unwrap();
            let v = g.constant(mat(2, 1, &vcol)).unwrap();
            let o = self_attention(&mut g, q, k, v).unwrap();
            for (a, b) in g.value(o).data().iter().zip(expect) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn empty_sequence_fails() {
        let mut g = Graph::new();
        let e = g.constant(Tensor::zeros(&[0, 2])).unwrap();
        assert!(self_attention(&mut g, e, e, e).is_err());
    }

    fn layer_store(dim: usize, heads: usize) -> (ParamStore, MhsaLayer) {
        let mut store = ParamStore::new();
        let mut init = Initializer::new(SeedStreams::new(0).stream("init", 0));
        let layer = MhsaLayer::register(&mut store, &mut init, "l", dim, heads).unwrap();
        (store, layer)
    }

    #[test]
    fn zero_weights_reduce_to_layer_norm() {
        let (mut store, layer) = layer_store(4, 2);
        for p in ["q", "k", "v", "c"] {
            store.set(&format!("l.{p}.w"), Tensor::zeros(&[4, 4])).unwrap();
            store.set(&format!("l.{p}.b"), Tensor::zeros(&[4])).unwrap();
        }
        let x = mat(2, 4, &[1.0, 2.0, 3.0, 4.0, -1.0, 0.5, 0.0, 2.0]);
        let mut g = Graph::with_params(&store);
        let xv = g.constant(x.clone()).unwrap();
        let y = layer.forward(&mut g, xv, 2, None).unwrap();
        for r in 0..2 {
            let row = x.row(r);
            let mean = row.iter().sum::<f64>() / 4.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
            for c in 0..4 {
                let expect = (row[c] - mean) / (var + 1e-5).sqrt();
                assert!((g.value(y).at(r, c) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn shape_is_preserved_and_heads_must_divide() {
        let (store, layer) = layer_store(64, 8);
        let mut init = Initializer::new(SeedStreams::new(1).stream("x", 0));
        let x = init.uniform(&[7, 64], 1.0);
        let mut g = Graph::with_params(&store);
        let xv = g.constant(x).unwrap();
        let y = layer.forward(&mut g, xv, 7, None).unwrap();
        assert_eq!(g.shape(y), &[7, 64]);

        let mut store = ParamStore::new();
        assert!(MhsaLayer::register(&mut store, &mut init, "bad", 10, 4).is_err());
    }

    #[test]
    fn sinusoidal_position_zero() {
        let t = sinusoidal_table(4, 6);
        for c in 0..6 {
            assert_eq!(t.at(0, c), if c % 2 == 0 { 0.0 } else { 1.0 });
        }
        assert!(t.is_finite());
    }

    #[test]
    fn zero_table_is_identity_and_length_is_checked() {
        let mut store = ParamStore::new();
        let pe = PositionEmbedding::register(&mut store, "pos", 3, 2).unwrap();
        store.set("pos", Tensor::zeros(&[3, 2])).unwrap();
        let mut g = Graph::with_params(&store);
        let x = g.constant(mat(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0])).unwrap();
        let y = add_position(&mut g, x, &pe, 3).unwrap();
        assert_eq!(g.value(y).data(), g.value(x).data());
        let long = g.constant(Tensor::zeros(&[4, 2])).unwrap();
        assert!(add_position(&mut g, long, &pe, 4).is_err());
    }
}
