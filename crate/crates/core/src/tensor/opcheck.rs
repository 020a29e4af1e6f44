//! Finite-difference self-test of every differentiable graph operation.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{finite_diff_check, Graph, Tensor, Var};
use crate::error::Result;
use crate::rng::SeedStreams;

const STEP: f64 = 1e-4;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("shape")
}

/// `sum(y * w)` with fixed irregular `w`, so every output coordinate matters.
fn scalarize(g: &mut Graph<'_>, y: Var) -> Result<Var> {
    let shape = g.shape(y).to_vec();
    let n = shape.iter().product::<usize>();
    let w = Tensor::new(shape, (0..n).map(|i| (1.3 * i as f64 + 0.7).cos()).collect())?;
    let w = g.constant(w)?;
    let p = g.mul(y, w)?;
    g.sum(p)
}

struct Suite {
    rng: ChaCha8Rng,
    out: Vec<(String, f64)>,
}

impl Suite {
    fn t(&mut self, shape: &[usize]) -> Tensor {
        rand_tensor(&mut self.rng, shape)
    }

    /// Checks `op` with respect to its `which`-th argument; the others are
    /// constants.
    fn check<F>(&mut self, name: &str, args: &[Tensor], op: F) -> Result<()>
    where
        F: Fn(&mut Graph<'_>, &[Var]) -> Result<Var>,
    {
        for which in 0..args.len() {
            let f = |g: &mut Graph<'_>, x: Var| -> Result<Var> {
                let mut vars = Vec::with_capacity(args.len());
                for (i, a) in args.iter().enumerate() {
                    vars.push(if i == which { x } else { g.constant(a.clone())? });
                }
                let y = op(g, &vars)?;
                if g.value(y).numel() == 1 {
                    Ok(y)
                } else {
                    scalarize(g, y)
                }
            };
            let err = finite_diff_check(f, &args[which], STEP)?;
            self.out.push((format!("{name}[{which}]"), err));
        }
        Ok(())
    }
}

/// Max relative error per (operation, argument) at points drawn from `seed`.
pub fn operator_gradient_errors(seed: u64) -> Result<Vec<(String, f64)>> {
    let mut s = Suite {
        rng: SeedStreams::new(seed).stream("opcheck", 0),
        out: Vec::new(),
    };
    let (a, b) = (s.t(&[3, 4]), s.t(&[4, 2]));
    s.check("matmul", &[a.clone(), b], |g, v| g.matmul(v[0], v[1]))?;
    let c = s.t(&[5, 4]);
    s.check("matmul_nt", &[a.clone(), c], |g, v| g.matmul_nt(v[0], v[1]))?;
    s.check("transpose", std::slice::from_ref(&a), |g, v| g.transpose(v[0]))?;
    let (ba, bb) = (s.t(&[6, 3]), s.t(&[6, 2]));
    s.check("batch_matmul", &[ba.clone(), bb], |g, v| g.batch_matmul(v[0], v[1], 2))?;
    let bc = s.t(&[6, 3]);
    s.check("batch_matmul_nt", &[ba, bc], |g, v| g.batch_matmul_nt(v[0], v[1], 2))?;
    let a2 = s.t(&[3, 4]);
    s.check("add", &[a.clone(), a2.clone()], |g, v| g.add(v[0], v[1]))?;
    s.check("sub", &[a.clone(), a2.clone()], |g, v| g.sub(v[0], v[1]))?;
    s.check("mul", &[a.clone(), a2], |g, v| g.mul(v[0], v[1]))?;
    let bias = s.t(&[4]);
    s.check("add_row", &[a.clone(), bias], |g, v| g.add_row(v[0], v[1]))?;
    s.check("scale", std::slice::from_ref(&a), |g, v| g.scale(v[0], -1.7))?;
    s.check("elu", std::slice::from_ref(&a), |g, v| g.elu(v[0]))?;
    s.check("relu", std::slice::from_ref(&a), |g, v| g.relu(v[0]))?;
    s.check("softmax_rows", std::slice::from_ref(&a), |g, v| g.softmax_rows(v[0], None))?;
    s.check("softmax_rows_masked", std::slice::from_ref(&a), |g, v| {
        g.softmax_rows(v[0], Some(&[true, false, true, true]))
    })?;
    let (gain, lb) = (s.t(&[4]), s.t(&[4]));
    s.check("layer_norm", &[a.clone(), gain, lb], |g, v| g.layer_norm(v[0], v[1], v[2]))?;
    s.check("cross_entropy", std::slice::from_ref(&a), |g, v| g.cross_entropy(v[0], &[1, 3, 0]))?;
    s.check("sum", std::slice::from_ref(&a), |g, v| g.sum(v[0]))?;
    let d = s.t(&[3, 2]);
    s.check("concat_cols", &[a.clone(), d], |g, v| g.concat_cols(&[v[0], v[1]]))?;
    let e = s.t(&[2, 4]);
    s.check("concat_rows", &[a.clone(), e], |g, v| g.concat_rows(&[v[0], v[1]]))?;
    s.check("slice_rows", std::slice::from_ref(&a), |g, v| g.slice_rows(v[0], 1, 2))?;
    s.check("reshape", std::slice::from_ref(&a), |g, v| g.reshape(v[0], &[2, 6]))?;
    s.check("gather_rows", std::slice::from_ref(&a), |g, v| g.gather_rows(v[0], &[2, 0, 2, 1]))?;
    let f = s.t(&[6, 3]);
    s.check("group_mean", std::slice::from_ref(&f), |g, v| g.group_mean(v[0], 3))?;
    s.check("masked_mean_rows", std::slice::from_ref(&f), |g, v| {
        g.masked_mean_rows(v[0], &[true, false, true, true, false, true])
    })?;
    let alpha = s.t(&[2, 3]);
    s.check("segment_weighted_sum", &[alpha, f], |g, v| g.segment_weighted_sum(v[0], v[1]))?;
    let (q, k, vv) = (s.t(&[6, 4]), s.t(&[6, 4]), s.t(&[6, 4]));
    s.check("attention", &[q.clone(), k.clone(), vv.clone()], |g, v| {
        g.attention(v[0], v[1], v[2], 2, 3, None)
    })?;
    s.check("attention_masked", &[q, k, vv], |g, v| {
        g.attention(v[0], v[1], v[2], 2, 3, Some(&[true, true, false, true, false, true]))
    })?;
    Ok(s.out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_operation_passes() {
        for (name, err) in operator_gradient_errors(0).unwrap() {
            assert!(err < 1e-4, "{name}: {err}");
        }
    }
}
