use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, ParamStore, Tensor, Var};
use crate::error::{invalid, Result};

/// Knobs for [`finite_diff_check_params`].
#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Upper bound on coordinates probed per tensor; `None` probes all.
    pub max_coords_per_tensor: Option<usize>,
    /// Seed for choosing the probed coordinates.
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-4,
            max_coords_per_tensor: None,
            seed: 0,
        }
    }
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(1.0)
}

fn check_step(step: f64) -> Result<()> {
    if !(step.is_finite() && step > 0.0) {
        return invalid(format!("finite-difference step must be positive, got {step}"));
    }
    Ok(())
}

fn scalar_of(g: &Graph<'_>, v: Var) -> Result<f64> {
    let t = g.value(v);
    if t.numel() != 1 {
        return invalid(format!("function must be scalar-valued, got shape {:?}", t.shape()));
    }
    Ok(t.data()[0])
}

/// Compares the autodiff gradient of `f` at `point` with central
/// differences and returns `max |analytic - numeric| / max(1, |analytic|)`.
///
/// `f` receives the point as a differentiable input and must return a
/// scalar. It is evaluated twice at `point` first; differing results are
/// reported as an error.
pub fn finite_diff_check<F>(f: F, point: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Graph<'_>, Var) -> Result<Var>,
{
    check_step(step)?;
    let eval = |p: &Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let x = g.input(p.clone())?;
        let y = f(&mut g, x)?;
        scalar_of(&g, y)
    };

    let mut g = Graph::new();
    let x = g.input(point.clone())?;
    let y = f(&mut g, x)?;
    let base = scalar_of(&g, y)?;
    if eval(point)?.to_bits() != base.to_bits() {
        return invalid("function is not deterministic");
    }
    let analytic = g.backward(y)?.wrt(&g, x);

    let mut worst: f64 = 0.0;
    let mut probe = point.clone();
    for i in 0..point.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let plus = eval(&probe)?;
        probe.data_mut()[i] = orig - step;
        let minus = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * step);
        worst = worst.max(rel_err(analytic.data()[i], numeric));
    }
    Ok(worst)
}

/// Same check with respect to named parameters of `store`.
pub fn finite_diff_check_params<F>(
    store: &ParamStore,
    names: &[&str],
    f: F,
    opts: &GradCheckOptions,
) -> Result<f64>
where
    F: Fn(&mut Graph<'_>) -> Result<Var>,
{
    check_step(opts.step)?;
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::with_params(s);
        let y = f(&mut g)?;
        scalar_of(&g, y)
    };

    let mut g = Graph::with_params(store);
    let y = f(&mut g)?;
    let base = scalar_of(&g, y)?;
    if eval(store)?.to_bits() != base.to_bits() {
        return invalid("function is not deterministic");
    }
    let analytic = g.backward(y)?.param_grads(store);
    drop(g);

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut probe = store.clone();
    let mut worst: f64 = 0.0;
    for name in names {
        let id = store.id(name)?;
        let numel = store.tensor(id).numel();
        let coords: Vec<usize> = match opts.max_coords_per_tensor {
            Some(limit) if limit < numel => sample(&mut rng, numel, limit).into_vec(),
            _ => (0..numel).collect(),
        };
        for i in coords {
            let orig = probe.tensor(id).data()[i];
            probe.tensor_mut(id).data_mut()[i] = orig + opts.step;
            let plus = eval(&probe)?;
            probe.tensor_mut(id).data_mut()[i] = orig - opts.step;
            let minus = eval(&probe)?;
            probe.tensor_mut(id).data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            worst = worst.max(rel_err(analytic.by_id(id).data()[i], numeric));
        }
    }
    Ok(worst)
}
