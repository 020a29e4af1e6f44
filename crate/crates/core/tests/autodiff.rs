use approx::assert_abs_diff_eq;
use proptest::prelude::*;
use vgt_core::attention::MhsaLayer;
use vgt_core::rng::SeedStreams;
use vgt_core::tensor::{
    adam_step, cosine_lr, finite_diff_check, finite_diff_check_params, operator_gradient_errors,
    AdamConfig, GradCheckOptions, Graph, Initializer, OptimizerState, ParamGrads, ParamStore, Tensor,
};

fn row(v: &[f64]) -> Tensor {
    Tensor::matrix(1, v.len(), v.to_vec()).unwrap()
}

fn softmax(x: &Tensor) -> Tensor {
    let mut g = Graph::new();
    let v = g.constant(x.clone()).unwrap();
    let s = g.softmax_rows(v, None).unwrap();
    g.value(s).clone()
}

fn layer_norm(x: &[f64], gain: &[f64], bias: &[f64]) -> Vec<f64> {
    let mut g = Graph::new();
    let x = g.constant(row(x)).unwrap();
    let gn = g.constant(Tensor::vector(gain.to_vec())).unwrap();
    let b = g.constant(Tensor::vector(bias.to_vec())).unwrap();
    let y = g.layer_norm(x, gn, b).unwrap();
    g.value(y).data().to_vec()
}

#[test]
fn softmax_examples() {
    assert_eq!(softmax(&row(&[0.0, 0.0])).data(), &[0.5, 0.5]);
    let big = softmax(&row(&[1e9, 0.0]));
    assert_abs_diff_eq!(big.data()[0], 1.0, epsilon = 1e-12);
    assert_abs_diff_eq!(big.data()[1], 0.0, epsilon = 1e-12);

    // Oracle: shifted exponentials summed smallest first.
    let x = [1.0f64, 2.0, 3.0];
    let e: Vec<f64> = x.iter().map(|v| (v - 3.0).exp()).collect();
    let total = e.iter().rev().fold(0.0, |a, b| a + b);
    let got = softmax(&row(&x));
    for (i, expect) in [0.09003, 0.24473, 0.66524].iter().enumerate() {
        assert_abs_diff_eq!(got.data()[i], e[i] / total, epsilon = 1e-15);
        assert_abs_diff_eq!(got.data()[i], *expect, epsilon = 1e-4);
    }
}

#[test]
fn non_finite_values_are_rejected() {
    let nan = Tensor::new(vec![1, 2], vec![f64::NAN, 0.0]).unwrap();
    let mut g = Graph::new();
    assert!(g.constant(nan).is_err());
    let x = g.constant(row(&[1e200])).unwrap();
    assert!(g.mul(x, x).is_err());
}

#[test]
fn layer_norm_examples() {
    assert_eq!(layer_norm(&[5.0, 5.0, 5.0], &[1.0; 3], &[0.0; 3]), vec![0.0; 3]);
    // (x - 2) / sqrt(1 + 1e-5)
    let y = layer_norm(&[1.0, 3.0], &[1.0; 2], &[0.0; 2]);
    let s = (1.0f64 + 1e-5).sqrt();
    assert_abs_diff_eq!(y[0], -1.0 / s, epsilon = 1e-15);
    assert_abs_diff_eq!(y[1], 1.0 / s, epsilon = 1e-15);
    assert_abs_diff_eq!(y[0], -1.0, epsilon = 1e-4);
    assert_eq!(layer_norm(&[0.3, -2.0, 7.0], &[0.0; 3], &[1.0, 2.0, 3.0]), vec![1.0, 2.0, 3.0]);

    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[2, 0])).unwrap();
    let gn = g.constant(Tensor::zeros(&[0])).unwrap();
    let b = g.constant(Tensor::zeros(&[0])).unwrap();
    assert!(g.layer_norm(x, gn, b).is_err());
}

#[test]
fn layer_norm_moments() {
    let x = Initializer::new(SeedStreams::new(4).stream("ln", 0)).uniform(&[5, 7], 3.0);
    let mut g = Graph::new();
    let xv = g.constant(x).unwrap();
    let gn = g.constant(Tensor::full(&[7], 1.0)).unwrap();
    let b = g.constant(Tensor::zeros(&[7])).unwrap();
    let y = g.layer_norm(xv, gn, b).unwrap();
    for r in 0..5 {
        let v = g.value(y).row(r);
        let mean = v.iter().sum::<f64>() / 7.0;
        let var = v.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / 7.0;
        assert!(mean.abs() < 1e-6);
        assert!((var - 1.0).abs() < 1e-3, "{var}");
    }
}

#[test]
fn backward_examples() {
    let mut store = ParamStore::new();
    store.insert("w", Tensor::vector(vec![1.0, 2.0])).unwrap();
    store.insert("unused", Tensor::vector(vec![3.0])).unwrap();
    let mut g = Graph::with_params(&store);
    let w = g.param("w").unwrap();
    let sq = g.mul(w, w).unwrap();
    let loss = g.sum(sq).unwrap();
    let grads = g.backward(loss).unwrap().param_grads(&store);
    assert_eq!(grads.get(&store, "w").unwrap().data(), &[2.0, 4.0]);
    assert_eq!(grads.get(&store, "unused").unwrap().data(), &[0.0]);

    let mut g = Graph::with_params(&store);
    let _ = g.param("w").unwrap();
    let c = g.constant(Tensor::scalar(4.0)).unwrap();
    let grads = g.backward(c).unwrap().param_grads(&store);
    assert!(grads.iter().all(|t| t.data().iter().all(|&v| v == 0.0)));

    let mut g = Graph::with_params(&store);
    let w = g.param("w").unwrap();
    assert!(g.backward(w).is_err());
}

#[test]
fn finite_diff_examples() {
    let square = |g: &mut Graph<'_>, x| {
        let y = g.mul(x, x)?;
        g.sum(y)
    };
    assert!(finite_diff_check(square, &Tensor::vector(vec![3.0]), 1e-4).unwrap() < 1e-6);
    assert!(finite_diff_check(square, &Tensor::vector(vec![3.0]), 0.0).is_err());

    let point = Initializer::new(SeedStreams::new(0).stream("fd", 0)).uniform(&[3, 5], 2.0);
    let ce = |g: &mut Graph<'_>, x| {
        let p = g.softmax_rows(x, None)?;
        let p = g.scale(p, 3.0)?;
        g.cross_entropy(p, &[0, 4, 2])
    };
    assert!(finite_diff_check(ce, &point, 1e-4).unwrap() < 1e-4);

    let counter = std::cell::Cell::new(0.0);
    let flaky = |g: &mut Graph<'_>, x| {
        counter.set(counter.get() + 1.0);
        let c = g.constant(Tensor::vector(vec![counter.get()]))?;
        let y = g.mul(x, c)?;
        g.sum(y)
    };
    assert!(finite_diff_check(flaky, &Tensor::vector(vec![1.0]), 1e-4).is_err());
}

#[test]
fn operator_suite_passes_for_three_seeds() {
    for seed in 0..3 {
        let errs = operator_gradient_errors(seed).unwrap();
        assert!(errs.len() >= 30);
        for (name, err) in errs {
            assert!(err < 1e-4, "seed {seed} {name}: {err:e}");
        }
    }
}

#[test]
fn mhsa_layer_gradients_wrt_input_and_weights() {
    for seed in 0..3 {
        let mut store = ParamStore::new();
        let mut init = Initializer::new(SeedStreams::new(seed).stream("init", 0));
        let layer = MhsaLayer::register(&mut store, &mut init, "l", 6, 2).unwrap();
        store.insert("x", init.uniform(&[8, 6], 1.0)).unwrap();
        let names: Vec<String> = store.iter().map(|(n, _)| n.to_string()).collect();
        let names: Vec<&str> = names.iter().map(String::as_str).collect();
        let opts = GradCheckOptions {
            step: 1e-4,
            max_coords_per_tensor: None,
            seed,
        };
        let err = finite_diff_check_params(
            &store,
            &names,
            |g| {
                let v = g.param("x")?;
                let y = layer.forward(g, v, 4, None)?;
                let w = g.constant(Tensor::new(
                    vec![8, 6],
                    (0..48).map(|i| (0.37 * i as f64).sin()).collect(),
                )?)?;
                let y = g.mul(y, w)?;
                g.sum(y)
            },
            &opts,
        )
        .unwrap();
        assert!(err < 1e-4, "seed {seed}: {err:e}");
    }
}

fn adam_store(w: f64) -> ParamStore {
    let mut s = ParamStore::new();
    s.insert("w", Tensor::vector(vec![w])).unwrap();
    s
}

fn grads_of(store: &ParamStore, g: f64) -> ParamGrads {
    let mut grads = ParamGrads::zeros_like(store);
    grads.by_id_mut(0).data_mut()[0] = g;
    grads
}

#[test]
fn adam_single_step_matches_hand_recurrence() {
    let mut store = adam_store(1.0);
    let mut state = OptimizerState::new(&store, AdamConfig::new(0.1, 1000)).unwrap();
    { let gr = grads_of(&store, 1.0); adam_step(&mut store, &gr, &mut state) }.unwrap();
    // m = 0.1, v = 0.001; m_hat = 1, v_hat = 1; lr(0) = 0.1.
    let (m_hat, v_hat) = (0.1 / (1.0 - 0.9), 0.001 / (1.0 - 0.999));
    let expect = 1.0 - 0.1 * m_hat / (f64::sqrt(v_hat) + 1e-8);
    let got = store.get("w").unwrap().data()[0];
    assert_abs_diff_eq!(got, expect, epsilon = 1e-12);
    assert_abs_diff_eq!(got, 0.9, epsilon = 1e-3);
    assert_eq!(state.step, 1);
}

#[test]
fn adam_cosine_endpoint_and_frozen() {
    assert_eq!(cosine_lr(0.5, 10, 10), 0.0);
    assert_abs_diff_eq!(cosine_lr(0.5, 5, 10), 0.25, epsilon = 1e-15);

    let mut store = adam_store(2.0);
    let mut state = OptimizerState::new(&store, AdamConfig::new(0.1, 3)).unwrap();
    state.step = 3;
    { let gr = grads_of(&store, 5.0); adam_step(&mut store, &gr, &mut state) }.unwrap();
    assert_eq!(store.get("w").unwrap().data()[0], 2.0);

    let mut store = adam_store(2.0);
    store.freeze("w").unwrap();
    let mut state = OptimizerState::new(&store, AdamConfig::new(0.1, 100)).unwrap();
    for _ in 0..5 {
        { let gr = grads_of(&store, 5.0); adam_step(&mut store, &gr, &mut state) }.unwrap();
    }
    assert_eq!(store.get("w").unwrap().data()[0], 2.0);

    let mut other = ParamStore::new();
    other.insert("w", Tensor::vector(vec![0.0, 0.0])).unwrap();
    let bad = ParamGrads::zeros_like(&other);
    let mut store = adam_store(2.0);
    let mut state = OptimizerState::new(&store, AdamConfig::new(0.1, 100)).unwrap();
    assert!(adam_step(&mut store, &bad, &mut state).is_err());
}

#[test]
fn forward_is_bitwise_deterministic() {
    let mut store = ParamStore::new();
    let mut init = Initializer::new(SeedStreams::new(9).stream("init", 0));
    let layer = MhsaLayer::register(&mut store, &mut init, "l", 8, 4).unwrap();
    let x = init.uniform(&[6, 8], 1.0);
    let run = || {
        let mut g = Graph::with_params(&store);
        let v = g.constant(x.clone()).unwrap();
        let y = layer.forward(&mut g, v, 3, None).unwrap();
        g.value(y).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

fn tensor_strategy(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-3.0f64..3.0, len)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_sum_to_one(v in prop::collection::vec(-1e9f64..1e9, 12), scale in prop::sample::select(vec![1.0, 1e-3, 1e-9])) {
        let x = Tensor::matrix(3, 4, v.iter().map(|a| a * scale).collect()).unwrap();
        let s = softmax(&x);
        for r in 0..3 {
            let total: f64 = s.row(r).iter().sum();
            prop_assert!((total - 1.0).abs() <= 1e-9);
            prop_assert!(s.row(r).iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn gradients_are_linear_in_the_loss(a in tensor_strategy(12), b in tensor_strategy(12)) {
        let mut store = ParamStore::new();
        store.insert("x", Tensor::matrix(3, 4, a).unwrap()).unwrap();
        let other = Tensor::matrix(3, 4, b).unwrap();
        let loss1 = |g: &mut Graph<'_>| {
            let x = g.param("x").unwrap();
            let s = g.softmax_rows(x, None).unwrap();
            g.cross_entropy(s, &[0, 1, 3]).unwrap()
        };
        let loss2 = |g: &mut Graph<'_>| {
            let x = g.param("x").unwrap();
            let o = g.constant(other.clone()).unwrap();
            let y = g.mul(x, o).unwrap();
            let y = g.elu(y).unwrap();
            g.sum(y).unwrap()
        };
        let grad = |f: &dyn Fn(&mut Graph<'_>) -> vgt_core::tensor::Var| {
            let mut g = Graph::with_params(&store);
            let l = f(&mut g);
            g.backward(l).unwrap().param_grads(&store).by_id(0).clone()
        };
        let g1 = grad(&loss1);
        let g2 = grad(&loss2);
        let both = grad(&|g: &mut Graph<'_>| {
            let l1 = loss1(g);
            let l2 = loss2(g);
            g.add(l1, l2).unwrap()
        });
        for i in 0..12 {
            prop_assert!((both.data()[i] - (g1.data()[i] + g2.data()[i])).abs() <= 1e-12);
        }
    }
}
