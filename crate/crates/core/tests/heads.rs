mod common;

use approx::assert_abs_diff_eq;
use common::{random_mat, random_video, small_cfg, Mat};
use proptest::prelude::*;
use vgt_core::config::{CmPlacement, Mode, RunConfig};
use vgt_core::model::PretrainInputs;
use vgt_core::pretrain::{contrastive_loss, corrupt_tokens, mlm_loss, sample_negatives, MlmTarget};
use vgt_core::qa::{cross_modal_attention, joint_score, qa_loss, score_answers, ScoreVector};
use vgt_core::rng::SeedStreams;
use vgt_core::tensor::{finite_diff_check, Graph, ParamStore, Tensor, Var};
use vgt_core::text::{pool_text, tokenize, TextBatch, Vocab, CLS, MASK, PAD, SEP};
use vgt_core::{EncodedQa, Vgt};

const WORDS: &str = "what color is the marked object red blue green yellow purple which way does it move left right up down";

fn model(cfg: &RunConfig) -> (Vgt, ParamStore, Vocab) {
    let vocab = Vocab::build([WORDS]);
    let (m, p) = Vgt::build(cfg, vocab.len()).unwrap();
    (m, p, vocab)
}

fn value(store: &ParamStore, f: impl FnOnce(&mut Graph<'_>) -> Var) -> Tensor {
    let mut g = Graph::with_params(store);
    let v = f(&mut g);
    g.value(v).clone()
}

fn scalar(store: &ParamStore, f: impl FnOnce(&mut Graph<'_>) -> Var) -> f64 {
    value(store, f).data()[0]
}

fn row(v: &[f64]) -> Tensor {
    Tensor::matrix(1, v.len(), v.to_vec()).unwrap()
}

fn candidates(list: &[&str]) -> Vec<String> {
    list.iter().map(|s| s.to_string()).collect()
}

// ---- text encoder -------------------------------------------------------

fn encode(m: &Vgt, store: &ParamStore, seqs: &[Vec<usize>], len: usize) -> Tensor {
    let batch = TextBatch::padded_to(seqs, len).unwrap();
    value(store, |g| m.text.encode(g, &batch).unwrap())
}

#[test]
fn padding_does_not_change_real_tokens() {
    for seed in 0..3 {
        let (m, store, vocab) = model(&small_cfg(seed));
        let seqs = vec![tokenize("what color is the object", &vocab), tokenize("red", &vocab)];
        let short = encode(&m, &store, &seqs, 6);
        let long = encode(&m, &store, &seqs, 15);
        for (s, ids) in seqs.iter().enumerate() {
            for p in 0..ids.len() {
                for c in 0..m.cfg.d {
                    assert!((short.at(s * 6 + p, c) - long.at(s * 15 + p, c)).abs() <= 1e-9);
                }
            }
        }
    }
}

#[test]
fn encoder_shapes_and_single_token() {
    let (m, store, vocab) = model(&small_cfg(0));
    let out = encode(&m, &store, &[tokenize("", &vocab)], 1);
    assert_eq!(out.shape(), [1, m.cfg.d]);
    let too_long = vec![CLS; m.cfg.max_text_len + 1];
    let batch = TextBatch::new(&[too_long]).unwrap();
    let mut g = Graph::with_params(&store);
    assert!(m.text.encode(&mut g, &batch).is_err());
}

#[test]
fn pooling_ignores_token_order_without_positions() {
    let (m, mut store, vocab) = model(&small_cfg(1));
    let shape = store.get("text.pos").unwrap().shape().to_vec();
    store.set("text.pos", Tensor::zeros(&shape)).unwrap();
    let pooled = |text: &str| {
        let ids = tokenize(text, &vocab);
        let batch = TextBatch::new(&[ids]).unwrap();
        value(&store, |g| {
            let x = m.text.encode(g, &batch).unwrap();
            pool_text(g, x, &batch.mask).unwrap()
        })
    };
    let a = pooled("red blue green object");
    let b = pooled("object green red blue");
    assert!(a.max_abs_diff(&b).unwrap() <= 1e-12);
}

#[test]
fn pool_text_examples() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![3.0, 2.0], vec![9.0, 9.0]]).unwrap()).unwrap();
    let p = pool_text(&mut g, x, &[true, true, false]).unwrap();
    assert_eq!(g.value(p).data(), &[2.0, 1.0]);
    assert!(pool_text(&mut g, x, &[false; 3]).is_err());
}

#[test]
fn encoder_gradients_through_the_stack() {
    let (m, store, vocab) = model(&small_cfg(2));
    let batch = TextBatch::new(&[tokenize("which way does it move", &vocab), tokenize("left", &vocab)]).unwrap();
    let names: Vec<String> = store
        .iter()
        .map(|(n, _)| n.to_string())
        .filter(|n| n.starts_with("text."))
        .collect();
    let names: Vec<&str> = names.iter().map(String::as_str).collect();
    let w = random_mat(5, batch.ids.len(), m.cfg.d, 1.0).tensor();
    let err = vgt_core::tensor::finite_diff_check_params(
        &store,
        &names,
        |g| {
            let x = m.text.encode(g, &batch)?;
            let w = g.constant(w.clone())?;
            let y = g.mul(x, w)?;
            g.sum(y)
        },
        &vgt_core::tensor::GradCheckOptions {
            step: 1e-4,
            max_coords_per_tensor: Some(40),
            seed: 2,
        },
    )
    .unwrap();
    assert!(err < 1e-4, "{err:e}");
}

// ---- qa head ------------------------------------------------------------

#[test]
fn cross_modal_weights_are_distributions_and_single_token_adds() {
    for scale in [1.0, 1e9] {
        let xv = random_mat(1, 4, 6, scale).tensor();
        let xq = random_mat(2, 5, 6, 1.0).tensor();
        let mut g = Graph::new();
        let (v, q) = (g.constant(xv).unwrap(), g.constant(xq).unwrap());
        let (_, beta) = cross_modal_attention(&mut g, v, q, &[true, true, false, true, false]).unwrap();
        for r in 0..4 {
            let b = g.value(beta).row(r);
            assert!((b.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            assert!(b[2] == 0.0 && b[4] == 0.0);
        }
    }
    let mut g = Graph::new();
    let v = g.constant(row(&[1.0, 2.0])).unwrap();
    let q = g.constant(row(&[0.5, -1.0])).unwrap();
    let (out, _) = cross_modal_attention(&mut g, v, q, &[true]).unwrap();
    assert_eq!(g.value(out).data(), &[1.5, 1.0]);
    assert!(cross_modal_attention(&mut g, v, q, &[false]).is_err());
}

#[test]
fn global_transformer_single_clip_and_identical_clips() {
    let cfg = RunConfig { k: 1, l_v: 2, l_c: 2, ..small_cfg(0) };
    let (m, store, _) = model(&cfg);
    let v = random_mat(3, 1, cfg.d, 1.0);
    let out = value(&store, |g| {
        let x = g.constant(v.tensor()).unwrap();
        m.global.forward(g, x).unwrap()
    });
    let with_pos = v.add(&common::p(&store, "global.pos"));
    assert!(common::mhsa(&store, "global.layer.0", cfg.heads, &with_pos).max_abs_diff(&out) <= 1e-12);

    let cfg = small_cfg(0);
    let (m, mut store, _) = model(&cfg);
    let names: Vec<String> = store.iter().map(|(n, _)| n.to_string()).collect();
    for n in names.iter().filter(|n| n.starts_with("global.") && !n.contains(".ln.")) {
        let shape = store.get(n).unwrap().shape().to_vec();
        store.set(n, Tensor::zeros(&shape)).unwrap();
    }
    let clips = Mat::vcat(&vec![v.clone(); cfg.k]);
    let out = value(&store, |g| {
        let x = g.constant(clips.tensor()).unwrap();
        m.global.forward(g, x).unwrap()
    });
    assert!(v.layer_norm(&vec![1.0; cfg.d], &vec![0.0; cfg.d]).max_abs_diff(&out) <= 1e-12);
}

fn scores_of(f: &[f64], answers: &[Vec<f64>]) -> ScoreVector {
    let mut g = Graph::new();
    let f = g.constant(row(f)).unwrap();
    let a = g.constant(Tensor::from_rows(answers).unwrap()).unwrap();
    let s = score_answers(&mut g, f, a).unwrap();
    ScoreVector::from_var(&g, s).unwrap()
}

#[test]
fn score_answer_examples() {
    let s = scores_of(&[1.0], &[vec![2.0], vec![1.0], vec![3.0]]);
    assert_eq!((s.scores.clone(), s.argmax), (vec![2.0, 1.0, 3.0], 2));
    let s = scores_of(&[0.3, -0.2], &vec![vec![1.0, 1.0]; 4]);
    assert_eq!(s.argmax, 0);
    assert!(s.scores.windows(2).all(|w| w[0] == w[1]));
    let mut g = Graph::new();
    let f = g.constant(row(&[1.0])).unwrap();
    let empty = g.constant(Tensor::zeros(&[0, 1])).unwrap();
    assert!(score_answers(&mut g, f, empty).is_err());
}

#[test]
fn joint_score_reduces_and_vanishes() {
    let answers = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![0.5, 0.5]];
    let joint = |fq: &[f64]| {
        let mut g = Graph::new();
        let f = g.constant(row(&[0.7, -1.3])).unwrap();
        let q = g.constant(row(fq)).unwrap();
        let a = g.constant(Tensor::from_rows(&answers).unwrap()).unwrap();
        let s = joint_score(&mut g, f, q, a).unwrap();
        g.value(s).data().to_vec()
    };
    assert_eq!(joint(&[1.0, 1.0]), scores_of(&[0.7, -1.3], &answers).scores);
    assert_eq!(joint(&[0.0, 2.0])[0], 0.0);
}

#[test]
fn qa_loss_examples() {
    let ce = |s: &[f64], gold| {
        let mut g = Graph::new();
        let v = g.constant(row(s)).unwrap();
        qa_loss(&mut g, v, gold).map(|l| g.value(l).data()[0])
    };
    assert_abs_diff_eq!(ce(&[0.4; 5], 3).unwrap(), 5f64.ln(), epsilon = 1e-9);
    assert!(ce(&[50.0, 0.0, 0.0], 0).unwrap() < 1e-20);
    let e = std::f64::consts::E;
    assert_abs_diff_eq!(ce(&[1.0, 0.0], 0).unwrap(), -(e / (e + 1.0)).ln(), epsilon = 1e-12);
    assert_abs_diff_eq!(ce(&[1.0, 0.0], 0).unwrap(), 0.31326, epsilon = 1e-5);
    assert!(ce(&[1.0, 0.0], 2).is_err());
}

fn mc_scores(m: &Vgt, store: &ParamStore, video_seed: u64, q: &str, cands: &[String], vocab: &Vocab) -> Vec<f64> {
    let video = random_video(&m.cfg, video_seed);
    let qa = EncodedQa::new(q, cands, vocab).unwrap();
    value(store, |g| m.multi_choice_scores(g, &video, &qa).unwrap()).data().to_vec()
}

#[test]
fn multi_choice_shapes_and_identical_candidates() {
    for placement in [CmPlacement::Object, CmPlacement::Frame, CmPlacement::Clip, CmPlacement::FrameClip] {
        let (m, store, vocab) = model(&RunConfig { cm_placement: placement, ..small_cfg(3) });
        let s = mc_scores(&m, &store, 1, "what color is it", &candidates(&["red", "blue", "green", "left", "up"]), &vocab);
        assert_eq!(s.len(), 5);
        let s = mc_scores(&m, &store, 1, "what color is it", &candidates(&["red"; 4]), &vocab);
        assert!(s.iter().all(|&x| x.to_bits() == s[0].to_bits()), "{placement:?}");
    }
}

#[test]
fn candidate_permutation_permutes_scores() {
    let cands = candidates(&["red", "blue object", "green", "left", "it moves up"]);
    for placement in [CmPlacement::Object, CmPlacement::Clip, CmPlacement::FrameClip] {
        for seed in 0..3 {
            let (m, store, vocab) = model(&RunConfig { cm_placement: placement, ..small_cfg(seed) });
            let base = mc_scores(&m, &store, seed, "which way does the object move", &cands, &vocab);
            let perm = [3, 0, 4, 2, 1];
            let shuffled: Vec<String> = perm.iter().map(|&i| cands[i].clone()).collect();
            let s = mc_scores(&m, &store, seed, "which way does the object move", &shuffled, &vocab);
            for (j, &i) in perm.iter().enumerate() {
                assert!((s[j] - base[i]).abs() <= 1e-12);
            }
            let best = ScoreVector::new(base.clone()).unwrap().argmax;
            let best_shuffled = ScoreVector::new(s).unwrap().argmax;
            assert_eq!(cands[best], shuffled[best_shuffled]);
        }
    }
}

#[test]
fn without_interaction_the_video_vector_ignores_the_question() {
    let cfg = RunConfig { cross_modal: false, ..small_cfg(4) };
    let (m, store, vocab) = model(&cfg);
    let video = random_video(&cfg, 4);
    let f_qv = value(&store, |g| {
        let clips = m.clip_features(g, &video).unwrap();
        m.global.forward(g, clips).unwrap()
    });
    for q in ["what color is the object", "which way does it move"] {
        let qa = EncodedQa::new(q, &candidates(&["red", "left", "up"]), &vocab).unwrap();
        let batch = TextBatch::new(&qa.pairs).unwrap();
        let mut g = Graph::with_params(&store);
        let s = m.multi_choice_scores(&mut g, &video, &qa).unwrap();
        let x = m.text.encode(&mut g, &batch).unwrap();
        for (j, span) in qa.spans.iter().enumerate() {
            let fa = pool_text(&mut g, x, &batch.span_mask(j, span.clone())).unwrap();
            let dot: f64 = g.value(fa).data().iter().zip(f_qv.data()).map(|(a, b)| a * b).sum();
            assert_eq!(g.value(s).data()[j].to_bits(), dot.to_bits(), "{q} {j}");
        }
    }
}

#[test]
fn open_ended_scores_over_candidate_answers() {
    for joint in [true, false] {
        let cfg = RunConfig { mode: Mode::OpenEnded, joint_decision: joint, ..small_cfg(5) };
        let (m, store, vocab) = model(&cfg);
        let video = random_video(&cfg, 5);
        let qa = EncodedQa::new("what color", &candidates(&["red", "blue", "green"]), &vocab).unwrap();
        let mut g = Graph::with_params(&store);
        let (s, l) = m.qa_loss(&mut g, &video, &qa, 1).unwrap();
        assert_eq!(g.value(s).numel(), 3);
        assert!(g.value(l).data()[0].is_finite());
    }
}

// ---- pretraining --------------------------------------------------------

#[test]
fn negatives_cover_everything_else_and_are_uniform() {
    let mut rng = SeedStreams::new(0).stream("negatives", 0);
    let mut all = sample_negatives(7, 3, 6, &mut rng).unwrap();
    all.sort();
    assert_eq!(all, vec![0, 1, 2, 4, 5, 6]);
    assert!(sample_negatives(7, 3, 7, &mut rng).is_err());

    let (n, draws) = (9usize, 10_000usize);
    let mut counts = vec![0usize; n];
    for _ in 0..draws {
        counts[sample_negatives(n, 4, 1, &mut rng).unwrap()[0]] += 1;
    }
    assert_eq!(counts[4], 0);
    let p = 1.0 / (n - 1) as f64;
    let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
    for (i, &c) in counts.iter().enumerate().filter(|&(i, _)| i != 4) {
        assert!((c as f64 - draws as f64 * p).abs() <= 3.0 * sigma, "index {i}: {c}");
    }
}

fn contrastive(f: &[f64], pos: &[f64], negs: &[Vec<f64>]) -> f64 {
    let mut g = Graph::new();
    let f = g.constant(row(f)).unwrap();
    let p = g.constant(row(pos)).unwrap();
    let n = g.constant(Tensor::from_rows(negs).unwrap()).unwrap();
    let l = contrastive_loss(&mut g, f, p, n).unwrap();
    g.value(l).data()[0]
}

#[test]
fn contrastive_examples() {
    assert_abs_diff_eq!(contrastive(&[0.0; 4], &[1.0; 4], &vec![vec![2.0; 4]; 63]), 64f64.ln(), epsilon = 1e-9);
    assert!(contrastive(&[1.0, 0.0], &[50.0, 0.0], &[vec![0.0, 3.0], vec![0.0, -1.0]]) < 1e-20);
    let e = std::f64::consts::E;
    assert_abs_diff_eq!(contrastive(&[1.0], &[1.0], &[vec![0.0]]), -(e / (e + 1.0)).ln(), epsilon = 1e-12);
    let pos = [0.3, -0.7, 1.1];
    assert_abs_diff_eq!(contrastive(&[0.2, 0.9, -0.4], &pos, &vec![pos.to_vec(); 10]), 11f64.ln(), epsilon = 1e-9);
}

#[test]
fn contrastive_gradient_wrt_video_vector() {
    let pos = random_mat(1, 1, 5, 1.0).tensor();
    let negs = random_mat(2, 7, 5, 1.0).tensor();
    let err = finite_diff_check(
        |g, f| {
            let p = g.constant(pos.clone())?;
            let n = g.constant(negs.clone())?;
            contrastive_loss(g, f, p, n)
        },
        &random_mat(3, 1, 5, 1.0).tensor(),
        1e-4,
    )
    .unwrap();
    assert!(err < 1e-4);
}

#[test]
fn corruption_frequencies_and_reserved_tokens() {
    let vocab_size = 40;
    let mut rng = SeedStreams::new(0).stream("mlm", 0);
    let tokens: Vec<usize> = (0..100_000).map(|i| 5 + i % 35).collect();
    let t = corrupt_tokens(&tokens, vocab_size, 0.15, &mut rng);
    let frac = t.positions.len() as f64 / tokens.len() as f64;
    assert!((frac - 0.15).abs() <= 0.005, "{frac}");
    let masked = t.positions.iter().filter(|&&p| t.tokens[p] == MASK).count() as f64;
    let share = masked / t.positions.len() as f64;
    assert!((share - 0.80).abs() <= 0.01, "{share}");
    assert!(t.positions.iter().zip(&t.originals).all(|(&p, &o)| tokens[p] == o));

    let reserved = vec![PAD, CLS, SEP, PAD, CLS, SEP];
    assert!(corrupt_tokens(&reserved, vocab_size, 1.0, &mut rng).positions.is_empty());
    assert!(corrupt_tokens(&tokens[..1000], vocab_size, 0.0, &mut rng).positions.is_empty());
    assert!(corrupt_tokens(&[], vocab_size, 0.15, &mut rng).positions.is_empty());
    let a = corrupt_tokens(&tokens[..500], vocab_size, 0.15, &mut SeedStreams::new(7).stream("mlm", 0));
    let b = corrupt_tokens(&tokens[..500], vocab_size, 0.15, &mut SeedStreams::new(7).stream("mlm", 0));
    assert_eq!(a, b);
}

#[test]
fn mlm_loss_examples() {
    let (_, mut store, vocab) = model(&small_cfg(0));
    let v = vocab.len();
    let dt = small_cfg(0).d_text;
    store.set("mlm.w", Tensor::zeros(&[dt, v])).unwrap();
    store.set("mlm.b", Tensor::zeros(&[v])).unwrap();
    let ctx = random_mat(0, 4, dt, 1.0).tensor();
    let loss = |store: &ParamStore, rows: &[usize], gold: &[usize]| {
        scalar(store, |g| {
            let c = g.constant(ctx.clone()).unwrap();
            mlm_loss(g, c, rows, gold).unwrap()
        })
    };
    assert_abs_diff_eq!(loss(&store, &[0, 2, 3], &[6, 7, 8]), (v as f64).ln(), epsilon = 1e-9);
    assert_eq!(loss(&store, &[], &[]), 0.0);
    let mut b = vec![0.0; v];
    b[9] = 50.0;
    store.set("mlm.b", Tensor::vector(b)).unwrap();
    assert!(loss(&store, &[1], &[9]) < 1e-20);
}

#[test]
fn pretraining_loss_weights() {
    let mut cfg = RunConfig { mode: Mode::Pretrain, ..small_cfg(1) };
    let (m, store, vocab) = model(&cfg);
    let videos: Vec<_> = (0..2).map(|s| random_video(&cfg, s)).collect();
    let refs: Vec<_> = videos.iter().collect();
    let descriptions = vec![
        tokenize("the red object moves left", &vocab),
        tokenize("the blue object moves up", &vocab),
        tokenize("green", &vocab),
    ];
    let corrupted: Vec<MlmTarget> = descriptions[..2]
        .iter()
        .map(|d| corrupt_tokens(d, vocab.len(), 0.5, &mut SeedStreams::new(1).stream("mlm", 0)))
        .collect();
    let run = |m: &Vgt| {
        let mut g = Graph::with_params(&store);
        let l = m
            .pretrain_loss(
                &mut g,
                &PretrainInputs {
                    videos: &refs,
                    descriptions: &descriptions,
                    positives: &[0, 1],
                    negatives: &[vec![1, 2], vec![0, 2]],
                    corrupted: &corrupted,
                },
            )
            .unwrap();
        let total = g.value(l.total).data()[0];
        let c = g.value(l.contrastive).data()[0];
        let mlm = l.mlm.map(|v| g.value(v).data()[0]);
        (total, c, mlm)
    };
    let (total, c, mlm) = run(&m);
    assert!(total.is_finite() && c > 0.0);
    assert_abs_diff_eq!(total, c + mlm.unwrap(), epsilon = 1e-12);
    cfg.mlm_weight = 0.0;
    let mut m0 = m.clone();
    m0.cfg = cfg;
    let (total, c, mlm) = run(&m0);
    assert_eq!(total, c);
    assert!(mlm.is_none());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn contrastive_ignores_negative_order(
        seed in 0u64..10_000,
        perm in Just((0..6).collect::<Vec<usize>>()).prop_shuffle(),
    ) {
        let f = random_mat(seed, 1, 4, 2.0).v;
        let pos = random_mat(seed + 1, 1, 4, 2.0).v;
        let negs = random_mat(seed + 2, 6, 4, 2.0);
        let rows: Vec<Vec<f64>> = (0..6).map(|i| negs.rows(i..i + 1).v).collect();
        let shuffled: Vec<Vec<f64>> = perm.iter().map(|&i| rows[i].clone()).collect();
        prop_assert!((contrastive(&f, &pos, &rows) - contrastive(&f, &pos, &shuffled)).abs() <= 1e-12);
    }
}
