//! End-to-end finite-difference check of the multi-choice model on a tiny
//! synthetic instance.

use vgt_core::config::RunConfig;
use vgt_core::tensor::{finite_diff_check_params, GradCheckOptions, ParamStore};
use vgt_core::video_graph::AlignedVideo;
use vgt_core::{EncodedQa, Vgt};

use crate::dataset::{build_vocab, prepare, PreparedTask};
use crate::error::{HarnessError, Result};
use crate::synth::{generate_synthetic, Family, SyntheticSpec};

/// 2 clips x 2 frames x 3 objects, 5 candidates, narrow layers.
pub fn tiny_config(seed: u64) -> RunConfig {
    RunConfig {
        l_v: 4,
        k: 2,
        l_c: 2,
        n: 3,
        d: 8,
        d_r: 6,
        d_i: 5,
        heads: 2,
        edge_heads: 3,
        layers: 1,
        gcn_layers: 2,
        d_text: 8,
        text_heads: 2,
        text_layers: 1,
        max_text_len: 16,
        seed,
        ..RunConfig::desk()
    }
}

pub struct Instance {
    pub model: Vgt,
    pub params: ParamStore,
    pub video: AlignedVideo,
    pub qa: EncodedQa,
    pub answer: usize,
}

pub fn tiny_instance(cfg: &RunConfig) -> Result<Instance> {
    let spec = SyntheticSpec::from_run(cfg, 1, vec![Family::Order], cfg.seed);
    let rows = generate_synthetic(&spec)?;
    let vocab = build_vocab(&rows);
    let mut prepared = prepare(&rows, cfg, &vocab)?;
    let s = prepared.pop().expect("one row");
    let PreparedTask::Qa { qa, answer, .. } = s.task else {
        return Err(HarnessError::Invalid("expected a QA row".into()));
    };
    let (model, params) = Vgt::build(cfg, vocab.len())?;
    Ok(Instance {
        model,
        params,
        video: s.video,
        qa,
        answer,
    })
}

/// Largest relative error over every parameter coordinate (or a seeded
/// subset of `max_coords` per tensor) of the QA loss.
pub fn check_model(cfg: &RunConfig, max_coords: Option<usize>) -> Result<f64> {
    let inst = tiny_instance(cfg)?;
    let names: Vec<String> = inst.params.iter().map(|(n, _)| n.to_string()).collect();
    let names: Vec<&str> = names.iter().map(String::as_str).collect();
    let opts = GradCheckOptions {
        step: 1e-4,
        max_coords_per_tensor: max_coords,
        seed: cfg.seed,
    };
    let f = |g: &mut vgt_core::tensor::Graph<'_>| {
        inst.model
            .qa_loss(g, &inst.video, &inst.qa, inst.answer)
            .map(|(_, l)| l)
    };
    Ok(finite_diff_check_params(&inst.params, &names, f, &opts)?)
}
