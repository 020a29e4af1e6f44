//! Full model: object graphs, DGT, text encoder, cross-modal interaction,
//! global transformer and the three task heads (multi-choice, open-ended,
//! pretraining).

use std::ops::Range;

use crate::config::{Mode, RunConfig};
use crate::dgt::Dgt;
use crate::error::{invalid, Result};
use crate::pretrain::{self, MlmTarget};
use crate::qa::{self, GlobalTransformer};
use crate::rng::SeedStreams;
use crate::tensor::{Graph, Initializer, ParamStore, Tensor, Var};
use crate::text::{self, TextBatch, TextEncoder, Vocab};
use crate::video_graph::{self, AlignedVideo};

/// Tokenized question with its candidates, in both the paired
/// (`[CLS] q [SEP] a`) and the standalone form.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedQa {
    pub question: Vec<usize>,
    pub pairs: Vec<Vec<usize>>,
    pub spans: Vec<Range<usize>>,
    pub answers: Vec<Vec<usize>>,
}

impl EncodedQa {
    pub fn new(question: &str, candidates: &[String], vocab: &Vocab) -> Result<Self> {
        if candidates.is_empty() {
            return invalid("question has no candidate answers");
        }
        let mut pairs = Vec::with_capacity(candidates.len());
        let mut spans = Vec::with_capacity(candidates.len());
        for c in candidates {
            let (ids, span) = text::tokenize_pair(question, c, vocab)?;
            pairs.push(ids);
            spans.push(span);
        }
        Ok(Self {
            question: text::tokenize(question, vocab),
            pairs,
            spans,
            answers: candidates.iter().map(|c| text::tokenize(c, vocab)).collect(),
        })
    }

    pub fn num_candidates(&self) -> usize {
        self.pairs.len()
    }
}

/// Text rows of one sequence, used as the cross-modal query.
#[derive(Clone, Copy)]
struct TextQuery<'m> {
    rows: Var,
    mask: &'m [bool],
}

/// Module handles; the weights themselves live in a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Vgt {
    pub cfg: RunConfig,
    pub dgt: Dgt,
    pub text: TextEncoder,
    pub global: GlobalTransformer,
}

impl Vgt {
    /// Validates `cfg` and registers freshly initialized parameters.
    pub fn build(cfg: &RunConfig, vocab_size: usize) -> Result<(Self, ParamStore)> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut init = Initializer::new(SeedStreams::new(cfg.seed).stream("init", 0));
        video_graph::register_params(&mut store, &mut init, cfg)?;
        let dgt = Dgt::register(&mut store, &mut init, cfg)?;
        let text = TextEncoder::register(&mut store, &mut init, cfg, vocab_size)?;
        let global = GlobalTransformer::register(&mut store, &mut init, cfg)?;
        pretrain::register_mlm_head(&mut store, &mut init, cfg.d_text, vocab_size)?;
        let model = Self {
            cfg: cfg.clone(),
            dgt,
            text,
            global,
        };
        Ok((model, store))
    }

    pub fn vocab_size(&self) -> usize {
        self.text.vocab_size
    }

    /// Grows the embedding table and MLM head to `new_size` tokens, keeping
    /// existing rows. New rows are drawn from a seeded stream.
    pub fn grow_vocab(&mut self, store: &mut ParamStore, new_size: usize) -> Result<()> {
        let old = self.vocab_size();
        if new_size < old {
            return invalid(format!("cannot shrink vocabulary from {old} to {new_size}"));
        }
        if new_size == old {
            return Ok(());
        }
        let mut init = Initializer::new(SeedStreams::new(self.cfg.seed).stream("grow-vocab", old as u64));
        let dt = self.cfg.d_text;
        let mut embed = store.get("text.embed")?.data().to_vec();
        embed.extend(init.uniform(&[new_size - old, dt], 1.0).into_data());
        store.resize("text.embed", Tensor::matrix(new_size, dt, embed)?)?;

        let w = store.get("mlm.w")?.clone();
        let extra = init.fan_in_uniform(&[dt, new_size - old], dt);
        let mut grown = Vec::with_capacity(dt * new_size);
        for r in 0..dt {
            grown.extend_from_slice(w.row(r));
            grown.extend_from_slice(extra.row(r));
        }
        store.resize("mlm.w", Tensor::matrix(dt, new_size, grown)?)?;
        let mut b = store.get("mlm.b")?.data().to_vec();
        b.resize(new_size, 0.0);
        store.resize("mlm.b", Tensor::vector(b))?;
        self.text.vocab_size = new_size;
        Ok(())
    }

    fn check_video(&self, video: &AlignedVideo) -> Result<()> {
        let c = &self.cfg;
        let ok = video.region_feats.shape() == [c.l_v * c.n, c.d_r]
            && video.boxes.shape() == [c.l_v * c.n, 5]
            && video.frame_feats.shape() == [c.l_v, c.d_i];
        if !ok {
            return invalid(format!(
                "video tensors {:?}/{:?}/{:?} do not match the configuration",
                video.region_feats.shape(),
                video.boxes.shape(),
                video.frame_feats.shape()
            ));
        }
        Ok(())
    }

    /// Node features `F_O` of every frame, frame-major.
    pub fn video_nodes(&self, g: &mut Graph<'_>, video: &AlignedVideo) -> Result<Var> {
        self.check_video(video)?;
        let feats = g.constant(video.region_feats.clone())?;
        let boxes = g.constant(video.boxes.clone())?;
        video_graph::node_features(g, feats, boxes)
    }

    /// Clip-level features `F^DGT` (k x d) without any text.
    pub fn clip_features(&self, g: &mut Graph<'_>, video: &AlignedVideo) -> Result<Var> {
        let nodes = self.video_nodes(g, video)?;
        let ff = g.constant(video.frame_feats.clone())?;
        self.dgt.forward(g, nodes, ff)
    }

    fn interact(&self, g: &mut Graph<'_>, x: Var, q: TextQuery<'_>) -> Result<Var> {
        qa::cross_modal_interact(g, x, q.rows, q.mask)
    }

    /// The visual pipeline up to the clip features, injecting `query` where
    /// the configuration asks for it.
    fn query_clips(&self, g: &mut Graph<'_>, shared: &Shared, query: Option<TextQuery<'_>>) -> Result<Var> {
        let p = self.cfg.cm_placement;
        let Some(q) = query.filter(|_| self.cfg.cross_modal) else {
            return shared.clips.map_or_else(|| invalid("missing shared clip features"), Ok);
        };
        let mut clips = match shared.clips {
            Some(c) => c,
            None => {
                let frames = match shared.frames {
                    Some(f) => f,
                    None => {
                        let nodes = self.interact(g, shared.nodes, q)?;
                        self.dgt.frame_level(g, nodes, shared.frame_feats)?
                    }
                };
                let frames = if p.at_frame() { self.interact(g, frames, q)? } else { frames };
                self.dgt.clip_pool(g, frames)?
            }
        };
        if p.at_clip() {
            clips = self.interact(g, clips, q)?;
        }
        Ok(clips)
    }

    /// Computes the text-independent prefix of the visual pipeline once.
    fn shared(&self, g: &mut Graph<'_>, video: &AlignedVideo) -> Result<Shared> {
        let nodes = self.video_nodes(g, video)?;
        let frame_feats = g.constant(video.frame_feats.clone())?;
        let p = self.cfg.cm_placement;
        let cm = self.cfg.cross_modal;
        let frames = if cm && p.at_object() {
            None
        } else {
            Some(self.dgt.frame_level(g, nodes, frame_feats)?)
        };
        let clips = match frames {
            Some(f) if !(cm && p.at_frame()) => Some(self.dgt.clip_pool(g, f)?),
            _ => None,
        };
        Ok(Shared {
            nodes,
            frame_feats,
            frames,
            clips,
        })
    }

    /// Per-candidate scores `1 x |A|` for a multi-choice question.
    pub fn multi_choice_scores(&self, g: &mut Graph<'_>, video: &AlignedVideo, qa: &EncodedQa) -> Result<Var> {
        let batch = TextBatch::new(&qa.pairs)?;
        let x = self.text.encode(g, &batch)?;
        let mut pooled = Vec::with_capacity(qa.num_candidates());
        for (j, span) in qa.spans.iter().enumerate() {
            pooled.push(text::pool_text(g, x, &batch.span_mask(j, span.clone()))?);
        }
        let answers = g.concat_rows(&pooled)?;
        let shared = self.shared(g, video)?;
        if !self.cfg.cross_modal {
            let clips = self.query_clips(g, &shared, None)?;
            let f_qv = self.global.forward(g, clips)?;
            return qa::score_answers(g, f_qv, answers);
        }
        let mut per = Vec::with_capacity(qa.num_candidates());
        for j in 0..qa.num_candidates() {
            let rows = g.slice_rows(x, j * batch.len, batch.len)?;
            let q = TextQuery {
                rows,
                mask: batch.seq_mask(j),
            };
            per.push(self.query_clips(g, &shared, Some(q))?);
        }
        let stacked = g.concat_rows(&per)?;
        let f_qv = self.global.forward(g, stacked)?;
        qa::score_pairs(g, f_qv, answers)
    }

    /// Scores over the candidate list treated as the answer vocabulary:
    /// one video-question vector, standalone answer encodings, and
    /// optionally the joint decision with question-answer similarity.
    pub fn open_ended_scores(&self, g: &mut Graph<'_>, video: &AlignedVideo, qa: &EncodedQa) -> Result<Var> {
        let qb = TextBatch::new(std::slice::from_ref(&qa.question))?;
        let xq = self.text.encode(g, &qb)?;
        let ab = TextBatch::new(&qa.answers)?;
        let xa = self.text.encode(g, &ab)?;
        let mut pooled = Vec::with_capacity(qa.answers.len());
        for (j, a) in qa.answers.iter().enumerate() {
            pooled.push(text::pool_text(g, xa, &ab.span_mask(j, text::word_span(a)))?);
        }
        let answers = g.concat_rows(&pooled)?;
        let shared = self.shared(g, video)?;
        let q = TextQuery {
            rows: xq,
            mask: qb.seq_mask(0),
        };
        let clips = self.query_clips(g, &shared, Some(q))?;
        let f_qv = self.global.forward(g, clips)?;
        if self.cfg.joint_decision {
            let f_q = text::pool_text(g, xq, &qb.span_mask(0, text::word_span(&qa.question)))?;
            qa::joint_score(g, f_qv, f_q, answers)
        } else {
            qa::score_answers(g, f_qv, answers)
        }
    }

    /// Scores for the configured QA mode.
    pub fn qa_scores(&self, g: &mut Graph<'_>, video: &AlignedVideo, qa: &EncodedQa) -> Result<Var> {
        match self.cfg.mode {
            Mode::MultiChoice => self.multi_choice_scores(g, video, qa),
            Mode::OpenEnded => self.open_ended_scores(g, video, qa),
            Mode::Pretrain => invalid("QA scoring is not available in pretraining mode"),
        }
    }

    /// Scores plus softmax cross-entropy against `gold`.
    pub fn qa_loss(&self, g: &mut Graph<'_>, video: &AlignedVideo, qa: &EncodedQa, gold: usize) -> Result<(Var, Var)> {
        let scores = self.qa_scores(g, video, qa)?;
        let loss = qa::qa_loss(g, scores, gold)?;
        Ok((scores, loss))
    }

    /// Mean contrastive and MLM losses over a pretraining batch.
    ///
    /// `descriptions` holds every description the batch touches (each is
    /// encoded once); `positives[i]` and `negatives[i]` index into it for
    /// video `i`; `corrupted[i]` is the MLM view of video `i`'s positive.
    pub fn pretrain_loss(&self, g: &mut Graph<'_>, batch: &PretrainInputs<'_>) -> Result<PretrainLoss> {
        let b = batch.videos.len();
        if b == 0 || batch.positives.len() != b || batch.negatives.len() != b || batch.corrupted.len() != b {
            return invalid("pretraining batch parts disagree in size");
        }
        let tb = TextBatch::new(batch.descriptions)?;
        let x = self.text.encode(g, &tb)?;
        let mut pooled = Vec::with_capacity(batch.descriptions.len());
        for (j, d) in batch.descriptions.iter().enumerate() {
            pooled.push(text::pool_text(g, x, &tb.span_mask(j, text::word_span(d)))?);
        }
        let all = g.concat_rows(&pooled)?;

        let mut clips = Vec::with_capacity(b);
        for (video, &pos) in batch.videos.iter().zip(batch.positives) {
            let shared = self.shared(g, video)?;
            let rows = g.slice_rows(x, pos * tb.len, tb.len)?;
            let q = TextQuery {
                rows,
                mask: tb.seq_mask(pos),
            };
            clips.push(self.query_clips(g, &shared, Some(q))?);
        }
        let stacked = g.concat_rows(&clips)?;
        let f_qv = self.global.forward(g, stacked)?;

        let mut contrastive = None;
        for i in 0..b {
            let f = g.slice_rows(f_qv, i, 1)?;
            let pos = g.slice_rows(all, batch.positives[i], 1)?;
            let negs = g.gather_rows(all, &batch.negatives[i])?;
            let l = pretrain::contrastive_loss(g, f, pos, negs)?;
            contrastive = Some(match contrastive {
                None => l,
                Some(acc) => g.add(acc, l)?,
            });
        }
        let contrastive = g.scale(contrastive.expect("non-empty batch"), 1.0 / b as f64)?;

        let mlm = if self.cfg.mlm_weight == 0.0 {
            None
        } else {
            let seqs: Vec<Vec<usize>> = batch.corrupted.iter().map(|t| t.tokens.clone()).collect();
            let cb = TextBatch::new(&seqs)?;
            let ctx = self.text.contextual(g, &cb)?;
            let mut rows = Vec::new();
            let mut originals = Vec::new();
            for (i, t) in batch.corrupted.iter().enumerate() {
                rows.extend(t.positions.iter().map(|p| i * cb.len + p));
                originals.extend_from_slice(&t.originals);
            }
            Some(pretrain::mlm_loss(g, ctx, &rows, &originals)?)
        };
        let total = match mlm {
            Some(m) => {
                let w = g.scale(m, self.cfg.mlm_weight)?;
                g.add(contrastive, w)?
            }
            None => contrastive,
        };
        Ok(PretrainLoss {
            total,
            contrastive,
            mlm,
        })
    }
}

struct Shared {
    nodes: Var,
    frame_feats: Var,
    frames: Option<Var>,
    clips: Option<Var>,
}

pub struct PretrainInputs<'a> {
    pub videos: &'a [&'a AlignedVideo],
    pub descriptions: &'a [Vec<usize>],
    pub positives: &'a [usize],
    pub negatives: &'a [Vec<usize>],
    pub corrupted: &'a [MlmTarget],
}

#[derive(Clone, Copy, Debug)]
pub struct PretrainLoss {
    pub total: Var,
    pub contrastive: Var,
    pub mlm: Option<Var>,
}

/// Module a parameter belongs to, from its name prefix.
pub fn module_of(name: &str) -> &'static str {
    match name.split('.').next().unwrap_or("") {
        "graph" => "video-graph",
        "dgt" => "dgt",
        "text" => "text-encoder",
        "global" => "qa-head",
        "mlm" => "pretrain",
        _ => "other",
    }
}

/// Scalar counts per module, in first-seen order, plus the total.
pub fn param_counts(store: &ParamStore) -> (Vec<(&'static str, usize)>, usize) {
    let mut out: Vec<(&'static str, usize)> = Vec::new();
    for (name, t) in store.iter() {
        let m = module_of(name);
        match out.iter_mut().find(|(k, _)| *k == m) {
            Some((_, c)) => *c += t.numel(),
            None => out.push((m, t.numel())),
        }
    }
    let total = out.iter().map(|(_, c)| c).sum();
    (out, total)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_sum_to_store_size() {
        let (_, store) = Vgt::build(&RunConfig::desk(), 40).unwrap();
        let (parts, total) = param_counts(&store);
        assert_eq!(total, store.num_scalars());
        assert!(parts.iter().all(|(m, _)| *m != "other"));
    }

    #[test]
    fn grow_vocab_keeps_rows() {
        let (mut m, mut store) = Vgt::build(&RunConfig::desk(), 10).unwrap();
        let before = store.get("text.embed").unwrap().clone();
        let w_before = store.get("mlm.w").unwrap().clone();
        m.grow_vocab(&mut store, 13).unwrap();
        let after = store.get("text.embed").unwrap();
        assert_eq!(after.shape(), &[13, 64]);
        assert_eq!(&after.data()[..before.numel()], before.data());
        assert_eq!(&store.get("mlm.w").unwrap().row(3)[..10], w_before.row(3));
        assert_eq!(store.get("mlm.b").unwrap().numel(), 13);
        assert!(m.grow_vocab(&mut store, 5).is_err());
    }
}
