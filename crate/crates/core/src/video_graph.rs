//! Per-frame detections to clip-wise aligned object graphs.
//!
//! Objects in the first frame of every clip are the anchors. Later frames
//! are linked to them by greedily maximizing a linking score (cosine
//! appearance similarity plus lambda-weighted IoU), so row `i` of every
//! frame in a clip refers to the same tracked object.

use crate::config::RunConfig;
use crate::error::{invalid, shape_err, Result};
use crate::tensor::{Graph, Initializer, ParamStore, Tensor, Var};

/// Axis-aligned box in normalized [0, 1] frame coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = Self { x1, y1, x2, y2 };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let in_range = [self.x1, self.y1, self.x2, self.y2]
            .iter()
            .all(|v| (0.0..=1.0).contains(v));
        if !in_range {
            return invalid(format!("box {self:?} leaves the unit square"));
        }
        if !(self.x1 < self.x2 && self.y1 < self.y2) {
            return invalid(format!("degenerate box {self:?}"));
        }
        Ok(())
    }

    pub fn area(&self) -> f64 {
        (self.x2 - self.x1) * (self.y2 - self.y1)
    }

    /// `(x1, y1, x2, y2, area)`, the input of the location embedding.
    pub fn features(&self) -> [f64; 5] {
        [self.x1, self.y1, self.x2, self.y2, self.area()]
    }
}

pub fn iou(a: &BBox, b: &BBox) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    let w = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let h = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = w * h;
    Ok(inter / (a.area() + b.area() - inter))
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return shape_err("cosine_similarity", format!("{} vs {}", a.len(), b.len()));
    }
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return invalid("cosine similarity of a zero-norm feature");
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok(dot / (na * nb))
}

/// `cos(f_a, f_b) + lambda * IoU(b_a, b_b)`
pub fn linking_score(f_a: &[f64], f_b: &[f64], b_a: &BBox, b_b: &BBox, lambda: f64) -> Result<f64> {
    Ok(cosine_similarity(f_a, f_b)? + lambda * iou(b_a, b_b)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Region {
    pub feat: Vec<f64>,
    pub bbox: BBox,
    pub conf: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameDetections {
    pub frame_index: usize,
    pub regions: Vec<Region>,
    /// Set when the frame had fewer than `n` detections and was padded.
    pub padded: bool,
}

impl FrameDetections {
    /// Keeps the `n` most confident regions (stable on ties). Frames with
    /// fewer detections are padded by repeating the least confident one.
    pub fn top_n(frame_index: usize, mut regions: Vec<Region>, n: usize) -> Result<Self> {
        if regions.is_empty() {
            return invalid(format!("frame {frame_index} has no detections"));
        }
        if n == 0 {
            return invalid("n must be positive");
        }
        let dim = regions[0].feat.len();
        if regions.iter().any(|r| r.feat.len() != dim) {
            return shape_err("top_n", format!("frame {frame_index} mixes feature sizes"));
        }
        regions.sort_by(|a, b| b.conf.total_cmp(&a.conf));
        let padded = regions.len() < n;
        regions.truncate(n);
        while regions.len() < n {
            let last = regions[regions.len() - 1].clone();
            regions.push(last);
        }
        Ok(Self {
            frame_index,
            regions,
            padded,
        })
    }
}

/// Greedy bijection on a row-major `n x n` score matrix: repeatedly take
/// the global maximum, assign it, delete its row and column. Ties go to
/// the lowest row, then the lowest column. Returns `row -> column`.
pub fn greedy_bijection(scores: &[f64], n: usize) -> Vec<usize> {
    let mut row_used = vec![false; n];
    let mut col_used = vec![false; n];
    let mut assign = vec![usize::MAX; n];
    for _ in 0..n {
        let mut best: Option<(usize, usize)> = None;
        for r in (0..n).filter(|&r| !row_used[r]) {
            for c in (0..n).filter(|&c| !col_used[c]) {
                let better = match best {
                    None => true,
                    Some((br, bc)) => scores[r * n + c] > scores[br * n + bc],
                };
                if better {
                    best = Some((r, c));
                }
            }
        }
        let (r, c) = best.expect("a free pair remains");
        row_used[r] = true;
        col_used[c] = true;
        assign[r] = c;
    }
    assign
}

/// Links every frame of one clip to the anchor objects of its first frame.
///
/// Returns, for each frame, `slot -> region index`; the first frame maps
/// to the identity.
pub fn link_tracks(frames: &[FrameDetections], lambda: f64) -> Result<Vec<Vec<usize>>> {
    let Some(first) = frames.first() else {
        return invalid("a clip needs at least one frame");
    };
    let n = first.regions.len();
    if let Some(f) = frames.iter().find(|f| f.regions.len() != n) {
        return invalid(format!(
            "frame {} has {} regions, expected {n}",
            f.frame_index,
            f.regions.len()
        ));
    }
    let mut slots = vec![(0..n).collect::<Vec<_>>()];
    for pair in frames.windows(2) {
        let (prev, next) = (&pair[0], &pair[1]);
        let mut scores = vec![0.0; n * n];
        for (r, a) in prev.regions.iter().enumerate() {
            for (c, b) in next.regions.iter().enumerate() {
                scores[r * n + c] = linking_score(&a.feat, &b.feat, &a.bbox, &b.bbox, lambda)?;
            }
        }
        let step = greedy_bijection(&scores, n);
        let last = slots.last().expect("anchor slots");
        let mapped = last.iter().map(|&r| step[r]).collect();
        slots.push(mapped);
    }
    Ok(slots)
}

/// Shape bookkeeping derived from a [`RunConfig`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GraphConfig {
    pub l_v: usize,
    pub k: usize,
    pub l_c: usize,
    pub n: usize,
    pub lambda: f64,
    pub d: usize,
    pub d_r: usize,
}

impl GraphConfig {
    pub fn from_run(cfg: &RunConfig) -> Self {
        Self {
            l_v: cfg.l_v,
            k: cfg.k,
            l_c: cfg.l_c,
            n: cfg.n,
            lambda: cfg.link_lambda,
            d: cfg.d,
            d_r: cfg.d_r,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.l_v != self.k * self.l_c {
            return invalid(format!("l_v ({}) != k * l_c ({} * {})", self.l_v, self.k, self.l_c));
        }
        if self.n == 0 || !(self.lambda >= 0.0) {
            return invalid("n must be >= 1 and lambda >= 0");
        }
        Ok(())
    }
}

/// Anchor-aligned raw inputs of one video, stacked frame-major: row
/// `t * n + i` is anchor object `i` of frame `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignedVideo {
    pub region_feats: Tensor,
    pub boxes: Tensor,
    pub frame_feats: Tensor,
    /// Per frame, `slot -> original region index` after top-n filtering.
    pub alignments: Vec<Vec<usize>>,
    pub padded: Vec<bool>,
}

impl AlignedVideo {
    pub fn num_frames(&self) -> usize {
        self.frame_feats.rows()
    }
}

/// Filters, links and stacks one video's detections.
pub fn align_video(
    frames: Vec<FrameDetections>,
    frame_feats: Vec<Vec<f64>>,
    cfg: &GraphConfig,
) -> Result<AlignedVideo> {
    cfg.validate()?;
    if frames.len() != cfg.l_v || frame_feats.len() != cfg.l_v {
        return invalid(format!(
            "expected {} frames, got {} detections and {} frame features",
            cfg.l_v,
            frames.len(),
            frame_feats.len()
        ));
    }
    let mut alignments = Vec::with_capacity(cfg.l_v);
    for clip in frames.chunks(cfg.l_c) {
        alignments.extend(link_tracks(clip, cfg.lambda)?);
    }
    let mut feats = Vec::with_capacity(cfg.l_v * cfg.n * cfg.d_r);
    let mut boxes = Vec::with_capacity(cfg.l_v * cfg.n * 5);
    for (frame, slots) in frames.iter().zip(&alignments) {
        for &r in slots {
            let region = &frame.regions[r];
            if region.feat.len() != cfg.d_r {
                return shape_err(
                    "align_video",
                    format!("region feature size {} != d_r {}", region.feat.len(), cfg.d_r),
                );
            }
            feats.extend_from_slice(&region.feat);
            boxes.extend_from_slice(&region.bbox.features());
        }
    }
    let padded = frames.iter().map(|f| f.padded).collect();
    Ok(AlignedVideo {
        region_feats: Tensor::matrix(cfg.l_v * cfg.n, cfg.d_r, feats)?,
        boxes: Tensor::matrix(cfg.l_v * cfg.n, 5, boxes)?,
        frame_feats: Tensor::from_rows(&frame_feats)?,
        alignments,
        padded,
    })
}

pub fn register_params(store: &mut ParamStore, init: &mut Initializer, cfg: &RunConfig) -> Result<()> {
    if !cfg.d.is_multiple_of(2) {
        return invalid(format!("d ({}) must be even", cfg.d));
    }
    init.linear(store, "graph.loc", 5, cfg.d_loc(), true)?;
    init.linear(store, "graph.obj", cfg.d_r + cfg.d_loc(), cfg.d, true)?;
    init.linear(store, "graph.ak", cfg.d, cfg.d / 2, false)?;
    init.linear(store, "graph.av", cfg.d, cfg.d / 2, false)?;
    Ok(())
}

/// `ELU(W_o [f_r ; W_loc b + b_loc] + b_o)` for every stacked region row.
pub fn node_features(g: &mut Graph<'_>, region_feats: Var, boxes: Var) -> Result<Var> {
    let (wl, bl) = (g.param("graph.loc.w")?, g.param("graph.loc.b")?);
    let (wo, bo) = (g.param("graph.obj.w")?, g.param("graph.obj.b")?);
    let loc = g.matmul(boxes, wl)?;
    let loc = g.add_row(loc, bl)?;
    let cat = g.concat_cols(&[region_feats, loc])?;
    let z = g.matmul(cat, wo)?;
    let z = g.add_row(z, bo)?;
    g.elu(z)
}

/// Row-stochastic relations per frame:
/// `softmax_rows((F W_ak)(F W_av)^T)`, stacked as `frames` blocks of n x n.
pub fn init_relations(g: &mut Graph<'_>, nodes: Var, frames: usize) -> Result<Var> {
    let (wk, wv) = (g.param("graph.ak.w")?, g.param("graph.av.w")?);
    let a = g.matmul(nodes, wk)?;
    let b = g.matmul(nodes, wv)?;
    let logits = g.batch_matmul_nt(a, b, frames)?;
    g.softmax_rows(logits, None)
}

/// Materialized graphs of one clip: per-frame nodes and relations.
#[derive(Clone, Debug)]
pub struct ClipGraphs {
    pub clip: usize,
    pub nodes: Vec<Tensor>,
    pub relations: Vec<Tensor>,
    pub alignments: Vec<Vec<usize>>,
}

/// Evaluates node features and initial relations for every clip.
pub fn build_clip_graphs(video: &AlignedVideo, params: &ParamStore, cfg: &GraphConfig) -> Result<Vec<ClipGraphs>> {
    let mut g = Graph::with_params(params);
    let feats = g.constant(video.region_feats.clone())?;
    let boxes = g.constant(video.boxes.clone())?;
    let nodes = node_features(&mut g, feats, boxes)?;
    let rel = init_relations(&mut g, nodes, cfg.l_v)?;
    let (nv, rv) = (g.value(nodes), g.value(rel));
    let n = cfg.n;
    let block = |t: &Tensor, f: usize| -> Result<Tensor> {
        let c = t.cols();
        Tensor::matrix(n, c, t.data()[f * n * c..(f + 1) * n * c].to_vec())
    };
    (0..cfg.k)
        .map(|clip| {
            let frames = clip * cfg.l_c..(clip + 1) * cfg.l_c;
            Ok(ClipGraphs {
                clip,
                nodes: frames.clone().map(|f| block(nv, f)).collect::<Result<_>>()?,
                relations: frames.clone().map(|f| block(rv, f)).collect::<Result<_>>()?,
                alignments: video.alignments[frames].to_vec(),
            })
        })
        .collect()
}
