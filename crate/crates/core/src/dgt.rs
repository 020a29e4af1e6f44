//! Dynamic graph transformer: node transformer, edge transformer, spatial
//! graph convolution and hierarchical (frame, then clip) aggregation.
//!
//! Node matrices are stacked frame-major (`t * n + i`); relation matrices
//! are stacked as `l_v` blocks of `n x n`.

use crate::attention::MhsaStack;
use crate::config::{Ablations, RunConfig};
use crate::error::{invalid, shape_err, Result};
use crate::tensor::{Graph, Initializer, ParamStore, Tensor, Var};
use crate::video_graph;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VideoLayout {
    pub l_v: usize,
    pub k: usize,
    pub l_c: usize,
    pub n: usize,
}

impl VideoLayout {
    pub fn from_run(cfg: &RunConfig) -> Self {
        Self {
            l_v: cfg.l_v,
            k: cfg.k,
            l_c: cfg.l_c,
            n: cfg.n,
        }
    }

    /// Source row (frame-major) for each row ordered by (clip, object, frame in clip).
    pub fn object_sequence_order(&self) -> Vec<usize> {
        let mut order = Vec::with_capacity(self.l_v * self.n);
        for c in 0..self.k {
            for i in 0..self.n {
                for j in 0..self.l_c {
                    order.push((c * self.l_c + j) * self.n + i);
                }
            }
        }
        order
    }
}

fn inverse(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (dst, &src) in perm.iter().enumerate() {
        inv[src] = dst;
    }
    inv
}

/// Parameter handles and switches of the module.
#[derive(Clone, Debug, PartialEq)]
pub struct Dgt {
    pub layout: VideoLayout,
    pub d: usize,
    pub ntrans: MhsaStack,
    pub etrans: MhsaStack,
    pub gcn_layers: usize,
    pub ablations: Ablations,
}

impl Dgt {
    pub fn register(store: &mut ParamStore, init: &mut Initializer, cfg: &RunConfig) -> Result<Self> {
        let layout = VideoLayout::from_run(cfg);
        let d = cfg.d;
        let dn = cfg.n * cfg.n;
        if !dn.is_multiple_of(cfg.edge_heads) {
            return shape_err(
                "Dgt::register",
                format!("n^2 = {dn} not divisible by {} edge heads", cfg.edge_heads),
            );
        }
        if cfg.gcn_layers == 0 {
            return invalid("at least one graph layer is required");
        }
        let ntrans = MhsaStack::register(store, init, "dgt.ntrans", d, cfg.heads, cfg.layers)?;
        let etrans = MhsaStack::register(store, init, "dgt.etrans", dn, cfg.edge_heads, cfg.layers)?;
        for u in 0..cfg.gcn_layers {
            init.linear(store, &format!("dgt.gcn.{u}"), d, d, false)?;
        }
        init.linear(store, "dgt.pool", d, 1, true)?;
        init.linear(store, "dgt.fuse_f", cfg.d_i, d, true)?;
        init.linear(store, "dgt.fuse_m", 2 * d, d, true)?;
        Ok(Self {
            layout,
            d,
            ntrans,
            etrans,
            gcn_layers: cfg.gcn_layers,
            ablations: cfg.ablations(),
        })
    }

    fn frames_of(&self, g: &Graph<'_>, nodes: Var) -> Result<usize> {
        let rows = g.value(nodes).rows();
        if !rows.is_multiple_of(self.layout.n) {
            return shape_err("dgt", format!("{rows} node rows for n = {}", self.layout.n));
        }
        Ok(rows / self.layout.n)
    }

    /// Self-attention over each anchor object's features within its clip.
    pub fn node_transformer(&self, g: &mut Graph<'_>, nodes: Var) -> Result<Var> {
        let order = self.layout.object_sequence_order();
        if g.value(nodes).rows() != order.len() {
            return shape_err(
                "node_transformer",
                format!("{} rows, expected {}", g.value(nodes).rows(), order.len()),
            );
        }
        let seqs = g.gather_rows(nodes, &order)?;
        let out = self.ntrans.forward(g, seqs, self.layout.l_c, None)?;
        g.gather_rows(out, &inverse(&order))
    }

    /// Relations of the transformed nodes, same map as the initial relations.
    pub fn recompute_relations(&self, g: &mut Graph<'_>, nodes: Var) -> Result<Var> {
        let frames = self.frames_of(g, nodes)?;
        video_graph::init_relations(g, nodes, frames)
    }

    /// Self-attention over each clip's sequence of row-expanded relation
    /// matrices. The output is not renormalized.
    pub fn edge_transformer(&self, g: &mut Graph<'_>, relations: Var) -> Result<Var> {
        let n = self.layout.n;
        let rows = g.value(relations).rows();
        if !rows.is_multiple_of(n) || g.value(relations).cols() != n {
            return shape_err("edge_transformer", format!("relations {:?}", g.shape(relations)));
        }
        let frames = rows / n;
        let flat = g.reshape(relations, &[frames, n * n])?;
        let out = self.etrans.forward(g, flat, self.layout.l_c, None)?;
        g.reshape(out, &[frames * n, n])
    }

    /// `F^(u) = ReLU((R' + I) F^(u-1) W^(u))` per frame, then `F' + F^(U)`.
    pub fn graph_conv(&self, g: &mut Graph<'_>, nodes: Var, relations: Var) -> Result<Var> {
        let n = self.layout.n;
        let frames = self.frames_of(g, nodes)?;
        if g.shape(relations) != [frames * n, n] {
            return shape_err("graph_conv", format!("relations {:?}", g.shape(relations)));
        }
        let mut eye = Tensor::zeros(&[frames * n, n]);
        for r in 0..frames * n {
            eye.data_mut()[r * n + r % n] = 1.0;
        }
        let eye = g.constant(eye)?;
        let adj = g.add(relations, eye)?;
        let mut h = nodes;
        for u in 0..self.gcn_layers {
            let w = g.param(&format!("dgt.gcn.{u}.w"))?;
            let hw = g.matmul(h, w)?;
            let mixed = g.batch_matmul(adj, hw, frames)?;
            h = g.relu(mixed)?;
        }
        g.add(nodes, h)
    }

    /// Attention pooling of each frame's nodes. Returns `(f_G, alpha)`.
    pub fn frame_pool(&self, g: &mut Graph<'_>, nodes: Var) -> Result<(Var, Var)> {
        let n = self.layout.n;
        let frames = self.frames_of(g, nodes)?;
        let (w, b) = (g.param("dgt.pool.w")?, g.param("dgt.pool.b")?);
        let logits = g.matmul(nodes, w)?;
        let logits = g.add_row(logits, b)?;
        let logits = g.reshape(logits, &[frames, n])?;
        let alpha = g.softmax_rows(logits, None)?;
        let pooled = g.segment_weighted_sum(alpha, nodes)?;
        Ok((pooled, alpha))
    }

    /// `ELU(W_m [W_f f_I ; f_G])`; passes `f_G` through when ablated.
    pub fn fuse_frame_context(&self, g: &mut Graph<'_>, f_g: Var, f_i: Var) -> Result<Var> {
        if self.ablations.no_frame_feat {
            return Ok(f_g);
        }
        if g.value(f_g).rows() != g.value(f_i).rows() {
            return shape_err(
                "fuse_frame_context",
                format!("{} graph rows vs {} frame rows", g.value(f_g).rows(), g.value(f_i).rows()),
            );
        }
        let (wf, bf) = (g.param("dgt.fuse_f.w")?, g.param("dgt.fuse_f.b")?);
        let (wm, bm) = (g.param("dgt.fuse_m.w")?, g.param("dgt.fuse_m.b")?);
        let fi = g.matmul(f_i, wf)?;
        let fi = g.add_row(fi, bf)?;
        let cat = g.concat_cols(&[fi, f_g])?;
        let z = g.matmul(cat, wm)?;
        let z = g.add_row(z, bm)?;
        g.elu(z)
    }

    /// Mean over each clip's own frames.
    pub fn clip_pool(&self, g: &mut Graph<'_>, frames: Var) -> Result<Var> {
        if g.value(frames).rows() == 0 {
            return invalid("clip pooling over zero frames");
        }
        g.group_mean(frames, self.layout.l_c)
    }

    /// Everything up to (and including) frame-context fusion: `l_v x d`.
    pub fn frame_level(&self, g: &mut Graph<'_>, nodes: Var, frame_feats: Var) -> Result<Var> {
        let l = self.layout;
        if g.value(nodes).rows() != l.l_v * l.n || g.value(frame_feats).rows() != l.l_v {
            return invalid(format!(
                "expected {} node rows and {} frame rows, got {} and {}",
                l.l_v * l.n,
                l.l_v,
                g.value(nodes).rows(),
                g.value(frame_feats).rows()
            ));
        }
        let f_g = if self.ablations.no_dgt {
            g.group_mean(nodes, l.n)?
        } else {
            let nodes = if self.ablations.no_ntrans {
                nodes
            } else {
                self.node_transformer(g, nodes)?
            };
            let rel = self.recompute_relations(g, nodes)?;
            let rel = if self.ablations.no_etrans {
                rel
            } else {
                self.edge_transformer(g, rel)?
            };
            let out = self.graph_conv(g, nodes, rel)?;
            self.frame_pool(g, out)?.0
        };
        self.fuse_frame_context(g, f_g, frame_feats)
    }

    /// Full pipeline to the `k x d` clip summary.
    pub fn forward(&self, g: &mut Graph<'_>, nodes: Var, frame_feats: Var) -> Result<Var> {
        let frames = self.frame_level(g, nodes, frame_feats)?;
        self.clip_pool(g, frames)
    }
}
