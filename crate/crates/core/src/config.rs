//! Run configuration shared by the model and the harness.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    MultiChoice,
    OpenEnded,
    Pretrain,
}

/// Where text tokens are injected into the visual stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CmPlacement {
    #[serde(rename = "object")]
    Object,
    #[serde(rename = "frame")]
    Frame,
    #[serde(rename = "clip")]
    Clip,
    #[serde(rename = "frame+clip")]
    FrameClip,
}

impl CmPlacement {
    pub fn at_object(self) -> bool {
        self == Self::Object
    }

    pub fn at_frame(self) -> bool {
        matches!(self, Self::Frame | Self::FrameClip)
    }

    pub fn at_clip(self) -> bool {
        matches!(self, Self::Clip | Self::FrameClip)
    }
}

impl FromStr for CmPlacement {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "object" => Ok(Self::Object),
            "frame" => Ok(Self::Frame),
            "clip" => Ok(Self::Clip),
            "frame+clip" => Ok(Self::FrameClip),
            other => Err(Error::Config(format!("unknown cross-modal placement `{other}`"))),
        }
    }
}

impl fmt::Display for CmPlacement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Object => "object",
            Self::Frame => "frame",
            Self::Clip => "clip",
            Self::FrameClip => "frame+clip",
        })
    }
}

/// Component switches for ablation runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    /// Drop the whole dynamic graph transformer: objects are mean-pooled per frame.
    Dgt,
    /// Drop both node and edge transformers.
    Ttrans,
    Ntrans,
    Etrans,
    /// Drop the frame-level feature fusion.
    FrameFeat,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [
        Ablation::Dgt,
        Ablation::Ttrans,
        Ablation::Ntrans,
        Ablation::Etrans,
        Ablation::FrameFeat,
    ];
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dgt" => Ok(Self::Dgt),
            "ttrans" => Ok(Self::Ttrans),
            "ntrans" => Ok(Self::Ntrans),
            "etrans" => Ok(Self::Etrans),
            "frame-feat" => Ok(Self::FrameFeat),
            other => Err(Error::Config(format!("unknown ablation `{other}`"))),
        }
    }
}

/// Resolved view of the ablation list.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Ablations {
    pub no_dgt: bool,
    pub no_ntrans: bool,
    pub no_etrans: bool,
    pub no_frame_feat: bool,
}

impl Ablations {
    pub fn from_list(list: &[Ablation]) -> Self {
        let mut a = Self::default();
        for flag in list {
            match flag {
                Ablation::Dgt => a.no_dgt = true,
                Ablation::Ttrans => {
                    a.no_ntrans = true;
                    a.no_etrans = true;
                }
                Ablation::Ntrans => a.no_ntrans = true,
                Ablation::Etrans => a.no_etrans = true,
                Ablation::FrameFeat => a.no_frame_feat = true,
            }
        }
        a
    }
}

/// Every knob of a run. Serialized as a flat key/value table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Frames sampled per video.
    pub l_v: usize,
    /// Clips per video.
    pub k: usize,
    /// Frames per clip; `l_v = k * l_c`.
    pub l_c: usize,
    /// Objects kept per frame.
    pub n: usize,
    /// Weight of the IoU term in the linking score.
    pub link_lambda: f64,

    pub d: usize,
    /// Raw region feature size.
    pub d_r: usize,
    /// Frame-level feature size.
    pub d_i: usize,
    pub heads: usize,
    pub edge_heads: usize,
    /// Transformer layers (node/edge/global).
    pub layers: usize,
    /// Graph convolution layers.
    pub gcn_layers: usize,

    pub d_text: usize,
    pub text_heads: usize,
    pub text_layers: usize,
    pub max_text_len: usize,

    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,

    pub num_negatives: usize,
    pub mlm_weight: f64,
    pub mlm_prob: f64,

    pub mode: Mode,
    pub cross_modal: bool,
    pub cm_placement: CmPlacement,
    /// Open-ended scoring multiplies in question-answer similarity.
    pub joint_decision: bool,
    pub ablate: Vec<Ablation>,
    /// Freeze the text encoder (second training stage).
    pub freeze_text: bool,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl RunConfig {
    /// Small configuration that trains in minutes on one CPU core.
    pub fn desk() -> Self {
        Self {
            l_v: 8,
            k: 4,
            l_c: 2,
            n: 4,
            link_lambda: 1.0,
            d: 64,
            d_r: 32,
            d_i: 32,
            heads: 4,
            edge_heads: 4,
            layers: 1,
            gcn_layers: 2,
            d_text: 64,
            text_heads: 4,
            text_layers: 2,
            max_text_len: 32,
            lr: 1e-3,
            epochs: 30,
            batch_size: 8,
            num_negatives: 63,
            mlm_weight: 1.0,
            mlm_prob: 0.15,
            mode: Mode::MultiChoice,
            cross_modal: true,
            cm_placement: CmPlacement::Clip,
            joint_decision: true,
            ablate: Vec::new(),
            freeze_text: false,
            seed: 0,
        }
    }

    /// Full-size settings: 32 frames in 8 clips of 4, 10 objects, d = 512,
    /// 8 heads (5 for the edge transformer), one transformer layer, two
    /// graph layers, Adam at 1e-5 with batch 64, and a BERT-base-sized text
    /// encoder over 2048-d detector and frame features.
    pub fn full() -> Self {
        Self {
            l_v: 32,
            k: 8,
            l_c: 4,
            n: 10,
            d: 512,
            d_r: 2048,
            d_i: 2048,
            heads: 8,
            edge_heads: 5,
            layers: 1,
            gcn_layers: 2,
            d_text: 768,
            text_heads: 12,
            text_layers: 12,
            max_text_len: 64,
            lr: 1e-5,
            batch_size: 64,
            epochs: 20,
            ..Self::desk()
        }
    }

    pub fn ablations(&self) -> Ablations {
        Ablations::from_list(&self.ablate)
    }

    /// Location embedding width used by the node feature map.
    pub fn d_loc(&self) -> usize {
        (self.d / 4).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        let positive = [
            ("l_v", self.l_v),
            ("k", self.k),
            ("l_c", self.l_c),
            ("n", self.n),
            ("d", self.d),
            ("d_r", self.d_r),
            ("d_i", self.d_i),
            ("heads", self.heads),
            ("edge_heads", self.edge_heads),
            ("layers", self.layers),
            ("gcn_layers", self.gcn_layers),
            ("d_text", self.d_text),
            ("text_heads", self.text_heads),
            ("max_text_len", self.max_text_len),
            ("batch_size", self.batch_size),
        ];
        for (name, v) in positive {
            if v == 0 {
                return fail(format!("`{name}` must be positive"));
            }
        }
        if self.l_v != self.k * self.l_c {
            return fail(format!(
                "l_v ({}) must equal k * l_c ({} * {})",
                self.l_v, self.k, self.l_c
            ));
        }
        if !self.d.is_multiple_of(2) {
            return fail(format!("d ({}) must be even for the relation maps", self.d));
        }
        if !self.d.is_multiple_of(self.heads) {
            return fail(format!("d ({}) not divisible by heads ({})", self.d, self.heads));
        }
        let dn = self.n * self.n;
        if !dn.is_multiple_of(self.edge_heads) {
            return fail(format!(
                "n^2 ({dn}) not divisible by edge_heads ({})",
                self.edge_heads
            ));
        }
        if !self.d_text.is_multiple_of(self.text_heads) {
            return fail(format!(
                "d_text ({}) not divisible by text_heads ({})",
                self.d_text, self.text_heads
            ));
        }
        if !(self.link_lambda >= 0.0 && self.link_lambda.is_finite()) {
            return fail(format!("link_lambda must be >= 0, got {}", self.link_lambda));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return fail(format!("lr must be >= 0, got {}", self.lr));
        }
        if !(0.0..=1.0).contains(&self.mlm_prob) {
            return fail(format!("mlm_prob must lie in [0, 1], got {}", self.mlm_prob));
        }
        if !(self.mlm_weight >= 0.0 && self.mlm_weight.is_finite()) {
            return fail(format!("mlm_weight must be >= 0, got {}", self.mlm_weight));
        }
        if self.mode == Mode::Pretrain && self.num_negatives == 0 {
            return fail("pretraining needs at least one negative".into());
        }
        Ok(())
    }
}
