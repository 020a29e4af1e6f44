//! JSONL dataset rows, loading/saving, and conversion to model inputs.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use vgt_core::config::RunConfig;
use vgt_core::rng::SeedStreams;
use vgt_core::text::{self, Vocab};
use vgt_core::video_graph::{self, AlignedVideo, BBox, FrameDetections, GraphConfig, Region};
use vgt_core::EncodedQa;

use crate::error::{io_err, HarnessError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionRecord {
    pub feat: Vec<f64>,
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    pub conf: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameRecord {
    pub t: usize,
    pub regions: Vec<RegionRecord>,
    pub frame_feat: Vec<f64>,
}

/// One dataset row. QA rows carry `question`/`candidates`/`answer`;
/// pretraining rows carry `description` instead.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sample {
    pub id: String,
    pub frames: Vec<FrameRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub question: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub candidates: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
    /// Task family label used for per-family accuracy.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub family: Option<String>,
}

impl Sample {
    /// Checks that the row is either a complete QA row or a description row.
    /// Returns the name of the offending field.
    pub fn check(&self) -> std::result::Result<(), String> {
        if self.frames.is_empty() {
            return Err("`frames`: no frames".into());
        }
        for f in &self.frames {
            if f.regions.is_empty() {
                return Err(format!("`frames[{}].regions`: no regions", f.t));
            }
        }
        match (&self.question, &self.candidates, self.answer, &self.description) {
            (Some(_), Some(c), Some(a), None) => {
                if c.is_empty() {
                    Err("`candidates`: empty".into())
                } else if a >= c.len() {
                    Err(format!("`answer`: {a} out of {} candidates", c.len()))
                } else {
                    Ok(())
                }
            }
            (None, None, None, Some(_)) => Ok(()),
            (_, _, _, Some(_)) => Err("`description`: mixed with QA fields".into()),
            (None, _, _, None) => Err("`question`: missing".into()),
            (_, None, _, None) => Err("`candidates`: missing".into()),
            _ => Err("`answer`: missing".into()),
        }
    }

    pub fn is_qa(&self) -> bool {
        self.question.is_some()
    }

    /// All text of the row, for vocabulary building.
    pub fn texts(&self) -> Vec<&str> {
        let mut out = Vec::new();
        out.extend(self.question.as_deref());
        if let Some(c) = &self.candidates {
            out.extend(c.iter().map(String::as_str));
        }
        out.extend(self.description.as_deref());
        out
    }
}

pub fn load_dataset(path: &Path) -> Result<Vec<Sample>> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let schema = |msg: String| HarnessError::Schema {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let sample: Sample = serde_json::from_str(line).map_err(|e| schema(e.to_string()))?;
        sample.check().map_err(schema)?;
        out.push(sample);
    }
    Ok(out)
}

pub fn write_dataset(path: &Path, samples: &[Sample]) -> Result<()> {
    let mut buf = Vec::new();
    for s in samples {
        serde_json::to_writer(&mut buf, s).map_err(|e| HarnessError::Invalid(e.to_string()))?;
        buf.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(&buf).map_err(io_err(path))
}

/// Seeded permutation of `0..n` for one epoch.
pub fn shuffled_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut SeedStreams::new(seed).stream("shuffle", epoch));
    order
}

pub fn build_vocab(samples: &[Sample]) -> Vocab {
    Vocab::build(samples.iter().flat_map(Sample::texts))
}

/// Filters, links and stacks a row's detections.
pub fn prepare_video(sample: &Sample, cfg: &RunConfig) -> Result<AlignedVideo> {
    let bad = |msg: String| HarnessError::Invalid(format!("sample `{}`: {msg}", sample.id));
    if sample.frames.len() != cfg.l_v {
        return Err(bad(format!("{} frames, config expects {}", sample.frames.len(), cfg.l_v)));
    }
    let mut frames = Vec::with_capacity(cfg.l_v);
    let mut frame_feats = Vec::with_capacity(cfg.l_v);
    for (t, f) in sample.frames.iter().enumerate() {
        if f.frame_feat.len() != cfg.d_i {
            return Err(bad(format!("frame feature of size {}, expected {}", f.frame_feat.len(), cfg.d_i)));
        }
        let mut regions = Vec::with_capacity(f.regions.len());
        for r in &f.regions {
            let [x1, y1, x2, y2] = r.bbox;
            regions.push(Region {
                feat: r.feat.clone(),
                bbox: BBox::new(x1, y1, x2, y2)?,
                conf: r.conf,
            });
        }
        frames.push(FrameDetections::top_n(t, regions, cfg.n)?);
        frame_feats.push(f.frame_feat.clone());
    }
    Ok(video_graph::align_video(frames, frame_feats, &GraphConfig::from_run(cfg))?)
}

#[derive(Clone, Debug)]
pub enum PreparedTask {
    Qa {
        qa: EncodedQa,
        answer: usize,
        candidates: Vec<String>,
    },
    Description(Vec<usize>),
}

/// A row converted to model inputs.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub id: String,
    pub family: String,
    pub video: AlignedVideo,
    pub task: PreparedTask,
}

impl Prepared {
    pub fn answer(&self) -> Option<usize> {
        match &self.task {
            PreparedTask::Qa { answer, .. } => Some(*answer),
            PreparedTask::Description(_) => None,
        }
    }
}

pub fn prepare(samples: &[Sample], cfg: &RunConfig, vocab: &Vocab) -> Result<Vec<Prepared>> {
    samples
        .iter()
        .map(|s| {
            let video = prepare_video(s, cfg)?;
            let task = match (&s.question, &s.candidates, s.answer, &s.description) {
                (Some(q), Some(c), Some(a), _) => PreparedTask::Qa {
                    qa: EncodedQa::new(q, c, vocab)?,
                    answer: a,
                    candidates: c.clone(),
                },
                (_, _, _, Some(d)) => PreparedTask::Description(text::tokenize(d, vocab)),
                _ => return Err(HarnessError::Invalid(format!("sample `{}` has no task", s.id))),
            };
            Ok(Prepared {
                id: s.id.clone(),
                family: s.family.clone().unwrap_or_else(|| "all".into()),
                video,
                task,
            })
        })
        .collect()
}
