//! Synthetic videos of colored boxes with one marked object.
//!
//! Every frame holds `n` objects (the marked target plus distractors with
//! distinct colors) and one low-confidence junk detection, listed in a
//! random order. Region features are a palette color vector, plus a marker
//! vector for the target, plus small noise. Question families:
//!
//! - attribute: color of the marked object (visible in any frame);
//! - transition: color the marked object changes into halfway through;
//! - order: direction the marked object moves (only visible by comparing
//!   its position over time; distractors move in random directions).

use std::fmt;
use std::str::FromStr;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use vgt_core::config::RunConfig;
use vgt_core::rng::SeedStreams;

use crate::dataset::{FrameRecord, RegionRecord, Sample};
use crate::error::{HarnessError, Result};

pub const COLORS: [&str; 8] = ["red", "green", "blue", "yellow", "purple", "orange", "white", "black"];

const BOX_HALF: f64 = 0.08;
const FEAT_NOISE: f64 = 0.05;
const TRAVEL: f64 = 0.4;
const PALETTE_SEED: u64 = 0x5eed_c010;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    Attribute,
    Transition,
    Order,
}

impl Family {
    pub const ALL: [Family; 3] = [Family::Attribute, Family::Transition, Family::Order];

    pub fn name(self) -> &'static str {
        match self {
            Family::Attribute => "attribute",
            Family::Transition => "transition",
            Family::Order => "order",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        Family::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| HarnessError::Invalid(format!("unknown task family `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Left,
    Right,
    Up,
    Down,
    Still,
}

impl Direction {
    pub const ALL: [Direction; 5] = [
        Direction::Left,
        Direction::Right,
        Direction::Up,
        Direction::Down,
        Direction::Still,
    ];

    pub fn word(self) -> &'static str {
        match self {
            Direction::Left => "left",
            Direction::Right => "right",
            Direction::Up => "up",
            Direction::Down => "down",
            Direction::Still => "still",
        }
    }

    /// Unit displacement in image coordinates (y grows downwards).
    pub fn vector(self) -> (f64, f64) {
        match self {
            Direction::Left => (-1.0, 0.0),
            Direction::Right => (1.0, 0.0),
            Direction::Up => (0.0, -1.0),
            Direction::Down => (0.0, 1.0),
            Direction::Still => (0.0, 0.0),
        }
    }

    pub fn reversed(self) -> Self {
        match self {
            Direction::Left => Direction::Right,
            Direction::Right => Direction::Left,
            Direction::Up => Direction::Down,
            Direction::Down => Direction::Up,
            Direction::Still => Direction::Still,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub num_videos: usize,
    pub l_v: usize,
    pub k: usize,
    pub l_c: usize,
    pub n: usize,
    pub d_r: usize,
    pub d_i: usize,
    pub num_candidates: usize,
    /// Video `i` uses `families[i % len]`.
    pub families: Vec<Family>,
    /// Emit description rows for pretraining instead of QA rows.
    pub descriptions: bool,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn from_run(cfg: &RunConfig, num_videos: usize, families: Vec<Family>, seed: u64) -> Self {
        Self {
            num_videos,
            l_v: cfg.l_v,
            k: cfg.k,
            l_c: cfg.l_c,
            n: cfg.n,
            d_r: cfg.d_r,
            d_i: cfg.d_i,
            num_candidates: 5,
            families,
            descriptions: false,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(HarnessError::Invalid(m));
        if self.l_v != self.k * self.l_c || self.l_v < 2 {
            return fail(format!("need l_v = k * l_c >= 2, got {} = {} * {}", self.l_v, self.k, self.l_c));
        }
        if self.n == 0 || self.n > COLORS.len() {
            return fail(format!("n must lie in 1..={}, got {}", COLORS.len(), self.n));
        }
        if self.d_r == 0 || self.d_i == 0 {
            return fail("feature sizes must be positive".into());
        }
        if self.num_candidates < 2 || self.num_candidates > Direction::ALL.len() {
            return fail(format!("num_candidates must lie in 2..=5, got {}", self.num_candidates));
        }
        if self.families.is_empty() {
            return fail("at least one task family is required".into());
        }
        Ok(())
    }
}

fn unit_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.into_iter().map(|x| x / norm).collect()
}

/// Fixed color vectors and the marker vector for a feature size.
pub struct Palette {
    pub colors: Vec<Vec<f64>>,
    pub marker: Vec<f64>,
}

impl Palette {
    pub fn new(d_r: usize) -> Self {
        let s = SeedStreams::new(PALETTE_SEED);
        Self {
            colors: (0..COLORS.len())
                .map(|c| unit_vector(&mut s.stream("color", c as u64), d_r))
                .collect(),
            marker: unit_vector(&mut s.stream("marker", 0), d_r),
        }
    }
}

struct Track {
    start: (f64, f64),
    dir: (f64, f64),
    speed: f64,
    colors: (usize, usize),
    marked: bool,
}

impl Track {
    fn center(&self, t: usize, l_v: usize) -> (f64, f64) {
        let s = self.speed * (t as f64 / (l_v - 1) as f64 - 0.5);
        let c = |v: f64| v.clamp(BOX_HALF + 0.02, 1.0 - BOX_HALF - 0.02);
        (c(self.start.0 + self.dir.0 * s), c(self.start.1 + self.dir.1 * s))
    }

    fn color(&self, t: usize, l_v: usize) -> usize {
        if t < l_v / 2 {
            self.colors.0
        } else {
            self.colors.1
        }
    }
}

fn noisy(base: &[f64], rng: &mut ChaCha8Rng) -> Vec<f64> {
    base.iter().map(|x| x + rng.random_range(-FEAT_NOISE..FEAT_NOISE)).collect()
}

fn candidates(gold: &str, pool: &[&str], must: Option<&str>, count: usize, rng: &mut ChaCha8Rng) -> (Vec<String>, usize) {
    let mut others: Vec<&str> = pool.iter().copied().filter(|&w| w != gold && Some(w) != must).collect();
    others.shuffle(rng);
    let mut out = vec![gold];
    out.extend(must.filter(|&m| m != gold));
    out.extend(others);
    out.truncate(count);
    out.shuffle(rng);
    let answer = out.iter().position(|&w| w == gold).expect("gold kept");
    (out.into_iter().map(String::from).collect(), answer)
}

/// Generates video `index`; `direction` overrides the marked object's motion.
pub fn generate_video(spec: &SyntheticSpec, palette: &Palette, index: usize, direction: Option<Direction>) -> Sample {
    let family = spec.families[index % spec.families.len()];
    let mut rng = SeedStreams::new(spec.seed).stream("video", index as u64);
    let mut color_ids: Vec<usize> = (0..COLORS.len()).collect();
    color_ids.shuffle(&mut rng);

    let dir = direction.unwrap_or(*Direction::ALL.choose(&mut rng).expect("directions"));
    let target_start = (rng.random_range(0.3..0.7), rng.random_range(0.3..0.7));
    let new_color = if family == Family::Transition {
        // any color other than the target's current one
        color_ids[rng.random_range(1..COLORS.len())]
    } else {
        color_ids[0]
    };
    let mut tracks = vec![Track {
        start: target_start,
        dir: dir.vector(),
        speed: TRAVEL,
        colors: (color_ids[0], new_color),
        marked: true,
    }];
    for &c in color_ids.iter().take(spec.n).skip(1) {
        let d = Direction::ALL.choose(&mut rng).expect("directions").vector();
        tracks.push(Track {
            start: (rng.random_range(0.2..0.8), rng.random_range(0.2..0.8)),
            dir: d,
            speed: rng.random_range(0.0..TRAVEL),
            colors: (c, c),
            marked: false,
        });
    }

    let scene = unit_vector(&mut rng, spec.d_i);
    let mut frames = Vec::with_capacity(spec.l_v);
    for t in 0..spec.l_v {
        let mut regions = Vec::with_capacity(spec.n + 1);
        for tr in &tracks {
            let mut base = palette.colors[tr.color(t, spec.l_v)].clone();
            if tr.marked {
                for (b, m) in base.iter_mut().zip(&palette.marker) {
                    *b += m;
                }
            }
            let (cx, cy) = tr.center(t, spec.l_v);
            regions.push(RegionRecord {
                feat: noisy(&base, &mut rng),
                bbox: [cx - BOX_HALF, cy - BOX_HALF, cx + BOX_HALF, cy + BOX_HALF],
                conf: rng.random_range(0.6..1.0),
            });
        }
        let (jx, jy) = (rng.random_range(0.15..0.85), rng.random_range(0.15..0.85));
        let junk = unit_vector(&mut rng, spec.d_r);
        regions.push(RegionRecord {
            feat: junk,
            bbox: [jx - 0.1, jy - 0.1, jx + 0.1, jy + 0.1],
            conf: rng.random_range(0.01..0.1),
        });
        regions.shuffle(&mut rng);
        frames.push(FrameRecord {
            t,
            regions,
            frame_feat: noisy(&scene, &mut rng),
        });
    }

    let target = &tracks[0];
    let (c0, c1) = (COLORS[target.colors.0], COLORS[target.colors.1]);
    let mut sample = Sample {
        id: format!("{}-{index:05}", family.name()),
        frames,
        question: None,
        candidates: None,
        answer: None,
        description: None,
        family: Some(family.name().to_string()),
    };
    if spec.descriptions {
        let others: Vec<&str> = tracks[1..].iter().map(|t| COLORS[t.colors.0]).collect();
        let scene_part = if others.is_empty() {
            String::new()
        } else {
            format!(" near the {} objects", others.join(" and "))
        };
        sample.description = Some(match family {
            Family::Transition => format!("the marked object turns from {c0} to {c1}{scene_part}"),
            _ => format!("the marked {c0} object moves {}{scene_part}", dir.word()),
        });
        return sample;
    }
    let (question, (cands, answer)) = match family {
        Family::Attribute => (
            "what color is the marked object",
            candidates(c0, &COLORS, None, spec.num_candidates, &mut rng),
        ),
        Family::Transition => (
            "what color does the marked object turn into",
            candidates(c1, &COLORS, Some(c0), spec.num_candidates, &mut rng),
        ),
        Family::Order => {
            let words: Vec<&str> = Direction::ALL.iter().map(|d| d.word()).collect();
            (
                "which way does the marked object move",
                candidates(dir.word(), &words, None, spec.num_candidates, &mut rng),
            )
        }
    };
    sample.question = Some(question.to_string());
    sample.candidates = Some(cands);
    sample.answer = Some(answer);
    sample
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Vec<Sample>> {
    spec.validate()?;
    let palette = Palette::new(spec.d_r);
    Ok((0..spec.num_videos).map(|i| generate_video(spec, &palette, i, None)).collect())
}
