//! Plain-loop reference implementations used as oracles.
#![allow(dead_code)]

use rand::Rng;
use vgt_core::config::RunConfig;
use vgt_core::rng::SeedStreams;
use vgt_core::tensor::{Initializer, ParamStore, Tensor};

/// Dense row-major matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Mat {
    pub r: usize,
    pub c: usize,
    pub v: Vec<f64>,
}

impl Mat {
    pub fn zeros(r: usize, c: usize) -> Self {
        Self { r, c, v: vec![0.0; r * c] }
    }

    pub fn of(t: &Tensor) -> Self {
        Self {
            r: t.rows(),
            c: t.cols(),
            v: t.data().to_vec(),
        }
    }

    pub fn tensor(&self) -> Tensor {
        Tensor::matrix(self.r, self.c, self.v.clone()).unwrap()
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.v[i * self.c + j]
    }

    pub fn set(&mut self, i: usize, j: usize, x: f64) {
        self.v[i * self.c + j] = x;
    }

    pub fn rows(&self, range: std::ops::Range<usize>) -> Mat {
        Mat {
            r: range.len(),
            c: self.c,
            v: self.v[range.start * self.c..range.end * self.c].to_vec(),
        }
    }

    pub fn cols(&self, range: std::ops::Range<usize>) -> Mat {
        let mut out = Mat::zeros(self.r, range.len());
        for i in 0..self.r {
            for (o, j) in range.clone().enumerate() {
                out.set(i, o, self.at(i, j));
            }
        }
        out
    }

    pub fn mm(&self, b: &Mat) -> Mat {
        assert_eq!(self.c, b.r);
        let mut out = Mat::zeros(self.r, b.c);
        for i in 0..self.r {
            for j in 0..b.c {
                out.set(i, j, (0..self.c).map(|k| self.at(i, k) * b.at(k, j)).sum());
            }
        }
        out
    }

    pub fn t(&self) -> Mat {
        let mut out = Mat::zeros(self.c, self.r);
        for i in 0..self.r {
            for j in 0..self.c {
                out.set(j, i, self.at(i, j));
            }
        }
        out
    }

    pub fn add(&self, b: &Mat) -> Mat {
        assert_eq!((self.r, self.c), (b.r, b.c));
        Mat {
            r: self.r,
            c: self.c,
            v: self.v.iter().zip(&b.v).map(|(x, y)| x + y).collect(),
        }
    }

    pub fn add_row(&self, b: &[f64]) -> Mat {
        let mut out = self.clone();
        for i in 0..self.r {
            for j in 0..self.c {
                out.v[i * self.c + j] += b[j];
            }
        }
        out
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Mat {
        Mat {
            r: self.r,
            c: self.c,
            v: self.v.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn hcat(&self, b: &Mat) -> Mat {
        let mut out = Mat::zeros(self.r, self.c + b.c);
        for i in 0..self.r {
            for j in 0..self.c {
                out.set(i, j, self.at(i, j));
            }
            for j in 0..b.c {
                out.set(i, self.c + j, b.at(i, j));
            }
        }
        out
    }

    pub fn vcat(parts: &[Mat]) -> Mat {
        let c = parts[0].c;
        Mat {
            r: parts.iter().map(|p| p.r).sum(),
            c,
            v: parts.iter().flat_map(|p| p.v.clone()).collect(),
        }
    }

    pub fn softmax_rows(&self) -> Mat {
        let mut out = self.clone();
        for i in 0..self.r {
            let row = &mut out.v[i * self.c..(i + 1) * self.c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = row.iter().map(|x| (x - m).exp()).sum();
            for x in row.iter_mut() {
                *x = (*x - m).exp() / s;
            }
        }
        out
    }

    pub fn layer_norm(&self, gain: &[f64], bias: &[f64]) -> Mat {
        let mut out = self.clone();
        for i in 0..self.r {
            let row = &mut out.v[i * self.c..(i + 1) * self.c];
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
            let sd = (var + 1e-5).sqrt();
            for (j, x) in row.iter_mut().enumerate() {
                *x = (*x - mean) / sd * gain[j] + bias[j];
            }
        }
        out
    }

    pub fn max_abs_diff(&self, t: &Tensor) -> f64 {
        assert_eq!((self.r, self.c), (t.rows(), t.cols()));
        self.v.iter().zip(t.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }
}

pub fn p(store: &ParamStore, name: &str) -> Mat {
    let t = store.get(name).unwrap();
    if t.shape().len() == 1 {
        Mat { r: 1, c: t.numel(), v: t.data().to_vec() }
    } else {
        Mat::of(t)
    }
}

pub fn pv(store: &ParamStore, name: &str) -> Vec<f64> {
    store.get(name).unwrap().data().to_vec()
}

pub fn linear(store: &ParamStore, prefix: &str, x: &Mat) -> Mat {
    let y = x.mm(&p(store, &format!("{prefix}.w")));
    match store.get(&format!("{prefix}.b")) {
        Ok(b) => y.add_row(b.data()),
        Err(_) => y,
    }
}

pub fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp() - 1.0
    }
}

/// One post-norm MHSA layer on a single sequence, head by head.
pub fn mhsa(store: &ParamStore, prefix: &str, heads: usize, x: &Mat) -> Mat {
    let q = linear(store, &format!("{prefix}.q"), x);
    let k = linear(store, &format!("{prefix}.k"), x);
    let v = linear(store, &format!("{prefix}.v"), x);
    let dk = x.c / heads;
    let mut outs = Vec::new();
    for h in 0..heads {
        let cols = h * dk..(h + 1) * dk;
        let (qh, kh, vh) = (q.cols(cols.clone()), k.cols(cols.clone()), v.cols(cols));
        let w = kh.mm(&qh.t()).map(|a| a / (dk as f64).sqrt()).softmax_rows();
        outs.push(w.mm(&vh));
    }
    let mut cat = outs[0].clone();
    for o in &outs[1..] {
        cat = cat.hcat(o);
    }
    let out = linear(store, &format!("{prefix}.c"), &cat);
    out.add(x).layer_norm(&pv(store, &format!("{prefix}.ln.g")), &pv(store, &format!("{prefix}.ln.b")))
}

pub fn random_mat(seed: u64, r: usize, c: usize, bound: f64) -> Mat {
    let mut rng = SeedStreams::new(seed).stream("oracle-input", (r * 1000 + c) as u64);
    Mat {
        r,
        c,
        v: (0..r * c).map(|_| rng.random_range(-bound..bound)).collect(),
    }
}

/// Small configuration for DGT tests: 2 clips of 2 frames, 3 objects.
pub fn small_cfg(seed: u64) -> RunConfig {
    RunConfig {
        l_v: 4,
        k: 2,
        l_c: 2,
        n: 3,
        d: 6,
        d_r: 5,
        d_i: 4,
        heads: 2,
        edge_heads: 3,
        d_text: 8,
        text_heads: 2,
        text_layers: 1,
        max_text_len: 24,
        seed,
        ..RunConfig::desk()
    }
}

pub fn init(seed: u64) -> Initializer {
    Initializer::new(SeedStreams::new(seed).stream("init", 0))
}

/// Random detections for every frame, aligned with the configured linking.
pub fn random_video(cfg: &RunConfig, seed: u64) -> vgt_core::video_graph::AlignedVideo {
    use vgt_core::video_graph::{align_video, BBox, FrameDetections, GraphConfig, Region};
    let mut rng = SeedStreams::new(seed).stream("video", 0);
    let frames = (0..cfg.l_v)
        .map(|t| {
            let regions = (0..cfg.n)
                .map(|_| {
                    let (x, y) = (rng.random_range(0.0..0.6), rng.random_range(0.0..0.6));
                    Region {
                        feat: (0..cfg.d_r).map(|_| rng.random_range(-1.0..1.0)).collect(),
                        bbox: BBox::new(x, y, x + 0.3, y + 0.3).unwrap(),
                        conf: rng.random_range(0.5..1.0),
                    }
                })
                .collect();
            FrameDetections::top_n(t, regions, cfg.n).unwrap()
        })
        .collect();
    let ff = (0..cfg.l_v)
        .map(|_| (0..cfg.d_i).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    align_video(frames, ff, &GraphConfig::from_run(cfg)).unwrap()
}
