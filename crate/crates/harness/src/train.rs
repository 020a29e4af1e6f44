//! Training and evaluation loops for QA and pretraining.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use vgt_core::config::{Mode, RunConfig};
use vgt_core::model::{param_counts, PretrainInputs};
use vgt_core::pretrain::{corrupt_tokens, sample_negatives, MlmTarget};
use vgt_core::qa::ScoreVector;
use vgt_core::rng::SeedStreams;
use vgt_core::tensor::{adam_step, AdamConfig, Graph, OptimizerState, ParamGrads, ParamStore};
use vgt_core::text::Vocab;
use vgt_core::video_graph::AlignedVideo;
use vgt_core::Vgt;

use crate::checkpoint::{Checkpoint, TrainState};
use crate::dataset::{shuffled_order, Prepared, PreparedTask};
use crate::error::{io_err, HarnessError, Result};

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct FamilyAccuracy {
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct EvalReport {
    pub count: usize,
    pub loss: f64,
    pub accuracy: f64,
    pub per_family: BTreeMap<String, FamilyAccuracy>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("family,count,correct,accuracy\n");
        let correct: usize = self.per_family.values().map(|f| f.correct).sum();
        let _ = writeln!(s, "all,{},{},{}", self.count, correct, self.accuracy);
        for (name, f) in &self.per_family {
            let _ = writeln!(s, "{name},{},{},{}", f.total, f.correct, f.accuracy);
        }
        s
    }
}

/// One CSV row of the metrics file.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub stage: u64,
    pub epoch: u64,
    pub split: String,
    pub loss: f64,
    pub acc_all: f64,
    pub per_family: BTreeMap<String, f64>,
}

/// Renders metric rows with one accuracy column per family seen.
pub fn metrics_csv(rows: &[EpochMetrics]) -> String {
    let families: BTreeSet<&str> = rows.iter().flat_map(|r| r.per_family.keys().map(String::as_str)).collect();
    let mut s = String::from("stage,epoch,split,loss,acc_all");
    for f in &families {
        let _ = write!(s, ",acc_{f}");
    }
    s.push('\n');
    for r in rows {
        let _ = write!(s, "{},{},{},{},{}", r.stage, r.epoch, r.split, r.loss, r.acc_all);
        for f in &families {
            match r.per_family.get(*f) {
                Some(a) => {
                    let _ = write!(s, ",{a}");
                }
                None => s.push(','),
            }
        }
        s.push('\n');
    }
    s
}

/// Accuracy and mean loss of a QA model; no parameter updates.
pub fn evaluate(model: &Vgt, params: &ParamStore, data: &[Prepared]) -> Result<EvalReport> {
    let mut report = EvalReport::default();
    let mut correct = 0;
    let mut loss_sum = 0.0;
    for s in data {
        let PreparedTask::Qa { qa, answer, .. } = &s.task else {
            return Err(HarnessError::Invalid(format!("sample `{}` is not a QA row", s.id)));
        };
        let mut g = Graph::with_params(params);
        let (scores, loss) = model.qa_loss(&mut g, &s.video, qa, *answer)?;
        let pred = ScoreVector::from_var(&g, scores)?;
        loss_sum += g.value(loss).data()[0];
        let hit = pred.argmax == *answer;
        correct += usize::from(hit);
        let fam = report.per_family.entry(s.family.clone()).or_default();
        fam.total += 1;
        fam.correct += usize::from(hit);
    }
    report.count = data.len();
    if !data.is_empty() {
        report.loss = loss_sum / data.len() as f64;
        report.accuracy = correct as f64 / data.len() as f64;
    }
    for f in report.per_family.values_mut() {
        f.accuracy = f.correct as f64 / f.total as f64;
    }
    Ok(report)
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Directory for `metrics.csv`, `best.ckpt` and `last.ckpt`.
    pub out_dir: Option<PathBuf>,
    /// Stop (resumably) once this many epochs of the stage are complete.
    pub stop_after_epoch: Option<u64>,
    /// Stop once training accuracy reaches this value.
    pub target_train_acc: Option<f64>,
    /// Skip the per-epoch pass over the training split.
    pub skip_train_eval: bool,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub metrics: Vec<EpochMetrics>,
    /// First epoch (1-based) whose training accuracy met the target.
    pub epochs_to_target: Option<u64>,
    pub final_train: Option<EvalReport>,
    pub final_val: Option<EvalReport>,
}

/// Per-step pretraining losses.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PretrainStep {
    pub total: f64,
    pub contrastive: f64,
    pub mlm: f64,
}

/// Model, weights, optimizer and progress of one run.
pub struct Trainer {
    pub model: Vgt,
    pub params: ParamStore,
    pub vocab: Vocab,
    pub optimizer: Option<OptimizerState>,
    pub state: TrainState,
    pub metrics: Vec<EpochMetrics>,
}

impl Trainer {
    pub fn new(cfg: &RunConfig, vocab: Vocab) -> Result<Self> {
        let (model, params) = Vgt::build(cfg, vocab.len())?;
        let mut t = Self {
            model,
            params,
            vocab,
            optimizer: None,
            state: TrainState {
                seed: cfg.seed,
                ..TrainState::default()
            },
            metrics: Vec::new(),
        };
        if cfg.freeze_text {
            t.freeze_text();
        }
        Ok(t)
    }

    /// Continues exactly where the checkpoint left off.
    pub fn resume(ck: Checkpoint) -> Result<Self> {
        let (model, fresh) = Vgt::build(&ck.config, ck.vocab.len())?;
        check_layout(&fresh, &ck.params)?;
        Ok(Self {
            model,
            params: ck.params,
            vocab: ck.vocab,
            optimizer: ck.optimizer,
            state: ck.state,
            metrics: Vec::new(),
        })
    }

    /// Starts a new run (fresh optimizer) from a checkpoint's weights, with
    /// the vocabulary extended by `texts`. Used for fine-tuning after
    /// pretraining and for the frozen-text second stage.
    pub fn from_weights<'a>(cfg: &RunConfig, ck: &Checkpoint, texts: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        let mut vocab = ck.vocab.clone();
        for t in texts {
            vocab.add_text(t);
        }
        let (mut model, fresh) = Vgt::build(cfg, ck.vocab.len())?;
        check_layout(&fresh, &ck.params)?;
        let mut params = ck.params.clone();
        params.unfreeze_all();
        model.grow_vocab(&mut params, vocab.len())?;
        let mut t = Self {
            model,
            params,
            vocab,
            optimizer: None,
            state: TrainState {
                seed: cfg.seed,
                ..TrainState::default()
            },
            metrics: Vec::new(),
        };
        if cfg.freeze_text {
            t.freeze_text();
        }
        Ok(t)
    }

    /// Second stage: same weights, frozen text encoder, fresh optimizer;
    /// the best metric carries over so selection spans both stages.
    pub fn next_stage(ck: &Checkpoint) -> Result<Self> {
        let cfg = RunConfig {
            freeze_text: true,
            ..ck.config.clone()
        };
        let mut t = Self::from_weights(&cfg, ck, [])?;
        t.state.best_metric = ck.state.best_metric;
        t.state.best_epoch = ck.state.best_epoch;
        t.state.stage = ck.state.stage + 1;
        Ok(t)
    }

    pub fn cfg(&self) -> &RunConfig {
        &self.model.cfg
    }

    pub fn freeze_text(&mut self) -> usize {
        self.params.freeze_prefix("text.")
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.model.cfg.clone(),
            vocab: self.vocab.clone(),
            params: self.params.clone(),
            optimizer: self.optimizer.clone(),
            state: self.state.clone(),
        }
    }

    fn steps_per_epoch(&self, n: usize) -> u64 {
        n.div_ceil(self.cfg().batch_size) as u64
    }

    fn ensure_optimizer(&mut self, n: usize) -> Result<()> {
        if self.optimizer.is_none() {
            let total = self.cfg().epochs as u64 * self.steps_per_epoch(n);
            self.optimizer = Some(OptimizerState::new(&self.params, AdamConfig::new(self.cfg().lr, total))?);
        }
        Ok(())
    }

    fn shuffle_index(&self) -> u64 {
        // stage in the high bits keeps per-stage shuffles distinct
        ((self.state.stage - 1) << 32) | self.state.epoch
    }

    fn apply(&mut self, grads: &mut ParamGrads, count: usize) -> Result<()> {
        grads.scale(1.0 / count as f64);
        let opt = self.optimizer.as_mut().expect("optimizer initialized");
        adam_step(&mut self.params, grads, opt)?;
        Ok(())
    }

    /// Multi-choice or open-ended training with softmax cross-entropy.
    pub fn train_qa(&mut self, train: &[Prepared], val: Option<&[Prepared]>, opts: &TrainOptions) -> Result<TrainOutcome> {
        if !matches!(self.cfg().mode, Mode::MultiChoice | Mode::OpenEnded) {
            return Err(HarnessError::Config("train_qa needs a QA mode".into()));
        }
        if train.is_empty() {
            return Err(HarnessError::Invalid("empty training set".into()));
        }
        self.ensure_optimizer(train.len())?;
        let mut outcome = TrainOutcome {
            metrics: Vec::new(),
            epochs_to_target: None,
            final_train: None,
            final_val: None,
        };
        if let Some(dir) = &opts.out_dir {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
            if self.state.epoch == 0 && self.cfg().epochs == 0 {
                self.checkpoint().save(&dir.join("last.ckpt"))?;
            }
        }
        let bs = self.cfg().batch_size;
        while self.state.epoch < self.cfg().epochs as u64 {
            if opts.stop_after_epoch.is_some_and(|s| self.state.epoch >= s) {
                break;
            }
            let order = shuffled_order(train.len(), self.state.seed, self.shuffle_index());
            for batch in order.chunks(bs) {
                let mut grads = ParamGrads::zeros_like(&self.params);
                for &i in batch {
                    let s = &train[i];
                    let PreparedTask::Qa { qa, answer, .. } = &s.task else {
                        return Err(HarnessError::Invalid(format!("sample `{}` is not a QA row", s.id)));
                    };
                    let mut g = Graph::with_params(&self.params);
                    let (_, loss) = self.model.qa_loss(&mut g, &s.video, qa, *answer)?;
                    g.backward(loss)?.accumulate_into(&mut grads);
                }
                self.apply(&mut grads, batch.len())?;
            }
            self.state.epoch += 1;

            let train_report = if opts.skip_train_eval {
                None
            } else {
                Some(evaluate(&self.model, &self.params, train)?)
            };
            let val_report = match val {
                Some(v) if !v.is_empty() => Some(evaluate(&self.model, &self.params, v)?),
                _ => None,
            };
            for (split, r) in [("train", &train_report), ("val", &val_report)] {
                if let Some(r) = r {
                    self.metrics.push(EpochMetrics {
                        stage: self.state.stage,
                        epoch: self.state.epoch,
                        split: split.into(),
                        loss: r.loss,
                        acc_all: r.accuracy,
                        per_family: r.per_family.iter().map(|(k, f)| (k.clone(), f.accuracy)).collect(),
                    });
                }
            }
            let selection = val_report.as_ref().or(train_report.as_ref()).map(|r| r.accuracy);
            let improved = selection.is_some_and(|m| m > self.state.best_metric);
            if let Some(m) = selection.filter(|_| improved) {
                self.state.best_metric = m;
                self.state.best_epoch = self.state.epoch;
            }
            if let Some(dir) = &opts.out_dir {
                self.persist(dir, improved)?;
            }
            let reached = train_report
                .as_ref()
                .zip(opts.target_train_acc)
                .is_some_and(|(r, t)| r.accuracy >= t);
            outcome.final_train = train_report;
            outcome.final_val = val_report;
            if reached {
                outcome.epochs_to_target = Some(self.state.epoch);
                break;
            }
        }
        outcome.metrics = self.metrics.clone();
        Ok(outcome)
    }

    fn persist(&self, dir: &Path, improved: bool) -> Result<()> {
        let ck = self.checkpoint();
        ck.save(&dir.join("last.ckpt"))?;
        if improved {
            ck.save(&dir.join("best.ckpt"))?;
        }
        let path = dir.join("metrics.csv");
        fs::write(&path, metrics_csv(&self.metrics)).map_err(io_err(&path))
    }

    /// One contrastive + MLM update over `batch` (indices into `data`).
    fn pretrain_step(&mut self, data: &[Prepared], descs: &[&[usize]], batch: &[usize], step: u64) -> Result<PretrainStep> {
        let cfg = self.cfg().clone();
        let streams = SeedStreams::new(self.state.seed);
        let mut neg_rng = streams.stream("negatives", step);
        let mut mlm_rng = streams.stream("mlm", step);
        let mut used: BTreeMap<usize, usize> = BTreeMap::new();
        let mut negatives = Vec::with_capacity(batch.len());
        let mut corrupted: Vec<MlmTarget> = Vec::with_capacity(batch.len());
        for &i in batch {
            let negs = sample_negatives(data.len(), i, cfg.num_negatives, &mut neg_rng)?;
            corrupted.push(corrupt_tokens(descs[i], self.vocab.len(), cfg.mlm_prob, &mut mlm_rng));
            for &j in std::iter::once(&i).chain(&negs) {
                let next = used.len();
                used.entry(j).or_insert(next);
            }
            negatives.push(negs);
        }
        // Local indices in ascending sample order.
        for (slot, v) in used.values_mut().enumerate() {
            *v = slot;
        }
        let descriptions: Vec<Vec<usize>> = used.keys().map(|&j| descs[j].to_vec()).collect();
        let positives: Vec<usize> = batch.iter().map(|i| used[i]).collect();
        let negatives: Vec<Vec<usize>> = negatives.iter().map(|n| n.iter().map(|j| used[j]).collect()).collect();
        let videos: Vec<&AlignedVideo> = batch.iter().map(|&i| &data[i].video).collect();
        let inputs = PretrainInputs {
            videos: &videos,
            descriptions: &descriptions,
            positives: &positives,
            negatives: &negatives,
            corrupted: &corrupted,
        };
        let mut g = Graph::with_params(&self.params);
        let loss = self.model.pretrain_loss(&mut g, &inputs)?;
        let out = PretrainStep {
            total: g.value(loss.total).data()[0],
            contrastive: g.value(loss.contrastive).data()[0],
            mlm: loss.mlm.map_or(0.0, |m| g.value(m).data()[0]),
        };
        let mut grads = g.backward(loss.total)?.to_param_grads(&self.params);
        drop(g);
        self.apply(&mut grads, 1)?;
        Ok(out)
    }

    /// Video-description pretraining; returns the loss of every step.
    pub fn train_pretrain(&mut self, data: &[Prepared], opts: &TrainOptions) -> Result<Vec<PretrainStep>> {
        if self.cfg().mode != Mode::Pretrain {
            return Err(HarnessError::Config("train_pretrain needs mode = \"pretrain\"".into()));
        }
        let descs: Vec<&[usize]> = data
            .iter()
            .map(|s| match &s.task {
                PreparedTask::Description(d) => Ok(d.as_slice()),
                PreparedTask::Qa { .. } => Err(HarnessError::Invalid(format!("sample `{}` has no description", s.id))),
            })
            .collect::<Result<_>>()?;
        if data.len() <= self.cfg().num_negatives {
            return Err(HarnessError::Invalid(format!(
                "{} negatives need more than {} pretraining samples",
                self.cfg().num_negatives,
                data.len()
            )));
        }
        self.ensure_optimizer(data.len())?;
        if let Some(dir) = &opts.out_dir {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        let bs = self.cfg().batch_size;
        let mut steps = Vec::new();
        while self.state.epoch < self.cfg().epochs as u64 {
            if opts.stop_after_epoch.is_some_and(|s| self.state.epoch >= s) {
                break;
            }
            let order = shuffled_order(data.len(), self.state.seed, self.shuffle_index());
            let mut epoch_steps = Vec::new();
            for batch in order.chunks(bs) {
                let step = self.optimizer.as_ref().map_or(0, |o| o.step);
                epoch_steps.push(self.pretrain_step(data, &descs, batch, step)?);
            }
            self.state.epoch += 1;
            let n = epoch_steps.len() as f64;
            let mean = |f: fn(&PretrainStep) -> f64| epoch_steps.iter().map(f).sum::<f64>() / n;
            let contrastive = mean(|s| s.contrastive);
            self.metrics.push(EpochMetrics {
                stage: self.state.stage,
                epoch: self.state.epoch,
                split: "train".into(),
                loss: mean(|s| s.total),
                acc_all: f64::NAN,
                per_family: BTreeMap::from([
                    ("contrastive".to_string(), contrastive),
                    ("mlm".to_string(), mean(|s| s.mlm)),
                ]),
            });
            let improved = -contrastive > self.state.best_metric;
            if improved {
                self.state.best_metric = -contrastive;
                self.state.best_epoch = self.state.epoch;
            }
            if let Some(dir) = &opts.out_dir {
                self.persist(dir, improved)?;
            }
            steps.extend(epoch_steps);
        }
        Ok(steps)
    }
}

/// Mean contrastive loss over all samples with negatives drawn from a fixed
/// evaluation stream; no updates.
pub fn pretrain_eval_loss(model: &Vgt, params: &ParamStore, data: &[Prepared], seed: u64) -> Result<f64> {
    let cfg = RunConfig {
        mlm_weight: 0.0,
        ..model.cfg.clone()
    };
    let model = Vgt {
        cfg,
        ..model.clone()
    };
    let descs: Vec<Vec<usize>> = data
        .iter()
        .map(|s| match &s.task {
            PreparedTask::Description(d) => Ok(d.clone()),
            PreparedTask::Qa { .. } => Err(HarnessError::Invalid(format!("sample `{}` has no description", s.id))),
        })
        .collect::<Result<_>>()?;
    let mut rng = SeedStreams::new(seed).stream("eval-negatives", 0);
    let mut total = 0.0;
    for (i, s) in data.iter().enumerate() {
        let negs = sample_negatives(data.len(), i, model.cfg.num_negatives, &mut rng)?;
        let videos = [&s.video];
        let empty = MlmTarget {
            tokens: descs[i].clone(),
            positions: Vec::new(),
            originals: Vec::new(),
        };
        let inputs = PretrainInputs {
            videos: &videos,
            descriptions: &descs,
            positives: &[i],
            negatives: std::slice::from_ref(&negs),
            corrupted: std::slice::from_ref(&empty),
        };
        let mut g = Graph::with_params(params);
        let loss = model.pretrain_loss(&mut g, &inputs)?;
        total += g.value(loss.contrastive).data()[0];
    }
    Ok(total / data.len() as f64)
}

fn check_layout(expected: &ParamStore, got: &ParamStore) -> Result<()> {
    if expected.len() != got.len() {
        return Err(HarnessError::Checkpoint(format!(
            "checkpoint has {} tensors, configuration expects {}",
            got.len(),
            expected.len()
        )));
    }
    for ((a, ta), (b, tb)) in expected.iter().zip(got.iter()) {
        if a != b || ta.shape() != tb.shape() {
            return Err(HarnessError::Checkpoint(format!(
                "tensor `{b}` {:?} does not match configuration (`{a}` {:?})",
                tb.shape(),
                ta.shape()
            )));
        }
    }
    Ok(())
}

/// Checks that a checkpoint matches the configuration it claims.
pub fn check_checkpoint(ck: &Checkpoint) -> Result<()> {
    let (_, fresh) = Vgt::build(&ck.config, ck.vocab.len())?;
    check_layout(&fresh, &ck.params)
}

/// Parameter counts per module and in total.
pub fn report_params(params: &ParamStore) -> String {
    let (parts, total) = param_counts(params);
    let mut s = String::from("module,params\n");
    for (m, c) in parts {
        let _ = writeln!(s, "{m},{c}");
    }
    let _ = writeln!(s, "total,{total}");
    s
}
