use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use vgt_core::config::{Ablation, CmPlacement, Mode, RunConfig};
use vgt_core::tensor::operator_gradient_errors;
use vgt_core::Vgt;
use vgt_harness::checkpoint::Checkpoint;
use vgt_harness::config::load_config;
use vgt_harness::dataset::{build_vocab, load_dataset, prepare, write_dataset, Sample};
use vgt_harness::gradcheck;
use vgt_harness::synth::{generate_synthetic, Family, SyntheticSpec};
use vgt_harness::train::{check_checkpoint, evaluate, report_params, TrainOptions, Trainer};

#[derive(Parser)]
#[command(name = "vgt", version, about = "Graph-based video question answering")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration (desk defaults when omitted).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated: dgt, ttrans, ntrans, etrans, frame-feat.
    #[arg(long, value_delimiter = ',')]
    ablate: Vec<Ablation>,
    #[arg(long)]
    cm_placement: Option<CmPlacement>,
    #[arg(long)]
    freeze_text: bool,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => load_config(p)?,
            None => RunConfig::desk(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        cfg.ablate.extend(self.ablate.iter().copied());
        if let Some(p) = self.cm_placement {
            cfg.cm_placement = p;
        }
        cfg.freeze_text |= self.freeze_text;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic `train.jsonl` (and `val.jsonl`) into `--out`.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        num_videos: usize,
        #[arg(long, default_value_t = 0)]
        val_videos: usize,
        /// Comma-separated: attribute, transition, order.
        #[arg(long, value_delimiter = ',', default_value = "attribute,transition,order")]
        families: Vec<Family>,
        #[arg(long, default_value_t = 5)]
        candidates: usize,
        /// Emit description rows for pretraining.
        #[arg(long)]
        descriptions: bool,
    },
    /// Train a QA model.
    Train(TrainArgs),
    /// Video-description pretraining.
    Pretrain(TrainArgs),
    /// Accuracy report of a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Directory for `report.json` and `report.csv`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of every graph operation and of the full
    /// multi-choice model.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Coordinates probed per tensor (all when omitted).
        #[arg(long)]
        max_coords: Option<usize>,
    },
    /// Parameter counts per module.
    ReportParams {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Vocabulary size when counting from a configuration.
        #[arg(long, default_value_t = 1000)]
        vocab_size: usize,
    },
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    val: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Resume from, fine-tune from (pretraining checkpoint), or start the
    /// frozen-text stage from (with `--freeze-text`) this checkpoint.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Stop once training accuracy reaches this value.
    #[arg(long)]
    target_acc: Option<f64>,
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::GenData {
            common,
            out,
            num_videos,
            val_videos,
            families,
            candidates,
            descriptions,
        } => {
            let cfg = common.resolve()?;
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            let mut spec = SyntheticSpec::from_run(&cfg, num_videos + val_videos, families, cfg.seed);
            spec.num_candidates = candidates;
            spec.descriptions = descriptions;
            let mut rows = generate_synthetic(&spec)?;
            let val = rows.split_off(num_videos);
            write_dataset(&out.join("train.jsonl"), &rows)?;
            if !val.is_empty() {
                write_dataset(&out.join("val.jsonl"), &val)?;
            }
            println!("wrote {} training and {} validation rows to {}", rows.len(), val.len(), out.display());
        }
        Command::Train(args) => run_training(args, false)?,
        Command::Pretrain(args) => run_training(args, true)?,
        Command::Eval { checkpoint, data, out } => {
            let ck = Checkpoint::load(&checkpoint)?;
            check_checkpoint(&ck)?;
            let (model, _) = Vgt::build(&ck.config, ck.vocab.len())?;
            let rows = load_dataset(&data)?;
            let prepared = prepare(&rows, &ck.config, &ck.vocab)?;
            let report = evaluate(&model, &ck.params, &prepared)?;
            if let Some(dir) = out {
                fs::create_dir_all(&dir)?;
                fs::write(dir.join("report.json"), report.to_json())?;
                fs::write(dir.join("report.csv"), report.to_csv())?;
            }
            println!("{}", report.to_json());
        }
        Command::Gradcheck { seed, max_coords } => {
            let mut worst: f64 = 0.0;
            for (name, err) in operator_gradient_errors(seed)? {
                println!("{name:<28} {err:.3e}");
                worst = worst.max(err);
            }
            let err = gradcheck::check_model(&gradcheck::tiny_config(seed), max_coords)?;
            println!("{:<28} {err:.3e}", "model");
            if worst.max(err) >= 1e-4 {
                bail!("gradient check failed");
            }
        }
        Command::ReportParams {
            common,
            checkpoint,
            vocab_size,
        } => {
            let params = match checkpoint {
                Some(p) => Checkpoint::load(&p)?.params,
                None => Vgt::build(&common.resolve()?, vocab_size)?.1,
            };
            print!("{}", report_params(&params));
        }
    }
    Ok(())
}

fn load_rows(path: &Path) -> Result<Vec<Sample>> {
    load_dataset(path).with_context(|| format!("loading {}", path.display()))
}

fn run_training(args: TrainArgs, pretraining: bool) -> Result<()> {
    let mut cfg = args.common.resolve()?;
    if pretraining {
        cfg.mode = Mode::Pretrain;
        cfg.validate()?;
    } else if cfg.mode == Mode::Pretrain {
        bail!("use `vgt pretrain` for mode = \"pretrain\"");
    }
    let train_rows = load_rows(&args.data)?;
    let val_rows = args.val.as_deref().map(load_rows).transpose()?;

    let mut trainer = match &args.checkpoint {
        None => Trainer::new(&cfg, build_vocab(&train_rows))?,
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            if args.common.freeze_text && !ck.config.freeze_text {
                Trainer::next_stage(&ck)?
            } else if ck.config.mode != cfg.mode {
                let texts = train_rows.iter().flat_map(Sample::texts);
                Trainer::from_weights(&cfg, &ck, texts)?
            } else {
                Trainer::resume(ck)?
            }
        }
    };
    let cfg = trainer.cfg().clone();
    let train = prepare(&train_rows, &cfg, &trainer.vocab)?;
    let opts = TrainOptions {
        out_dir: Some(args.out.clone()),
        target_train_acc: args.target_acc,
        ..TrainOptions::default()
    };
    if pretraining {
        let steps = trainer.train_pretrain(&train, &opts)?;
        if let (Some(first), Some(last)) = (steps.first(), steps.last()) {
            println!(
                "{} steps; contrastive loss {:.5} -> {:.5}, mlm {:.5} -> {:.5}",
                steps.len(),
                first.contrastive,
                last.contrastive,
                first.mlm,
                last.mlm
            );
        }
    } else {
        let val = val_rows.map(|v| prepare(&v, &cfg, &trainer.vocab)).transpose()?;
        let out = trainer.train_qa(&train, val.as_deref(), &opts)?;
        if let Some(r) = &out.final_train {
            println!("train accuracy {:.4} loss {:.5}", r.accuracy, r.loss);
        }
        if let Some(r) = &out.final_val {
            println!("val accuracy {:.4} loss {:.5}", r.accuracy, r.loss);
        }
    }
    println!("checkpoints and metrics in {}", args.out.display());
    Ok(())
}
