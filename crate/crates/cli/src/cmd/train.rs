use std::fs;
use std::path::{Path, PathBuf};

use spanset_core::corpus::{self, CorpusSpec};
use spanset_core::model::GroundingModel;
use spanset_core::train::{analyze_phases, StepLog, Trainer};
use spanset_core::{Error, Result};

use crate::{config, manifest};

#[derive(clap::Args)]
pub struct Args {
    /// Corpus file produced by `gen`
    pub corpus: PathBuf,
    /// TOML file with [model] and [train] sections
    #[arg(short, long)]
    pub config: Option<PathBuf>,
    /// Output directory: checkpoint.ckpt, curves.csv, phase.json, manifest.json
    #[arg(short, long)]
    pub out: PathBuf,
    /// Continue from a checkpoint; hyperparameters come from it, only
    /// --steps and --checkpoint-every may change
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Total optimization steps
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Correspondence loss weight
    #[arg(long)]
    pub lambda_sg: Option<f64>,
    /// Span endpoint loss weight
    #[arg(long)]
    pub lambda_l1: Option<f64>,
    /// Span overlap loss weight
    #[arg(long)]
    pub lambda_iou: Option<f64>,
    /// Candidate spans decoded per query
    #[arg(long)]
    pub proposals_per_query: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Save checkpoint.ckpt every N steps (0: only at the end)
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    /// Slide the learning rate down linearly instead of the step drop
    #[arg(long)]
    pub linear_decay: bool,
}

pub fn run(args: Args) -> Result<()> {
    let (spec, samples) = corpus::load(&args.corpus)?;
    fs::create_dir_all(&args.out)?;

    let mut trainer = if let Some(ckpt) = &args.resume {
        reject_fixed_overrides(&args)?;
        let mut t = Trainer::resume(ckpt, samples)?;
        if let Some(steps) = args.steps {
            t.set_total_steps(steps)?;
        }
        t
    } else {
        let file = config::load(args.config.as_deref())?;
        let mut mc = file.model.unwrap_or_default();
        // The corpus fixes the input geometry; tunables stay configurable.
        mc.d_in = spec.d_in;
        mc.frame_count = spec.frame_count;
        if let Some(p) = args.proposals_per_query {
            mc.proposals_per_query = p;
        }

        let mut tc = file.train.unwrap_or_default();
        if let Some(s) = config::env_seed()? {
            tc.seed = s;
        }
        if let Some(s) = args.seed {
            tc.seed = s;
        }
        if let Some(v) = args.steps {
            tc.total_steps = v;
        }
        if let Some(v) = args.batch_size {
            tc.batch_size = v;
        }
        if let Some(v) = args.lr {
            tc.lr = v;
        }
        if let Some(v) = args.lambda_sg {
            tc.weights.set_guidance = v;
        }
        if let Some(v) = args.lambda_l1 {
            tc.weights.l1 = v;
        }
        if let Some(v) = args.lambda_iou {
            tc.weights.giou = v;
        }
        if args.linear_decay {
            tc.lr_linear_decay = true;
        }

        let mut model = GroundingModel::new(mc)?;
        model.init(tc.seed);
        Trainer::new(model, samples, tc)?
    };
    if let Some(every) = args.checkpoint_every {
        trainer.set_checkpoint_every(every);
    }

    train_loop(&mut trainer, &args, spec)
}

/// Everything except the step budget and checkpoint cadence is fixed by the
/// checkpoint on resume.
fn reject_fixed_overrides(args: &Args) -> Result<()> {
    let fixed: [(&str, bool); 8] = [
        ("--config", args.config.is_some()),
        ("--batch-size", args.batch_size.is_some()),
        ("--lr", args.lr.is_some()),
        ("--lambda-sg", args.lambda_sg.is_some()),
        ("--lambda-l1", args.lambda_l1.is_some()),
        ("--lambda-iou", args.lambda_iou.is_some()),
        ("--proposals-per-query", args.proposals_per_query.is_some()),
        ("--seed", args.seed.is_some()),
    ];
    for (name, given) in fixed {
        if given {
            return Err(Error::Config(format!("{name} cannot be changed on --resume")));
        }
    }
    if args.linear_decay {
        return Err(Error::Config("--linear-decay cannot be changed on --resume".into()));
    }
    Ok(())
}

fn train_loop(trainer: &mut Trainer, args: &Args, spec: CorpusSpec) -> Result<()> {
    let out = &args.out;
    let ckpt_path = out.join("checkpoint.ckpt");
    let curves_path = out.join("curves.csv");
    let total = trainer.config().total_steps;
    let every = trainer.config().checkpoint_every;
    let progress = ((total - trainer.next_step()) / 10).max(1);

    let flush_curves = |rows: &[String]| -> Result<()> {
        fs::write(&curves_path, rows.join("\n") + "\n")?;
        Ok(())
    };

    let mut rows = vec![StepLog::csv_header().to_string()];
    let mut logs = Vec::with_capacity(total - trainer.next_step());
    while !trainer.is_done() {
        match trainer.step() {
            Ok(log) => {
                let done = log.step + 1;
                if done % progress == 0 || done == total {
                    println!(
                        "step {done}/{total}  total {:.4}  sg {:.4}  lr {:.2e}",
                        log.total, log.set_guidance, log.lr
                    );
                }
                rows.push(log.csv_row());
                if every > 0 && done % every == 0 {
                    trainer.save_checkpoint(&ckpt_path)?;
                }
                logs.push(log);
            }
            Err(e) => {
                // Leave the curve prefix behind for post-mortems.
                flush_curves(&rows)?;
                return Err(e);
            }
        }
    }
    trainer.save_checkpoint(&ckpt_path)?;
    flush_curves(&rows)?;

    let phase = analyze_phases(&logs);
    let phase_path = out.join("phase.json");
    let phase_json = serde_json::to_string_pretty(&phase)
        .map_err(|e| Error::Config(format!("encoding phase report: {e}")))?;
    fs::write(&phase_path, phase_json + "\n")?;

    let mut b = manifest::Builder::new("train", trainer.config().seed)
        .corpus(spec)
        .model(trainer.model().config().clone())
        .train(trainer.config().clone())
        .input(&args.corpus)?;
    if let Some(p) = &args.config {
        b = b.input(p)?;
    }
    if let Some(p) = &args.resume {
        b = b.input(p)?;
    }
    let m = b.finish(&[&ckpt_path, &curves_path, &phase_path]);
    manifest::write(&out.join("manifest.json"), &m)?;

    report(trainer, &logs, phase.as_ref(), out);
    Ok(())
}

fn report(
    trainer: &Trainer,
    logs: &[StepLog],
    phase: Option<&spanset_core::train::PhaseReport>,
    out: &Path,
) {
    if let Some(last) = logs.last() {
        println!(
            "finished at step {} (total {:.4}, {} skipped); artifacts in {}",
            last.step + 1,
            last.total,
            trainer.skipped_steps,
            out.display()
        );
    }
    if let Some(p) = phase {
        println!(
            "phase transition: guidance fell {:.0}% around step {}, span terms {}",
            p.sg_drop_fraction * 100.0,
            p.sg_drop_step,
            if p.span_rebound {
                format!("rose transiently (+{:.4})", p.span_rebound_delta)
            } else {
                "did not rebound".to_string()
            }
        );
    }
}
