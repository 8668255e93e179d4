use std::fs;
use std::path::PathBuf;

use spanset_core::corpus;
use spanset_core::metrics::{MetricAccumulator, MetricReport};
use spanset_core::train::load_model;
use spanset_core::{Error, Result};

use crate::manifest;

#[derive(clap::Args)]
pub struct Args {
    /// Checkpoint produced by `train`
    pub checkpoint: PathBuf,
    /// Corpus file to score against
    pub corpus: PathBuf,
    /// Write the metric CSV here instead of stdout
    #[arg(short, long)]
    pub out: Option<PathBuf>,
}

pub fn run(args: Args) -> Result<()> {
    let (meta, model) = load_model(&args.checkpoint)?;
    let (spec, samples) = corpus::load(&args.corpus)?;
    if samples.is_empty() {
        return Err(Error::Corpus("corpus has no samples".into()));
    }
    let mc = model.config();
    if spec.frame_count != mc.frame_count || spec.d_in != mc.d_in {
        return Err(Error::Checkpoint(format!(
            "checkpoint expects {}x{} features, corpus provides {}x{}",
            mc.frame_count, mc.d_in, spec.frame_count, spec.d_in
        )));
    }
    if spec.k_max > mc.max_queries {
        return Err(Error::Checkpoint(format!(
            "corpus has up to {} queries per sample, checkpoint supports {}",
            spec.k_max, mc.max_queries
        )));
    }

    let mut acc = MetricAccumulator::new();
    for s in &samples {
        let out = model.infer(&s.frames, &s.queries, s.k())?;
        acc.add_output(&out, &s.spans)?;
    }
    let report = acc.report();
    let csv = format!("{}\n{}\n", MetricReport::csv_header(), report.csv_row());

    eprintln!(
        "checkpoint at step {} on {} samples",
        meta.next_step,
        samples.len()
    );
    match &args.out {
        Some(path) => {
            fs::write(path, &csv)?;
            let m = manifest::Builder::new("eval", spec.seed)
                .corpus(spec)
                .model(mc.clone())
                .input(&args.checkpoint)?
                .input(&args.corpus)?
                .finish(&[path]);
            manifest::write(&manifest::sidecar(path), &m)?;
            println!("{report}");
        }
        None => print!("{csv}"),
    }
    Ok(())
}
