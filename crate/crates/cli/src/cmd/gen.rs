use std::fs;
use std::path::PathBuf;

use spanset_core::corpus;
use spanset_core::Result;

use crate::{config, manifest};

#[derive(clap::Args)]
pub struct Args {
    /// TOML file with a [corpus] section; defaults apply when omitted
    pub spec: Option<PathBuf>,
    /// Destination corpus file (a .meta.json sidecar lands next to it)
    #[arg(short, long)]
    pub out: PathBuf,
    /// Override the corpus seed
    #[arg(long)]
    pub seed: Option<u64>,
}

pub fn run(args: Args) -> Result<()> {
    let file = config::load(args.spec.as_deref())?;
    let mut spec = file.corpus.unwrap_or_default();
    if let Some(s) = config::env_seed()? {
        spec.seed = s;
    }
    if let Some(s) = args.seed {
        spec.seed = s;
    }
    spec.validate()?;

    let samples = corpus::generate(&spec)?;
    if let Some(dir) = args.out.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    corpus::save(&args.out, &spec, &samples)?;

    let mut b = manifest::Builder::new("gen", spec.seed).corpus(spec.clone());
    if let Some(p) = &args.spec {
        b = b.input(p)?;
    }
    let sidecar = corpus::sidecar_path(&args.out);
    let m = b.finish(&[&args.out, &sidecar]);
    manifest::write(&manifest::sidecar(&args.out), &m)?;

    let queries: usize = samples.iter().map(|s| s.k()).sum();
    println!(
        "wrote {} samples ({queries} queries, T={}, d={}) to {}",
        samples.len(),
        spec.frame_count,
        spec.d_in,
        args.out.display()
    );
    Ok(())
}
