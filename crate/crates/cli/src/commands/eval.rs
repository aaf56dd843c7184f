use std::fs;
use std::path::PathBuf;

use clap::Args;
use phsa_core::io::{read_dataset, write_confusion};
use phsa_core::trainer::evaluate;

use crate::checkpoint;
use crate::commands::dataset_path;
use crate::config::resolve_out_dir;
use crate::error::CliResult;

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset file, or the directory written by `gen` (uses dev.tsv)
    #[arg(long)]
    pub data: PathBuf,
    /// Write confusion.csv here as well
    #[arg(long)]
    pub out: Option<String>,
}

pub fn run(args: &EvalArgs) -> CliResult<()> {
    let ckpt = checkpoint::load(&args.checkpoint)?;
    let data = read_dataset::<f32>(&dataset_path(&args.data, "dev")?)?;
    let report = evaluate(&ckpt.config.classifier_config(), &ckpt.params, &data)?;
    println!(
        "checkpoint_epoch={} utterances={} frames={} accuracy={:.4}",
        ckpt.step,
        data.len(),
        report.frames,
        report.accuracy
    );
    if let Some(out) = &args.out {
        let out = resolve_out_dir(out);
        fs::create_dir_all(&out)?;
        let path = out.join("confusion.csv");
        write_confusion(&path, &report.confusion)?;
        println!("confusion: {}", path.display());
    }
    Ok(())
}
