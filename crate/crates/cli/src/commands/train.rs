use std::fs;
use std::path::PathBuf;

use clap::Args;
use phsa_core::io::{read_dataset, write_history};
use phsa_core::trainer::train_with_callback;

use crate::checkpoint;
use crate::commands::dataset_path;
use crate::config::{resolve_out_dir, Overrides};
use crate::error::CliResult;

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub overrides: Overrides,
    /// Dataset file, or the directory written by `gen` (uses train.tsv)
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for checkpoint/history (default: config out_dir)
    #[arg(long)]
    pub out: Option<String>,
}

pub fn run(args: &TrainArgs) -> CliResult<()> {
    let mut run = args.overrides.resolve()?;
    if let Some(out) = &args.out {
        run.out_dir = out.clone();
    }
    let out = resolve_out_dir(&run.out_dir);
    fs::create_dir_all(&out)?;

    let data = read_dataset::<f32>(&dataset_path(&args.data, "train")?)?;
    let model_cfg = run.classifier_config();
    run.save(&out.join("run_config.toml"))?;

    let ckpt_path = out.join("checkpoint.bin");
    let run_for_ckpt = run.clone();
    let (params, history) = train_with_callback(&run.train, &model_cfg, &data, |epoch, params| {
        checkpoint::save(&ckpt_path, &run_for_ckpt, epoch as u64, params)
            .map_err(|e| phsa_core::Error::Io(e.to_string()))
    })?;
    checkpoint::save(&ckpt_path, &run, run.train.epochs as u64, &params)?;
    write_history(&out.join("history.tsv"), &history)?;

    let first = history.first().expect("history has the epoch-0 row");
    let last = history.last().expect("history is non-empty");
    println!(
        "trained {} epochs on {} utterances: loss {} -> {}, accuracy {:.4} -> {:.4}",
        run.train.epochs,
        data.len(),
        first.loss,
        last.loss,
        first.accuracy,
        last.accuracy
    );
    println!("checkpoint: {}", ckpt_path.display());
    Ok(())
}
