use std::fs;

use clap::Args;
use phsa_core::io::write_dataset;
use phsa_core::phoneme::generate_dataset;

use crate::config::{resolve_out_dir, Overrides};
use crate::error::{CliError, CliResult};

#[derive(Args, Debug)]
pub struct GenArgs {
    #[command(flatten)]
    pub overrides: Overrides,
    /// Output directory (default: the config's out_dir, under PHSA_OUT_ROOT)
    #[arg(long)]
    pub out: Option<String>,
    /// Overwrite existing dataset files
    #[arg(long)]
    pub force: bool,
}

pub fn run(args: &GenArgs) -> CliResult<()> {
    let mut run = args.overrides.resolve()?;
    if let Some(out) = &args.out {
        run.out_dir = out.clone();
    }
    let out = resolve_out_dir(&run.out_dir);
    fs::create_dir_all(&out)?;

    let train_path = out.join("train.tsv");
    let dev_path = out.join("dev.tsv");
    if !args.force && (train_path.exists() || dev_path.exists()) {
        return Err(CliError::Usage(format!(
            "dataset already exists in {}; pass --force to overwrite",
            out.display()
        )));
    }

    // one stream for both splits: train first, then the held-out tail
    let mut ds_cfg = run.dataset.clone();
    ds_cfg.n_utterances = run.dataset.n_utterances + run.dev_utterances;
    let data = generate_dataset::<f32>(&ds_cfg)?;
    let (train_split, dev_split) = data.split_at(run.dataset.n_utterances);

    write_dataset(&train_path, train_split)?;
    write_dataset(&dev_path, dev_split)?;
    run.save(&out.join("run_config.toml"))?;

    println!(
        "wrote {} train + {} dev utterances ({} classes, d_in {}) to {}",
        train_split.len(),
        dev_split.len(),
        run.dataset.inventory.num_classes,
        run.dataset.d_in,
        out.display()
    );
    Ok(())
}
