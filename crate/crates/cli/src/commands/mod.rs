pub mod analyze;
pub mod bench;
pub mod eval;
pub mod gen;
pub mod train;
pub mod verify;

use std::path::{Path, PathBuf};

use crate::error::{CliError, CliResult};

/// A dataset argument may be the split file itself or the directory
/// holding the split written by `gen`.
pub fn dataset_path(arg: &Path, split: &str) -> CliResult<PathBuf> {
    if arg.is_dir() {
        return Ok(arg.join(format!("{split}.tsv")));
    }
    if arg.is_file() {
        return Ok(arg.to_path_buf());
    }
    Err(CliError::Usage(format!(
        "dataset {} not found",
        arg.display()
    )))
}
