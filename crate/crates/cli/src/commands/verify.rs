use clap::Args;
use phsa_core::verify::{run_verification, VerifyOptions};

use crate::error::{CliError, CliResult};

#[derive(Args, Debug)]
pub struct VerifyArgs {
    /// Random draws per algebraic property
    #[arg(long, default_value_t = 100)]
    pub draws: usize,
    /// Random instances for the PAR oracle comparison
    #[arg(long, default_value_t = 50)]
    pub par_instances: usize,
    #[arg(long)]
    pub seed: Option<u64>,
}

pub fn run(args: &VerifyArgs) -> CliResult<()> {
    let mut opts = VerifyOptions {
        draws: args.draws,
        par_instances: args.par_instances,
        ..VerifyOptions::default()
    };
    if let Some(seed) = args.seed {
        opts.seed = seed;
    }
    let report = run_verification(&opts)?;
    for check in &report.checks {
        let status = if check.passed { "PASS" } else { "FAIL" };
        println!("{status} {}: {}", check.name, check.detail);
    }
    println!("max gradient error: {:.3e}", report.max_grad_error);
    if report.all_passed() {
        println!("all checks passed");
        Ok(())
    } else {
        let failed: Vec<&str> = report
            .checks
            .iter()
            .filter(|c| !c.passed)
            .map(|c| c.name)
            .collect();
        Err(CliError::Verification(failed.join(", ")))
    }
}
