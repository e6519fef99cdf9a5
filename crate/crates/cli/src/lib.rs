//! Command-line front end: curve tables, model files, configuration and
//! the subcommands of the `rfflr` binary.

pub mod commands;
pub mod curves_csv;
pub mod document;
pub mod error;
pub mod options;

use std::io::Write;

pub use document::ModelDocument;
pub use error::{CliError, Result};
pub use options::{Cli, Command, ConfigFile};

/// Run one parsed invocation, writing human-readable output to `out`.
pub fn run(cli: Cli, out: &mut (dyn Write + Send)) -> Result<()> {
    let file = match &cli.config {
        Some(path) => ConfigFile::load(path)?,
        None => ConfigFile::default(),
    };
    let threads = options::resolve_threads(cli.threads, &file)?;
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        if n == 0 {
            return Err(CliError::input("thread count must be at least 1"));
        }
        builder = builder.num_threads(n);
    }
    let pool = builder.build().map_err(|e| CliError::Failed(e.to_string()))?;
    let seed = file.seed;
    pool.install(|| match cli.command {
        Command::Simulate(o) => commands::cmd_simulate(&o.overlay(&file.simulate), seed, out),
        Command::Fit(o) => commands::cmd_fit(&o.overlay(&file.fit), seed, out),
        Command::Detect(o) => commands::cmd_detect(&o.overlay(&file.detect), seed, out),
        Command::Benchmark(o) => commands::cmd_benchmark(&o.overlay(&file.benchmark), seed, out),
        Command::Predict(o) => commands::cmd_predict(&o.overlay(&file.predict), out),
        Command::Resample(o) => commands::cmd_resample(&o.overlay(&file.resample), out),
    })
}
