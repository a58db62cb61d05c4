use std::process::ExitCode;

use clap::Parser;
use mfc::cli::{render, run, Cli};

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.common.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            eprintln!("threads: {e}");
        }
    }
    let (cfg, task) = match cli.resolve() {
        Ok(r) => r,
        Err(f) => {
            eprintln!("{f}");
            return ExitCode::from(f.code());
        }
    };
    let (code, summary) = run(&cfg, task, cli.common.force);
    print!("{}", render(&summary, &cfg.out));
    ExitCode::from(code)
}
