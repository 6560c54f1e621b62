use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use contistream::commands;
use contistream::config::{parse_seed_list, Loaded, Overrides};

#[derive(Parser)]
#[command(
    name = "contistream",
    version,
    about = "Class-incremental continual learning experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated seeds; overrides `seeds` and CONTISTREAM_SEED.
    #[arg(long)]
    seeds: Option<String>,
    /// Worker threads for independent runs.
    #[arg(long, default_value_t = 1)]
    parallel: usize,
}

impl Common {
    fn load(&self) -> Result<Loaded> {
        let seeds = self.seeds.as_deref().map(parse_seed_list).transpose()?;
        let overrides = Overrides {
            out: self.out.clone(),
            seeds,
        };
        Ok(Loaded::from_file(&self.config, &overrides)?)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train the configured strategy once per seed.
    Run(Common),
    /// Select lambda (md) or alpha (ld) on the dev split of the first seed.
    Grid(Common),
    /// Summarize every run in a results directory.
    Report {
        #[arg(long)]
        out: PathBuf,
    },
    /// Time head-only forward passes for incremental and cascaded heads.
    Timing {
        #[arg(long, default_value_t = 20)]
        tasks: usize,
        #[arg(long, default_value_t = 100)]
        repeats: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Count the extra floats of the configured memory and head.
    Overhead {
        #[arg(long)]
        config: PathBuf,
    },
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run(common) => {
            let loaded = common.load()?;
            let docs = commands::cmd_run(&loaded, common.parallel)?;
            for d in &docs {
                println!(
                    "{}\tacc={:.4}\tforgetting={:.4}",
                    d.run_id, d.metrics.acc, d.metrics.forgetting
                );
            }
            println!("wrote {}", loaded.config.output_dir.display());
        }
        Command::Grid(common) => {
            let loaded = common.load()?;
            let g = commands::cmd_grid(&loaded, common.parallel)?;
            for p in &g.points {
                let mark = if p.selected { " *" } else { "" };
                println!(
                    "{}={}\tdev_acc={:.4}\ttest_acc={:.4}{mark}",
                    g.parameter, p.value, p.dev_acc, p.test_acc
                );
            }
            println!("best {}={} (seed {})", g.parameter, g.best, g.seed);
        }
        Command::Report { out } => {
            let rows = commands::cmd_report(&out)?;
            print!("{}", commands::render_report(&rows));
        }
        Command::Timing {
            tasks,
            repeats,
            out,
        } => {
            let rows = commands::cmd_timing(tasks, repeats, out.as_deref())?;
            print!("{}", commands::timing_csv(&rows)?);
        }
        Command::Overhead { config } => {
            let loaded = Loaded::from_file(&config, &Overrides::default())?;
            print!(
                "{}",
                commands::overhead_csv(&commands::cmd_overhead(&loaded)?)?
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(contistream::exit_code(&e) as u8)
        }
    }
}
