use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use edgefilter::experiment::{
    cmd_ablate, cmd_analyze, cmd_control_conv, cmd_probe, cmd_train, cmd_tta, cmd_type_ablation, ExperimentConfig,
};
use edgefilter::Result;

/// Edge-filter experiments: training, test-time adaptation, ablations and analysis.
#[derive(Debug, Parser)]
#[command(name = "edgefilter", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Experiment config (TOML). Missing keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Use seeds 0..N.
    #[arg(long, conflicts_with = "seed_list")]
    seeds: Option<u64>,
    /// Explicit comma-separated seeds.
    #[arg(long, value_delimiter = ',')]
    seed_list: Option<Vec<u64>>,
    /// Output directory (overrides `output_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Parallel runs.
    #[arg(long)]
    jobs: Option<usize>,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(n) = self.seeds {
            cfg.seeds = (0..n).collect();
        }
        if let Some(list) = &self.seed_list {
            cfg.seeds = list.clone();
        }
        if let Some(out) = &self.out {
            cfg.output_dir = out.clone();
        }
        if let Some(j) = self.jobs {
            cfg.jobs = j;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train one model per seed; writes checkpoints, metrics and densities.
    Train(Common),
    /// Source/Direct/NORM/TENT evaluation of saved checkpoints.
    Tta {
        #[command(flatten)]
        common: Common,
        /// Glob selecting checkpoint files.
        #[arg(long, default_value = "runs/*/checkpoint.defc")]
        checkpoints: String,
    },
    /// Filter position × kernel size grid.
    Ablate(Common),
    /// Baseline, edge filter with each LPF kind, and the direct mean LPF.
    TypeAblation(Common),
    /// No filter vs trainable depthwise conv vs edge filter.
    ControlConv(Common),
    /// Linear probes of a pretrained checkpoint on the transfer dataset.
    Probe {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Regenerate spectrum, density and statistics tables of finished runs.
    Analyze {
        /// A run directory or an output directory holding runs.
        run_dir: PathBuf,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(c) => {
            for r in cmd_train(&c.load()?)? {
                println!("{}\tval_accuracy={:.4}\t{}", r.run_id, r.val_accuracy, r.dir.display());
            }
        }
        Command::Tta { common, checkpoints } => {
            let cfg = common.load()?;
            let records = cmd_tta(&cfg, &checkpoints)?;
            println!("{} records -> {}", records.len(), cfg.output_dir.join("tta_results.csv").display());
        }
        Command::Ablate(c) => {
            let cfg = c.load()?;
            let report = cmd_ablate(&cfg)?;
            for cell in &report.cells {
                println!("p={} k={}\tgain={:+.4}", cell.position, cell.kernel_size, cell.gain);
            }
            for (p, k) in &report.skipped {
                println!("p={p} k={k}\tskipped (kernel wider than the feature map)");
            }
        }
        Command::TypeAblation(c) => {
            for r in cmd_type_ablation(&c.load()?)? {
                println!("{}\t{}\tdirect={:.4}", r.run_id, r.variant, r.accuracy);
            }
        }
        Command::ControlConv(c) => {
            for r in cmd_control_conv(&c.load()?)? {
                println!("{}\t{}\tparams={}\t{}={:.4}", r.run_id, r.variant, r.parameter_count, r.method, r.accuracy);
            }
        }
        Command::Probe { common, checkpoint } => {
            for r in cmd_probe(&common.load()?, &checkpoint)? {
                println!(
                    "{}\t{}\ttrain={:.4}\tval={:.4}",
                    r.run_id,
                    r.variant.as_str(),
                    r.train_accuracy,
                    r.val_accuracy
                );
            }
        }
        Command::Analyze { run_dir } => {
            let report = cmd_analyze(&run_dir)?;
            println!("analyzed {} runs, {} spectra", report.runs.len(), report.spectra.len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
