use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use upo_core::pipeline::{self, PipelineConfig, Stage, StageAction};
use upo_core::systems::{builtin, builtin_observable, observable_to_text, BUILTIN_OBSERVABLES, BUILTIN_SYSTEMS};

/// Worker-thread count for the parallel stages.
const WORKERS_ENV: &str = "UPO_WORKERS";

#[derive(Parser)]
#[command(name = "upo", version, about = "Find extremal unstable periodic orbits of polynomial ODEs")]
struct Cli {
    /// More log output (repeat for debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run pipeline stages, skipping those already done.
    Run {
        #[command(flatten)]
        config: ConfigArgs,
        /// Comma-separated subset of bound,minimize,hunt,continue.
        #[arg(long, value_delimiter = ',', default_value = "bound,minimize,hunt,continue")]
        stages: Vec<String>,
    },
    /// Summarise the state of an output directory.
    Report { output_dir: PathBuf },
    /// Write the bound relaxation in SDPA sparse format for an external solver.
    ExportSdp {
        #[command(flatten)]
        config: ConfigArgs,
        /// Extra copy of the exported file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Import an external SDP solution and finish the bound stage.
    ImportSdpSolution { output_dir: PathBuf, solution: PathBuf },
    /// Print a builtin system or observable in the text file format.
    EmitSystem {
        name: String,
        #[arg(long)]
        forcing: Option<f64>,
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
}

/// A config file plus per-field overrides; flags win over the file.
#[derive(Args, Default)]
struct ConfigArgs {
    /// Flat `key = value` config file.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Builtin system name or system file.
    #[arg(long)]
    system: Option<String>,
    #[arg(long)]
    forcing: Option<f64>,
    /// Builtin observable name or observable file.
    #[arg(long)]
    observable: Option<String>,
    #[arg(long = "degV", alias = "deg-v")]
    deg_v: Option<u32>,
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long = "k-initial")]
    k_initial: Option<f64>,
    #[arg(long = "t-min")]
    t_min: Option<f64>,
    #[arg(long = "t-max")]
    t_max: Option<f64>,
    /// Orbit discretisation points (0 = from the period).
    #[arg(short = 'N', long = "points")]
    n_points: Option<usize>,
    /// embedded or external.
    #[arg(long)]
    solver: Option<String>,
    /// Number of multistart points.
    #[arg(long)]
    seeds: Option<usize>,
    #[arg(long = "rng-seed")]
    rng_seed: Option<u64>,
    #[arg(short, long = "output-dir")]
    output_dir: Option<PathBuf>,
    /// lo_1,…,lo_n,hi_1,…,hi_n
    #[arg(long = "box", allow_hyphen_values = true)]
    start_box: Option<String>,
    #[arg(long)]
    span: Option<f64>,
    #[arg(long)]
    skip: Option<f64>,
    #[arg(long)]
    halvings: Option<usize>,
    #[arg(long = "hunt-attempts")]
    hunt_attempts: Option<usize>,
    #[arg(long = "max-block")]
    max_block: Option<usize>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<PipelineConfig> {
        let mut text = match &self.config {
            Some(p) => std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
            None => String::new(),
        };
        text.push('\n');
        let mut put = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                let _ = writeln!(text, "{k} = {v}");
            }
        };
        put("system", self.system.clone());
        put("forcing", self.forcing.map(|v| v.to_string()));
        put("observable", self.observable.clone());
        put("degV", self.deg_v.map(|v| v.to_string()));
        put("eps", self.eps.map(|v| format!("{v:e}")));
        put("k_initial", self.k_initial.map(|v| v.to_string()));
        put("t_min", self.t_min.map(|v| v.to_string()));
        put("t_max", self.t_max.map(|v| v.to_string()));
        put("N", self.n_points.map(|v| v.to_string()));
        put("solver", self.solver.clone());
        put("seeds", self.seeds.map(|v| v.to_string()));
        put("rng_seed", self.rng_seed.map(|v| v.to_string()));
        put("output_dir", self.output_dir.as_ref().map(|p| p.display().to_string()));
        put("box", self.start_box.clone());
        put("span", self.span.map(|v| v.to_string()));
        put("skip", self.skip.map(|v| v.to_string()));
        put("halvings", self.halvings.map(|v| v.to_string()));
        put("hunt_attempts", self.hunt_attempts.map(|v| v.to_string()));
        put("max_block", self.max_block.map(|v| v.to_string()));
        Ok(PipelineConfig::parse(&text)?)
    }
}

fn init_workers() -> Result<()> {
    if let Ok(v) = std::env::var(WORKERS_ENV) {
        let n: usize = v.parse().with_context(|| format!("{WORKERS_ENV}={v:?} is not a count"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn emit(name: &str, forcing: Option<f64>) -> Result<String> {
    if BUILTIN_SYSTEMS.contains(&name) {
        Ok(builtin(name, forcing)?.to_text())
    } else if BUILTIN_OBSERVABLES.contains(&name) {
        Ok(observable_to_text(&builtin_observable(name, forcing)?))
    } else {
        bail!(
            "unknown builtin {name:?}; systems: {}; observables: {}",
            BUILTIN_SYSTEMS.join(", "),
            BUILTIN_OBSERVABLES.join(", ")
        )
    }
}

fn write_or_print(text: &str, out: Option<&Path>) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    init_workers()?;

    match cli.command {
        Command::Run { config, stages } => {
            let cfg = config.resolve()?;
            let stages: Vec<Stage> = stages.iter().map(|s| Stage::parse(s.trim())).collect::<Result<_, _>>()?;
            let outcome = pipeline::run(&cfg, &stages)
                .with_context(|| format!("see {}", cfg.output_dir.join(pipeline::FAILURE).display()))?;
            for (s, action) in &outcome.stages {
                let what = match action {
                    StageAction::Ran => "done",
                    StageAction::Skipped => "already done",
                    StageAction::Awaiting => "exported; waiting for import-sdp-solution",
                };
                println!("{:<9} {what}", s.name());
            }
            if outcome.action(Stage::Bound) == Some(StageAction::Awaiting) {
                println!(
                    "solve {} externally, then run: upo import-sdp-solution {} <solution>",
                    cfg.output_dir.join(pipeline::RELAXATION).display(),
                    cfg.output_dir.display()
                );
            }
        }
        Command::Report { output_dir } => print!("{}", pipeline::report(&output_dir)?),
        Command::ExportSdp { config, out } => {
            let cfg = config.resolve()?;
            let path = pipeline::export_sdp(&cfg, out.as_deref())?;
            println!("{}", path.display());
        }
        Command::ImportSdpSolution { output_dir, solution } => {
            let cert = pipeline::import_sdp_solution(&output_dir, &solution)?;
            println!("U = {:.10} ({})", cert.bound, cert.status.as_str());
        }
        Command::EmitSystem { name, forcing, out } => write_or_print(&emit(&name, forcing)?, out.as_deref())?,
    }
    Ok(())
}
