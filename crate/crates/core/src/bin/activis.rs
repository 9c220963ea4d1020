use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use active_vision::harness::{
    emit_plots, load_grid, run_ablation, run_agent_episode, run_suite, write_episode_outputs,
    write_metrics_csv, write_summary_csv, AblationGrid, AgentKind, Execution, HarnessError,
    RunConfig,
};

#[derive(Parser)]
#[command(name = "activis", version, about = "Active tracking experiments")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Scenario file or bundled scenario name; overrides the config.
    #[arg(long)]
    scenario: Option<String>,
    #[arg(long)]
    max_steps: Option<usize>,
    /// Output directory; overrides ACTIVIS_OUT_DIR and the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// One episode with one agent.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        agent: Option<AgentKind>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Dump every observed frame as PGM.
        #[arg(long)]
        frames: bool,
    },
    /// Several agents over a seed range on one scenario.
    Suite {
        #[command(flatten)]
        common: Common,
        /// Comma-separated agents.
        #[arg(long, value_delimiter = ',', default_value = "ours,random,oracle,template")]
        agents: Vec<AgentKind>,
        /// `a..b` (inclusive), `a..=b`, or a comma list.
        #[arg(long, default_value = "0..9", value_parser = parse_seeds)]
        seeds: SeedList,
        #[arg(long)]
        sequential: bool,
        /// Keep every episode's JSONL log.
        #[arg(long)]
        logs: bool,
    },
    /// The learned agent under a grid of config overrides.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Ablation grid (TOML); without it only the full model runs.
        #[arg(long)]
        grid: Option<PathBuf>,
        #[arg(long, default_value = "0..9", value_parser = parse_seeds)]
        seeds: SeedList,
        #[arg(long)]
        sequential: bool,
    },
    /// SVG charts from a metrics, summary or trace CSV.
    Plot {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// List the bundled scenarios.
    Scenarios,
}

#[derive(Clone, Debug)]
struct SeedList(Vec<u64>);

fn parse_seeds(s: &str) -> Result<SeedList, String> {
    parse_seed_list(s).map(SeedList)
}

fn parse_seed_list(s: &str) -> Result<Vec<u64>, String> {
    let num = |t: &str| t.trim().parse::<u64>().map_err(|e| format!("bad seed `{t}`: {e}"));
    if let Some((a, b)) = s.split_once("..") {
        let (a, b) = (num(a)?, num(b.strip_prefix('=').unwrap_or(b))?);
        if b < a {
            return Err(format!("empty seed range `{s}`"));
        }
        return Ok((a..=b).collect());
    }
    s.split(',').map(num).collect()
}

fn resolve(common: &Common) -> Result<(RunConfig, PathBuf), HarnessError> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = &common.scenario {
        cfg.scenario = s.clone();
    }
    if let Some(n) = common.max_steps {
        cfg.max_steps = n;
    }
    cfg.validate()?;
    let out = common.out.clone().unwrap_or_else(|| cfg.out_dir());
    std::fs::create_dir_all(&out).map_err(|e| HarnessError::Io {
        path: out.display().to_string(),
        msg: e.to_string(),
    })?;
    Ok((cfg, out))
}

fn exec(sequential: bool) -> Execution {
    if sequential {
        Execution::Sequential
    } else {
        Execution::Parallel
    }
}

fn create(path: &Path) -> Result<std::fs::File, HarnessError> {
    std::fs::File::create(path).map_err(|e| HarnessError::Io {
        path: path.display().to_string(),
        msg: e.to_string(),
    })
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> HarnessError + '_ {
    move |e| HarnessError::Io {
        path: path.display().to_string(),
        msg: e.to_string(),
    }
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    match cli.cmd {
        Command::Run { common, agent, seed, frames } => {
            let (mut cfg, out) = resolve(&common)?;
            if let Some(a) = agent {
                cfg.agent = a;
            }
            cfg.dump_frames |= frames;
            let scenario = cfg.load_scenario()?;
            let (log, metrics) = if cfg.dump_frames {
                use active_vision::harness::{episode_streams, make_agent, run_episode_with, EpisodeSetup};
                let frame_dir = out.join("frames");
                std::fs::create_dir_all(&frame_dir).map_err(io_err(&frame_dir))?;
                let (_, agent_seed) = episode_streams(&scenario, seed);
                let mut a = make_agent(cfg.agent, &cfg, &scenario, agent_seed);
                let setup = EpisodeSetup {
                    cfg: &cfg,
                    scenario: &scenario,
                    seed,
                    agent_kind: cfg.agent.name(),
                    frame_dir: Some(&frame_dir),
                };
                run_episode_with(&setup, a.as_mut())?
            } else {
                run_agent_episode(&cfg, &scenario, cfg.agent, seed)?
            };
            let paths = write_episode_outputs(&cfg, &scenario, seed, &log, &metrics, &out)?;
            println!(
                "{} {} seed {seed}: recall {:.3} precision {:.3} relaxed {:.3} aae {:.2} deg auc {:.3} steps {}",
                scenario.name,
                cfg.agent,
                metrics.recall,
                metrics.precision,
                metrics.precision_relaxed,
                metrics.aae_mean,
                metrics.auc_judd,
                metrics.steps_survived
            );
            for p in paths {
                println!("wrote {}", p.display());
            }
            Ok(())
        }
        Command::Suite { common, agents, seeds, sequential, logs } => {
            let (cfg, out) = resolve(&common)?;
            let scenario = cfg.load_scenario()?;
            let log_dir = logs.then(|| out.join("logs"));
            if let Some(d) = &log_dir {
                std::fs::create_dir_all(d).map_err(io_err(d))?;
            }
            let result = run_suite(&cfg, &scenario, &agents, &seeds.0, exec(sequential), log_dir.as_deref());
            let hash = cfg.hash();
            for &a in &agents {
                let rows: Vec<_> = result.rows_for(a).into_iter().cloned().collect();
                let p = out.join(format!("{}_{a}_metrics.csv", scenario.name));
                write_metrics_csv(create(&p)?, &rows, &hash).map_err(io_err(&p))?;
            }
            let groups: Vec<_> = agents.iter().map(|&a| (a.to_string(), result.summary(a))).collect();
            let p = out.join(format!("{}_summary.csv", scenario.name));
            write_summary_csv(create(&p)?, "agent", &groups, &hash).map_err(io_err(&p))?;
            for (name, s) in &groups {
                println!(
                    "{:<9} n={:<3} recall {:.3}±{:.3} precision {:.3}±{:.3} aae {:.2}±{:.2} auc {:.3}±{:.3}",
                    name,
                    s.episodes,
                    s.recall.mean,
                    s.recall.std,
                    s.precision.mean,
                    s.precision.std,
                    s.aae_deg.mean,
                    s.aae_deg.std,
                    s.auc_judd.mean,
                    s.auc_judd.std
                );
            }
            println!("wrote {}", p.display());
            if result.failures.is_empty() {
                Ok(())
            } else {
                Err(HarnessError::Run(format!("{} episode(s) failed", result.failures.len())))
            }
        }
        Command::Ablate { common, grid, seeds, sequential } => {
            let (cfg, out) = resolve(&common)?;
            let grid = match grid {
                Some(p) => load_grid(&p)?,
                None => AblationGrid::default(),
            };
            let result = run_ablation(&cfg, &grid, &seeds.0, exec(sequential))?;
            let hash = cfg.hash();
            let p = out.join("ablation.csv");
            result.write_csv(create(&p)?, &hash).map_err(io_err(&p))?;
            let groups = result.summaries();
            let sp = out.join("ablation_summary.csv");
            write_summary_csv(create(&sp)?, "variant", &groups, &hash).map_err(io_err(&sp))?;
            for (name, s) in &groups {
                println!(
                    "{:<16} recall {:.3}±{:.3} precision {:.3}±{:.3} relaxed {:.3}±{:.3}",
                    name,
                    s.recall.mean,
                    s.recall.std,
                    s.precision.mean,
                    s.precision.std,
                    s.precision_relaxed.mean,
                    s.precision_relaxed.std
                );
            }
            println!("wrote {} and {}", p.display(), sp.display());
            if result.failures.is_empty() {
                Ok(())
            } else {
                Err(HarnessError::Run(format!("{} episode(s) failed", result.failures.len())))
            }
        }
        Command::Plot { input, out } => {
            let out = out.unwrap_or_else(|| RunConfig::default().out_dir());
            for p in emit_plots(&input, &out)? {
                println!("wrote {}", p.display());
            }
            Ok(())
        }
        Command::Scenarios => {
            for name in active_vision::world::bundled_names() {
                println!("{name}");
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
