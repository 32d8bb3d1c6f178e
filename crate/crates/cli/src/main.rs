use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use causalq::envs::{make_adversarial_confounded_bandit, make_confounded_gridworld, make_random_cmdp, DEFAULT_WIND};
use causalq::harness::{self, metrics::Aggregate, report};
use causalq::solvers::{self, BoundSide, DEFAULT_MAX_ITERS, DEFAULT_TOL};
use causalq::{exact_nominal, marginalize_interventional, Cmdp, ExperimentConfig};
use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "causalq", version, about = "Causal Q-learning on confounded MDPs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate an environment file.
    Gen {
        #[command(subcommand)]
        family: GenFamily,
    },
    /// Solve an environment exactly and print the Q table as CSV.
    Solve {
        #[arg(long)]
        env: PathBuf,
        #[arg(long, value_enum)]
        method: Method,
        /// Write the table here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_TOL)]
        tol: f64,
        #[arg(long, default_value_t = DEFAULT_MAX_ITERS)]
        max_iters: usize,
    },
    /// Run an experiment config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Override the worker count from the config.
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Summarize an experiment directory.
    Report {
        #[arg(long)]
        dir: PathBuf,
        /// Report a single metric instead of all three.
        #[arg(long, value_enum)]
        metric: Option<MetricArg>,
        /// Bootstrap resamples for confidence intervals; 0 disables them.
        #[arg(long, default_value_t = 2000)]
        bootstrap: usize,
        #[arg(long, default_value_t = 0.95)]
        confidence: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Subcommand)]
enum GenFamily {
    /// Random CMDP with rewards in [0, 1].
    Random {
        #[arg(long, default_value_t = 5)]
        n_states: usize,
        #[arg(long, default_value_t = 3)]
        n_actions: usize,
        #[arg(long, default_value_t = 4)]
        n_noise: usize,
        #[arg(long, default_value_t = 0.9)]
        gamma: f64,
        #[arg(long, default_value_t = 1.0)]
        strength: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Windy gridworld with a wind-aware demonstrator.
    Gridworld {
        #[arg(long, default_value_t = 5)]
        width: usize,
        #[arg(long, default_value_t = 4)]
        height: usize,
        /// Probabilities of calm, north, south, west, east wind.
        #[arg(long, value_delimiter = ',')]
        wind: Option<Vec<f64>>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// One-step bandit where the logged data favors the wrong arm.
    Bandit {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Vi,
    CausalLower,
    CausalUpper,
}

#[derive(Clone, Copy, ValueEnum)]
enum MetricArg {
    Mean,
    Median,
    Iqm,
}

impl From<MetricArg> for Aggregate {
    fn from(m: MetricArg) -> Self {
        match m {
            MetricArg::Mean => Aggregate::Mean,
            MetricArg::Median => Aggregate::Median,
            MetricArg::Iqm => Aggregate::Iqm,
        }
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen { family } => generate(family),
        Command::Solve {
            env,
            method,
            out,
            tol,
            max_iters,
        } => solve(&env, method, out.as_deref(), tol, max_iters),
        Command::Train { config, workers } => train(&config, workers),
        Command::Report {
            dir,
            metric,
            bootstrap,
            confidence,
            seed,
        } => report_dir(&dir, metric, bootstrap, confidence, seed),
    }
}

fn generate(family: GenFamily) -> Result<()> {
    let (cmdp, summary, out) = match family {
        GenFamily::Random {
            n_states,
            n_actions,
            n_noise,
            gamma,
            strength,
            seed,
            out,
        } => {
            let cmdp = make_random_cmdp(n_states, n_actions, n_noise, gamma, seed, strength)?;
            let summary = format!("states={n_states} actions={n_actions} noise={n_noise} gamma={gamma}\n");
            (cmdp, summary, out)
        }
        GenFamily::Gridworld {
            width,
            height,
            wind,
            seed,
            out,
        } => {
            let wind = wind.unwrap_or_else(|| DEFAULT_WIND.to_vec());
            let inst = make_confounded_gridworld(width, height, &wind, seed)?;
            (inst.cmdp.clone(), inst.describe(), out)
        }
        GenFamily::Bandit { seed, out } => {
            let inst = make_adversarial_confounded_bandit(seed)?;
            (inst.cmdp.clone(), inst.describe(), out)
        }
    };
    cmdp.save(&out).with_context(|| format!("writing {}", out.display()))?;
    eprint!("{summary}");
    eprintln!("wrote {}", out.display());
    Ok(())
}

fn solve(env: &Path, method: Method, out: Option<&Path>, tol: f64, max_iters: usize) -> Result<()> {
    let cmdp = Cmdp::load(env).with_context(|| format!("loading {}", env.display()))?;
    let (q, stats, name) = match method {
        Method::Vi => {
            let m = marginalize_interventional(&cmdp);
            let (q, stats) = solvers::standard_value_iteration(&m.trans, &m.reward, cmdp.gamma, tol, max_iters)?;
            (q, stats, "vi")
        }
        Method::CausalLower | Method::CausalUpper => {
            let (side, name) = match method {
                Method::CausalLower => (BoundSide::Lower, "causal-lower"),
                _ => (BoundSide::Upper, "causal-upper"),
            };
            let (q, stats) = solvers::causal_bound_vi(&exact_nominal(&cmdp), side, tol, max_iters)?;
            (q, stats, name)
        }
    };
    let start_value: f64 = q.state_values().iter().zip(&cmdp.init_dist).map(|(v, p)| v * p).sum();
    match out {
        Some(path) => {
            let file = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
            q.write_csv(file)?;
        }
        None => q.write_csv(io::stdout().lock())?,
    }
    eprintln!("method={name} {stats} start_value={start_value:.10}");
    Ok(())
}

fn train(config: &Path, workers: Option<usize>) -> Result<()> {
    let mut cfg = ExperimentConfig::load(config).with_context(|| format!("loading {}", config.display()))?;
    if let Some(w) = workers {
        if w == 0 {
            bail!("--workers must be at least 1");
        }
        cfg.output.workers = w;
    }
    let records = harness::run_experiment(&cfg)?;
    println!(
        "records={} results={}",
        records.len(),
        cfg.output.dir.join(harness::RESULTS_FILE).display()
    );
    Ok(())
}

fn report_dir(dir: &Path, metric: Option<MetricArg>, bootstrap: usize, confidence: f64, seed: u64) -> Result<()> {
    let (records, refs) = report::load_dir(dir).with_context(|| format!("reading {}", dir.display()))?;
    let metrics: Vec<Aggregate> = match metric {
        Some(m) => vec![m.into()],
        None => Aggregate::ALL.to_vec(),
    };
    let rows = report::summarize(&records, &refs, &metrics, bootstrap, confidence, seed)?;
    let path = dir.join("aggregates.csv");
    report::write_aggregates(
        &rows,
        fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?,
    )?;
    let mut stdout = io::stdout().lock();
    stdout.write_all(report::render_table(&rows).as_bytes())?;
    writeln!(stdout, "aggregates={}", path.display())?;
    Ok(())
}
