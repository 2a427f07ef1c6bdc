//! Argument parsing and subcommand dispatch.

use std::ffi::OsString;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use anyhow::Context;
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use pbarl::config::ExperimentConfig;
use pbarl::experiment::{run_experiment, Cell, Run};
use pbarl::gradsuite::run_gradient_suite;

use crate::exit::{classify, Failure};
use crate::serve::{self, Service, ServiceConfig};

#[derive(Debug, Parser)]
#[command(name = "pbarl", version, about = "Personalize a frozen robot policy from preference labels")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Default, Args)]
pub struct ConfigArgs {
    /// Experiment config (TOML). Built-in defaults apply to missing keys.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    /// Override a config key, e.g. `--set pbarl.steps=2000`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Output root; replaces `out_dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Restricts a stage to matching cells of the configured sweep.
#[derive(Debug, Clone, Default, Args)]
pub struct CellFilter {
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub user: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Args)]
pub struct StageArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[command(flatten)]
    pub filter: CellFilter,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Pre-train the task policy.
    Pretrain(StageArgs),
    /// Roll out the pre-trained policy and label pairs with the scripted teacher.
    GenPrefs(StageArgs),
    /// Fit the reward model to the preference labels.
    TrainReward(StageArgs),
    /// Train the action encoder/decoder against the frozen policy and reward model.
    TrainPbarl {
        #[command(flatten)]
        stage: StageArgs,
        /// Train the ablation variant with this list size.
        #[arg(long)]
        n: Option<usize>,
    },
    /// Fine-tune a copy of the pre-trained policy on the learned reward.
    FinetunePreft(StageArgs),
    /// Train a fresh policy on the learned reward.
    TrainScratch(StageArgs),
    /// Evaluate existing checkpoints and write the report.
    Eval(ConfigArgs),
    /// Run every missing stage, evaluate, and write the report.
    Experiment(ConfigArgs),
    /// Finite-difference check of every training loss.
    Gradcheck {
        #[arg(long, default_value_t = 100)]
        points: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Serve the labeling API.
    Serve(ServeArgs),
}

#[derive(Debug, Clone, Args)]
pub struct ServeArgs {
    #[command(flatten)]
    pub stage: StageArgs,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    /// Enable `POST /api/robot/label`, which labels fresh pairs with the scripted teacher.
    #[arg(long)]
    pub robot_user: bool,
    /// Label file; defaults to `labels.jsonl` in the cell's user directory.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    pub min_labels: usize,
    /// Static client assets served at `/`.
    #[arg(long)]
    pub ui_dir: Option<PathBuf>,
}

pub fn load_config(args: &ConfigArgs) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = match &args.config {
        Some(path) => {
            if !path.is_file() {
                return Err(Failure::invalid_config(format!("config file {} not found", path.display())).into());
            }
            ExperimentConfig::from_file(path, &args.set)?
        }
        None => ExperimentConfig::resolve(None, &args.set)?,
    };
    if let Some(out) = &args.out {
        cfg.out_dir = out.clone();
    }
    Ok(cfg)
}

fn select(run: &Run, f: &CellFilter) -> anyhow::Result<Vec<Cell>> {
    let cells: Vec<Cell> = run
        .cells()
        .into_iter()
        .filter(|c| f.preset.as_deref().is_none_or(|p| p == c.preset.name()))
        .filter(|c| f.user.as_deref().is_none_or(|u| u == c.user_name()))
        .filter(|c| f.seed.is_none_or(|s| s == c.seed))
        .collect();
    if cells.is_empty() {
        return Err(Failure::invalid_config("no configured (preset, user, seed) cell matches the filter").into());
    }
    Ok(cells)
}

/// One cell per `(preset, seed)` for the user-independent stages.
fn per_seed(cells: Vec<Cell>) -> Vec<Cell> {
    let mut out: Vec<Cell> = Vec::new();
    for c in cells {
        if !out.iter().any(|o| o.preset == c.preset && o.seed == c.seed) {
            out.push(c);
        }
    }
    out
}

fn label(c: &Cell) -> String {
    format!("{}/{}/seed{}", c.preset.name(), c.user_name(), c.seed)
}

fn open(args: &StageArgs) -> anyhow::Result<(Run, Vec<Cell>)> {
    let run = Run::open(load_config(&args.config)?)?;
    let cells = select(&run, &args.filter)?;
    Ok((run, cells))
}

fn run_command(cmd: Command) -> anyhow::Result<()> {
    match cmd {
        Command::Pretrain(a) => {
            let (mut run, cells) = open(&a)?;
            for c in per_seed(cells) {
                run.run_pretrain(&c)?;
                println!("pretrain {}/seed{} -> {}", c.preset.name(), c.seed, run.paths(&c).pretrained.display());
            }
        }
        Command::GenPrefs(a) => {
            let (mut run, cells) = open(&a)?;
            for c in cells {
                let d = run.run_gen_prefs(&c)?;
                println!(
                    "gen-prefs {}: {} pairs, {:.1}% ties -> {}",
                    label(&c),
                    d.pairs.len(),
                    100.0 * d.tie_fraction(),
                    run.paths(&c).prefs.display()
                );
            }
        }
        Command::TrainReward(a) => {
            let (mut run, cells) = open(&a)?;
            for c in cells {
                let (_, acc) = run.run_train_reward(&c)?;
                let acc = acc.map_or("n/a".to_string(), |v| format!("{v:.3}"));
                println!("train-reward {}: held-out accuracy {acc} -> {}", label(&c), run.paths(&c).reward.display());
            }
        }
        Command::TrainPbarl { stage, n } => {
            let (mut run, cells) = open(&stage)?;
            for c in cells {
                let out = run.run_train_pbarl(&c, n)?;
                let last = out.record.total.last().copied().unwrap_or(f64::NAN);
                println!(
                    "train-pbarl {}: {} steps, final loss {last:.4} -> {}",
                    label(&c),
                    out.record.steps,
                    run.paths(&c).pbarl(n).display()
                );
            }
        }
        Command::FinetunePreft(a) => {
            let (mut run, cells) = open(&a)?;
            for c in cells {
                run.run_finetune_preft(&c)?;
                println!("finetune-preft {} -> {}", label(&c), run.paths(&c).preft.display());
            }
        }
        Command::TrainScratch(a) => {
            let (mut run, cells) = open(&a)?;
            for c in cells {
                run.run_train_scratch(&c)?;
                println!("train-scratch {} -> {}", label(&c), run.paths(&c).scratch.display());
            }
        }
        Command::Eval(a) => {
            let mut run = Run::open(load_config(&a)?)?;
            let report = run.report(false)?;
            print!("{}", report.to_table());
            println!("report -> {}", run.dir.display());
        }
        Command::Experiment(a) => {
            let (run, report) = run_experiment(load_config(&a)?)?;
            print!("{}", report.to_table());
            println!("report -> {}", run.dir.display());
        }
        Command::Gradcheck { points, seed } => {
            let r = run_gradient_suite(points, seed)?;
            for c in &r.checks {
                println!(
                    "{:<12} {:>4} points  max rel err {:.2e}  {}",
                    c.name,
                    c.points,
                    c.max_rel_error,
                    if c.passed { "PASS" } else { "FAIL" }
                );
            }
            println!("flat-region max |grad| {:e}", r.flat_region_max_grad);
            println!("elapsed {:.2} s", r.elapsed.as_secs_f64());
            if !r.passed {
                return Err(Failure::new("gradcheck-failed", 3, "finite-difference check failed").into());
            }
        }
        Command::Serve(a) => serve_command(a)?,
    }
    Ok(())
}

fn serve_command(a: ServeArgs) -> anyhow::Result<()> {
    let (run, cells) = open(&a.stage)?;
    let cell = cells[0].clone();
    let paths = run.paths(&cell);
    let pretrained = run.load_pretrained(&cell).context("the label service needs a pre-trained policy")?;
    let cfg = &run.cfg;
    let svc = Service::open(ServiceConfig {
        env: run.env(cell.preset)?,
        pretrained,
        user: cell.user_name(),
        omega: cell.user.omega(),
        tie_threshold: cfg.prefs.tie_threshold,
        reward: cfg.reward.clone(),
        pbarl: cfg.pbarl.clone(),
        transition_episodes: cfg.transitions.episodes,
        seed: cell.seed,
        dataset: a.dataset.clone().unwrap_or_else(|| paths.labels()),
        robot_user: a.robot_user,
        min_labels: a.min_labels,
    })?;
    let addr: SocketAddr = format!("{}:{}", a.host, a.port)
        .parse()
        .map_err(|e| Failure::invalid_config(format!("bad listen address: {e}")))?;
    let rt = tokio::runtime::Runtime::new().context("starting the async runtime")?;
    rt.block_on(async move {
        let listener = serve::bind(addr).await?;
        println!(
            "serving {} on http://{} ({} labels in {})",
            label(&cell),
            listener.local_addr()?,
            svc.label_count(),
            a.dataset.unwrap_or_else(|| paths.labels()).display()
        );
        serve::serve(listener, serve::router(Arc::new(svc), a.ui_dir.as_deref())).await
    })
}

/// Parses `argv`, runs the command and returns the process exit code.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return 0;
        }
        Err(e) => {
            let _ = e.print();
            let f = Failure::new("usage", 1, e.kind().to_string());
            eprintln!("{}", f.line());
            return 1;
        }
    };
    match run_command(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            let f = classify(&e);
            eprintln!("{}", f.line());
            f.code
        }
    }
}
