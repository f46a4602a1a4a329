use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use msenet_core::data::{build_index, make_splits, SplitSpec};
use msenet_core::eval::{
    cross_domain_eval, default_grid, evaluate, evaluate_with_confusion, export_samples, run_ablation, ModelScorer,
};
use msenet_core::train::{load_checkpoint_for, resolve_data, train, RunConfig};
use serde_json::json;

mod report;

#[derive(Parser, Debug)]
#[command(name = "msenet", version, about = "Multi-scale attention prototype networks for few-shot classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Worker threads (0 = one per core).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Single-threaded execution with a fixed reduction order.
    #[arg(long, global = true)]
    deterministic: bool,
}

#[derive(Args, Debug, Default)]
struct ConfigArgs {
    /// TOML run configuration; missing keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set train.lr=0.001`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Base seed (same as `--set seed=N`).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset of separable classes.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 25)]
        classes: usize,
        #[arg(long, default_value_t = 40)]
        images: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Replace a non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// List the classes of a dataset.
    Index {
        /// Dataset root; defaults to MSENET_DATA_ROOT.
        root: Option<PathBuf>,
    },
    /// Derive a class split from `data.split_counts` and write it to a file.
    Split {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Train a model; each run gets its own directory under `--out`.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
        /// Independent runs with seeds seed, seed+1, ...; reports their mean test accuracy.
        #[arg(long, default_value_t = 1)]
        runs: u64,
    },
    /// Evaluate a checkpoint on the test split or on another dataset.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
        /// Evaluate on every class of this dataset instead of the test split.
        #[arg(long)]
        target: Option<PathBuf>,
        /// Correct and incorrect sample grids to export (each).
        #[arg(long, default_value_t = 8)]
        samples: usize,
    },
    /// Train and evaluate the four component-toggle rows.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
    },
    /// Summarise the reports found under run directories as Markdown.
    Report {
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
    },
}

/// Marks errors that come from the invocation rather than the run.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
struct UsageError(String);

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<UsageError>().is_some() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<msenet_core::Error>() {
            return if e.is_config() { 2 } else { 1 };
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let runtime = Runtime { threads: cli.threads, deterministic: cli.deterministic };
    match cli.command {
        Command::Synth { out, classes, images, seed, force } => {
            runtime.install(0, false)?;
            let summary = msenet_core::synth::generate(&out, classes, images, seed, force)?;
            println!(
                "wrote {} classes x {} images to {}",
                summary.classes.len(),
                summary.images_per_class,
                out.display()
            );
        }
        Command::Index { root } => {
            let root = match root {
                Some(r) => r,
                None => RunConfig::default().data_root()?,
            };
            let index = build_index(&root)?;
            for class in index.classes() {
                println!("{}\t{}", class.name, class.items.len());
            }
            println!("{} classes, {} images under {}", index.num_classes(), index.num_items(), root.display());
        }
        Command::Split { cfg, out, force } => {
            let cfg = resolve_config(&cfg, &runtime)?;
            if out.exists() && !force {
                return Err(UsageError(format!("{} exists; pass --force to overwrite", out.display())).into());
            }
            let index = build_index(cfg.data_root()?)?;
            let [a, b, c] = cfg.data.split_counts;
            let split = make_splits(&index, (a, b, c), cfg.seed)?;
            split.save(&out)?;
            println!("split {a}/{b}/{c} written to {}", out.display());
        }
        Command::Train { cfg, out, runs } => {
            let cfg = resolve_config(&cfg, &runtime)?;
            cmd_train(cfg, &out, runs)?;
        }
        Command::Eval { cfg, checkpoint, out, target, samples } => {
            let cfg = resolve_eval_config(&cfg, &checkpoint, &runtime)?;
            cmd_eval(&cfg, &checkpoint, &out, target.as_deref(), samples)?;
        }
        Command::Ablate { cfg, out } => {
            let cfg = resolve_config(&cfg, &runtime)?;
            let dir = run_dir(&out, "ablate", &cfg)?;
            let (store, split) = resolve_data(&cfg)?;
            let grid = run_ablation(&cfg, &default_grid(), &store, &split, &dir)?;
            write(&dir.join("ablation.json"), &grid.to_json())?;
            for row in &grid.rows {
                let accs: Vec<String> = row.reports.iter().map(|r| format!("{:.4}", r.accuracy)).collect();
                let c = row.components;
                let on = |b: bool| if b { "on" } else { "off" };
                println!(
                    "multiscale {:3} learnable {:3} attention {:3}\t{}\t{} params",
                    on(c.multiscale),
                    on(c.learnable_weights),
                    on(c.self_attention),
                    accs.join("\t"),
                    row.param_count
                );
            }
            println!("{}", dir.display());
        }
        Command::Report { dirs, out } => {
            let text = report::render(&dirs)?;
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%SZ");
            let path = out.join(format!("report-{stamp}.md"));
            write(&path, &text)?;
            print!("{text}");
        }
    }
    Ok(())
}

struct Runtime {
    threads: Option<usize>,
    deterministic: bool,
}

impl Runtime {
    fn apply(&self, cfg: &mut RunConfig) {
        if let Some(t) = self.threads {
            cfg.runtime.threads = t;
        }
        cfg.runtime.deterministic |= self.deterministic;
    }

    fn install(&self, threads: usize, deterministic: bool) -> Result<()> {
        let threads = if deterministic || self.deterministic { 1 } else { self.threads.unwrap_or(threads) };
        rayon::ThreadPoolBuilder::new().num_threads(threads).build_global().context("configuring the worker pool")
    }
}

fn resolve_config(args: &ConfigArgs, runtime: &Runtime) -> Result<RunConfig> {
    resolve_from(args, args.config.as_deref(), runtime)
}

/// Uses the `config.toml` stored next to the checkpoint when no config is given.
fn resolve_eval_config(args: &ConfigArgs, checkpoint: &Path, runtime: &Runtime) -> Result<RunConfig> {
    let beside = checkpoint.parent().map(|p| p.join("config.toml")).filter(|p| p.is_file());
    resolve_from(args, args.config.as_deref().or(beside.as_deref()), runtime)
}

fn resolve_from(args: &ConfigArgs, path: Option<&Path>, runtime: &Runtime) -> Result<RunConfig> {
    let mut overrides = args.set.clone();
    if let Some(seed) = args.seed {
        overrides.push(format!("seed={seed}"));
    }
    let mut cfg = RunConfig::load(path, &overrides)?;
    runtime.apply(&mut cfg);
    cfg.validate()?;
    runtime.install(cfg.runtime.threads, cfg.runtime.deterministic)?;
    Ok(cfg)
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Creates `<base>/<command>-<UTC timestamp>-<seed>` holding the resolved config.
fn run_dir(base: &Path, command: &str, cfg: &RunConfig) -> Result<PathBuf> {
    let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%SZ");
    let stem = format!("{command}-{stamp}-{}", cfg.seed);
    let mut dir = base.join(&stem);
    let mut n = 1;
    while dir.exists() {
        dir = base.join(format!("{stem}.{n}"));
        n += 1;
    }
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    write(&dir.join("config.toml"), &cfg.to_toml())?;
    Ok(dir)
}

fn cmd_train(cfg: RunConfig, out: &Path, runs: u64) -> Result<()> {
    if runs == 0 {
        return Err(UsageError("--runs must be at least 1".into()).into());
    }
    let parent = if runs > 1 { Some(run_dir(out, "train", &cfg)?) } else { None };
    let mut results = Vec::new();
    for r in 0..runs {
        let mut run_cfg = cfg.clone();
        run_cfg.seed = cfg.seed + r;
        let dir = match &parent {
            Some(p) => run_dir(p, "run", &run_cfg)?,
            None => run_dir(out, "train", &run_cfg)?,
        };
        let outcome = train(&run_cfg, &dir)?;
        let losses = outcome.state.history.losses();
        println!(
            "seed {}: {} episodes, final loss {:.4}, best val {}",
            run_cfg.seed,
            outcome.state.counter,
            losses.last().copied().unwrap_or(f64::NAN),
            outcome.state.best_val.map_or("-".into(), |v| format!("{v:.4}"))
        );

        let (store, split) = resolve_data(&run_cfg)?;
        if !split.test.is_empty() && run_cfg.eval.episodes > 0 {
            let ckpt = outcome.best_checkpoint.unwrap_or(outcome.last_checkpoint);
            let state = load_checkpoint_for(&ckpt, &run_cfg.model)?;
            let scorer = ModelScorer::new(&state.model, &store);
            let report =
                evaluate(&scorer, store.index(), &split.test, &run_cfg.eval.task, run_cfg.eval.episodes, run_cfg.seed)?;
            write(&dir.join("test_report.json"), &report.to_json())?;
            println!("  test {}: {:.4} ± {:.4}", report.task.label(), report.accuracy, report.ci95);
            results.push((run_cfg.seed, report.accuracy));
        }
        println!("{}", dir.display());
    }
    if let Some(p) = parent {
        let accs: Vec<f64> = results.iter().map(|r| r.1).collect();
        let mean = (!accs.is_empty()).then(|| accs.iter().sum::<f64>() / accs.len() as f64);
        let summary = json!({
            "runs": runs,
            "task": cfg.eval.task.label(),
            "seeds": results.iter().map(|r| r.0).collect::<Vec<_>>(),
            "accuracies": accs,
            "mean_accuracy": mean,
        });
        write(&p.join("summary.json"), &serde_json::to_string_pretty(&summary)?)?;
        if let Some(m) = mean {
            println!("mean test accuracy over {runs} runs: {m:.4}");
        }
        println!("{}", p.display());
    }
    Ok(())
}

fn cmd_eval(cfg: &RunConfig, checkpoint: &Path, out: &Path, target: Option<&Path>, samples: usize) -> Result<()> {
    let state = load_checkpoint_for(checkpoint, &cfg.model)?;
    let dir = run_dir(out, "eval", cfg)?;
    let spec = &cfg.eval.task;
    let report = match target {
        Some(root) => cross_domain_eval(
            checkpoint,
            root,
            cfg.data.normalization.normalization(),
            spec,
            cfg.eval.episodes,
            cfg.seed,
        )?,
        None => {
            let (store, split) = resolve_data(cfg)?;
            let test = nonempty_test(&split)?;
            let scorer = ModelScorer::new(&state.model, &store);
            let (report, confusion) =
                evaluate_with_confusion(&scorer, store.index(), test, spec, cfg.eval.episodes, cfg.seed)?;
            confusion.save_csv(&dir.join("confusion.csv"))?;
            confusion.save_png(&dir.join("confusion.png"), 16)?;
            if samples > 0 {
                let records = export_samples(
                    &scorer,
                    &store,
                    test,
                    spec,
                    cfg.eval.episodes,
                    cfg.seed,
                    samples,
                    &dir.join("samples"),
                )?;
                println!("exported {} sample grids", records.len());
            }
            report
        }
    };
    write(&dir.join("report.json"), &report.to_json())?;
    println!("{} over {} episodes: {:.4} ± {:.4}", spec.label(), report.episodes, report.accuracy, report.ci95);
    println!("{}", dir.display());
    Ok(())
}

fn nonempty_test(split: &SplitSpec) -> Result<&BTreeSet<String>> {
    if split.test.is_empty() {
        bail!(UsageError("the test split is empty; set data.split_counts or data.split_file".into()));
    }
    Ok(&split.test)
}
