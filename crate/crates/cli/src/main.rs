use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use sequela_cli::bench;
use sequela_cli::config::RunConfig;
use sequela_cli::io;
use sequela_cli::modelfile::ModelFile;
use sequela_cli::pipeline::run_training;
use sequela_cli::report::{summarize, RunReport};
use sequela_core::dyngraph;
use sequela_core::ehr::{make_examples, split_dataset, Task};
use sequela_core::synthgen;
use sequela_core::tasks::evaluate;
use sequela_core::transitions::Variant;

/// Health event prediction on dynamic disease co-occurrence graphs.
#[derive(Parser)]
#[command(name = "sequela", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

fn parse_task(s: &str) -> Result<Task, String> {
    match s {
        "diagnosis" => Ok(Task::Diagnosis),
        "heart_failure" => Ok(Task::HeartFailure),
        _ => Err(format!("unknown task {s:?} (expected diagnosis or heart_failure)")),
    }
}

fn parse_ablation(s: &str) -> Result<Variant, String> {
    match s {
        "full" => Ok(Variant::Full),
        "no_dynamic" => Ok(Variant::NoDynamic),
        "no_transition" => Ok(Variant::NoTransition),
        _ => Err(format!("unknown ablation {s:?} (expected full, no_dynamic or no_transition)")),
    }
}

fn parse_d_list(s: &str) -> Result<Vec<usize>, String> {
    s.split(',')
        .map(|part| part.trim().parse::<usize>().map_err(|e| format!("bad d value {part:?}: {e}")))
        .collect()
}

#[derive(Args)]
struct ConfigArg {
    /// JSON run config; flags override file values.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl ConfigArg {
    fn load(&self) -> Result<RunConfig> {
        match &self.config {
            Some(path) => RunConfig::load(path),
            None => Ok(RunConfig::default()),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with planted cluster structure.
    Generate {
        #[command(flatten)]
        config: ConfigArg,
        /// Output JSONL path.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        patients: Option<usize>,
    },
    /// Train a model and evaluate it on the test split.
    Train {
        #[command(flatten)]
        config: ConfigArg,
        /// Input dataset (JSONL).
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_parser = parse_task)]
        task: Option<Task>,
        #[arg(long, value_parser = parse_ablation)]
        ablation: Option<Variant>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Write the trained model here.
        #[arg(long)]
        out_model: Option<PathBuf>,
        /// Write the evaluation report here.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Export the training co-occurrence graph as CSV triples.
        #[arg(long)]
        graph_csv: Option<PathBuf>,
    },
    /// Evaluate a saved model on a dataset split.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Which split to evaluate: test, val, train, or all.
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Check the subgraph identities and the optimized aggregation against
    /// brute force on random instances.
    Verify {
        #[arg(long, default_value_t = 200)]
        trials: usize,
        #[arg(long, default_value_t = 50)]
        max_d: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Perturb one adjacency entry on the optimized path; the run must
        /// then fail (self-test of the comparison).
        #[arg(long)]
        inject_fault: bool,
    },
    /// Compare naive vs. optimized aggregation memory and time.
    Bench {
        /// Comma-separated code universe sizes.
        #[arg(long, default_value = "200,400,800", value_parser = parse_d_list)]
        d: Vec<usize>,
        #[arg(long, default_value_t = 16)]
        s: usize,
        #[arg(long, default_value_t = 5)]
        iters: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the CSV here (also printed to stdout).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            match err.downcast_ref::<sequela_core::Error>() {
                Some(sequela_core::Error::Divergence { .. }) => ExitCode::from(3),
                _ => ExitCode::from(2),
            }
        }
    }
}

fn run(command: Command) -> Result<ExitCode> {
    match command {
        Command::Generate { config, out, seed, patients } => {
            let mut cfg = config.load()?;
            if let Some(seed) = seed {
                cfg.synth.seed = seed;
            }
            if let Some(patients) = patients {
                cfg.synth.n_patients = patients;
            }
            let ds = synthgen::generate(&cfg.synth)?;
            io::save_dataset(&ds, &out)?;
            println!("wrote {} patients to {}", ds.len(), out.display());
            println!("{}", synthgen::describe(&ds)?);
            Ok(ExitCode::SUCCESS)
        }
        Command::Train {
            config,
            data,
            task,
            ablation,
            seed,
            epochs,
            out_model,
            report,
            graph_csv,
        } => {
            let mut cfg = config.load()?;
            if let Some(task) = task {
                cfg.train.task = task;
            }
            if let Some(ablation) = ablation {
                cfg.train.ablation = ablation;
            }
            if let Some(seed) = seed {
                cfg.train.seed = seed;
            }
            if let Some(epochs) = epochs {
                cfg.train.epochs = epochs;
            }
            cfg.train.validate()?;
            let (ds, _) = io::load_dataset(&data)?;
            let outcome = run_training(&ds, &cfg)?;
            println!(
                "trained {} epochs (best epoch {}), test metrics:",
                outcome.trained.history.len(),
                outcome.trained.best_epoch
            );
            print!("{}", summarize(&outcome.report));
            if let Some(path) = graph_csv {
                io::save_graph_csv(&outcome.graph, &path)?;
                println!("graph triples written to {}", path.display());
            }
            let run_report = RunReport {
                eval: &outcome.report,
                best_epoch: outcome.trained.best_epoch,
                history: &outcome.trained.history,
                config: &cfg,
            };
            if let Some(path) = report {
                run_report.write(&path)?;
                println!("report written to {}", path.display());
            }
            if let Some(path) = out_model {
                let vocab: Vec<String> = ds.vocab().iter().map(str::to_owned).collect();
                ModelFile::new(
                    cfg.clone(),
                    outcome.trained.best_epoch,
                    vocab,
                    &outcome.graph,
                    outcome.trained.model.clone(),
                )
                .save(&path)?;
                println!("model written to {}", path.display());
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Evaluate { model, data, split, report } => {
            let file = ModelFile::load(&model)?;
            let (ds, _) = io::load_dataset(&data)?;
            file.check_vocab(&ds)?;
            let graph = file.graph()?;
            let cfg = &file.run_config;
            let examples = match split.as_str() {
                "all" => make_examples(&ds, cfg.train.task),
                part => {
                    let counts = cfg.split.resolve(ds.len())?;
                    let [train_ds, val_ds, test_ds] = split_dataset(&ds, counts, cfg.split.seed)?;
                    let chosen = match part {
                        "train" => train_ds,
                        "val" => val_ds,
                        "test" => test_ds,
                        other => anyhow::bail!("unknown split {other:?} (expected test, val, train or all)"),
                    };
                    make_examples(&chosen, cfg.train.task)
                }
            };
            let mut eval = evaluate(&examples, &file.model, &graph, &cfg.train)
                .context("evaluating the model")?;
            eval.config_hash = Some(cfg.hash());
            print!("{}", summarize(&eval));
            if let Some(path) = report {
                RunReport { eval: &eval, best_epoch: file.best_epoch, history: &[], config: cfg }.write(&path)?;
                println!("report written to {}", path.display());
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Verify { trials, max_d, seed, inject_fault } => {
            if trials == 0 {
                println!("warning: 0 trials requested; nothing verified (vacuous pass)");
                return Ok(ExitCode::SUCCESS);
            }
            let report = dyngraph::run_equivalence(trials, max_d, seed, inject_fault);
            println!(
                "subgraph identities: {} instances, {} mismatching entries (exact comparison)",
                report.trials, report.subgraph_mismatches
            );
            println!(
                "aggregation routes: max relative deviation {:.3e} (tolerance {:.1e})",
                report.max_aggregate_dev,
                dyngraph::AGGREGATE_TOL
            );
            println!(
                "allocation accounting: {} d x d intermediates on the optimized path (largest {} elements)",
                report.dd_allocations, report.optimized_largest_alloc
            );
            if report.passed() {
                println!("PASS");
                Ok(ExitCode::SUCCESS)
            } else {
                println!("FAIL: instance seeds {:?}", report.failed_seeds);
                Ok(ExitCode::from(1))
            }
        }
        Command::Bench { d, s, iters, seed, out } => {
            let rows = bench::run_bench(&d, s, iters, seed)?;
            let csv = bench::to_csv(&rows);
            print!("{csv}");
            if let Some(path) = out {
                std::fs::write(&path, &csv).with_context(|| format!("writing {}", path.display()))?;
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}
