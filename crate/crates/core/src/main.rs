use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use shapebias::datasets::{verify_data_root, LoadOptions};
use shapebias::experiments::{catalog, find, ExperimentConfig, Profile, RunOptions, Runner, SweepParam, SweepValue};
use shapebias::report::{render_reports, Artifact, ResultStore};
use shapebias::Error;

#[derive(Parser)]
#[command(name = "shapebias", version, about = "Shape-bias experiments with negative images")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Budget profile for catalog experiments.
    #[arg(long, global = true, default_value = "desk")]
    profile: Profile,
    /// Directory holding mnist/, cifar10/ and notmnist/.
    #[arg(long, global = true, env = "SHAPEBIAS_DATA_ROOT", default_value = "data")]
    data_root: PathBuf,
    /// Result store; logs, grids and reports go below it.
    #[arg(long, global = true, default_value = "results")]
    out: PathBuf,
    /// First seed (repetition i uses seed + i).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    repetitions: Option<usize>,
    /// Seeds trained concurrently; 0 uses every core.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    /// Print one line per epoch to stderr.
    #[arg(long, global = true)]
    progress: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Print the experiment catalog.
    List {
        /// Print the full JSON config of each entry.
        #[arg(long)]
        json: bool,
    },
    /// Run one catalog experiment or a config file.
    Run {
        #[arg(required_unless_present = "config", conflicts_with = "config")]
        id: Option<String>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Run a catalog experiment at each value of its sweep parameter.
    Sweep {
        id: String,
        /// Defaults to the experiment's declared parameter.
        #[arg(long)]
        parameter: Option<SweepParam>,
        /// JSON array, e.g. `[0,10,100]` or `[[0,1,2,3]]`; defaults to the declared values.
        #[arg(long)]
        values: Option<String>,
    },
    /// Render tables and plots from stored results.
    Report {
        /// Comma-separated artifacts (fig2, table1, table2, fig3 .. fig8, summary) or `all`.
        #[arg(long, default_value = "all")]
        like: String,
        /// Defaults to `<out>/reports`.
        #[arg(long)]
        dir: Option<PathBuf>,
    },
    /// Dataset utilities.
    Datasets {
        #[command(subcommand)]
        command: DatasetsCommand,
    },
}

#[derive(Subcommand)]
enum DatasetsCommand {
    /// Load every split and print counts, checksums and skipped files.
    Verify {
        #[arg(long)]
        json: bool,
    },
}

enum Failure {
    User(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_user_error() {
            Failure::User(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::User(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

fn dispatch(cli: &Cli) -> Result<(), Failure> {
    let g = &cli.global;
    match &cli.command {
        Command::List { json } => {
            let all = catalog(g.profile);
            let mut out = std::io::stdout().lock();
            // A closed pipe (`list | head`) is not an error.
            let _ = if *json {
                writeln!(out, "{}", serde_json::to_string_pretty(&all).map_err(Error::from)?)
            } else {
                all.iter().try_for_each(|c| {
                    writeln!(out, "{:<34} {:<15} {}", c.experiment_id, c.group.to_string(), c.description)
                })
            };
            Ok(())
        }
        Command::Run { id, config } => {
            let cfg = match (id, config) {
                (_, Some(path)) => {
                    let text = std::fs::read_to_string(path)
                        .map_err(|e| Failure::User(format!("{}: {e}", path.display())))?;
                    ExperimentConfig::from_json(&text)?
                }
                (Some(id), None) => lookup(g.profile, id)?,
                (None, None) => unreachable!("clap requires one of them"),
            };
            let cfg = cfg.with_overrides(g.seed, g.repetitions);
            let mut runner = runner(g)?;
            let result = runner.run(&cfg).map_err(|e| data_hint(e, &g.data_root))?;
            print_summary(&result);
            Ok(())
        }
        Command::Sweep { id, parameter, values } => {
            let base = lookup(g.profile, id)?.with_overrides(g.seed, g.repetitions);
            let declared = base
                .sweep
                .clone()
                .ok_or_else(|| Failure::User(format!("experiment `{id}` declares no sweep")))?;
            let parameter = parameter.unwrap_or(declared.parameter);
            let values: Vec<SweepValue> = match values {
                Some(text) => serde_json::from_str(text)
                    .map_err(|e| Failure::User(format!("--values must be a JSON array: {e}")))?,
                None => declared.values,
            };
            let mut runner = runner(g)?;
            for r in runner
                .run_sweep(&base, parameter, &values)
                .map_err(|e| data_hint(e, &g.data_root))?
            {
                print_summary(&r);
            }
            Ok(())
        }
        Command::Report { like, dir } => {
            let selection: Vec<Artifact> = if like.eq_ignore_ascii_case("all") {
                Artifact::ALL.to_vec()
            } else {
                like.split(',')
                    .map(|s| s.trim().parse::<Artifact>())
                    .collect::<Result<_, _>>()?
            };
            let store = ResultStore::open(&g.out)?;
            let dir = dir.clone().unwrap_or_else(|| g.out.join("reports"));
            let bundle = render_reports(&store, &selection, &dir)?;
            for (_, t) in &bundle.tables {
                println!("{}", t.markdown());
            }
            for (_, p) in &bundle.plots {
                println!("plot: {}", p.display());
            }
            println!("manifest: {}", dir.join("manifest.json").display());
            Ok(())
        }
        Command::Datasets {
            command: DatasetsCommand::Verify { json },
        } => {
            let reports = verify_data_root(&g.data_root, &LoadOptions::default());
            let ok = reports.iter().all(|r| r.ok);
            if *json {
                println!("{}", serde_json::to_string_pretty(&reports).map_err(Error::from)?);
            } else {
                for r in &reports {
                    let name = format!("{}/{}", r.dataset.name(), r.split.name());
                    match (&r.report, &r.error) {
                        (Some(l), _) => {
                            println!(
                                "{name:<16} ok  {} images (declared {}), {} skipped, counts {:?}",
                                l.loaded_count, l.declared_count, l.skipped_files, r.class_counts
                            );
                            for f in &r.files {
                                println!("    {} {} ({} bytes)", f.sha256, f.path.display(), f.bytes);
                            }
                            for s in &l.skipped_examples {
                                println!("    skipped {}", s.display());
                            }
                        }
                        (None, e) => println!("{name:<16} FAILED  {}", e.as_deref().unwrap_or("unknown error")),
                    }
                }
            }
            if ok {
                Ok(())
            } else {
                Err(Failure::User(format!(
                    "some datasets could not be loaded from {}",
                    g.data_root.display()
                )))
            }
        }
    }
}

fn lookup(profile: Profile, id: &str) -> Result<ExperimentConfig, Failure> {
    find(profile, id).map_err(|e| {
        let ids: Vec<String> = catalog(profile).into_iter().map(|c| c.experiment_id).collect();
        Failure::User(format!("{e}\navailable experiments:\n  {}", ids.join("\n  ")))
    })
}

fn runner(g: &Global) -> Result<Runner, Failure> {
    let store = ResultStore::open(&g.out)?;
    let mut options = RunOptions::new(&g.data_root);
    options.artifact_dir = Some(g.out.clone());
    options.seed_threads = g.threads;
    options.progress = g.progress;
    Ok(Runner::new(options).with_store(store))
}

fn data_hint(e: Error, root: &Path) -> Failure {
    match e {
        Error::Dataset { .. } => Failure::User(format!(
            "{e}\nhint: run `shapebias datasets verify --data-root {}` to check the data directory",
            root.display()
        )),
        other => other.into(),
    }
}

fn print_summary(r: &shapebias::experiments::ExperimentResult) {
    println!("{} {} ({} runs)", r.experiment_id, &r.config_hash[..8], r.runs.len());
    if let Some(p) = &r.config.sweep_point {
        println!("  sweep {} = {}", p.parameter.name(), p.value);
    }
    for (k, a) in &r.aggregates {
        if k.contains(".class") {
            continue;
        }
        match a.std {
            Some(s) => println!("  {k:<44} {} ± {}", a.mean, s),
            None => println!("  {k:<44} {}", a.mean),
        }
    }
}
