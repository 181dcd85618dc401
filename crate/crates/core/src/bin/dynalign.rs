use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dynalign::data::{self, Dataset, Split, SyntheticSpec};
use dynalign::sampler;
use dynalign::train::{self, TrainConfig};
use dynalign::{bench, gradcheck, oracle, Model};

#[derive(Parser)]
#[command(name = "dynalign", version, about = "Few-shot classification by dynamic meta-filter alignment")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct DataArgs {
    /// Dataset directory written by `gen-data`.
    #[arg(long, conflicts_with = "spec")]
    data: Option<PathBuf>,
    /// Synthetic dataset spec (JSON) to generate in memory.
    #[arg(long)]
    spec: Option<PathBuf>,
}

impl DataArgs {
    fn load(&self) -> dynalign::Result<Dataset> {
        match (&self.data, &self.spec) {
            (Some(dir), _) => Dataset::load_dir(dir),
            (None, Some(spec)) => data::generate_synthetic(&read_json(spec)?),
            (None, None) => data::generate_synthetic(&SyntheticSpec::default()),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write a checkpoint; prints one JSON metrics line per epoch.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        /// Checkpoint directory.
        #[arg(long, default_value = "checkpoint")]
        out: PathBuf,
        /// Evaluate on meta-test afterwards with this many episodes.
        #[arg(long, default_value_t = 0)]
        eval_episodes: usize,
    },
    /// Evaluate a checkpoint on meta-test episodes.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value_t = 500)]
        episodes: usize,
        #[arg(long, default_value_t = 5)]
        n: usize,
        #[arg(long, default_value_t = 1)]
        k: usize,
        #[arg(long, default_value_t = 6)]
        q: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value = "meta-test")]
        split: SplitArg,
    },
    /// Compare analytic gradients with central finite differences.
    Gradcheck {
        /// Run a single case; see `--list`.
        #[arg(long)]
        op: Option<String>,
        #[arg(long)]
        list: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Compare every kernel with its naive loop reference.
    Oracle {
        #[arg(long, default_value_t = 20)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write the sampling points of one aligned pair as JSON lines.
    DumpOffsets {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        episode_seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Pair index `query * N + class`.
        #[arg(long, default_value_t = 0)]
        pair: usize,
        #[arg(long, default_value_t = 5)]
        n: usize,
        #[arg(long, default_value_t = 1)]
        k: usize,
    },
    /// Train and evaluate the ablation variants of a benchmark spec (JSON);
    /// without a spec the built-in desk ablation runs.
    Bench {
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Print the spec that would run and exit.
        #[arg(long)]
        print_spec: bool,
    },
    /// Generate a synthetic dataset directory.
    GenData {
        /// Spec file (JSON); defaults are used for missing fields.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum SplitArg {
    MetaTrain,
    MetaVal,
    MetaTest,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::MetaTrain => Split::MetaTrain,
            SplitArg::MetaVal => Split::MetaVal,
            SplitArg::MetaTest => Split::MetaTest,
        }
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> dynalign::Result<T> {
    Ok(serde_json::from_reader(io::BufReader::new(File::open(path)?))?)
}

fn run(cli: Cli) -> dynalign::Result<bool> {
    let stdout = io::stdout();
    let mut out = stdout.lock();
    match cli.command {
        Command::Train {
            config,
            data,
            out: dir,
            eval_episodes,
        } => {
            let config: TrainConfig = read_json(&config)?;
            let dataset = data.load()?;
            let mut write_err = None;
            let outcome = train::train(&config, &dataset, |m| {
                if let Err(e) = train::write_json_line(&mut out, m) {
                    write_err.get_or_insert(e);
                }
            })?;
            if let Some(e) = write_err {
                return Err(e);
            }
            outcome.model.save(&dir)?;
            if eval_episodes > 0 {
                let report = train::evaluate(
                    &outcome.model,
                    &dataset,
                    Split::MetaTest,
                    eval_episodes,
                    config.n_way,
                    config.k_shot,
                    config.n_query,
                    config.seed,
                )?;
                train::write_json_line(&mut out, &report.summary)?;
            }
        }
        Command::Eval {
            checkpoint,
            data,
            episodes,
            n,
            k,
            q,
            seed,
            split,
        } => {
            let model = Model::load(&checkpoint)?;
            let report = train::evaluate(&model, &data.load()?, split.into(), episodes, n, k, q, seed)?;
            train::write_json_line(&mut out, &report.summary)?;
        }
        Command::Gradcheck { op, list, seed } => {
            if list {
                for name in gradcheck::case_names() {
                    writeln!(out, "{name}")?;
                }
                return Ok(true);
            }
            let checks = gradcheck::run_suite(op.as_deref(), seed)?;
            for c in &checks {
                train::write_json_line(&mut out, c)?;
            }
            return Ok(checks.iter().all(|c| c.passed()));
        }
        Command::Oracle { instances, seed } => {
            let results = oracle::run_suite(instances, seed)?;
            for r in &results {
                train::write_json_line(&mut out, r)?;
            }
            return Ok(results.iter().all(|r| r.passed()));
        }
        Command::DumpOffsets {
            checkpoint,
            data,
            episode_seed,
            out: path,
            pair,
            n,
            k,
        } => {
            let model = Model::load(&checkpoint)?;
            let dataset = data.load()?;
            let offsets = train::episode_offsets(&model, &dataset, episode_seed, n, k)?;
            let mut file = BufWriter::new(File::create(&path)?);
            for record in sampler::sampling_points(&offsets, pair)? {
                train::write_json_line(&mut file, &record)?;
            }
            file.flush()?;
        }
        Command::Bench { spec, print_spec } => {
            let spec = match spec {
                Some(p) => read_json(&p)?,
                None => bench::BenchmarkSpec::desk_ablation(),
            };
            if print_spec {
                writeln!(out, "{}", serde_json::to_string_pretty(&spec)?)?;
                return Ok(true);
            }
            let mut write_err = None;
            bench::run(&spec, |r| {
                if let Err(e) = train::write_json_line(&mut out, r).and_then(|_| Ok(out.flush()?)) {
                    write_err.get_or_insert(e);
                }
            })?;
            if let Some(e) = write_err {
                return Err(e);
            }
        }
        Command::GenData { spec, out: dir } => {
            let spec: SyntheticSpec = match spec {
                Some(p) => read_json(&p)?,
                None => SyntheticSpec::default(),
            };
            data::generate_synthetic(&spec)?.save_dir(&dir)?;
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    dynalign::runtime::retain_freed_memory();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
