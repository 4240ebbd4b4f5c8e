//! The `hlight` command line.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use crate::bench::{bench_cosine, bench_scoring};
use crate::data::{generate_synthetic, load_annotations, Dataset, SynthSpec};
use crate::encoder::checkpoint::Checkpoint;
use crate::evalhd::{compare_pooling, evaluate_predictions, predict, read_predictions, to_records, write_predictions};
use crate::saliency::DEFAULT_POOL_RADIUS;
use crate::training::{grad_check, train, GradCheckConfig, TrainConfig, TrainOptions};

#[derive(Debug, Parser)]
#[command(name = "hlight", version, about = "Highlight detection by fine-tuned dual-encoder saliency")]
struct Cli {
    /// Worker threads; 1 gives the bitwise reference run.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic dataset.
    GenSynth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fine-tune both encoder tops.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Start from this checkpoint instead of a fresh initialization.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Add wall_time_ms to each log line.
        #[arg(long)]
        log_timing: bool,
    },
    /// Score every clip of a dataset and write a predictions file.
    Predict {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value_t = DEFAULT_POOL_RADIUS)]
        pool_radius: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a predictions file against annotations.
    Eval {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long, default_value_t = 0)]
        pool_radius: usize,
        #[arg(long)]
        report: PathBuf,
    },
    /// Evaluate one checkpoint at several pooling radii.
    CompareSp {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        radii: Vec<usize>,
        #[arg(long)]
        report: PathBuf,
        /// CSV table; defaults to the report path with a .csv extension.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Compare analytic gradients with central differences.
    Gradcheck {
        /// A single configuration to check instead of the built-in suite.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Scoring throughput with one worker and with all workers.
    Bench {
        #[command(flatten)]
        model: ModelArgs,
        /// Embedding width for the cosine benchmark; the checkpoint's by default.
        #[arg(long)]
        cosine_dim: Option<usize>,
    },
}

#[derive(Debug, Args)]
struct ModelArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
}

impl ModelArgs {
    fn load(&self) -> Result<(Checkpoint, Dataset)> {
        let ckpt = Checkpoint::load(&self.checkpoint).with_context(|| format!("loading {}", self.checkpoint.display()))?;
        let data = Dataset::load(&self.data).with_context(|| format!("loading data {}", self.data.display()))?;
        Ok((ckpt, data))
    }
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenSynth { .. } => "gen-synth",
            Command::Train { .. } => "train",
            Command::Predict { .. } => "predict",
            Command::Eval { .. } => "eval",
            Command::CompareSp { .. } => "compare-sp",
            Command::Gradcheck { .. } => "gradcheck",
            Command::Bench { .. } => "bench",
        }
    }
}

/// Parses `args` (program name first), runs the command, and returns the
/// process exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    print!("{e}");
                    0
                }
                ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => {
                    eprint!("{e}");
                    2
                }
                _ => {
                    let text = e.to_string();
                    let first = text.lines().next().unwrap_or("").trim_start_matches("error: ");
                    eprintln!("error: usage: {first} (see hlight --help)");
                    2
                }
            };
        }
    };
    let name = cli.command.name();
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {name}: {}", one_line(&e));
            1
        }
    }
}

/// The error chain on one line, skipping causes whose text the previous
/// message already includes.
fn one_line(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let text = cause.to_string();
        if out.contains(&text) {
            continue;
        }
        if !out.is_empty() {
            out.push_str(": ");
        }
        out.push_str(&text);
    }
    out.replace('\n', " ")
}

fn execute(cli: Cli) -> Result<()> {
    let workers = match cli.workers {
        Some(0) => bail!("--workers must be at least 1"),
        Some(n) => n,
        None => std::thread::available_parallelism().map_or(1, |n| n.get()),
    };
    let pool = rayon::ThreadPoolBuilder::new().num_threads(workers).build()?;
    pool.install(|| dispatch(cli.command, workers))
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn dispatch(command: Command, workers: usize) -> Result<()> {
    match command {
        Command::GenSynth { spec, out } => {
            let spec = SynthSpec::load(&spec)?;
            let data = generate_synthetic(&spec)?;
            data.write(&out)?;
            println!(
                "wrote {} videos to {} (oracle separation {:.3})",
                data.records.len(),
                out.display(),
                data.oracle_separation
            );
        }
        Command::Train {
            config,
            data,
            out,
            init,
            log_timing,
        } => {
            let config = TrainConfig::load(&config)?;
            let dataset = Dataset::load(&data).with_context(|| format!("loading data {}", data.display()))?;
            let init = match init {
                Some(p) => Some(Checkpoint::load_expecting(&p, &config.vision_config(), &config.text_config())?.model),
                None => None,
            };
            let outcome = train(
                &dataset,
                &config,
                TrainOptions {
                    out_dir: Some(out.clone()),
                    init,
                    log_timing,
                },
            )?;
            match outcome.reports.last() {
                Some(r) => println!("step {} loss {:.6} grad_norm {:.6}", r.step, r.loss, r.grad_norm),
                None => println!("no steps run; wrote initial weights"),
            }
            println!("checkpoint written to {}", out.display());
        }
        Command::Predict {
            model,
            pool_radius,
            out,
        } => {
            let (ckpt, data) = model.load()?;
            let preds = predict(&ckpt.model, &data, pool_radius)?;
            write_predictions(&out, &to_records(&preds))?;
            println!("wrote {} predictions to {}", preds.len(), out.display());
        }
        Command::Eval {
            predictions,
            annotations,
            pool_radius,
            report,
        } => {
            let preds = read_predictions(&predictions)?;
            let records = load_annotations(&annotations)?;
            let r = evaluate_predictions(&preds, &records, pool_radius)?;
            write_file(&report, &r.to_json())?;
            println!(
                "{} queries={} mAP={:.2} HIT@1={:.2}",
                r.variant, r.n_queries, r.map_x100, r.hit_at_1_x100
            );
        }
        Command::CompareSp {
            model,
            radii,
            report,
            csv,
        } => {
            let (ckpt, data) = model.load()?;
            let table = compare_pooling(&ckpt.model, &data, &radii)?;
            write_file(&report, &table.to_json())?;
            write_file(&csv.unwrap_or_else(|| report.with_extension("csv")), &table.to_csv())?;
            print!("{}", table.to_text());
        }
        Command::Gradcheck { config, seed } => {
            let configs = match config {
                Some(path) => {
                    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
                    vec![toml::from_str::<GradCheckConfig>(&text).with_context(|| format!("parsing {}", path.display()))?]
                }
                None => GradCheckConfig::suite(),
            };
            let mut failed = Vec::new();
            for c in &configs {
                let r = grad_check(c, seed)?;
                println!(
                    "{}: max_relative_error={:.3e} worst={}[{}] coordinates={} {}",
                    c.label(),
                    r.max_relative_error,
                    r.worst_tensor,
                    r.worst_index,
                    r.coordinates,
                    if r.passed() { "PASS" } else { "FAIL" }
                );
                if !r.passed() {
                    failed.push(format!("{} at {}", c.label(), r.worst_tensor));
                }
            }
            if !failed.is_empty() {
                bail!("gradient check failed: {}", failed.join("; "));
            }
        }
        Command::Bench { model, cosine_dim } => {
            let (ckpt, data) = model.load()?;
            let dim = cosine_dim.unwrap_or(ckpt.model.joint_dim());
            let mut counts = vec![1];
            if workers > 1 {
                counts.push(workers);
            }
            for w in counts {
                let cos = bench_cosine(dim, 64, 75, 20, w);
                println!("{}", serde_json::to_string(&cos)?);
                let clips = bench_scoring(&ckpt.model, &data, w)?;
                println!("{}", serde_json::to_string(&clips)?);
            }
        }
    }
    Ok(())
}
