//! Command-line front end: dataset preparation, training, evaluation,
//! reporting, and synthetic data generation.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use crate::data;
use crate::error::{Error, Result};
use crate::estimator::EstimatorParams;
use crate::gcn::pooled_embeddings;
use crate::graph::{build_graph, AggregationMatrix};
use crate::metrics::{evaluate, weighted_iip_histogram};
use crate::optim::ParamStore;
use crate::synth::{self, SynthConfig};
use crate::trainer::{self, RunOptions, TrainConfig, Variant};

#[derive(Parser)]
#[command(
    name = "graphrec",
    version,
    about = "Graph collaborative filtering with variational aggregation-weight debiasing"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Load raw interactions, binarize, split 7:1:2, and persist the dataset
    Prepare {
        /// Delimited interaction file (user, item, [rating], [timestamp])
        input: PathBuf,
        /// Output dataset directory
        #[arg(long)]
        out: PathBuf,
        /// Flat key=value config file
        #[arg(long)]
        config: Option<PathBuf>,
        /// Field delimiter, or one of: tsv, csv, space
        #[arg(long)]
        format: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train on a prepared dataset directory
    Train {
        /// Prepared dataset directory
        dataset: PathBuf,
        /// Output directory for checkpoints, logs, and reports
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        flags: TrainFlags,
    },
    /// Evaluate a training checkpoint on the test split
    Evaluate {
        /// Training output directory
        checkpoint: PathBuf,
        /// Prepared dataset directory
        dataset: PathBuf,
        /// Ranking cutoff (defaults to the checkpoint's eval_k)
        #[arg(long)]
        k: Option<usize>,
        /// Write the report JSON here in addition to stdout
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Concatenate progress and per-update popularity histograms into one CSV
    Report {
        /// Training output directory
        checkpoint: PathBuf,
        /// Prepared dataset directory
        dataset: PathBuf,
        /// Write the CSV here instead of stdout
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a synthetic long-tail interaction file
    Synth {
        /// Output interaction file (tab separated)
        out_file: PathBuf,
        #[arg(long, default_value_t = 500)]
        users: usize,
        #[arg(long, default_value_t = 300)]
        items: usize,
        #[arg(long, default_value_t = 15_000)]
        interactions: usize,
        #[arg(long, default_value_t = 1.2)]
        zipf: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args, Default)]
struct TrainFlags {
    /// Flat key=value config file; command-line flags take precedence
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Ranking cutoff K
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    eta1: Option<f64>,
    #[arg(long)]
    eta2: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long = "batch-size")]
    batch_size: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    /// Training variant: wo-ts, wo-uc, wo-mu, vanilla, or full
    #[arg(long)]
    ablation: Option<String>,
}

/// Everything a run can configure, resolved from defaults, then the config
/// file, then command-line flags.
#[derive(Debug, Clone)]
pub struct Settings {
    pub train: TrainConfig,
    /// Binarization threshold for explicit ratings.
    pub threshold: f64,
    /// Input delimiter.
    pub format: String,
}

impl Default for Settings {
    fn default() -> Self {
        Settings {
            train: TrainConfig::default(),
            threshold: 5.0,
            format: "\t".into(),
        }
    }
}

const VALID_KEYS: [&str; 18] = [
    "dim",
    "layers",
    "eta1",
    "eta2",
    "gamma",
    "lambda",
    "beta",
    "epsilon",
    "batch_size",
    "max_epochs",
    "patience",
    "seed",
    "eval_k",
    "iip_bins",
    "ablation",
    "threshold",
    "format",
    "verbose",
];

impl Settings {
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("bad value {value:?} for key {key:?}")))
        }
        match key {
            "dim" => self.train.dim = num(key, value)?,
            "layers" => self.train.layers = num(key, value)?,
            "eta1" => self.train.eta1 = num(key, value)?,
            "eta2" => self.train.eta2 = num(key, value)?,
            "gamma" => self.train.gamma = num(key, value)?,
            "lambda" => self.train.lambda = num(key, value)?,
            "beta" => self.train.beta = num(key, value)?,
            "epsilon" => self.train.epsilon = num(key, value)?,
            "batch_size" => self.train.batch_size = num(key, value)?,
            "max_epochs" => self.train.max_epochs = num(key, value)?,
            "patience" => self.train.patience = num(key, value)?,
            "seed" => self.train.seed = num(key, value)?,
            "eval_k" => self.train.eval_k = num(key, value)?,
            "iip_bins" => self.train.iip_bins = num(key, value)?,
            "ablation" => self.train.variant = Variant::parse(value)?,
            "threshold" => self.threshold = num(key, value)?,
            "format" => self.format = delimiter_of(value),
            "verbose" => {} // verbosity comes from the environment
            unknown => {
                return Err(Error::Config(format!(
                    "unknown config key {unknown:?}; valid keys: {}",
                    VALID_KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    pub fn load_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!(
                    "{}:{}: expected key=value, got {line:?}",
                    path.display(),
                    idx + 1
                ))
            })?;
            self.apply(key.trim(), value.trim())?;
        }
        Ok(())
    }
}

fn delimiter_of(format: &str) -> String {
    match format {
        "tsv" | "tab" => "\t".into(),
        "csv" | "comma" => ",".into(),
        "space" => " ".into(),
        other => other.into(),
    }
}

fn verbose_from_env() -> bool {
    std::env::var("GRAPHREC_VERBOSE").is_ok_and(|v| v != "0" && !v.is_empty())
}

fn resolve_settings(flags: &TrainFlags) -> Result<Settings> {
    let mut settings = Settings::default();
    if let Some(path) = &flags.config {
        settings.load_file(path)?;
    }
    let t = &mut settings.train;
    macro_rules! take {
        ($field:ident, $opt:expr) => {
            if let Some(v) = $opt {
                t.$field = v;
            }
        };
    }
    take!(seed, flags.seed);
    take!(eval_k, flags.k);
    take!(max_epochs, flags.epochs);
    take!(eta1, flags.eta1);
    take!(eta2, flags.eta2);
    take!(gamma, flags.gamma);
    take!(lambda, flags.lambda);
    take!(beta, flags.beta);
    take!(epsilon, flags.epsilon);
    take!(layers, flags.layers);
    take!(dim, flags.dim);
    take!(batch_size, flags.batch_size);
    take!(patience, flags.patience);
    if let Some(name) = &flags.ablation {
        settings.train.variant = Variant::parse(name)?;
    }
    Ok(settings)
}

/// Parse arguments and run; returns the process exit code.
pub fn main_entry() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Prepare {
            input,
            out,
            config,
            format,
            seed,
        } => cmd_prepare(&input, &out, config.as_deref(), format.as_deref(), seed),
        Command::Train {
            dataset,
            out,
            flags,
        } => cmd_train(&dataset, &out, &flags),
        Command::Evaluate {
            checkpoint,
            dataset,
            k,
            out,
        } => cmd_evaluate(&checkpoint, &dataset, k, out.as_deref()),
        Command::Report {
            checkpoint,
            dataset,
            out,
        } => cmd_report(&checkpoint, &dataset, out.as_deref()),
        Command::Synth {
            out_file,
            users,
            items,
            interactions,
            zipf,
            seed,
        } => cmd_synth(&out_file, users, items, interactions, zipf, seed),
    }
}

fn cmd_prepare(
    input: &Path,
    out: &Path,
    config: Option<&Path>,
    format: Option<&str>,
    seed: Option<u64>,
) -> Result<()> {
    let mut settings = Settings::default();
    if let Some(path) = config {
        settings.load_file(path)?;
    }
    if let Some(f) = format {
        settings.format = delimiter_of(f);
    }
    if let Some(s) = seed {
        settings.train.seed = s;
    }

    let records = data::load_interactions(input, &settings.format)?;
    let kept = data::binarize(records, settings.threshold);
    let deduped = data::dedup(kept);
    let dataset = data::split(&deduped, (7, 1, 2), settings.train.seed)?;
    data::save_dataset(&dataset, out)?;

    for &(u, i, from) in &dataset.repairs {
        println!("repair: promoted ({u},{i}) from {from:?} into train");
    }
    println!(
        "users={} items={} interactions={} density={:.5}",
        dataset.num_users,
        dataset.num_items,
        dataset.interaction_count(),
        dataset.density()
    );
    Ok(())
}

fn cmd_train(dataset_dir: &Path, out: &Path, flags: &TrainFlags) -> Result<()> {
    let settings = resolve_settings(flags)?;
    let config = settings.train;
    config.validate()?;
    let dataset = data::load_dataset(dataset_dir)?;

    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_json(&out.join("config.json"), &config)?;

    let opts = RunOptions {
        checkpoint_dir: Some(out),
        verbose: verbose_from_env(),
    };
    let result = trainer::run(&config, &dataset, &opts);
    match result {
        Ok(output) => {
            write_json(&out.join("report.json"), &output.report)?;
            let csv_path = out.join("iip_histogram.csv");
            let mut f = fs::File::create(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
            output
                .report
                .iip_histogram
                .write_csv(&mut f)
                .map_err(|e| Error::io(&csv_path, e))?;
            println!(
                "trained {} epochs ({} updates); test recall@{} = {:.6}",
                output.history.len(),
                output.state.update_epochs.len(),
                config.eval_k,
                output.report.all.recall
            );
            Ok(())
        }
        Err(Error::Diverged { epoch, detail }) => {
            let failure = serde_json::json!({
                "status": "diverged",
                "epoch": epoch,
                "detail": detail,
                "variant": config.variant.name(),
            });
            write_json(&out.join("failure.json"), &failure)?;
            Err(Error::Diverged { epoch, detail })
        }
        Err(e) => Err(e),
    }
}

fn latest_snapshot(dir: &Path) -> Result<(usize, PathBuf)> {
    let mut best: Option<(usize, PathBuf)> = None;
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name();
        let name = name.to_string_lossy();
        if let Some(epoch) = name
            .strip_prefix("atilde_e")
            .and_then(|s| s.strip_suffix(".bin"))
            .and_then(|s| s.parse::<usize>().ok())
        {
            if best.as_ref().is_none_or(|(e, _)| epoch > *e) {
                best = Some((epoch, entry.path()));
            }
        }
    }
    best.ok_or_else(|| Error::Config(format!("no weight snapshots under {}", dir.display())))
}

fn sorted_snapshots(dir: &Path) -> Result<Vec<(usize, PathBuf)>> {
    let mut all = Vec::new();
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name();
        let name = name.to_string_lossy();
        if let Some(epoch) = name
            .strip_prefix("atilde_e")
            .and_then(|s| s.strip_suffix(".bin"))
            .and_then(|s| s.parse::<usize>().ok())
        {
            all.push((epoch, entry.path()));
        }
    }
    all.sort_by_key(|(e, _)| *e);
    Ok(all)
}

fn load_checkpoint(checkpoint: &Path) -> Result<(TrainConfig, ParamStore, AggregationMatrix)> {
    let config_path = checkpoint.join("config.json");
    let text = fs::read_to_string(&config_path).map_err(|e| Error::io(&config_path, e))?;
    let config: TrainConfig = serde_json::from_str(&text)?;
    let params = ParamStore::read_binary(&checkpoint.join("params.bin"))?;
    let (_, path) = latest_snapshot(checkpoint)?;
    let (_, _, weights) = AggregationMatrix::read_snapshot(&path)?;
    Ok((config, params, weights))
}

fn cmd_evaluate(
    checkpoint: &Path,
    dataset_dir: &Path,
    k: Option<usize>,
    out: Option<&Path>,
) -> Result<()> {
    let (config, params, weights) = load_checkpoint(checkpoint)?;
    let dataset = data::load_dataset(dataset_dir)?;
    let graph = build_graph(&dataset)?;
    if weights.n() != graph.num_nodes() {
        return Err(Error::Config(
            "checkpoint and dataset disagree on node count".into(),
        ));
    }
    let embedding = params
        .get("embedding")
        .ok_or_else(|| Error::Config("checkpoint params lack an embedding table".into()))?;
    // Sanity-check the estimator layers round-trip with the stored dim.
    let _ = EstimatorParams::from_store(&params, config.dim)?;
    let pooled = pooled_embeddings(&weights, embedding, config.layers)?;
    let report = evaluate(
        &graph,
        &pooled,
        &dataset.train_items_by_user(),
        &data::pairs_by_user(&dataset.test, dataset.num_users),
        k.unwrap_or(config.eval_k),
        &weights,
        config.iip_bins,
    );
    let json = serde_json::to_string_pretty(&report)?;
    println!("{json}");
    if let Some(path) = out {
        fs::write(path, format!("{json}\n")).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

fn cmd_report(checkpoint: &Path, dataset_dir: &Path, out: Option<&Path>) -> Result<()> {
    let config_path = checkpoint.join("config.json");
    let text = fs::read_to_string(&config_path).map_err(|e| Error::io(&config_path, e))?;
    let config: TrainConfig = serde_json::from_str(&text)?;
    let dataset = data::load_dataset(dataset_dir)?;
    let graph = build_graph(&dataset)?;

    let mut csv = String::from("record,epoch,a,b,c\n");
    // Progress rows: a = train_loss, b = val_recall, c = updated.
    let progress_path = checkpoint.join("progress.jsonl");
    if progress_path.exists() {
        let text = fs::read_to_string(&progress_path).map_err(|e| Error::io(&progress_path, e))?;
        for line in text.lines().filter(|l| !l.is_empty()) {
            let rec: trainer::EpochRecord = serde_json::from_str(line)?;
            csv.push_str(&format!(
                "progress,{},{},{},{}\n",
                rec.epoch, rec.train_loss, rec.val_recall, rec.updated
            ));
        }
    }
    // Histogram rows per update stage: a = bin_left, b = bin_right, c = count.
    for (epoch, path) in sorted_snapshots(checkpoint)? {
        let (_, _, weights) = AggregationMatrix::read_snapshot(&path)?;
        if weights.n() != graph.num_nodes() {
            return Err(Error::Config(
                "checkpoint and dataset disagree on node count".into(),
            ));
        }
        let hist = weighted_iip_histogram(&graph, &weights, config.iip_bins);
        for (i, count) in hist.counts.iter().enumerate() {
            let left = i as f64 / hist.bins as f64;
            let right = (i + 1) as f64 / hist.bins as f64;
            csv.push_str(&format!("iip,{epoch},{left},{right},{count}\n"));
        }
    }
    match out {
        Some(path) => fs::write(path, csv).map_err(|e| Error::io(path, e))?,
        None => print!("{csv}"),
    }
    Ok(())
}

fn cmd_synth(
    out_file: &Path,
    users: usize,
    items: usize,
    interactions: usize,
    zipf: f64,
    seed: u64,
) -> Result<()> {
    let records = synth::generate(&SynthConfig {
        num_users: users,
        num_items: items,
        num_interactions: interactions,
        zipf_exponent: zipf,
        seed,
    })?;
    synth::write_interactions(&records, out_file)?;
    println!(
        "wrote {} interactions over {users} users and {items} items to {}",
        records.len(),
        out_file.display()
    );
    Ok(())
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let text = serde_json::to_string_pretty(value)?;
    f.write_all(text.as_bytes())
        .map_err(|e| Error::io(path, e))?;
    f.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    Ok(())
}
