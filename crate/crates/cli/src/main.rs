//! `taco`: train compressor/predictor models, run fit-predict, benchmark.

mod config;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use taco_core::bench::{emit_report, run_grid, synthetic_table, ReportFormat};
use taco_core::infer::{fit, Mode, TimingRecord};
use taco_core::metrics::{roc_auc_ovo, OvoWeighting};
use taco_core::model::PREDICTOR;
use taco_core::prior::episode;
use taco_core::table::{load_csv, preprocess, ColumnKind, SchemaHints, Table};
use taco_core::train::{run_training, RateMode, Trainer};
use taco_core::{Error, TacoModel};

use config::{CliError, FileConfig};

#[derive(Parser)]
#[command(name = "taco", version, about = "Tabular in-context classification with compressed training contexts")]
struct Cli {
    /// TOML run configuration with [model], [prior], [train], [fit] and
    /// [bench] sections. Command-line flags override file values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every random choice (model init, task stream, dummy rows,
    /// subsampling, synthetic data). Wall-clock timings are not covered.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Meta-train on synthetic tasks from the structural-causal-model prior.
    Train(TrainArgs),
    /// Build a context from a training table once, then classify test rows
    /// in streamed batches.
    FitPredict(FitPredictArgs),
    /// Latency and memory grid over training rows N and feature count M.
    Bench(BenchArgs),
    /// Inspect the synthetic task prior.
    Prior {
        #[command(subcommand)]
        command: PriorCommand,
    },
}

#[derive(Args)]
struct TrainArgs {
    /// Optimizer steps to run in total.
    #[arg(long)]
    steps: Option<u64>,
    /// Directory for checkpoints and the metrics log.
    #[arg(long, default_value = "runs/train")]
    out: PathBuf,
    /// Keep predictor weights fixed and train only the compressor and bridge.
    #[arg(long)]
    freeze_predictor: bool,
    /// Training objective: "taco" (compressed context) or "pot" (predictor
    /// alone on the full context).
    #[arg(long)]
    objective: Option<String>,
    /// Fixed compression rate r = K / N_train.
    #[arg(long, conflicts_with = "multi_rate")]
    rate: Option<f64>,
    /// Draw the rate of every step from {1, 2, 4, 8, 16}%.
    #[arg(long)]
    multi_rate: bool,
    /// Copy predictor weights from this checkpoint before training.
    #[arg(long)]
    init_predictor: Option<PathBuf>,
    /// Continue from a training checkpoint (optimizer state included).
    #[arg(long, conflicts_with = "init_predictor")]
    resume: Option<PathBuf>,
    /// Print a loss line every this many steps.
    #[arg(long, default_value_t = 10)]
    log_every: u64,
}

#[derive(Args)]
struct FitPredictArgs {
    /// Model file or training checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Labeled training CSV (the context).
    #[arg(long, required_unless_present = "synthetic")]
    train: Option<PathBuf>,
    /// Test CSV; a target column is used for ROC-AUC when present.
    #[arg(long, required_unless_present = "synthetic")]
    test: Option<PathBuf>,
    /// Target column name (default: last column).
    #[arg(long)]
    target: Option<String>,
    /// Test CSV has no target column.
    #[arg(long)]
    test_unlabeled: bool,
    /// Generate data instead of reading CSVs: "N,M" training rows and features.
    #[arg(long, value_name = "N,M", conflicts_with_all = ["train", "test"])]
    synthetic: Option<String>,
    /// Test rows for synthetic data.
    #[arg(long, default_value_t = 500)]
    test_rows: usize,
    /// Context construction: taco (compressed), pot (full table),
    /// random (uniform subset) or knn (nearest neighbors of the batch).
    #[arg(long)]
    mode: Option<String>,
    /// Compression rate r = K / N_train for taco, random and knn.
    #[arg(long)]
    rate: Option<f64>,
    /// Precompute context keys and values so batches only process their
    /// own rows.
    #[arg(long)]
    kv_cache: bool,
    /// Compress large tables chunk by chunk and stitch the summaries.
    #[arg(long)]
    chunk: bool,
    /// Chunk size override (default: size-based policy).
    #[arg(long)]
    chunk_size: Option<usize>,
    /// Number of streamed test batches after one warmup call.
    #[arg(long)]
    batches: Option<usize>,
    /// Activation budget in bytes; larger requests fail with a capacity error.
    #[arg(long)]
    memory_limit: Option<usize>,
    /// Output directory for predictions.csv and timings.ndjson.
    #[arg(long, default_value = "runs/predict")]
    out: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    /// Model file or training checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Output directory for results.csv and the reports.
    #[arg(long, default_value = "runs/bench")]
    out: PathBuf,
    /// Training row counts, comma separated.
    #[arg(long, value_delimiter = ',')]
    ns: Option<Vec<usize>>,
    /// Feature counts, comma separated.
    #[arg(long, value_delimiter = ',')]
    ms: Option<Vec<usize>>,
    /// Modes to compare, comma separated.
    #[arg(long, value_delimiter = ',')]
    modes: Option<Vec<String>>,
    /// Compression rate for taco, random and knn.
    #[arg(long)]
    rate: Option<f64>,
    /// Test batches per pass (1, 10 or 100 in the streaming scenarios).
    #[arg(long)]
    batches: Option<usize>,
    /// Passes over the test set.
    #[arg(long)]
    repetitions: Option<usize>,
    #[arg(long)]
    test_rows: Option<usize>,
    /// Disable the key/value cache.
    #[arg(long)]
    no_kv_cache: bool,
    /// Activation budget in bytes; cells over it are recorded as OOM.
    #[arg(long)]
    memory_limit: Option<usize>,
    /// Exit with the capacity code when any cell ran out of memory.
    #[arg(long)]
    strict: bool,
    /// Report formats: csv, json, svg-heatmap, svg-lines.
    #[arg(long, value_delimiter = ',', default_value = "json,svg-heatmap,svg-lines")]
    formats: Vec<String>,
}

#[derive(Subcommand)]
enum PriorCommand {
    /// Write sampled tasks as <stem>_train.csv / <stem>_test.csv pairs.
    Export {
        #[arg(long, default_value_t = 10)]
        count: u64,
        #[arg(long, default_value = "runs/prior")]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let file = match &cli.config {
        Some(path) => FileConfig::load(path)?,
        None => FileConfig::default(),
    };
    match cli.command {
        Command::Train(args) => cmd_train(&file, cli.seed, args),
        Command::FitPredict(args) => cmd_fit_predict(&file, cli.seed, args),
        Command::Bench(args) => cmd_bench(&file, cli.seed, args),
        Command::Prior {
            command: PriorCommand::Export { count, out },
        } => cmd_prior_export(&file, cli.seed, count, &out),
    }
}

fn file_sha256(path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path).map_err(Error::from)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn cmd_train(file: &FileConfig, seed: Option<u64>, args: TrainArgs) -> Result<(), CliError> {
    let mut trainer = match &args.resume {
        Some(path) => Trainer::load(path)?,
        None => {
            let mut cfg = file.train_config()?;
            if let Some(s) = seed {
                cfg.seed = s;
                cfg.prior.seed = s;
            }
            if let Some(steps) = args.steps {
                cfg.steps = steps;
            }
            if args.freeze_predictor {
                cfg.freeze_predictor = true;
            }
            if let Some(obj) = &args.objective {
                cfg.objective = config::parse_objective(obj)?;
            }
            if let Some(r) = args.rate {
                cfg.rate_mode = RateMode::Fixed(r);
            }
            if args.multi_rate {
                cfg.rate_mode = RateMode::multi();
            }
            let mut model = TacoModel::init(&cfg.model, cfg.seed)?;
            if let Some(path) = &args.init_predictor {
                model.copy_prefix(&TacoModel::load(path)?, PREDICTOR)?;
            }
            Trainer::new(cfg, model)?
        }
    };
    if args.resume.is_some() {
        if let Some(steps) = args.steps {
            trainer.cfg.steps = steps;
            trainer.cfg.validate()?;
        }
    }
    let every = args.log_every.max(1);
    let report = run_training(trainer, &args.out, |s| {
        if s.step % every == 0 || s.step == 1 {
            println!(
                "step {:>6} loss {:.4} grad_norm {:.3} lr {:.2e} rate {:.3} eps/s {:.1}",
                s.step, s.loss, s.grad_norm, s.lr, s.rate, s.episodes_per_sec
            );
        }
    })?;
    for path in &report.checkpoints {
        let model = TacoModel::load(path)?;
        println!(
            "checkpoint {} predictor {}",
            path.display(),
            &model.store.hash_prefix(PREDICTOR)[..16]
        );
    }
    if let Some(last) = report.checkpoints.last() {
        let final_model = args.out.join("model.bin");
        report.trainer.model.save(&final_model)?;
        println!("final checkpoint {} sha256 {}", last.display(), file_sha256(last)?);
        println!("model {} sha256 {}", final_model.display(), file_sha256(&final_model)?);
    }
    Ok(())
}

/// Reads the test CSV with the column kinds of the training table so both
/// share one schema.
fn load_pair(train: &Path, test: &Path, target: Option<String>, test_unlabeled: bool) -> Result<(Table, Table), CliError> {
    let hints = SchemaHints {
        target: target.clone(),
        ..SchemaHints::default()
    };
    let train = load_csv(train, &hints)?;
    let (categorical, numeric) = train.columns().iter().fold((vec![], vec![]), |(mut c, mut n), col| {
        match col.kind {
            ColumnKind::Categorical => c.push(col.name.clone()),
            ColumnKind::Numeric => n.push(col.name.clone()),
        }
        (c, n)
    });
    let test_hints = SchemaHints {
        target,
        no_target: test_unlabeled,
        categorical,
        numeric,
    };
    let test = load_csv(test, &test_hints)?;
    train.check_same_schema(&test)?;
    Ok((train, test))
}

fn cmd_fit_predict(file: &FileConfig, seed: Option<u64>, args: FitPredictArgs) -> Result<(), CliError> {
    let model = TacoModel::load(&args.checkpoint)?;
    let mut opts = file.fit.clone();
    if let Some(s) = seed {
        opts.seed = s;
    }
    if let Some(m) = &args.mode {
        opts.mode = m.parse()?;
    }
    if let Some(r) = args.rate {
        opts.rate = r;
    }
    opts.kv_cache |= args.kv_cache;
    opts.chunking |= args.chunk;
    if args.chunk_size.is_some() {
        opts.chunk_size = args.chunk_size;
    }
    if args.memory_limit.is_some() {
        opts.memory_limit = args.memory_limit;
    }
    let batches = args.batches.unwrap_or(file.predict.batches).max(1);
    let (train, test) = match (&args.synthetic, &args.train, &args.test) {
        (Some(spec), _, _) => {
            let (n, m) = config::parse_pair(spec)?;
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            let data = synthetic_table(n + args.test_rows, m, &mut rng);
            (data.slice_rows(0, n), data.slice_rows(n, n + args.test_rows))
        }
        (None, Some(tr), Some(te)) => load_pair(tr, te, args.target.clone(), args.test_unlabeled)?,
        _ => return Err(CliError::Config("need --train and --test, or --synthetic".into())),
    };
    if test.n_rows() < batches {
        return Err(CliError::Data(format!("{} test rows cannot fill {batches} batches", test.n_rows())));
    }
    fs::create_dir_all(&args.out).map_err(Error::from)?;
    let (state, fit_rec) = fit(&model, &train, &opts)?;
    println!(
        "mode {} N={} M={} K={} cached={}",
        state.mode,
        state.n_train,
        state.columns.len(),
        state.context_rows(),
        state.kv.is_some()
    );
    let mut records: Vec<TimingRecord> = vec![fit_rec];
    let queries = test.without_target();
    // Warmup on the first batch; its output is discarded.
    let first_end = test.n_rows() / batches;
    let (_, warm) = state.predict(&model, &queries.slice_rows(0, first_end.max(1)))?;
    records.push(warm);
    let mut probs = Vec::with_capacity(test.n_rows() * state.n_classes);
    for b in 0..batches {
        let (s, e) = (b * test.n_rows() / batches, (b + 1) * test.n_rows() / batches);
        let (p, rec) = state.predict(&model, &queries.slice_rows(s, e))?;
        probs.extend_from_slice(p.data());
        records.push(rec);
    }
    let classes = train
        .target()
        .map(|t| t.classes.clone())
        .ok_or_else(|| CliError::Data("training table has no target".into()))?;
    write_predictions(&args.out.join("predictions.csv"), &classes, &probs)?;
    let mut w = BufWriter::new(File::create(args.out.join("timings.ndjson")).map_err(Error::from)?);
    for r in &records {
        serde_json::to_writer(&mut w, r).map_err(Error::from)?;
        w.write_all(b"\n").map_err(Error::from)?;
    }
    w.flush().map_err(Error::from)?;
    if test.target().is_some() {
        let (mapped, _) = preprocess(&test, Some(&state.stats))?;
        let labels = mapped.labels().expect("labels kept by preprocessing");
        match roc_auc_ovo(&probs, state.n_classes, labels, OvoWeighting::Macro) {
            Ok(auc) => println!("auc {auc:.6}"),
            Err(e) => println!("auc undefined: {e}"),
        }
    }
    let sub: Vec<f64> = records.iter().skip(2).map(|r| r.wall_ms).collect();
    println!(
        "fit {:.2} ms, first predict {:.2} ms, subsequent predict {:.3} ms mean over {} batches",
        records[0].wall_ms,
        records[1].wall_ms,
        sub.iter().sum::<f64>() / sub.len() as f64,
        sub.len()
    );
    Ok(())
}

fn write_predictions(path: &Path, classes: &[String], probs: &[f64]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(Error::from)?;
    let mut header = vec!["row".to_string()];
    header.extend(classes.iter().map(|c| format!("p_{c}")));
    header.push("predicted".into());
    w.write_record(&header).map_err(Error::from)?;
    let c = classes.len();
    for (i, row) in probs.chunks(c).enumerate() {
        let best = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map_or(0, |(j, _)| j);
        let mut rec = vec![i.to_string()];
        rec.extend(row.iter().map(|p| p.to_string()));
        rec.push(classes[best].clone());
        w.write_record(&rec).map_err(Error::from)?;
    }
    w.flush().map_err(Error::from)?;
    Ok(())
}

fn cmd_bench(file: &FileConfig, seed: Option<u64>, args: BenchArgs) -> Result<(), CliError> {
    let model = TacoModel::load(&args.checkpoint)?;
    let mut grid = file.bench.clone();
    if let Some(s) = seed {
        grid.seed = s;
    }
    if let Some(v) = args.ns {
        grid.ns = v;
    }
    if let Some(v) = args.ms {
        grid.ms = v;
    }
    if let Some(v) = &args.modes {
        grid.modes = v.iter().map(|m| m.parse::<Mode>()).collect::<Result<_, _>>()?;
    }
    if let Some(r) = args.rate {
        grid.rate = r;
    }
    if let Some(b) = args.batches {
        grid.batches = b;
    }
    if let Some(r) = args.repetitions {
        grid.repetitions = r;
    }
    if let Some(t) = args.test_rows {
        grid.test_rows = t;
    }
    if args.no_kv_cache {
        grid.kv_cache = false;
    }
    if args.memory_limit.is_some() {
        grid.memory_limit = args.memory_limit;
    }
    let formats: Vec<ReportFormat> = args.formats.iter().map(|f| f.parse()).collect::<Result<_, _>>()?;
    fs::create_dir_all(&args.out).map_err(Error::from)?;
    let results = args.out.join("results.csv");
    if results.exists() {
        fs::remove_file(&results).map_err(Error::from)?;
    }
    let cells = run_grid(&grid, &model, Some(&results))?;
    for c in &cells {
        let sub = taco_core::bench::split_first(&c.predict_ms).1.map(|(m, _)| m);
        match (c.oom, sub) {
            (true, _) => println!("{} N={} M={}: OOM", c.mode, c.n, c.m),
            (false, s) => println!(
                "{} N={} M={} K={}: subsequent {} ms, peak {} bytes, auc {}",
                c.mode,
                c.n,
                c.m,
                c.k,
                s.map_or("-".into(), |v| format!("{v:.3}")),
                c.predict_peak_bytes,
                c.auc.map_or("-".into(), |a| format!("{a:.4}"))
            ),
        }
    }
    for f in formats {
        let name = match f {
            ReportFormat::Csv => "report.csv",
            ReportFormat::Json => "report.json",
            ReportFormat::SvgHeatmap => "heatmap.svg",
            ReportFormat::SvgLines => "cumulative.svg",
        };
        emit_report(&cells, f, &args.out.join(name))?;
    }
    println!("results {}", results.display());
    if args.strict && cells.iter().any(|c| c.oom) {
        let n = cells.iter().filter(|c| c.oom).count();
        return Err(CliError::Capacity(format!("{n} cell(s) exceeded the memory budget")));
    }
    Ok(())
}

fn cmd_prior_export(file: &FileConfig, seed: Option<u64>, count: u64, out: &Path) -> Result<(), CliError> {
    let mut prior = file.prior_config()?;
    if let Some(s) = seed {
        prior.seed = s;
    }
    prior.validate()?;
    for i in 0..count {
        let ep = episode(&prior, i)?;
        ep.export_csv(out, &format!("task_{i:05}"))?;
    }
    println!("wrote {count} tasks to {}", out.display());
    Ok(())
}
