use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nfhybrid_core::eval::{self, BenchKind, BenchOptions};
use nfhybrid_core::segnet::SegNetParams;
use nfhybrid_core::trainer::{self, Phase1Cache, TrainOptions, Trained};
use nfhybrid_core::{flow, scores, seed, toydata, Error, ExperimentConfig, ScoreRegistry, VariantRegistry};

#[derive(Parser)]
#[command(name = "nfhybrid", version, about = "Dense anomaly detection with flow-generated negatives on a toy benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Flat `key = value` config file; defaults are used for missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Variant name (a comma-separated list for `grid`).
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Score kinds, comma-separated: OP, OPxMS, DH, JSD.
    #[arg(long)]
    score: Option<String>,
    #[arg(long = "epochs-1")]
    epochs_1: Option<usize>,
    #[arg(long = "epochs-2")]
    epochs_2: Option<usize>,
    #[arg(long)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Train one variant and evaluate it on the test scenes.
    Train(Common),
    /// Evaluate checkpoints from a training output directory.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Measure scenes per second for segmentation alone and with each score.
    Bench {
        #[command(flatten)]
        common: Common,
        /// Training output directory; a freshly initialised model otherwise.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train and evaluate several variants over the configured seeds.
    Grid(Common),
    /// Write the benchmark scenes (binary, plus a text dump of the first).
    GenData(Common),
    /// Dump flow samples from a checkpoint as text.
    SampleFlow {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Patch side; `side²` samples are drawn.
        #[arg(long, default_value_t = 8)]
        side: usize,
    },
}

/// Exit codes by failure category.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) => 2,
        Error::Format { .. } => 3,
        Error::Io(_) => 4,
        Error::NonFiniteLoss { .. } => 5,
        Error::Autodiff(_) | Error::EmptySupport(_) | Error::NoValidWindow(_) => 6,
    }
}

fn load_config(c: &Common) -> Result<ExperimentConfig, Error> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(v) = &c.variant {
        cfg.variant = v.split(',').next().unwrap_or_default().trim().to_string();
    }
    if let Some(s) = c.seed {
        cfg.seed = s;
        cfg.seeds.clear();
    }
    if let Some(s) = &c.score {
        cfg.scores = scores::parse_kinds(s)?;
    }
    if let Some(e) = c.epochs_1 {
        cfg.epochs_1 = e;
    }
    if let Some(e) = c.epochs_2 {
        cfg.epochs_2 = e;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn info(c: &Common, msg: impl AsRef<str>) {
    if !c.quiet {
        eprintln!("{}", msg.as_ref());
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Train(c) => {
            let cfg = load_config(&c)?;
            info(&c, format!("training {} (seed {})", cfg.variant, cfg.seed));
            let (_, record) = trainer::train(&cfg, c.out.as_deref(), TrainOptions { verbose: !c.quiet })?;
            if let Some(out) = &c.out {
                std::fs::write(out.join("config.conf"), cfg.to_text())?;
            }
            print!("{}", record.to_text());
            println!();
            print!("{}", record.csv());
        }
        Command::Eval { common: c, checkpoint } => {
            let cfg = load_config(&c)?;
            let trained = Trained::load(&checkpoint)?;
            let data = trainer::build_dataset(&cfg)?;
            let v = cfg.variant_config()?;
            let registry = ScoreRegistry::with_temperature(cfg.temperature)?;
            let reports = trainer::evaluate(
                &trained.seg,
                &data.test,
                &cfg.score_kinds()?,
                &registry,
                v.method.label(),
                cfg.tpr_target,
            )?;
            for r in &reports {
                print!("{}", r.to_text());
                println!();
            }
            println!("{}", eval::CSV_HEADER);
            for r in &reports {
                println!("{}", r.csv_row());
            }
        }
        Command::Bench { common: c, checkpoint } => {
            let cfg = load_config(&c)?;
            let params = match &checkpoint {
                Some(dir) => Trained::load(dir)?.seg,
                None => SegNetParams::new(cfg.feature_dim, &cfg.seg_hidden, cfg.classes, cfg.seed)?,
            };
            let data = trainer::build_dataset(&cfg)?;
            let mut kinds = vec![BenchKind::SegmentationOnly];
            let scored = match &c.score {
                Some(_) => cfg.scores.clone(),
                None => vec![scores::ScoreKind::OpMs, scores::ScoreKind::Dh, scores::ScoreKind::Jsd],
            };
            kinds.extend(scored.into_iter().map(BenchKind::Scored));
            let registry = ScoreRegistry::with_temperature(cfg.temperature)?;
            let opts = BenchOptions {
                warmup: 3,
                repeats: cfg.bench_repeats,
                ..BenchOptions::default()
            };
            let results = eval::bench_throughput(&params, &registry, &kinds, &data.test, opts)?;
            println!("kind,scenes_per_sec,cv");
            for t in results {
                println!("{},{:.3},{:.4}", t.kind.name(), t.median, t.cv);
            }
        }
        Command::Grid(c) => {
            let base = load_config(&c)?;
            let names: Vec<String> = match &c.variant {
                Some(list) => list.split(',').map(|s| s.trim().to_string()).collect(),
                None => VariantRegistry::standard().names().iter().map(|s| s.to_string()).collect(),
            };
            let configs: Vec<ExperimentConfig> = names
                .into_iter()
                .map(|variant| ExperimentConfig { variant, ..base.clone() })
                .collect();
            let mut cache = Phase1Cache::default();
            let outcome = trainer::run_grid(&configs, c.out.as_deref(), &mut cache, TrainOptions { verbose: false })?;
            info(&c, format!("{} runs trained", outcome.trained_runs));
            for (v, s, e) in &outcome.failures {
                eprintln!("run {v} seed {s} failed: {e}");
            }
            print!("{}", outcome.table());
            if let Some(out) = &c.out {
                std::fs::write(out.join("grid.csv"), outcome.csv())?;
            }
            if !outcome.failures.is_empty() {
                return Err(Error::Config(format!("{} grid runs failed", outcome.failures.len())));
            }
        }
        Command::GenData(c) => {
            let cfg = load_config(&c)?;
            let out = c.out.clone().unwrap_or_else(|| PathBuf::from("data"));
            let data = trainer::build_dataset(&cfg)?;
            std::fs::create_dir_all(&out)?;
            write_scenes(&out, "train", &data.train)?;
            write_scenes(&out, "test", &data.test)?;
            let mut w = BufWriter::new(File::create(out.join("test_000.txt"))?);
            toydata::export_scene_text(&mut w, &data.test[0])?;
            w.flush()?;
            info(&c, format!("wrote {} train and {} test scenes to {}", data.train.len(), data.test.len(), out.display()));
        }
        Command::SampleFlow { common: c, checkpoint, side } => {
            let cfg = load_config(&c)?;
            let trained = Trained::load(&checkpoint)?;
            let f = trained
                .flow
                .ok_or_else(|| Error::Config("checkpoint has no flow".into()))?;
            let patch = flow::sample_patch(&f, seed::derive(cfg.seed, &[0xf10]), side)?;
            let mut w: Box<dyn Write> = match &c.out {
                Some(p) => Box::new(BufWriter::new(File::create(p)?)),
                None => Box::new(std::io::stdout().lock()),
            };
            for row in patch.features.chunks(patch.dim) {
                let line: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
                writeln!(w, "{}", line.join(" "))?;
            }
            w.flush()?;
        }
    }
    Ok(())
}

fn write_scenes(dir: &Path, prefix: &str, scenes: &[toydata::Scene]) -> Result<(), Error> {
    for (i, s) in scenes.iter().enumerate() {
        let mut w = BufWriter::new(File::create(dir.join(format!("{prefix}_{i:03}.scene")))?);
        toydata::write_scene(&mut w, s)?;
        w.flush()?;
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
