use std::path::{Path, PathBuf};
use std::process::ExitCode;

use chrono::NaiveDate;
use clap::{Args, Parser, Subcommand};

use omniair::app::{self, RunConfig, StopReason};
use omniair::bench::{run_scaling, BenchConfig};
use omniair::oracle::RdScenario;
use omniair::propagation::{AggregationMode, FusionMode};
use omniair::{Error, Result};

#[derive(Parser)]
#[command(name = "omniair", version, about = "Inductive spatio-temporal graph forecasting for station networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Run configuration file plus per-field overrides.
#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// JSON run configuration; missing fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; overrides OMNIAIR_WORKERS and the config.
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long, value_parser = parse_fusion)]
    fusion_mode: Option<FusionMode>,
    #[arg(long, value_parser = parse_aggregation)]
    aggregation_mode: Option<AggregationMode>,
}

fn parse_enum<T: serde::de::DeserializeOwned>(s: &str) -> std::result::Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

fn parse_fusion(s: &str) -> std::result::Result<FusionMode, String> {
    parse_enum(s)
}

fn parse_aggregation(s: &str) -> std::result::Result<AggregationMode, String> {
    parse_enum(s)
}

fn parse_date(s: &str) -> std::result::Result<NaiveDate, String> {
    NaiveDate::parse_from_str(s, "%Y-%m-%d").map_err(|e| e.to_string())
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Ok(v) = std::env::var("OMNIAIR_WORKERS") {
            cfg.workers = v.trim().parse().map_err(|_| Error::InvalidArgument(format!("OMNIAIR_WORKERS={v:?} is not a count")))?;
        }
        macro_rules! set {
            ($($f:ident),*) => { $(if let Some(v) = self.$f { cfg.$f = v; })* };
        }
        set!(seed, workers, max_epochs, patience, batch_size, lr, window, horizon, fusion_mode, aggregation_mode);
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct DataArgs {
    #[arg(long)]
    stations: PathBuf,
    #[arg(long)]
    series: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Write per-station static feature rows.
    Features {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the hybrid candidate graph as an edge list.
    BuildGraph {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a reaction-diffusion dataset.
    Synth {
        /// JSON scenario; the flags below override it.
        #[arg(long)]
        scenario: Option<PathBuf>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Train and write a checkpoint.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Forecast every trained station from its latest window.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        /// Last input date (YYYY-MM-DD); defaults to the end of the series.
        #[arg(long, value_parser = parse_date)]
        window_end: Option<NaiveDate>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Forecast stations absent at training time.
    PredictUnseen {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        new_stations: PathBuf,
        #[arg(long, value_parser = parse_date)]
        window_end: Option<NaiveDate>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Test-split metrics for the model and the last-value baseline.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Write identity embeddings of the trained stations.
    ExportEmbeddings {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Time the forward pass across station counts.
    Bench {
        #[arg(long, value_delimiter = ',', default_value = "1024,2048,4096,8192")]
        sizes: Vec<usize>,
        #[arg(long, default_value_t = 15)]
        k: usize,
        #[arg(long, default_value_t = 8)]
        window: usize,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Compare reverse-mode gradients with finite differences on a toy model.
    GradCheck {
        #[arg(long, default_value_t = 3)]
        seed: u64,
    },
}

fn init_workers(n: usize) -> Result<()> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(n.max(1))
        .build_global()
        .map_err(|e| Error::Runtime(format!("worker pool: {e}")))
}

fn load_scenario(path: Option<&Path>) -> Result<RdScenario> {
    match path {
        None => Ok(RdScenario::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::Io { path: p.to_path_buf(), source: e })?;
            serde_json::from_str(&text).map_err(|e| Error::InvalidArgument(format!("{}: {e}", p.display())))
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Features { cfg, data, out } => {
            let cfg = cfg.resolve()?;
            init_workers(cfg.workers)?;
            let f = app::run_features(&cfg, &data.stations, &data.series, &out)?;
            println!("wrote {} feature rows of width {}", f.stations.len(), f.rows.shape()[1]);
        }
        Command::BuildGraph { cfg, data, out } => {
            let cfg = cfg.resolve()?;
            init_workers(cfg.workers)?;
            let g = app::run_build_graph(&cfg, &data.stations, &data.series, &out)?;
            println!("wrote {} edges over {} stations", g.num_edges(), g.num_nodes());
        }
        Command::Synth { scenario, n, steps, seed, out_dir } => {
            let mut s = load_scenario(scenario.as_deref())?;
            if let Some(v) = n {
                s.n = v;
            }
            if let Some(v) = steps {
                s.steps = v;
            }
            if let Some(v) = seed {
                s.seed = v;
            }
            app::run_synth(&s, &out_dir)?;
            println!("wrote {} stations x {} steps to {}", s.n, s.steps, out_dir.display());
        }
        Command::Train { cfg, data, out_dir } => {
            let cfg = cfg.resolve()?;
            init_workers(cfg.workers)?;
            let out = app::run_train(&cfg, &data.stations, &data.series, &out_dir)?;
            let log = &out.log;
            println!(
                "{} epochs, best epoch {:?}, best validation MAE {:?}, stop: {:?}",
                log.epochs.len(),
                log.best_epoch,
                log.best_val_mae,
                log.stop_reason
            );
            if log.stop_reason == StopReason::Diverged {
                return Err(Error::Runtime("training diverged; the last good checkpoint was kept".into()));
            }
        }
        Command::Predict { checkpoint, data, window_end, out } => {
            let f = app::run_predict(&checkpoint, &data.stations, &data.series, window_end, &out)?;
            println!("wrote {} forecast rows", f.values.len());
        }
        Command::PredictUnseen { checkpoint, data, new_stations, window_end, out } => {
            let f = app::run_predict_unseen(&checkpoint, &data.stations, &data.series, &new_stations, window_end, &out)?;
            println!("wrote {} forecast rows; parameter digest {}", f.new.values.len(), f.digest_after);
        }
        Command::Evaluate { checkpoint, data, out_dir } => {
            let (model, lv) = app::run_evaluate(&checkpoint, &data.stations, &data.series, &out_dir)?;
            print!("model\n{}last value\n{}", model.to_text(), lv.to_text());
        }
        Command::ExportEmbeddings { checkpoint, out } => app::run_export_embeddings(&checkpoint, &out)?,
        Command::Bench { sizes, k, window, repeats, seed, workers, out_dir } => {
            init_workers(workers)?;
            let report = run_scaling(&BenchConfig::new(sizes, k, window, repeats, seed))?;
            std::fs::create_dir_all(&out_dir).map_err(|e| Error::Io { path: out_dir.clone(), source: e })?;
            report.write(&out_dir.join("bench.csv"), &out_dir.join("bench_loglog.txt"))?;
            print!("{}", report.to_csv());
            println!("slope {:.4}", report.slope);
        }
        Command::GradCheck { seed } => {
            let r = app::grad_check_toy(seed)?;
            println!(
                "max relative error {:.3e} over {} coordinates (worst: {}[{}])",
                r.max_rel_error, r.coords_checked, r.worst_param, r.worst_index
            );
            if !(r.max_rel_error < 1e-4) {
                return Err(Error::Runtime("gradient check failed".into()));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 2 } else { 1 })
        }
    }
}
