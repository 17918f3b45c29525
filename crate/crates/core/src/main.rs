use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;

use spikedist::aggregate::AggregateConfig;
use spikedist::error::{Error, Result};
use spikedist::experiments::{self, ExperimentConfig};
use spikedist::ingest::{self, LoadOptions};
use spikedist::localnode::{ReportOptions, SpikeHint};
use spikedist::protocol::{self, ReportMessage, WorkerTask};
use spikedist::sampler::LocalDataset;
use spikedist::spectrum::SpikeSide;

#[derive(Parser)]
#[command(name = "spikedist", version, about = "Distributed estimation of spiked covariance eigenvalues")]
struct Cli {
    /// JSON configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; overrides the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output path; stdout when omitted.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw one replication's shards from the first grid cell and write them as CSV files into `--out`.
    Simulate,
    /// MSE table over the p × m grid.
    MseTable,
    /// Machine-count sweep at the first p, then dimension sweep at the first m.
    Sweeps,
    /// Compare pilot-value strategies on identical replications.
    Initials,
    /// Standardized errors, histogram and KS distance; writes `<out>_z.csv` and `<out>_bins.csv`.
    Normality,
    /// Weighted MSE against total sample size and its log-log slope.
    Rate,
    /// Pooled / weighted / average top-spike estimates on a real CSV.
    Analyze {
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated machine counts.
        #[arg(long, value_delimiter = ',', default_value = "1,5,10,20")]
        m_grid: Vec<usize>,
        #[arg(long)]
        no_header: bool,
        #[arg(long)]
        no_standardize: bool,
    },
    /// Run one worker on a shard CSV and print its report line.
    Worker {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        worker_id: usize,
        #[arg(long, default_value_t = 1)]
        k: usize,
        #[arg(long, default_value = "upper")]
        side: SpikeSide,
        /// Total number of spikes in the model.
        #[arg(long, default_value_t = 1)]
        spikes: usize,
        #[arg(long)]
        skip_u4: bool,
    },
    /// Aggregate report lines (from `--input` or stdin) into one estimate.
    Coordinate {
        #[arg(long)]
        input: Option<PathBuf>,
        /// Dimension; inferred from the reports when omitted.
        #[arg(long)]
        p: Option<usize>,
    },
}

#[derive(Serialize)]
struct ErrorReport<'a> {
    error: &'a str,
    message: String,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let report = ErrorReport {
                error: e.kind(),
                message: e.to_string(),
            };
            eprintln!("{}", serde_json::to_string(&report).unwrap_or_else(|_| e.to_string()));
            ExitCode::from(2)
        }
    }
}

fn read_config(path: Option<&Path>) -> Result<String> {
    let path = path.ok_or_else(|| Error::Config("--config is required for this command".into()))?;
    std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn experiment_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::from_json(&read_config(cli.config.as_deref())?)?;
    if let Some(s) = cli.seed {
        cfg.master_seed = s;
    }
    Ok(cfg)
}

fn write_rows<T: Serialize>(out: Option<&Path>, rows: &[T]) -> Result<()> {
    match out {
        Some(path) => experiments::write_csv(path, rows),
        None => {
            let mut w = csv::Writer::from_writer(std::io::stdout().lock());
            for row in rows {
                w.serialize(row).map_err(|e| Error::Io(e.into()))?;
            }
            w.flush()?;
            Ok(())
        }
    }
}

fn write_json<T: Serialize>(out: Option<&Path>, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Parse(e.to_string()))?;
    match out {
        Some(path) => std::fs::write(path, text + "\n")?,
        None => println!("{text}"),
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let out = cli.out.as_deref();
    match &cli.command {
        Command::Simulate => {
            let cfg = experiment_config(&cli)?;
            let dir = out.ok_or_else(|| Error::Config("simulate needs --out <directory>".into()))?;
            std::fs::create_dir_all(dir)?;
            let (p, m) = (cfg.p_grid[0], cfg.m_grid[0]);
            let shards = experiments::draw_shards(&cfg, p, m, 0)?;
            for shard in &shards {
                shard.write_csv(&dir.join(format!("shard-{}.csv", shard.worker_id)))?;
            }
            let sizes: Vec<usize> = shards.iter().map(LocalDataset::n).collect();
            println!("{}", serde_json::json!({ "p": p, "sizes": sizes }));
        }
        Command::MseTable => write_rows(out, &experiments::run_mse_grid(&experiment_config(&cli)?)?)?,
        Command::Sweeps => write_rows(out, &experiments::run_sweeps(&experiment_config(&cli)?)?)?,
        Command::Initials => write_rows(out, &experiments::run_initials(&experiment_config(&cli)?)?)?,
        Command::Normality => {
            let result = experiments::run_normality(&experiment_config(&cli)?)?;
            let summary = serde_json::json!({
                "reps": result.z.len(),
                "failures": result.failures,
                "mean": result.mean,
                "ks": result.ks,
            });
            if let Some(path) = out {
                experiments::write_normality(path, &result)?;
            }
            println!("{summary}");
        }
        Command::Rate => {
            let result = experiments::rate_check(&experiment_config(&cli)?)?;
            write_rows(out, &result.points)?;
            eprintln!("{}", serde_json::json!({ "slope": result.slope }));
        }
        Command::Analyze {
            data,
            m_grid,
            no_header,
            no_standardize,
        } => {
            let table = ingest::load_csv(
                data,
                LoadOptions {
                    has_header: !no_header,
                    standardize: !no_standardize,
                },
            )?;
            write_rows(out, &ingest::analyze_real(&table, m_grid, cli.seed.unwrap_or(0))?)?;
        }
        Command::Worker {
            data,
            worker_id,
            k,
            side,
            spikes,
            skip_u4,
        } => {
            let dataset = LocalDataset::read_csv(data, *worker_id)?;
            let options = if *skip_u4 {
                ReportOptions::spike_only()
            } else {
                ReportOptions::default()
            };
            let task = WorkerTask {
                dataset,
                hint: SpikeHint {
                    k: *k,
                    side: *side,
                    m_total: *spikes,
                },
                options,
                root: None,
            };
            let line = protocol::encode_report(&task.execute())?;
            match out {
                Some(path) => std::fs::write(path, line + "\n")?,
                None => {
                    let mut stdout = std::io::stdout().lock();
                    writeln!(stdout, "{line}")?;
                }
            }
        }
        Command::Coordinate { input, p } => {
            let config: AggregateConfig = match cli.config.as_deref() {
                Some(path) => serde_json::from_str(&read_config(Some(path))?).map_err(|e| Error::Config(e.to_string()))?,
                None => AggregateConfig::default(),
            };
            let lines: Vec<String> = match input {
                Some(path) => std::fs::read_to_string(path)?.lines().map(str::to_string).collect(),
                None => std::io::stdin().lock().lines().collect::<std::io::Result<_>>()?,
            };
            let messages = lines
                .iter()
                .filter(|l| !l.trim().is_empty())
                .map(|l| protocol::decode_report(l))
                .collect::<Result<Vec<ReportMessage>>>()?;
            write_json(out, &protocol::coordinate(&messages, *p, &config)?)?;
        }
    }
    Ok(())
}
