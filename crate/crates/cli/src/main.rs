use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use modelserve_bench::experiments::bandit::{self, BanditConfig, Init};
use modelserve_bench::experiments::drift::{self, DriftConfig};
use modelserve_bench::experiments::hybrid::{self, HybridConfig, Order, Protocol};
use modelserve_bench::experiments::latency::{self, LatencyConfig, Op};
use modelserve_bench::experiments::zipf::{self, ZipfConfig};
use modelserve_bench::movielens::{self, Format};
use modelserve_bench::output::write_csv;
use modelserve_core::cluster::{log_path, model_dir, ObservationLog};
use modelserve_core::config::Config;
use modelserve_core::model::{FactorTable, FeatureParams, ModelSchema};
use modelserve_core::serving::{RetrainOptions, Server};
use modelserve_core::trainer::AlsConfig;

#[derive(Parser)]
#[command(name = "modelserve", version, about = "Serve and maintain personalized linear models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArg {
    /// key=value config file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl ConfigArg {
    fn load(&self) -> anyhow::Result<Config> {
        match &self.config {
            Some(p) => Config::load(p).with_context(|| format!("loading {}", p.display())),
            None => Ok(Config::default()),
        }
    }
}

#[derive(Args)]
struct ModelArg {
    #[arg(long, default_value = "movielens")]
    model: String,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// CSV destination; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the HTTP service until interrupted.
    Serve(ConfigArg),
    /// Append a MovieLens ratings file to a model's observation log.
    Ingest {
        #[arg(long)]
        path: PathBuf,
        /// Guessed from the extension when omitted.
        #[arg(long, value_enum)]
        format: Option<Format>,
        #[command(flatten)]
        model: ModelArg,
        #[command(flatten)]
        config: ConfigArg,
    },
    /// Retrain a model offline with explicit hyperparameters.
    Train {
        #[arg(long)]
        d: Option<usize>,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        iters: Option<usize>,
        #[command(flatten)]
        model: ModelArg,
        #[command(flatten)]
        config: ConfigArg,
    },
    /// Retrain a model with its current settings.
    Retrain {
        #[command(flatten)]
        model: ModelArg,
        #[command(flatten)]
        config: ConfigArg,
    },
    /// Make a retained version active again.
    Rollback {
        #[arg(long)]
        version: u64,
        #[command(flatten)]
        model: ModelArg,
        #[command(flatten)]
        config: ConfigArg,
    },
    /// topK, update and observe latency.
    BenchLatency {
        #[arg(long, value_delimiter = ',', default_values_t = [10, 50, 100])]
        dims: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_values_t = [10, 100, 1000, 10000])]
        sizes: Vec<usize>,
        #[arg(long, default_value_t = 200)]
        trials: usize,
        #[arg(long, value_delimiter = ',', default_values_t = [10, 20, 50, 100, 200])]
        update_dims: Vec<usize>,
        #[command(flatten)]
        bench: BenchArgs,
    },
    /// Online updates versus offline retraining on MovieLens.
    BenchHybrid {
        /// Defaults to the file written by scripts/fetch_movielens.sh.
        #[arg(long)]
        path: Option<PathBuf>,
        #[arg(long, value_enum)]
        format: Option<Format>,
        #[arg(long, default_value_t = 10)]
        d: usize,
        #[arg(long, default_value_t = 0.1)]
        lambda: f64,
        #[arg(long, value_enum, default_value = "per-user")]
        protocol: Protocol,
        #[arg(long, value_enum, default_value = "chronological")]
        order: Order,
        /// Split seeds run: seed, seed + 1, ...
        #[arg(long, default_value_t = 3)]
        splits: u64,
        #[command(flatten)]
        bench: BenchArgs,
    },
    /// Cumulative regret of topK(k = 1) serving on a synthetic linear bandit.
    BenchBandit {
        #[arg(long, default_value_t = 5)]
        d: usize,
        #[arg(long, default_value_t = 20)]
        items: u64,
        #[arg(long, default_value_t = 2000)]
        horizon: usize,
        #[arg(long, value_delimiter = ',', default_values_t = [0.0, 0.1, 0.5, 1.0])]
        alphas: Vec<f64>,
        /// Problem seeds run: seed, seed + 1, ...
        #[arg(long, default_value_t = 20)]
        runs: u64,
        #[arg(long, default_value_t = 0.1)]
        noise: f64,
        #[arg(long, value_enum, default_value = "fresh")]
        init: Init,
        #[command(flatten)]
        bench: BenchArgs,
    },
    /// Staleness detection and automatic retraining under label negation.
    BenchDrift {
        #[arg(long, default_value_t = 100)]
        min_window: usize,
        #[arg(long, default_value_t = 500)]
        window: usize,
        #[arg(long, default_value_t = 0.01)]
        threshold: f64,
        /// Also run the no-drift control and print it to stderr.
        #[arg(long)]
        control: bool,
        #[command(flatten)]
        bench: BenchArgs,
    },
    /// Feature-cache hit rate under Zipfian item popularity.
    BenchZipf {
        #[arg(long, default_value_t = 10_000)]
        items: u64,
        #[arg(long, default_value_t = 100_000)]
        requests: usize,
        #[arg(long, value_delimiter = ',', default_values_t = [0.5, 1.0, 1.5])]
        exponents: Vec<f64>,
        #[arg(long, default_value_t = 0.1)]
        capacity_fraction: f64,
        #[command(flatten)]
        bench: BenchArgs,
    },
}

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Serve(config) => serve(config.load()?),
        Command::Ingest {
            path,
            format,
            model,
            config,
        } => ingest(&config.load()?, &model.model, &path, format),
        Command::Train {
            d,
            lambda,
            iters,
            model,
            config,
        } => {
            let config = config.load()?;
            let options = RetrainOptions {
                dimension: d,
                lambda,
                als: iters.map(|k| AlsConfig {
                    max_iterations: k,
                    ..config.server.als.clone()
                }),
            };
            retrain(&config, &model.model, options)
        }
        Command::Retrain { model, config } => retrain(&config.load()?, &model.model, RetrainOptions::default()),
        Command::Rollback { version, model, config } => {
            let server = Server::open(config.load()?.server)?;
            server.rollback(&model.model, version)?;
            println!("{} now serves version {version}", model.model);
            Ok(())
        }
        Command::BenchLatency {
            dims,
            sizes,
            trials,
            update_dims,
            bench,
        } => {
            let cfg = LatencyConfig {
                dims,
                sizes,
                trials,
                update_dims,
                seed: bench.seed,
                ..LatencyConfig::default()
            };
            let rows = latency::run_latency_bench(&cfg)?;
            for &d in &cfg.dims {
                let pts: Vec<_> = rows.iter().filter(|r| r.op == Op::Topk && r.d == d && !r.cached).collect();
                let xs: Vec<f64> = pts.iter().map(|r| r.n as f64).collect();
                let ys: Vec<f64> = pts.iter().map(|r| r.mean_us).collect();
                let fit = latency::linear_fit(&xs, &ys);
                eprintln!("uncached topK d={d}: {:.4} us/item, R2 {:.4}", fit.slope, fit.r2);
            }
            write_csv(bench.out.as_deref(), &rows)?;
            Ok(())
        }
        Command::BenchHybrid {
            path,
            format,
            d,
            lambda,
            protocol,
            order,
            splits,
            bench,
        } => {
            let path = path.unwrap_or_else(movielens::default_path);
            let ratings = load_ratings(&path, format)?;
            let cfg = HybridConfig {
                d,
                lambda,
                protocol,
                order,
                ..HybridConfig::default()
            };
            let seeds: Vec<u64> = (bench.seed..bench.seed + splits).collect();
            let reports = hybrid::run_hybrid_seeds(&ratings, &cfg, &seeds)?;
            let s = hybrid::summarize(&reports);
            eprintln!(
                "online gain {:.3}%, offline gain {:.3}%, ratio {:.3} over {} splits",
                100.0 * s.mean_online_gain,
                100.0 * s.mean_offline_gain,
                s.ratio,
                s.seeds
            );
            write_csv(bench.out.as_deref(), &reports)?;
            Ok(())
        }
        Command::BenchBandit {
            d,
            items,
            horizon,
            alphas,
            runs,
            noise,
            init,
            bench,
        } => {
            let cfg = BanditConfig {
                d,
                items,
                horizon,
                alphas,
                seeds: (bench.seed..bench.seed + runs).collect(),
                noise,
                init,
                ..BanditConfig::default()
            };
            let all = bandit::run_bandit_bench(&cfg)?;
            for (alpha, regret) in bandit::mean_final_regret(&cfg, &all) {
                eprintln!("alpha {alpha}: mean final regret {regret:.3}");
            }
            write_csv(bench.out.as_deref(), &bandit::regret_curves(&cfg, &all))?;
            Ok(())
        }
        Command::BenchDrift {
            min_window,
            window,
            threshold,
            control,
            bench,
        } => {
            let mut cfg = DriftConfig {
                seed: bench.seed,
                ..DriftConfig::default()
            };
            cfg.staleness.min_window = min_window;
            cfg.staleness.window = window;
            cfg.staleness.threshold_slope = threshold;
            let report = drift::run_drift(&cfg)?;
            if control {
                let c = drift::run_control(&cfg)?;
                eprintln!(
                    "control: {} stale acks and {} retrains over {} observations",
                    c.stale_acks, c.retrains, c.observations
                );
            }
            write_csv(bench.out.as_deref(), &[report])?;
            Ok(())
        }
        Command::BenchZipf {
            items,
            requests,
            exponents,
            capacity_fraction,
            bench,
        } => {
            let rows = exponents
                .iter()
                .map(|&exponent| {
                    zipf::run_zipf(&ZipfConfig {
                        items,
                        requests,
                        exponent,
                        capacity_fraction,
                        seed: bench.seed,
                        ..ZipfConfig::default()
                    })
                })
                .collect::<Result<Vec<_>, _>>()?;
            write_csv(bench.out.as_deref(), &rows)?;
            Ok(())
        }
    }
}

fn load_ratings(path: &Path, format: Option<Format>) -> anyhow::Result<Vec<modelserve_core::model::Observation>> {
    let format = match format.or_else(|| Format::from_path(path)) {
        Some(f) => f,
        None => bail!("cannot tell the format of {}; pass --format", path.display()),
    };
    movielens::load(path, format).with_context(|| {
        format!("loading {} (scripts/fetch_movielens.sh downloads MovieLens-100K)", path.display())
    })
}

#[tokio::main]
async fn serve(config: Config) -> anyhow::Result<()> {
    let server = Arc::new(Server::open(config.server)?);
    let listener = tokio::net::TcpListener::bind(&config.listen)
        .await
        .with_context(|| format!("binding {}", config.listen))?;
    log::info!("listening on {} with models {:?}", listener.local_addr()?, server.model_names());
    let shutdown = async {
        let _ = tokio::signal::ctrl_c().await;
        log::info!("shutting down");
    };
    modelserve_core::http::serve(server.clone(), listener, shutdown).await?;
    server.shutdown();
    Ok(())
}

/// Appends straight to the log, so no server may be running on the same
/// data directory. Creates the model with an empty factor table if needed;
/// a retrain then learns item factors from the log.
fn ingest(config: &Config, model: &str, path: &Path, format: Option<Format>) -> anyhow::Result<()> {
    let ratings = load_ratings(path, format)?;
    let data_dir = &config.server.data_dir;
    if !model_dir(data_dir, model).join("ACTIVE").is_file() {
        let server = Server::new(config.server.clone())?;
        let schema = ModelSchema::new(model, config.dimension, config.lambda, config.alpha)?;
        server.create_model(schema, FeatureParams::Materialized(FactorTable::new(config.dimension)))?;
        server.shutdown();
    }
    let (mut log, _) = ObservationLog::open(&log_path(data_dir, model), model, config.server.log)?;
    for obs in &ratings {
        log.append(obs)?;
    }
    log.flush()?;
    let stats = movielens::stats(&ratings);
    println!(
        "appended {} ratings from {} users on {} items to {model}; log now ends at {}",
        stats.ratings,
        stats.users,
        stats.items,
        log.last_seq()
    );
    Ok(())
}

fn retrain(config: &Config, model: &str, options: RetrainOptions) -> anyhow::Result<()> {
    let server = Server::open(config.server.clone())?;
    let report = server.model(model)?.trigger_retrain_with("cli", options)?.wait()?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    server.shutdown();
    Ok(())
}
