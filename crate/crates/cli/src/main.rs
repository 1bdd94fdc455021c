use std::path::{Path, PathBuf};
use std::process::ExitCode;

use advecta_core::attribution::{export_report, records, AttributionReport};
use advecta_core::config::{RunConfig, SimulatorConfig};
use advecta_core::dataio::{write_network, write_series};
use advecta_core::pipeline::{
    build_model, dataset_for_checkpoint, forecast_rows, simulate_config, train_run, write_forecast, Dataset,
};
use advecta_core::simulator::scenario_features;
use advecta_core::training::checkpoint::Checkpoint;
use advecta_core::training::gradcheck::{gradcheck, GradcheckConfig};
use advecta_core::training::metrics::{evaluate, MetricsReport};
use advecta_core::training::write_history;
use advecta_core::{Error, Result};
use clap::{Args, Parser, Subcommand};

const CONFIG_KEYS: &str = "\
Run config (JSON; every section optional, unknown keys rejected):
  paths.stations          station file: station_id,name,lat,lon
  paths.series            series file: timestamp,station_id,<feature columns>
  paths.out_dir           output directory (default \"out\")
  features[]              {name, availability, is_target, role, wind_component, input}
                          role: pollutant | meteorology_forecast | calendar | exogenous_forecast
                          wind_component: speed | direction; input=false keeps a column out of the tokens
                          default: pm10 target, wind_speed (tokenized), wind_dir
  model.horizon           forecast hours H (default 24)
  model.lookback          look-back hours L (default H + 24)
  model.patch             patch length P (default 12)
  model.d_model           embedding width d (default 16)
  model.n_heads           attention heads (default 2)
  model.conv_width        depthwise kernel width, odd (default 3)
  model.activation        identity | gelu | softplus
  model.per_channel_gate  one fusion gate per channel instead of per station
  model.transport         false removes the transport module
  model.seed              parameter initialization seed
  train.lr, train.beta1, train.beta2, train.adam_eps
  train.batch_size        default 32
  train.max_epochs        default 100
  train.max_steps         optional cap on optimizer steps
  train.patience          epochs without validation improvement before stopping
  train.lambda_eps        weight of the alignment margin penalty (default 1e-3)
  train.seed              shuffling seed
  train.parallel          per-sample gradients on the thread pool
  data.split              [train, val, test] fractions (default [0.7, 0.15, 0.15])
  data.stride             hours between window anchors (default 1)
  data.per_station_wind   per-station wind summaries instead of the network mean
  simulator.preset        line3 | grid9 | rotating_wind9 (data source when no paths are set)
  simulator.seed, simulator.hours
  simulator.noise_std, simulator.kappa, simulator.decay   optional overrides";

#[derive(Parser)]
#[command(name = "advecta", version, about = "Wind-conditioned multi-station forecasting", after_long_help = CONFIG_KEYS)]
struct Cli {
    /// Worker threads; 1 gives bit-reproducible runs.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run config.
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides paths.out_dir.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct WithCheckpoint {
    #[command(flatten)]
    common: Common,
    /// Defaults to <out>/checkpoint.json.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write stations.csv, series.csv and truth.json for a synthetic scenario.
    Simulate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        preset: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        hours: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and write checkpoint.json and history.csv.
    Train {
        #[command(flatten)]
        common: Common,
        /// Overrides model.seed and train.seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Forecast every test window into forecast.csv.
    Predict(WithCheckpoint),
    /// Test-split MAE/MSE per checkpoint horizon plus AVG into metrics.json.
    Eval {
        #[command(flatten)]
        common: Common,
        /// One checkpoint per horizon; defaults to <out>/checkpoint.json.
        #[arg(long, num_args = 1..)]
        checkpoint: Vec<PathBuf>,
    },
    /// Export attribution.json and figures for one test window.
    Attribute {
        #[command(flatten)]
        ck: WithCheckpoint,
        /// Test window index; defaults to the last one.
        #[arg(long)]
        window: Option<usize>,
    },
    /// Compare reverse-mode gradients with central differences.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}

fn load(common: &Common, threads: Option<usize>) -> Result<(RunConfig, PathBuf)> {
    let mut cfg = RunConfig::read(&common.config)?;
    if threads == Some(1) {
        cfg.train.parallel = false;
    }
    let out = common.out.clone().unwrap_or_else(|| cfg.paths.out_dir.clone());
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    Ok((cfg, out))
}

fn checkpoint_path(given: &Option<PathBuf>, out: &Path) -> PathBuf {
    given.clone().unwrap_or_else(|| out.join("checkpoint.json"))
}

fn run(cli: Cli) -> Result<()> {
    let threads = cli.threads;
    match cli.command {
        Command::Simulate {
            config,
            preset,
            seed,
            hours,
            out,
        } => {
            let (mut sim, cfg_out) = match &config {
                Some(path) => {
                    let cfg = RunConfig::read(path)?;
                    (cfg.simulator.clone().unwrap_or_default(), Some(cfg.paths.out_dir))
                }
                None if preset.is_some() => (SimulatorConfig::default(), None),
                None => return Err(Error::Config("simulate needs --preset or --config".into())),
            };
            if let Some(p) = preset {
                sim.preset = p;
            }
            if let Some(s) = seed {
                sim.seed = s;
            }
            if let Some(h) = hours {
                sim.hours = h;
            }
            let out = out.or(cfg_out).unwrap_or_else(|| PathBuf::from("out"));
            std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            let result = simulate_config(&sim)?;
            let network = advecta_core::simulator::preset(&sim.preset, sim.seed, sim.hours)?.network;
            write_network(out.join("stations.csv"), &network)?;
            write_series(out.join("series.csv"), &result.frame, &scenario_features(0, true))?;
            result.truth.write(out.join("truth.json"))?;
            println!(
                "simulated {} hours of {} ({} stations) into {}",
                sim.hours,
                sim.preset,
                network.len(),
                out.display()
            );
        }
        Command::Train { common, seed } => {
            let (mut cfg, out) = load(&common, threads)?;
            if let Some(s) = seed {
                cfg.model.seed = s;
                cfg.train.seed = s;
            }
            let data = Dataset::from_config(&cfg, None)?;
            let (outcome, ck) = train_run(&cfg, &data)?;
            ck.write(out.join("checkpoint.json"))?;
            write_history(out.join("history.csv"), &outcome.history)?;
            println!(
                "trained {} epochs / {} steps ({:?}); best validation MSE {:.6}",
                outcome.history.len(),
                outcome.steps,
                outcome.stop,
                outcome.best_val
            );
        }
        Command::Predict(args) => {
            let (cfg, out) = load(&args.common, threads)?;
            let ck = Checkpoint::read(checkpoint_path(&args.checkpoint, &out))?;
            let data = dataset_for_checkpoint(&cfg, &ck)?;
            let model = ck.model()?;
            let rows = forecast_rows(&model, &data.test, &data)?;
            write_forecast(out.join("forecast.csv"), &rows)?;
            println!("wrote {} forecast rows for {} test windows", rows.len(), data.test.len());
        }
        Command::Eval { common, checkpoint } => {
            let (cfg, out) = load(&common, threads)?;
            let paths = if checkpoint.is_empty() {
                vec![out.join("checkpoint.json")]
            } else {
                checkpoint
            };
            let mut rows = Vec::new();
            for path in &paths {
                let ck = Checkpoint::read(path)?;
                let data = dataset_for_checkpoint(&cfg, &ck)?;
                let model = ck.model()?;
                rows.push(evaluate(&model, &data.test, &data.normalizer, data.target())?);
            }
            let report = MetricsReport::new(rows)?;
            let path = out.join("metrics.json");
            std::fs::write(&path, report.to_json()?).map_err(|e| Error::io(&path, e))?;
            print!("{report}");
        }
        Command::Attribute { ck: args, window } => {
            let (cfg, out) = load(&args.common, threads)?;
            let ck = Checkpoint::read(checkpoint_path(&args.checkpoint, &out))?;
            let data = dataset_for_checkpoint(&cfg, &ck)?;
            let model = ck.model()?;
            let idx = window.unwrap_or(data.test.len() - 1);
            let sample = data.test.get(idx).ok_or(Error::Index {
                index: idx,
                len: data.test.len(),
            })?;
            let bundle = model.predict(sample)?;
            let ids = &data.network.station_ids;
            let report = AttributionReport::new(&model.spec, ids, records(&model, &bundle, sample, ids)?);
            let files = export_report(&report, &out)?;
            println!("wrote {} files for window at {}", files.len(), report.records[0].anchor);
        }
        Command::Gradcheck { common, seed } => {
            let (cfg, _) = load(&common, threads)?;
            let data = Dataset::from_config(&cfg, None)?;
            let mut model_cfg = cfg.model.clone();
            model_cfg.seed = seed;
            let model = build_model(&model_cfg, &data)?;
            let samples = &data.train[..data.train.len().min(2)];
            let report = gradcheck(
                &model,
                samples,
                &GradcheckConfig {
                    seed,
                    lambda_eps: cfg.train.lambda_eps,
                    ..Default::default()
                },
            )?;
            println!("{report}");
            if !report.passed() {
                return Err(Error::Numeric(format!("gradient check failed for {:?}", report.failing())));
            }
        }
    }
    Ok(())
}
