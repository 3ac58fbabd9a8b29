use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use lhmm_core::backtest::{self, to_json, write_file, BacktestReport, RunConfig};
use lhmm_core::ingest::{load_prices, WeeklyReturnPanel};
use lhmm_core::lhmm::{FitMode, LhmmModel};
use lhmm_core::portfolio::{transaction_count, PortfolioWeights};
use lhmm_core::seeding::{derive_seed, STREAM_REPLICATE};
use lhmm_core::Error;

#[derive(Parser, Debug)]
#[command(name = "lhmm", version, about = "Linked-HMM portfolio pipeline")]
struct Cli {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed, overriding the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Mode {
    Lhmm,
    IndependentHmms,
}

impl From<Mode> for FitMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Lhmm => FitMode::Lhmm,
            Mode::IndependentHmms => FitMode::IndependentHmms,
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Load prices, apply the history filter and write training returns.
    Ingest,
    /// Fit a model on the training window.
    Fit {
        #[arg(long, value_enum, default_value = "lhmm")]
        mode: Mode,
    },
    /// Simulate datasets from a fitted model and write cumulative returns.
    Simulate {
        #[arg(long, value_enum, default_value = "lhmm")]
        mode: Mode,
        /// Number of datasets; defaults to the configured `n_sims`.
        #[arg(long)]
        datasets: Option<usize>,
        #[arg(long, default_value_t = 0)]
        replicate: u64,
    },
    /// Compute min-variance and balanced allocations for one replicate.
    Optimize {
        #[arg(long, value_enum, default_value = "lhmm")]
        mode: Mode,
        #[arg(long, default_value_t = 0)]
        replicate: u64,
    },
    /// Run all replicates for one model and evaluate on the test window.
    Backtest {
        #[arg(long, value_enum, default_value = "lhmm")]
        mode: Mode,
    },
    /// Fit both model variants and backtest all four portfolios.
    Compare,
    /// Print a saved report as a table.
    Report {
        /// Report JSON written by `backtest` or `compare`.
        file: PathBuf,
    },
}

fn mode_tag(mode: FitMode) -> &'static str {
    match mode {
        FitMode::Lhmm => "lhmm",
        FitMode::IndependentHmms => "independent_hmms",
    }
}

/// Writes to stdout; a reader that closed the pipe early is not an error.
fn emit(text: &str) -> lhmm_core::Result<()> {
    let mut out = std::io::stdout().lock();
    match out.write_all(text.as_bytes()).and_then(|_| out.flush()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(Error::Io {
            path: "<stdout>".into(),
            source: e,
        }),
        _ => Ok(()),
    }
}

fn print_json(v: &serde_json::Value) -> lhmm_core::Result<()> {
    emit(&format!("{}\n", serde_json::to_string_pretty(v).expect("serializable")))
}

fn write_weights(path: &Path, model: &LhmmModel, w: &PortfolioWeights) -> lhmm_core::Result<()> {
    let mut out = csv::Writer::from_writer(Vec::new());
    let ser = |e: csv::Error| Error::Serialization(e.to_string());
    out.write_record(["ticker", "sector", "weight"]).map_err(ser)?;
    let mut k = 0;
    for s in &model.sectors {
        for t in &s.tickers {
            out.write_record([t.as_str(), s.name.as_str(), &w.w[k].to_string()]).map_err(ser)?;
            k += 1;
        }
    }
    let bytes = out.into_inner().map_err(|e| Error::Serialization(e.to_string()))?;
    write_file(path, &String::from_utf8(bytes).expect("utf-8 csv"))
}

fn run(cli: Cli) -> lhmm_core::Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let out_dir = cfg.paths.output_dir.clone();
    match cli.command {
        Command::Ingest => {
            let (prices, sectors) = load_prices(&cfg.paths.prices, &cfg.paths.sectors)?;
            let panel: WeeklyReturnPanel = backtest::training_panel(&prices, &sectors, &cfg)?;
            let path = out_dir.join("train_returns.json");
            write_file(&path, &to_json(&panel)?)?;
            let sizes: serde_json::Map<String, serde_json::Value> = panel
                .sector_names
                .iter()
                .zip(&panel.sectors)
                .map(|(n, s)| (n.clone(), json!(s.len())))
                .collect();
            print_json(&json!({
                "returns": path,
                "n_stocks": panel.n_stocks(),
                "n_weeks": panel.n_weeks(),
                "first_week": panel.dates.first(),
                "last_week": panel.dates.last(),
                "sectors": sizes,
            }))?;
        }
        Command::Fit { mode } => {
            let (model, path) = backtest::cmd_fit(&cfg, mode.into())?;
            print_json(&json!({
                "model": path,
                "mode": mode_tag(model.mode),
                "n_sectors": model.n_sectors(),
                "n_stocks": model.n_stocks(),
                "bic": model.sectors.iter().map(|s| s.bic).collect::<Vec<_>>(),
                "warnings": model.warnings,
            }))?;
        }
        Command::Simulate {
            mode,
            datasets,
            replicate,
        } => {
            let model = LhmmModel::load(cfg.model_path(mode.into()))?;
            let n = datasets.unwrap_or(cfg.n_sims);
            let seed = derive_seed(cfg.seed, &[STREAM_REPLICATE]);
            let r = backtest::simulate_returns(&model, n, cfg.horizon_weeks, seed, replicate)?;
            let mut text = model.tickers.join(",");
            text.push('\n');
            for row in r.r.row_iter() {
                let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
                text.push_str(&cells.join(","));
                text.push('\n');
            }
            let path = out_dir.join(format!("simulated_returns_{}.csv", mode_tag(model.mode)));
            write_file(&path, &text)?;
            print_json(&json!({ "returns": path, "datasets": n, "horizon_weeks": cfg.horizon_weeks }))?;
        }
        Command::Optimize { mode, replicate } => {
            let model = LhmmModel::load(cfg.model_path(mode.into()))?;
            let alloc = backtest::allocate(&model, &cfg, replicate)?;
            let tag = mode_tag(model.mode);
            let mv_path = out_dir.join(format!("weights_{tag}_min_variance.csv"));
            let bal_path = out_dir.join(format!("weights_{tag}_balanced.csv"));
            write_weights(&mv_path, &model, &alloc.min_variance)?;
            write_weights(&bal_path, &model, &alloc.balanced)?;
            let summary = |w: &PortfolioWeights, path: &Path| {
                json!({
                    "weights": path,
                    "expected": w.expected,
                    "variance": w.variance,
                    "objective": w.value,
                    "q": w.q,
                    "transactions": transaction_count(&w.w),
                })
            };
            let doc = json!({
                "min_variance": summary(&alloc.min_variance, &mv_path),
                "balanced": summary(&alloc.balanced, &bal_path),
            });
            write_file(&out_dir.join(format!("allocation_{tag}.json")), &to_json(&doc)?)?;
            print_json(&doc)?;
        }
        Command::Backtest { mode } => {
            let report = backtest::cmd_backtest(&cfg, mode.into())?;
            let path = out_dir.join(format!("report_{}.json", mode_tag(mode.into())));
            write_file(&path, &to_json(&report)?)?;
            emit(&report.render_table())?;
        }
        Command::Compare => {
            let report = backtest::cmd_compare(&cfg)?;
            let path = out_dir.join("report_compare.json");
            write_file(&path, &to_json(&report)?)?;
            emit(&report.render_table())?;
        }
        Command::Report { file } => {
            let text = std::fs::read_to_string(&file).map_err(|source| Error::Io {
                path: file.display().to_string(),
                source,
            })?;
            let report: BacktestReport =
                serde_json::from_str(&text).map_err(|e| Error::Serialization(e.to_string()))?;
            report.validate()?;
            emit(&report.render_table())?;
        }
    }
    Ok(())
}

fn fail(module: &str, message: String, code: u8) -> ExitCode {
    eprintln!("{}", json!({ "error": { "module": module, "message": message } }));
    ExitCode::from(code)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help and --version.
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail("cli", e.to_string().trim().to_string(), 2),
    };
    if let Some(jobs) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global() {
            return fail("cli", e.to_string(), 2);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(e.module(), e.to_string(), 1),
    }
}
