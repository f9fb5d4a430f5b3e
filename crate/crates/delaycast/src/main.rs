//! Command-line front end: ingest line lists, fetch surveillance snapshots,
//! simulate scenarios, estimate reporting factors, run rolling-origin
//! experiments, sweep factor-misspecification sensitivity, and summarize
//! metric files.

use std::collections::BTreeMap;
use std::fs::File;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use delaycast::epidata::{EpidataClient, FetchMode, FetchSpec, HttpTransport, CACHE_DIR_ENV};
use delaycast::io;
use delaycast::pipeline::{
    run_replicates, run_rolling, run_sensitivity, summarize, MethodSpec, PipelineConfig,
    RollingOutput,
};
use delaycast::simulate::{default_reference, Scenario, ScenarioConfig};
use delaycast::triangle::{
    rollup_linelist, triangle_to_linelist, CountMode, ReportingTriangle, Season,
};

#[derive(Parser)]
#[command(name = "delaycast", version, about = "Reporting-delay corrected forecasting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Roll a case line list up into reporting-triangle CSVs.
    Ingest {
        /// Line list CSV (diagnosis_season,diagnosis_week,report_season,report_week,count).
        #[arg(long)]
        linelist: PathBuf,
        #[arg(long, default_value_t = 5)]
        max_lag: u32,
        #[arg(long, default_value_t = 52)]
        weeks_per_season: u32,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Fetch a reporting triangle from the Delphi Epidata API.
    Fetch {
        #[arg(long)]
        region: String,
        /// First epiweek, YYYYWW.
        #[arg(long)]
        first: u32,
        /// Last epiweek, YYYYWW.
        #[arg(long)]
        last: u32,
        /// Highest lag to request (0..=lags).
        #[arg(long, default_value_t = 5)]
        lags: u32,
        /// Request by "lag" or by publication "issue".
        #[arg(long, default_value = "lag")]
        mode: String,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Simulate scenario data: validation counts, thinned triangles, proxies.
    Simulate(SimulateArgs),
    /// Estimate reporting factors for one forecast origin.
    Factors {
        #[arg(long)]
        counts: PathBuf,
        #[arg(long)]
        validation: PathBuf,
        #[arg(long)]
        origin_season: Season,
        #[arg(long)]
        origin_week: u32,
        /// lag | model | local_k<width>
        #[arg(long, default_value = "lag")]
        method: String,
        #[arg(long, default_value_t = 5)]
        tau: u32,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rolling-origin experiment over a triangle or simulated replicates.
    Run(RunArgs),
    /// Coverage grid over true vs assumed reporting profiles.
    Sensitivity {
        /// Comma-separated true lag-0 proportions.
        #[arg(long, value_delimiter = ',', default_value = "0.1,0.5,1.0")]
        true_a: Vec<f64>,
        /// Comma-separated assumed lag-0 proportions (1.0 = uncorrected).
        #[arg(long, value_delimiter = ',', default_value = "0.05,0.2,0.35,0.5,0.65,0.8,1.0")]
        assumed_a: Vec<f64>,
        #[arg(long, default_value_t = 10)]
        replicates: u32,
        #[arg(long, default_value_t = 3)]
        seasons: u32,
        #[arg(long, default_value_t = 50)]
        weeks: u32,
        #[arg(long, default_value_t = 100.0)]
        r: f64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Inclusive origin-week range within the final season.
        #[arg(long, value_delimiter = ',', default_value = "10,40")]
        origin_weeks: Vec<u32>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Aggregate one or more metrics CSVs into a summary table.
    Report {
        #[arg(long, value_delimiter = ',', required = true)]
        metrics: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct SimulateArgs {
    /// constant | vary_by_week | improve | worsen
    #[arg(long, default_value = "constant")]
    scenario: String,
    #[arg(long, default_value_t = 0.05)]
    a: f64,
    #[arg(long, default_value_t = 100.0)]
    r: f64,
    #[arg(long, default_value_t = 3)]
    seasons: u32,
    #[arg(long, default_value_t = 50)]
    weeks: u32,
    #[arg(long, default_value_t = 1)]
    replicates: u32,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Optional reference series CSV (season,week,value); default: bundled series.
    #[arg(long)]
    reference: Option<PathBuf>,
    /// Also write replicate 0 as a line list.
    #[arg(long)]
    linelist: bool,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    /// Triangle counts CSV (single-dataset mode).
    #[arg(long, conflicts_with = "config")]
    counts: Option<PathBuf>,
    /// Validation CSV (single-dataset mode).
    #[arg(long, requires = "counts")]
    validation: Option<PathBuf>,
    /// Proxy series CSV (season,week,value) for proxy-based methods.
    #[arg(long)]
    proxies: Option<PathBuf>,
    /// In replicate mode, which simulated proxy stream (by noise variance)
    /// proxy-based methods see; default: the first stream.
    #[arg(long)]
    proxy_sigma2: Option<f64>,
    /// Scenario config file (replicate mode).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Optional reference series for replicate mode.
    #[arg(long)]
    reference: Option<PathBuf>,
    /// Comma-separated method roster, e.g. rescale_lag,offset_lag,impute_lag,exclude_2.
    #[arg(long, value_delimiter = ',', default_value = "rescale_lag,offset_lag,impute_lag")]
    methods: Vec<String>,
    #[arg(long, value_delimiter = ',', default_value = "0,1,4")]
    horizons: Vec<u32>,
    /// Number of imputations for impute_* methods.
    #[arg(long, default_value_t = 10)]
    imputations: usize,
    #[arg(long, default_value_t = 2500)]
    draws: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 5)]
    tau: u32,
    #[arg(long, default_value_t = 2)]
    arma_p: usize,
    #[arg(long, default_value_t = 2)]
    arma_q: usize,
    /// Also emit an equal-weight ensemble of the non-baseline methods.
    #[arg(long)]
    ensemble: bool,
    /// Restrict origins to an inclusive week range, e.g. 10,40.
    #[arg(long, value_delimiter = ',')]
    origin_weeks: Option<Vec<u32>>,
    /// Exit 0 even if some forecast cells failed.
    #[arg(long)]
    allow_failures: bool,
    #[arg(long)]
    out_dir: PathBuf,
}

/// Bundled dengue-like validation series, the default reference curve for
/// simulations when the requested grid matches its shape.
const BUNDLED_REFERENCE: &str = include_str!("../../../data/dengue_validation.csv");

fn bundled_or_default_reference(seasons: u32, weeks: u32) -> BTreeMap<(Season, u32), f64> {
    if let Ok(series) = io::read_series(BUNDLED_REFERENCE.as_bytes()) {
        let mut season_ids: Vec<Season> = series.keys().map(|k| k.0).collect();
        season_ids.dedup();
        let max_week = series.keys().map(|k| k.1).max().unwrap_or(0);
        if season_ids.len() >= seasons as usize && max_week == weeks {
            let mut out = BTreeMap::new();
            for (i, &s) in season_ids.iter().take(seasons as usize).enumerate() {
                for t in 1..=weeks {
                    if let Some(&v) = series.get(&(s, t)) {
                        out.insert(((i + 1) as Season, t), v);
                    }
                }
            }
            return out;
        }
    }
    default_reference(seasons, weeks)
}

fn read_series_file(path: &Path) -> anyhow::Result<BTreeMap<(Season, u32), f64>> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Ok(io::read_series(f)?)
}

fn read_triangle_files(counts: &Path, validation: &Path) -> anyhow::Result<ReportingTriangle> {
    let c = File::open(counts).with_context(|| format!("opening {}", counts.display()))?;
    let v = File::open(validation).with_context(|| format!("opening {}", validation.display()))?;
    Ok(io::read_triangle(c, v, None, CountMode::Integer)?)
}

fn write_triangle_files(tri: &ReportingTriangle, dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir)?;
    io::write_triangle_counts(File::create(dir.join("counts.csv"))?, tri)?;
    io::write_triangle_validation(File::create(dir.join("validation.csv"))?, tri)?;
    Ok(())
}

fn write_rolling_output(out: &RollingOutput, dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir)?;
    let rows: Vec<io::ForecastRow> = out
        .forecasts
        .iter()
        .map(|(m, d)| io::ForecastRow::from_distribution(m, d))
        .collect();
    io::write_forecasts(File::create(dir.join("forecasts.csv"))?, &rows)?;
    io::write_metrics(File::create(dir.join("metrics.csv"))?, &out.metrics)?;
    io::write_summary(
        File::create(dir.join("summary.csv"))?,
        &summarize(&out.metrics),
    )?;
    if !out.failures.is_empty() {
        std::fs::write(dir.join("failures.txt"), out.failures.join("\n") + "\n")?;
    }
    Ok(())
}

fn pipeline_config(args: &RunArgs) -> anyhow::Result<PipelineConfig> {
    let methods: delaycast::error::Result<Vec<MethodSpec>> =
        args.methods.iter().map(|m| MethodSpec::parse(m)).collect();
    let origin_weeks = match &args.origin_weeks {
        Some(v) if v.len() == 2 => Some((v[0], v[1])),
        Some(_) => bail!("--origin-weeks takes exactly two values, e.g. 10,40"),
        None => None,
    };
    Ok(PipelineConfig {
        methods: methods?,
        horizons: args.horizons.clone(),
        m_imputations: args.imputations,
        n_draws: args.draws,
        seed: args.seed,
        tau: args.tau,
        arma_p: args.arma_p,
        arma_q: args.arma_q,
        ensemble: args.ensemble,
        origin_weeks,
        ..Default::default()
    })
}

fn cmd_simulate(args: &SimulateArgs) -> anyhow::Result<()> {
    let scenario = ScenarioConfig {
        scenario: Scenario::parse(&args.scenario)?,
        a: args.a,
        r: args.r,
        replicates: args.replicates,
        seed: args.seed,
        weeks: args.weeks,
        seasons: args.seasons,
        ..Default::default()
    };
    let reference = match &args.reference {
        Some(p) => read_series_file(p)?,
        None => bundled_or_default_reference(args.seasons, args.weeks),
    };
    std::fs::create_dir_all(&args.out_dir)?;
    std::fs::write(
        args.out_dir.join("scenario.txt"),
        io::write_scenario_config(&scenario),
    )?;
    for i in 0..args.replicates {
        let rep = delaycast::pipeline::make_replicate(&reference, &scenario, i)?;
        let dir = args.out_dir.join(format!("rep{i:03}"));
        write_triangle_files(&rep.triangle, &dir)?;
        io::write_series(File::create(dir.join("truth.csv"))?, &rep.validation)?;
        for (s2, stream) in &rep.proxies {
            let name = format!("proxy_sigma2_{s2}.csv");
            io::write_series(File::create(dir.join(name))?, stream)?;
        }
        if args.linelist && i == 0 {
            let records = triangle_to_linelist(&rep.triangle)?;
            io::write_linelist(File::create(dir.join("linelist.csv"))?, &records)?;
        }
    }
    Ok(())
}

fn cmd_run(args: &RunArgs) -> anyhow::Result<bool> {
    let config = pipeline_config(args)?;
    let mut all_ok = true;
    if let Some(cfg_path) = &args.config {
        let text = std::fs::read_to_string(cfg_path)
            .with_context(|| format!("reading {}", cfg_path.display()))?;
        let scenario = io::parse_scenario_config(&text)?;
        let reference = match &args.reference {
            Some(p) => read_series_file(p)?,
            None => bundled_or_default_reference(scenario.seasons, scenario.weeks),
        };
        let results = run_replicates(&reference, &scenario, &config, args.proxy_sigma2)?;
        let mut pooled = Vec::new();
        for (i, out) in &results {
            write_rolling_output(out, &args.out_dir.join(format!("rep{i:03}")))?;
            pooled.extend(out.metrics.iter().cloned());
            if !out.failures.is_empty() {
                all_ok = false;
                for f in &out.failures {
                    eprintln!("replicate {i}: {f}");
                }
            }
        }
        std::fs::create_dir_all(&args.out_dir)?;
        io::write_summary(
            File::create(args.out_dir.join("summary.csv"))?,
            &summarize(&pooled),
        )?;
    } else {
        let (counts, validation) = match (&args.counts, &args.validation) {
            (Some(c), Some(v)) => (c, v),
            _ => bail!("run needs either --config or both --counts and --validation"),
        };
        let tri = read_triangle_files(counts, validation)?;
        let proxies = match &args.proxies {
            Some(p) => Some(read_series_file(p)?),
            None => None,
        };
        let out = run_rolling(&tri, proxies.as_ref(), &config)?;
        write_rolling_output(&out, &args.out_dir)?;
        if !out.failures.is_empty() {
            all_ok = false;
            for f in &out.failures {
                eprintln!("{f}");
            }
        }
    }
    Ok(all_ok)
}

fn cmd_fetch(
    region: &str,
    first: u32,
    last: u32,
    lags: u32,
    mode: &str,
    out_dir: &Path,
) -> anyhow::Result<()> {
    let mode = match mode {
        "lag" => FetchMode::Lag,
        "issue" => FetchMode::Issue,
        other => bail!("unknown fetch mode {other:?} (expected lag or issue)"),
    };
    let cache_dir = std::env::var_os(CACHE_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| out_dir.join(".cache"));
    let client = EpidataClient::new(HttpTransport::new()?, &cache_dir);
    let spec = FetchSpec {
        region: region.to_string(),
        first_epiweek: first,
        last_epiweek: last,
        lags: (0..=lags).collect(),
        mode,
    };
    let (cells, failures) = client.fetch(&spec)?;
    std::fs::create_dir_all(out_dir)?;
    let mut wtr = csv::Writer::from_writer(File::create(out_dir.join("fetched.csv"))?);
    wtr.write_record(["season", "week", "lag", "count"])?;
    for c in &cells {
        wtr.write_record([
            c.season.to_string(),
            c.week.to_string(),
            c.lag.to_string(),
            c.count.to_string(),
        ])?;
    }
    wtr.flush()?;
    for f in &failures {
        eprintln!("fetch: {f}");
    }
    if !failures.is_empty() {
        bail!("{} cells could not be fetched", failures.len());
    }
    Ok(())
}

fn cmd_factors(
    counts: &Path,
    validation: &Path,
    origin: (Season, u32),
    method: &str,
    tau: u32,
    out: &Path,
) -> anyhow::Result<()> {
    use delaycast::factors::{estimate_lag, estimate_local, estimate_model};
    use delaycast::glm::Family;
    let tri = read_triangle_files(counts, validation)?;
    let snap = tri.snapshot(origin.0, origin.1)?;
    let hist_seasons: Vec<Season> = tri
        .season_ids()
        .iter()
        .copied()
        .filter(|&s| s < origin.0)
        .collect();
    let table = if method == "lag" {
        estimate_lag(&tri, tau, hist_seasons.len().max(1))?
    } else if method == "model" {
        estimate_model(&tri, &hist_seasons, &snap, 3, Family::Poisson)?.table
    } else if let Some(k) = method.strip_prefix("local_k") {
        estimate_local(&snap, k.parse().context("bad window width")?, tau)?.table
    } else {
        bail!("unknown factor method {method:?}");
    };
    let mut cells = Vec::new();
    for t in 1..=origin.1 {
        for d in 0..=tau.min(tri.max_lag()) {
            cells.push((origin.0, t, d));
        }
    }
    if let Some(parent) = out.parent() {
        std::fs::create_dir_all(parent)?;
    }
    io::write_factors(File::create(out)?, &table, &cells)?;
    Ok(())
}

fn run_command(cli: Cli) -> anyhow::Result<bool> {
    match cli.command {
        Command::Ingest {
            linelist,
            max_lag,
            weeks_per_season,
            out_dir,
        } => {
            let records = io::read_linelist(File::open(&linelist)?)?;
            let tri = rollup_linelist(&records, max_lag, weeks_per_season)?;
            write_triangle_files(&tri, &out_dir)?;
            Ok(true)
        }
        Command::Fetch {
            region,
            first,
            last,
            lags,
            mode,
            out_dir,
        } => {
            cmd_fetch(&region, first, last, lags, &mode, &out_dir)?;
            Ok(true)
        }
        Command::Simulate(args) => {
            cmd_simulate(&args)?;
            Ok(true)
        }
        Command::Factors {
            counts,
            validation,
            origin_season,
            origin_week,
            method,
            tau,
            out,
        } => {
            cmd_factors(
                &counts,
                &validation,
                (origin_season, origin_week),
                &method,
                tau,
                &out,
            )?;
            Ok(true)
        }
        Command::Run(args) => {
            let ok = cmd_run(&args)?;
            Ok(ok || args.allow_failures)
        }
        Command::Sensitivity {
            true_a,
            assumed_a,
            replicates,
            seasons,
            weeks,
            r,
            seed,
            origin_weeks,
            out,
        } => {
            if origin_weeks.len() != 2 {
                bail!("--origin-weeks takes exactly two values");
            }
            let scenario = ScenarioConfig {
                a: 0.05,
                r,
                replicates,
                seed,
                weeks,
                seasons,
                ..Default::default()
            };
            let config = PipelineConfig {
                methods: vec![],
                horizons: vec![1],
                origin_weeks: Some((origin_weeks[0], origin_weeks[1])),
                seed,
                ..Default::default()
            };
            let reference = bundled_or_default_reference(seasons, weeks);
            let cells = run_sensitivity(&reference, &scenario, &config, &true_a, &assumed_a)?;
            if let Some(parent) = out.parent() {
                std::fs::create_dir_all(parent)?;
            }
            io::write_sensitivity(File::create(&out)?, &cells)?;
            Ok(true)
        }
        Command::Report { metrics, out } => {
            let mut pooled = Vec::new();
            for path in &metrics {
                pooled.extend(io::read_metrics(File::open(path)?)?);
            }
            if let Some(parent) = out.parent() {
                std::fs::create_dir_all(parent)?;
            }
            io::write_summary(File::create(&out)?, &summarize(&pooled))?;
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run_command(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("some forecast cells failed (rerun with --allow-failures to ignore)");
            ExitCode::FAILURE
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
