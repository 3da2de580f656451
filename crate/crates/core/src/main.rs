use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use igsaft_core::data::{read_csv, write_csv, ColumnConfig, Dataset, TimeScale};
use igsaft_core::diagnostics::{overid_test, relevance_f_test, Covariance};
use igsaft_core::gel::{estimate, RhoFamily};
use igsaft_core::nuisance::{Bandwidth, KernelFamily, KmConditioning};
use igsaft_core::pipeline::{fit_prepared, prepare_moments, FitConfig, FitReport, ScreenStage, SCHEMA_VERSION};
use igsaft_core::simulate::{generate, run_monte_carlo, Estimator, SimConfig};
use igsaft_core::Error;

#[derive(Parser, Debug)]
#[command(name = "igsaft", version, about = "Interaction-based IV estimation for censored survival times")]
struct Cli {
    /// Worker threads (defaults to all cores); results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Estimate the exposure effect from a CSV file.
    Fit(FitArgs),
    /// Monte Carlo study on the built-in designs.
    Simulate(SimArgs),
    /// Relevance and overidentification tests only.
    Diagnose(FitArgs),
}

#[derive(Args, Debug, Clone)]
struct DataArgs {
    #[arg(long)]
    data: PathBuf,
    /// Event or censoring time column.
    #[arg(long)]
    time: String,
    /// Event indicator column (1 = event).
    #[arg(long)]
    status: String,
    #[arg(long)]
    exposure: String,
    /// Instrument columns; accepts lists (`z1,z2`) and ranges (`z1..z10`).
    #[arg(long = "iv", required = true, num_args = 1.., value_delimiter = ',')]
    iv: Vec<String>,
    /// Whether the time column is already on the log scale.
    #[arg(long, value_parser = parse_from_str::<TimeScale>)]
    time_scale: Option<TimeScale>,
}

#[derive(Args, Debug, Clone)]
struct FitArgs {
    #[command(flatten)]
    data: DataArgs,
    /// JSON file with a (partial) fit configuration; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    q: Option<usize>,
    /// GEL families, first one primary.
    #[arg(long, num_args = 1.., value_delimiter = ',', value_parser = parse_from_str::<RhoFamily>)]
    gel: Option<Vec<RhoFamily>>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long, value_parser = parse_from_str::<KernelFamily>)]
    kernel: Option<KernelFamily>,
    /// `silverman` or a fixed bandwidth on standardized coordinates.
    #[arg(long, value_parser = parse_bandwidth)]
    bandwidth: Option<Bandwidth>,
    #[arg(long)]
    trunc_eps: Option<f64>,
    #[arg(long, value_parser = parse_from_str::<KmConditioning>)]
    km_conditioning: Option<KmConditioning>,
    #[arg(long, value_parser = parse_from_str::<ScreenStage>)]
    screen_stage: Option<ScreenStage>,
    #[arg(long)]
    no_screening: bool,
    #[arg(long)]
    max_keep: Option<usize>,
    #[arg(long, value_parser = parse_covariance)]
    covariance: Option<Covariance>,
    #[arg(long)]
    seed: Option<u64>,
    /// Write the stacked moment matrix to this CSV.
    #[arg(long)]
    dump_moments: Option<PathBuf>,
    /// JSON report path; printed to stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
struct SimArgs {
    #[arg(long, default_value_t = 1)]
    case: u8,
    #[arg(long, default_value_t = 10_000)]
    n: usize,
    #[arg(long, default_value_t = 10)]
    p: usize,
    /// Target censoring rate.
    #[arg(long, default_value_t = 0.2)]
    cr: f64,
    #[arg(long, default_value_t = 100)]
    reps: usize,
    #[arg(long, num_args = 1.., value_delimiter = ',', default_value = "el", value_parser = parse_from_str::<RhoFamily>)]
    gel: Vec<RhoFamily>,
    #[arg(long, default_value_t = 4.0)]
    c_weak: f64,
    #[arg(long, default_value_t = 1.0)]
    beta0: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Draw the nonzero interaction set once instead of per replication.
    #[arg(long)]
    fix_support: bool,
    #[arg(long)]
    null_interactions: bool,
    /// Skip the naive AFT benchmark.
    #[arg(long)]
    no_aft: bool,
    #[arg(long, value_parser = parse_from_str::<KmConditioning>)]
    km_conditioning: Option<KmConditioning>,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    /// Write replication `--rep` as CSV instead of running the study.
    #[arg(long)]
    export: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    rep: usize,
    /// CSV table path; a JSON sidecar is written next to it.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_from_str<T: std::str::FromStr<Err = Error>>(s: &str) -> Result<T, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_bandwidth(s: &str) -> Result<Bandwidth, String> {
    if s.eq_ignore_ascii_case("silverman") {
        return Ok(Bandwidth::Silverman);
    }
    match s.parse::<f64>() {
        Ok(h) if h > 0.0 => Ok(Bandwidth::Fixed(h)),
        _ => Err(format!("bandwidth must be `silverman` or a positive number, got `{s}`")),
    }
}

fn parse_covariance(s: &str) -> Result<Covariance, String> {
    match s.to_ascii_lowercase().as_str() {
        "hc0" => Ok(Covariance::HC0),
        "hc3" => Ok(Covariance::HC3),
        _ => Err(format!("unknown covariance `{s}`")),
    }
}

/// Expand `z1..z10` style ranges.
fn expand_columns(items: &[String]) -> Result<Vec<String>, Error> {
    let mut out = Vec::new();
    for item in items {
        let Some((a, b)) = item.split_once("..") else {
            out.push(item.trim().to_string());
            continue;
        };
        let split = |s: &str| {
            let i = s.find(|c: char| c.is_ascii_digit()).unwrap_or(s.len());
            (s[..i].to_string(), s[i..].parse::<usize>().ok())
        };
        match (split(a.trim()), split(b.trim())) {
            ((pa, Some(lo)), (pb, Some(hi))) if pa == pb && lo <= hi => {
                out.extend((lo..=hi).map(|k| format!("{pa}{k}")));
            }
            _ => return Err(Error::domain(format!("cannot expand column range `{item}`"))),
        }
    }
    Ok(out)
}

#[derive(Debug, Serialize)]
struct RunManifest {
    command: Vec<String>,
    config: Value,
    seeds: BTreeMap<String, u64>,
    input_hashes: BTreeMap<String, String>,
    version: String,
    schema_version: u32,
    wall_time_seconds: f64,
}

impl RunManifest {
    fn new(config: Value) -> Self {
        Self {
            command: std::env::args().collect(),
            config,
            seeds: BTreeMap::new(),
            input_hashes: BTreeMap::new(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            schema_version: SCHEMA_VERSION,
            wall_time_seconds: 0.0,
        }
    }
}

fn sha256_file(path: &Path) -> Result<String, Error> {
    let bytes = std::fs::read(path)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn load(args: &DataArgs) -> Result<(Dataset, Vec<usize>), Error> {
    let cols = ColumnConfig {
        time: args.time.clone(),
        status: args.status.clone(),
        exposure: args.exposure.clone(),
        instruments: expand_columns(&args.iv)?,
        time_scale: args.time_scale.unwrap_or_default(),
    };
    let loaded = read_csv(&args.data, &cols)?;
    Ok((loaded.dataset, loaded.rejected_rows))
}

fn fit_config(args: &FitArgs) -> Result<FitConfig, Error> {
    let mut cfg: FitConfig = match &args.config {
        Some(path) => serde_json::from_str(&std::fs::read_to_string(path)?)?,
        None => FitConfig::default(),
    };
    if let Some(q) = args.q {
        cfg.q = q;
    }
    if let Some(g) = &args.gel {
        cfg.families = g.clone();
    }
    if let Some(a) = args.alpha {
        cfg.gel.alpha = a;
    }
    if let Some(k) = args.kernel {
        cfg.kernel.kernel = k;
    }
    if let Some(b) = args.bandwidth {
        cfg.kernel.bandwidth = b;
    }
    if let Some(t) = args.trunc_eps {
        cfg.kernel.trunc_eps = t;
    }
    if let Some(c) = args.km_conditioning {
        cfg.kernel.conditioning = Some(c);
    }
    if let Some(s) = args.screen_stage {
        cfg.screen_stage = s;
    }
    if args.no_screening {
        cfg.screening = false;
    }
    if let Some(k) = args.max_keep {
        cfg.max_keep = k;
    }
    if let Some(c) = args.covariance {
        cfg.covariance = c;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn write_json(value: &Value, out: Option<&Path>) -> Result<(), Error> {
    let text = serde_json::to_string_pretty(value)?;
    match out {
        Some(path) => std::fs::write(path, text + "\n")?,
        None => println!("{text}"),
    }
    Ok(())
}

fn report_json(report: &FitReport, manifest: &RunManifest, rejected: &[usize]) -> Value {
    let fit = report.gel_fit();
    json!({
        "schema_version": SCHEMA_VERSION,
        "family": fit.family,
        "beta_hat": fit.beta_hat,
        "se": fit.se,
        "ci": [fit.ci.0, fit.ci.1],
        "exp_beta": { "estimate": fit.exp_scale.estimate, "se": fit.exp_scale.se },
        "p_F": report.relevance_f.as_ref().map(|t| t.p_value),
        "p_overid": report.over_id.first().and_then(|t| t.as_ref().map(|t| t.p_value)),
        "rejected_rows": rejected,
        "report": report,
        "manifest": manifest,
    })
}

fn cmd_fit(args: &FitArgs) -> Result<(), Error> {
    let start = Instant::now();
    let cfg = fit_config(args)?;
    let (data, rejected) = load(&args.data)?;
    let prep = prepare_moments(&data, &cfg)?;
    if let Some(path) = &args.dump_moments {
        prep.moments.write_csv(path)?;
    }
    let report = fit_prepared(&data, &cfg, prep)?;
    let mut manifest = RunManifest::new(serde_json::to_value(&cfg)?);
    manifest.seeds.insert("fold".into(), cfg.seed);
    manifest
        .input_hashes
        .insert(args.data.data.display().to_string(), sha256_file(&args.data.data)?);
    manifest.wall_time_seconds = start.elapsed().as_secs_f64();
    write_json(&report_json(&report, &manifest, &rejected), args.out.as_deref())?;

    let fit = report.gel_fit();
    let summary = format!(
        "n = {}, m = {} of {} candidates, {}: beta = {:.4} (se {:.4}), {:.0}% CI [{:.4}, {:.4}], exp(beta) = {:.4} (se {:.4})",
        report.n,
        report.m,
        report.candidates_m,
        fit.family,
        fit.beta_hat,
        fit.se,
        100.0 * (1.0 - fit.alpha),
        fit.ci.0,
        fit.ci.1,
        fit.exp_scale.estimate,
        fit.exp_scale.se
    );
    if args.out.is_some() {
        println!("{summary}");
    } else {
        eprintln!("{summary}");
    }
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    Ok(())
}

fn cmd_diagnose(args: &FitArgs) -> Result<(), Error> {
    let start = Instant::now();
    let cfg = fit_config(args)?;
    let (data, _) = load(&args.data)?;
    let prep = prepare_moments(&data, &cfg)?;
    let relevance = relevance_f_test(&data, prep.moments.spec(), &prep.zeta_full, cfg.covariance)?;
    let fit = estimate(&prep.moments, cfg.families[0], &cfg.gel)?;
    let over_id = match overid_test(&fit) {
        Ok(t) => serde_json::to_value(t)?,
        Err(Error::TestUndefined(msg)) => Value::String(msg),
        Err(e) => return Err(e),
    };
    let mut manifest = RunManifest::new(serde_json::to_value(&cfg)?);
    manifest.seeds.insert("fold".into(), cfg.seed);
    manifest
        .input_hashes
        .insert(args.data.data.display().to_string(), sha256_file(&args.data.data)?);
    manifest.wall_time_seconds = start.elapsed().as_secs_f64();
    let value = json!({
        "schema_version": SCHEMA_VERSION,
        "m": prep.moments.m(),
        "p_F": relevance.p_value,
        "p_overid": over_id.get("p_value").cloned().unwrap_or(Value::Null),
        "relevance_F": relevance,
        "over_id": over_id,
        "manifest": manifest,
    });
    write_json(&value, args.out.as_deref())
}

fn cmd_simulate(args: &SimArgs) -> Result<(), Error> {
    let start = Instant::now();
    let sim = SimConfig {
        case: args.case,
        n: args.n,
        p: args.p,
        target_cr: args.cr,
        c_weak: args.c_weak,
        beta0: args.beta0,
        reps: args.reps,
        seed: args.seed,
        fix_support: args.fix_support,
        null_interactions: args.null_interactions,
        ..SimConfig::default()
    };
    sim.validate()?;
    if let Some(path) = &args.export {
        let (data, _) = generate(&sim, args.rep)?;
        write_csv(&data, path, &ColumnConfig::default_for(sim.p))?;
        return Ok(());
    }
    let mut fit = FitConfig {
        families: args.gel.clone(),
        seed: args.seed,
        ..FitConfig::default()
    };
    fit.gel.alpha = args.alpha;
    fit.kernel.conditioning = args.km_conditioning;
    let mut estimators: Vec<Estimator> = args.gel.iter().map(|&f| Estimator::Gel(f)).collect();
    if !args.no_aft {
        estimators.push(Estimator::Aft);
    }
    let summary = run_monte_carlo(&sim, &fit, &estimators)?;
    let table = summary.to_csv();
    print!("{table}");
    if let Some(path) = &args.out {
        std::fs::write(path, &table)?;
        let mut manifest = RunManifest::new(json!({ "simulation": sim, "fit": fit }));
        manifest.seeds.insert("simulation".into(), sim.seed);
        manifest.seeds.insert("fold".into(), fit.seed);
        manifest.wall_time_seconds = start.elapsed().as_secs_f64();
        let sidecar = json!({ "summary": summary, "manifest": manifest });
        let mut side = path.clone().into_os_string();
        side.push(".json");
        write_json(&sidecar, Some(Path::new(&side)))?;
    }
    Ok(())
}

/// 1 for malformed input or configuration, 2 for failures during estimation.
fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Stage { stage: "config", .. } | Error::Domain(_) | Error::Json(_) => 1,
        e if e.is_input_error() => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(t) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(t).build_global() {
            eprintln!("error: cannot start {t} threads: {e}");
            return ExitCode::from(1);
        }
    }
    let result = match &cli.command {
        Command::Fit(a) => cmd_fit(a),
        Command::Diagnose(a) => cmd_diagnose(a),
        Command::Simulate(a) => cmd_simulate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
