//! `bikedemand` command-line front end.
//!
//! Exit codes: 0 success, 1 I/O or internal failure, 2 configuration or
//! usage error, 3 data error, 4 numeric failure.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use bikedemand::config::ExperimentConfig;
use bikedemand::grid::{ingest_csv, read_station_table, read_tensor, write_tensor, GridSpec, TripProfile};
use bikedemand::model::{ModelKind, CSV_HEADER};
use bikedemand::pipeline::{evaluate_run, load_demand, neighbors_for, run_experiment, write_artifacts};
use bikedemand::similarity::{build_spatial_neighbors, neighbor_overlap, write_neighbor_index, Metric};
use bikedemand::synth::{generate, write_group_map, SyntheticCitySpec};
use bikedemand::{Error, Execution};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "bikedemand", version, about = "Bike-sharing demand forecasting with irregular convolution")]
struct Cli {
    /// Worker threads; 1 selects the deterministic single-threaded path.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Bin a trip CSV into an hourly demand tensor.
    Ingest(IngestArgs),
    /// Build a neighbor index and the semantic/spatial comparison.
    Neighbors(NeighborArgs),
    /// Train the model named in the config and evaluate it.
    Train(RunArgs),
    /// Score a trained run directory on the validation split.
    Evaluate(EvaluateArgs),
    /// Train and evaluate several model kinds under one protocol.
    Baseline(BaselineArgs),
    /// Generate a synthetic phase-group city.
    Synth(SynthArgs),
    /// Print the reports stored in run directories.
    Report(ReportArgs),
}

#[derive(Args)]
struct IngestArgs {
    #[arg(long)]
    trips: PathBuf,
    /// TOML file holding a grid definition.
    #[arg(long)]
    grid: PathBuf,
    /// Exclusive end of the horizon in unix seconds.
    #[arg(long)]
    t_end: i64,
    #[arg(long, default_value = "latlon")]
    profile: String,
    #[arg(long)]
    stations: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct NeighborArgs {
    #[arg(long)]
    tensor: PathBuf,
    #[arg(long, default_value = "dtw")]
    metric: Metric,
    #[arg(long)]
    band: Option<usize>,
    #[arg(long, default_value_t = 9)]
    kernel_size: usize,
    #[arg(long)]
    out: PathBuf,
}

/// Overrides applied on top of an experiment config.
#[derive(Args)]
struct Overrides {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Semantic metric; selects `irconv_pearson` or `irconv_dtw`.
    #[arg(long)]
    metric: Option<Metric>,
    #[arg(long)]
    band: Option<usize>,
    #[arg(long)]
    kernel_size: Option<usize>,
}

impl Overrides {
    fn load(&self) -> anyhow::Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        match self.metric {
            Some(Metric::Pearson) => cfg.kind = ModelKind::IrconvPearson,
            Some(Metric::Dtw) => cfg.kind = ModelKind::IrconvDtw,
            Some(Metric::Spatial) => cfg.kind = ModelKind::CnnLstm,
            None => {}
        }
        if self.band.is_some() {
            cfg.neighbors.band = self.band;
        }
        if let Some(k) = self.kernel_size {
            cfg.neighbors.kernel_size = k;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    overrides: Overrides,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    overrides: Overrides,
    /// Directory written by `train`.
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BaselineArgs {
    #[command(flatten)]
    overrides: Overrides,
    /// Comma-separated kinds; all four by default.
    #[arg(long, value_delimiter = ',')]
    kinds: Vec<ModelKind>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    /// TOML file holding a synthetic city; defaults otherwise.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// Run directories containing report.csv.
    #[arg(required = true)]
    runs: Vec<PathBuf>,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<clap::Error>().is_some() {
        return 2;
    }
    match err.downcast_ref::<Error>() {
        Some(Error::Config(_)) => 2,
        Some(Error::Data(_) | Error::Shape { .. } | Error::Csv(_) | Error::Json(_)) => 3,
        Some(Error::Numeric(_)) => 4,
        _ => 1,
    }
}

fn exec_for(threads: Option<usize>) -> Execution {
    match threads {
        Some(1) => Execution::Sequential,
        _ => Execution::Parallel,
    }
}

fn write(path: &Path, text: &str) -> anyhow::Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn read_toml<T: serde::de::DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())).into())
}

fn ingest(a: &IngestArgs) -> anyhow::Result<()> {
    let mut grid: GridSpec = read_toml(&a.grid)?;
    grid.validate()?;
    let profile: TripProfile = a.profile.parse()?;
    if let Some(s) = &a.stations {
        grid.stations = Some(read_station_table(s)?);
    }
    let file = fs::File::open(&a.trips).map_err(|e| Error::io(&a.trips, e))?;
    let (d, report) = ingest_csv(std::io::BufReader::new(file), profile, &grid, a.t_end)?;
    for w in &report.warnings {
        log::warn!("{w}");
    }
    create_dir(&a.out)?;
    write_tensor(&a.out.join("demand.bdt"), &d)?;
    write(&a.out.join("ingest_report.json"), &serde_json::to_string_pretty(&report)?)?;
    println!(
        "{} rows, {} accepted, {} dropped; {} bins x {}x{} cells",
        report.rows,
        report.accepted,
        report.dropped(),
        d.bins(),
        d.width(),
        d.height()
    );
    Ok(())
}

fn neighbors(a: &NeighborArgs, exec: Execution) -> anyhow::Result<()> {
    let d = read_tensor(&a.tensor)?;
    if a.kernel_size < 1 {
        return Err(Error::Config("kernel size must be at least 1".into()).into());
    }
    let kind = match a.metric {
        Metric::Pearson => ModelKind::IrconvPearson,
        Metric::Dtw => ModelKind::IrconvDtw,
        Metric::Spatial => ModelKind::CnnLstm,
    };
    let idx = neighbors_for(kind, &d, a.kernel_size, a.band, exec)?.expect("conv kinds have neighbors");
    create_dir(&a.out)?;
    write_neighbor_index(&a.out.join("neighbors.txt"), &idx)?;
    if a.metric != Metric::Spatial && a.kernel_size == 9 {
        let report = neighbor_overlap(&idx, &build_spatial_neighbors(d.width(), d.height()), &d, exec)?;
        write(&a.out.join("similarity.csv"), &report.to_csv())?;
        print!("{}", report.summary());
    }
    Ok(())
}

fn run_one(cfg: &ExperimentConfig, out: &Path, exec: Execution) -> anyhow::Result<String> {
    let (d, _, _) = load_demand(cfg)?;
    let run = run_experiment(cfg, &d, exec)?;
    write_artifacts(out, &run)?;
    print!("{}", run.report.to_table(&format!("{} ({})", cfg.id, cfg.kind)));
    if let Some(s) = &run.similarity {
        print!("{}", s.summary());
    }
    Ok(run.report.to_csv(&cfg.id))
}

fn train_cmd(a: &RunArgs, exec: Execution) -> anyhow::Result<()> {
    let cfg = a.overrides.load()?;
    run_one(&cfg, &a.out, exec)?;
    write(&a.out.join("config.toml"), &cfg.to_toml()?)
}

fn evaluate_cmd(a: &EvaluateArgs, exec: Execution) -> anyhow::Result<()> {
    let cfg = a.overrides.load()?;
    let (d, _, _) = load_demand(&cfg)?;
    let report = evaluate_run(&cfg, &d, &a.run, exec)?;
    print!("{}", report.to_table(&cfg.id));
    if let Some(out) = &a.out {
        create_dir(out)?;
        write(&out.join("report.csv"), &format!("{CSV_HEADER}\n{}", report.to_csv(&cfg.id)))?;
        write(&out.join("report.txt"), &report.to_table(&cfg.id))?;
    }
    Ok(())
}

fn baseline_cmd(a: &BaselineArgs, exec: Execution) -> anyhow::Result<()> {
    let base = a.overrides.load()?;
    let kinds = if a.kinds.is_empty() { ModelKind::ALL.to_vec() } else { a.kinds.clone() };
    let mut rows = String::from(CSV_HEADER);
    rows.push('\n');
    for kind in kinds {
        let mut cfg = base.clone();
        cfg.kind = kind;
        cfg.id = format!("{}-{kind}", base.id);
        cfg.validate()?;
        rows += &run_one(&cfg, &a.out.join(kind.as_str()), exec)?;
    }
    write(&a.out.join("comparison.csv"), &rows)
}

fn synth_cmd(a: &SynthArgs) -> anyhow::Result<()> {
    let mut spec: SyntheticCitySpec = match &a.config {
        Some(p) => read_toml(p)?,
        None => SyntheticCitySpec::default(),
    };
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    if let Some(n) = a.noise {
        spec.noise = n;
    }
    let (d, groups) = generate(&spec)?;
    create_dir(&a.out)?;
    write_tensor(&a.out.join("demand.bdt"), &d)?;
    write_group_map(&a.out.join("groups.csv"), &groups, spec.height)?;
    println!("{} bins x {}x{} cells, {} trips", d.bins(), d.width(), d.height(), d.total());
    Ok(())
}

fn report_cmd(a: &ReportArgs) -> anyhow::Result<()> {
    let mut out = std::io::stdout().lock();
    writeln!(out, "{:<32} {:<8} {:<10} {:>12} {:>8}", "experiment", "metric", "slice", "value", "n")?;
    for dir in &a.runs {
        let path = dir.join("report.csv");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut lines = text.lines();
        if lines.next() != Some(CSV_HEADER) {
            return Err(Error::Data(format!("{} is not a report", path.display())).into());
        }
        for line in lines {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return Err(Error::Data(format!("malformed report row {line:?}")).into());
            }
            writeln!(out, "{:<32} {:<8} {:<10} {:>12} {:>8}", f[0], f[1], f[2], f[3], f[4])?;
        }
        let sim = dir.join("similarity.csv");
        if sim.exists() {
            writeln!(out, "similarity table: {}", sim.display())?;
        }
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let exec = exec_for(cli.threads);
    bikedemand::exec::with_threads(cli.threads, || match &cli.command {
        Command::Ingest(a) => ingest(a),
        Command::Neighbors(a) => neighbors(a, exec),
        Command::Train(a) => train_cmd(a, exec),
        Command::Evaluate(a) => evaluate_cmd(a, exec),
        Command::Baseline(a) => baseline_cmd(a, exec),
        Command::Synth(a) => synth_cmd(a),
        Command::Report(a) => report_cmd(a),
    })
}

fn is_broken_pipe(err: &anyhow::Error) -> bool {
    err.downcast_ref::<std::io::Error>()
        .is_some_and(|e| e.kind() == std::io::ErrorKind::BrokenPipe)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if is_broken_pipe(&e) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn error_kinds_map_to_exit_codes() {
        let code = |e: Error| exit_code(&anyhow::Error::from(e));
        assert_eq!(code(Error::Config("x".into())), 2);
        assert_eq!(code(Error::Data("x".into())), 3);
        assert_eq!(code(Error::Numeric("x".into())), 4);
        assert_eq!(code(Error::Graph("x".into())), 1);
        assert_eq!(code(Error::io(Path::new("p"), std::io::Error::other("x"))), 1);
        assert_eq!(exit_code(&anyhow::anyhow!("other")), 1);
    }

    #[test]
    fn single_thread_is_sequential() {
        assert_eq!(exec_for(Some(1)), Execution::Sequential);
        assert_eq!(exec_for(None), Execution::Parallel);
        assert_eq!(exec_for(Some(4)), Execution::Parallel);
    }
}
