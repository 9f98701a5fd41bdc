use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use softarm_core::harness::{
    identify, report, resolve_model, run_with_model, sweep, MetricsConfig, ModelFile, PlantFile, RunLog, Scenario,
    SweepKind,
};
use softarm_core::{Error, Result};

#[derive(Parser)]
#[command(name = "softarm", version, about = "Soft arm simulation, identification and control")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Override the scenario or identification seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory for logs, models and tables.
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    /// Override the plant integration step, s.
    #[arg(long, global = true)]
    dt: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and write its log and metrics.
    Simulate { scenario: PathBuf },
    /// Run a tracking scenario; also writes the tip plot data.
    Track { scenario: PathBuf },
    /// Identify a model of the plant described in a plant file.
    Identify { plant: PathBuf },
    /// Static verification sweep with and without the model's corrections.
    Sweep {
        plant: PathBuf,
        model: PathBuf,
        #[arg(long, value_enum, default_value = "phase")]
        kind: Kind,
    },
    /// Metrics table and plot data for one or more run logs.
    Report {
        #[arg(required = true)]
        logs: Vec<PathBuf>,
        /// Metrics use log rows from this time on, s.
        #[arg(long, default_value_t = 0.0)]
        from: f64,
        /// Measure settling time from this time, s.
        #[arg(long)]
        settle_from: Option<f64>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Phase,
    Magnitude,
}

fn write(dir: &Path, name: &str, text: &str) -> Result<PathBuf> {
    let path = dir.join(name);
    std::fs::write(&path, text)?;
    Ok(path)
}

fn load_scenario(cli: &Cli, path: &Path) -> Result<Scenario> {
    let mut s = Scenario::load(path)?;
    if let Some(seed) = cli.seed {
        s.seed = seed;
        s.sysid.seed = seed;
    }
    if let Some(dt) = cli.dt {
        s.dt_s = dt;
    }
    s.validate()?;
    Ok(s)
}

fn load_plant(cli: &Cli, path: &Path) -> Result<PlantFile> {
    let mut p = PlantFile::load(path)?;
    if let Some(seed) = cli.seed {
        p.sysid.seed = seed;
    }
    if let Some(dt) = cli.dt {
        if !(dt > 0.0 && dt <= 1e-2) {
            return Err(Error::ConfigError("--dt must be in (0, 0.01]".into()));
        }
        p.sysid.dt_s = dt;
    }
    Ok(p)
}

fn simulate(cli: &Cli, path: &Path, plots: bool) -> Result<()> {
    let s = load_scenario(cli, path)?;
    let model = resolve_model(&s)?;
    let out = run_with_model(&s, &model)?;
    out.log.write(&cli.out_dir.join(format!("{}.csv", s.name)))?;
    write(&cli.out_dir, &format!("{}_metrics.json", s.name), &out.metrics.to_json())?;
    if plots {
        let r = report(&[(s.name.clone(), out.log)], &s.metrics)?;
        for (name, data) in &r.plot_data {
            write(&cli.out_dir, name, data)?;
        }
    }
    let m = &out.metrics;
    println!(
        "{}: mean {:.2} cm, rms {:.2} cm, peak {:.2} cm over {} samples",
        s.name,
        100.0 * m.mean_error_m,
        100.0 * m.rms_error_m,
        100.0 * m.peak_error_m,
        m.samples
    );
    if let Some(t) = m.settling_time_s {
        println!("settling time {t:.3} s");
    }
    if let Some(c) = m.min_obstacle_clearance_m {
        println!("closest obstacle approach {:.2} cm", 100.0 * c);
    }
    Ok(())
}

fn run_identify(cli: &Cli, path: &Path) -> Result<()> {
    let p = load_plant(cli, path)?;
    let id = identify(&p.geometry, &p.plant, &p.sysid, &p.identify)?;
    for h in &id.report.history {
        println!(
            "pass {}: stiffness changed {:.3}%, actuation changed {:.3}%",
            h.pass, h.stiffness_change_pct, h.actuation_change_pct
        );
    }
    println!("stiffness {:?} N m/rad, damping {:?} N m s/rad", id.model.stiffness_nm_per_rad, id.model.damping_nms_per_rad);
    let file = ModelFile { model: id.model, report: Some(id.report) };
    let out = cli.out_dir.join("model.toml");
    file.save(&out)?;
    println!("wrote {}", out.display());
    Ok(())
}

fn run_sweep(cli: &Cli, plant: &Path, model: &Path, kind: Kind) -> Result<()> {
    let p = load_plant(cli, plant)?;
    let m = ModelFile::load(model)?.model;
    m.validate(p.geometry.n_segments())?;
    let (kind, name, unit) = match kind {
        Kind::Phase => (SweepKind::Phase, "sweep_phase.csv", "deg"),
        Kind::Magnitude => (SweepKind::Magnitude, "sweep_magnitude.csv", "cm"),
    };
    let cmp = sweep(&p.geometry, &p.plant, &m, &p.sysid, kind)?;
    let ((um, up), (cm, cp)) = cmp.stats();
    println!("uncorrected mean {um:.2} {unit}, peak {up:.2} {unit}; corrected mean {cm:.2} {unit}, peak {cp:.2} {unit}");
    let out = write(&cli.out_dir, name, &cmp.to_csv())?;
    println!("wrote {}", out.display());
    Ok(())
}

fn run_report(cli: &Cli, logs: &[PathBuf], from: f64, settle_from: Option<f64>) -> Result<()> {
    let mut named = Vec::new();
    for path in logs {
        let name = path.file_stem().map_or("run".into(), |s| s.to_string_lossy().into_owned());
        let log = RunLog::read(path).map_err(|e| match e {
            Error::SchemaError(m) => Error::SchemaError(format!("{}: {m}", path.display())),
            other => other,
        })?;
        named.push((name, log));
    }
    let cfg = MetricsConfig { from_s: from, settle_from_s: settle_from, ..Default::default() };
    let r = report(&named, &cfg)?;
    write(&cli.out_dir, "metrics.csv", &r.table_csv)?;
    for (name, data) in &r.plot_data {
        write(&cli.out_dir, name, data)?;
    }
    print!("{}", r.table_csv);
    Ok(())
}

fn execute(cli: &Cli) -> Result<()> {
    std::fs::create_dir_all(&cli.out_dir)?;
    match &cli.command {
        Command::Simulate { scenario } => simulate(cli, scenario, false),
        Command::Track { scenario } => simulate(cli, scenario, true),
        Command::Identify { plant } => run_identify(cli, plant),
        Command::Sweep { plant, model, kind } => run_sweep(cli, plant, model, *kind),
        Command::Report { logs, from, settle_from } => run_report(cli, logs, *from, *settle_from),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
