//! Command-line front end: reads a JSON model, runs one simulator, solver
//! or check, and writes CSV tables plus a JSON manifest into `--out`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use expfunc::error::Error;
use expfunc::grid::SpaceGrid;
use expfunc::mc_engine::{estimate_density, simulate_functional, Bandwidth, DensityEstimate, McConfig};
use expfunc::oracle::{crosscheck_suite, ScenarioMatrix};
use expfunc::pide::{solve_cdf, solve_density, BootstrapSource, PideConfig};
use expfunc::process_model::{check_smoothness_conditions_at, validate_model, ProcessModel};
use expfunc::quadrature::QuadConfig;
use expfunc::reversal::reverse_triplet;
use expfunc::stationary::solve_stationary;

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_NUMERICAL: i32 = 2;
pub const EXIT_USAGE: i32 = 64;
pub const EXIT_NO_INPUT: i32 = 66;
pub const EXIT_IO: i32 = 74;

#[derive(Parser, Debug)]
#[command(name = "expfunc", version, about = "Laws of exponential functionals of PII processes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Check the integrability conditions of a model on [0, t].
    Validate(Common),
    /// Monte Carlo samples of I_t.
    Simulate(Common),
    /// Kernel density of Monte Carlo samples of I_t on the grid.
    DensityMc(Common),
    /// Forward equation for the density of I_t.
    SolvePide(PideArgs),
    /// Forward equation for the distribution function of I_t.
    SolveCdf(PideArgs),
    /// Law of I_∞ for Lévy models.
    SolveStationary {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1e-10)]
        tol: f64,
    },
    /// Sufficient conditions for a smooth density of V_t.
    CheckSmoothness {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 4.0)]
        p_max: f64,
    },
    /// Run an oracle scenario matrix and print one JSON report per line.
    Compare {
        #[arg(long)]
        scenarios: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
}

#[derive(Args, Debug, Clone, Serialize)]
struct Common {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    t: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 100_000)]
    paths: usize,
    #[arg(long, default_value_t = 1e-3)]
    dt: f64,
    #[arg(long, default_value_t = 1e-4)]
    grid_min: f64,
    #[arg(long, default_value_t = 1e4)]
    grid_max: f64,
    #[arg(long, default_value_t = 801)]
    grid_points: usize,
    #[arg(long, default_value_t = 1e-3)]
    eps_cutoff: f64,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args, Debug, Clone, Serialize)]
struct PideArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value_t = 0.01)]
    dt_solver: f64,
    #[arg(long, default_value_t = 0.05)]
    t_bootstrap: f64,
    /// Extra times at which slices are written.
    #[arg(long, value_delimiter = ',')]
    record: Vec<f64>,
}

/// Failure of a command, carrying its exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = if e.is_numerical() { EXIT_NUMERICAL } else { EXIT_VALIDATION };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure {
        code: EXIT_IO,
        message: format!("{}: {e}", path.display()),
    }
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub versions: String,
    pub outputs: Vec<String>,
    pub wall_time: f64,
    pub config: Value,
    pub details: Value,
}

/// SHA-256 of the compact JSON text; object keys are sorted by `serde_json`.
pub fn config_hash(config: &Value) -> String {
    let canonical = serde_json::to_string(config).expect("JSON values serialise");
    let digest = Sha256::digest(canonical.as_bytes());
    digest.iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// Writes through a sibling temporary file and a rename.
fn write_atomic(path: &Path, contents: &str) -> Result<(), Failure> {
    let tmp = path.with_extension(format!("tmp{}", std::process::id()));
    fs::write(&tmp, contents).map_err(|e| io_failure(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| io_failure(path, e))
}

fn num(v: f64) -> String {
    format!("{v:.16e}")
}

fn load_model(path: &Path) -> Result<ProcessModel, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure {
        code: EXIT_NO_INPUT,
        message: format!("cannot read model {}: {e}", path.display()),
    })?;
    Ok(ProcessModel::from_json(&text)?)
}

fn grid_of(c: &Common) -> Result<SpaceGrid, Failure> {
    Ok(SpaceGrid::log_spaced(c.grid_min, c.grid_max, c.grid_points)?)
}

fn mc_of(c: &Common) -> McConfig {
    McConfig {
        dt: c.dt,
        eps_cutoff: c.eps_cutoff,
        n_paths: c.paths,
        seed: c.seed,
        ..McConfig::default()
    }
}

/// Collects outputs of one command and writes them with its manifest.
struct Run {
    command: &'static str,
    out: PathBuf,
    seed: u64,
    config: Value,
    files: Vec<(String, String)>,
    details: Value,
    started: Instant,
}

impl Run {
    fn new(command: &'static str, out: &Path, seed: u64, config: Value) -> Self {
        Self {
            command,
            out: out.to_path_buf(),
            seed,
            config,
            files: Vec::new(),
            details: Value::Null,
            started: Instant::now(),
        }
    }

    fn file(&mut self, name: &str, contents: String) {
        self.files.push((format!("{}.{name}", self.command), contents));
    }

    fn finish(self) -> Result<(), Failure> {
        fs::create_dir_all(&self.out).map_err(|e| io_failure(&self.out, e))?;
        let mut outputs = Vec::new();
        for (name, contents) in &self.files {
            let path = self.out.join(name);
            write_atomic(&path, contents)?;
            outputs.push(path.display().to_string());
        }
        let manifest = RunManifest {
            command: self.command.to_string(),
            config_hash: config_hash(&self.config),
            seed: self.seed,
            versions: format!("expfunc {}", env!("CARGO_PKG_VERSION")),
            outputs,
            wall_time: self.started.elapsed().as_secs_f64(),
            config: self.config,
            details: self.details,
        };
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serialises") + "\n";
        write_atomic(&self.out.join(format!("{}.manifest.json", self.command)), &text)
    }
}

fn config_with_model(model: &ProcessModel, args: &impl Serialize) -> Value {
    json!({ "model": model, "args": args })
}

fn validate(c: &Common) -> Result<i32, Failure> {
    let model = load_model(&c.model)?;
    let report = validate_model(&model, c.t, &QuadConfig::default())?;
    let text = serde_json::to_string_pretty(&report).expect("report serialises") + "\n";
    print!("{text}");
    let mut run = Run::new("validate", &c.out, c.seed, config_with_model(&model, c));
    run.file("json", text);
    run.finish()?;
    Ok(if report.ok() { EXIT_OK } else { EXIT_VALIDATION })
}

/// Single-column `I_t` CSV preceded by a `# {json}` metadata line.
pub fn samples_csv(meta: &Value, values: &[f64]) -> String {
    let mut s = format!("# {meta}\nI_t\n");
    for v in values {
        s.push_str(&num(*v));
        s.push('\n');
    }
    s
}

fn simulate(c: &Common) -> Result<i32, Failure> {
    let model = load_model(&c.model)?;
    let cfg = mc_of(c);
    let batch = simulate_functional(&model, c.t, &cfg)?;
    let meta = json!({ "seed": cfg.seed, "t": c.t, "config": cfg });
    let mut run = Run::new("simulate", &c.out, c.seed, config_with_model(&model, c));
    run.file("csv", samples_csv(&meta, &batch.values));
    run.details = json!({ "clamped": batch.clamped, "warnings": batch.warnings });
    run.finish()?;
    Ok(EXIT_OK)
}

fn density_mc(c: &Common) -> Result<i32, Failure> {
    let model = load_model(&c.model)?;
    let grid = grid_of(c)?;
    let batch = simulate_functional(&model, c.t, &mc_of(c))?;
    let p = match estimate_density(&batch.values, grid.y(), Bandwidth::Auto)? {
        DensityEstimate::Density { p, .. } => p,
        DensityEstimate::Degenerate { at } => {
            return Err(Error::Unsupported(format!("I_t is degenerate at {at}; no density exists")).into())
        }
    };
    let mut run = Run::new("density-mc", &c.out, c.seed, config_with_model(&model, c));
    run.file("csv", slices_csv("p", grid.y(), &[c.t], std::slice::from_ref(&p)));
    run.details = json!({ "mass": grid.mass(&p), "warnings": batch.warnings });
    run.finish()?;
    Ok(EXIT_OK)
}

/// Long-format table `s,y,<name>` over every stored slice.
pub fn slices_csv(name: &str, y: &[f64], times: &[f64], values: &[Vec<f64>]) -> String {
    let mut s = format!("s,y,{name}\n");
    for (t, row) in times.iter().zip(values) {
        for (y, v) in y.iter().zip(row) {
            let _ = writeln!(s, "{},{},{}", num(*t), num(*y), num(*v));
        }
    }
    s
}

fn pide_config(a: &PideArgs) -> PideConfig {
    PideConfig {
        dt_solver: a.dt_solver,
        t_bootstrap: a.t_bootstrap,
        bootstrap: BootstrapSource::McKde {
            n_paths: a.common.paths,
            seed: a.common.seed,
            dt: a.common.dt,
            eps_cutoff: a.common.eps_cutoff,
        },
        record_times: a.record.clone(),
        ..PideConfig::default()
    }
}

fn solve_pide(a: &PideArgs) -> Result<i32, Failure> {
    let c = &a.common;
    let model = load_model(&c.model)?;
    let grid = grid_of(c)?;
    let rev = reverse_triplet(model.clone(), c.t)?;
    let field = solve_density(&rev, c.t, &grid, &pide_config(a))?;
    let mut run = Run::new("solve-pide", &c.out, c.seed, config_with_model(&model, a));
    run.file("csv", slices_csv("p", grid.y(), &field.times, &field.values));
    run.details = json!({
        "method": field.method,
        "bootstrap_mass": field.bootstrap_mass,
        "final_mass": field.mass.last(),
        "mass_drift_rate": field.mass_drift_rate(),
        "trace": field.trace,
        "rejections": field.rejections,
        "clipped": field.clipped,
        "warnings": field.warnings,
    });
    run.finish()?;
    Ok(EXIT_OK)
}

fn solve_cdf_cmd(a: &PideArgs) -> Result<i32, Failure> {
    let c = &a.common;
    let model = load_model(&c.model)?;
    let grid = grid_of(c)?;
    let rev = reverse_triplet(model.clone(), c.t)?;
    let field = solve_cdf(&rev, c.t, &grid, &pide_config(a))?;
    let mut run = Run::new("solve-cdf", &c.out, c.seed, config_with_model(&model, a));
    run.file("csv", slices_csv("F", grid.y(), &field.times, &field.values));
    run.details = json!({ "projection": field.projection, "warnings": field.warnings });
    run.finish()?;
    Ok(EXIT_OK)
}

fn solve_stationary_cmd(c: &Common, tol: f64) -> Result<i32, Failure> {
    let model = load_model(&c.model)?;
    let grid = grid_of(c)?;
    let sol = solve_stationary(&model, &grid, tol)?;
    let mut csv = String::from("y,p_inf,F_inf\n");
    for ((y, p), f) in grid.y().iter().zip(&sol.p_inf).zip(&sol.f_inf) {
        let _ = writeln!(csv, "{},{},{}", num(*y), num(*p), num(*f));
    }
    let config = json!({ "model": model, "args": c, "tol": tol });
    let mut run = Run::new("solve-stationary", &c.out, c.seed, config);
    run.file("csv", csv);
    run.details = json!({
        "iterations": sol.iterations,
        "residual_norm": sol.residual_norm,
        "residual_history": sol.residual_history,
        "projection": sol.projection,
    });
    run.finish()?;
    Ok(EXIT_OK)
}

fn check_smoothness(c: &Common, p_max: f64) -> Result<i32, Failure> {
    let model = load_model(&c.model)?;
    let report = check_smoothness_conditions_at(&model, p_max, c.t, &QuadConfig::default())?;
    let text = serde_json::to_string_pretty(&report).expect("report serialises") + "\n";
    print!("{text}");
    let config = json!({ "model": model, "args": c, "p_max": p_max });
    let mut run = Run::new("check-smoothness", &c.out, c.seed, config);
    run.file("json", text);
    run.finish()?;
    Ok(EXIT_OK)
}

fn compare(scenarios: &Path, out: &Path) -> Result<i32, Failure> {
    let text = fs::read_to_string(scenarios).map_err(|e| Failure {
        code: EXIT_NO_INPUT,
        message: format!("cannot read scenarios {}: {e}", scenarios.display()),
    })?;
    let matrix: ScenarioMatrix = serde_json::from_str(&text).map_err(|e| Failure {
        code: EXIT_VALIDATION,
        message: format!("scenario JSON: {e}"),
    })?;
    let result = crosscheck_suite(&matrix)?;
    let mut lines = String::new();
    for r in &result.reports {
        lines.push_str(&serde_json::to_string(r).expect("report serialises"));
        lines.push('\n');
    }
    for s in &result.skipped {
        lines.push_str(&serde_json::to_string(&json!({ "skipped": s })).expect("skip serialises"));
        lines.push('\n');
    }
    print!("{lines}");
    let config = serde_json::to_value(&matrix).expect("matrix serialises");
    let mut run = Run::new("compare", out, 0, config);
    run.file("jsonl", lines);
    run.details = json!({ "all_pass": result.all_pass() });
    run.finish()?;
    Ok(if result.all_pass() { EXIT_OK } else { EXIT_VALIDATION })
}

/// Parses `argv` (including the program name), runs the command and
/// returns the process exit code. Diagnostics go to stderr.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let result = match &cli.command {
        Command::Validate(c) => validate(c),
        Command::Simulate(c) => simulate(c),
        Command::DensityMc(c) => density_mc(c),
        Command::SolvePide(a) => solve_pide(a),
        Command::SolveCdf(a) => solve_cdf_cmd(a),
        Command::SolveStationary { common, tol } => solve_stationary_cmd(common, *tol),
        Command::CheckSmoothness { common, p_max } => check_smoothness(common, *p_max),
        Command::Compare { scenarios, out } => compare(scenarios, out),
    };
    match result {
        Ok(code) => code,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}
