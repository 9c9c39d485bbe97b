//! `cyclecert`: runs the certification pipeline and writes certificates and
//! figure data.
//!
//! Exit status: 0 certified or success, 1 valid run with a negative verdict,
//! 2 blocking error (with an error JSON on stderr and in the output
//! directory when it exists).

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use cyclecert::attraction::certify_attraction;
use cyclecert::config::RunConfig;
use cyclecert::euler::{return_times, simulate, write_crossings_csv, write_trajectory_csv, Exclusion, Section};
use cyclecert::field::{SystemSpec, REGISTRY};
use cyclecert::report::to_json_string;
use cyclecert::sync::{error_curve_experiment, write_error_csv};
use cyclecert::tube::{certify_existence, write_steps_csv, write_tube_csv, Verdict};
use cyclecert::Error;

#[derive(Parser, Debug)]
#[command(name = "cyclecert", version, about = "Limit-cycle existence and attraction certificates from Euler tubes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Euler trajectory and section crossings as CSV.
    Simulate(Common),
    /// Existence certificate, tube geometry and per-step dump.
    CertifyExistence(Common),
    /// Basin-of-attraction certificate (runs the existence pipeline first).
    CertifyAttraction(Common),
    /// Synchronized error curves for several step sizes.
    ErrorCurve(Common),
    /// Estimated global constants only.
    Constants(Common),
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Built-in parameter set: vdp-example1 or vdp-example2.
    #[arg(long)]
    preset: Option<String>,
    /// JSON run configuration; flags given alongside override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Registry id or path to a JSON system definition.
    #[arg(long)]
    system: Option<String>,
    /// System parameter, repeatable: --param p=0.3
    #[arg(long = "param", value_parser = parse_param)]
    params: Vec<(String, f64)>,
    /// Step size; a comma-separated list for error-curve.
    #[arg(long, value_delimiter = ',')]
    h: Vec<f64>,
    #[arg(long)]
    delta0: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    /// Initial point, comma-separated.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    x0: Vec<f64>,
    /// Reference start for error-curve, comma-separated.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    y0: Vec<f64>,
    /// Section-disk samples for certify-attraction.
    #[arg(long)]
    samples: Option<usize>,
    /// Segments sharing one Λ evaluation.
    #[arg(long)]
    stride: Option<usize>,
    /// Simulated time for simulate.
    #[arg(long)]
    horizon: Option<f64>,
    /// Error-floor constant used by error-curve instead of the estimated one.
    #[arg(long = "floor-constant")]
    floor_constant: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

fn parse_param(s: &str) -> Result<(String, f64), String> {
    let (k, v) = s.split_once('=').ok_or_else(|| format!("expected name=value, got `{s}`"))?;
    let v: f64 = v.trim().parse().map_err(|e| format!("bad value in `{s}`: {e}"))?;
    Ok((k.trim().to_string(), v))
}

#[derive(Serialize)]
struct ErrorReport<'a> {
    error: ErrorBody<'a>,
}

#[derive(Serialize)]
struct ErrorBody<'a> {
    kind: &'a str,
    message: String,
}

enum Outcome {
    Success,
    Negative,
}

impl Common {
    fn resolve(&self) -> cyclecert::Result<RunConfig> {
        let mut cfg = match (&self.preset, &self.config) {
            (Some(_), Some(_)) => return Err(Error::InvalidParameter("--preset and --config are exclusive".into())),
            (Some(p), None) => RunConfig::preset(p)?,
            (None, Some(path)) => RunConfig::from_json(&std::fs::read_to_string(path)?)?,
            (None, None) => RunConfig::default(),
        };
        if let Some(system) = self.system.as_deref() {
            cfg.system = if REGISTRY.contains(&system) {
                SystemSpec { id: Some(system.to_string()), ..Default::default() }
            } else if Path::new(system).is_file() {
                SystemSpec::from_json(&std::fs::read_to_string(system)?)?
            } else {
                return Err(Error::UnknownSystem(system.to_string()));
            };
            if self.preset.is_some() || cfg.x0.is_empty() {
                cfg.x0 = default_x0(&cfg.system);
            }
        }
        let params: BTreeMap<String, f64> = self.params.iter().cloned().collect();
        cfg.system.params.extend(params);
        match self.h.as_slice() {
            [] => {}
            [h] => {
                cfg.h = *h;
                cfg.h_list = vec![*h];
            }
            list => cfg.h_list = list.to_vec(),
        }
        if !self.x0.is_empty() {
            cfg.x0 = self.x0.clone();
        }
        if !self.y0.is_empty() {
            cfg.y0 = Some(self.y0.clone());
        }
        if let Some(v) = self.delta0 {
            cfg.delta0 = v;
        }
        if let Some(v) = self.gamma {
            cfg.gamma = v;
        }
        if let Some(v) = self.samples {
            cfg.n_samples = v;
        }
        if let Some(v) = self.stride {
            cfg.lambda_stride = v;
        }
        if let Some(v) = self.horizon {
            cfg.horizon = v;
        }
        if let Some(v) = self.floor_constant {
            cfg.floor_constant = Some(v);
        }
        if let Some(v) = &self.out {
            cfg.out = v.clone();
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// A start point for registry systems named without `--x0`.
fn default_x0(system: &SystemSpec) -> Vec<f64> {
    let dim = system
        .rhs
        .as_ref()
        .map(Vec::len)
        .or_else(|| (system.id.as_deref() == Some("linear-stable")).then(|| system.params.get("dim").map_or(2, |d| *d as usize)))
        .unwrap_or(2);
    let mut x0 = vec![0.0; dim];
    x0[0] = 1.0;
    x0
}

/// Writes through a temporary file in the same directory, then renames.
fn write_atomic(dir: &Path, name: &str, fill: impl FnOnce(&mut dyn Write) -> cyclecert::Result<()>) -> cyclecert::Result<()> {
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    {
        let mut buf = std::io::BufWriter::new(tmp.as_file_mut());
        fill(&mut buf)?;
        buf.flush()?;
    }
    tmp.persist(dir.join(name)).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> cyclecert::Result<()> {
    let text = to_json_string(value)?;
    write_atomic(dir, name, |w| Ok(w.write_all(text.as_bytes())?))
}

fn common(command: &Command) -> &Common {
    match command {
        Command::Simulate(c)
        | Command::CertifyExistence(c)
        | Command::CertifyAttraction(c)
        | Command::ErrorCurve(c)
        | Command::Constants(c) => c,
    }
}

fn run(command: &Command) -> cyclecert::Result<(Outcome, RunConfig)> {
    let cfg = common(command).resolve()?;
    let field = cfg.field()?;
    std::fs::create_dir_all(&cfg.out)?;
    let out = cfg.out.as_path();
    let x0 = nalgebra::DVector::from_vec(cfg.x0.clone());

    let outcome = match command {
        Command::Simulate(_) => {
            let traj = simulate(&field, &x0, cfg.h, (cfg.horizon / cfg.h).ceil() as usize)?;
            let section = Section::through(&field, &x0)?;
            let returns = return_times(&traj, &section, usize::MAX, Exclusion::standard(cfg.h, cfg.delta0))?;
            write_atomic(out, "trajectory.csv", |w| write_trajectory_csv(&traj, w))?;
            write_atomic(out, "crossings.csv", |w| write_crossings_csv(&returns.returns, field.dim(), w))?;
            println!("simulated {} steps, {} returns", traj.n_steps(), returns.returns.len());
            Outcome::Success
        }
        Command::CertifyExistence(_) | Command::Constants(_) => {
            let run = certify_existence(&field, &x0, cfg.h, cfg.delta0, cfg.gamma, &cfg.existence_config());
            let cert = &run.certificate;
            if matches!(command, Command::Constants(_)) {
                let Some(constants) = &cert.constants else {
                    let d = &cert.diagnostics[0];
                    return Err(Error::Precondition(format!("constants unavailable: {}: {}", d.kind, d.detail)));
                };
                write_json(out, "constants.json", constants)?;
                println!("L = {:.6}, M_f = {:.6}, a = {:.6}, b = {:.6}", constants.lipschitz, constants.m_f, constants.a, constants.b);
                Outcome::Success
            } else {
                write_json(out, "existence.json", cert)?;
                if let (Some(tube), Some(traj)) = (&run.tube, &run.trajectory) {
                    write_atomic(out, "tube.csv", |w| write_tube_csv(tube, traj, w))?;
                    write_atomic(out, "steps.csv", |w| write_steps_csv(tube, w))?;
                }
                report_verdict("existence", cert.verdict, &cert.diagnostics)
            }
        }
        Command::CertifyAttraction(_) => {
            let ecfg = cfg.existence_config();
            let run = certify_existence(&field, &x0, cfg.h, cfg.delta0, cfg.gamma, &ecfg);
            write_json(out, "existence.json", &run.certificate)?;
            if run.certificate.verdict != Verdict::Certified {
                // a negative upstream verdict, not a tool failure
                write_error(out, &Error::Precondition("existence certificate is not certified".into()));
                report_verdict("existence", run.certificate.verdict, &run.certificate.diagnostics);
                return Ok((Outcome::Negative, cfg));
            }
            let cert = certify_attraction(&run.certificate, &field, &ecfg, &cfg.attraction_config())?;
            write_json(out, "attraction.json", &cert)?;
            println!("d = {:.6}, D = {:.3}", cert.d, cert.big_d);
            report_verdict("attraction", cert.verdict, &[])
        }
        Command::ErrorCurve(_) => {
            let y0 = cfg
                .y0
                .clone()
                .ok_or_else(|| Error::InvalidParameter("error-curve needs --y0 or a preset that sets it".into()))?;
            let h_list = if cfg.h_list.is_empty() { vec![cfg.h] } else { cfg.h_list.clone() };
            let report = error_curve_experiment(&field, &x0, &nalgebra::DVector::from_vec(y0), &h_list, &cfg.error_curve_config())?;
            for (k, run) in report.runs.iter().enumerate() {
                write_atomic(out, &format!("error_{k}_h{}.csv", run.h), |w| write_error_csv(run, w))?;
                println!("h = {:e}: tail = {:.3e}, D h = {:.3e}, pass = {}", run.h, run.tail_max, run.dh, run.pass);
            }
            write_json(out, "error_curve.json", &report)?;
            println!("ordered = {}, tail/h spread = {:.3}", report.ordered, report.ratio_spread);
            if report.runs.iter().all(|r| r.pass) && report.ordered {
                Outcome::Success
            } else {
                Outcome::Negative
            }
        }
    };
    Ok((outcome, cfg))
}

fn report_verdict(what: &str, verdict: Verdict, diagnostics: &[cyclecert::tube::Diagnostic]) -> Outcome {
    match verdict {
        Verdict::Certified => {
            println!("{what}: certified");
            Outcome::Success
        }
        Verdict::Failed => {
            println!("{what}: failed");
            for d in diagnostics {
                println!("  {}: {}", d.kind, d.detail);
            }
            Outcome::Negative
        }
    }
}

fn error_json(e: &Error) -> String {
    let report = ErrorReport { error: ErrorBody { kind: e.kind(), message: e.to_string() } };
    serde_json::to_string_pretty(&report).expect("error report serializes")
}

fn write_error(dir: &Path, e: &Error) {
    let text = error_json(e) + "\n";
    // best effort: the error itself is already on its way to stderr
    let _ = write_atomic(dir, "error.json", |w| Ok(w.write_all(text.as_bytes())?));
}

fn configure_threads() {
    if let Some(n) = std::env::var("CYCLECERT_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        if n > 0 {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let report = ErrorReport { error: ErrorBody { kind: "usage", message: e.render().to_string().trim_end().to_string() } };
            eprintln!("{}", serde_json::to_string_pretty(&report).expect("error report serializes"));
            return ExitCode::from(2);
        }
    };
    configure_threads();
    match run(&cli.command) {
        Ok((Outcome::Success, _)) => ExitCode::SUCCESS,
        Ok((Outcome::Negative, _)) => ExitCode::from(1),
        Err(e) => {
            eprintln!("{}", error_json(&e));
            let dir = common(&cli.command).out.clone().unwrap_or_else(|| RunConfig::default().out);
            if dir.is_dir() {
                write_error(&dir, &e);
            }
            ExitCode::from(2)
        }
    }
}
