//! `srmcp` command line: argument parsing, model resolution, report
//! envelopes and plot data.

use clap::{Args, Parser, Subcommand};
use nalgebra::DVector;
use serde::Serialize;
use serde_json::{json, Value};
use srmcp::distance::{
    distance_cached, div_decomposition, divergence_from, divergence_variational,
    horizontal_gradient_from, DivergenceOptions,
};
use srmcp::endpoint::{
    annulus_targets, endpoint, semiconcavity_certificate, singular_test, ControlPath,
    SupportOptions,
};
use srmcp::hamiltonian::{extremal_flow, DEFAULT_FLOW_TOL};
use srmcp::mcp::{
    balls_off_axis, contraction_flow, estimate_n, mcp_check, smooth_points, violation_search,
    ComparisonParams, EstimateOptions, McpOptions, Region, RegionSample, SearchOptions,
};
use srmcp::{DistanceCache, GroupSpec, Model, ShootingOptions};
use std::ffi::OsString;
use std::path::{Path, PathBuf};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] srmcp::Error),
    #[error("{0}")]
    Usage(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    /// 1 for invalid input, 2 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        use srmcp::Error as E;
        match self {
            CliError::Usage(_) | CliError::Csv(_) | CliError::Io(_) => 1,
            CliError::Core(e) => match e {
                E::InvalidAlgebra(_)
                | E::UnknownModel(_)
                | E::InvalidInput(_)
                | E::NonpositiveLambda(_)
                | E::Io(_)
                | E::Json(_) => 1,
                _ => 2,
            },
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(
    name = "srmcp",
    version,
    about = "Sub-Riemannian distances and measure contraction on Carnot groups"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct GlobalArgs {
    /// Builtin model name (heisenberg1, abelian3, engel, …) or a JSON group spec.
    #[arg(long, global = true, default_value = "heisenberg1")]
    pub model: String,
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Shooting tolerance on `|exp_x(p) − y|`.
    #[arg(long, global = true, default_value_t = 1e-9)]
    pub tol: f64,
    /// Covector budget `A` for multistart shooting (default: from target scale).
    #[arg(long = "budget-A", global = true)]
    pub budget_a: Option<f64>,
    /// Worker threads (default: available cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Output directory for the JSON report and CSV plot data; stdout if absent.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Validate or inspect group models.
    #[command(subcommand)]
    Model(ModelCommand),
    /// Integrate a normal extremal.
    Geodesic {
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
        p: Vec<f64>,
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
        x: Option<Vec<f64>>,
        #[arg(long, default_value_t = 1.0)]
        time: f64,
        #[arg(long, default_value_t = 10)]
        samples: usize,
    },
    /// Sub-Riemannian distance by multistart shooting.
    Distance {
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
        y: Vec<f64>,
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
        x: Option<Vec<f64>>,
    },
    /// Horizontal gradient and divergence of `d(x,·)²/2`.
    Field {
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
        y: Vec<f64>,
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
        x: Option<Vec<f64>>,
        /// Relative step of the finite-difference gradient check.
        #[arg(long, default_value_t = 1e-4)]
        fd_step: f64,
        /// Relative stencil step of the divergence.
        #[arg(long, default_value_t = 2e-3)]
        div_step: f64,
    },
    /// Singular-control test for a piecewise-constant control (CSV, one row per piece).
    Singular {
        #[arg(long)]
        control: PathBuf,
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
        x: Option<Vec<f64>>,
        #[arg(long, default_value_t = 1e-8)]
        threshold: f64,
        #[arg(long, default_value_t = 512)]
        max_pieces: usize,
    },
    /// Support-function probes of `d(0,·)²` on an annulus.
    Semiconcavity {
        #[arg(long, value_delimiter = ',', num_args = 2, default_values_t = [0.5, 2.0])]
        annulus: Vec<f64>,
        /// Radius of the excluded tube around the higher layers.
        #[arg(long, default_value_t = 0.2)]
        exclude: f64,
        #[arg(long, default_value_t = 100)]
        points: usize,
        #[arg(long, default_value_t = 0.1)]
        radius: f64,
        #[arg(long, default_value_t = 2)]
        grid: usize,
        #[arg(long, default_value_t = 128)]
        pieces: usize,
        /// Repeat on a grid twice as fine and report both constants.
        #[arg(long)]
        refine: bool,
    },
    /// Estimate `N` from divergences on the unit sphere.
    #[command(name = "estimate-N")]
    EstimateN {
        #[arg(long, default_value_t = 1000)]
        samples: usize,
        #[arg(long, default_value_t = 2e-3)]
        step: f64,
        #[arg(long, default_value_t = 1e-4)]
        div_tol: f64,
    },
    /// Monte-Carlo check of `MCP(K, N)` on regions.
    McpVerify {
        #[arg(long = "N")]
        n: f64,
        #[arg(long = "K", default_value_t = 0.0, allow_negative_numbers = true)]
        k: f64,
        /// JSON list of regions; random balls off the vertical axis if absent.
        #[arg(long)]
        regions: Option<PathBuf>,
        #[arg(long, default_value_t = 20)]
        balls: usize,
        #[arg(long, value_delimiter = ',', default_values_t = [0.25, 0.5, 0.75])]
        s_grid: Vec<f64>,
        #[arg(long, default_value_t = 16)]
        points: usize,
        /// Search thin balls next to the vertical axis for a violation instead.
        #[arg(long)]
        search: bool,
    },
    /// Contraction-flow identities at sample points.
    FlowCheck {
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
        y: Option<Vec<f64>>,
        #[arg(long, default_value_t = 5)]
        points: usize,
        #[arg(long, value_delimiter = ',', default_values_t = [0.25, 0.5, std::f64::consts::LN_2, 1.0, 2.0])]
        t_grid: Vec<f64>,
        #[arg(long, default_value_t = 1e-8)]
        ode_tol: f64,
    },
}

#[derive(Subcommand, Debug)]
pub enum ModelCommand {
    /// Check a JSON group spec.
    Validate { file: PathBuf },
    /// Describe a builtin model.
    Inspect { name: String },
}

/// Echo of the configuration written into every report.
#[derive(Serialize, Debug, Clone)]
pub struct ConfigEcho {
    pub command: String,
    pub model: String,
    pub seed: u64,
    pub tol: f64,
    pub budget_a: Option<f64>,
    pub args: Vec<String>,
}

/// Result of a subcommand: the JSON payload plus CSV series to emit.
pub struct Outcome {
    pub payload: Value,
    pub plots: Vec<PlotSeries>,
    /// Numerical failure detected after the payload was assembled.
    pub failure: Option<CliError>,
}

impl Outcome {
    fn ok(payload: impl Serialize) -> CliResult<Self> {
        Ok(Self {
            payload: to_value(payload)?,
            plots: Vec::new(),
            failure: None,
        })
    }
}

pub struct PlotSeries {
    pub file: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

fn to_value(v: impl Serialize) -> CliResult<Value> {
    serde_json::to_value(v).map_err(|e| CliError::Core(e.into()))
}

pub fn resolve_model(source: &str) -> CliResult<Model> {
    let path = Path::new(source);
    if path.extension().is_some_and(|e| e == "json") || path.exists() {
        let text = std::fs::read_to_string(path)?;
        Ok(Model::from_spec(&GroupSpec::from_json(&text)?)?)
    } else {
        Ok(Model::builtin(source)?)
    }
}

fn shooting(global: &GlobalArgs, model: &Model) -> CliResult<ShootingOptions> {
    if !(global.tol > 0.0) || global.budget_a.is_some_and(|a| !(a > 0.0)) {
        return Err(CliError::Usage(
            "--tol and --budget-A must be positive".into(),
        ));
    }
    Ok(ShootingOptions {
        tol: global.tol,
        budget: global.budget_a,
        ..ShootingOptions::for_model(model)
    })
}

fn point(model: &Model, v: Option<&[f64]>, what: &str) -> CliResult<DVector<f64>> {
    match v {
        None => Ok(DVector::zeros(model.dim())),
        Some(v) if v.len() == model.dim() => Ok(DVector::from_column_slice(v)),
        Some(v) => Err(CliError::Usage(format!(
            "{what} has {} components, model dimension is {}",
            v.len(),
            model.dim()
        ))),
    }
}

fn model_report(model: &Model, seed: u64) -> Value {
    let alg = model.algebra();
    let fat = alg.medium_fat_check(32, seed);
    let witness = match &fat {
        srmcp::MediumFat::Yes => None,
        srmcp::MediumFat::No { witness } => {
            Some(witness.iter().map(|c| format!("{c}")).collect::<Vec<_>>())
        }
    };
    json!({
        "name": model.name(),
        "dim": model.dim(),
        "rank": model.rank(),
        "step": model.step(),
        "weights": model.weights(),
        "two_step": alg.is_two_step(),
        "medium_fat": fat.holds(),
        "medium_fat_witness": witness,
        "homogeneity_residual": model.homogeneity_residual(64, seed),
        "spec": GroupSpec::from_algebra(alg),
    })
}

fn run_model(cmd: &ModelCommand, global: &GlobalArgs) -> CliResult<Outcome> {
    match cmd {
        ModelCommand::Validate { file } => {
            let text = std::fs::read_to_string(file)?;
            let built = GroupSpec::from_json(&text).and_then(|s| Model::from_spec(&s));
            match built {
                Ok(model) => {
                    let mut report = model_report(&model, global.seed);
                    report["valid"] = json!(true);
                    Outcome::ok(report)
                }
                Err(e) => Ok(Outcome {
                    payload: json!({ "valid": false, "reason": e.to_string() }),
                    plots: Vec::new(),
                    failure: Some(e.into()),
                }),
            }
        }
        ModelCommand::Inspect { name } => {
            let model = Model::builtin(name)?;
            let mut report = model_report(&model, global.seed);
            let frame: Vec<Vec<String>> = model
                .left_frame_symbolic()
                .iter()
                .map(|field| field.iter().map(|c| c.to_string()).collect())
                .collect();
            report["frame"] = json!(frame);
            Outcome::ok(report)
        }
    }
}

fn run_command(cmd: &Command, global: &GlobalArgs) -> CliResult<Outcome> {
    if let Command::Model(m) = cmd {
        return run_model(m, global);
    }
    let model = resolve_model(&global.model)?;
    let opts = shooting(global, &model)?;
    match cmd {
        Command::Model(_) => unreachable!("handled above"),
        Command::Geodesic {
            p,
            x,
            time,
            samples,
        } => {
            let x = point(&model, x.as_deref(), "--x")?;
            let p = point(&model, Some(p), "--p")?;
            let arc = extremal_flow(&model, &x, &p, *time, DEFAULT_FLOW_TOL)?;
            let k = (*samples).max(1);
            let path: Vec<Value> = (0..=k)
                .map(|i| {
                    let t = time * i as f64 / k as f64;
                    let (xt, pt) = arc.at(t);
                    json!({ "t": t, "x": xt.as_slice(), "p": pt.as_slice() })
                })
                .collect();
            Outcome::ok(json!({
                "base": x.as_slice(),
                "covector": p.as_slice(),
                "time": time,
                "energy": arc.energy,
                "endpoint": arc.endpoint.as_slice(),
                "end_covector": arc.end_covector.as_slice(),
                "max_drift": arc.max_drift,
                "path": path,
                "flow_tol": DEFAULT_FLOW_TOL,
            }))
        }
        Command::Distance { y, x } => {
            let x = point(&model, x.as_deref(), "--x")?;
            let y = point(&model, Some(y), "--y")?;
            let cache = DistanceCache::from_env(1e-6)?;
            let res = distance_cached(&model, &x, &y, &opts, cache.as_ref())?;
            if let Some(c) = &cache {
                c.save()?;
            }
            Outcome::ok(json!({ "result": res, "shooting": opts }))
        }
        Command::Field {
            y,
            x,
            fd_step,
            div_step,
        } => {
            let x = point(&model, x.as_deref(), "--x")?;
            let y = point(&model, Some(y), "--y")?;
            let cache = DistanceCache::from_env(1e-6)?;
            let res = distance_cached(&model, &x, &y, &opts, cache.as_ref())?;
            if let Some(c) = &cache {
                c.save()?;
            }
            if !res.is_smooth() {
                return Err(srmcp::Error::NotSmoothPoint(format!(
                    "{:?} is {:?}",
                    y.as_slice(),
                    res.classification
                ))
                .into());
            }
            let div_opts = DivergenceOptions {
                step: *div_step,
                ..Default::default()
            };
            let gradient = horizontal_gradient_from(&model, &res, &opts, Some(*fd_step))?;
            let divergence = divergence_from(&model, &res, &opts, &div_opts)?;
            let variational = divergence_variational(&model, &res, &opts)?;
            let decomposition = div_decomposition(&model, &res, &opts, &div_opts)?;
            Outcome::ok(json!({
                "distance": res,
                "gradient": gradient,
                "divergence": divergence,
                "divergence_variational": variational,
                "decomposition": decomposition,
                "shooting": opts,
                "divergence_options": div_opts,
            }))
        }
        Command::Singular {
            control,
            x,
            threshold,
            max_pieces,
        } => {
            let x = point(&model, x.as_deref(), "--x")?;
            let u = read_control(control)?;
            if u.rank() != model.rank() {
                return Err(CliError::Usage(format!(
                    "control has {} columns, model rank is {}",
                    u.rank(),
                    model.rank()
                )));
            }
            let report = singular_test(&model, &x, &u, *threshold, *max_pieces)?;
            let end = endpoint(&model, &x, &u)?;
            Outcome::ok(
                json!({ "base": x.as_slice(), "pieces": u.pieces(), "endpoint": end.as_slice(), "report": report }),
            )
        }
        Command::Semiconcavity {
            annulus,
            exclude,
            points,
            radius,
            grid,
            pieces,
            refine,
        } => {
            let sopts = SupportOptions {
                radius: *radius,
                grid: *grid,
                pieces: *pieces,
                slack: 2.0 * opts.tol,
                shooting: opts.clone(),
            };
            let targets = annulus_targets(
                &model,
                annulus[0],
                annulus[1],
                *exclude,
                *points,
                global.seed,
                &opts,
            )?;
            let report = semiconcavity_certificate(&model, &targets, &sopts);
            let refined = if *refine {
                let finer = SupportOptions {
                    grid: grid * 2,
                    ..sopts.clone()
                };
                Some(semiconcavity_certificate(&model, &targets, &finer))
            } else {
                None
            };
            let c_ratio = refined.as_ref().map(|r| r.c_estimate / report.c_estimate);
            let mut out = Outcome::ok(json!({
                "annulus": annulus,
                "exclude": exclude,
                "C_estimate": report.c_estimate,
                "violations": report.violations,
                "per_point": report.per_point,
                "skipped": report.skipped,
                "options": sopts,
                "refined_C_estimate": refined.as_ref().map(|r| r.c_estimate),
                "refined_violations": refined.as_ref().map(|r| r.violations.len()),
                "C_ratio": c_ratio,
            }))?;
            out.plots.push(PlotSeries {
                file: "semiconcavity.csv".into(),
                header: [
                    "index",
                    "distance",
                    "c_estimate",
                    "second_order",
                    "max_gap",
                    "max_correction_norm",
                ]
                .map(String::from)
                .to_vec(),
                rows: report
                    .per_point
                    .iter()
                    .enumerate()
                    .map(|(i, p)| {
                        vec![
                            i.to_string(),
                            fmt(p.distance),
                            fmt(p.c_estimate),
                            fmt(p.second_order),
                            fmt(p.max_gap),
                            fmt(p.max_correction_norm),
                        ]
                    })
                    .collect(),
            });
            Ok(out)
        }
        Command::EstimateN {
            samples,
            step,
            div_tol,
        } => {
            let eopts = EstimateOptions {
                samples: *samples,
                seed: global.seed,
                shooting: opts,
                divergence: DivergenceOptions {
                    step: *step,
                    tol: *div_tol,
                },
                ..Default::default()
            };
            let est = estimate_n(&model, &eopts)?;
            let rank = model.rank();
            let rows = est
                .samples
                .iter()
                .map(|s| {
                    let horizontal = s.point[..rank].iter().map(|a| a * a).sum::<f64>().sqrt();
                    let vertical = s.point[rank..].iter().map(|a| a * a).sum::<f64>().sqrt();
                    vec![
                        s.index.to_string(),
                        fmt(vertical.atan2(horizontal)),
                        fmt(s.divergence),
                    ]
                })
                .collect();
            let mut out = Outcome::ok(&est)?;
            out.plots.push(PlotSeries {
                file: "sphere_divergence.csv".into(),
                header: ["index", "elevation", "divergence"]
                    .map(String::from)
                    .to_vec(),
                rows,
            });
            Ok(out)
        }
        Command::McpVerify {
            n,
            k,
            regions,
            balls,
            s_grid,
            points,
            search,
        } => {
            let params = ComparisonParams::new(*k, *n)?;
            let x = DVector::zeros(model.dim());
            let mopts = McpOptions {
                shooting: opts,
                ..Default::default()
            };
            if *search {
                let sopts = SearchOptions {
                    mcp: mopts,
                    ..SearchOptions::heisenberg_axis(global.seed)
                };
                if sopts.centers.iter().any(|c| c.len() != model.dim()) {
                    return Err(CliError::Usage(
                        "--search uses heisenberg1 ball centers".into(),
                    ));
                }
                let found = violation_search(&model, &x, &params, &sopts)?;
                let mut out = Outcome::ok(&found)?;
                out.plots.push(ratio_series(
                    found.reports.iter().flat_map(|r| r.rows.iter()),
                ));
                return Ok(out);
            }
            let regions: Vec<Region> = match regions {
                Some(path) => serde_json::from_str(&std::fs::read_to_string(path)?)
                    .map_err(|e| CliError::Usage(format!("regions file: {e}")))?,
                None => balls_off_axis(&model, *balls, 0.05, 0.2, global.seed),
            };
            let samples = regions
                .iter()
                .enumerate()
                .map(|(i, r)| {
                    RegionSample::draw(
                        &model,
                        &x,
                        r,
                        *points,
                        global.seed.wrapping_add(i as u64),
                        &mopts.shooting,
                    )
                })
                .collect::<srmcp::Result<Vec<_>>>()?;
            let report = mcp_check(&model, &x, &samples, s_grid, &params, &mopts)?;
            let failure = report.coherence().err().map(CliError::from);
            let mut out = Outcome::ok(&report)?;
            out.failure = failure;
            out.plots.push(ratio_series(report.rows.iter()));
            Ok(out)
        }
        Command::FlowCheck {
            y,
            points,
            t_grid,
            ode_tol,
        } => {
            let x = DVector::zeros(model.dim());
            let starts = match y {
                Some(y) => {
                    let y = point(&model, Some(y), "--y")?;
                    vec![srmcp::distance::distance(&model, &x, &y, &opts)?]
                }
                None => smooth_points(&model, &x, *points, (0.3, 1.5), global.seed, &opts).0,
            };
            let traces = starts
                .iter()
                .map(|s| contraction_flow(&model, s, t_grid, &opts, *ode_tol))
                .collect::<srmcp::Result<Vec<_>>>()?;
            let max_residual = traces.iter().map(|t| t.max_residual).fold(0.0, f64::max);
            let mut rows = Vec::new();
            for (i, t) in traces.iter().enumerate() {
                for j in 0..t.times.len() {
                    let decay = (-t.times[j]).exp();
                    rows.push(vec![
                        i.to_string(),
                        fmt(t.times[j]),
                        fmt(t.theta[j]),
                        fmt(t.distance * (1.0 - decay)),
                        fmt(t.distances[j]),
                        fmt(t.distance * decay),
                        fmt(t.residuals[j]),
                    ]);
                }
            }
            let mut out = Outcome::ok(json!({ "max_residual": max_residual, "traces": traces }))?;
            out.plots.push(PlotSeries {
                file: "flow.csv".into(),
                header: [
                    "point",
                    "t",
                    "theta",
                    "theta_expected",
                    "distance",
                    "distance_expected",
                    "residual",
                ]
                .map(String::from)
                .to_vec(),
                rows,
            });
            Ok(out)
        }
    }
}

fn fmt(v: f64) -> String {
    format!("{v:e}")
}

fn ratio_series<'a>(rows: impl Iterator<Item = &'a srmcp::mcp::McpRow>) -> PlotSeries {
    PlotSeries {
        file: "mcp_ratios.csv".into(),
        header: ["region", "s", "ratio", "estimator_gap"]
            .map(String::from)
            .to_vec(),
        rows: rows
            .map(|r| {
                vec![
                    r.region.to_string(),
                    fmt(r.s),
                    fmt(r.ratio),
                    fmt(r.estimator_gap),
                ]
            })
            .collect(),
    }
}

/// One piece per row, one column per field; `#` starts a comment line.
pub fn read_control(path: &Path) -> CliResult<ControlPath> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_path(path)?;
    let mut values = Vec::new();
    for record in reader.records() {
        let record = record?;
        let row = record
            .iter()
            .map(|f| {
                f.parse::<f64>()
                    .map_err(|e| CliError::Usage(format!("control value {f:?}: {e}")))
            })
            .collect::<CliResult<Vec<_>>>()?;
        values.push(row);
    }
    Ok(ControlPath::new(values)?)
}

/// Writes the CSV series under `dir`. Series without rows are skipped; if
/// none has rows, nothing is written and a warning is logged.
pub fn emit_plotdata(dir: &Path, plots: &[PlotSeries]) -> CliResult<Vec<PathBuf>> {
    let mut written = Vec::new();
    for p in plots.iter().filter(|p| !p.rows.is_empty()) {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(&p.file);
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(&p.header)?;
        for r in &p.rows {
            w.write_record(r)?;
        }
        w.flush()?;
        written.push(path);
    }
    if written.is_empty() {
        log::warn!("report has no plot data; no CSV written");
    }
    Ok(written)
}

fn command_name(cmd: &Command) -> &'static str {
    match cmd {
        Command::Model(ModelCommand::Validate { .. }) => "model-validate",
        Command::Model(ModelCommand::Inspect { .. }) => "model-inspect",
        Command::Geodesic { .. } => "geodesic",
        Command::Distance { .. } => "distance",
        Command::Field { .. } => "field",
        Command::Singular { .. } => "singular",
        Command::Semiconcavity { .. } => "semiconcavity",
        Command::EstimateN { .. } => "estimate-N",
        Command::McpVerify { .. } => "mcp-verify",
        Command::FlowCheck { .. } => "flow-check",
    }
}

/// Report envelope: schema, config echo, payload, and the error if any.
pub fn envelope(config: &ConfigEcho, payload: Option<&Value>, error: Option<&CliError>) -> Value {
    json!({
        "schema": SCHEMA_VERSION,
        "config": config,
        "result": payload,
        "error": error.map(|e| e.to_string()),
    })
}

// Where the report goes and how many threads compute it do not change it.
fn echoed_args(argv: &[OsString]) -> Vec<String> {
    let mut out = Vec::new();
    let mut skip = false;
    for a in argv
        .iter()
        .skip(1)
        .map(|a| a.to_string_lossy().into_owned())
    {
        if std::mem::take(&mut skip) {
            continue;
        }
        match a.as_str() {
            "--out" | "--jobs" => skip = true,
            _ if a.starts_with("--out=") || a.starts_with("--jobs=") => {}
            _ => out.push(a),
        }
    }
    out
}

/// Parses `argv`, runs the subcommand, writes the report, and returns the
/// process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let config = ConfigEcho {
        command: command_name(&cli.command).to_string(),
        model: cli.global.model.clone(),
        seed: cli.global.seed,
        tol: cli.global.tol,
        budget_a: cli.global.budget_a,
        args: echoed_args(&argv),
    };
    let jobs = cli
        .global
        .jobs
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
        .max(1);
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(jobs).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: thread pool: {e}");
            return 2;
        }
    };
    let started = std::time::Instant::now();
    let outcome = pool.install(|| run_command(&cli.command, &cli.global));
    log::info!(
        "{} finished in {:.3}s",
        config.command,
        started.elapsed().as_secs_f64()
    );
    let (payload, plots, error) = match outcome {
        Ok(o) => (Some(o.payload), o.plots, o.failure),
        Err(e) => (None, Vec::new(), Some(e)),
    };
    let report = envelope(&config, payload.as_ref(), error.as_ref());
    let text = serde_json::to_string_pretty(&report).expect("JSON values serialize") + "\n";
    let mut code = error.as_ref().map_or(0, CliError::exit_code);
    match &cli.global.out {
        Some(dir) => {
            let written = std::fs::create_dir_all(dir)
                .and_then(|_| std::fs::write(dir.join(format!("{}.json", config.command)), &text))
                .map_err(CliError::from)
                .and_then(|_| emit_plotdata(dir, &plots));
            if let Err(e) = written {
                eprintln!("error: {e}");
                code = code.max(e.exit_code());
            }
        }
        None => print!("{text}"),
    }
    if let Some(e) = &error {
        eprintln!("error: {e}");
    }
    code
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn echo_drops_output_and_thread_flags() {
        let argv: Vec<OsString> = [
            "srmcp", "--out", "/tmp/x", "--jobs=3", "--seed", "4", "distance", "--y", "1,0,0",
        ]
        .iter()
        .map(OsString::from)
        .collect();
        assert_eq!(
            echoed_args(&argv),
            ["--seed", "4", "distance", "--y", "1,0,0"]
        );
    }

    #[test]
    fn builtin_names_and_files_resolve() {
        assert_eq!(resolve_model("engel").unwrap().dim(), 4);
        let err = resolve_model("nope").unwrap_err();
        assert_eq!(err.exit_code(), 1, "{err}");
    }

    #[test]
    fn ragged_control_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("u.csv");
        std::fs::write(&path, "1,0\n0\n").unwrap();
        assert!(read_control(&path).is_err());
        std::fs::write(&path, "1,x\n").unwrap();
        assert!(matches!(read_control(&path), Err(CliError::Usage(_))));
    }
}
