//! Command-line front end.
//!
//! Every subcommand is described by a [`RunConfig`]. The config is validated as a
//! whole (all problems are reported together), executed, and echoed verbatim into
//! the JSON report so that `cfdens replay --config report.json` reproduces the run.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::SystemTime;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::data::{load_csv, make_folds, make_grid, CsvSchema, EvalGrid, ObservationTable, QuadratureRule, RescaleParams};
use crate::distances::DistanceSpec;
use crate::effects::crossfit_effect;
use crate::error::{Error, Result};
use crate::models::ModelSpec;
use crate::nuisance::{
    Bandwidth, Boundary, CondDensityMethod, CrossFit, NuisanceConfig, PropensityMethod, Regressor, DEFAULT_CLIP_EPS,
};
use crate::oracle::{dgp, mc_run, DensitySource, Experiment, PropensitySource, Target};
use crate::projection::{crossfit_projection, SolverOptions};
use crate::selection::{aggregate_linear, select_model, Candidate, SelectionOptions};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_SOLVER: i32 = 4;
pub const EXIT_INTERNAL: i32 = 5;

/// Grid and fold caps applied by `--quick`.
pub const QUICK_GRID: usize = 128;
pub const QUICK_FOLDS: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum CommandKind {
    FitProjection,
    DensityEffect,
    SelectModel,
    Aggregate,
    Simulate,
}

impl CommandKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::FitProjection => "fit-projection",
            Self::DensityEffect => "density-effect",
            Self::SelectModel => "select-model",
            Self::Aggregate => "aggregate",
            Self::Simulate => "simulate",
        }
    }
}

/// Everything needed to reproduce a run. String-valued fields keep the user's
/// spelling so the echoed config replays verbatim.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub command: CommandKind,
    pub data: Option<PathBuf>,
    /// Covariate columns; empty means every column other than the treatment and outcome.
    pub x_cols: Vec<String>,
    pub a_col: String,
    pub y_col: String,
    pub missing_code: Option<String>,
    pub model: Option<String>,
    pub distance: String,
    pub level: i64,
    pub level1: i64,
    pub level0: i64,
    /// Series dimensions for `select-model`, e.g. `1..6` or `1,2,4`.
    pub dims: Option<String>,
    /// Model family used with `dims`.
    pub family: String,
    pub candidates: Vec<String>,
    pub swap: bool,
    pub experiment: Option<String>,
    pub reps: Option<usize>,
    pub ns: Vec<usize>,
    pub folds: usize,
    pub seed: u64,
    pub grid_size: usize,
    pub quadrature: String,
    pub clip_eps: f64,
    pub bandwidth: String,
    pub propensity: Option<String>,
    pub density: Option<String>,
    pub boundary: String,
    pub quick: bool,
    pub out: Option<PathBuf>,
    pub csv: Option<PathBuf>,
}

impl RunConfig {
    pub fn new(command: CommandKind) -> Self {
        Self {
            command,
            data: None,
            x_cols: Vec::new(),
            a_col: "a".into(),
            y_col: "y".into(),
            missing_code: None,
            model: None,
            distance: "l2".into(),
            level: 1,
            level1: 1,
            level0: 0,
            dims: None,
            family: "series".into(),
            candidates: Vec::new(),
            swap: true,
            experiment: None,
            reps: None,
            ns: Vec::new(),
            folds: 5,
            seed: 1,
            grid_size: 512,
            quadrature: "trapezoid".into(),
            clip_eps: DEFAULT_CLIP_EPS,
            bandwidth: "silverman".into(),
            propensity: None,
            density: None,
            boundary: "reflect".into(),
            quick: false,
            out: None,
            csv: None,
        }
    }

    /// Parse and cross-check every field, collecting all problems.
    pub fn validate(&self) -> Result<Resolved> {
        let mut problems = Vec::new();
        let mut take = |field: &str, r: Result<()>| {
            if let Err(e) = r {
                problems.push(format!("{field}: {e}"));
            }
        };

        let mut grid_size = self.grid_size;
        let mut folds = self.folds;
        if self.quick {
            grid_size = grid_size.min(QUICK_GRID);
            folds = folds.min(QUICK_FOLDS);
        }
        let mut quadrature = None;
        take("quadrature", self.quadrature.parse::<QuadratureRule>().map(|q| quadrature = Some(q)));
        if grid_size < 8 {
            take("grid_size", Err(Error::GridTooCoarse(grid_size)));
        }
        if folds < 2 {
            take("folds", Err(Error::InvalidParameter(format!("need at least 2 folds, got {folds}"))));
        }
        if !(self.clip_eps > 0.0 && self.clip_eps < 0.5) {
            take("clip_eps", Err(Error::InvalidParameter(format!("must lie in (0, 0.5), got {}", self.clip_eps))));
        }
        let mut distance = None;
        take("distance", self.distance.parse::<DistanceSpec>().map(|d| distance = Some(d)));
        let mut bandwidth = None;
        take("bandwidth", self.bandwidth.parse::<Bandwidth>().map(|b| bandwidth = Some(b)));
        let boundary = match self.boundary.as_str() {
            "reflect" => Some(Boundary::Reflect),
            "none" => Some(Boundary::None),
            other => {
                take("boundary", Err(Error::InvalidParameter(format!("expected `reflect` or `none`, got `{other}`"))));
                None
            }
        };
        let mut propensity = None;
        if let Some(p) = &self.propensity {
            take("propensity", p.parse::<PropensityMethod>().map(|m| propensity = Some(m)));
        }
        let mut regressor = None;
        if let Some(r) = &self.density {
            take("density", r.parse::<Regressor>().map(|m| regressor = Some(m)));
        }

        let needs_data = self.command != CommandKind::Simulate;
        if needs_data {
            if self.data.is_none() {
                take("data", Err(Error::InvalidParameter("an input CSV is required".into())));
            }
            if self.a_col == self.y_col {
                take("a_col", Err(Error::InvalidParameter("treatment and outcome columns must differ".into())));
            }
        }

        let mut model = None;
        let mut candidates = Vec::new();
        let mut experiment = None;
        match self.command {
            CommandKind::FitProjection => match &self.model {
                None => take("model", Err(Error::InvalidParameter("a model such as `series:d=4` is required".into()))),
                Some(m) => take("model", m.parse::<ModelSpec>().map(|m| model = Some(m))),
            },
            CommandKind::DensityEffect => {
                if self.level1 == self.level0 {
                    take("level1", Err(Error::InvalidParameter("level1 and level0 must differ".into())));
                }
            }
            CommandKind::SelectModel => {
                let from_dims = match &self.dims {
                    Some(d) => match parse_dims(d) {
                        Ok(dims) => dims.into_iter().map(|k| format!("{}:{}={k}", self.family, family_key(&self.family))).collect(),
                        Err(e) => {
                            take("dims", Err(e));
                            Vec::new()
                        }
                    },
                    None => Vec::new(),
                };
                let all: Vec<String> = from_dims.into_iter().chain(self.candidates.iter().cloned()).collect();
                if all.is_empty() {
                    take("dims", Err(Error::InvalidParameter("give --dims or --candidates".into())));
                }
                for c in all {
                    take("candidates", c.parse::<ModelSpec>().map(|m| candidates.push(m)));
                }
            }
            CommandKind::Aggregate => {
                if self.candidates.is_empty() {
                    take("candidates", Err(Error::InvalidParameter("at least one candidate model is required".into())));
                }
                for c in &self.candidates {
                    take("candidates", c.parse::<ModelSpec>().map(|m| candidates.push(m)));
                }
                if self.distance != "l2" {
                    take("distance", Err(Error::InvalidParameter("aggregation is only defined for `l2`".into())));
                }
            }
            CommandKind::Simulate => match &self.experiment {
                None => take("experiment", Err(Error::InvalidParameter(format!("one of {:?} is required", EXPERIMENTS)))),
                Some(name) => take("experiment", preset(name).map(|p| experiment = Some(p))),
            },
        }
        if self.reps == Some(0) {
            take("reps", Err(Error::InvalidParameter("must be positive".into())));
        }
        if self.ns.iter().any(|&n| n < 50) {
            take("ns", Err(Error::InvalidParameter("sample sizes below 50 are not supported".into())));
        }

        if !problems.is_empty() {
            return Err(Error::Config(problems));
        }
        let grid = make_grid(grid_size, quadrature.expect("validated"))?;
        let mut density = CondDensityMethod { bandwidth: bandwidth.expect("validated"), boundary: boundary.expect("validated"), ..CondDensityMethod::default() };
        if let Some(r) = regressor {
            density.regressor = r;
        }
        Ok(Resolved {
            grid,
            folds,
            distance: distance.expect("validated"),
            model,
            candidates,
            experiment,
            propensity,
            regressor,
            nuisance: NuisanceConfig::new(propensity.unwrap_or(PropensityMethod::Logistic), density, self.clip_eps),
            density,
        })
    }
}

/// Parsed form of a [`RunConfig`].
pub struct Resolved {
    pub grid: EvalGrid,
    pub folds: usize,
    pub distance: DistanceSpec,
    pub model: Option<ModelSpec>,
    pub candidates: Vec<ModelSpec>,
    pub experiment: Option<Preset>,
    propensity: Option<PropensityMethod>,
    regressor: Option<Regressor>,
    density: CondDensityMethod,
    pub nuisance: NuisanceConfig,
}

fn family_key(family: &str) -> &'static str {
    if family == "gmm" {
        "k"
    } else {
        "d"
    }
}

/// `1..6` (inclusive), `1..=6`, or a comma list.
pub fn parse_dims(s: &str) -> Result<Vec<usize>> {
    let bad = || Error::InvalidParameter(format!("cannot parse dimensions `{s}`"));
    let dims: Vec<usize> = if let Some((a, b)) = s.split_once("..") {
        let lo: usize = a.trim().parse().map_err(|_| bad())?;
        let hi: usize = b.trim().trim_start_matches('=').parse().map_err(|_| bad())?;
        if hi < lo {
            return Err(bad());
        }
        (lo..=hi).collect()
    } else {
        s.split(',').map(|t| t.trim().parse().map_err(|_| bad())).collect::<Result<_>>()?
    };
    if dims.is_empty() || dims.contains(&0) {
        return Err(bad());
    }
    Ok(dims)
}

/// Named Monte-Carlo experiments available to `simulate`.
pub const EXPERIMENTS: [&str; 6] =
    ["projection-coverage", "effect-coverage", "null-effect", "dr-wrong-propensity", "dr-marginal-density", "expfam-kl"];

#[derive(Debug, Clone)]
pub struct Preset {
    pub experiment: Experiment,
}

pub fn preset(name: &str) -> Result<Preset> {
    let series3 = ModelSpec::TruncatedSeries { dim: 3 };
    let proj = |d| Target::Projection { model: series3, distance: d, level: 1 };
    let mut e = match name {
        "projection-coverage" => Experiment::new(name, dgp("D2")?, proj(DistanceSpec::L2Sq)),
        "effect-coverage" => {
            let mut e = Experiment::new(name, dgp("D5")?, Target::Effect { distance: DistanceSpec::L2Sq });
            e.ns = vec![4000];
            e
        }
        "null-effect" => Experiment::new(name, dgp("D3")?, Target::Effect { distance: DistanceSpec::L2Sq }),
        "dr-wrong-propensity" => {
            let mut e = Experiment::new(name, dgp("D2")?, proj(DistanceSpec::L2Sq));
            e.propensity = PropensitySource::Fitted(PropensityMethod::Constant { value: 0.3 });
            e
        }
        "dr-marginal-density" => {
            let mut e = Experiment::new(name, dgp("D2")?, proj(DistanceSpec::L2Sq));
            e.density = DensitySource::Fitted(CondDensityMethod { regressor: Regressor::Marginal, ..CondDensityMethod::default() });
            e
        }
        "expfam-kl" => Experiment::new(
            name,
            dgp("D6")?,
            Target::Projection { model: ModelSpec::ExponentialFamily { dim: 2 }, distance: DistanceSpec::Kl, level: 1 },
        ),
        other => return Err(Error::InvalidParameter(format!("unknown experiment `{other}`; choose one of {EXPERIMENTS:?}"))),
    };
    if !matches!(name, "effect-coverage") {
        e.ns = vec![2000];
    }
    Ok(Preset { experiment: e })
}

/// Map an error to the documented exit code.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::InvalidParameter(_) | Error::GridTooCoarse(_) => EXIT_CONFIG,
        Error::Schema(_)
        | Error::Parse { .. }
        | Error::EmptyData(_)
        | Error::DegenerateOutcome(_)
        | Error::LengthMismatch { .. }
        | Error::InfeasibleFolds { .. }
        | Error::InsufficientData { .. }
        | Error::MissingLevel(_)
        | Error::Io(_)
        | Error::Csv(_) => EXIT_DATA,
        Error::Solver { .. }
        | Error::InfeasibleMoment(_)
        | Error::Rank(_)
        | Error::Magnitude(_)
        | Error::DegenerateModel(_)
        | Error::Domain { .. } => EXIT_SOLVER,
        Error::CrossFitViolation(_) | Error::Json(_) => EXIT_INTERNAL,
    }
}

fn error_kind(err: &Error) -> &'static str {
    match exit_code(err) {
        EXIT_CONFIG => "config",
        EXIT_DATA => "data",
        EXIT_SOLVER => "solver",
        _ => "internal",
    }
}

/// Structured error document written to stderr on failure.
pub fn error_json(err: &Error) -> Value {
    let mut body = json!({
        "kind": error_kind(err),
        "exit_code": exit_code(err),
        "message": err.to_string(),
    });
    match err {
        Error::Config(problems) => body["problems"] = json!(problems),
        Error::Solver { iterations, residual, residual_trace, .. } => {
            body["iterations"] = json!(iterations);
            body["residual"] = json!(residual);
            body["residual_trace"] = json!(residual_trace);
        }
        _ => {}
    }
    json!({ "error": body })
}

/// Artifacts of a successful run.
#[derive(Debug, Clone)]
pub struct RunOutput {
    /// JSON report (config, seed, version, results, timestamp).
    pub report: Value,
    /// Optional CSV grid or table.
    pub csv: Option<String>,
}

/// Execute a configuration.
pub fn run(config: &RunConfig) -> Result<RunOutput> {
    let resolved = config.validate()?;
    let (result, csv, warnings) = match config.command {
        CommandKind::FitProjection => fit_projection(config, &resolved)?,
        CommandKind::DensityEffect => density_effect(config, &resolved)?,
        CommandKind::SelectModel => select(config, &resolved)?,
        CommandKind::Aggregate => aggregate(config, &resolved)?,
        CommandKind::Simulate => simulate(config, &resolved)?,
    };
    let report = json!({
        "tool": "cfdens",
        "version": env!("CARGO_PKG_VERSION"),
        "command": config.command.name(),
        "seed": config.seed,
        "config": config,
        "result": result,
        "warnings": warnings,
        "timestamp": humantime::format_rfc3339_seconds(SystemTime::now()).to_string(),
    });
    Ok(RunOutput { report, csv })
}

type Produced = (Value, Option<String>, Vec<String>);

fn load(config: &RunConfig) -> Result<ObservationTable> {
    let path = config.data.as_deref().expect("validated");
    let x_cols = if config.x_cols.is_empty() { infer_x_cols(path, &config.a_col, &config.y_col)? } else { config.x_cols.clone() };
    let schema = CsvSchema { x_cols, a_col: config.a_col.clone(), y_col: config.y_col.clone() };
    load_csv(path, &schema, config.missing_code.as_deref())
}

fn infer_x_cols(path: &Path, a_col: &str, y_col: &str) -> Result<Vec<String>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_path(path)?;
    let cols: Vec<String> = rdr.headers()?.iter().filter(|h| *h != a_col && *h != y_col).map(String::from).collect();
    if cols.is_empty() {
        return Err(Error::Schema("no covariate columns besides treatment and outcome".into()));
    }
    Ok(cols)
}

/// Density on the grid in both unit and original outcome scales.
fn density_grid(values: &[f64], grid: &EvalGrid, rescale: &RescaleParams) -> (Value, String) {
    let scale = rescale.density_scale();
    let mut csv = String::from("y,y_unit,density,density_unit\n");
    let mut rows = Vec::with_capacity(values.len());
    for (&u, &g) in grid.points().iter().zip(values) {
        let y = rescale.unrescale(u);
        csv.push_str(&format!("{y:.12e},{u:.12e},{:.12e},{g:.12e}\n", g * scale));
        rows.push(json!({ "y": y, "y_unit": u, "density": g * scale, "density_unit": g }));
    }
    (Value::Array(rows), csv)
}

fn fit_projection(config: &RunConfig, r: &Resolved) -> Result<Produced> {
    let table = load(config)?;
    let model = r.model.expect("validated");
    let cf = CrossFit::fit_all(&table, r.folds, config.seed, &[config.level], &r.nuisance, &r.grid)?;
    let est = crossfit_projection(&r.distance, &model, config.level, &table, &cf, &r.grid, &SolverOptions::default())?;
    let (grid_json, csv) = density_grid(&est.fitted_density, &r.grid, &table.rescale_params());
    let p = est.beta_hat.len();
    let cov: Vec<Vec<f64>> = (0..p).map(|i| est.covariance[i * p..(i + 1) * p].to_vec()).collect();
    let result = json!({
        "model": model.to_string(),
        "distance": r.distance.to_string(),
        "level": config.level,
        "n": est.n,
        "beta": est.beta_hat,
        "se": est.se(),
        "cov": cov,
        "ci": est.wald_ci,
        "residual": est.residual_norm(),
        "solver": est.solver_reports,
        "rescale": table.rescale_params(),
        "density_grid": grid_json,
    });
    Ok((result, Some(csv), cf.warnings.clone()))
}

/// Scale factor taking a unit-scale divergence to original outcome units.
fn divergence_scale(distance: &DistanceSpec, rescale: &RescaleParams) -> f64 {
    match distance {
        DistanceSpec::L2Sq => rescale.density_scale(),
        _ => 1.0,
    }
}

fn density_effect(config: &RunConfig, r: &Resolved) -> Result<Produced> {
    let table = load(config)?;
    let cf = CrossFit::fit_all(&table, r.folds, config.seed, &[config.level1, config.level0], &r.nuisance, &r.grid)?;
    let est = crossfit_effect(&r.distance, &table, &cf, config.level1, config.level0, &r.grid)?;
    let s = divergence_scale(&r.distance, &table.rescale_params());
    let result = json!({
        "distance": r.distance.to_string(),
        "level1": config.level1,
        "level0": config.level0,
        "n": est.n,
        "psi": est.psi_hat * s,
        "se": est.se * s,
        "ci_wald": [est.ci_wald.0 * s, est.ci_wald.1 * s],
        "ci_conservative": [est.ci_conservative.0 * s, est.ci_conservative.1 * s],
        "near_null_flag": est.near_null,
        "unit_scale": est,
        "rescale": table.rescale_params(),
    });
    Ok((result, None, cf.warnings.clone()))
}

fn selection_options(r: &Resolved) -> SelectionOptions {
    SelectionOptions { distance: r.distance, ..SelectionOptions::default() }
}

fn select(config: &RunConfig, r: &Resolved) -> Result<Produced> {
    let table = load(config)?;
    let plan = make_folds(table.n(), r.folds, config.seed)?;
    let candidates: Vec<Candidate> = r.candidates.iter().map(|m| Candidate::Model(*m)).collect();
    let rt = select_model(&table, &plan, config.level, &candidates, &r.grid, &r.nuisance, &selection_options(r))?;
    let s = table.rescale_params().density_scale();
    let mut csv = String::from("k,label,risk,se,risk_unit,se_unit,infeasible\n");
    for c in 0..rt.labels.len() {
        csv.push_str(&format!(
            "{},{},{:.12e},{:.12e},{:.12e},{:.12e},{}\n",
            rt.dims[c],
            rt.labels[c],
            rt.risk[c] * s,
            rt.se[c] * s,
            rt.risk[c],
            rt.se[c],
            rt.infeasible[c]
        ));
    }
    let result = json!({
        "level": config.level,
        "chosen": rt.labels[rt.chosen],
        "chosen_k": rt.dims[rt.chosen],
        "k": rt.dims,
        "labels": rt.labels,
        "risk": rt.risk.iter().map(|v| v * s).collect::<Vec<_>>(),
        "se": rt.se.iter().map(|v| v * s).collect::<Vec<_>>(),
        "risk_unit": rt.risk,
        "se_unit": rt.se,
        "infeasible": rt.infeasible,
        "per_fold_unit": rt.per_fold,
    });
    Ok((result, Some(csv), rt.warnings))
}

fn aggregate(config: &RunConfig, r: &Resolved) -> Result<Produced> {
    let table = load(config)?;
    let plan = make_folds(table.n(), r.folds, config.seed)?;
    let candidates: Vec<Candidate> = r.candidates.iter().map(|m| Candidate::Model(*m)).collect();
    let agg = aggregate_linear(&table, &plan, config.level, &candidates, &r.grid, &r.nuisance, &selection_options(r), config.swap)?;
    let (grid_json, csv) = density_grid(&agg.density, &r.grid, &table.rescale_params());
    let result = json!({
        "level": config.level,
        "labels": agg.labels,
        "weights": agg.weights,
        "weights_per_role": agg.weights_per_role,
        "dropped": agg.dropped,
        "test_folds": agg.test_folds,
        "density_grid": grid_json,
    });
    Ok((result, Some(csv), agg.warnings))
}

fn simulate(config: &RunConfig, r: &Resolved) -> Result<Produced> {
    let mut exp = r.experiment.clone().expect("validated").experiment;
    exp.seed = config.seed;
    exp.grid_size = r.grid.len();
    exp.folds = r.folds;
    if let Some(reps) = config.reps {
        exp.reps = reps;
    }
    if !config.ns.is_empty() {
        exp.ns = config.ns.clone();
    }
    if let Some(p) = r.propensity {
        exp.propensity = PropensitySource::Fitted(p);
    }
    if r.regressor.is_some() || config.bandwidth != "silverman" || config.boundary != "reflect" {
        exp.density = DensitySource::Fitted(r.density);
    }
    let res = mc_run(&exp)?;
    let result = json!({
        "experiment": res.experiment,
        "dgp": exp.dgp.name,
        "target": exp.target,
        "propensity": exp.propensity,
        "density": exp.density,
        "truth": res.truth,
        "summaries": res.summaries,
    });
    Ok((result, Some(res.rows_csv()), Vec::new()))
}

// ---------------------------------------------------------------------------
// Argument parsing.

#[derive(Debug, Parser)]
#[command(name = "cfdens", version, about = "Doubly robust counterfactual density projections and density effects")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Project a counterfactual density onto a model family.
    FitProjection {
        #[command(flatten)]
        data: DataArgs,
        /// Model family, e.g. `series:d=4`, `expfam:d=3`, `gmm:k=2`.
        #[arg(long)]
        model: String,
        #[arg(long, default_value_t = 1, allow_negative_numbers = true)]
        level: i64,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Estimate the divergence between two counterfactual densities.
    DensityEffect {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value_t = 1, allow_negative_numbers = true)]
        level1: i64,
        #[arg(long, default_value_t = 0, allow_negative_numbers = true)]
        level0: i64,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Cross-validated choice among candidate models.
    SelectModel {
        #[command(flatten)]
        data: DataArgs,
        /// Dimensions to compare, e.g. `1..15` or `1,2,4`.
        #[arg(long)]
        dims: Option<String>,
        /// Family used with `--dims`: `series`, `expfam` or `gmm`.
        #[arg(long, default_value = "series")]
        family: String,
        /// Explicit candidate models, comma separated.
        #[arg(long, value_delimiter = ',')]
        candidates: Vec<String>,
        #[arg(long, default_value_t = 1, allow_negative_numbers = true)]
        level: i64,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Linear aggregation of candidate densities.
    Aggregate {
        #[command(flatten)]
        data: DataArgs,
        /// Candidate models, comma separated.
        #[arg(long, value_delimiter = ',', required = true)]
        candidates: Vec<String>,
        #[arg(long, default_value_t = 1, allow_negative_numbers = true)]
        level: i64,
        /// Use only the first fold as the test split instead of averaging over swaps.
        #[arg(long)]
        no_swap: bool,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Monte-Carlo study on a synthetic data generator.
    Simulate {
        /// One of the named experiments.
        #[arg(long)]
        experiment: String,
        #[arg(long)]
        reps: Option<usize>,
        /// Sample sizes, comma separated.
        #[arg(long = "n", value_delimiter = ',')]
        ns: Vec<usize>,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Re-run the configuration stored in a config file or a previous JSON report.
    Replay {
        #[arg(long)]
        config: PathBuf,
        /// Override the JSON output path of the stored config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override the CSV output path of the stored config.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Input CSV with a header row.
    #[arg(long)]
    pub data: PathBuf,
    /// Covariate columns, comma separated (default: all other columns).
    #[arg(long, value_delimiter = ',')]
    pub x_cols: Vec<String>,
    #[arg(long, default_value = "a")]
    pub a_col: String,
    #[arg(long, default_value = "y")]
    pub y_col: String,
    /// Outcome value marking a missing outcome, e.g. `NA`.
    #[arg(long)]
    pub missing_code: Option<String>,
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// Distance: `l2`, `kl`, `chisq`, `hellinger`, `tv:t=50`.
    #[arg(long, default_value = "l2")]
    pub distance: String,
    #[arg(long, default_value_t = 5)]
    pub folds: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long = "grid", default_value_t = 512)]
    pub grid_size: usize,
    /// `trapezoid` or `gauss_legendre`.
    #[arg(long, default_value = "trapezoid")]
    pub quadrature: String,
    #[arg(long, default_value_t = DEFAULT_CLIP_EPS)]
    pub clip_eps: f64,
    /// `silverman` or a positive bandwidth on the unit outcome scale.
    #[arg(long, default_value = "silverman")]
    pub bandwidth: String,
    /// `logistic`, `knn`, `knn:k=20`, `constant:p=0.5`.
    #[arg(long = "nuisance-propensity")]
    pub propensity: Option<String>,
    /// `knn`, `knn:k=20`, `nw`, `marginal`.
    #[arg(long = "nuisance-density")]
    pub density: Option<String>,
    /// Kernel boundary handling: `reflect` or `none`.
    #[arg(long, default_value = "reflect")]
    pub boundary: String,
    /// Cap the grid at 128 points and the folds at 2.
    #[arg(long)]
    pub quick: bool,
    /// JSON report path (default: stdout).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// CSV output path for the density grid or table.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

impl CommonArgs {
    fn apply(self, c: &mut RunConfig) {
        c.distance = self.distance;
        c.folds = self.folds;
        c.seed = self.seed;
        c.grid_size = self.grid_size;
        c.quadrature = self.quadrature;
        c.clip_eps = self.clip_eps;
        c.bandwidth = self.bandwidth;
        c.propensity = self.propensity;
        c.density = self.density;
        c.boundary = self.boundary;
        c.quick = self.quick;
        c.out = self.out;
        c.csv = self.csv;
    }
}

impl DataArgs {
    fn apply(self, c: &mut RunConfig) {
        c.data = Some(self.data);
        c.x_cols = self.x_cols;
        c.a_col = self.a_col;
        c.y_col = self.y_col;
        c.missing_code = self.missing_code;
    }
}

/// Turn parsed arguments into a [`RunConfig`].
pub fn config_from_command(command: Command) -> Result<RunConfig> {
    let c = match command {
        Command::FitProjection { data, model, level, common } => {
            let mut c = RunConfig::new(CommandKind::FitProjection);
            data.apply(&mut c);
            common.apply(&mut c);
            c.model = Some(model);
            c.level = level;
            c
        }
        Command::DensityEffect { data, level1, level0, common } => {
            let mut c = RunConfig::new(CommandKind::DensityEffect);
            data.apply(&mut c);
            common.apply(&mut c);
            c.level1 = level1;
            c.level0 = level0;
            c
        }
        Command::SelectModel { data, dims, family, candidates, level, common } => {
            let mut c = RunConfig::new(CommandKind::SelectModel);
            data.apply(&mut c);
            common.apply(&mut c);
            c.dims = dims;
            c.family = family;
            c.candidates = candidates;
            c.level = level;
            c
        }
        Command::Aggregate { data, candidates, level, no_swap, common } => {
            let mut c = RunConfig::new(CommandKind::Aggregate);
            data.apply(&mut c);
            common.apply(&mut c);
            c.candidates = candidates;
            c.level = level;
            c.swap = !no_swap;
            c
        }
        Command::Simulate { experiment, reps, ns, common } => {
            let mut c = RunConfig::new(CommandKind::Simulate);
            common.apply(&mut c);
            c.experiment = Some(experiment);
            c.reps = reps;
            c.ns = ns;
            c
        }
        Command::Replay { config, out, csv } => {
            let text = fs::read_to_string(&config)?;
            let value: Value = serde_json::from_str(&text)?;
            // Accept either a bare config or a report embedding one.
            let inner = value.get("config").cloned().unwrap_or(value);
            let mut c: RunConfig =
                serde_json::from_value(inner).map_err(|e| Error::Config(vec![format!("config file: {e}")]))?;
            // Artifacts go only where the replay itself asks, never over the original run's files.
            c.out = out;
            c.csv = csv;
            c
        }
    };
    Ok(c)
}

fn write_artifacts(config: &RunConfig, output: &RunOutput) -> Result<()> {
    let text = serde_json::to_string_pretty(&output.report)?;
    match &config.out {
        Some(path) => fs::write(path, text + "\n")?,
        None => {
            let mut stdout = std::io::stdout().lock();
            writeln!(stdout, "{text}")?;
        }
    }
    if let (Some(path), Some(csv)) = (&config.csv, &output.csv) {
        fs::write(path, csv)?;
    }
    Ok(())
}

/// Entry point used by the `cfdens` binary. Returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let outcome = config_from_command(cli.command).and_then(|config| {
        let output = run(&config)?;
        write_artifacts(&config, &output)
    });
    match outcome {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("{}", error_json(&e));
            exit_code(&e)
        }
    }
}
