//! Command-line front end: config ingestion, the five workflows and their
//! artifacts.
//!
//! Exit codes: 0 for a completed run with a stable verdict, 2 when the
//! equilibrium is unstable (or the linear evolution grows), 1 on any error.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dispersion::{find_roots_with, RootOptions, SearchRegion, Verdict};
use crate::equilibria::{EquilibriumSpec, PerturbationSpec};
use crate::freestream::{check_decay_bound, freestream_field};
use crate::green_function::{selfsimilar_residual, GreenConfig, GreenTable, SelfSimilarReport};
use crate::linear_dynamics::{run_linear, LinearConfig};
use crate::nonlinear::{
    char_endpoints, integrate_characteristics, reconstruct_physical, solve_fixed_point, write_physical, write_run,
    NonlinearConfig, NonlinearProblem,
};
use crate::numerics::{write_json, TimeGrid};
use crate::{Error, Result};

#[derive(Debug, Parser)]
#[command(
    name = "landau",
    version,
    about = "Landau damping laboratory for 1D periodic Vlasov-Poisson"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Workflow,
    /// Run config (JSON); omitted sections take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory; overrides the config.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true, env = "LANDAU_THREADS")]
    pub threads: Option<usize>,
    /// Seed of the sampled spot checks.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Workflow {
    /// Zeros of the dispersion function and the stability verdict.
    Stability,
    /// Volterra evolution of the linearized modes.
    Linear,
    /// Fundamental solution of the problem linearized at infinity.
    Green,
    /// Fixed point of the full field equation.
    Nonlinear,
    /// Free-streaming density and its decay.
    Freestream,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StabilityKnobs {
    pub n_modes: i64,
    /// Overrides of the automatic search rectangle.
    pub re_range: Option<[f64; 2]>,
    pub im_range: Option<[f64; 2]>,
    pub options: RootOptions,
}

impl Default for StabilityKnobs {
    fn default() -> Self {
        Self {
            n_modes: 8,
            re_range: None,
            im_range: None,
            options: RootOptions::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FreestreamKnobs {
    /// Target decay rate; defaults to half the strip of `g_∞`.
    pub gamma: Option<f64>,
    pub t_end: f64,
    pub step: f64,
    pub z_points: usize,
}

impl Default for FreestreamKnobs {
    fn default() -> Self {
        Self {
            gamma: None,
            t_end: 20.0,
            step: 0.05,
            z_points: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NonlinearKnobs {
    #[serde(flatten)]
    pub solver: NonlinearConfig,
    /// Times of the `f` snapshots.
    pub snapshot_times: Vec<f64>,
    /// Sampled points where the swept maps are checked against direct integration.
    pub spot_checks: usize,
}

impl Default for NonlinearKnobs {
    fn default() -> Self {
        Self {
            solver: NonlinearConfig::default(),
            snapshot_times: vec![0.0, 1.0, 5.0],
            spot_checks: 16,
        }
    }
}

fn default_perturbation() -> PerturbationSpec {
    PerturbationSpec::gaussian_cosine(1e-3)
}

/// Everything a run reads; written back with all defaults filled in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Must match the subcommand when given.
    pub workflow: Option<Workflow>,
    pub equilibrium: EquilibriumSpec,
    pub perturbation: PerturbationSpec,
    pub stability: StabilityKnobs,
    pub linear: LinearConfig,
    pub green: GreenConfig,
    pub freestream: FreestreamKnobs,
    pub nonlinear: NonlinearKnobs,
    pub output: Option<PathBuf>,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            workflow: None,
            equilibrium: EquilibriumSpec::maxwellian(),
            perturbation: default_perturbation(),
            stability: StabilityKnobs::default(),
            linear: LinearConfig::default(),
            green: GreenConfig::default(),
            freestream: FreestreamKnobs::default(),
            nonlinear: NonlinearKnobs::default(),
            output: None,
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::InvalidSpec(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        self.green.validate()?;
        self.nonlinear.solver.validate()?;
        if self.stability.n_modes < 1 {
            return Err(Error::InvalidSpec("stability.n_modes must be at least 1".into()));
        }
        if !(self.freestream.t_end > 0.0 && self.freestream.step > 0.0) {
            return Err(Error::InvalidSpec("freestream t_end and step must be positive".into()));
        }
        Ok(())
    }
}

/// Verdict of a finished workflow.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Stable,
    Unstable,
}

impl Outcome {
    pub fn code(self) -> i32 {
        match self {
            Outcome::Stable => 0,
            Outcome::Unstable => 2,
        }
    }
}

pub fn cmd_stability(config: &RunConfig, out: &Path) -> Result<Outcome> {
    let knobs = &config.stability;
    let auto = SearchRegion::upper_half_plane(&config.equilibrium, knobs.n_modes)?;
    let region = SearchRegion::new(
        knobs.re_range.unwrap_or([auto.re_min, auto.re_max]),
        knobs.im_range.unwrap_or([auto.im_min, auto.im_max]),
        auto.modes.clone(),
    )?;
    let report = find_roots_with(&config.equilibrium, &region, &knobs.options)?;
    write_json(&out.join("report.json"), &report)?;
    match report.verdict {
        Verdict::Stable => Ok(Outcome::Stable),
        Verdict::Unstable => Ok(Outcome::Unstable),
        Verdict::Inconclusive => Err(Error::WindingAmbiguity(format!(
            "inconclusive verdict; see {}",
            out.join("report.json").display()
        ))),
    }
}

pub fn cmd_linear(config: &RunConfig, out: &Path) -> Result<Outcome> {
    let run = run_linear(&config.equilibrium, &config.perturbation, &config.linear, None)?;
    run.write(out)?;
    Ok(if run.growth_detected {
        Outcome::Unstable
    } else {
        Outcome::Stable
    })
}

#[derive(Debug, Serialize)]
struct GreenInvariants {
    causality_defect: f64,
    tail_estimate: f64,
    causality_passed: bool,
    max_slice_mean: f64,
    far_past_rate: Option<f64>,
    selfsimilar: SelfSimilarReport,
}

pub fn cmd_green(config: &RunConfig, out: &Path) -> Result<Outcome> {
    let table = GreenTable::build(&config.equilibrium, &config.green)?;
    table.write(out)?;
    let max_slice_mean = (0..table.grid.len)
        .map(|i| table.slice_mean(i).map(f64::abs))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .fold(0.0, f64::max);
    let invariants = GreenInvariants {
        causality_defect: table.causality_defect,
        tail_estimate: table.tail_estimate,
        causality_passed: table.causality_defect < config.green.tolerance,
        max_slice_mean,
        far_past_rate: table.far_past.map(|f| f.rate),
        selfsimilar: selfsimilar_residual(&table),
    };
    write_json(&out.join("invariants.json"), &invariants)?;
    Ok(Outcome::Stable)
}

pub fn cmd_freestream(config: &RunConfig, out: &Path) -> Result<Outcome> {
    let knobs = &config.freestream;
    let g = &config.perturbation;
    let grid = TimeGrid::spanning(0.0, knobs.t_end, knobs.step)?;
    let field = freestream_field(g, knobs.z_points, &grid)?;
    field.write_csv(&out.join("h.csv"))?;
    let gamma = knobs.gamma.unwrap_or(0.5 * g.strip);
    check_decay_bound(g, gamma, knobs.z_points, &grid)?.write(&out.join("decay.json"))?;
    Ok(Outcome::Stable)
}

#[derive(Debug, Serialize)]
struct SpotCheck {
    t: f64,
    x: f64,
    v: f64,
    swept: [f64; 2],
    direct: [f64; 2],
}

#[derive(Debug, Serialize)]
struct SpotReport {
    seed: u64,
    max_difference: f64,
    checks: Vec<SpotCheck>,
}

pub fn cmd_nonlinear(config: &RunConfig, out: &Path) -> Result<Outcome> {
    let knobs = &config.nonlinear;
    let problem = NonlinearProblem::new(&config.equilibrium, &config.perturbation, &knobs.solver)?;
    let run = solve_fixed_point(&problem)?;
    write_run(&run, out)?;
    let physical = reconstruct_physical(&problem, &run.iterate, &knobs.snapshot_times)?;
    write_physical(&physical, out)?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let picks: Vec<(usize, usize, usize)> = (0..knobs.spot_checks)
        .map(|_| {
            // early times, where the maps move
            let last = (problem.grid.len - 1).min((10.0 / problem.grid.step) as usize);
            (
                rng.gen_range(0..=last),
                rng.gen_range(0..problem.x.len()),
                rng.gen_range(0..problem.v.len()),
            )
        })
        .collect();
    let nodes: Vec<usize> = picks.iter().map(|p| p.0).collect();
    let ends = char_endpoints(&problem, &run.iterate, &nodes)?;
    let nz = problem.x.len();
    let mut checks = Vec::new();
    for &(i, j, k) in &picks {
        let slot = ends.indices.iter().position(|&s| s == i).expect("stored node");
        let (t, x, v) = (problem.grid.at(i), problem.x[j], problem.v[k]);
        let direct = integrate_characteristics(&run.iterate, t, x - v * t, v, 1e-12)?;
        checks.push(SpotCheck {
            t,
            x,
            v,
            swept: [ends.z_inf[slot][k * nz + j], ends.v_inf[slot][k * nz + j]],
            direct: [direct.z_inf, direct.v_inf],
        });
    }
    let max_difference = checks
        .iter()
        .map(|c| (c.swept[0] - c.direct[0]).abs().max((c.swept[1] - c.direct[1]).abs()))
        .fold(0.0, f64::max);
    write_json(
        &out.join("characteristics.json"),
        &SpotReport {
            seed: config.seed,
            max_difference,
            checks,
        },
    )?;
    if !run.converged {
        return Err(Error::NonConvergence {
            what: "fixed point",
            estimate: run.history.last().map_or(f64::INFINITY, |h| h.relative_update),
            tol: knobs.solver.tol,
        });
    }
    Ok(Outcome::Stable)
}

fn code_of(err: &Error) -> i32 {
    match err {
        Error::NotStable(_) => 2,
        _ => 1,
    }
}

fn execute(cli: &Cli) -> Result<Outcome> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(w) = config.workflow {
        if w != cli.command {
            return Err(Error::InvalidSpec(format!(
                "config workflow {w:?} does not match the subcommand {:?}",
                cli.command
            )));
        }
    }
    config.workflow = Some(cli.command);
    if cli.seed != 0 {
        config.seed = cli.seed;
    }
    config.validate()?;
    let out = cli
        .out
        .clone()
        .or_else(|| config.output.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    config.output = Some(out.clone());
    if let Some(n) = cli.threads {
        // a second initialization in the same process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    std::fs::create_dir_all(&out)?;
    write_json(&out.join("config.json"), &config)?;
    match cli.command {
        Workflow::Stability => cmd_stability(&config, &out),
        Workflow::Linear => cmd_linear(&config, &out),
        Workflow::Green => cmd_green(&config, &out),
        Workflow::Nonlinear => cmd_nonlinear(&config, &out),
        Workflow::Freestream => cmd_freestream(&config, &out),
    }
}

/// Parses `args` and runs the workflow; returns the process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(outcome) => outcome.code(),
        Err(err) => {
            eprintln!("error: {err}");
            code_of(&err)
        }
    }
}
