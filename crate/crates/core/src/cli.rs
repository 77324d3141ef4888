//! Command-line front end: scenario configuration, subcommands and
//! plot-data files.

use std::fmt;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::adjoint::{solve_adjoint, solve_hjb};
use crate::forward::{pushforward, solve_forward, DensityPath};
use crate::grid::{flat_distance, sample_brownian, Grid, NoisePath};
use crate::model::{bailout_model, shift_model, BailoutParams, ControlField, ModelSpec};
use crate::particles::{empirical_density, simulate_model, ParticleModel, SimOptions};
use crate::picard::{active_set, cost_comparison, picard_solve, write_active_set_csv, PicardOptions};
use crate::sensitivity::{extract_control, gradient_check, Direction};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_SOLVER: i32 = 3;

/// Which control field the single-solve subcommands use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlChoice {
    Zero,
    Max,
    /// Hard control from a Picard run.
    Optimal,
}

/// Flat scenario file. Every key is optional; unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub x_min: f64,
    pub x_max: f64,
    pub n_x: usize,
    pub t_horizon: f64,
    pub n_t: usize,
    pub eta0: f64,

    pub sigma: f64,
    pub sigma0: f64,
    pub kappa: f64,
    pub w_weight: f64,
    pub g_max: f64,
    pub hazard_max: f64,
    pub hazard_scale: f64,
    pub initial_mean: f64,
    pub initial_sd: f64,

    pub max_iters: usize,
    pub tol: f64,
    pub damping: f64,
    pub smoothing_schedule: Vec<f64>,

    pub control: ControlChoice,
    pub n_particles: usize,
    pub hard_killing: bool,
    /// Snapshot stride for `d0`.
    pub d0_every: usize,
    pub n_trials: usize,
    pub gradcheck_eps: f64,
    /// Constant base control for `gradcheck`.
    pub gradcheck_gamma: f64,
    pub seed: u64,
    pub out_dir: String,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        let p = BailoutParams::default();
        let o = PicardOptions::default();
        Self {
            x_min: -4.0,
            x_max: 6.0,
            n_x: 200,
            t_horizon: 1.0,
            n_t: 400,
            eta0: 0.1,
            sigma: p.sigma,
            sigma0: p.sigma0,
            kappa: p.kappa,
            w_weight: p.w_weight,
            g_max: p.g_max,
            hazard_max: p.hazard_max,
            hazard_scale: p.hazard_scale,
            initial_mean: p.initial_mean,
            initial_sd: p.initial_sd,
            max_iters: o.max_iters,
            tol: o.tol,
            damping: o.damping,
            smoothing_schedule: o.smoothing_schedule,
            control: ControlChoice::Zero,
            n_particles: 10_000,
            hard_killing: false,
            d0_every: 40,
            n_trials: 20,
            gradcheck_eps: 1e-3,
            gradcheck_gamma: 0.5,
            seed: 0,
            out_dir: "out".into(),
        }
    }
}

/// Everything built from a validated config.
pub struct Scenario {
    pub config: ScenarioConfig,
    pub grid: Grid,
    pub params: BailoutParams,
    pub spec: ModelSpec,
    pub picard: PicardOptions,
}

impl ScenarioConfig {
    pub fn from_json(text: &str) -> anyhow::Result<Self> {
        Self::from_value(serde_json::from_str(text).context("config is not valid JSON")?)
    }

    fn from_value(v: Value) -> anyhow::Result<Self> {
        if !v.is_object() {
            bail!("config must be a JSON object");
        }
        serde_json::from_value(v).context("invalid config")
    }

    /// Reads `path` and applies `KEY=VALUE` overrides; a value is parsed as
    /// JSON and taken as a plain string otherwise.
    pub fn load(path: &Path, overrides: &[String]) -> anyhow::Result<Self> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("cannot read config file {}", path.display()))?;
        let mut v: Value = serde_json::from_str(&text)
            .with_context(|| format!("config file {} is not valid JSON", path.display()))?;
        let obj = v
            .as_object_mut()
            .with_context(|| format!("config file {} must hold a JSON object", path.display()))?;
        for o in overrides {
            let (key, raw) = o
                .split_once('=')
                .with_context(|| format!("override `{o}` is not of the form KEY=VALUE"))?;
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            obj.insert(key.trim().to_string(), value);
        }
        Self::from_value(v).with_context(|| format!("in config file {}", path.display()))
    }

    pub fn params(&self) -> BailoutParams {
        BailoutParams {
            sigma: self.sigma,
            sigma0: self.sigma0,
            kappa: self.kappa,
            w_weight: self.w_weight,
            g_max: self.g_max,
            hazard_max: self.hazard_max,
            hazard_scale: self.hazard_scale,
            t_horizon: self.t_horizon,
            initial_mean: self.initial_mean,
            initial_sd: self.initial_sd,
        }
    }

    pub fn picard_options(&self) -> PicardOptions {
        PicardOptions {
            max_iters: self.max_iters,
            tol: self.tol,
            damping: self.damping,
            smoothing_schedule: self.smoothing_schedule.clone(),
        }
    }

    /// Validates every numeric range, including the transport CFL bound.
    pub fn build(self) -> anyhow::Result<Scenario> {
        let grid = Grid::new(self.x_min, self.x_max, self.n_x, self.t_horizon, self.n_t, self.eta0)
            .context("grid keys (x_min, x_max, n_x, t_horizon, n_t, eta0)")?;
        let params = self.params();
        let spec = bailout_model(&params).context("model keys")?;
        let picard = self.picard_options();
        picard.validate().context("picard keys (max_iters, tol, damping, smoothing_schedule)")?;
        let bmax = self.g_max + self.kappa * self.hazard_max;
        let courant = grid.dt() * bmax / grid.dx();
        if courant > 1.0 {
            bail!("n_t too small: Courant number {courant:.3} > 1 for g_max + kappa*hazard_max = {bmax}");
        }
        if self.n_particles == 0 {
            bail!("n_particles must be at least 1");
        }
        if self.d0_every == 0 {
            bail!("d0_every must be at least 1");
        }
        if !(self.gradcheck_eps > 0.0) {
            bail!("gradcheck_eps must be positive, got {}", self.gradcheck_eps);
        }
        spec.check_control(self.gradcheck_gamma).context("gradcheck_gamma")?;
        Ok(Scenario {
            config: self,
            grid,
            params,
            spec,
            picard,
        })
    }
}

#[derive(Debug)]
struct ConfigError(anyhow::Error);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#}", self.0)
    }
}

impl std::error::Error for ConfigError {}

fn config_err(e: anyhow::Error) -> anyhow::Error {
    anyhow::Error::new(ConfigError(e))
}

#[derive(Parser, Debug)]
#[command(name = "fpcontrol", about = "Controlled Fokker-Planck solvers for the bailout model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Scenario JSON file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides `out_dir`).
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Seed (overrides `seed`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// KEY=VALUE, repeatable.
    #[arg(long = "override", global = true)]
    overrides: Vec<String>,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
enum Command {
    /// density.csv along the configured control
    Forward,
    /// density.csv and adjoint.csv along the configured control
    Adjoint,
    /// adjoint.csv and control.csv from one backward solve
    Hjb,
    /// Picard iteration: density, adjoint, control, residuals, active_set
    Picard,
    /// gradcheck.json
    Gradcheck,
    /// particles_summary.csv
    Particles,
    /// comparison.json: optimal cost against random admissible controls
    Compare,
    /// d0.csv: flat distance between particles and the PDE over time
    D0,
}

/// Parses `argv` (including the program name), runs the subcommand and
/// returns the process exit code.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            if let Some(c) = e.downcast_ref::<ConfigError>() {
                eprintln!("config error: {c}");
                EXIT_CONFIG
            } else {
                eprintln!("solver failure: {e:#}");
                EXIT_SOLVER
            }
        }
    }
}

fn execute(cli: &Cli) -> anyhow::Result<()> {
    let path = cli
        .config
        .as_ref()
        .context("--config PATH is required")
        .map_err(config_err)?;
    let mut cfg = ScenarioConfig::load(path, &cli.overrides).map_err(config_err)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(d) = &cli.out_dir {
        cfg.out_dir = d.to_string_lossy().into_owned();
    }
    let noiseless = matches!(
        cli.command,
        Command::Adjoint | Command::Hjb | Command::Picard | Command::Gradcheck | Command::Compare
    );
    if noiseless && cfg.sigma0 != 0.0 {
        return Err(config_err(anyhow::anyhow!(
            "sigma0 = {}: backward solves need sigma0 = 0",
            cfg.sigma0
        )));
    }
    let sc = cfg.build().map_err(config_err)?;
    let out = PathBuf::from(&sc.config.out_dir);
    fs::create_dir_all(&out).with_context(|| format!("cannot create {}", out.display()))?;
    match cli.command {
        Command::Forward => cmd_forward(&sc, &out),
        Command::Adjoint => cmd_adjoint(&sc, &out),
        Command::Hjb => cmd_hjb(&sc, &out),
        Command::Picard => cmd_picard(&sc, &out),
        Command::Gradcheck => cmd_gradcheck(&sc, &out),
        Command::Particles => cmd_particles(&sc, &out),
        Command::Compare => cmd_compare(&sc, &out),
        Command::D0 => cmd_d0(&sc, &out),
    }
}

fn write_file(dir: &Path, name: &str, f: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> anyhow::Result<()> {
    let path = dir.join(name);
    let file = File::create(&path).with_context(|| format!("cannot create {}", path.display()))?;
    let mut w = BufWriter::new(file);
    f(&mut w).and_then(|_| w.flush()).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn configured_control(sc: &Scenario) -> anyhow::Result<ControlField> {
    let (spec, g) = (&sc.spec, &sc.grid);
    Ok(match sc.config.control {
        ControlChoice::Zero => ControlField::constant(spec.g_min(), spec, g)?,
        ControlChoice::Max => ControlField::constant(spec.g_max(), spec, g)?,
        ControlChoice::Optimal => {
            let rho0 = sc.params.initial_density(g);
            picard_solve(spec, g, &rho0, &sc.picard)?.control
        }
    })
}

fn noise_path(sc: &Scenario) -> NoisePath {
    if sc.config.sigma0 > 0.0 {
        sample_brownian(&sc.grid, sc.config.seed)
    } else {
        NoisePath::zero(&sc.grid)
    }
}

/// Density along `gamma` for one common-noise path: solved in shifted
/// coordinates and pushed forward.
fn conditional_density(sc: &Scenario, gamma: &ControlField, wpath: &NoisePath) -> anyhow::Result<DensityPath> {
    let (spec, g) = (&sc.spec, &sc.grid);
    let rho0 = sc.params.initial_density(g);
    if sc.config.sigma0 == 0.0 {
        return Ok(solve_forward(spec, gamma, g, &rho0)?);
    }
    let shifted = shift_model(spec, wpath, g)?;
    let gt = gamma.shifted(wpath, sc.config.sigma0, spec, g)?;
    let mu = solve_forward(&shifted, &gt, g, &rho0)?;
    Ok(pushforward(&mu, wpath, sc.config.sigma0)?)
}

fn cmd_forward(sc: &Scenario, out: &Path) -> anyhow::Result<()> {
    let gamma = configured_control(sc)?;
    let mu = conditional_density(sc, &gamma, &noise_path(sc))?;
    write_file(out, "density.csv", |w| mu.write_csv(w))?;
    println!("final mass {:.6}", mu.masses()[sc.grid.n_t()]);
    Ok(())
}

fn cmd_adjoint(sc: &Scenario, out: &Path) -> anyhow::Result<()> {
    let (spec, g) = (&sc.spec, &sc.grid);
    let gamma = configured_control(sc)?;
    let mu = solve_forward(spec, &gamma, g, &sc.params.initial_density(g))?;
    let u = solve_adjoint(spec, &mu, &gamma, g)?;
    write_file(out, "density.csv", |w| mu.write_csv(w))?;
    write_file(out, "adjoint.csv", |w| u.write_csv(w))?;
    Ok(())
}

fn cmd_hjb(sc: &Scenario, out: &Path) -> anyhow::Result<()> {
    let (spec, g) = (&sc.spec, &sc.grid);
    let gamma = configured_control(sc)?;
    let mu = solve_forward(spec, &gamma, g, &sc.params.initial_density(g))?;
    let u = solve_hjb(spec, &mu, g)?;
    let star = extract_control(spec, &u, 0.0, g)?;
    write_file(out, "adjoint.csv", |w| u.write_csv(w))?;
    write_file(out, "control.csv", |w| star.write_csv(w, g))?;
    Ok(())
}

fn cmd_picard(sc: &Scenario, out: &Path) -> anyhow::Result<()> {
    let (spec, g) = (&sc.spec, &sc.grid);
    let sol = picard_solve(spec, g, &sc.params.initial_density(g), &sc.picard)?;
    write_file(out, "density.csv", |w| sol.density.write_csv(w))?;
    write_file(out, "adjoint.csv", |w| sol.adjoint.write_csv(w))?;
    write_file(out, "control.csv", |w| sol.control.write_csv(w, g))?;
    write_file(out, "residuals.csv", |w| sol.write_residuals_csv(w))?;
    let active = active_set(&sol.adjoint, sc.params.w_weight);
    write_file(out, "active_set.csv", |w| write_active_set_csv(&active, w))?;
    println!(
        "converged {} after {} iterations, residual {:.3e}, cost {:.8}, smp residual {:.3e}",
        sol.converged,
        sol.iterations,
        sol.residual_history.last().copied().unwrap_or(f64::NAN),
        sol.cost,
        sol.smp_residual
    );
    Ok(())
}

fn cmd_gradcheck(sc: &Scenario, out: &Path) -> anyhow::Result<()> {
    let (spec, g) = (&sc.spec, &sc.grid);
    let gamma = ControlField::constant(sc.config.gradcheck_gamma, spec, g)?;
    let h = smooth_direction(g, sc.config.seed)?;
    let report = gradient_check(spec, &gamma, &h, sc.config.gradcheck_eps, g, &sc.params.initial_density(g))?;
    let json = serde_json::to_string_pretty(&report)?;
    write_file(out, "gradcheck.json", |w| writeln!(w, "{json}"))?;
    println!("{json}");
    Ok(())
}

/// Smooth bounded direction with seed-dependent phases.
pub fn smooth_direction(g: &Grid, seed: u64) -> crate::error::Result<Direction> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let (a, b, c): (f64, f64, f64) = (
        rng.random_range(0.5..2.0),
        rng.random_range(0.0..6.3),
        rng.random_range(-1.0..1.0),
    );
    Direction::from_fn(g, 0.25, move |t, x| {
        0.2 * (a * x + b + t).sin() + 0.05 * c * (-(x - c) * (x - c)).exp()
    })
}

fn particle_model(sc: &Scenario) -> ParticleModel {
    ParticleModel::from(&sc.params)
}

fn cmd_particles(sc: &Scenario, out: &Path) -> anyhow::Result<()> {
    let gamma = configured_control(sc)?;
    let opts = SimOptions {
        hard_killing: sc.config.hard_killing,
        snapshot_every: None,
    };
    let run = simulate_model(
        &particle_model(sc),
        &gamma,
        &noise_path(sc),
        sc.config.n_particles,
        sc.config.seed,
        &sc.grid,
        opts,
    )?;
    write_file(out, "particles_summary.csv", |w| run.write_summary_csv(w))?;
    println!("final mass {:.6}", run.final_state.mass());
    Ok(())
}

fn cmd_compare(sc: &Scenario, out: &Path) -> anyhow::Result<()> {
    let (spec, g) = (&sc.spec, &sc.grid);
    let rho0 = sc.params.initial_density(g);
    let sol = picard_solve(spec, g, &rho0, &sc.picard)?;
    let report = cost_comparison(&sol, spec, g, &rho0, sc.config.n_trials, sc.config.seed)?;
    let json = serde_json::to_string_pretty(&report)?;
    write_file(out, "comparison.json", |w| writeln!(w, "{json}"))?;
    println!("base cost {:.8}, margin {:?}", report.base_cost, report.margin);
    Ok(())
}

fn cmd_d0(sc: &Scenario, out: &Path) -> anyhow::Result<()> {
    let g = &sc.grid;
    let gamma = configured_control(sc)?;
    let wpath = noise_path(sc);
    let mu = conditional_density(sc, &gamma, &wpath)?;
    let opts = SimOptions {
        hard_killing: sc.config.hard_killing,
        snapshot_every: Some(sc.config.d0_every),
    };
    let run = simulate_model(&particle_model(sc), &gamma, &wpath, sc.config.n_particles, sc.config.seed, g, opts)?;
    let mut rows = Vec::new();
    for snap in &run.snapshots {
        let k = ((snap.t / g.dt()).round() as usize).min(g.n_t());
        let d = flat_distance(&empirical_density(snap, g), mu.slice(k), g)?;
        rows.push((snap.t, d));
    }
    write_file(out, "d0.csv", |w| {
        writeln!(w, "t,d0")?;
        for (t, d) in &rows {
            writeln!(w, "{t},{d}")?;
        }
        Ok(())
    })?;
    if let Some((_, d)) = rows.last() {
        println!("d0 at T {d:.6}");
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = ScenarioConfig::default();
        let text = serde_json::to_string(&c).unwrap();
        assert_eq!(ScenarioConfig::from_json(&text).unwrap(), c);
        assert_eq!(ScenarioConfig::from_json("{}").unwrap(), c);
    }

    #[test]
    fn unknown_key_rejected() {
        let e = ScenarioConfig::from_json(r#"{"n_xx": 3}"#).unwrap_err();
        assert!(format!("{e:#}").contains("n_xx"));
    }

    #[test]
    fn overrides_parse_json_then_string() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        fs::write(&p, r#"{"kappa": 0.0}"#).unwrap();
        let c = ScenarioConfig::load(
            &p,
            &["kappa=1".into(), "control=max".into(), "smoothing_schedule=[0.1,0]".into()],
        )
        .unwrap();
        assert_eq!(c.kappa, 1.0);
        assert_eq!(c.control, ControlChoice::Max);
        assert_eq!(c.smoothing_schedule, vec![0.1, 0.0]);
        assert!(ScenarioConfig::load(&p, &["nonsense".into()]).is_err());
    }

    #[test]
    fn cfl_checked_before_solving() {
        let c = ScenarioConfig {
            n_t: 5,
            ..Default::default()
        };
        assert!(format!("{:#}", c.build().err().unwrap()).contains("Courant"));
    }
}
