//! Problem specification: coefficients, costs, their linear functional
//! derivatives, the control set, Hamiltonians and the noise shift.
//!
//! Measure dependence goes through a finite list of linear functionals
//! `s_j = ⟨μ, φ_j(t, ·)⟩` (the *summaries*). A nonlocal coefficient
//! `F(t, x, s)` then has linear functional derivative
//! `DF(t, x, μ)(y) = Σ_j ∂F/∂s_j (t, x, s) φ_j(t, y)`, which is how the
//! `d_*` methods below are evaluated.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::grid::{gradient_fd, pair_unchecked, Field, Grid, NoisePath};

pub type LocalFn = Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>;
pub type ControlFn = Arc<dyn Fn(f64, f64, f64) -> f64 + Send + Sync>;
pub type SummaryFn = Arc<dyn Fn(f64, f64, &[f64]) -> f64 + Send + Sync>;
pub type SummaryPartialFn = Arc<dyn Fn(f64, f64, &[f64], usize) -> f64 + Send + Sync>;
pub type TestFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// Coefficient `F(t, x, s)` depending on the measure through summaries,
/// together with its partials `∂F/∂s_j`.
#[derive(Clone)]
pub struct Nonlocal {
    value: SummaryFn,
    partial: SummaryPartialFn,
}

impl Nonlocal {
    pub fn new(value: SummaryFn, partial: SummaryPartialFn) -> Self {
        Self { value, partial }
    }

    pub fn local(f: impl Fn(f64, f64) -> f64 + Send + Sync + 'static) -> Self {
        Self {
            value: Arc::new(move |t, x, _| f(t, x)),
            partial: Arc::new(|_, _, _, _| 0.0),
        }
    }

    pub fn zero() -> Self {
        Self::local(|_, _| 0.0)
    }

    pub fn eval(&self, t: f64, x: f64, s: &[f64]) -> f64 {
        (self.value)(t, x, s)
    }

    pub fn partial(&self, t: f64, x: f64, s: &[f64], j: usize) -> f64 {
        (self.partial)(t, x, s, j)
    }

    fn shifted(&self, shift: Arc<dyn Fn(f64) -> f64 + Send + Sync>) -> Self {
        let value = self.value.clone();
        let partial = self.partial.clone();
        let s1 = shift.clone();
        Self {
            value: Arc::new(move |t, x, s| value(t, x + s1(t), s)),
            partial: Arc::new(move |t, x, s, j| partial(t, x + shift(t), s, j)),
        }
    }
}

/// Terminal cost `ψ(μ) = Ψ(⟨μ, φ^T_1⟩, …)`.
#[derive(Clone)]
pub struct TerminalCost {
    tests: Vec<TestFn>,
    value: Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>,
    partial: Arc<dyn Fn(&[f64], usize) -> f64 + Send + Sync>,
}

impl TerminalCost {
    pub fn new(
        tests: Vec<TestFn>,
        value: Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>,
        partial: Arc<dyn Fn(&[f64], usize) -> f64 + Send + Sync>,
    ) -> Self {
        Self {
            tests,
            value,
            partial,
        }
    }

    pub fn zero() -> Self {
        Self {
            tests: Vec::new(),
            value: Arc::new(|_| 0.0),
            partial: Arc::new(|_, _| 0.0),
        }
    }

    pub fn summaries(&self, mu: &[f64], g: &Grid) -> Vec<f64> {
        self.tests
            .iter()
            .map(|phi| {
                mu.iter()
                    .zip(g.nodes())
                    .map(|(m, &x)| m * phi(x))
                    .sum::<f64>()
                    * g.dx()
            })
            .collect()
    }
}

/// Bailout model parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BailoutParams {
    pub sigma: f64,
    pub sigma0: f64,
    pub kappa: f64,
    pub w_weight: f64,
    pub g_max: f64,
    pub hazard_max: f64,
    pub hazard_scale: f64,
    pub t_horizon: f64,
    pub initial_mean: f64,
    pub initial_sd: f64,
}

impl Default for BailoutParams {
    /// Baseline scenario with contagion switched off.
    fn default() -> Self {
        Self {
            sigma: 0.5,
            sigma0: 0.0,
            kappa: 0.0,
            w_weight: 0.3,
            g_max: 1.0,
            hazard_max: 2.0,
            hazard_scale: 0.5,
            t_horizon: 1.0,
            initial_mean: 0.3,
            initial_sd: 0.5,
        }
    }
}

impl BailoutParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("sigma", self.sigma),
            ("hazard_max", self.hazard_max),
            ("hazard_scale", self.hazard_scale),
            ("t_horizon", self.t_horizon),
            ("initial_sd", self.initial_sd),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidArgument(format!("{name} must be positive, got {v}")));
            }
        }
        let nonneg = [
            ("sigma0", self.sigma0),
            ("kappa", self.kappa),
            ("w_weight", self.w_weight),
            ("g_max", self.g_max),
        ];
        for (name, v) in nonneg {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidArgument(format!("{name} must be >= 0, got {v}")));
            }
        }
        if !self.initial_mean.is_finite() {
            return Err(Error::InvalidArgument("initial_mean must be finite".into()));
        }
        Ok(())
    }

    /// Default intensity: `hazard_max (1 − e^{x/hazard_scale})` for `x < 0`, zero otherwise.
    pub fn hazard(&self, x: f64) -> f64 {
        hazard(self.hazard_max, self.hazard_scale, x)
    }

    /// Gaussian initial law sampled on the grid, normalized to unit discrete mass.
    pub fn initial_density(&self, g: &Grid) -> Field {
        gaussian_density(g, self.initial_mean, self.initial_sd)
    }
}

pub fn hazard(hazard_max: f64, hazard_scale: f64, x: f64) -> f64 {
    if x < 0.0 {
        hazard_max * (1.0 - (x / hazard_scale).exp())
    } else {
        0.0
    }
}

/// Normal density sampled at the nodes and rescaled to unit discrete mass.
pub fn gaussian_density(g: &Grid, mean: f64, sd: f64) -> Field {
    let mut f = g.field_from_fn(|x| {
        let z = (x - mean) / sd;
        (-0.5 * z * z).exp()
    });
    let m: f64 = f.iter().sum::<f64>() * g.dx();
    for v in f.iter_mut() {
        *v /= m;
    }
    f
}

/// Coefficients and costs of a controlled nonlinear Fokker–Planck problem
/// with generator `λφ + (b₀ + slope·g)·∂φ + (a + σ₀²/2)∂²φ`, scalar control
/// `g ∈ [g_min, g_max]` and running cost `f₀ + f₁(g)`.
#[derive(Clone)]
pub struct ModelSpec {
    summaries: Vec<LocalFn>,
    lambda: Nonlocal,
    drift0: Nonlocal,
    drift1_slope: LocalFn,
    diffusion: LocalFn,
    diffusion_floor: f64,
    sigma0: f64,
    run_cost0: Nonlocal,
    run_cost1: ControlFn,
    run_cost1_grad: ControlFn,
    terminal: TerminalCost,
    g_min: f64,
    g_max: f64,
    /// Set when `run_cost1` is affine in `g`; enables the closed-form argmin.
    affine_cost: bool,
}

impl fmt::Debug for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ModelSpec")
            .field("n_summaries", &self.summaries.len())
            .field("sigma0", &self.sigma0)
            .field("diffusion_floor", &self.diffusion_floor)
            .field("g_min", &self.g_min)
            .field("g_max", &self.g_max)
            .finish_non_exhaustive()
    }
}

/// Builder for [`ModelSpec`]; every coefficient defaults to zero, the
/// diffusion to `1/2`, and the control set to `{0}`.
pub struct ModelBuilder {
    spec: ModelSpec,
}

impl ModelBuilder {
    pub fn new() -> Self {
        Self {
            spec: ModelSpec {
                summaries: Vec::new(),
                lambda: Nonlocal::zero(),
                drift0: Nonlocal::zero(),
                drift1_slope: Arc::new(|_, _| 0.0),
                diffusion: Arc::new(|_, _| 0.5),
                diffusion_floor: 0.5,
                sigma0: 0.0,
                run_cost0: Nonlocal::zero(),
                run_cost1: Arc::new(|_, _, _| 0.0),
                run_cost1_grad: Arc::new(|_, _, _| 0.0),
                terminal: TerminalCost::zero(),
                g_min: 0.0,
                g_max: 0.0,
                affine_cost: true,
            },
        }
    }

    pub fn summaries(mut self, tests: Vec<LocalFn>) -> Self {
        self.spec.summaries = tests;
        self
    }
    pub fn lambda(mut self, c: Nonlocal) -> Self {
        self.spec.lambda = c;
        self
    }
    pub fn drift0(mut self, c: Nonlocal) -> Self {
        self.spec.drift0 = c;
        self
    }
    pub fn drift1_slope(mut self, f: impl Fn(f64, f64) -> f64 + Send + Sync + 'static) -> Self {
        self.spec.drift1_slope = Arc::new(f);
        self
    }
    /// Idiosyncratic diffusion `a(t, x)` with declared lower bound `floor`.
    pub fn diffusion(
        mut self,
        floor: f64,
        f: impl Fn(f64, f64) -> f64 + Send + Sync + 'static,
    ) -> Self {
        self.spec.diffusion = Arc::new(f);
        self.spec.diffusion_floor = floor;
        self
    }
    pub fn sigma0(mut self, s: f64) -> Self {
        self.spec.sigma0 = s;
        self
    }
    pub fn run_cost0(mut self, c: Nonlocal) -> Self {
        self.spec.run_cost0 = c;
        self
    }
    /// Convex control cost `f₁` with its `g`-derivative; `affine` declares
    /// that `f₁` is affine in `g`.
    pub fn run_cost1(
        mut self,
        f: impl Fn(f64, f64, f64) -> f64 + Send + Sync + 'static,
        grad: impl Fn(f64, f64, f64) -> f64 + Send + Sync + 'static,
        affine: bool,
    ) -> Self {
        self.spec.run_cost1 = Arc::new(f);
        self.spec.run_cost1_grad = Arc::new(grad);
        self.spec.affine_cost = affine;
        self
    }
    pub fn terminal(mut self, t: TerminalCost) -> Self {
        self.spec.terminal = t;
        self
    }
    pub fn controls(mut self, g_min: f64, g_max: f64) -> Self {
        self.spec.g_min = g_min;
        self.spec.g_max = g_max;
        self
    }

    pub fn build(self) -> Result<ModelSpec> {
        let s = &self.spec;
        if !(s.g_min.is_finite() && s.g_max.is_finite() && s.g_min <= s.g_max) {
            return Err(Error::InvalidArgument(format!(
                "control set [{}, {}] is empty",
                s.g_min, s.g_max
            )));
        }
        if !(s.diffusion_floor > 0.0) {
            return Err(Error::InvalidArgument(
                "diffusion lower bound must be positive".into(),
            ));
        }
        if !(s.sigma0.is_finite() && s.sigma0 >= 0.0) {
            return Err(Error::InvalidArgument("sigma0 must be >= 0".into()));
        }
        Ok(self.spec)
    }
}

impl Default for ModelBuilder {
    fn default() -> Self {
        Self::new()
    }
}

impl ModelSpec {
    pub fn builder() -> ModelBuilder {
        ModelBuilder::new()
    }

    pub fn g_min(&self) -> f64 {
        self.g_min
    }
    pub fn g_max(&self) -> f64 {
        self.g_max
    }
    pub fn sigma0(&self) -> f64 {
        self.sigma0
    }
    pub fn diffusion_floor(&self) -> f64 {
        self.diffusion_floor
    }
    pub fn n_summaries(&self) -> usize {
        self.summaries.len()
    }

    pub fn summary_test(&self, j: usize, t: f64, x: f64) -> f64 {
        (self.summaries[j])(t, x)
    }

    /// `s_j = ⟨μ, φ_j(t, ·)⟩` for every declared summary.
    pub fn summaries(&self, t: f64, mu: &[f64], g: &Grid) -> Vec<f64> {
        self.summaries
            .iter()
            .map(|phi| {
                mu.iter()
                    .zip(g.nodes())
                    .map(|(m, &x)| m * phi(t, x))
                    .sum::<f64>()
                    * g.dx()
            })
            .collect()
    }

    pub fn lambda_coeff(&self, t: f64, x: f64, s: &[f64]) -> f64 {
        self.lambda.eval(t, x, s)
    }
    pub fn lambda_partial(&self, t: f64, x: f64, s: &[f64], j: usize) -> f64 {
        self.lambda.partial(t, x, s, j)
    }
    pub fn drift0(&self, t: f64, x: f64, s: &[f64]) -> f64 {
        self.drift0.eval(t, x, s)
    }
    pub fn drift0_partial(&self, t: f64, x: f64, s: &[f64], j: usize) -> f64 {
        self.drift0.partial(t, x, s, j)
    }
    pub fn drift1_slope(&self, t: f64, x: f64) -> f64 {
        (self.drift1_slope)(t, x)
    }
    /// Idiosyncratic diffusion `a(t, x)`.
    pub fn diffusion(&self, t: f64, x: f64) -> f64 {
        (self.diffusion)(t, x)
    }
    /// Diffusion of the generator, `a + σ₀²/2`.
    pub fn total_diffusion(&self, t: f64, x: f64) -> f64 {
        self.diffusion(t, x) + 0.5 * self.sigma0 * self.sigma0
    }
    pub fn run_cost0(&self, t: f64, x: f64, s: &[f64]) -> f64 {
        self.run_cost0.eval(t, x, s)
    }
    pub fn run_cost0_partial(&self, t: f64, x: f64, s: &[f64], j: usize) -> f64 {
        self.run_cost0.partial(t, x, s, j)
    }
    pub fn run_cost1(&self, t: f64, x: f64, g: f64) -> f64 {
        (self.run_cost1)(t, x, g)
    }
    pub fn run_cost1_grad(&self, t: f64, x: f64, g: f64) -> f64 {
        (self.run_cost1_grad)(t, x, g)
    }

    pub fn terminal_summaries(&self, mu: &[f64], g: &Grid) -> Vec<f64> {
        self.terminal.summaries(mu, g)
    }
    /// `ψ` evaluated on terminal summaries.
    pub fn terminal_cost(&self, s: &[f64]) -> f64 {
        (self.terminal.value)(s)
    }
    /// `Dψ(μ)(x)`.
    pub fn terminal_density_derivative(&self, x: f64, s: &[f64]) -> f64 {
        self.terminal
            .tests
            .iter()
            .enumerate()
            .map(|(j, phi)| (self.terminal.partial)(s, j) * phi(x))
            .sum()
    }

    /// `Dλ(t, x, μ)(y)`.
    pub fn d_lambda(&self, t: f64, x: f64, s: &[f64], y: f64) -> f64 {
        (0..self.summaries.len())
            .map(|j| self.lambda.partial(t, x, s, j) * self.summary_test(j, t, y))
            .sum()
    }
    /// `Db₀(t, x, μ)(y)`.
    pub fn d_drift0(&self, t: f64, x: f64, s: &[f64], y: f64) -> f64 {
        (0..self.summaries.len())
            .map(|j| self.drift0.partial(t, x, s, j) * self.summary_test(j, t, y))
            .sum()
    }
    /// `Df₀(t, x, μ)(y)`.
    pub fn d_run_cost0(&self, t: f64, x: f64, s: &[f64], y: f64) -> f64 {
        (0..self.summaries.len())
            .map(|j| self.run_cost0.partial(t, x, s, j) * self.summary_test(j, t, y))
            .sum()
    }

    pub fn contains(&self, g: f64) -> bool {
        g >= self.g_min && g <= self.g_max
    }

    pub fn check_control(&self, g: f64) -> Result<()> {
        if self.contains(g) {
            Ok(())
        } else {
            Err(Error::ControlOutOfRange {
                value: g,
                min: self.g_min,
                max: self.g_max,
            })
        }
    }

    /// Minimizer of the convex map `g ↦ slope·p·g + f₁(t, x, g)` on `[lo, hi]`.
    /// Ties go to the larger control.
    pub(crate) fn minimize_h1_on(&self, t: f64, x: f64, p: f64, lo: f64, hi: f64) -> f64 {
        let slope = self.drift1_slope(t, x);
        let d = |g: f64| slope * p + self.run_cost1_grad(t, x, g);
        if d(hi) <= 0.0 {
            return hi;
        }
        if self.affine_cost || d(lo) >= 0.0 {
            return lo;
        }
        let (mut a, mut b) = (lo, hi);
        for _ in 0..200 {
            let m = 0.5 * (a + b);
            if d(m) <= 0.0 {
                a = m;
            } else {
                b = m;
            }
            if b - a <= 1e-15 * (1.0 + b.abs()) {
                break;
            }
        }
        0.5 * (a + b)
    }
}

/// Coefficients of the bailout model in the un-shifted generator.
///
/// `λ = −λ_hazard`, `b₀ = −κ⟨μ, λ_hazard⟩`, `b₁ = g`, `a = σ²/2`,
/// `f₀ = 0`, `f₁ = w g`, `ψ(ν) = 1 − ν(ℝ)`, `G = [0, g_max]`.
pub fn bailout_model(p: &BailoutParams) -> Result<ModelSpec> {
    if !(p.sigma > 0.0) {
        return Err(Error::InvalidArgument(format!("sigma must be positive, got {}", p.sigma)));
    }
    if !(p.w_weight > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "w_weight must be positive, got {}",
            p.w_weight
        )));
    }
    if !(p.g_max > 0.0) {
        return Err(Error::InvalidArgument(format!("g_max must be positive, got {}", p.g_max)));
    }
    bailout_model_unchecked(p)
}

/// [`bailout_model`] without the positivity checks on `w` and `g_max`,
/// so degenerate control sets (`g_max = 0`) can be built for tests.
pub fn bailout_model_unchecked(p: &BailoutParams) -> Result<ModelSpec> {
    p.validate()?;
    let (hm, hs, kappa, w) = (p.hazard_max, p.hazard_scale, p.kappa, p.w_weight);
    let a = 0.5 * p.sigma * p.sigma;
    ModelSpec::builder()
        .summaries(vec![Arc::new(move |_, x| hazard(hm, hs, x))])
        .lambda(Nonlocal::local(move |_, x| -hazard(hm, hs, x)))
        .drift0(Nonlocal::new(
            Arc::new(move |_, _, s| -kappa * s[0]),
            Arc::new(move |_, _, _, _| -kappa),
        ))
        .drift1_slope(|_, _| 1.0)
        .diffusion(a, move |_, _| a)
        .sigma0(p.sigma0)
        .run_cost1(move |_, _, g| w * g, move |_, _, _| w, true)
        .terminal(TerminalCost::new(
            vec![Arc::new(|_| 1.0)],
            Arc::new(|s| 1.0 - s[0]),
            Arc::new(|_, _| -1.0),
        ))
        .controls(0.0, p.g_max)
        .build()
}

/// `H₁(t, x, p, g) = b₁(t, x, g) p + f₁(t, x, g)`.
pub fn hamiltonian_h1(spec: &ModelSpec, t: f64, x: f64, p: f64, g: f64) -> Result<f64> {
    spec.check_control(g)?;
    Ok(spec.drift1_slope(t, x) * g * p + spec.run_cost1(t, x, g))
}

/// Pointwise minimizer of `H₁` over the control set. For the bailout model
/// this is `g_max·1{p ≤ −w}`.
pub fn minimize_h1(spec: &ModelSpec, t: f64, x: f64, p: f64) -> f64 {
    spec.minimize_h1_on(t, x, p, spec.g_min, spec.g_max)
}

/// Linear functional derivative of the Hamiltonian at the nodes:
/// `λu + b·∂u + f + ⟨μ, Dλ(·)(x)u + Db₀(·)(x)∂u + Df₀(·)(x)⟩`.
pub fn d_hamiltonian(
    spec: &ModelSpec,
    t: f64,
    mu: &[f64],
    u: &[f64],
    grad_u: &[f64],
    gamma: &[f64],
    g: &Grid,
) -> Result<Field> {
    for f in [mu, u, grad_u, gamma] {
        g.check(f)?;
    }
    for &c in gamma {
        spec.check_control(c)?;
    }
    let s = spec.summaries(t, mu, g);
    let dx = g.dx();
    // ⟨μ, ∂_j F(·) u⟩ style integrals, one per summary
    let nonlocal: Vec<f64> = (0..spec.n_summaries())
        .map(|j| {
            let lam: Vec<f64> = g
                .nodes()
                .iter()
                .zip(u)
                .map(|(&y, &uy)| spec.lambda_partial(t, y, &s, j) * uy)
                .collect();
            let drift: Vec<f64> = g
                .nodes()
                .iter()
                .zip(grad_u)
                .map(|(&y, &py)| spec.drift0_partial(t, y, &s, j) * py)
                .collect();
            let cost: Vec<f64> = g
                .nodes()
                .iter()
                .map(|&y| spec.run_cost0_partial(t, y, &s, j))
                .collect();
            pair_unchecked(mu, &lam, dx) + pair_unchecked(mu, &drift, dx) + pair_unchecked(mu, &cost, dx)
        })
        .collect();
    let out = g
        .nodes()
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let b = spec.drift0(t, x, &s) + spec.drift1_slope(t, x) * gamma[i];
            let f = spec.run_cost0(t, x, &s) + spec.run_cost1(t, x, gamma[i]);
            let bracket: f64 = nonlocal
                .iter()
                .enumerate()
                .map(|(j, c)| c * spec.summary_test(j, t, x))
                .sum();
            spec.lambda_coeff(t, x, &s) * u[i] + b * grad_u[i] + f + bracket
        })
        .collect();
    Ok(Field::new(out))
}

/// [`d_hamiltonian`] with `∂u` taken from [`gradient_fd`].
pub fn d_hamiltonian_fd(
    spec: &ModelSpec,
    t: f64,
    mu: &[f64],
    u: &[f64],
    gamma: &[f64],
    g: &Grid,
) -> Result<Field> {
    let grad = gradient_fd(u, g)?;
    d_hamiltonian(spec, t, mu, u, &grad, gamma, g)
}

/// Coefficients shifted along the noise: every `(t, x)` evaluation becomes
/// `(t, x + σ₀W_t)`, summary test functions likewise (which realizes the
/// pushforward of the measure argument), and the common-noise loading of
/// the result is zero.
pub fn shift_model(spec: &ModelSpec, wpath: &NoisePath, g: &Grid) -> Result<ModelSpec> {
    shift_model_by(spec, wpath, spec.sigma0, g)
}

/// Shift by `loading·W_t` with an explicit loading.
pub fn shift_model_by(
    spec: &ModelSpec,
    wpath: &NoisePath,
    loading: f64,
    g: &Grid,
) -> Result<ModelSpec> {
    wpath.check(g)?;
    let path = Arc::new(wpath.clone());
    let shift: Arc<dyn Fn(f64) -> f64 + Send + Sync> = Arc::new(move |t| loading * path.at(t));
    let terminal_shift = shift(g.t_horizon());

    let shift_local = |f: &LocalFn| -> LocalFn {
        let f = f.clone();
        let sh = shift.clone();
        Arc::new(move |t, x| f(t, x + sh(t)))
    };
    let shift_control = |f: &ControlFn| -> ControlFn {
        let f = f.clone();
        let sh = shift.clone();
        Arc::new(move |t, x, c| f(t, x + sh(t), c))
    };
    let terminal = TerminalCost {
        tests: spec
            .terminal
            .tests
            .iter()
            .map(|phi| {
                let phi = phi.clone();
                Arc::new(move |x: f64| phi(x + terminal_shift)) as TestFn
            })
            .collect(),
        value: spec.terminal.value.clone(),
        partial: spec.terminal.partial.clone(),
    };
    Ok(ModelSpec {
        summaries: spec.summaries.iter().map(shift_local).collect(),
        lambda: spec.lambda.shifted(shift.clone()),
        drift0: spec.drift0.shifted(shift.clone()),
        drift1_slope: shift_local(&spec.drift1_slope),
        diffusion: shift_local(&spec.diffusion),
        diffusion_floor: spec.diffusion_floor,
        sigma0: 0.0,
        run_cost0: spec.run_cost0.shifted(shift.clone()),
        run_cost1: shift_control(&spec.run_cost1),
        run_cost1_grad: shift_control(&spec.run_cost1_grad),
        terminal,
        g_min: spec.g_min,
        g_max: spec.g_max,
        affine_cost: spec.affine_cost,
    })
}

/// `⟨μ_t, f(t, ·, μ_t, γ_t)⟩`.
pub fn running_cost(spec: &ModelSpec, t: f64, mu: &[f64], gamma: &[f64], g: &Grid) -> Result<f64> {
    g.check(mu)?;
    g.check(gamma)?;
    let s = spec.summaries(t, mu, g);
    Ok(running_cost_with(spec, t, mu, gamma, &s, g))
}

pub(crate) fn running_cost_with(
    spec: &ModelSpec,
    t: f64,
    mu: &[f64],
    gamma: &[f64],
    s: &[f64],
    g: &Grid,
) -> f64 {
    g.nodes()
        .iter()
        .enumerate()
        .map(|(i, &x)| mu[i] * (spec.run_cost0(t, x, s) + spec.run_cost1(t, x, gamma[i])))
        .sum::<f64>()
        * g.dx()
}

/// `ψ(μ_T)`.
pub fn terminal_cost_eval(spec: &ModelSpec, mu_t: &[f64], g: &Grid) -> Result<f64> {
    g.check(mu_t)?;
    Ok(spec.terminal_cost(&spec.terminal_summaries(mu_t, g)))
}

/// Time-indexed control values `γ_{t_k}(x_i)`, `k = 0..n_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlField {
    slices: Vec<Field>,
}

impl ControlField {
    /// Validates shape against `g` and every entry against the control set.
    pub fn new(slices: Vec<Field>, spec: &ModelSpec, g: &Grid) -> Result<Self> {
        if slices.len() != g.n_t() {
            return Err(Error::TimeGridMismatch {
                expected: g.n_t(),
                found: slices.len(),
            });
        }
        for s in &slices {
            g.check(s)?;
            for &v in s.iter() {
                spec.check_control(v)?;
            }
        }
        Ok(Self { slices })
    }

    pub fn constant(value: f64, spec: &ModelSpec, g: &Grid) -> Result<Self> {
        spec.check_control(value)?;
        Ok(Self {
            slices: vec![g.constant(value); g.n_t()],
        })
    }

    pub fn from_fn(
        spec: &ModelSpec,
        g: &Grid,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Self> {
        let slices = (0..g.n_t())
            .map(|k| g.field_from_fn(|x| f(g.t(k), x)))
            .collect();
        Self::new(slices, spec, g)
    }

    pub(crate) fn from_slices_unchecked(slices: Vec<Field>) -> Self {
        Self { slices }
    }

    pub fn slices(&self) -> &[Field] {
        &self.slices
    }

    pub fn slice(&self, k: usize) -> &Field {
        &self.slices[k]
    }

    pub fn n_t(&self) -> usize {
        self.slices.len()
    }

    pub fn check(&self, g: &Grid) -> Result<()> {
        if self.slices.len() != g.n_t() {
            return Err(Error::TimeGridMismatch {
                expected: g.n_t(),
                found: self.slices.len(),
            });
        }
        self.slices.iter().try_for_each(|s| g.check(s))
    }

    /// Value at an arbitrary state: piecewise constant in time (slice `k`),
    /// linear in space, clamped to `[lo, hi]`.
    pub fn eval(&self, k: usize, x: f64, g: &Grid, lo: f64, hi: f64) -> f64 {
        g.interpolate(&self.slices[k], x).clamp(lo, hi)
    }

    /// CSV with header `t,x,gamma`, one row per `(k, i)`, `k < n_t`.
    pub fn write_csv<W: std::io::Write>(&self, mut w: W, g: &Grid) -> std::io::Result<()> {
        writeln!(w, "t,x,gamma")?;
        for (k, s) in self.slices.iter().enumerate() {
            let t = g.t(k);
            for (x, v) in g.nodes().iter().zip(s.iter()) {
                writeln!(w, "{t},{x},{v}")?;
            }
        }
        Ok(())
    }

    /// `γ̃_t(x) = γ_t(x + σ₀W_t)` resampled on the grid.
    pub fn shifted(&self, wpath: &NoisePath, sigma0: f64, spec: &ModelSpec, g: &Grid) -> Result<Self> {
        wpath.check(g)?;
        self.check(g)?;
        let slices = (0..g.n_t())
            .map(|k| {
                let s = sigma0 * wpath.values()[k];
                g.field_from_fn(|x| self.eval(k, x + s, g, spec.g_min, spec.g_max))
            })
            .collect();
        Ok(Self { slices })
    }
}
