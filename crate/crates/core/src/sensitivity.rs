//! First-order sensitivity of the cost with respect to the control: the
//! linearized forward equation, the adjoint representation of the Gateaux
//! derivative, a finite-difference oracle, and the minimum-principle
//! residual used to extract and check bang-bang controls.

use serde::{Deserialize, Serialize};

use crate::adjoint::{AdjointPath, NodeHamiltonian, Transport};
use crate::error::{Error, Result};
use crate::forward::{evaluate_cost, DensityPath};
use crate::grid::{pair_unchecked, Field, Grid};
use crate::model::{ControlField, ModelSpec};
use crate::scheme::{
    check_cfl, implicit_diffusion_forward, positive_branch, upwind_flux_variation, upwind_fluxes,
    StepCoeffs,
};

/// Control perturbation `h_{t_k}(x_i)` with a declared step bound `ε_max`
/// such that `γ + εh` is admissible for `ε ∈ [0, ε_max]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Direction {
    values: Vec<Field>,
    bound: f64,
}

impl Direction {
    pub fn new(values: Vec<Field>, bound: f64, g: &Grid) -> Result<Self> {
        if values.len() != g.n_t() {
            return Err(Error::TimeGridMismatch {
                expected: g.n_t(),
                found: values.len(),
            });
        }
        values.iter().try_for_each(|v| g.check(v))?;
        if !(bound >= 0.0) {
            return Err(Error::InvalidArgument(format!("direction bound must be >= 0, got {bound}")));
        }
        Ok(Self { values, bound })
    }

    pub fn zeros(g: &Grid) -> Self {
        Self {
            values: vec![g.zeros(); g.n_t()],
            bound: f64::INFINITY,
        }
    }

    pub fn from_fn(g: &Grid, bound: f64, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        let values = (0..g.n_t()).map(|k| g.field_from_fn(|x| f(g.t(k), x))).collect();
        Self::new(values, bound, g)
    }

    /// Uses the largest admissible step at `gamma` (capped at 1) as bound.
    pub fn inward(values: Vec<Field>, gamma: &ControlField, spec: &ModelSpec, g: &Grid) -> Result<Self> {
        let mut d = Self::new(values, 0.0, g)?;
        d.bound = d.max_step(gamma, spec).min(1.0);
        Ok(d)
    }

    pub fn values(&self) -> &[Field] {
        &self.values
    }
    pub fn slice(&self, k: usize) -> &Field {
        &self.values[k]
    }
    pub fn bound(&self) -> f64 {
        self.bound
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            values: self.values.iter().map(|v| v.scale(c)).collect(),
            bound: if c == 0.0 { f64::INFINITY } else { self.bound / c.abs() },
        }
    }

    pub fn add(&self, other: &Direction) -> Self {
        Self {
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| Field::new(a.iter().zip(b.iter()).map(|(x, y)| x + y).collect()))
                .collect(),
            bound: 0.0,
        }
    }

    /// Largest `ε ≥ 0` with `γ + εh` inside the control set.
    pub fn max_step(&self, gamma: &ControlField, spec: &ModelSpec) -> f64 {
        let mut eps = f64::INFINITY;
        for (gs, hs) in gamma.slices().iter().zip(&self.values) {
            for (&c, &h) in gs.iter().zip(hs.iter()) {
                if h > 0.0 {
                    eps = eps.min((spec.g_max() - c) / h);
                } else if h < 0.0 {
                    eps = eps.min((spec.g_min() - c) / h);
                }
            }
        }
        eps.max(0.0)
    }

    fn perturb(&self, gamma: &ControlField, eps: f64, spec: &ModelSpec, g: &Grid) -> Option<ControlField> {
        let slices = gamma
            .slices()
            .iter()
            .zip(&self.values)
            .map(|(a, h)| Field::new(a.iter().zip(h.iter()).map(|(x, y)| x + eps * y).collect()))
            .collect();
        ControlField::new(slices, spec, g).ok()
    }
}

fn check_inputs(mu: &DensityPath, gamma: &ControlField, h: &Direction, g: &Grid) -> Result<()> {
    if mu.slices().len() != g.n_t() + 1 {
        return Err(Error::TimeGridMismatch {
            expected: g.n_t() + 1,
            found: mu.slices().len(),
        });
    }
    mu.slices().iter().try_for_each(|s| g.check(s))?;
    gamma.check(g)?;
    if h.values.len() != g.n_t() {
        return Err(Error::TimeGridMismatch {
            expected: g.n_t(),
            found: h.values.len(),
        });
    }
    h.values.iter().try_for_each(|s| g.check(s))
}

fn summary_variation(spec: &ModelSpec, t: f64, v: &[f64], g: &Grid) -> Vec<f64> {
    (0..spec.n_summaries())
        .map(|j| {
            g.nodes()
                .iter()
                .zip(v)
                .map(|(&x, vi)| spec.summary_test(j, t, x) * vi)
                .sum::<f64>()
                * g.dx()
        })
        .collect()
}

/// Linearization `V = d/dε μ^{γ+εh}` of the discrete forward map, `V₀ = 0`.
pub fn solve_variation(
    spec: &ModelSpec,
    mu: &DensityPath,
    gamma: &ControlField,
    h: &Direction,
    g: &Grid,
) -> Result<DensityPath> {
    check_inputs(mu, gamma, h, g)?;
    let (dt, dx) = (g.dt(), g.dx());
    let nodes = g.nodes();
    let n = g.n_x();
    let mut slices = Vec::with_capacity(g.n_t() + 1);
    slices.push(g.zeros());
    for k in 0..g.n_t() {
        let t = g.t(k);
        let rho = mu.slice(k);
        let v = &slices[k];
        let c = StepCoeffs::new(spec, t, rho, g);
        let b = c.drift(gamma.slice(k));
        check_cfl(&b, g, k)?;
        let ds = summary_variation(spec, t, v, g);
        let mut dlambda = vec![0.0; n];
        let mut db = vec![0.0; n];
        for i in 0..n {
            let x = nodes[i];
            for (j, dsj) in ds.iter().enumerate() {
                dlambda[i] += spec.lambda_partial(t, x, &c.summaries, j) * dsj;
                db[i] += spec.drift0_partial(t, x, &c.summaries, j) * dsj;
            }
            db[i] += c.slope[i] * h.slice(k)[i];
        }
        let f_v = upwind_fluxes(&b, v);
        let f_rho = upwind_flux_variation(&b, &db, rho);
        let mut next: Vec<f64> = (0..n)
            .map(|i| {
                v[i] + dt
                    * (c.lambda[i] * v[i] + dlambda[i] * rho[i]
                        - (f_v[i + 1] - f_v[i] + f_rho[i + 1] - f_rho[i]) / dx)
            })
            .collect();
        implicit_diffusion_forward(&c.diffusion, &mut next, g)?;
        slices.push(Field::new(next));
    }
    DensityPath::new(slices, g.clone())
}

/// Directional derivative of the cost computed from the variation:
/// running cost along `V`, the control-cost term, the nonlocal `Df₀` term
/// and `⟨V_T, Dψ(μ_T)⟩`.
pub fn gateaux_variation(
    spec: &ModelSpec,
    mu: &DensityPath,
    var: &DensityPath,
    gamma: &ControlField,
    h: &Direction,
    g: &Grid,
) -> Result<f64> {
    check_inputs(mu, gamma, h, g)?;
    check_inputs(var, gamma, h, g)?;
    let dx = g.dx();
    let nodes = g.nodes();
    let mut total = 0.0;
    for k in 0..g.n_t() {
        let t = g.t(k);
        let (rho, v, gk, hk) = (mu.slice(k), var.slice(k), gamma.slice(k), h.slice(k));
        let s = spec.summaries(t, rho, g);
        let ds = summary_variation(spec, t, v, g);
        let mut acc = 0.0;
        for i in 0..g.n_x() {
            let x = nodes[i];
            let mut df0 = 0.0;
            for (j, dsj) in ds.iter().enumerate() {
                df0 += spec.run_cost0_partial(t, x, &s, j) * dsj;
            }
            acc += v[i] * (spec.run_cost0(t, x, &s) + spec.run_cost1(t, x, gk[i]))
                + rho[i] * (spec.run_cost1_grad(t, x, gk[i]) * hk[i] + df0);
        }
        total += g.dt() * acc * dx;
    }
    let s_t = spec.terminal_summaries(mu.terminal(), g);
    let dpsi = g.field_from_fn(|x| spec.terminal_density_derivative(x, &s_t));
    Ok(total + pair_unchecked(var.terminal(), &dpsi, dx))
}

fn require_transport<'a>(u: &'a AdjointPath, g: &Grid) -> Result<&'a [Transport]> {
    let tr = u.transport();
    if tr.len() != g.n_t() {
        return Err(Error::InvalidArgument(
            "adjoint path carries no step data; use solve_adjoint or solve_hjb".into(),
        ));
    }
    Ok(tr)
}

/// `dJ/dε(γ + εh)|₀ = Σ_k dt⟨μ_k, ∂_g Ĥ(γ_k)·h_k⟩` with the discrete
/// Hamiltonian of the backward step. At nodes with zero drift the one-sided
/// derivative in the direction of `h` is used.
pub fn gateaux_adjoint(
    spec: &ModelSpec,
    mu: &DensityPath,
    u: &AdjointPath,
    gamma: &ControlField,
    h: &Direction,
    g: &Grid,
) -> Result<f64> {
    check_inputs(mu, gamma, h, g)?;
    let tr = require_transport(u, g)?;
    let nodes = g.nodes();
    let mut total = 0.0;
    for (k, step) in tr.iter().enumerate() {
        let t = g.t(k);
        let (rho, gk, hk) = (mu.slice(k), gamma.slice(k), h.slice(k));
        let mut acc = 0.0;
        for i in 0..g.n_x() {
            let x = nodes[i];
            let slope = spec.drift1_slope(t, x);
            let b = step.drift0[i] + slope * gk[i];
            let p = if positive_branch(b, slope * hk[i]) {
                step.p_fwd[i]
            } else {
                step.p_bwd[i]
            };
            acc += rho[i] * (slope * p + spec.run_cost1_grad(t, x, gk[i])) * hk[i];
        }
        total += g.dt() * acc * g.dx();
    }
    Ok(total)
}

/// Finite-difference oracle: central when `γ ± εh` are both admissible,
/// otherwise one-sided towards the admissible side.
pub fn gateaux_fd(
    spec: &ModelSpec,
    gamma: &ControlField,
    h: &Direction,
    eps: f64,
    g: &Grid,
    rho0: &[f64],
) -> Result<f64> {
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!("eps must be positive, got {eps}")));
    }
    gamma.check(g)?;
    let plus = h.perturb(gamma, eps, spec, g);
    let minus = h.perturb(gamma, -eps, spec, g);
    let cost = |c: &ControlField| evaluate_cost(spec, c, g, rho0);
    match (plus, minus) {
        (Some(p), Some(m)) => {
            let (jp, jm) = rayon::join(|| cost(&p), || cost(&m));
            Ok((jp? - jm?) / (2.0 * eps))
        }
        (Some(p), None) => {
            let (jp, j0) = rayon::join(|| cost(&p), || cost(gamma));
            Ok((jp? - j0?) / eps)
        }
        (None, Some(m)) => {
            let (j0, jm) = rayon::join(|| cost(gamma), || cost(&m));
            Ok((j0? - jm?) / eps)
        }
        (None, None) => Err(Error::InadmissiblePerturbation(format!(
            "neither γ + εh nor γ − εh lies in [{}, {}] for ε = {eps}",
            spec.g_min(),
            spec.g_max()
        ))),
    }
}

/// Node Hamiltonians of step `k`. Paths without step data use the centred
/// gradient of `u_{t_{k+1}}` for both one-sided differences and zero
/// control-free drift.
fn hamiltonians<'a>(
    spec: &'a ModelSpec,
    u: &'a AdjointPath,
    k: usize,
    g: &'a Grid,
) -> impl Iterator<Item = NodeHamiltonian<'a>> + 'a {
    let t = g.t(k);
    let step = u.transport().get(k);
    let grad = u.grad(k + 1);
    g.nodes().iter().enumerate().map(move |(i, &x)| {
        let (drift0, p_fwd, p_bwd) = match step {
            Some(s) => (s.drift0[i], s.p_fwd[i], s.p_bwd[i]),
            None => (0.0, grad[i], grad[i]),
        };
        NodeHamiltonian {
            spec,
            t,
            x,
            drift0,
            slope: spec.drift1_slope(t, x),
            p_fwd,
            p_bwd,
        }
    })
}

/// `Σ_k dt⟨μ_k, Ĥ(γ_k) − min_g Ĥ(g)⟩ ≥ 0`.
pub fn smp_residual(
    spec: &ModelSpec,
    mu: &DensityPath,
    u: &AdjointPath,
    gamma: &ControlField,
    g: &Grid,
) -> Result<f64> {
    gamma.check(g)?;
    let mut total = 0.0;
    for k in 0..g.n_t() {
        let (rho, gk) = (mu.slice(k), gamma.slice(k));
        let acc: f64 = hamiltonians(spec, u, k, g)
            .enumerate()
            .map(|(i, h)| {
                let gap = (h.value(gk[i]) - h.value(h.argmin())).max(0.0);
                rho[i].max(0.0) * gap
            })
            .sum();
        total += g.dt() * acc * g.dx();
    }
    Ok(total)
}

/// Pointwise minimizer of the discrete Hamiltonian, or its softmin
/// relaxation between the extreme controls when `smoothing > 0`. For the
/// bailout model this is `g_max·1{∂ₓu ≤ −w}` resp.
/// `g_max·sigmoid(−(∂ₓu + w)/smoothing)`.
pub fn extract_control(
    spec: &ModelSpec,
    u: &AdjointPath,
    smoothing: f64,
    g: &Grid,
) -> Result<ControlField> {
    if !(smoothing >= 0.0) {
        return Err(Error::InvalidArgument(format!("smoothing must be >= 0, got {smoothing}")));
    }
    if u.slices().len() != g.n_t() + 1 {
        return Err(Error::TimeGridMismatch {
            expected: g.n_t() + 1,
            found: u.slices().len(),
        });
    }
    let slices = (0..g.n_t())
        .map(|k| {
            Field::new(
                hamiltonians(spec, u, k, g)
                    .map(|h| {
                        if smoothing == 0.0 {
                            h.argmin()
                        } else {
                            h.relaxed(smoothing)
                        }
                    })
                    .collect(),
            )
        })
        .collect();
    Ok(ControlField::from_slices_unchecked(slices))
}

/// Gradient-check record, serialized as JSON.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub adjoint_value: f64,
    pub fd_value: f64,
    pub eps: f64,
    pub rel_err: f64,
}

impl GradCheckReport {
    pub fn new(adjoint_value: f64, fd_value: f64, eps: f64) -> Self {
        let diff = (adjoint_value - fd_value).abs();
        let rel_err = if diff == 0.0 {
            0.0
        } else {
            diff / fd_value.abs().max(f64::MIN_POSITIVE)
        };
        Self {
            adjoint_value,
            fd_value,
            eps,
            rel_err,
        }
    }

    /// `|adjoint − fd| ≤ rel·|fd| + abs`.
    pub fn passes(&self, rel: f64, abs: f64) -> bool {
        (self.adjoint_value - self.fd_value).abs() <= rel * self.fd_value.abs() + abs
    }
}

/// Adjoint and finite-difference derivatives of the cost at `gamma` in
/// direction `h`.
pub fn gradient_check(
    spec: &ModelSpec,
    gamma: &ControlField,
    h: &Direction,
    eps: f64,
    g: &Grid,
    rho0: &[f64],
) -> Result<GradCheckReport> {
    let mu = crate::forward::solve_forward(spec, gamma, g, rho0)?;
    let u = crate::adjoint::solve_adjoint(spec, &mu, gamma, g)?;
    let adj = gateaux_adjoint(spec, &mu, &u, gamma, h, g)?;
    let fd = gateaux_fd(spec, gamma, h, eps, g, rho0)?;
    Ok(GradCheckReport::new(adj, fd, eps))
}
