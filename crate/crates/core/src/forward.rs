//! Forward solver for the nonlinear random Fokker–Planck equation
//! `∂ₜρ = λρ − ∂ₓ(bρ) + ∂ₓ²(aρ)`.
//!
//! IMEX stepping: implicit diffusion, explicit first-order upwind transport
//! and explicit zeroth-order term, with measure summaries frozen at the
//! start of each step. Zero Dirichlet data at both ends.

use std::io::{self, Write};

use crate::error::{Error, Result};
use crate::grid::{mass, pair_unchecked, weighted_norm, Field, Grid, NoisePath};
use crate::model::{running_cost_with, terminal_cost_eval, ControlField, ModelSpec};
use crate::scheme::{check_cfl, implicit_diffusion_forward, upwind_fluxes, StepCoeffs};

/// Relative tolerance for roundoff-level negative densities.
pub const NEGATIVITY_TOL: f64 = 1e-10;

/// Per-step bookkeeping of a forward solve (step `k → k + 1`).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepRecord {
    /// `dt·⟨ρ_k, −λ⟩`: mass removed by the zeroth-order term.
    pub killed: f64,
    /// Mass lost through the two boundaries.
    pub leakage: f64,
    pub courant: f64,
}

/// Density slices `ρ_{t_k}`, `k = 0..=n_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityPath {
    slices: Vec<Field>,
    grid: Grid,
    records: Vec<StepRecord>,
}

impl DensityPath {
    pub fn new(slices: Vec<Field>, grid: Grid) -> Result<Self> {
        if slices.len() != grid.n_t() + 1 {
            return Err(Error::TimeGridMismatch {
                expected: grid.n_t() + 1,
                found: slices.len(),
            });
        }
        for s in &slices {
            grid.check(s)?;
        }
        Ok(Self {
            slices,
            grid,
            records: Vec::new(),
        })
    }

    pub fn slices(&self) -> &[Field] {
        &self.slices
    }
    pub fn slice(&self, k: usize) -> &Field {
        &self.slices[k]
    }
    pub fn initial(&self) -> &Field {
        &self.slices[0]
    }
    pub fn terminal(&self) -> &Field {
        &self.slices[self.slices.len() - 1]
    }
    pub fn grid(&self) -> &Grid {
        &self.grid
    }
    /// Step diagnostics; empty for paths not produced by [`solve_forward`].
    pub fn records(&self) -> &[StepRecord] {
        &self.records
    }

    pub fn masses(&self) -> Vec<f64> {
        self.slices.iter().map(|s| mass(s, &self.grid)).collect()
    }

    pub fn weighted_norms(&self) -> Vec<f64> {
        self.slices
            .iter()
            .map(|s| weighted_norm(s, &self.grid).expect("slice on grid"))
            .collect()
    }

    pub fn min_value(&self) -> f64 {
        self.slices.iter().map(|s| s.min()).fold(f64::INFINITY, f64::min)
    }

    /// Discrete `L²(time; space)` norm.
    pub fn l2_norm(&self) -> f64 {
        l2_space_time(&self.slices, &self.grid)
    }

    /// `L²(time; space)` norm of `self − other`.
    pub fn l2_distance(&self, other: &DensityPath) -> f64 {
        let diff: Vec<Field> = self
            .slices
            .iter()
            .zip(&other.slices)
            .map(|(a, b)| a.sub(b))
            .collect();
        l2_space_time(&diff, &self.grid)
    }

    /// Mean of the slice measure, normalized by its mass.
    pub fn mean(&self, k: usize) -> f64 {
        let s = &self.slices[k];
        let m: f64 = s.iter().sum();
        s.iter().zip(self.grid.nodes()).map(|(v, x)| v * x).sum::<f64>() / m
    }

    /// CSV with header `t,x,rho`, one row per `(k, i)`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "t,x,rho")?;
        for (k, s) in self.slices.iter().enumerate() {
            let t = self.grid.t(k);
            for (x, v) in self.grid.nodes().iter().zip(s.iter()) {
                writeln!(w, "{t},{x},{v}")?;
            }
        }
        Ok(())
    }
}

pub(crate) fn l2_space_time(slices: &[Field], g: &Grid) -> f64 {
    let s: f64 = slices.iter().flat_map(|f| f.iter()).map(|v| v * v).sum();
    (s * g.dx() * g.dt()).sqrt()
}

fn check_nonnegative(rho: &[f64]) -> Result<()> {
    let scale = rho.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if let Some((index, &value)) = rho
        .iter()
        .enumerate()
        .find(|(_, &v)| v < -NEGATIVITY_TOL * scale)
    {
        return Err(Error::NegativeInput { index, value });
    }
    Ok(())
}

/// One forward step of size `dt` from time `t`.
pub fn step_forward(
    rho: &[f64],
    spec: &ModelSpec,
    gamma_slice: &[f64],
    t: f64,
    g: &Grid,
) -> Result<Field> {
    g.check(rho)?;
    g.check(gamma_slice)?;
    check_nonnegative(rho)?;
    for &c in gamma_slice {
        spec.check_control(c)?;
    }
    let coeffs = StepCoeffs::new(spec, t, rho, g);
    advance(rho, &coeffs, gamma_slice, g, 0).map(|(f, _)| f)
}

/// Forward step with precomputed coefficients; returns the new slice and
/// its bookkeeping record.
pub(crate) fn advance(
    rho: &[f64],
    coeffs: &StepCoeffs,
    gamma: &[f64],
    g: &Grid,
    step: usize,
) -> Result<(Field, StepRecord)> {
    let (dt, dx) = (g.dt(), g.dx());
    let b = coeffs.drift(gamma);
    let courant = check_cfl(&b, g, step)?;
    let flux = upwind_fluxes(&b, rho);
    let n = rho.len();
    let mut next: Vec<f64> = (0..n)
        .map(|i| rho[i] + dt * (coeffs.lambda[i] * rho[i] - (flux[i + 1] - flux[i]) / dx))
        .collect();
    implicit_diffusion_forward(&coeffs.diffusion, &mut next, g)?;
    let a = &coeffs.diffusion;
    let advective = dt * (flux[n] - flux[0]);
    let diffusive = dt / dx * (a[0] * next[0] + a[n - 1] * next[n - 1]);
    let killed = -dt * pair_unchecked(rho, &coeffs.lambda, dx);
    Ok((
        Field::new(next),
        StepRecord {
            killed,
            leakage: advective + diffusive,
            courant,
        },
    ))
}

/// Full forward solve from `rho0` under control `gamma`.
pub fn solve_forward(
    spec: &ModelSpec,
    gamma: &ControlField,
    g: &Grid,
    rho0: &[f64],
) -> Result<DensityPath> {
    g.check(rho0)?;
    gamma.check(g)?;
    check_nonnegative(rho0)?;
    let floor = -NEGATIVITY_TOL * rho0.iter().fold(0.0f64, |m, v| m.max(*v));
    let mut slices = Vec::with_capacity(g.n_t() + 1);
    let mut records = Vec::with_capacity(g.n_t());
    slices.push(Field::new(rho0.to_vec()));
    for k in 0..g.n_t() {
        let coeffs = StepCoeffs::new(spec, g.t(k), &slices[k], g);
        let (next, rec) = advance(&slices[k], &coeffs, gamma.slice(k), g, k)?;
        if let Some((index, &value)) = next.iter().enumerate().find(|(_, &v)| v < floor) {
            return Err(Error::NegativeDensity {
                step: k + 1,
                index,
                value,
            });
        }
        slices.push(next);
        records.push(rec);
    }
    Ok(DensityPath {
        slices,
        grid: g.clone(),
        records,
    })
}

/// `mass(t_k) = ⟨μ_{t_k}, 1⟩` and `loss(t_k) = Σ_{j<k} dt⟨μ_{t_j}, −λ⟩`.
///
/// For the bailout model `−λ` is the default intensity, so `loss` is the
/// defaulted fraction. Paths without step records report zero loss.
pub fn mass_and_loss(path: &DensityPath) -> (Vec<f64>, Vec<f64>) {
    let masses = path.masses();
    let mut loss = Vec::with_capacity(masses.len());
    let mut acc = 0.0;
    loss.push(0.0);
    for k in 0..masses.len() - 1 {
        acc += path.records.get(k).map_or(0.0, |r| r.killed);
        loss.push(acc);
    }
    (masses, loss)
}

/// `J(γ) = Σ_k dt⟨μ_k, f(t_k, ·, μ_k, γ_k)⟩ + ψ(μ_T)`.
pub fn evaluate_cost(
    spec: &ModelSpec,
    gamma: &ControlField,
    g: &Grid,
    rho0: &[f64],
) -> Result<f64> {
    let path = solve_forward(spec, gamma, g, rho0)?;
    path_cost(spec, &path, gamma)
}

/// Cost of an already solved path.
pub fn path_cost(spec: &ModelSpec, path: &DensityPath, gamma: &ControlField) -> Result<f64> {
    let g = path.grid();
    gamma.check(g)?;
    let mut running = 0.0;
    for k in 0..g.n_t() {
        let t = g.t(k);
        let mu = path.slice(k);
        let s = spec.summaries(t, mu, g);
        running += g.dt() * running_cost_with(spec, t, mu, gamma.slice(k), &s, g);
    }
    Ok(running + terminal_cost_eval(spec, path.terminal(), g)?)
}

/// `ν_t = (id + σ₀W_t)^# μ_t` by splitting each node mass linearly between
/// the two nodes bracketing its shifted position. The shift may not exceed
/// a quarter of the domain length.
pub fn pushforward(path: &DensityPath, wpath: &NoisePath, sigma0: f64) -> Result<DensityPath> {
    let g = path.grid();
    pushforward_with_margin(path, wpath, sigma0, 0.25 * (g.x_max() - g.x_min()))
}

pub fn pushforward_with_margin(
    path: &DensityPath,
    wpath: &NoisePath,
    sigma0: f64,
    margin: f64,
) -> Result<DensityPath> {
    let g = path.grid();
    wpath.check(g)?;
    let mut slices = Vec::with_capacity(path.slices.len());
    for (k, s) in path.slices.iter().enumerate() {
        let shift = sigma0 * wpath.values()[k];
        if shift.abs() > margin {
            return Err(Error::ShiftOutOfDomain {
                step: k,
                shift,
                margin,
            });
        }
        slices.push(shift_measure(s, shift, g.dx()));
    }
    Ok(DensityPath {
        slices,
        grid: g.clone(),
        records: path.records.clone(),
    })
}

/// Translates a grid measure by `shift`, splitting mass linearly.
pub(crate) fn shift_measure(v: &[f64], shift: f64, dx: f64) -> Field {
    let n = v.len() as i64;
    let mut out = vec![0.0; v.len()];
    if shift == 0.0 {
        out.copy_from_slice(v);
        return Field::new(out);
    }
    let s = shift / dx;
    let j = s.floor();
    let theta = s - j;
    let j = j as i64;
    for (i, &m) in v.iter().enumerate() {
        let lo = i as i64 + j;
        if (0..n).contains(&lo) {
            out[lo as usize] += (1.0 - theta) * m;
        }
        if (0..n).contains(&(lo + 1)) {
            out[(lo + 1) as usize] += theta * m;
        }
    }
    Field::new(out)
}
