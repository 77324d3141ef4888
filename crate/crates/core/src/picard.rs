//! Damped Picard iteration for the coupled forward–backward system, with
//! annealed sigmoid relaxation of the bang-bang control.

use std::io::{self, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adjoint::{solve_adjoint, solve_hjb, AdjointPath};
use crate::error::{Error, Result};
use crate::forward::{evaluate_cost, path_cost, solve_forward, DensityPath};
use crate::grid::{Field, Grid};
use crate::model::{ControlField, ModelSpec};
use crate::sensitivity::{extract_control, smp_residual};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PicardOptions {
    pub max_iters: usize,
    pub tol: f64,
    /// Weight `θ` of the fresh backward solve in `u ← θũ + (1 − θ)u`.
    pub damping: f64,
    /// Nonincreasing relaxation temperatures; the last stage is usually 0.
    pub smoothing_schedule: Vec<f64>,
}

impl Default for PicardOptions {
    fn default() -> Self {
        Self {
            max_iters: 200,
            tol: 1e-5,
            damping: 0.5,
            smoothing_schedule: vec![0.1, 0.03, 0.01, 0.0],
        }
    }
}

impl PicardOptions {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(Error::InvalidArgument("max_iters must be at least 1".into()));
        }
        if !(self.tol > 0.0) {
            return Err(Error::InvalidArgument(format!("tol must be positive, got {}", self.tol)));
        }
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "damping must lie in (0, 1], got {}",
                self.damping
            )));
        }
        let s = &self.smoothing_schedule;
        if s.is_empty() {
            return Err(Error::InvalidArgument("smoothing_schedule is empty".into()));
        }
        if s.iter().any(|&e| !(e >= 0.0 && e.is_finite())) {
            return Err(Error::InvalidArgument("smoothing values must be finite and >= 0".into()));
        }
        if s.windows(2).any(|w| w[1] > w[0]) {
            return Err(Error::InvalidArgument("smoothing_schedule must be nonincreasing".into()));
        }
        Ok(())
    }
}

/// Result of a Picard run. `control` is the hard (unsmoothed) control of the
/// best iterate, `density` its forward solve and `adjoint` the linear adjoint
/// along it.
#[derive(Debug, Clone)]
pub struct FbSolution {
    pub density: DensityPath,
    pub adjoint: AdjointPath,
    pub control: ControlField,
    pub residual_history: Vec<f64>,
    /// Cost of the control used in each iteration.
    pub cost_history: Vec<f64>,
    /// Smoothing temperature used in each iteration.
    pub stage_history: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub cost: f64,
    pub smp_residual: f64,
    /// Damped backward iterate the hard control was extracted from.
    iterate: AdjointPath,
}

impl FbSolution {
    pub fn iterate(&self) -> &AdjointPath {
        &self.iterate
    }

    /// CSV with header `iter,residual,cost`, iterations counted from 1.
    pub fn write_residuals_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "iter,residual,cost")?;
        for (i, (r, c)) in self.residual_history.iter().zip(&self.cost_history).enumerate() {
            writeln!(w, "{},{r},{c}", i + 1)?;
        }
        Ok(())
    }
}

fn relative(num: f64, den: f64) -> f64 {
    if den > 0.0 {
        num / den
    } else {
        num
    }
}

fn finish(
    spec: &ModelSpec,
    g: &Grid,
    rho0: &[f64],
    iterate: AdjointPath,
    history: (Vec<f64>, Vec<f64>, Vec<f64>),
    converged: bool,
) -> Result<FbSolution> {
    let control = extract_control(spec, &iterate, 0.0, g)?;
    let density = solve_forward(spec, &control, g, rho0)?;
    let adjoint = solve_adjoint(spec, &density, &control, g)?;
    let cost = path_cost(spec, &density, &control)?;
    let smp = smp_residual(spec, &density, &adjoint, &control, g)?;
    let (residual_history, cost_history, stage_history) = history;
    Ok(FbSolution {
        iterations: residual_history.len(),
        density,
        adjoint,
        control,
        residual_history,
        cost_history,
        stage_history,
        converged,
        cost,
        smp_residual: smp,
        iterate,
    })
}

/// Runs the damped iteration
/// `γ = extract(u, ε_s)`, `μ = forward(γ)`, `ũ = hjb(μ)`, `u ← θũ + (1 − θ)u`
/// from `u⁰ = hjb(forward(g_min))`. The temperature advances to the next
/// stage once the residual drops below `tol`; stages whose relaxed control
/// coincides with the hard one are skipped. Convergence means residual
/// `≤ tol` on the final stage.
pub fn picard_solve(
    spec: &ModelSpec,
    g: &Grid,
    rho0: &[f64],
    opts: &PicardOptions,
) -> Result<FbSolution> {
    opts.validate()?;
    g.check(rho0)?;
    let start = ControlField::constant(spec.g_min(), spec, g)?;
    let mut mu = solve_forward(spec, &start, g, rho0)?;
    let mu_scale = mu.l2_norm();
    let mut u = solve_hjb(spec, &mu, g)?;

    let schedule = &opts.smoothing_schedule;
    let last = schedule.len() - 1;
    let mut stage = 0;
    let mut hist = (Vec::new(), Vec::new(), Vec::new());
    // (stage, residual, iterate)
    let mut best: Option<(usize, f64, AdjointPath)> = None;
    let mut converged = false;

    for _ in 0..opts.max_iters {
        let hard = extract_control(spec, &u, 0.0, g)?;
        while stage < last && extract_control(spec, &u, schedule[stage], g)? == hard {
            stage += 1;
        }
        let eps = schedule[stage];
        let gamma = if eps == 0.0 {
            hard
        } else {
            extract_control(spec, &u, eps, g)?
        };
        let mu_next = solve_forward(spec, &gamma, g, rho0)?;
        let u_tilde = solve_hjb(spec, &mu_next, g)?;
        let u_next = u.blend(&u_tilde, opts.damping)?;
        let residual = relative(u_next.l2_distance(&u), u.l2_norm())
            + relative(mu_next.l2_distance(&mu), mu_scale);
        hist.0.push(residual);
        hist.1.push(path_cost(spec, &mu_next, &gamma)?);
        hist.2.push(eps);
        u = u_next;
        mu = mu_next;

        let better = match &best {
            None => true,
            Some((s, r, _)) => stage > *s || (stage == *s && residual <= *r),
        };
        if better {
            best = Some((stage, residual, u.clone()));
        }
        if residual <= opts.tol {
            if stage == last {
                converged = true;
                break;
            }
            stage += 1;
        }
    }
    let iterate = if converged {
        u
    } else {
        best.map(|(_, _, it)| it).unwrap_or(u)
    };
    finish(spec, g, rho0, iterate, hist, converged)
}

/// One further hard-control sweep from `sol` with damping `θ`.
pub fn picard_sweep(
    spec: &ModelSpec,
    g: &Grid,
    rho0: &[f64],
    sol: &FbSolution,
    damping: f64,
) -> Result<FbSolution> {
    let gamma = extract_control(spec, &sol.iterate, 0.0, g)?;
    let mu = solve_forward(spec, &gamma, g, rho0)?;
    let u_tilde = solve_hjb(spec, &mu, g)?;
    let u = sol.iterate.blend(&u_tilde, damping)?;
    let residual = relative(u.l2_distance(&sol.iterate), sol.iterate.l2_norm())
        + relative(mu.l2_distance(&sol.density), sol.density.l2_norm());
    let mut hist = (
        sol.residual_history.clone(),
        sol.cost_history.clone(),
        sol.stage_history.clone(),
    );
    hist.0.push(residual);
    hist.1.push(path_cost(spec, &mu, &gamma)?);
    hist.2.push(0.0);
    finish(spec, g, rho0, u, hist, sol.converged)
}

/// Nodes of slice `k` where `∂ₓu ≤ −w`, summarised as an interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActiveSlice {
    pub t: f64,
    /// `(a_t, b_t)`: first and last active node, `None` when empty.
    pub bounds: Option<(f64, f64)>,
    /// Whether the active nodes form one contiguous run.
    pub contiguous: bool,
}

/// Active set `{∂ₓu_t ≤ −w}` of every slice of `u` (centred gradients).
pub fn active_set(u: &AdjointPath, w: f64) -> Vec<ActiveSlice> {
    let g = u.grid();
    u.grad_slices()
        .iter()
        .enumerate()
        .map(|(k, d)| {
            let idx: Vec<usize> = (0..d.len()).filter(|&i| d[i] <= -w).collect();
            let contiguous = idx.windows(2).all(|p| p[1] == p[0] + 1);
            ActiveSlice {
                t: g.t(k),
                bounds: match (idx.first(), idx.last()) {
                    (Some(&a), Some(&b)) => Some((g.x(a), g.x(b))),
                    _ => None,
                },
                contiguous,
            }
        })
        .collect()
}

/// CSV with header `t,a_t,b_t`; empty fields mark an empty active set.
pub fn write_active_set_csv<W: Write>(slices: &[ActiveSlice], mut w: W) -> io::Result<()> {
    writeln!(w, "t,a_t,b_t")?;
    for s in slices {
        match s.bounds {
            Some((a, b)) => writeln!(w, "{},{a},{b}", s.t)?,
            None => writeln!(w, "{},,", s.t)?,
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrialKind {
    BangBang,
    Constant,
    LocalFlip,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub kind: TrialKind,
    pub cost: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub base_cost: f64,
    pub trials: Vec<Trial>,
    /// `min(trial − base)`; `None` without trials.
    pub margin: Option<f64>,
}

fn random_trial(
    rng: &mut ChaCha8Rng,
    kind: TrialKind,
    sol: &FbSolution,
    spec: &ModelSpec,
    g: &Grid,
) -> ControlField {
    let (lo, hi) = (spec.g_min(), spec.g_max());
    let (x0, x1) = (g.x_min(), g.x_max());
    let mut box_ = || {
        let a = rng.random_range(x0..x1);
        let b = rng.random_range(a..=x1);
        let s = rng.random_range(0..g.n_t());
        let e = rng.random_range(s..g.n_t()) + 1;
        (a, b, s, e)
    };
    let slices: Vec<Field> = match kind {
        TrialKind::BangBang => {
            let (a, b, s, e) = box_();
            (0..g.n_t())
                .map(|k| g.field_from_fn(|x| if k >= s && k < e && x >= a && x <= b { hi } else { lo }))
                .collect()
        }
        TrialKind::Constant => {
            let c = rng.random_range(lo..=hi);
            vec![g.constant(c); g.n_t()]
        }
        TrialKind::LocalFlip => {
            let width = 0.1 * (x1 - x0);
            let a = rng.random_range(x0..x1 - width);
            let s = rng.random_range(0..g.n_t());
            let e = (s + g.n_t() / 10).min(g.n_t());
            sol.control
                .slices()
                .iter()
                .enumerate()
                .map(|(k, sl)| {
                    Field::new(
                        sl.iter()
                            .zip(g.nodes())
                            .map(|(&v, &x)| {
                                if k >= s && k < e && x >= a && x <= a + width {
                                    lo + hi - v
                                } else {
                                    v
                                }
                            })
                            .collect(),
                    )
                })
                .collect()
        }
    };
    ControlField::new(slices, spec, g).expect("trial controls are admissible")
}

/// Costs of `n_trials` random admissible controls (bang-bang boxes, random
/// constants and local flips of the solution) against `sol.cost`.
pub fn cost_comparison(
    sol: &FbSolution,
    spec: &ModelSpec,
    g: &Grid,
    rho0: &[f64],
    n_trials: usize,
    seed: u64,
) -> Result<ComparisonReport> {
    let kinds = [TrialKind::BangBang, TrialKind::Constant, TrialKind::LocalFlip];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let controls: Vec<(TrialKind, ControlField)> = (0..n_trials)
        .map(|i| {
            let kind = kinds[i % kinds.len()];
            (kind, random_trial(&mut rng, kind, sol, spec, g))
        })
        .collect();
    let trials = controls
        .par_iter()
        .map(|(kind, c)| {
            evaluate_cost(spec, c, g, rho0).map(|cost| Trial { kind: *kind, cost })
        })
        .collect::<Result<Vec<_>>>()?;
    let margin = trials
        .iter()
        .map(|t| t.cost - sol.cost)
        .reduce(f64::min);
    Ok(ComparisonReport {
        base_cost: sol.cost,
        trials,
        margin,
    })
}
