//! Backward solvers: the linear adjoint equation along a frozen control and
//! the semilinear HJB-type equation where the control is minimized out.
//!
//! Each step is the transpose of the forward step: `v = A⁻ᵀ u_{k+1}` (copy
//! ghosts), then explicit zeroth-order, upwind transport, running cost and
//! nonlocal terms, all with coefficients frozen at `t_k`.

use std::io::{self, Write};

use crate::error::{Error, Result};
use crate::forward::{l2_space_time, DensityPath};
use crate::grid::{gradient_fd, Field, Grid};
use crate::model::{ControlField, ModelSpec};
use crate::scheme::{
    check_cfl, implicit_diffusion_backward, one_sided_differences, StepCoeffs,
};

/// Transport data of one backward step: the control-free drift and the
/// one-sided differences of `v = A⁻ᵀ u_{k+1}`.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Transport {
    pub drift0: Vec<f64>,
    pub p_fwd: Vec<f64>,
    pub p_bwd: Vec<f64>,
}

impl Transport {
    fn blend(&self, other: &Transport, theta: f64) -> Transport {
        let mix = |a: &[f64], b: &[f64]| -> Vec<f64> {
            a.iter().zip(b).map(|(x, y)| theta * y + (1.0 - theta) * x).collect()
        };
        Transport {
            drift0: other.drift0.clone(),
            p_fwd: mix(&self.p_fwd, &other.p_fwd),
            p_bwd: mix(&self.p_bwd, &other.p_bwd),
        }
    }
}

/// Adjoint slices `u_{t_k}`, `k = 0..=n_t`, with their centred gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjointPath {
    slices: Vec<Field>,
    grad_slices: Vec<Field>,
    grid: Grid,
    transport: Vec<Transport>,
}

impl AdjointPath {
    /// Wraps raw slices. Paths built this way carry no transport data, so
    /// [`crate::sensitivity::extract_control`] falls back to the centred
    /// gradient of `u_{t_{k+1}}`.
    pub fn new(slices: Vec<Field>, grid: Grid) -> Result<Self> {
        if slices.len() != grid.n_t() + 1 {
            return Err(Error::TimeGridMismatch {
                expected: grid.n_t() + 1,
                found: slices.len(),
            });
        }
        let grad_slices = slices
            .iter()
            .map(|s| gradient_fd(s, &grid))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            slices,
            grad_slices,
            grid,
            transport: Vec::new(),
        })
    }

    pub fn slices(&self) -> &[Field] {
        &self.slices
    }
    pub fn slice(&self, k: usize) -> &Field {
        &self.slices[k]
    }
    pub fn grad_slices(&self) -> &[Field] {
        &self.grad_slices
    }
    pub fn grad(&self, k: usize) -> &Field {
        &self.grad_slices[k]
    }
    pub fn grid(&self) -> &Grid {
        &self.grid
    }
    pub fn terminal(&self) -> &Field {
        &self.slices[self.slices.len() - 1]
    }
    pub(crate) fn transport(&self) -> &[Transport] {
        &self.transport
    }

    pub fn min_value(&self) -> f64 {
        self.slices.iter().map(|s| s.min()).fold(f64::INFINITY, f64::min)
    }
    pub fn max_value(&self) -> f64 {
        self.slices.iter().map(|s| s.max()).fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn l2_norm(&self) -> f64 {
        l2_space_time(&self.slices, &self.grid)
    }

    pub fn l2_distance(&self, other: &AdjointPath) -> f64 {
        let diff: Vec<Field> = self
            .slices
            .iter()
            .zip(&other.slices)
            .map(|(a, b)| a.sub(b))
            .collect();
        l2_space_time(&diff, &self.grid)
    }

    pub fn max_abs_difference(&self, other: &AdjointPath) -> f64 {
        self.slices
            .iter()
            .zip(&other.slices)
            .flat_map(|(a, b)| a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max)
    }

    /// `θ·other + (1 − θ)·self`, slice by slice. Drift data is taken from
    /// `other`.
    pub(crate) fn blend(&self, other: &AdjointPath, theta: f64) -> Result<AdjointPath> {
        let slices: Vec<Field> = self
            .slices
            .iter()
            .zip(&other.slices)
            .map(|(a, b)| {
                Field::new(a.iter().zip(b.iter()).map(|(x, y)| theta * y + (1.0 - theta) * x).collect())
            })
            .collect();
        let mut out = AdjointPath::new(slices, self.grid.clone())?;
        if self.transport.len() == other.transport.len() {
            out.transport = self
                .transport
                .iter()
                .zip(&other.transport)
                .map(|(a, b)| a.blend(b, theta))
                .collect();
        }
        Ok(out)
    }

    /// CSV with header `t,x,u,du_dx`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "t,x,u,du_dx")?;
        for (k, (s, d)) in self.slices.iter().zip(&self.grad_slices).enumerate() {
            let t = self.grid.t(k);
            for (i, x) in self.grid.nodes().iter().enumerate() {
                writeln!(w, "{t},{x},{},{}", s[i], d[i])?;
            }
        }
        Ok(())
    }
}

/// Upwind transport `b⁺p_f + b⁻p_b`.
pub(crate) fn transport_term(b: f64, p_fwd: f64, p_bwd: f64) -> f64 {
    b.max(0.0) * p_fwd + b.min(0.0) * p_bwd
}

/// Upwind difference selected by the sign of `b`.
pub(crate) fn upwind_difference(b: f64, p_fwd: f64, p_bwd: f64) -> f64 {
    if b >= 0.0 {
        p_fwd
    } else {
        p_bwd
    }
}

/// Discrete Hamiltonian `g ↦ (b₀ + slope·g)⁺p_f + (b₀ + slope·g)⁻p_b + f₁(g)`.
pub(crate) struct NodeHamiltonian<'a> {
    pub spec: &'a ModelSpec,
    pub t: f64,
    pub x: f64,
    pub drift0: f64,
    pub slope: f64,
    pub p_fwd: f64,
    pub p_bwd: f64,
}

impl NodeHamiltonian<'_> {
    pub fn value(&self, g: f64) -> f64 {
        transport_term(self.drift0 + self.slope * g, self.p_fwd, self.p_bwd)
            + self.spec.run_cost1(self.t, self.x, g)
    }

    /// Minimizer over the control set; each sign piece of the drift is
    /// convex and minimized separately. Ties go to the larger control.
    pub fn argmin(&self) -> f64 {
        let (lo, hi) = (self.spec.g_min(), self.spec.g_max());
        if self.slope == 0.0 {
            return self.spec.minimize_h1_on(self.t, self.x, 0.0, lo, hi);
        }
        let g0 = -self.drift0 / self.slope;
        // (interval, difference) for the b ≥ 0 and b ≤ 0 pieces
        let (pos, neg) = if self.slope > 0.0 {
            ((g0.max(lo), hi), (lo, g0.min(hi)))
        } else {
            ((lo, g0.min(hi)), (g0.max(lo), hi))
        };
        let mut best: Option<(f64, f64)> = None;
        for ((a, b), p) in [(pos, self.p_fwd), (neg, self.p_bwd)] {
            if a > b {
                continue;
            }
            let g = self.spec.minimize_h1_on(self.t, self.x, p, a, b);
            let v = self.value(g);
            best = match best {
                Some((bg, bv)) if bv < v || (bv == v && bg >= g) => Some((bg, bv)),
                _ => Some((g, v)),
            };
        }
        best.map_or(lo, |(g, _)| g)
    }

    /// Softmin blend of the two extreme controls with temperature `eps`.
    pub fn relaxed(&self, eps: f64) -> f64 {
        let (lo, hi) = (self.spec.g_min(), self.spec.g_max());
        if hi == lo {
            return lo;
        }
        let z = -(self.value(hi) - self.value(lo)) / ((hi - lo) * eps);
        lo + (hi - lo) * sigmoid(z)
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Explicit part of a backward step, given `v` and the control slice.
#[allow(clippy::too_many_arguments)]
fn explicit_backward(
    spec: &ModelSpec,
    coeffs: &StepCoeffs,
    mu: &[f64],
    v: &[f64],
    p_fwd: &[f64],
    p_bwd: &[f64],
    gamma: &[f64],
    g: &Grid,
    step: usize,
) -> Result<Field> {
    let (dt, dx, t) = (g.dt(), g.dx(), coeffs.t);
    let b = coeffs.drift(gamma);
    check_cfl(&b, g, step)?;
    let nodes = g.nodes();
    let s = &coeffs.summaries;
    let n_s = spec.n_summaries();
    let mut nonlocal = vec![0.0; n_s];
    for (j, c) in nonlocal.iter_mut().enumerate() {
        let mut acc = 0.0;
        for i in 0..mu.len() {
            let x = nodes[i];
            acc += mu[i]
                * (v[i] * spec.lambda_partial(t, x, s, j)
                    + upwind_difference(b[i], p_fwd[i], p_bwd[i]) * spec.drift0_partial(t, x, s, j)
                    + spec.run_cost0_partial(t, x, s, j));
        }
        *c = acc * dx;
    }
    let u = (0..v.len())
        .map(|i| {
            let x = nodes[i];
            let mut rhs = coeffs.lambda[i] * v[i]
                + transport_term(b[i], p_fwd[i], p_bwd[i])
                + spec.run_cost0(t, x, s)
                + spec.run_cost1(t, x, gamma[i]);
            for (j, c) in nonlocal.iter().enumerate() {
                rhs += spec.summary_test(j, t, x) * c;
            }
            v[i] + dt * rhs
        })
        .collect();
    Ok(Field::new(u))
}

fn implicit_part(coeffs: &StepCoeffs, u_next: &[f64], g: &Grid) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let mut v = u_next.to_vec();
    implicit_diffusion_backward(&coeffs.diffusion, &mut v, g)?;
    let (pf, pb) = one_sided_differences(&v, g.dx());
    Ok((v, pf, pb))
}

/// One backward step from `t + dt` to `t` along a given control slice.
pub fn step_backward(
    u_next: &[f64],
    spec: &ModelSpec,
    mu_slice: &[f64],
    gamma_slice: &[f64],
    t: f64,
    g: &Grid,
) -> Result<Field> {
    g.check(u_next)?;
    g.check(mu_slice)?;
    g.check(gamma_slice)?;
    let coeffs = StepCoeffs::new(spec, t, mu_slice, g);
    let (v, pf, pb) = implicit_part(&coeffs, u_next, g)?;
    explicit_backward(spec, &coeffs, mu_slice, &v, &pf, &pb, gamma_slice, g, 0)
}

fn terminal_slice(spec: &ModelSpec, mu: &DensityPath, g: &Grid) -> Field {
    let s = spec.terminal_summaries(mu.terminal(), g);
    g.field_from_fn(|x| spec.terminal_density_derivative(x, &s))
}

fn check_path(mu: &DensityPath, g: &Grid) -> Result<()> {
    if mu.slices().len() != g.n_t() + 1 {
        return Err(Error::TimeGridMismatch {
            expected: g.n_t() + 1,
            found: mu.slices().len(),
        });
    }
    mu.slices().iter().try_for_each(|s| g.check(s))
}

fn backward_sweep(
    spec: &ModelSpec,
    mu: &DensityPath,
    g: &Grid,
    mut choose: impl FnMut(usize, &StepCoeffs, &[f64], &[f64]) -> Vec<f64>,
) -> Result<AdjointPath> {
    check_path(mu, g)?;
    let n_t = g.n_t();
    let mut slices = vec![Field::zeros(0); n_t + 1];
    let mut transport = Vec::with_capacity(n_t);
    slices[n_t] = terminal_slice(spec, mu, g);
    for k in (0..n_t).rev() {
        let coeffs = StepCoeffs::new(spec, g.t(k), mu.slice(k), g);
        let (v, pf, pb) = implicit_part(&coeffs, &slices[k + 1], g)?;
        let gamma = choose(k, &coeffs, &pf, &pb);
        slices[k] = explicit_backward(spec, &coeffs, mu.slice(k), &v, &pf, &pb, &gamma, g, k)?;
        transport.push(Transport {
            drift0: coeffs.drift0,
            p_fwd: pf,
            p_bwd: pb,
        });
    }
    transport.reverse();
    let mut path = AdjointPath::new(slices, g.clone())?;
    path.transport = transport;
    Ok(path)
}

/// Linear adjoint along `gamma` with terminal condition `Dψ(μ_T)`.
pub fn solve_adjoint(
    spec: &ModelSpec,
    mu: &DensityPath,
    gamma: &ControlField,
    g: &Grid,
) -> Result<AdjointPath> {
    gamma.check(g)?;
    backward_sweep(spec, mu, g, |k, _, _, _| gamma.slice(k).to_vec())
}

/// Semilinear backward equation with `γ` chosen node by node as the
/// minimizer of the discrete Hamiltonian on the current step.
pub fn solve_hjb(spec: &ModelSpec, mu: &DensityPath, g: &Grid) -> Result<AdjointPath> {
    let nodes = g.nodes().to_vec();
    backward_sweep(spec, mu, g, |_, c, pf, pb| {
        (0..nodes.len())
            .map(|i| {
                NodeHamiltonian {
                    spec,
                    t: c.t,
                    x: nodes[i],
                    drift0: c.drift0[i],
                    slope: c.slope[i],
                    p_fwd: pf[i],
                    p_bwd: pb[i],
                }
                .argmin()
            })
            .collect()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::solve_forward;
    use crate::model::{bailout_model, BailoutParams, Nonlocal, TerminalCost};
    use std::sync::Arc;

    fn zero_spec() -> ModelSpec {
        ModelSpec::builder().diffusion(1e-12, |_, _| 0.0).build().unwrap()
    }

    #[test]
    fn zero_model_leaves_u() {
        let g = Grid::new(-1.0, 1.0, 30, 1.0, 10, 0.1).unwrap();
        let u_next = g.field_from_fn(|x| x.sin());
        let u = step_backward(&u_next, &zero_spec(), &g.constant(1.0), &g.zeros(), 0.0, &g).unwrap();
        assert_eq!(u, u_next);
    }

    #[test]
    fn constants_are_harmonic() {
        let g = Grid::new(-1.0, 1.0, 30, 1.0, 10, 0.1).unwrap();
        let spec = ModelSpec::builder().diffusion(0.4, |_, x| 0.4 + 0.1 * x).build().unwrap();
        let u = step_backward(&g.constant(-1.0), &spec, &g.constant(1.0), &g.zeros(), 0.0, &g).unwrap();
        assert!(u.iter().all(|v| (v + 1.0).abs() < 1e-14));
    }

    #[test]
    fn backward_heat_kernel() {
        let g = Grid::new(-6.0, 6.0, 400, 0.5, 500, 0.1).unwrap();
        let (sigma, s0) = (0.5f64, 0.4f64);
        let spec = ModelSpec::builder()
            .diffusion(0.125, move |_, _| 0.5 * sigma * sigma)
            .terminal(TerminalCost::new(
                vec![Arc::new(move |x| gauss(x, s0 * s0))],
                Arc::new(|s| s[0]),
                Arc::new(|_, _| 1.0),
            ))
            .build()
            .unwrap();
        let rho0 = g.constant(0.0);
        let zero = ControlField::constant(0.0, &spec, &g).unwrap();
        let mu = solve_forward(&spec, &zero, &g, &rho0).unwrap();
        let u = solve_adjoint(&spec, &mu, &zero, &g).unwrap();
        let var = s0 * s0 + sigma * sigma * g.t_horizon();
        let err = u
            .slice(0)
            .iter()
            .zip(g.nodes())
            .map(|(v, &x)| (v - gauss(x, var)).abs())
            .fold(0.0, f64::max);
        assert!(err <= 1e-3, "sup error {err}");
    }

    fn gauss(x: f64, var: f64) -> f64 {
        (-x * x / (2.0 * var)).exp() / (2.0 * std::f64::consts::PI * var).sqrt()
    }

    fn baseline(kappa: f64) -> (Grid, BailoutParams, ModelSpec) {
        let g = Grid::new(-4.0, 6.0, 100, 1.0, 100, 0.1).unwrap();
        let p = BailoutParams {
            kappa,
            ..Default::default()
        };
        let spec = bailout_model(&p).unwrap();
        (g, p, spec)
    }

    #[test]
    fn bailout_terminal_and_bounds() {
        let (g, p, spec) = baseline(0.0);
        let zero = ControlField::constant(0.0, &spec, &g).unwrap();
        let mu = solve_forward(&spec, &zero, &g, &p.initial_density(&g)).unwrap();
        let u = solve_adjoint(&spec, &mu, &zero, &g).unwrap();
        assert!(u.terminal().iter().all(|&v| v == -1.0));
        let tol = 1e-6 + 10.0 * g.dt();
        assert!(u.min_value() >= -1.0 - tol && u.max_value() <= tol);
        assert!(u.grad_slices().iter().all(|d| d.iter().all(|&v| v <= tol)));
    }

    #[test]
    fn large_weight_matches_uncontrolled() {
        let (g, p, _) = baseline(0.0);
        let q = BailoutParams { w_weight: 1e3, ..p };
        let spec = bailout_model(&q).unwrap();
        let zero = ControlField::constant(0.0, &spec, &g).unwrap();
        let mu = solve_forward(&spec, &zero, &g, &q.initial_density(&g)).unwrap();
        let a = solve_adjoint(&spec, &mu, &zero, &g).unwrap();
        let h = solve_hjb(&spec, &mu, &g).unwrap();
        assert!(a.max_abs_difference(&h) <= 1e-10);
    }

    #[test]
    fn degenerate_control_set_matches_exactly() {
        let (g, p, _) = baseline(1.0);
        let q = BailoutParams { g_max: 0.0, ..p };
        let spec = crate::model::bailout_model_unchecked(&q).unwrap();
        let zero = ControlField::constant(0.0, &spec, &g).unwrap();
        let mu = solve_forward(&spec, &zero, &g, &q.initial_density(&g)).unwrap();
        let a = solve_adjoint(&spec, &mu, &zero, &g).unwrap();
        let h = solve_hjb(&spec, &mu, &g).unwrap();
        assert_eq!(a.slices(), h.slices());
    }

    #[test]
    fn node_hamiltonian_argmin_beats_grid_search() {
        let spec = ModelSpec::builder()
            .drift1_slope(|_, x| if x > 0.0 { 1.5 } else { -0.7 })
            .run_cost1(|_, _, g| 0.3 * g * g, |_, _, g| 0.6 * g, false)
            .controls(-1.0, 2.0)
            .build()
            .unwrap();
        for (x, b0, pf, pb) in [
            (1.0, 0.4, -1.0, 2.0),
            (-1.0, 0.2, 0.5, -3.0),
            (1.0, -1.0, -2.0, 0.1),
            (-1.0, -0.5, 1.0, 1.0),
            (1.0, 0.0, 0.0, 0.0),
        ] {
            let h = NodeHamiltonian {
                spec: &spec,
                t: 0.0,
                x,
                drift0: b0,
                slope: spec.drift1_slope(0.0, x),
                p_fwd: pf,
                p_bwd: pb,
            };
            let g = h.argmin();
            let best = (0..=3000)
                .map(|k| h.value(-1.0 + 3.0 * k as f64 / 3000.0))
                .fold(f64::INFINITY, f64::min);
            assert!(h.value(g) <= best + 1e-9);
        }
    }

    #[test]
    fn nonlocal_terms_match_perturbation() {
        // u_k(x_i) is the derivative of the cost-to-go with respect to ρ_k(x_i)
        // nodes well inside the domain, where copy ghosts are invisible
        let g = Grid::new(-5.0, 6.0, 60, 0.2, 10, 0.1).unwrap();
        let p = BailoutParams {
            kappa: 1.0,
            ..Default::default()
        };
        let spec = bailout_model(&p).unwrap();
        let gamma = ControlField::from_fn(&spec, &g, |_, x| 0.5 + 0.4 * (x * 0.7).sin()).unwrap();
        let rho0 = p.initial_density(&g);
        let mu = solve_forward(&spec, &gamma, &g, &rho0).unwrap();
        let u = solve_adjoint(&spec, &mu, &gamma, &g).unwrap();
        let j0 = crate::forward::evaluate_cost(&spec, &gamma, &g, &rho0).unwrap();
        for i in [20, 27, 35] {
            let eps = 1e-6;
            let mut r = rho0.clone();
            r[i] += eps / g.dx();
            let j1 = crate::forward::evaluate_cost(&spec, &gamma, &g, &r).unwrap();
            let fd = (j1 - j0) / eps;
            assert!((fd - u.slice(0)[i]).abs() < 1e-6, "node {i}: {fd} vs {}", u.slice(0)[i]);
        }
    }

    #[test]
    fn csv_header() {
        let g = Grid::new(0.0, 1.0, 3, 1.0, 1, 0.1).unwrap();
        let u = AdjointPath::new(vec![g.constant(1.0), g.constant(-1.0)], g).unwrap();
        let mut buf = Vec::new();
        u.write_csv(&mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("t,x,u,du_dx\n0,0.25,1,0\n"));
    }

    #[test]
    fn cfl_reported() {
        let g = Grid::new(-1.0, 1.0, 20, 1.0, 2, 0.1).unwrap();
        let spec = ModelSpec::builder()
            .drift0(Nonlocal::local(|_, _| 10.0))
            .build()
            .unwrap();
        assert!(matches!(
            step_backward(&g.zeros(), &spec, &g.zeros(), &g.zeros(), 0.0, &g),
            Err(Error::CflViolation { .. })
        ));
    }
}
