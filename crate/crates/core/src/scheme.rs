//! Discrete operators shared by the forward, backward and variation solvers.
//!
//! One forward step from `t_k` is
//! `ρ⁺ = A⁻¹ [ρ + dt (λ ρ − Div_b ρ)]` with `A = I − dt D₂ diag(a)`
//! (Dirichlet) and `Div_b` the donor-cell divergence with node velocities.
//! The backward step applies the transpose of the same operators, with
//! copy (Neumann) ghosts for the adjoint at both ends.

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::model::ModelSpec;

/// Coefficients frozen at the start of a step.
#[derive(Debug, Clone)]
pub(crate) struct StepCoeffs {
    pub t: f64,
    pub summaries: Vec<f64>,
    /// `b₀(t, x_i, s)` without the control contribution.
    pub drift0: Vec<f64>,
    pub slope: Vec<f64>,
    pub lambda: Vec<f64>,
    pub diffusion: Vec<f64>,
}

impl StepCoeffs {
    pub fn new(spec: &ModelSpec, t: f64, mu: &[f64], g: &Grid) -> Self {
        let summaries = spec.summaries(t, mu, g);
        let nodes = g.nodes();
        Self {
            t,
            drift0: nodes.iter().map(|&x| spec.drift0(t, x, &summaries)).collect(),
            slope: nodes.iter().map(|&x| spec.drift1_slope(t, x)).collect(),
            lambda: nodes.iter().map(|&x| spec.lambda_coeff(t, x, &summaries)).collect(),
            diffusion: nodes.iter().map(|&x| spec.total_diffusion(t, x)).collect(),
            summaries,
        }
    }

    pub fn drift(&self, gamma: &[f64]) -> Vec<f64> {
        self.drift0
            .iter()
            .zip(&self.slope)
            .zip(gamma)
            .map(|((b0, s), g)| b0 + s * g)
            .collect()
    }
}

pub(crate) fn check_cfl(b: &[f64], g: &Grid, step: usize) -> Result<f64> {
    let bmax = b.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let courant = g.dt() * bmax / g.dx();
    if !(courant <= 1.0) {
        return Err(Error::CflViolation { step, courant });
    }
    Ok(courant)
}

/// Donor-cell fluxes on the `n + 1` cell edges, Dirichlet zero outside.
/// Edge `e` sits between nodes `e − 1` and `e`.
pub(crate) fn upwind_fluxes(b: &[f64], rho: &[f64]) -> Vec<f64> {
    let n = rho.len();
    let mut flux = vec![0.0; n + 1];
    for (e, f) in flux.iter_mut().enumerate() {
        let mut v = 0.0;
        if e > 0 {
            v += b[e - 1].max(0.0) * rho[e - 1];
        }
        if e < n {
            v += b[e].min(0.0) * rho[e];
        }
        *f = v;
    }
    flux
}

/// Flux perturbation for a velocity perturbation `db` around `b`, using the
/// one-sided derivative of `b⁺`, `b⁻` in the direction of `db` where `b = 0`.
pub(crate) fn upwind_flux_variation(b: &[f64], db: &[f64], rho: &[f64]) -> Vec<f64> {
    let n = rho.len();
    let mut flux = vec![0.0; n + 1];
    for (e, f) in flux.iter_mut().enumerate() {
        let mut v = 0.0;
        if e > 0 && positive_branch(b[e - 1], db[e - 1]) {
            v += db[e - 1] * rho[e - 1];
        }
        if e < n && !positive_branch(b[e], db[e]) {
            v += db[e] * rho[e];
        }
        *f = v;
    }
    flux
}

/// Whether a velocity `b` moved by `db` sits on the `b ≥ 0` branch.
pub(crate) fn positive_branch(b: f64, db: f64) -> bool {
    b > 0.0 || (b == 0.0 && db >= 0.0)
}

/// Forward and backward differences of `v` with copy ghosts.
pub(crate) fn one_sided_differences(v: &[f64], dx: f64) -> (Vec<f64>, Vec<f64>) {
    let n = v.len();
    let fwd = (0..n)
        .map(|i| if i + 1 < n { (v[i + 1] - v[i]) / dx } else { 0.0 })
        .collect();
    let bwd = (0..n)
        .map(|i| if i > 0 { (v[i] - v[i - 1]) / dx } else { 0.0 })
        .collect();
    (fwd, bwd)
}

/// Solves a tridiagonal system in place with the Thomas algorithm.
/// `lower[0]` and `upper[n-1]` are ignored.
pub(crate) fn solve_tridiagonal(
    lower: &[f64],
    diag: &[f64],
    upper: &[f64],
    rhs: &mut [f64],
) -> Result<()> {
    let n = rhs.len();
    let mut c = vec![0.0; n];
    let mut piv = diag[0];
    if piv == 0.0 || !piv.is_finite() {
        return Err(Error::SingularTridiagonal { row: 0 });
    }
    c[0] = upper[0] / piv;
    rhs[0] /= piv;
    for i in 1..n {
        piv = diag[i] - lower[i] * c[i - 1];
        if piv == 0.0 || !piv.is_finite() {
            return Err(Error::SingularTridiagonal { row: i });
        }
        if i + 1 < n {
            c[i] = upper[i] / piv;
        }
        rhs[i] = (rhs[i] - lower[i] * rhs[i - 1]) / piv;
    }
    for i in (0..n - 1).rev() {
        rhs[i] -= c[i] * rhs[i + 1];
    }
    Ok(())
}

/// Solves `(I − dt D₂ diag(a)) y = rhs` with zero Dirichlet ghosts.
pub(crate) fn implicit_diffusion_forward(a: &[f64], rhs: &mut [f64], g: &Grid) -> Result<()> {
    let r = g.dt() / (g.dx() * g.dx());
    let n = rhs.len();
    let lower: Vec<f64> = (0..n).map(|i| if i > 0 { -r * a[i - 1] } else { 0.0 }).collect();
    let upper: Vec<f64> = (0..n).map(|i| if i + 1 < n { -r * a[i + 1] } else { 0.0 }).collect();
    let diag: Vec<f64> = a.iter().map(|ai| 1.0 + 2.0 * r * ai).collect();
    solve_tridiagonal(&lower, &diag, &upper, rhs)
}

/// Solves `(I − dt diag(a) D₂) v = rhs` with copy ghosts at both ends.
pub(crate) fn implicit_diffusion_backward(a: &[f64], rhs: &mut [f64], g: &Grid) -> Result<()> {
    let r = g.dt() / (g.dx() * g.dx());
    let n = rhs.len();
    let lower: Vec<f64> = a.iter().map(|ai| -r * ai).collect();
    let upper = lower.clone();
    let mut diag: Vec<f64> = a.iter().map(|ai| 1.0 + 2.0 * r * ai).collect();
    diag[0] -= r * a[0];
    diag[n - 1] -= r * a[n - 1];
    solve_tridiagonal(&lower, &diag, &upper, rhs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn thomas_matches_dense() {
        let lower = [0.0, -1.0, -0.5, -2.0];
        let diag = [4.0, 5.0, 3.0, 6.0];
        let upper = [-1.0, 0.3, -1.0, 0.0];
        let x = [1.0, -2.0, 0.5, 3.0];
        let mut rhs: Vec<f64> = (0..4)
            .map(|i| {
                let mut v = diag[i] * x[i];
                if i > 0 {
                    v += lower[i] * x[i - 1];
                }
                if i < 3 {
                    v += upper[i] * x[i + 1];
                }
                v
            })
            .collect();
        solve_tridiagonal(&lower, &diag, &upper, &mut rhs).unwrap();
        for i in 0..4 {
            assert!((rhs[i] - x[i]).abs() < 1e-13);
        }
    }

    #[test]
    fn thomas_reports_singular() {
        let mut rhs = vec![1.0, 1.0];
        let err = solve_tridiagonal(&[0.0, 1.0], &[1.0, 1.0], &[1.0, 0.0], &mut rhs).unwrap_err();
        assert_eq!(err, Error::SingularTridiagonal { row: 1 });
    }

    #[test]
    fn fluxes_vanish_at_inflow_ends() {
        let b = [1.0, -1.0, 2.0];
        let rho = [1.0, 1.0, 1.0];
        let f = upwind_fluxes(&b, &rho);
        assert_eq!(f, vec![0.0, 1.0 - 1.0, 0.0 + 0.0, 2.0]);
    }

    #[test]
    fn backward_diffusion_preserves_constants() {
        let g = Grid::new(0.0, 1.0, 20, 1.0, 10, 0.0).unwrap();
        let a = vec![0.3; 20];
        let mut v = vec![-1.0; 20];
        implicit_diffusion_backward(&a, &mut v, &g).unwrap();
        assert!(v.iter().all(|x| (x + 1.0).abs() < 1e-14));
    }
}
