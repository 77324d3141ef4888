//! Space-time mesh, grid fields, weighted L² machinery and the bounded
//! Lipschitz (flat) distance between grid measures.
//!
//! The real line is truncated to `[x_min, x_max]` with `n_x` interior nodes
//! and homogeneous Dirichlet ghosts at both ends. Densities are node values;
//! the measure they induce is `Σ v_i δ_{x_i} dx`.

use std::ops::{Deref, DerefMut};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Number of nodes at each end used by the boundary-mass diagnostic.
pub const BOUNDARY_WIDTH: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    x_min: f64,
    x_max: f64,
    n_x: usize,
    dx: f64,
    t_horizon: f64,
    n_t: usize,
    dt: f64,
    eta0: f64,
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl Grid {
    pub fn new(
        x_min: f64,
        x_max: f64,
        n_x: usize,
        t_horizon: f64,
        n_t: usize,
        eta0: f64,
    ) -> Result<Self> {
        if !(x_min.is_finite() && x_max.is_finite() && x_min < x_max) {
            return Err(Error::InvalidArgument(format!(
                "x_min ({x_min}) must be below x_max ({x_max})"
            )));
        }
        if n_x < 3 {
            return Err(Error::InvalidArgument(format!("n_x must be >= 3, got {n_x}")));
        }
        if n_t < 1 {
            return Err(Error::InvalidArgument("n_t must be >= 1".into()));
        }
        if !(t_horizon.is_finite() && t_horizon > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "t_horizon must be positive, got {t_horizon}"
            )));
        }
        if !(eta0.is_finite() && eta0 >= 0.0) {
            return Err(Error::InvalidArgument(format!("eta0 must be >= 0, got {eta0}")));
        }
        let dx = (x_max - x_min) / (n_x as f64 + 1.0);
        let dt = t_horizon / n_t as f64;
        let nodes: Vec<f64> = (1..=n_x).map(|i| x_min + i as f64 * dx).collect();
        let weights = nodes.iter().map(|&x| eta(eta0, x).exp()).collect();
        Ok(Self {
            x_min,
            x_max,
            n_x,
            dx,
            t_horizon,
            n_t,
            dt,
            eta0,
            nodes,
            weights,
        })
    }

    pub fn x_min(&self) -> f64 {
        self.x_min
    }
    pub fn x_max(&self) -> f64 {
        self.x_max
    }
    pub fn n_x(&self) -> usize {
        self.n_x
    }
    pub fn dx(&self) -> f64 {
        self.dx
    }
    pub fn t_horizon(&self) -> f64 {
        self.t_horizon
    }
    pub fn n_t(&self) -> usize {
        self.n_t
    }
    pub fn dt(&self) -> f64 {
        self.dt
    }
    pub fn eta0(&self) -> f64 {
        self.eta0
    }

    /// Interior node coordinates, strictly increasing.
    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn x(&self, i: usize) -> f64 {
        self.nodes[i]
    }

    /// Weight values `exp(η₀ √(1 + x_i²))`.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn t(&self, k: usize) -> f64 {
        k as f64 * self.dt
    }

    pub fn times(&self) -> Vec<f64> {
        (0..=self.n_t).map(|k| self.t(k)).collect()
    }

    /// Same spatial mesh, different time discretization.
    pub fn with_time(&self, t_horizon: f64, n_t: usize) -> Result<Self> {
        Self::new(self.x_min, self.x_max, self.n_x, t_horizon, n_t, self.eta0)
    }

    pub fn zeros(&self) -> Field {
        Field::zeros(self.n_x)
    }

    pub fn constant(&self, value: f64) -> Field {
        Field::new(vec![value; self.n_x])
    }

    pub fn field_from_fn(&self, f: impl Fn(f64) -> f64) -> Field {
        Field::new(self.nodes.iter().map(|&x| f(x)).collect())
    }

    pub fn check(&self, f: &[f64]) -> Result<()> {
        if f.len() != self.n_x {
            return Err(Error::DimensionMismatch {
                expected: self.n_x,
                found: f.len(),
            });
        }
        Ok(())
    }

    /// Index of the node nearest to `x`, clamped to the grid.
    pub fn nearest_node(&self, x: f64) -> usize {
        let r = ((x - self.x_min) / self.dx).round() as i64 - 1;
        r.clamp(0, self.n_x as i64 - 1) as usize
    }

    /// Linear interpolation of node values at `x`, with the Dirichlet zero
    /// ghosts outside `[x_1, x_n]` replaced by the end values (clamped).
    pub fn interpolate(&self, f: &[f64], x: f64) -> f64 {
        let s = (x - self.nodes[0]) / self.dx;
        if s <= 0.0 {
            return f[0];
        }
        let last = self.n_x - 1;
        if s >= last as f64 {
            return f[last];
        }
        let i = s.floor() as usize;
        let theta = s - i as f64;
        (1.0 - theta) * f[i] + theta * f[i + 1]
    }
}

fn eta(eta0: f64, x: f64) -> f64 {
    eta0 * (1.0 + x * x).sqrt()
}

/// Node values of a function or density on a [`Grid`].
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Field(Vec<f64>);

impl Field {
    pub fn new(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn zeros(n: usize) -> Self {
        Self(vec![0.0; n])
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn max(&self) -> f64 {
        self.0.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.0.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// `self - other`, elementwise.
    pub fn sub(&self, other: &Field) -> Field {
        Field(self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect())
    }

    pub fn scale(&self, c: f64) -> Field {
        Field(self.0.iter().map(|a| c * a).collect())
    }
}

impl Deref for Field {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for Field {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

impl From<Vec<f64>> for Field {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

/// Sampled Brownian path `W_{t_k}`, `k = 0..=n_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisePath {
    values: Vec<f64>,
    seed: u64,
    dt: f64,
}

impl NoisePath {
    /// A path from explicit samples; `values[0]` must be zero.
    pub fn from_values(values: Vec<f64>, dt: f64, seed: u64) -> Result<Self> {
        if values.first().copied() != Some(0.0) {
            return Err(Error::InvalidArgument("noise path must start at 0".into()));
        }
        if !(dt > 0.0) {
            return Err(Error::InvalidArgument("noise path dt must be positive".into()));
        }
        Ok(Self { values, seed, dt })
    }

    pub fn zero(g: &Grid) -> Self {
        Self {
            values: vec![0.0; g.n_t() + 1],
            seed: 0,
            dt: g.dt(),
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
    pub fn seed(&self) -> u64 {
        self.seed
    }
    pub fn dt(&self) -> f64 {
        self.dt
    }
    pub fn n_t(&self) -> usize {
        self.values.len() - 1
    }

    /// `W_t` by linear interpolation between samples, held constant past the end.
    pub fn at(&self, t: f64) -> f64 {
        let s = t / self.dt;
        if s <= 0.0 {
            return self.values[0];
        }
        let last = self.values.len() - 1;
        if s >= last as f64 {
            return self.values[last];
        }
        let k = s.floor() as usize;
        let theta = s - k as f64;
        if theta == 0.0 {
            return self.values[k];
        }
        (1.0 - theta) * self.values[k] + theta * self.values[k + 1]
    }

    pub fn negated(&self) -> Self {
        Self {
            values: self.values.iter().map(|w| -w).collect(),
            seed: self.seed,
            dt: self.dt,
        }
    }

    pub fn check(&self, g: &Grid) -> Result<()> {
        if self.n_t() != g.n_t() || (self.dt - g.dt()).abs() > 1e-12 * g.dt() {
            return Err(Error::TimeGridMismatch {
                expected: g.n_t(),
                found: self.n_t(),
            });
        }
        Ok(())
    }
}

pub fn make_grid(
    x_min: f64,
    x_max: f64,
    n_x: usize,
    t_horizon: f64,
    n_t: usize,
    eta0: f64,
) -> Result<Grid> {
    Grid::new(x_min, x_max, n_x, t_horizon, n_t, eta0)
}

/// Discrete `‖f‖_η = (Σ f_i² e^{η(x_i)} dx)^{1/2}`.
pub fn weighted_norm(f: &[f64], g: &Grid) -> Result<f64> {
    g.check(f)?;
    let s: f64 = f
        .iter()
        .zip(g.weights())
        .map(|(v, w)| v * v * w)
        .sum();
    Ok((s * g.dx()).sqrt())
}

/// Discrete duality `⟨v, φ⟩ = Σ v_i φ_i dx`.
pub fn pair(v: &[f64], phi: &[f64], g: &Grid) -> Result<f64> {
    g.check(v)?;
    g.check(phi)?;
    Ok(pair_unchecked(v, phi, g.dx()))
}

pub(crate) fn pair_unchecked(v: &[f64], phi: &[f64], dx: f64) -> f64 {
    v.iter().zip(phi).map(|(a, b)| a * b).sum::<f64>() * dx
}

/// Total mass `⟨v, 1⟩`.
pub fn mass(v: &[f64], g: &Grid) -> f64 {
    v.iter().sum::<f64>() * g.dx()
}

/// Central differences at interior nodes, one-sided at the two extreme nodes.
pub fn gradient_fd(f: &[f64], g: &Grid) -> Result<Field> {
    g.check(f)?;
    let n = f.len();
    let h = g.dx();
    let mut out = vec![0.0; n];
    out[0] = (f[1] - f[0]) / h;
    out[n - 1] = (f[n - 1] - f[n - 2]) / h;
    for i in 1..n - 1 {
        out[i] = (f[i + 1] - f[i - 1]) / (2.0 * h);
    }
    Ok(Field(out))
}

/// `‖e^{-η/2}‖` on the grid, the constant linking the flat distance to the
/// weighted norm.
pub fn inverse_weight_norm(g: &Grid) -> f64 {
    (g.weights().iter().map(|w| 1.0 / w).sum::<f64>() * g.dx()).sqrt()
}

/// Mass within [`BOUNDARY_WIDTH`] nodes of the left and right ends.
pub fn boundary_mass(v: &[f64], g: &Grid) -> (f64, f64) {
    let k = BOUNDARY_WIDTH.min(v.len());
    let left = v[..k].iter().map(|x| x.abs()).sum::<f64>() * g.dx();
    let right = v[v.len() - k..].iter().map(|x| x.abs()).sum::<f64>() * g.dx();
    (left, right)
}

/// Bounded Lipschitz distance between two nonnegative grid measures.
///
/// Solves `max Σ φ_i (v1_i − v2_i) dx` over `|φ_i| ≤ 1`,
/// `|φ_{i+1} − φ_i| ≤ dx` exactly by dynamic programming over the node
/// chain. The value function of the prefix problem is concave and piecewise
/// linear in the last node value, so each step is a window-max (dilation by
/// `dx`) followed by adding a linear term.
pub fn flat_distance(v1: &[f64], v2: &[f64], g: &Grid) -> Result<f64> {
    g.check(v1)?;
    g.check(v2)?;
    for v in [v1, v2] {
        if let Some((index, &value)) = v.iter().enumerate().find(|(_, &x)| x < 0.0) {
            return Err(Error::NegativeInput { index, value });
        }
    }
    let diff: Vec<f64> = v1.iter().zip(v2).map(|(a, b)| a - b).collect();
    Ok(flat_norm(&diff, g.dx()))
}

/// Flat norm of a signed grid measure with node spacing `dx`.
pub(crate) fn flat_norm(diff: &[f64], dx: f64) -> f64 {
    let mut value = ConcavePl::linear(diff[0] * dx);
    for &d in &diff[1..] {
        value = value.dilate(dx);
        value.add_linear(d * dx);
    }
    value.max_value()
}

/// Concave piecewise-linear function on `[-1, 1]`: value at `-1` plus
/// consecutive `(length, slope)` segments with nonincreasing slopes.
#[derive(Debug, Clone)]
struct ConcavePl {
    left: f64,
    segs: Vec<(f64, f64)>,
}

const SEG_EPS: f64 = 1e-14;

impl ConcavePl {
    fn linear(c: f64) -> Self {
        Self {
            left: -c,
            segs: vec![(2.0, c)],
        }
    }

    fn add_linear(&mut self, c: f64) {
        self.left -= c;
        for s in &mut self.segs {
            s.1 += c;
        }
    }

    /// Position of the maximum and the maximum value.
    fn argmax(&self) -> (f64, f64) {
        let mut x = -1.0;
        let mut v = self.left;
        for &(len, slope) in &self.segs {
            if slope <= 0.0 {
                break;
            }
            x += len;
            v += len * slope;
        }
        (x.min(1.0), v)
    }

    fn max_value(&self) -> f64 {
        self.argmax().1
    }

    fn value_at(&self, x: f64) -> f64 {
        let mut pos = -1.0;
        let mut v = self.left;
        for &(len, slope) in &self.segs {
            if x <= pos + len {
                return v + (x - pos) * slope;
            }
            pos += len;
            v += len * slope;
        }
        v
    }

    /// Segments of `self` restricted to `[a, b]`.
    fn slice(&self, a: f64, b: f64, out: &mut Vec<(f64, f64)>) {
        if b - a <= SEG_EPS {
            return;
        }
        let mut pos: f64 = -1.0;
        for &(len, slope) in &self.segs {
            let lo = pos.max(a);
            let hi = (pos + len).min(b);
            if hi - lo > SEG_EPS {
                out.push((hi - lo, slope));
            }
            pos += len;
            if pos >= b {
                break;
            }
        }
    }

    /// `x ↦ max_{|y − x| ≤ h, |y| ≤ 1} f(y)`.
    fn dilate(&self, h: f64) -> Self {
        let (m, fmax) = self.argmax();
        if h >= 2.0 {
            return Self {
                left: fmax,
                segs: vec![(2.0, 0.0)],
            };
        }
        let mut segs = Vec::with_capacity(self.segs.len() + 1);
        let left = if m > -1.0 + h {
            self.slice(-1.0 + h, m, &mut segs);
            self.value_at(-1.0 + h)
        } else {
            fmax
        };
        let flat = (m + h).min(1.0) - (m - h).max(-1.0);
        if flat > SEG_EPS {
            segs.push((flat, 0.0));
        }
        if 1.0 - h > m {
            self.slice(m, 1.0 - h, &mut segs);
        }
        Self { left, segs }
    }
}

/// Brownian path on the grid's time mesh, `d_W = 1`, deterministic in `seed`.
pub fn sample_brownian(g: &Grid, seed: u64) -> NoisePath {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, g.dt().sqrt()).expect("dt is positive");
    let mut values = Vec::with_capacity(g.n_t() + 1);
    let mut w = 0.0;
    values.push(w);
    for _ in 0..g.n_t() {
        w += normal.sample(&mut rng);
        values.push(w);
    }
    NoisePath {
        values,
        seed,
        dt: g.dt(),
    }
}
