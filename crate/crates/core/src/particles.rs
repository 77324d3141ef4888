//! Euler–Maruyama simulation of the bailout particle system with
//! exponential killing, survival weights and common noise.

use std::io::{self, Write};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp1, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::{sample_brownian, Field, Grid, NoisePath};
use crate::model::{BailoutParams, ControlField};

/// Particle dynamics
/// `dX = γ(t, X)dt + σdB + σ₀dW − κ dL`, `dΛ = λ(X)dt`, `L = 1 − E[e^{−Λ}]`.
#[derive(Clone)]
pub struct ParticleModel {
    pub sigma: f64,
    pub sigma0: f64,
    pub kappa: f64,
    pub w_weight: f64,
    pub g_min: f64,
    pub g_max: f64,
    pub initial_mean: f64,
    pub initial_sd: f64,
    pub hazard: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
}

impl std::fmt::Debug for ParticleModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ParticleModel")
            .field("sigma", &self.sigma)
            .field("sigma0", &self.sigma0)
            .field("kappa", &self.kappa)
            .finish_non_exhaustive()
    }
}

impl From<&BailoutParams> for ParticleModel {
    fn from(p: &BailoutParams) -> Self {
        let (hm, hs) = (p.hazard_max, p.hazard_scale);
        Self {
            sigma: p.sigma,
            sigma0: p.sigma0,
            kappa: p.kappa,
            w_weight: p.w_weight,
            g_min: 0.0,
            g_max: p.g_max,
            initial_mean: p.initial_mean,
            initial_sd: p.initial_sd,
            hazard: Arc::new(move |x| crate::model::hazard(hm, hs, x)),
        }
    }
}

impl ParticleModel {
    pub fn with_hazard(mut self, f: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Self {
        self.hazard = Arc::new(f);
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SimOptions {
    /// Kill particles when `Λ` exceeds an independent `Exp(1)` clock instead
    /// of carrying survival weights.
    pub hard_killing: bool,
    /// Store the ensemble every this many steps (and at the end).
    pub snapshot_every: Option<usize>,
}

/// State of all particles at one time.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleEnsemble {
    pub t: f64,
    pub positions: Vec<f64>,
    pub cum_intensity: Vec<f64>,
    /// `e^{−Λ}` with survival weights; `1{Λ < θ}` with hard killing.
    pub weights: Vec<f64>,
    /// Accumulated running cost `Σ dt·weight·w·γ(t, X)` per particle.
    pub running_cost: Vec<f64>,
}

impl ParticleEnsemble {
    pub fn n(&self) -> usize {
        self.positions.len()
    }
    pub fn mass(&self) -> f64 {
        pairwise_sum(&self.weights) / self.n() as f64
    }
    pub fn loss(&self) -> f64 {
        1.0 - self.mass()
    }
    /// Weight-averaged position of the surviving population.
    pub fn mean_position(&self) -> f64 {
        let wx: Vec<f64> = self.weights.iter().zip(&self.positions).map(|(w, x)| w * x).collect();
        pairwise_sum(&wx) / pairwise_sum(&self.weights)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SummaryRow {
    pub t: f64,
    pub mass: f64,
    pub loss: f64,
    pub mean_x: f64,
    /// `⟨ν_t, λ⟩`.
    pub hazard_rate: f64,
}

#[derive(Debug, Clone)]
pub struct ParticleRun {
    pub summary: Vec<SummaryRow>,
    pub snapshots: Vec<ParticleEnsemble>,
    pub final_state: ParticleEnsemble,
}

impl ParticleRun {
    /// CSV with header `t,mass,L,mean_X`.
    pub fn write_summary_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "t,mass,L,mean_X")?;
        for r in &self.summary {
            writeln!(w, "{},{},{},{}", r.t, r.mass, r.loss, r.mean_x)?;
        }
        Ok(())
    }

    /// Per-particle cost `Σ dt e^{−Λ}wγ + 1 − e^{−Λ_T}`.
    pub fn particle_costs(&self) -> Vec<f64> {
        let f = &self.final_state;
        f.running_cost.iter().zip(&f.weights).map(|(c, w)| c + 1.0 - w).collect()
    }
}

/// Summation in a fixed binary-tree order, independent of thread count.
pub(crate) fn pairwise_sum(v: &[f64]) -> f64 {
    if v.len() <= 16 {
        return v.iter().sum();
    }
    let mid = v.len() / 2;
    pairwise_sum(&v[..mid]) + pairwise_sum(&v[mid..])
}

struct Particle {
    x: f64,
    lambda: f64,
    clock: f64,
    cost: f64,
    rng: ChaCha8Rng,
}

impl Particle {
    fn weight(&self, hard: bool) -> f64 {
        if hard {
            if self.lambda < self.clock {
                1.0
            } else {
                0.0
            }
        } else {
            (-self.lambda).exp()
        }
    }
}

fn snapshot(t: f64, ps: &[Particle], hard: bool) -> ParticleEnsemble {
    ParticleEnsemble {
        t,
        positions: ps.iter().map(|p| p.x).collect(),
        cum_intensity: ps.iter().map(|p| p.lambda).collect(),
        weights: ps.iter().map(|p| p.weight(hard)).collect(),
        running_cost: ps.iter().map(|p| p.cost).collect(),
    }
}

fn summarize(t: f64, ps: &[Particle], m: &ParticleModel, hard: bool) -> SummaryRow {
    let n = ps.len() as f64;
    let w: Vec<f64> = ps.iter().map(|p| p.weight(hard)).collect();
    let wx: Vec<f64> = ps.iter().zip(&w).map(|(p, w)| w * p.x).collect();
    let wl: Vec<f64> = ps.iter().zip(&w).map(|(p, w)| w * (m.hazard)(p.x)).collect();
    let mass = pairwise_sum(&w) / n;
    SummaryRow {
        t,
        mass,
        loss: 1.0 - mass,
        mean_x: pairwise_sum(&wx) / pairwise_sum(&w),
        hazard_rate: pairwise_sum(&wl) / n,
    }
}

/// Simulates `n` particles of the bailout model along the noise path.
pub fn simulate(
    p: &BailoutParams,
    gamma: &ControlField,
    wpath: &NoisePath,
    n: usize,
    seed: u64,
    g: &Grid,
) -> Result<ParticleRun> {
    simulate_model(&ParticleModel::from(p), gamma, wpath, n, seed, g, SimOptions::default())
}

/// Euler–Maruyama with one counter-based stream per particle
/// (`ChaCha8(seed)`, stream `i`). The interaction term uses
/// `ΔL = L_{k+1} − L_k`, which depends only on positions at `t_k`.
pub fn simulate_model(
    m: &ParticleModel,
    gamma: &ControlField,
    wpath: &NoisePath,
    n: usize,
    seed: u64,
    g: &Grid,
    opts: SimOptions,
) -> Result<ParticleRun> {
    if n == 0 {
        return Err(Error::InvalidArgument("particle count must be at least 1".into()));
    }
    gamma.check(g)?;
    wpath.check(g)?;
    let hard = opts.hard_killing;
    let dt = g.dt();
    let sqdt = dt.sqrt();
    let mut ps: Vec<Particle> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let z: f64 = rng.sample(StandardNormal);
            let clock = if hard { rng.sample(Exp1) } else { f64::INFINITY };
            Particle {
                x: m.initial_mean + m.initial_sd * z,
                lambda: 0.0,
                clock,
                cost: 0.0,
                rng,
            }
        })
        .collect();

    let mut summary = Vec::with_capacity(g.n_t() + 1);
    let mut snapshots = Vec::new();
    summary.push(summarize(0.0, &ps, m, hard));
    let mut loss = summary[0].loss;
    for k in 0..g.n_t() {
        let t = g.t(k);
        if opts.snapshot_every.is_some_and(|e| e > 0 && k % e == 0) {
            snapshots.push(snapshot(t, &ps, hard));
        }
        let dw = m.sigma0 * (wpath.values()[k + 1] - wpath.values()[k]);
        let next_lambda: Vec<f64> = ps.par_iter().map(|p| p.lambda + (m.hazard)(p.x) * dt).collect();
        let next_w: Vec<f64> = ps
            .iter()
            .zip(&next_lambda)
            .map(|(p, &l)| if hard { if l < p.clock { 1.0 } else { 0.0 } } else { (-l).exp() })
            .collect();
        let next_loss = 1.0 - pairwise_sum(&next_w) / n as f64;
        let shift = dw - m.kappa * (next_loss - loss);
        ps.par_iter_mut().zip(next_lambda).for_each(|(p, l)| {
            let c = gamma.eval(k, p.x, g, m.g_min, m.g_max);
            let z: f64 = p.rng.sample(StandardNormal);
            p.cost += dt * p.weight(hard) * m.w_weight * c;
            p.x += c * dt + m.sigma * sqdt * z + shift;
            p.lambda = l;
        });
        loss = next_loss;
        summary.push(summarize(g.t(k + 1), &ps, m, hard));
    }
    let final_state = snapshot(g.t(g.n_t()), &ps, hard);
    if opts.snapshot_every.is_some() {
        snapshots.push(final_state.clone());
    }
    Ok(ParticleRun {
        summary,
        snapshots,
        final_state,
    })
}

/// Weighted histogram on node-centred cells (end cells absorb the tails),
/// divided by `dx`. Mass equals the mean weight.
pub fn empirical_density(e: &ParticleEnsemble, g: &Grid) -> Field {
    let mut f = g.zeros();
    let n = g.n_x();
    let scale = 1.0 / (e.n() as f64 * g.dx());
    for (&x, &w) in e.positions.iter().zip(&e.weights) {
        let r = ((x - g.x(0)) / g.dx()).round();
        let i = if r <= 0.0 { 0 } else { (r as usize).min(n - 1) };
        f[i] += w * scale;
    }
    f
}

/// Monte Carlo estimate of the cost `E[∫e^{−Λ}wγ dt + L_T]` with its
/// standard error. One path uses the per-particle spread; several paths
/// (fresh common noise each when `σ₀ > 0`) use the spread of path means.
pub fn estimate_cost(
    p: &BailoutParams,
    gamma: &ControlField,
    n: usize,
    n_paths: usize,
    seed: u64,
    g: &Grid,
) -> Result<(f64, f64)> {
    if n == 0 || n_paths == 0 {
        return Err(Error::InvalidArgument("n and n_paths must be at least 1".into()));
    }
    let model = ParticleModel::from(p);
    let mut means = Vec::with_capacity(n_paths);
    let mut single = Vec::new();
    for j in 0..n_paths as u64 {
        let wpath = if p.sigma0 > 0.0 {
            sample_brownian(g, seed.wrapping_add(0x9e37_79b9).wrapping_add(j))
        } else {
            NoisePath::zero(g)
        };
        let run = simulate_model(&model, gamma, &wpath, n, seed.wrapping_add(j), g, SimOptions::default())?;
        let costs = run.particle_costs();
        means.push(pairwise_sum(&costs) / n as f64);
        if n_paths == 1 {
            single = costs;
        }
    }
    let sample = if n_paths == 1 { &single } else { &means };
    let mean = pairwise_sum(sample) / sample.len() as f64;
    let se = if sample.len() > 1 {
        let var = sample.iter().map(|c| (c - mean) * (c - mean)).sum::<f64>() / (sample.len() - 1) as f64;
        (var / sample.len() as f64).sqrt()
    } else {
        0.0
    };
    let mean = if n_paths == 1 { means[0] } else { mean };
    Ok((mean, se))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::bailout_model;

    fn grid() -> Grid {
        Grid::new(-4.0, 6.0, 100, 1.0, 100, 0.1).unwrap()
    }

    fn zero_control(p: &BailoutParams, g: &Grid) -> ControlField {
        ControlField::constant(0.0, &bailout_model(p).unwrap(), g).unwrap()
    }

    #[test]
    fn weights_match_intensity() {
        let g = grid();
        let p = BailoutParams { kappa: 1.0, ..Default::default() };
        let run = simulate(&p, &zero_control(&p, &g), &NoisePath::zero(&g), 500, 3, &g).unwrap();
        let f = &run.final_state;
        assert!(f.weights.iter().zip(&f.cum_intensity).all(|(w, l)| *w == (-l).exp()));
        assert!(run.summary.windows(2).all(|w| w[1].loss >= w[0].loss));
    }

    #[test]
    fn no_hazard_is_martingale() {
        let g = grid();
        let p = BailoutParams::default();
        let m = ParticleModel::from(&p).with_hazard(|_| 0.0);
        let n = 20_000;
        let run = simulate_model(&m, &zero_control(&p, &g), &NoisePath::zero(&g), n, 11, &g, SimOptions::default()).unwrap();
        assert!(run.final_state.weights.iter().all(|&w| w == 1.0));
        let sd = (p.initial_sd.powi(2) + p.sigma.powi(2)).sqrt();
        assert!((run.final_state.mean_position() - p.initial_mean).abs() <= 3.0 * sd / (n as f64).sqrt());
    }

    #[test]
    fn constant_hazard_loss() {
        let g = grid();
        let p = BailoutParams::default();
        let l0 = 0.7;
        let n = 20_000;
        for hard in [false, true] {
            let m = ParticleModel::from(&p).with_hazard(move |_| l0);
            let opts = SimOptions { hard_killing: hard, snapshot_every: None };
            let run = simulate_model(&m, &zero_control(&p, &g), &NoisePath::zero(&g), n, 5, &g, opts).unwrap();
            let exact = 1.0 - (-l0).exp();
            let se = (exact * (1.0 - exact) / n as f64).sqrt();
            assert!((run.final_state.loss() - exact).abs() <= 3.0 * se + 1e-12, "hard={hard}");
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let g = grid();
        let p = BailoutParams { kappa: 1.0, sigma0: 0.3, ..Default::default() };
        let w = sample_brownian(&g, 9);
        let a = simulate(&p, &zero_control(&p, &g), &w, 300, 1, &g).unwrap();
        let b = simulate(&p, &zero_control(&p, &g), &w, 300, 1, &g).unwrap();
        assert_eq!(a.final_state, b.final_state);
        let c = simulate(&p, &zero_control(&p, &g), &w, 300, 2, &g).unwrap();
        assert_ne!(a.final_state, c.final_state);
    }

    #[test]
    fn histogram_cases() {
        let g = grid();
        let x = g.x(40);
        let e = ParticleEnsemble {
            t: 0.0,
            positions: vec![x; 10],
            cum_intensity: vec![0.0; 10],
            weights: vec![1.0; 10],
            running_cost: vec![0.0; 10],
        };
        let f = empirical_density(&e, &g);
        assert!((f[40] * g.dx() - 1.0).abs() < 1e-12);
        assert_eq!(f.iter().filter(|&&v| v != 0.0).count(), 1);
        let half = ParticleEnsemble { weights: vec![0.5; 10], ..e.clone() };
        let h = empirical_density(&half, &g);
        assert!(h.iter().zip(f.iter()).all(|(a, b)| (a - 0.5 * b).abs() < 1e-12));
        let far = ParticleEnsemble { positions: vec![-100.0, 100.0], cum_intensity: vec![0.0; 2], weights: vec![1.0; 2], running_cost: vec![0.0; 2], t: 0.0 };
        let f = empirical_density(&far, &g);
        assert!(f[0] > 0.0 && f[g.n_x() - 1] > 0.0);
    }

    #[test]
    fn cost_estimate_single_path() {
        let g = grid();
        let p = BailoutParams::default();
        let (mean, se) = estimate_cost(&p, &zero_control(&p, &g), 2000, 1, 4, &g).unwrap();
        assert!(mean > 0.0 && mean < 1.0 && se > 0.0);
        assert!(estimate_cost(&p, &zero_control(&p, &g), 0, 1, 4, &g).is_err());
    }

    #[test]
    fn summary_csv_header() {
        let g = grid();
        let p = BailoutParams::default();
        let run = simulate(&p, &zero_control(&p, &g), &NoisePath::zero(&g), 10, 1, &g).unwrap();
        let mut buf = Vec::new();
        run.write_summary_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("t,mass,L,mean_X\n"));
        assert_eq!(text.lines().count(), g.n_t() + 2);
    }
}
