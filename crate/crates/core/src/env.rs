//! Diffusion problem instances and exact-law sampling of their discrete observations.
//!
//! A [`DiffusionModel`] bundles the state dynamics, running reward, terminal
//! reward and discount rate of one evaluation problem. Trajectories are
//! sampled on a uniform [`TimeGrid`]; the three built-in dynamics (Brownian,
//! geometric Brownian, Ornstein-Uhlenbeck) are sampled from their exact
//! transition laws, anything else goes through an Euler-Maruyama step.

use std::fmt;
use std::io::Write;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub type DriftFn<F> = Arc<dyn Fn(F, &[F], &mut [F]) + Send + Sync>;
/// Writes the `d x m` diffusion matrix in row-major order.
pub type DiffusionFn<F> = Arc<dyn Fn(F, &[F], &mut [F]) + Send + Sync>;
pub type RewardFn<F> = Arc<dyn Fn(F, &[F]) -> F + Send + Sync>;
pub type TerminalFn<F> = Arc<dyn Fn(&[F]) -> F + Send + Sync>;

/// Uniform time grid `t0 = t_0 < t_1 < ... < t_K = T`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid<F> {
    t0: F,
    t_end: F,
    steps: usize,
    dt: F,
}

impl<F: Scalar> TimeGrid<F> {
    pub fn new(t0: F, t_end: F, steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidGrid("step count must be positive".into()));
        }
        if !(t0.is_finite() && t_end.is_finite()) || t_end <= t0 {
            return Err(Error::InvalidGrid(format!("need t0 < T, got [{t0}, {t_end}]")));
        }
        let dt = (t_end - t0) / F::from_usize_lossy(steps);
        Ok(Self { t0, t_end, steps, dt })
    }

    /// Builds a grid from explicit points, rejecting non-uniform spacing.
    pub fn from_points(points: &[F]) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::InvalidGrid("need at least two points".into()));
        }
        let k = points.len() - 1;
        let grid = Self::new(points[0], points[k], k)?;
        let tol = F::lit(1e-12) * (grid.t_end - grid.t0).abs().max(F::one());
        for (i, &p) in points.iter().enumerate() {
            if (p - grid.point(i)).abs() > tol {
                return Err(Error::InvalidGrid(format!("non-uniform spacing at index {i}")));
            }
        }
        Ok(grid)
    }

    #[inline]
    pub fn t0(&self) -> F {
        self.t0
    }

    #[inline]
    pub fn t_end(&self) -> F {
        self.t_end
    }

    #[inline]
    pub fn steps(&self) -> usize {
        self.steps
    }

    #[inline]
    pub fn dt(&self) -> F {
        self.dt
    }

    /// `t_i`; the last point is exactly `T`.
    #[inline]
    pub fn point(&self, i: usize) -> F {
        if i >= self.steps {
            self.t_end
        } else {
            self.t0 + F::from_usize_lossy(i) * self.dt
        }
    }

    pub fn points(&self) -> Vec<F> {
        (0..=self.steps).map(|i| self.point(i)).collect()
    }

    /// Grid over the same interval with `factor` times fewer steps.
    pub fn coarsen(&self, factor: usize) -> Result<Self> {
        if factor == 0 || self.steps % factor != 0 {
            return Err(Error::InvalidGrid(format!(
                "cannot coarsen {} steps by {factor}",
                self.steps
            )));
        }
        Self::new(self.t0, self.t_end, self.steps / factor)
    }
}

/// State dynamics of the problem.
#[derive(Clone)]
pub enum Dynamics<F> {
    /// `dX = mu dt + sigma dW`, one-dimensional.
    Brownian { drift: F, sigma: F },
    /// `dX = (r - q) X dt + sigma X dW`, one-dimensional.
    Gbm { rate: F, dividend: F, sigma: F },
    /// `dX = speed (level - X) dt + sigma dW`, one-dimensional.
    Ou { speed: F, level: F, sigma: F },
    /// Arbitrary coefficients; only the Euler sampler applies.
    General {
        dim: usize,
        noise_dim: usize,
        drift: DriftFn<F>,
        diffusion: DiffusionFn<F>,
    },
}

impl<F: Scalar> fmt::Debug for Dynamics<F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Dynamics::Brownian { drift, sigma } => {
                write!(f, "Brownian {{ drift: {drift}, sigma: {sigma} }}")
            }
            Dynamics::Gbm { rate, dividend, sigma } => {
                write!(f, "Gbm {{ rate: {rate}, dividend: {dividend}, sigma: {sigma} }}")
            }
            Dynamics::Ou { speed, level, sigma } => {
                write!(f, "Ou {{ speed: {speed}, level: {level}, sigma: {sigma} }}")
            }
            Dynamics::General { dim, noise_dim, .. } => {
                write!(f, "General {{ dim: {dim}, noise_dim: {noise_dim} }}")
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplerKind {
    ExactBrownian,
    ExactGbm,
    ExactOu,
    Euler,
}

impl fmt::Display for SamplerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            SamplerKind::ExactBrownian => "exact-brownian",
            SamplerKind::ExactGbm => "exact-gbm",
            SamplerKind::ExactOu => "exact-ou",
            SamplerKind::Euler => "euler",
        };
        f.write_str(s)
    }
}

/// One policy-evaluation problem instance.
#[derive(Clone)]
pub struct DiffusionModel<F> {
    dynamics: Dynamics<F>,
    sampler: SamplerKind,
    running_reward: RewardFn<F>,
    terminal_reward: TerminalFn<F>,
    discount_rate: F,
    horizon: Option<F>,
    initial_state: Vec<F>,
}

impl<F: Scalar> fmt::Debug for DiffusionModel<F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DiffusionModel")
            .field("dynamics", &self.dynamics)
            .field("sampler", &self.sampler)
            .field("discount_rate", &self.discount_rate)
            .field("horizon", &self.horizon)
            .field("initial_state", &self.initial_state)
            .finish()
    }
}

impl<F: Scalar> DiffusionModel<F> {
    /// Builds a model with the natural sampler for its dynamics (exact for the
    /// built-in families, Euler for general coefficients).
    pub fn new(
        dynamics: Dynamics<F>,
        running_reward: RewardFn<F>,
        terminal_reward: TerminalFn<F>,
        initial_state: Vec<F>,
        horizon: Option<F>,
        discount_rate: F,
    ) -> Result<Self> {
        let sampler = match &dynamics {
            Dynamics::Brownian { .. } => SamplerKind::ExactBrownian,
            Dynamics::Gbm { .. } => SamplerKind::ExactGbm,
            Dynamics::Ou { .. } => SamplerKind::ExactOu,
            Dynamics::General { .. } => SamplerKind::Euler,
        };
        let model = Self {
            dynamics,
            sampler,
            running_reward,
            terminal_reward,
            discount_rate,
            horizon,
            initial_state,
        };
        model.validate()?;
        Ok(model)
    }

    /// Replaces the sampler, checking that it matches the coefficient structure.
    pub fn with_sampler(mut self, sampler: SamplerKind) -> Result<Self> {
        self.sampler = sampler;
        self.validate()?;
        Ok(self)
    }

    fn validate(&self) -> Result<()> {
        if let Some(h) = self.horizon {
            if !(h > F::zero()) || !h.is_finite() {
                return Err(Error::InvalidModel(format!("horizon must be positive, got {h}")));
            }
        }
        if !(self.discount_rate >= F::zero()) || !self.discount_rate.is_finite() {
            return Err(Error::InvalidModel(format!(
                "discount rate must be nonnegative, got {}",
                self.discount_rate
            )));
        }
        if self.initial_state.len() != self.dim() {
            return Err(Error::Dimension(format!(
                "initial state has length {}, dynamics dimension {}",
                self.initial_state.len(),
                self.dim()
            )));
        }
        if !self.initial_state.iter().all(|x| x.is_finite()) {
            return Err(Error::InvalidModel("non-finite initial state".into()));
        }
        let mismatch = |reason: &str| Error::IncompatibleSampler {
            sampler: self.sampler.to_string(),
            reason: reason.to_string(),
        };
        match (&self.dynamics, self.sampler) {
            (_, SamplerKind::Euler) => {}
            (Dynamics::Brownian { sigma, .. }, SamplerKind::ExactBrownian) => {
                if !(*sigma >= F::zero()) {
                    return Err(mismatch("negative volatility"));
                }
            }
            (Dynamics::Gbm { sigma, .. }, SamplerKind::ExactGbm) => {
                if !(*sigma >= F::zero()) {
                    return Err(mismatch("negative volatility"));
                }
                if !(self.initial_state[0] > F::zero()) {
                    return Err(mismatch("geometric Brownian motion needs a positive start"));
                }
            }
            (Dynamics::Ou { speed, sigma, .. }, SamplerKind::ExactOu) => {
                if !(*speed >= F::zero()) || !(*sigma >= F::zero()) {
                    return Err(mismatch("negative speed or volatility"));
                }
            }
            (Dynamics::General { .. }, _) => {
                return Err(mismatch("general coefficients admit only the Euler sampler"))
            }
            _ => return Err(mismatch("coefficient structure does not match the exact law")),
        }
        if let Dynamics::General { dim, noise_dim, .. } = &self.dynamics {
            if *dim == 0 || *noise_dim == 0 {
                return Err(Error::Dimension("state and noise dimensions must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn dynamics(&self) -> &Dynamics<F> {
        &self.dynamics
    }

    pub fn sampler(&self) -> SamplerKind {
        self.sampler
    }

    /// True when sampling goes through the Euler approximation rather than an exact law.
    pub fn euler_fallback(&self) -> bool {
        self.sampler == SamplerKind::Euler
    }

    pub fn dim(&self) -> usize {
        match &self.dynamics {
            Dynamics::General { dim, .. } => *dim,
            _ => 1,
        }
    }

    pub fn noise_dim(&self) -> usize {
        match &self.dynamics {
            Dynamics::General { noise_dim, .. } => *noise_dim,
            _ => 1,
        }
    }

    pub fn discount_rate(&self) -> F {
        self.discount_rate
    }

    pub fn horizon(&self) -> Option<F> {
        self.horizon
    }

    pub fn initial_state(&self) -> &[F] {
        &self.initial_state
    }

    #[inline]
    pub fn running_reward(&self, t: F, x: &[F]) -> F {
        (self.running_reward)(t, x)
    }

    #[inline]
    pub fn terminal_reward(&self, x: &[F]) -> F {
        (self.terminal_reward)(x)
    }

    pub fn drift(&self, t: F, x: &[F], out: &mut [F]) {
        match &self.dynamics {
            Dynamics::Brownian { drift, .. } => out[0] = *drift,
            Dynamics::Gbm { rate, dividend, .. } => out[0] = (*rate - *dividend) * x[0],
            Dynamics::Ou { speed, level, .. } => out[0] = *speed * (*level - x[0]),
            Dynamics::General { drift, .. } => drift(t, x, out),
        }
    }

    pub fn diffusion(&self, t: F, x: &[F], out: &mut [F]) {
        match &self.dynamics {
            Dynamics::Brownian { sigma, .. } | Dynamics::Ou { sigma, .. } => out[0] = *sigma,
            Dynamics::Gbm { sigma, .. } => out[0] = *sigma * x[0],
            Dynamics::General { diffusion, .. } => diffusion(t, x, out),
        }
    }
}

/// Incremental sampler producing the observed states one step at a time.
///
/// Used directly for very long single trajectories that are never stored.
pub struct PathSampler<'a, F: Scalar> {
    model: &'a DiffusionModel<F>,
    grid: TimeGrid<F>,
    rng: ChaCha8Rng,
    step: usize,
    state: Vec<F>,
    drift_buf: Vec<F>,
    diff_buf: Vec<F>,
    noise: Vec<F>,
    // transition constants for the exact laws
    c0: F,
    c1: F,
}

impl<'a, F: Scalar> PathSampler<'a, F> {
    pub fn new(model: &'a DiffusionModel<F>, grid: TimeGrid<F>, seed: u64) -> Result<Self> {
        if grid.t0() < F::zero() {
            return Err(Error::InvalidGrid("grid starts before time zero".into()));
        }
        if let Some(h) = model.horizon() {
            let tol = F::lit(1e-12) * h.max(F::one());
            if grid.t_end() > h + tol {
                return Err(Error::InvalidGrid(format!(
                    "grid end {} beyond horizon {h}",
                    grid.t_end()
                )));
            }
        }
        let dt = grid.dt();
        let half = F::lit(0.5);
        let (c0, c1) = match model.dynamics() {
            Dynamics::Brownian { drift, sigma } => (*drift * dt, *sigma * dt.sqrt()),
            Dynamics::Gbm { rate, dividend, sigma } => (
                (*rate - *dividend - half * *sigma * *sigma) * dt,
                *sigma * dt.sqrt(),
            ),
            Dynamics::Ou { speed, sigma, .. } => {
                if *speed > F::zero() {
                    let decay = (-*speed * dt).exp();
                    let var = *sigma * *sigma * (F::one() - (-F::lit(2.0) * *speed * dt).exp())
                        / (F::lit(2.0) * *speed);
                    (decay, var.sqrt())
                } else {
                    (F::one(), *sigma * dt.sqrt())
                }
            }
            Dynamics::General { .. } => (F::zero(), dt.sqrt()),
        };
        let d = model.dim();
        let m = model.noise_dim();
        Ok(Self {
            model,
            grid,
            rng: ChaCha8Rng::seed_from_u64(seed),
            step: 0,
            state: model.initial_state().to_vec(),
            drift_buf: vec![F::zero(); d],
            diff_buf: vec![F::zero(); d * m],
            noise: vec![F::zero(); m],
            c0,
            c1,
        })
    }

    pub fn grid(&self) -> &TimeGrid<F> {
        &self.grid
    }

    /// Index of the current state.
    pub fn step(&self) -> usize {
        self.step
    }

    pub fn time(&self) -> F {
        self.grid.point(self.step)
    }

    pub fn state(&self) -> &[F] {
        &self.state
    }

    pub fn finished(&self) -> bool {
        self.step >= self.grid.steps()
    }

    #[inline]
    fn normal(&mut self) -> F {
        let z: f64 = StandardNormal.sample(&mut self.rng);
        F::lit(z)
    }

    /// Advances the state by one grid step.
    pub fn advance(&mut self) -> Result<&[F]> {
        if self.finished() {
            return Err(Error::IndexOutOfRange { index: self.step + 1, max: self.grid.steps() });
        }
        let sampler = self.model.sampler();
        match (sampler, self.model.dynamics()) {
            (SamplerKind::ExactBrownian, _) => {
                let z = self.normal();
                self.state[0] = self.state[0] + self.c0 + self.c1 * z;
            }
            (SamplerKind::ExactGbm, _) => {
                let z = self.normal();
                self.state[0] = self.state[0] * (self.c0 + self.c1 * z).exp();
            }
            (SamplerKind::ExactOu, Dynamics::Ou { level, .. }) => {
                let z = self.normal();
                let level = *level;
                self.state[0] = level + (self.state[0] - level) * self.c0 + self.c1 * z;
            }
            _ => self.euler_step(),
        }
        self.step += 1;
        if !self.state.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFiniteState {
                step: self.step,
                t: self.time().to_f64_lossy(),
            });
        }
        Ok(&self.state)
    }

    fn euler_step(&mut self) {
        let t = self.grid.point(self.step);
        let dt = self.grid.dt();
        let sqrt_dt = self.c1;
        let d = self.state.len();
        let m = self.noise.len();
        for j in 0..m {
            self.noise[j] = self.normal() * sqrt_dt;
        }
        self.model.drift(t, &self.state, &mut self.drift_buf);
        self.model.diffusion(t, &self.state, &mut self.diff_buf);
        for r in 0..d {
            let mut dx = self.drift_buf[r] * dt;
            for c in 0..m {
                dx += self.diff_buf[r * m + c] * self.noise[c];
            }
            self.state[r] += dx;
        }
    }
}

/// One sampled episode on a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory<F> {
    grid: TimeGrid<F>,
    dim: usize,
    states: Vec<F>,
    rewards: Vec<F>,
    terminal_value: F,
    seed: u64,
}

impl<F: Scalar> Trajectory<F> {
    /// Assembles a trajectory from raw observations (flat row-major states).
    pub fn from_parts(
        grid: TimeGrid<F>,
        dim: usize,
        states: Vec<F>,
        rewards: Vec<F>,
        terminal_value: F,
        seed: u64,
    ) -> Result<Self> {
        let k = grid.steps();
        if dim == 0 || states.len() != (k + 1) * dim {
            return Err(Error::Dimension(format!(
                "expected {} state entries, got {}",
                (k + 1) * dim,
                states.len()
            )));
        }
        if rewards.len() != k {
            return Err(Error::Dimension(format!("expected {k} rewards, got {}", rewards.len())));
        }
        Ok(Self { grid, dim, states, rewards, terminal_value, seed })
    }

    pub fn grid(&self) -> &TimeGrid<F> {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of steps `K`.
    pub fn steps(&self) -> usize {
        self.grid.steps()
    }

    pub fn dt(&self) -> F {
        self.grid.dt()
    }

    #[inline]
    pub fn time(&self, i: usize) -> F {
        self.grid.point(i)
    }

    #[inline]
    pub fn state(&self, i: usize) -> &[F] {
        &self.states[i * self.dim..(i + 1) * self.dim]
    }

    pub fn states(&self) -> &[F] {
        &self.states
    }

    pub fn rewards(&self) -> &[F] {
        &self.rewards
    }

    pub fn terminal_value(&self) -> F {
        self.terminal_value
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Re-evaluates the running reward along the path and compares with the stored stream.
    pub fn check_rewards(&self, model: &DiffusionModel<F>) -> Result<()> {
        for i in 0..self.steps() {
            let r = model.running_reward(self.time(i), self.state(i));
            if r != self.rewards[i] && !(r.is_nan() && self.rewards[i].is_nan()) {
                return Err(Error::InvalidArgument(format!(
                    "reward mismatch at step {i}: stored {}, re-evaluated {r}",
                    self.rewards[i]
                )));
            }
        }
        Ok(())
    }

    /// Observations on a grid `factor` times coarser (same underlying path).
    pub fn subsample(&self, factor: usize, model: &DiffusionModel<F>) -> Result<Self> {
        let grid = self.grid.coarsen(factor)?;
        let k = grid.steps();
        let mut states = Vec::with_capacity((k + 1) * self.dim);
        for i in 0..=k {
            states.extend_from_slice(self.state(i * factor));
        }
        let rewards = (0..k)
            .map(|i| model.running_reward(grid.point(i), &states[i * self.dim..(i + 1) * self.dim]))
            .collect();
        Self::from_parts(grid, self.dim, states, rewards, self.terminal_value, self.seed)
    }

    /// `h(X_T) + sum_{j >= from} r_j dt`.
    pub fn cumulative_reward(&self, from_index: usize) -> Result<F> {
        self.discounted_cumulative_reward(F::zero(), from_index)
    }

    /// `e^{-rho T} h(X_T) + sum_{j >= from} e^{-rho t_j} r_j dt`.
    pub fn discounted_cumulative_reward(&self, rho: F, from_index: usize) -> Result<F> {
        let k = self.steps();
        if from_index > k {
            return Err(Error::IndexOutOfRange { index: from_index, max: k });
        }
        if rho < F::zero() {
            return Err(Error::InvalidArgument(format!("discount rate {rho} is negative")));
        }
        let dt = self.dt();
        if rho == F::zero() {
            let mut acc = self.terminal_value;
            for j in (from_index..k).rev() {
                acc += self.rewards[j] * dt;
            }
            return Ok(acc);
        }
        let mut acc = (-rho * self.grid.t_end()).exp() * self.terminal_value;
        for j in (from_index..k).rev() {
            acc += (-rho * self.time(j)).exp() * self.rewards[j] * dt;
        }
        Ok(acc)
    }

    /// All reward-to-go targets `G(t_i)`, `i = 0..K`, in one backward pass.
    ///
    /// Entry `i` equals `discounted_cumulative_reward(rho, i)` bit for bit.
    pub fn rewards_to_go(&self, rho: F) -> Vec<F> {
        let k = self.steps();
        let dt = self.dt();
        let mut out = vec![F::zero(); k + 1];
        if rho == F::zero() {
            let mut acc = self.terminal_value;
            out[k] = acc;
            for j in (0..k).rev() {
                acc += self.rewards[j] * dt;
                out[j] = acc;
            }
        } else {
            let mut acc = (-rho * self.grid.t_end()).exp() * self.terminal_value;
            out[k] = acc;
            for j in (0..k).rev() {
                acc += (-rho * self.time(j)).exp() * self.rewards[j] * dt;
                out[j] = acc;
            }
        }
        out
    }

    /// Writes `t, x0.., r` rows; the reward cell of the terminal row is left empty.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let mut header = String::from("t");
        for j in 0..self.dim {
            header.push_str(&format!(",x{j}"));
        }
        header.push_str(",r");
        writeln!(w, "{header}")?;
        for i in 0..=self.steps() {
            let mut row = format!("{}", self.time(i));
            for x in self.state(i) {
                row.push_str(&format!(",{x}"));
            }
            if i < self.steps() {
                row.push_str(&format!(",{}", self.rewards[i]));
            } else {
                row.push(',');
            }
            writeln!(w, "{row}")?;
        }
        Ok(())
    }
}

/// Samples one trajectory; deterministic given `(model, grid, seed)`.
pub fn sample_trajectory<F: Scalar>(
    model: &DiffusionModel<F>,
    grid: &TimeGrid<F>,
    seed: u64,
) -> Result<Trajectory<F>> {
    let mut sampler = PathSampler::new(model, *grid, seed)?;
    let k = grid.steps();
    let d = model.dim();
    let mut states = Vec::with_capacity((k + 1) * d);
    let mut rewards = Vec::with_capacity(k);
    states.extend_from_slice(sampler.state());
    for i in 0..k {
        rewards.push(model.running_reward(grid.point(i), sampler.state()));
        let x = sampler.advance()?;
        states.extend_from_slice(x);
    }
    let terminal_value = model.terminal_reward(&states[k * d..]);
    Trajectory::from_parts(*grid, d, states, rewards, terminal_value, seed)
}

/// Episodes sharing one grid and one model.
#[derive(Debug, Clone)]
pub struct EpisodeBatch<F> {
    trajectories: Vec<Trajectory<F>>,
}

impl<F: Scalar> EpisodeBatch<F> {
    pub fn new(trajectories: Vec<Trajectory<F>>) -> Result<Self> {
        let first = trajectories.first().ok_or(Error::EmptyBatch)?;
        if trajectories.iter().any(|t| t.grid() != first.grid() || t.dim() != first.dim()) {
            return Err(Error::InvalidGrid("batch trajectories must share one grid".into()));
        }
        Ok(Self { trajectories })
    }

    pub fn trajectories(&self) -> &[Trajectory<F>] {
        &self.trajectories
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn grid(&self) -> &TimeGrid<F> {
        self.trajectories[0].grid()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Trajectory<F>> {
        self.trajectories.iter()
    }
}

/// Samples `n` episodes with seeds `seed_base + index`, in parallel, stored in index order.
pub fn sample_batch<F: Scalar>(
    model: &DiffusionModel<F>,
    grid: &TimeGrid<F>,
    seed_base: u64,
    n: usize,
) -> Result<EpisodeBatch<F>> {
    let trajectories = (0..n)
        .into_par_iter()
        .map(|i| sample_trajectory(model, grid, seed_base.wrapping_add(i as u64)))
        .collect::<Result<Vec<_>>>()?;
    EpisodeBatch::new(trajectories)
}

/// Constructors for the problem instances used throughout the experiments.
pub mod presets {
    use super::*;

    /// `X = W` on `[0, 1]`, zero running reward, `h(x) = x`.
    pub fn brownian_identity<F: Scalar>() -> DiffusionModel<F> {
        DiffusionModel::new(
            Dynamics::Brownian { drift: F::zero(), sigma: F::one() },
            Arc::new(|_, _| F::zero()),
            Arc::new(|x: &[F]| x[0]),
            vec![F::zero()],
            Some(F::one()),
            F::zero(),
        )
        .expect("valid preset")
    }

    /// `X = W` on `[0, 1]`, running reward `-1`, `h(x) = x^2`.
    pub fn brownian_square_minus_time<F: Scalar>() -> DiffusionModel<F> {
        DiffusionModel::new(
            Dynamics::Brownian { drift: F::zero(), sigma: F::one() },
            Arc::new(|_, _| -F::one()),
            Arc::new(|x: &[F]| x[0] * x[0]),
            vec![F::zero()],
            Some(F::one()),
            F::zero(),
        )
        .expect("valid preset")
    }

    /// Geometric Brownian motion with a call payoff, discounted at the risk-free rate.
    pub fn gbm_call<F: Scalar>(rate: F, dividend: F, sigma: F, strike: F, maturity: F, x0: F) -> Result<DiffusionModel<F>> {
        DiffusionModel::new(
            Dynamics::Gbm { rate, dividend, sigma },
            Arc::new(|_, _| F::zero()),
            Arc::new(move |x: &[F]| (x[0] - strike).max(F::zero())),
            vec![x0],
            Some(maturity),
            rate,
        )
    }

    /// Mean-reverting state with quadratic running reward `x^2/2 + q x`, infinite horizon.
    pub fn ou_quadratic<F: Scalar>(speed: F, level: F, sigma: F, rho: F, q: F, x0: F) -> Result<DiffusionModel<F>> {
        let half = F::lit(0.5);
        DiffusionModel::new(
            Dynamics::Ou { speed, level, sigma },
            Arc::new(move |_, x: &[F]| half * x[0] * x[0] + q * x[0]),
            Arc::new(|_| F::zero()),
            vec![x0],
            None,
            rho,
        )
    }

    /// Brownian state with quadratic running reward, infinite horizon.
    pub fn brownian_quadratic<F: Scalar>(sigma: F, rho: F, q: F, x0: F) -> Result<DiffusionModel<F>> {
        let half = F::lit(0.5);
        DiffusionModel::new(
            Dynamics::Brownian { drift: F::zero(), sigma },
            Arc::new(move |_, x: &[F]| half * x[0] * x[0] + q * x[0]),
            Arc::new(|_| F::zero()),
            vec![x0],
            None,
            rho,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zero_noise_unit_drift() -> DiffusionModel<f64> {
        DiffusionModel::new(
            Dynamics::General {
                dim: 1,
                noise_dim: 1,
                drift: Arc::new(|_, _, out: &mut [f64]| out[0] = 1.0),
                diffusion: Arc::new(|_, _, out: &mut [f64]| out[0] = 0.0),
            },
            Arc::new(|_, _| 0.0),
            Arc::new(|x: &[f64]| x[0]),
            vec![0.0],
            Some(1.0),
            0.0,
        )
        .unwrap()
    }

    #[test]
    fn grid_endpoints_and_spacing() {
        let g = TimeGrid::new(0.0, 1.0, 100).unwrap();
        assert_eq!(g.point(0), 0.0);
        assert_eq!(g.point(100), 1.0);
        assert!((g.dt() - 0.01f64).abs() < 1e-15);
        let pts = g.points();
        assert_eq!(pts.len(), 101);
        assert!(TimeGrid::from_points(&pts).is_ok());
    }

    #[test]
    fn grid_rejects_bad_input() {
        assert!(TimeGrid::<f64>::new(0.0, 1.0, 0).is_err());
        assert!(TimeGrid::<f64>::new(1.0, 1.0, 5).is_err());
        assert!(TimeGrid::from_points(&[0.0, 0.1, 0.3]).is_err());
    }

    #[test]
    fn euler_deterministic_ode() {
        let m = zero_noise_unit_drift();
        assert!(m.euler_fallback());
        let g = TimeGrid::new(0.0, 1.0, 10).unwrap();
        let tr = sample_trajectory(&m, &g, 3).unwrap();
        for i in 0..=10 {
            let expected = i as f64 * 0.1;
            assert!((tr.state(i)[0] - expected).abs() < 1e-12, "{i}: {}", tr.state(i)[0]);
        }
        assert!((tr.terminal_value() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn incompatible_sampler_rejected() {
        let m = zero_noise_unit_drift();
        assert!(matches!(
            m.clone().with_sampler(SamplerKind::ExactBrownian),
            Err(Error::IncompatibleSampler { .. })
        ));
        let b = presets::brownian_identity::<f64>();
        assert!(b.clone().with_sampler(SamplerKind::ExactOu).is_err());
        assert!(b.with_sampler(SamplerKind::Euler).unwrap().euler_fallback());
    }

    #[test]
    fn invalid_model_parameters() {
        let bad = DiffusionModel::<f64>::new(
            Dynamics::Brownian { drift: 0.0, sigma: 1.0 },
            Arc::new(|_, _| 0.0),
            Arc::new(|_| 0.0),
            vec![0.0],
            Some(-1.0),
            0.0,
        );
        assert!(bad.is_err());
        let bad = DiffusionModel::<f64>::new(
            Dynamics::Brownian { drift: 0.0, sigma: 1.0 },
            Arc::new(|_, _| 0.0),
            Arc::new(|_| 0.0),
            vec![0.0],
            Some(1.0),
            -0.5,
        );
        assert!(bad.is_err());
        assert!(presets::gbm_call(0.01, 0.0, 0.3, 1.0, 1.0, -1.0).is_err());
    }

    #[test]
    fn grid_beyond_horizon_rejected() {
        let m = presets::brownian_identity::<f64>();
        let g = TimeGrid::new(0.0, 2.0, 10).unwrap();
        assert!(sample_trajectory(&m, &g, 0).is_err());
    }

    #[test]
    fn blow_up_is_reported() {
        let m = DiffusionModel::new(
            Dynamics::General {
                dim: 1,
                noise_dim: 1,
                drift: Arc::new(|_, x: &[f64], out: &mut [f64]| out[0] = x[0] * x[0] * 1e3),
                diffusion: Arc::new(|_, _, out: &mut [f64]| out[0] = 0.0),
            },
            Arc::new(|_, _| 0.0),
            Arc::new(|_| 0.0),
            vec![10.0],
            Some(1.0),
            0.0,
        )
        .unwrap();
        let g = TimeGrid::new(0.0, 1.0, 100).unwrap();
        assert!(matches!(sample_trajectory(&m, &g, 0), Err(Error::NonFiniteState { .. })));
    }

    #[test]
    fn seed_determinism() {
        let m = presets::brownian_identity::<f64>();
        let g = TimeGrid::new(0.0, 1.0, 50).unwrap();
        let a = sample_trajectory(&m, &g, 42).unwrap();
        let b = sample_trajectory(&m, &g, 42).unwrap();
        let c = sample_trajectory(&m, &g, 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.states(), c.states());
    }

    fn constant_reward_traj(k: usize, dt: f64, r: f64, h: f64) -> Trajectory<f64> {
        let g = TimeGrid::new(0.0, dt * k as f64, k).unwrap();
        Trajectory::from_parts(g, 1, vec![0.0; k + 1], vec![r; k], h, 0).unwrap()
    }

    #[test]
    fn cumulative_reward_examples() {
        let tr = constant_reward_traj(10, 0.1, 0.0, 5.0);
        for i in 0..=10 {
            assert_eq!(tr.cumulative_reward(i).unwrap(), 5.0);
        }
        let tr = constant_reward_traj(100, 0.01, -1.0, 2.0);
        assert!((tr.cumulative_reward(0).unwrap() - 1.0).abs() < 1e-12);

        let g = TimeGrid::new(0.0, 1.0, 10).unwrap();
        let mut rewards = vec![0.0; 10];
        rewards[9] = 3.0;
        let tr = Trajectory::from_parts(g, 1, vec![0.0; 11], rewards, 1.0, 0).unwrap();
        assert!((tr.cumulative_reward(9).unwrap() - 1.3f64).abs() < 1e-12);
        assert_eq!(tr.cumulative_reward(10).unwrap(), 1.0);
        assert!(matches!(tr.cumulative_reward(11), Err(Error::IndexOutOfRange { .. })));
    }

    #[test]
    fn discounted_cumulative_reward_examples() {
        let g = TimeGrid::new(0.0, 1.0, 10_000).unwrap();
        let tr = Trajectory::from_parts(g, 1, vec![0.0; 10_001], vec![1.0; 10_000], 0.0, 0).unwrap();
        let v = tr.discounted_cumulative_reward(1.5, 0).unwrap();
        let exact = (1.0 - (-1.5f64).exp()) / 1.5;
        assert!((v - exact).abs() < 1e-3, "{v} vs {exact}");

        let tr = constant_reward_traj(10, 0.1, 0.0, 2.5);
        let v = tr.discounted_cumulative_reward(1.0, 0).unwrap();
        assert!((v - 2.5 * (-1.0f64).exp()).abs() < 1e-14);
        assert!(tr.discounted_cumulative_reward(-0.1, 0).is_err());
    }

    #[test]
    fn rewards_to_go_matches_pointwise() {
        let m = presets::brownian_square_minus_time::<f64>();
        let g = TimeGrid::new(0.0, 1.0, 20).unwrap();
        let tr = sample_trajectory(&m, &g, 9).unwrap();
        for rho in [0.0, 0.7] {
            let all = tr.rewards_to_go(rho);
            for i in 0..=20 {
                assert_eq!(all[i], tr.discounted_cumulative_reward(rho, i).unwrap());
            }
        }
        let plain = tr.rewards_to_go(0.0);
        for i in 0..=20 {
            assert_eq!(plain[i], tr.cumulative_reward(i).unwrap());
        }
    }

    #[test]
    fn csv_export_shape() {
        let m = presets::brownian_square_minus_time::<f64>();
        let g = TimeGrid::new(0.0, 1.0, 4).unwrap();
        let tr = sample_trajectory(&m, &g, 1).unwrap();
        let mut buf = Vec::new();
        tr.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], "t,x0,r");
        assert_eq!(lines.len(), 6);
        assert!(lines[1].ends_with(",-1"));
        assert!(lines[5].ends_with(','));
    }

    #[test]
    fn subsample_keeps_path() {
        let m = presets::brownian_identity::<f64>();
        let g = TimeGrid::new(0.0, 1.0, 100).unwrap();
        let tr = sample_trajectory(&m, &g, 5).unwrap();
        let coarse = tr.subsample(10, &m).unwrap();
        assert_eq!(coarse.steps(), 10);
        for i in 0..=10 {
            assert_eq!(coarse.state(i), tr.state(10 * i));
        }
        coarse.check_rewards(&m).unwrap();
        assert!(tr.subsample(7, &m).is_err());
    }

    #[test]
    fn batch_requires_shared_grid() {
        let m = presets::brownian_identity::<f64>();
        let g1 = TimeGrid::new(0.0, 1.0, 10).unwrap();
        let g2 = TimeGrid::new(0.0, 1.0, 20).unwrap();
        let a = sample_trajectory(&m, &g1, 0).unwrap();
        let b = sample_trajectory(&m, &g2, 0).unwrap();
        assert!(EpisodeBatch::new(vec![a, b]).is_err());
        assert!(matches!(EpisodeBatch::<f64>::new(vec![]), Err(Error::EmptyBatch)));
    }

    #[test]
    fn single_precision_sampling() {
        let m = presets::brownian_identity::<f32>();
        let g = TimeGrid::<f32>::new(0.0, 1.0, 10).unwrap();
        let tr = sample_trajectory(&m, &g, 0).unwrap();
        assert_eq!(tr.states().len(), 11);
        tr.check_rewards(&m).unwrap();
    }
}
