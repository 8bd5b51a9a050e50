//! Parameter-update algorithms: residual gradient, martingale-loss SGD, CTD(lambda),
//! CLSTD, the gradient-TD family, and the sectional online rule.

use std::fmt;

use rayon::prelude::*;

use crate::env::{sample_trajectory, DiffusionModel, EpisodeBatch, PathSampler, TimeGrid, Trajectory};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::models::{increment, Family, ValueModel};
use crate::moments::{TestEmitter, TestFunction};
use crate::scalar::{axpy, dot, max_abs, Scalar};

/// Seeds of repetition `r` start at `seed_base + r * REPETITION_STRIDE`.
pub const REPETITION_STRIDE: u64 = 1 << 32;

/// `alpha(k) = alpha0 * k^{-p}` for episode `k >= 1`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LearningSchedule<F> {
    pub alpha0: F,
    #[serde(default)]
    pub decay_exponent: F,
    /// Fast-timescale rate for two-timescale methods; defaults to `10 * alpha0`.
    #[serde(default)]
    pub alpha_u0: Option<F>,
}

impl<F: Scalar> LearningSchedule<F> {
    pub fn constant(alpha0: F) -> Self {
        Self { alpha0, decay_exponent: F::zero(), alpha_u0: None }
    }

    pub fn decaying(alpha0: F, p: F) -> Self {
        Self { alpha0, decay_exponent: p, alpha_u0: None }
    }

    pub fn with_alpha_u(mut self, alpha_u0: F) -> Self {
        self.alpha_u0 = Some(alpha_u0);
        self
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.alpha0 > F::zero()
            && self.alpha0.is_finite()
            && self.decay_exponent >= F::zero()
            && self.alpha_u0.is_none_or(|a| a > F::zero() && a.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid learning schedule {self:?}")))
        }
    }

    fn factor(&self, k: usize) -> F {
        if self.decay_exponent == F::zero() {
            F::one()
        } else {
            F::from_usize_lossy(k.max(1)).powf(-self.decay_exponent)
        }
    }

    pub fn alpha(&self, k: usize) -> F {
        self.alpha0 * self.factor(k)
    }

    pub fn alpha_u(&self, k: usize) -> F {
        self.alpha_u0.unwrap_or(F::lit(10.0) * self.alpha0) * self.factor(k)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Offline,
    Online,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GtdVariant {
    Gtd0,
    Gtd2,
    Tdc,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Algorithm<F> {
    ResidualGradient,
    MartingaleLoss,
    Ctd(TestFunction<F>),
    Clstd,
    Cgtd { variant: GtdVariant, test: TestFunction<F> },
    SectionalCtd0,
}

impl<F: Scalar> Algorithm<F> {
    pub fn ctd0() -> Self {
        Algorithm::Ctd(TestFunction::GradTheta)
    }

    pub fn ctd_lambda(lambda: F) -> Self {
        Algorithm::Ctd(TestFunction::trace(lambda))
    }

    pub fn cgtd2() -> Self {
        Algorithm::Cgtd { variant: GtdVariant::Gtd2, test: TestFunction::GradTheta }
    }
}

impl<F: Scalar> fmt::Display for Algorithm<F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Algorithm::ResidualGradient => f.write_str("residual-gradient"),
            Algorithm::MartingaleLoss => f.write_str("ml"),
            Algorithm::Ctd(TestFunction::GradTheta) => f.write_str("ctd0"),
            Algorithm::Ctd(TestFunction::EligibilityTrace { lambda, .. }) => write!(f, "ctd({lambda})"),
            Algorithm::Ctd(test) => write!(f, "ctd[{test:?}]"),
            Algorithm::Clstd => f.write_str("clstd0"),
            Algorithm::Cgtd { variant, .. } => match variant {
                GtdVariant::Gtd0 => f.write_str("cgtd0"),
                GtdVariant::Gtd2 => f.write_str("cgtd2"),
                GtdVariant::Tdc => f.write_str("ctdc"),
            },
            Algorithm::SectionalCtd0 => f.write_str("sectional-ctd0"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    Converged,
    MaxEpisodes,
    Diverged,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::Converged => "converged",
            Verdict::MaxEpisodes => "max_episodes",
            Verdict::Diverged => "diverged",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunOptions<F> {
    /// Divergence bound on `|theta|_inf`.
    pub theta_bound: F,
    /// Record every `record_every`-th episode (the initial and final iterates are always kept).
    pub record_every: usize,
    /// Sliding-window (last 10% of records) standard deviation below which the run is marked converged.
    pub convergence_tol: Option<F>,
}

impl<F: Scalar> Default for RunOptions<F> {
    fn default() -> Self {
        Self { theta_bound: F::lit(1e6), record_every: 1, convergence_tol: None }
    }
}

/// History and verdict of one solver run.
#[derive(Debug, Clone, PartialEq)]
pub struct SolverRun<F> {
    pub algorithm: String,
    pub schedule: LearningSchedule<F>,
    pub mode: Mode,
    /// `(episode, theta)`; episode 0 is the initial guess.
    pub iterates: Vec<(usize, Vec<F>)>,
    pub verdict: Verdict,
    pub divergence: Option<String>,
    pub aux_state: Option<Vec<F>>,
    pub episodes_run: usize,
}

impl<F: Scalar> SolverRun<F> {
    pub fn final_theta(&self) -> &[F] {
        &self.iterates.last().expect("iterates never empty").1
    }
}

/// Two-timescale and least-squares state carried across episodes.
#[derive(Debug, Clone)]
pub struct AuxState<F> {
    pub u: Vec<F>,
    pub clstd: Option<ClstdAccumulator<F>>,
}

impl<F: Scalar> AuxState<F> {
    pub fn new(model: &ValueModel<F>, algorithm: &Algorithm<F>) -> Self {
        let l = model.n_params();
        match algorithm {
            Algorithm::Cgtd { test, .. } => Self { u: vec![F::zero(); test.dim(l)], clstd: None },
            Algorithm::Clstd => Self { u: Vec::new(), clstd: Some(ClstdAccumulator::new(l)) },
            _ => Self { u: Vec::new(), clstd: None },
        }
    }
}

fn guard<F: Scalar>(theta: &[F], bound: F) -> Result<()> {
    if !theta.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("parameter iterate"));
    }
    let m = max_abs(theta);
    if m > bound {
        return Err(Error::Overflow { family: "parameter bound", exponent: m.to_f64_lossy() });
    }
    Ok(())
}

/// True for errors that signal a diverging iterate rather than a usage problem.
pub fn is_divergence(e: &Error) -> bool {
    matches!(e, Error::Overflow { .. } | Error::NonFinite(_) | Error::NonFiniteState { .. })
}

/// Scratch buffers reused across steps.
struct Work<F> {
    g0: Vec<F>,
    g1: Vec<F>,
    acc: Vec<F>,
    xi: Vec<F>,
    xi_next: Vec<F>,
    jac: Vec<F>,
    tmp: Vec<F>,
}

impl<F: Scalar> Work<F> {
    fn new(l: usize, d: usize) -> Self {
        Self {
            g0: vec![F::zero(); l],
            g1: vec![F::zero(); l],
            acc: vec![F::zero(); l],
            xi: vec![F::zero(); d],
            xi_next: vec![F::zero(); d],
            jac: vec![F::zero(); d * l],
            tmp: vec![F::zero(); l],
        }
    }
}

/// `sum_i (dm_i / dt) (grad J_{i+1} - grad J_i)`, the gradient of `1/2 sum (dm/dt)^2 dt`.
pub fn residual_gradient_direction<F: Scalar>(model: &ValueModel<F>, traj: &Trajectory<F>) -> Result<Vec<F>> {
    let l = model.n_params();
    let mut w = Work::new(l, 0);
    let dt = traj.dt();
    let mut j0 = model.value_grad(traj.time(0), traj.state(0), &mut w.g0)?;
    for i in 0..traj.steps() {
        let j1 = model.value_grad(traj.time(i + 1), traj.state(i + 1), &mut w.g1)?;
        let c = increment(j0, j1, traj.rewards()[i], F::zero(), dt) / dt;
        for k in 0..l {
            w.acc[k] += c * (w.g1[k] - w.g0[k]);
        }
        j0 = j1;
        std::mem::swap(&mut w.g0, &mut w.g1);
    }
    Ok(w.acc)
}

/// Residual-gradient update on one episode; online mode applies each summand as it arrives.
pub fn residual_gradient_episode<F: Scalar>(
    model: &mut ValueModel<F>,
    traj: &Trajectory<F>,
    alpha: F,
    mode: Mode,
) -> Result<()> {
    match mode {
        Mode::Offline => {
            let d = residual_gradient_direction(model, traj)?;
            axpy(-alpha, &d, model.params_mut());
        }
        Mode::Online => {
            let l = model.n_params();
            let mut w = Work::new(l, 0);
            let dt = traj.dt();
            for i in 0..traj.steps() {
                let j0 = model.value_grad(traj.time(i), traj.state(i), &mut w.g0)?;
                let j1 = model.value_grad(traj.time(i + 1), traj.state(i + 1), &mut w.g1)?;
                let c = increment(j0, j1, traj.rewards()[i], F::zero(), dt) / dt;
                let theta = model.params_mut();
                for k in 0..l {
                    theta[k] -= alpha * c * (w.g1[k] - w.g0[k]);
                }
            }
        }
    }
    Ok(())
}

/// `sum_i (G_i - e^{-rho t_i} J_i) e^{-rho t_i} grad J_i dt`, the negative martingale-loss gradient.
pub fn ml_direction<F: Scalar>(model: &ValueModel<F>, traj: &Trajectory<F>, rho: F) -> Result<Vec<F>> {
    let l = model.n_params();
    let mut grad = vec![F::zero(); l];
    let mut acc = vec![F::zero(); l];
    let g = traj.rewards_to_go(rho);
    let dt = traj.dt();
    for i in 0..traj.steps() {
        let j = model.value_grad(traj.time(i), traj.state(i), &mut grad)?;
        let c = if rho == F::zero() {
            (g[i] - j) * dt
        } else {
            let w = (-rho * traj.time(i)).exp();
            (g[i] - w * j) * w * dt
        };
        axpy(c, &grad, &mut acc);
    }
    Ok(acc)
}

pub fn ml_sgd_episode<F: Scalar>(model: &mut ValueModel<F>, traj: &Trajectory<F>, alpha: F, rho: F) -> Result<()> {
    let d = ml_direction(model, traj, rho)?;
    axpy(alpha, &d, model.params_mut());
    Ok(())
}

/// One online CTD step at index `i`: `theta += alpha xi_i dm_i` with `xi` frozen.
///
/// `emitter` must have been fed steps `0..i` of this trajectory.
pub fn ctd_lambda_step<F: Scalar>(
    model: &mut ValueModel<F>,
    traj: &Trajectory<F>,
    i: usize,
    emitter: &mut TestEmitter<F>,
    alpha: F,
    rho: F,
) -> Result<()> {
    let k = traj.steps();
    if i >= k {
        return Err(Error::IndexOutOfRange { index: i, max: k.saturating_sub(1) });
    }
    let l = model.n_params();
    let mut grad = vec![F::zero(); l];
    let mut xi = vec![F::zero(); emitter.dim()];
    let j0 = model.value_grad(traj.time(i), traj.state(i), &mut grad)?;
    emitter.emit(model, traj.time(i), traj.state(i), &grad, &mut xi, None)?;
    let j1 = model.eval(traj.time(i + 1), traj.state(i + 1))?;
    let dm = increment(j0, j1, traj.rewards()[i], rho, traj.dt());
    apply_ctd(model, &xi, alpha * dm)
}

fn apply_ctd<F: Scalar>(model: &mut ValueModel<F>, xi: &[F], scale: F) -> Result<()> {
    if xi.len() != model.n_params() {
        return Err(Error::Dimension(format!(
            "CTD needs a test of dimension {}, got {}",
            model.n_params(),
            xi.len()
        )));
    }
    axpy(scale, xi, model.params_mut());
    Ok(())
}

/// CTD on one episode: online applies every step, offline sums with `theta` frozen.
pub fn ctd_episode<F: Scalar>(
    model: &mut ValueModel<F>,
    traj: &Trajectory<F>,
    test: &TestFunction<F>,
    alpha: F,
    rho: F,
    mode: Mode,
) -> Result<()> {
    let l = model.n_params();
    if test.dim(l) != l {
        return Err(Error::Config(format!("CTD test dimension {} differs from {l} parameters", test.dim(l))));
    }
    let dt = traj.dt();
    let mut em = test.emitter(l, dt, false)?;
    let mut w = Work::new(l, l);
    match mode {
        Mode::Online => {
            for i in 0..traj.steps() {
                let j0 = model.value_grad(traj.time(i), traj.state(i), &mut w.g0)?;
                em.emit(model, traj.time(i), traj.state(i), &w.g0, &mut w.xi, None)?;
                let j1 = model.eval(traj.time(i + 1), traj.state(i + 1))?;
                let dm = increment(j0, j1, traj.rewards()[i], rho, dt);
                axpy(alpha * dm, &w.xi, model.params_mut());
            }
        }
        Mode::Offline => {
            let mut j0 = model.value_grad(traj.time(0), traj.state(0), &mut w.g0)?;
            for i in 0..traj.steps() {
                em.emit(model, traj.time(i), traj.state(i), &w.g0, &mut w.xi, None)?;
                let j1 = model.value_grad(traj.time(i + 1), traj.state(i + 1), &mut w.g1)?;
                let dm = increment(j0, j1, traj.rewards()[i], rho, dt);
                axpy(dm, &w.xi, &mut w.acc);
                j0 = j1;
                std::mem::swap(&mut w.g0, &mut w.g1);
            }
            axpy(alpha, &w.acc, model.params_mut());
        }
    }
    Ok(())
}

/// Running sums for the least-squares solution of the linear moment conditions.
///
/// For a family linear in `theta`, `J = J_0 + theta . phi`, and the conditions
/// `sum phi_i dm_i = 0` read `A theta + b = 0` with
/// `A = sum phi_i (phi_{i+1} - phi_i - rho phi_i dt)^T` and
/// `b = sum phi_i (J0_{i+1} - J0_i - rho J0_i dt + r_i dt)`.
#[derive(Debug, Clone)]
pub struct ClstdAccumulator<F> {
    a: Matrix<F>,
    b: Vec<F>,
    weight: F,
}

impl<F: Scalar> ClstdAccumulator<F> {
    pub fn new(l: usize) -> Self {
        Self { a: Matrix::zeros(l), b: vec![F::zero(); l], weight: F::zero() }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn push(&mut self, phi0: &[F], phi1: &[F], j00: F, j01: F, reward: F, rho: F, dt: F, scratch: &mut [F]) {
        for k in 0..phi0.len() {
            scratch[k] = phi1[k] - phi0[k] - rho * phi0[k] * dt;
        }
        self.a.add_outer(F::one(), phi0, scratch);
        let c = increment(j00, j01, reward, rho, dt);
        axpy(c, phi0, &mut self.b);
    }

    /// Marks the end of an episode (batch mode averages over episodes).
    pub fn end_episode(&mut self) {
        self.weight += F::one();
    }

    pub fn solve(&self) -> Result<Vec<F>> {
        let w = if self.weight > F::zero() { self.weight } else { F::one() };
        let mut a = self.a.clone();
        a.scale(F::one() / w);
        let rhs: Vec<F> = self.b.iter().map(|&v| -v / w).collect();
        a.solve(&rhs).map_err(|e| match e {
            Error::SingularMatrix { condition, .. } => {
                Error::SingularMatrix { context: "clstd moment matrix".into(), condition }
            }
            other => other,
        })
    }
}

fn linear_parts<F: Scalar>(model: &ValueModel<F>) -> Result<Vec<F>> {
    if !model.family().is_linear() {
        return Err(Error::Config(format!("CLSTD needs a family linear in theta, got {:?}", model.family())));
    }
    Ok(vec![F::zero(); model.n_params()])
}

/// Feeds one trajectory's steps into the accumulator.
pub fn clstd_accumulate<F: Scalar>(
    model: &ValueModel<F>,
    traj: &Trajectory<F>,
    rho: F,
    acc: &mut ClstdAccumulator<F>,
) -> Result<()> {
    let zeros = linear_parts(model)?;
    let l = model.n_params();
    let mut w = Work::new(l, 0);
    let dt = traj.dt();
    let mut j00 = model.value_grad_at(&zeros, traj.time(0), traj.state(0), &mut w.g0)?;
    for i in 0..traj.steps() {
        let j01 = model.value_grad_at(&zeros, traj.time(i + 1), traj.state(i + 1), &mut w.g1)?;
        acc.push(&w.g0, &w.g1, j00, j01, traj.rewards()[i], rho, dt, &mut w.tmp);
        j00 = j01;
        std::mem::swap(&mut w.g0, &mut w.g1);
    }
    Ok(())
}

/// Exact solution of the batch-averaged linear moment conditions.
pub fn clstd_solve<F: Scalar>(model: &ValueModel<F>, batch: &EpisodeBatch<F>, rho: F) -> Result<Vec<F>> {
    let mut acc = ClstdAccumulator::new(model.n_params());
    for traj in batch.iter() {
        clstd_accumulate(model, traj, rho, &mut acc)?;
        acc.end_episode();
    }
    acc.solve()
}

/// Values needed by one gradient-TD step.
pub struct GtdStep<'a, F> {
    pub xi: &'a [F],
    /// `d xi / d theta`, row-major `L' x L`; zeros when the test ignores `theta`.
    pub xi_jacobian: &'a [F],
    /// `xi_{i+1}` at the current parameters (TDC only).
    pub xi_next: &'a [F],
    pub dm: F,
    pub grad_dm: &'a [F],
    pub dt: F,
    pub rho: F,
}

/// Two-timescale update of `(theta, u)` for one step.
///
/// `u <- u + alpha_u [xi dm - C u dt]` with `C = xi xi^T` (GTD2, TDC) or `I` (GTD0).
/// GTD2 and GTD0 descend `(grad dm) xi^T u + (d xi/d theta)^T u dm - (u.xi)(d xi/d theta)^T u dt`.
/// TDC substitutes `sum grad dm xi^T u = sum xi_{i+1} xi^T u - (1 + rho dt) sum xi dm / dt`
/// (valid for `xi = grad J`) and scales by `dt`. `scratch` needs `2 L` entries.
pub fn cgtd_step<F: Scalar>(
    theta: &mut [F],
    u: &mut [F],
    step: &GtdStep<'_, F>,
    variant: GtdVariant,
    alpha_theta: F,
    alpha_u: F,
    scratch: &mut [F],
) {
    let l = theta.len();
    let d = u.len();
    let dt = step.dt;
    let xu = dot(step.xi, u);
    let (ju, dir) = scratch[..2 * l].split_at_mut(l);
    // (d xi / d theta)^T u
    ju.iter_mut().for_each(|v| *v = F::zero());
    for r in 0..d {
        let row = &step.xi_jacobian[r * l..(r + 1) * l];
        axpy(u[r], row, ju);
    }
    match variant {
        GtdVariant::Gtd0 | GtdVariant::Gtd2 => {
            for k in 0..l {
                dir[k] = step.grad_dm[k] * xu + ju[k] * step.dm - xu * ju[k] * dt;
            }
        }
        GtdVariant::Tdc => {
            let c = F::one() + step.rho * dt;
            for k in 0..l {
                dir[k] = step.xi_next[k] * xu * dt - c * step.xi[k] * step.dm
                    + dt * (ju[k] * step.dm - xu * ju[k] * dt);
            }
        }
    }
    match variant {
        GtdVariant::Gtd0 => {
            for r in 0..d {
                u[r] += alpha_u * (step.xi[r] * step.dm - u[r] * dt);
            }
        }
        GtdVariant::Gtd2 | GtdVariant::Tdc => {
            for r in 0..d {
                u[r] += alpha_u * (step.xi[r] * step.dm - step.xi[r] * xu * dt);
            }
        }
    }
    axpy(-alpha_theta, dir, theta);
}

/// Online gradient-TD pass over one episode.
#[allow(clippy::too_many_arguments)]
pub fn cgtd_episode<F: Scalar>(
    model: &mut ValueModel<F>,
    u: &mut [F],
    traj: &Trajectory<F>,
    test: &TestFunction<F>,
    variant: GtdVariant,
    alpha_theta: F,
    alpha_u: F,
    rho: F,
) -> Result<()> {
    let l = model.n_params();
    if variant == GtdVariant::Tdc && *test != TestFunction::GradTheta {
        return Err(Error::Config("TDC requires the grad-theta test function".into()));
    }
    let d = test.dim(l);
    if u.len() != d {
        return Err(Error::Dimension(format!("u has length {}, test dimension {d}", u.len())));
    }
    let dt = traj.dt();
    let mut em = test.emitter(l, dt, true)?;
    let mut w = Work::new(l, d);
    let mut grad_dm = vec![F::zero(); l];
    let mut scratch = vec![F::zero(); 2 * l];
    for i in 0..traj.steps() {
        let j0 = model.value_grad(traj.time(i), traj.state(i), &mut w.g0)?;
        em.emit(model, traj.time(i), traj.state(i), &w.g0, &mut w.xi, Some(&mut w.jac))?;
        let j1 = model.value_grad(traj.time(i + 1), traj.state(i + 1), &mut w.g1)?;
        let dm = increment(j0, j1, traj.rewards()[i], rho, dt);
        let c = F::one() + rho * dt;
        for k in 0..l {
            grad_dm[k] = w.g1[k] - if rho == F::zero() { w.g0[k] } else { c * w.g0[k] };
        }
        if variant == GtdVariant::Tdc {
            w.xi_next.copy_from_slice(&w.g1);
        }
        let step = GtdStep {
            xi: &w.xi,
            xi_jacobian: &w.jac,
            xi_next: &w.xi_next,
            dm,
            grad_dm: &grad_dm,
            dt,
            rho,
        };
        cgtd_step(model.params_mut(), u, &step, variant, alpha_theta, alpha_u, &mut scratch);
    }
    Ok(())
}

/// Online sectional update after observing `X_{t_i}`, `i >= 1`.
///
/// With `delta = J_i(X_i) - J_{i-1}(X_{i-1}) + r_{i-1} dt`, every `theta_k` with
/// `i - 1 <= k < K` moves by `alpha X_{i-1} delta`; `theta_K = 1` is never updated.
pub fn sectional_ctd0_step<F: Scalar>(model: &mut ValueModel<F>, traj: &Trajectory<F>, i: usize, alpha: F) -> Result<()> {
    let k = match model.family() {
        Family::Sectional(grid) => grid.steps(),
        _ => return Err(Error::Config("sectional update needs the sectional family".into())),
    };
    if i == 0 || i > k || i > traj.steps() {
        return Err(Error::IndexOutOfRange { index: i, max: k });
    }
    let x_prev = traj.state(i - 1)[0];
    let x_cur = traj.state(i)[0];
    let theta = model.params_mut();
    let th_cur = if i >= k { F::one() } else { theta[i] };
    let delta = th_cur * x_cur - theta[i - 1] * x_prev + traj.rewards()[i - 1] * traj.dt();
    let step = alpha * x_prev * delta;
    for th in theta.iter_mut().skip(i - 1) {
        *th += step;
    }
    Ok(())
}

/// Applies one episode of `algorithm` with rates for episode `k` (1-based).
#[allow(clippy::too_many_arguments)]
pub fn episode_update<F: Scalar>(
    model: &mut ValueModel<F>,
    aux: &mut AuxState<F>,
    traj: &Trajectory<F>,
    algorithm: &Algorithm<F>,
    schedule: &LearningSchedule<F>,
    mode: Mode,
    k: usize,
    rho: F,
) -> Result<()> {
    let alpha = schedule.alpha(k);
    match algorithm {
        Algorithm::ResidualGradient => residual_gradient_episode(model, traj, alpha, mode),
        Algorithm::MartingaleLoss => ml_sgd_episode(model, traj, alpha, rho),
        Algorithm::Ctd(test) => ctd_episode(model, traj, test, alpha, rho, mode),
        Algorithm::Clstd => {
            let acc = aux.clstd.as_mut().expect("clstd state");
            clstd_accumulate(model, traj, rho, acc)?;
            acc.end_episode();
            match acc.solve() {
                Ok(theta) => model.set_params(&theta),
                Err(Error::SingularMatrix { .. }) => Ok(()),
                Err(e) => Err(e),
            }
        }
        Algorithm::Cgtd { variant, test } => {
            cgtd_episode(model, &mut aux.u, traj, test, *variant, alpha, schedule.alpha_u(k), rho)
        }
        Algorithm::SectionalCtd0 => {
            for i in 1..=traj.steps() {
                sectional_ctd0_step(model, traj, i, alpha)?;
            }
            Ok(())
        }
    }
}

/// Rejects algorithm/mode/family combinations that have no meaning.
pub fn validate_combination<F: Scalar>(model: &ValueModel<F>, algorithm: &Algorithm<F>, mode: Mode) -> Result<()> {
    let l = model.n_params();
    match algorithm {
        Algorithm::MartingaleLoss if mode == Mode::Online => {
            Err(Error::Config("the martingale-loss algorithm needs whole episodes (offline mode)".into()))
        }
        Algorithm::Ctd(test) if test.dim(l) != l => {
            Err(Error::Config(format!("CTD test dimension {} differs from {l} parameters", test.dim(l))))
        }
        Algorithm::Clstd if !model.family().is_linear() => {
            Err(Error::Config("CLSTD needs a family linear in theta".into()))
        }
        Algorithm::Cgtd { variant: GtdVariant::Tdc, test } if *test != TestFunction::GradTheta => {
            Err(Error::Config("TDC requires the grad-theta test function".into()))
        }
        Algorithm::Cgtd { .. } | Algorithm::SectionalCtd0 if mode == Mode::Offline => {
            Err(Error::Config(format!("{algorithm} is an online method")))
        }
        Algorithm::SectionalCtd0 if !matches!(model.family(), Family::Sectional(_)) => {
            Err(Error::Config("sectional update needs the sectional family".into()))
        }
        _ => Ok(()),
    }
}

fn window_converged<F: Scalar>(iterates: &[(usize, Vec<F>)], tol: F) -> bool {
    let n = iterates.len();
    let w = (n / 10).max(2);
    if n < w {
        return false;
    }
    let tail = &iterates[n - w..];
    let l = tail[0].1.len();
    (0..l).all(|j| {
        let mean = tail.iter().map(|(_, t)| t[j]).sum::<F>() / F::from_usize_lossy(w);
        let var = tail.iter().map(|(_, t)| (t[j] - mean) * (t[j] - mean)).sum::<F>() / F::from_usize_lossy(w);
        var.sqrt() < tol
    })
}

/// Episodic training loop: episode `k` (1-based) uses trajectory seed `seed + k - 1`.
#[allow(clippy::too_many_arguments)]
pub fn run<F: Scalar>(
    model: &ValueModel<F>,
    diffusion: &DiffusionModel<F>,
    grid: &TimeGrid<F>,
    algorithm: &Algorithm<F>,
    schedule: &LearningSchedule<F>,
    mode: Mode,
    episodes: usize,
    seed: u64,
    options: &RunOptions<F>,
) -> Result<SolverRun<F>> {
    schedule.validate()?;
    validate_combination(model, algorithm, mode)?;
    let mut model = model.clone();
    let mut aux = AuxState::new(&model, algorithm);
    let rho = diffusion.discount_rate();
    let every = options.record_every.max(1);
    let mut iterates = vec![(0, model.params().to_vec())];
    let mut verdict = Verdict::MaxEpisodes;
    let mut divergence = None;
    let mut episodes_run = 0;
    for k in 1..=episodes {
        let traj = sample_trajectory(diffusion, grid, seed.wrapping_add((k - 1) as u64))?;
        let outcome = episode_update(&mut model, &mut aux, &traj, algorithm, schedule, mode, k, rho)
            .and_then(|_| guard(model.params(), options.theta_bound));
        episodes_run = k;
        if let Err(e) = outcome {
            if is_divergence(&e) {
                verdict = Verdict::Diverged;
                divergence = Some(e.to_string());
                iterates.push((k, model.params().to_vec()));
                break;
            }
            return Err(e);
        }
        if k % every == 0 || k == episodes {
            iterates.push((k, model.params().to_vec()));
        }
    }
    if verdict != Verdict::Diverged {
        if let Some(tol) = options.convergence_tol {
            if window_converged(&iterates, tol) {
                verdict = Verdict::Converged;
            }
        }
    }
    let aux_state = if aux.u.is_empty() { None } else { Some(aux.u) };
    Ok(SolverRun {
        algorithm: algorithm.to_string(),
        schedule: *schedule,
        mode,
        iterates,
        verdict,
        divergence,
        aux_state,
        episodes_run,
    })
}

/// Per-record mean and standard deviation across repetitions.
#[derive(Debug, Clone, PartialEq)]
pub struct RepeatedRun<F> {
    pub runs: Vec<SolverRun<F>>,
    pub episodes: Vec<usize>,
    pub mean: Vec<Vec<F>>,
    pub std: Vec<Vec<F>>,
}

impl<F: Scalar> RepeatedRun<F> {
    pub fn final_mean(&self) -> &[F] {
        self.mean.last().expect("nonempty")
    }

    pub fn final_std(&self) -> &[F] {
        self.std.last().expect("nonempty")
    }

    pub fn diverged(&self) -> usize {
        self.runs.iter().filter(|r| r.verdict == Verdict::Diverged).count()
    }
}

/// `repetitions` independent runs (parallel), repetition `r` seeded at `seed_base + r * REPETITION_STRIDE`.
///
/// Bands cover the records shared by all non-diverged runs.
#[allow(clippy::too_many_arguments)]
pub fn run_repeated<F: Scalar>(
    model: &ValueModel<F>,
    diffusion: &DiffusionModel<F>,
    grid: &TimeGrid<F>,
    algorithm: &Algorithm<F>,
    schedule: &LearningSchedule<F>,
    mode: Mode,
    episodes: usize,
    repetitions: usize,
    seed_base: u64,
    options: &RunOptions<F>,
) -> Result<RepeatedRun<F>> {
    if repetitions == 0 {
        return Err(Error::Config("at least one repetition required".into()));
    }
    let runs = (0..repetitions)
        .into_par_iter()
        .map(|r| {
            let seed = seed_base.wrapping_add(r as u64 * REPETITION_STRIDE);
            run(model, diffusion, grid, algorithm, schedule, mode, episodes, seed, options)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(aggregate(runs))
}

pub fn aggregate<F: Scalar>(runs: Vec<SolverRun<F>>) -> RepeatedRun<F> {
    let ok: Vec<&SolverRun<F>> = runs.iter().filter(|r| r.verdict != Verdict::Diverged).collect();
    let base: &[SolverRun<F>] = if ok.is_empty() { &runs[..1] } else { &[] };
    let pool: Vec<&SolverRun<F>> = if ok.is_empty() { base.iter().collect() } else { ok };
    let n_rec = pool.iter().map(|r| r.iterates.len()).min().unwrap_or(0);
    let l = pool[0].iterates[0].1.len();
    let nf = F::from_usize_lossy(pool.len());
    let mut episodes = Vec::with_capacity(n_rec);
    let mut mean = Vec::with_capacity(n_rec);
    let mut std = Vec::with_capacity(n_rec);
    for rec in 0..n_rec {
        episodes.push(pool[0].iterates[rec].0);
        let m: Vec<F> = (0..l).map(|j| pool.iter().map(|r| r.iterates[rec].1[j]).sum::<F>() / nf).collect();
        let s: Vec<F> = (0..l)
            .map(|j| {
                if pool.len() < 2 {
                    F::zero()
                } else {
                    let ss = pool.iter().map(|r| (r.iterates[rec].1[j] - m[j]).powi(2)).sum::<F>();
                    (ss / (nf - F::one())).sqrt()
                }
            })
            .collect();
        mean.push(m);
        std.push(s);
    }
    RepeatedRun { runs, episodes, mean, std }
}

/// Online learning along one long trajectory split into segments of `segment_steps` steps.
///
/// Segment `k` (1-based) plays the role of an episode: rates are constant within it
/// and decay across segments; CLSTD re-solves its running averages at each segment end.
#[allow(clippy::too_many_arguments)]
pub fn run_stream<F: Scalar>(
    model: &ValueModel<F>,
    diffusion: &DiffusionModel<F>,
    grid: &TimeGrid<F>,
    segment_steps: usize,
    algorithm: &Algorithm<F>,
    schedule: &LearningSchedule<F>,
    seed: u64,
    options: &RunOptions<F>,
) -> Result<SolverRun<F>> {
    schedule.validate()?;
    validate_combination(model, algorithm, Mode::Online)?;
    if segment_steps == 0 {
        return Err(Error::Config("segment length must be positive".into()));
    }
    let mut model = model.clone();
    let mut aux = AuxState::new(&model, algorithm);
    let rho = diffusion.discount_rate();
    let dt = grid.dt();
    let l = model.n_params();
    let (test, variant) = match algorithm {
        Algorithm::Ctd(t) => (t.clone(), None),
        Algorithm::Cgtd { variant, test } => (test.clone(), Some(*variant)),
        Algorithm::Clstd => (TestFunction::GradTheta, None),
        other => return Err(Error::Config(format!("{other} is not a streaming method"))),
    };
    let d = test.dim(l);
    let mut em = test.emitter(l, dt, variant.is_some())?;
    let mut w = Work::new(l, d);
    let mut grad_dm = vec![F::zero(); l];
    let mut scratch = vec![F::zero(); 2 * l];
    let zeros = vec![F::zero(); l];
    let mut sampler = PathSampler::new(diffusion, *grid, seed)?;
    let mut x0 = sampler.state().to_vec();
    let mut iterates = vec![(0, model.params().to_vec())];
    let mut verdict = Verdict::MaxEpisodes;
    let mut divergence = None;
    let segments = grid.steps().div_ceil(segment_steps);
    let every = options.record_every.max(1);
    let mut episodes_run = 0;
    'outer: for seg in 1..=segments {
        let alpha = schedule.alpha(seg);
        let alpha_u = schedule.alpha_u(seg);
        let start = (seg - 1) * segment_steps;
        let end = (start + segment_steps).min(grid.steps());
        for i in start..end {
            let t0 = grid.point(i);
            let t1 = grid.point(i + 1);
            let reward = diffusion.running_reward(t0, &x0);
            let x1 = sampler.advance()?.to_vec();
            let step = (|| -> Result<()> {
                match (algorithm, variant) {
                    (Algorithm::Clstd, _) => {
                        let j00 = model.value_grad_at(&zeros, t0, &x0, &mut w.g0)?;
                        let j01 = model.value_grad_at(&zeros, t1, &x1, &mut w.g1)?;
                        aux.clstd.as_mut().expect("clstd state").push(
                            &w.g0, &w.g1, j00, j01, reward, rho, dt, &mut w.tmp,
                        );
                    }
                    (_, None) => {
                        let j0 = model.value_grad(t0, &x0, &mut w.g0)?;
                        em.emit(&model, t0, &x0, &w.g0, &mut w.xi, None)?;
                        let j1 = model.eval(t1, &x1)?;
                        let dm = increment(j0, j1, reward, rho, dt);
                        axpy(alpha * dm, &w.xi, model.params_mut());
                    }
                    (_, Some(v)) => {
                        let j0 = model.value_grad(t0, &x0, &mut w.g0)?;
                        em.emit(&model, t0, &x0, &w.g0, &mut w.xi, Some(&mut w.jac))?;
                        let j1 = model.value_grad(t1, &x1, &mut w.g1)?;
                        let dm = increment(j0, j1, reward, rho, dt);
                        let c = F::one() + rho * dt;
                        for k in 0..l {
                            grad_dm[k] = w.g1[k] - if rho == F::zero() { w.g0[k] } else { c * w.g0[k] };
                        }
                        let step = GtdStep {
                            xi: &w.xi,
                            xi_jacobian: &w.jac,
                            xi_next: &w.g1,
                            dm,
                            grad_dm: &grad_dm,
                            dt,
                            rho,
                        };
                        cgtd_step(model.params_mut(), &mut aux.u, &step, v, alpha, alpha_u, &mut scratch);
                    }
                }
                Ok(())
            })();
            if let Err(e) = step.and_then(|_| guard(model.params(), options.theta_bound)) {
                if is_divergence(&e) {
                    verdict = Verdict::Diverged;
                    divergence = Some(e.to_string());
                    episodes_run = seg;
                    iterates.push((seg, model.params().to_vec()));
                    break 'outer;
                }
                return Err(e);
            }
            x0 = x1;
        }
        if let Some(acc) = aux.clstd.as_ref() {
            match acc.solve() {
                Ok(theta) => model.set_params(&theta)?,
                Err(Error::SingularMatrix { .. }) => {}
                Err(e) => return Err(e),
            }
        }
        episodes_run = seg;
        if seg % every == 0 || seg == segments {
            iterates.push((seg, model.params().to_vec()));
        }
    }
    if verdict != Verdict::Diverged {
        if let Some(tol) = options.convergence_tol {
            if window_converged(&iterates, tol) {
                verdict = Verdict::Converged;
            }
        }
    }
    Ok(SolverRun {
        algorithm: algorithm.to_string(),
        schedule: *schedule,
        mode: Mode::Online,
        iterates,
        verdict,
        divergence,
        aux_state: if aux.u.is_empty() { None } else { Some(aux.u) },
        episodes_run,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{presets, sample_batch};
    use crate::models::LinearBasis;
    use crate::moments::moment_estimate;
    use crate::objectives::mstde;

    fn affine(theta: f64) -> ValueModel<f64> {
        ValueModel::new(Family::AffineTimeScaled, vec![theta]).unwrap()
    }

    #[test]
    fn schedule_values() {
        let s = LearningSchedule::<f64>::decaying(0.01, 0.67);
        assert_eq!(s.alpha(1), 0.01);
        assert!(s.alpha(10) < s.alpha(2));
        assert!((s.alpha_u(1) - 0.1).abs() < 1e-15);
        assert!(LearningSchedule::<f64>::constant(-1.0).validate().is_err());
    }

    #[test]
    fn residual_gradient_matches_finite_difference() {
        let bm = presets::brownian_square_minus_time::<f64>();
        let g = TimeGrid::new(0.0, 1.0, 50).unwrap();
        let tr = sample_trajectory(&bm, &g, 2).unwrap();
        let batch = EpisodeBatch::new(vec![tr.clone()]).unwrap();
        let th = [0.3, -0.4, 0.2];
        let m = ValueModel::new(Family::QuadTriple, th.to_vec()).unwrap();
        let d = residual_gradient_direction(&m, &tr).unwrap();
        for j in 0..3 {
            let eps = 1e-5;
            let mut p = th;
            p[j] += eps;
            let mut q = th;
            q[j] -= eps;
            let fp = mstde(&ValueModel::new(Family::QuadTriple, p.to_vec()).unwrap(), &batch).unwrap().value;
            let fq = mstde(&ValueModel::new(Family::QuadTriple, q.to_vec()).unwrap(), &batch).unwrap().value;
            let fd = (fp - fq) / (2.0 * eps);
            assert!((d[j] - fd).abs() <= 1e-5 * fd.abs().max(1.0), "{j}: {} vs {fd}", d[j]);
        }
    }

    #[test]
    fn semi_gradient_differs_from_residual_gradient() {
        let bm = presets::brownian_identity::<f64>();
        let g = TimeGrid::new(0.0, 1.0, 1).unwrap();
        let tr = sample_trajectory(&bm, &g, 3).unwrap();
        let m = affine(0.5);
        let mut ctd = m.clone();
        ctd_episode(&mut ctd, &tr, &TestFunction::GradTheta, 1.0, 0.0, Mode::Offline).unwrap();
        let mut rg = m.clone();
        residual_gradient_episode(&mut rg, &tr, 1.0, Mode::Offline).unwrap();
        let x1 = tr.state(1)[0];
        let dm = m.eval(1.0, &[x1]).unwrap() - m.eval(0.0, &[0.0]).unwrap();
        // grad at t0 = (1 - 0) * 0 = 0 and at t1 = 0: CTD moves by xi dm = 0, RG by -(dm/dt)(0 - 0) = 0.
        assert_eq!(ctd.params()[0], 0.5);
        assert_eq!(rg.params()[0], 0.5);
        let g2 = TimeGrid::new(0.0, 1.0, 4).unwrap();
        let tr2 = sample_trajectory(&bm, &g2, 4).unwrap();
        let mut a = m.clone();
        let mut b = m.clone();
        ctd_episode(&mut a, &tr2, &TestFunction::GradTheta, 1.0, 0.0, Mode::Offline).unwrap();
        residual_gradient_episode(&mut b, &tr2, 1.0, Mode::Offline).unwrap();
        let mut expected_ctd = 0.0;
        let mut expected_rg = 0.0;
        for i in 0..4 {
            let inc = crate::models::m_increment(&m, &tr2, i, 0.0).unwrap();
            let mut g0 = [0.0];
            m.value_grad(tr2.time(i), tr2.state(i), &mut g0).unwrap();
            expected_ctd += g0[0] * inc.dm;
            expected_rg -= inc.dm / 0.25 * inc.grad_dm[0];
        }
        assert!((a.params()[0] - 0.5 - expected_ctd).abs() < 1e-14);
        assert!((b.params()[0] - 0.5 - expected_rg).abs() < 1e-14);
        assert!((expected_ctd - expected_rg).abs() > 1e-6);
        let _ = dm;
    }

    #[test]
    fn clstd_degenerate_basis_is_singular() {
        let bm = presets::brownian_identity::<f64>();
        let g = TimeGrid::new(0.0, 1.0, 20).unwrap();
        let b = sample_batch(&bm, &g, 0, 10).unwrap();
        let one = LinearBasis::new(1, "one", std::sync::Arc::new(|_, _: &[f64], o: &mut [f64]| o[0] = 1.0));
        let m = ValueModel::new(Family::LinearBasis(one), vec![0.0]).unwrap();
        assert!(matches!(clstd_solve(&m, &b, 0.0), Err(Error::SingularMatrix { .. })));
    }

    #[test]
    fn clstd_root_identity() {
        let ou = presets::ou_quadratic(1.0, 1.0, 0.5, 1.5, 1.0, 1.0).unwrap();
        let g = TimeGrid::new(0.0, 5.0, 500).unwrap();
        let b = sample_batch(&ou, &g, 1, 30).unwrap();
        let mut m = ValueModel::new(Family::LinearBasis(LinearBasis::lq()), vec![0.0; 3]).unwrap();
        let th = clstd_solve(&m, &b, 1.5).unwrap();
        m.set_params(&th).unwrap();
        let est = moment_estimate(&m, &b, &TestFunction::GradTheta, 1.5).unwrap();
        assert!(est.norm() <= 1e-10, "{est:?}");
    }

    #[test]
    fn sectional_two_slice_unroll() {
        let grid = TimeGrid::new(0.0, 1.0, 2).unwrap();
        let tr = Trajectory::from_parts(grid, 1, vec![0.5, 1.0, 2.0], vec![0.0, 0.0], 2.0, 0).unwrap();
        let mut m = ValueModel::<f64>::new(Family::Sectional(grid), vec![0.2, 0.4]).unwrap();
        sectional_ctd0_step(&mut m, &tr, 1, 0.1).unwrap();
        // delta = 0.4 * 1 - 0.2 * 0.5 = 0.3; step = 0.1 * 0.5 * 0.3 = 0.015
        assert!((m.params()[0] - 0.215).abs() < 1e-15);
        assert!((m.params()[1] - 0.415).abs() < 1e-15);
        sectional_ctd0_step(&mut m, &tr, 2, 0.1).unwrap();
        // delta = 1 * 2 - 0.415 * 1 = 1.585; only theta_1 moves: 0.1 * 1 * 1.585
        assert!((m.params()[0] - 0.215).abs() < 1e-15);
        assert!((m.params()[1] - (0.415 + 0.1585)).abs() < 1e-15);
        assert!(sectional_ctd0_step(&mut m, &tr, 3, 0.1).is_err());
    }

    #[test]
    fn empty_run_and_determinism() {
        let bm = presets::brownian_identity::<f64>();
        let g = TimeGrid::new(0.0, 1.0, 20).unwrap();
        let opts = RunOptions::default();
        let s = LearningSchedule::constant(0.01);
        let r = run(&affine(-1.0), &bm, &g, &Algorithm::ctd0(), &s, Mode::Online, 0, 0, &opts).unwrap();
        assert_eq!(r.verdict, Verdict::MaxEpisodes);
        assert_eq!(r.iterates, vec![(0, vec![-1.0])]);
        let a = run(&affine(-1.0), &bm, &g, &Algorithm::ResidualGradient, &s, Mode::Offline, 30, 5, &opts).unwrap();
        let b = run(&affine(-1.0), &bm, &g, &Algorithm::ResidualGradient, &s, Mode::Offline, 30, 5, &opts).unwrap();
        assert_eq!(a, b);
        assert!(run(&affine(0.0), &bm, &g, &Algorithm::MartingaleLoss, &s, Mode::Online, 1, 0, &opts).is_err());
    }

    #[test]
    fn rho_zero_matches_undiscounted_bitwise() {
        let bm = presets::brownian_square_minus_time::<f64>();
        let g = TimeGrid::new(0.0, 1.0, 25).unwrap();
        let tr = sample_trajectory(&bm, &g, 6).unwrap();
        let m = ValueModel::new(Family::QuadTriple, vec![0.1, 0.2, 0.3]).unwrap();
        let d0 = ml_direction(&m, &tr, 0.0).unwrap();
        // undiscounted reference written out directly
        let gtg = tr.rewards_to_go(0.0);
        let mut reference = vec![0.0; 3];
        let mut grad = [0.0; 3];
        for i in 0..25 {
            let j = m.value_grad(tr.time(i), tr.state(i), &mut grad).unwrap();
            axpy((gtg[i] - j) * tr.dt(), &grad, &mut reference);
        }
        assert_eq!(d0, reference);
    }

    #[test]
    fn divergence_is_reported() {
        let bm = presets::brownian_identity::<f64>();
        let g = TimeGrid::new(0.0, 1.0, 50).unwrap();
        let m = ValueModel::new(Family::ExpUnpinned, vec![0.0]).unwrap();
        let s = LearningSchedule::constant(0.5);
        let r = run(&m, &bm, &g, &Algorithm::Ctd(TestFunction::constant(1.0)), &s, Mode::Online, 2000, 0, &RunOptions::default())
            .unwrap();
        assert_eq!(r.verdict, Verdict::Diverged, "{r:?}");
    }
}
