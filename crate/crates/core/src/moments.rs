//! Test functions and the discrete martingale-orthogonality estimator.

use crate::env::{EpisodeBatch, Trajectory};
use crate::error::{Error, Result};
use crate::models::{increment, ValueModel};
use crate::scalar::Scalar;

/// How the eligibility decay over one step is computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TraceConvention {
    /// `lambda^dt` per step: weights `lambda^{(i-j) dt}`.
    #[default]
    ElapsedTime,
    /// `lambda` per step: weights `lambda^{i-j}`.
    Discrete,
}

/// Rule producing the test process `xi`.
#[derive(Debug, Clone, PartialEq)]
pub enum TestFunction<F> {
    /// `dJ/dtheta (t_i, X_i)`.
    GradTheta,
    /// `sum_{j <= i} dt lambda^{(i-j) dt} dJ/dtheta (t_j, X_j)`; `lambda = 0` keeps only `dt * grad`.
    EligibilityTrace { lambda: F, convention: TraceConvention },
    Constant(Vec<F>),
    /// `1 / (|X_i| + 1)`.
    TailoredReciprocal,
    /// Concatenation of the component outputs.
    Composite(Vec<TestFunction<F>>),
}

impl<F: Scalar> TestFunction<F> {
    pub fn trace(lambda: F) -> Self {
        TestFunction::EligibilityTrace { lambda, convention: TraceConvention::ElapsedTime }
    }

    pub fn constant(c: F) -> Self {
        TestFunction::Constant(vec![c])
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            TestFunction::EligibilityTrace { lambda, .. } => {
                if !(*lambda >= F::zero() && *lambda <= F::one()) {
                    return Err(Error::InvalidArgument(format!("trace lambda {lambda} outside [0, 1]")));
                }
            }
            TestFunction::Constant(c) if c.is_empty() => {
                return Err(Error::Dimension("constant test with no components".into()))
            }
            TestFunction::Composite(parts) => {
                if parts.is_empty() {
                    return Err(Error::Dimension("composite test with no components".into()));
                }
                for p in parts {
                    p.validate()?;
                }
            }
            _ => {}
        }
        Ok(())
    }

    /// Output dimension `L'` for a model with `n_params` parameters.
    pub fn dim(&self, n_params: usize) -> usize {
        match self {
            TestFunction::GradTheta | TestFunction::EligibilityTrace { .. } => n_params,
            TestFunction::Constant(c) => c.len(),
            TestFunction::TailoredReciprocal => 1,
            TestFunction::Composite(parts) => parts.iter().map(|p| p.dim(n_params)).sum(),
        }
    }

    /// True when `xi` depends on `theta`.
    pub fn depends_on_theta(&self) -> bool {
        match self {
            TestFunction::GradTheta | TestFunction::EligibilityTrace { .. } => true,
            TestFunction::Composite(parts) => parts.iter().any(|p| p.depends_on_theta()),
            _ => false,
        }
    }

    /// Per-trajectory emitter; resets trace state.
    pub fn emitter(&self, n_params: usize, dt: F, with_jacobian: bool) -> Result<TestEmitter<F>> {
        self.validate()?;
        let dim = self.dim(n_params);
        let mut parts = Vec::new();
        flatten(self, &mut parts);
        let mut slots = Vec::with_capacity(parts.len());
        let mut offset = 0;
        for p in parts {
            let d = p.dim(n_params);
            let (decay, is_trace) = match &p {
                TestFunction::EligibilityTrace { lambda, convention } => {
                    let decay = if *lambda == F::zero() {
                        F::zero()
                    } else {
                        match convention {
                            TraceConvention::ElapsedTime => lambda.powf(dt),
                            TraceConvention::Discrete => *lambda,
                        }
                    };
                    (decay, true)
                }
                _ => (F::zero(), false),
            };
            slots.push(Slot {
                kind: p,
                offset,
                dim: d,
                decay,
                trace: if is_trace { vec![F::zero(); d] } else { Vec::new() },
                trace_jac: if is_trace && with_jacobian { vec![F::zero(); d * n_params] } else { Vec::new() },
            });
            offset += d;
        }
        Ok(TestEmitter {
            slots,
            dim,
            n_params,
            dt,
            with_jacobian,
            hessian: if with_jacobian { vec![F::zero(); n_params * n_params] } else { Vec::new() },
        })
    }
}

fn flatten<F: Scalar>(t: &TestFunction<F>, out: &mut Vec<TestFunction<F>>) {
    match t {
        TestFunction::Composite(parts) => parts.iter().for_each(|p| flatten(p, out)),
        other => out.push(other.clone()),
    }
}

#[derive(Debug, Clone)]
struct Slot<F> {
    kind: TestFunction<F>,
    offset: usize,
    dim: usize,
    decay: F,
    trace: Vec<F>,
    trace_jac: Vec<F>,
}

/// Stateful producer of `xi_{t_i}` along one trajectory, called for `i = 0, 1, ...` in order.
#[derive(Debug, Clone)]
pub struct TestEmitter<F> {
    slots: Vec<Slot<F>>,
    dim: usize,
    n_params: usize,
    dt: F,
    with_jacobian: bool,
    hessian: Vec<F>,
}

impl<F: Scalar> TestEmitter<F> {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn reset(&mut self) {
        for s in &mut self.slots {
            s.trace.iter_mut().for_each(|v| *v = F::zero());
            s.trace_jac.iter_mut().for_each(|v| *v = F::zero());
        }
    }

    /// Writes `xi` at `(t, x)` given `grad = dJ/dtheta (t, x)` at the current parameters.
    ///
    /// With a jacobian-enabled emitter, `jac` receives the row-major `L' x L` matrix `d xi / d theta`.
    pub fn emit(
        &mut self,
        model: &ValueModel<F>,
        t: F,
        x: &[F],
        grad: &[F],
        out: &mut [F],
        jac: Option<&mut [F]>,
    ) -> Result<()> {
        let l = self.n_params;
        let need_hessian = self.with_jacobian
            && jac.is_some()
            && self.slots.iter().any(|s| s.kind.depends_on_theta());
        if need_hessian {
            model.hessian(t, x, &mut self.hessian)?;
        }
        let mut jac = jac;
        if let Some(j) = jac.as_deref_mut() {
            j.iter_mut().for_each(|v| *v = F::zero());
        }
        for s in &mut self.slots {
            let o = &mut out[s.offset..s.offset + s.dim];
            match &s.kind {
                TestFunction::GradTheta => {
                    o.copy_from_slice(grad);
                    if let (Some(j), true) = (jac.as_deref_mut(), need_hessian) {
                        j[s.offset * l..(s.offset + s.dim) * l].copy_from_slice(&self.hessian);
                    }
                }
                TestFunction::EligibilityTrace { .. } => {
                    for (tr, &g) in s.trace.iter_mut().zip(grad) {
                        *tr = s.decay * *tr + self.dt * g;
                    }
                    o.copy_from_slice(&s.trace);
                    if need_hessian {
                        for (tj, &h) in s.trace_jac.iter_mut().zip(&self.hessian) {
                            *tj = s.decay * *tj + self.dt * h;
                        }
                        if let Some(j) = jac.as_deref_mut() {
                            j[s.offset * l..(s.offset + s.dim) * l].copy_from_slice(&s.trace_jac);
                        }
                    }
                }
                TestFunction::Constant(c) => o.copy_from_slice(c),
                TestFunction::TailoredReciprocal => o[0] = F::one() / (x[0].abs() + F::one()),
                TestFunction::Composite(_) => unreachable!("flattened at construction"),
            }
        }
        if !out.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("test function"));
        }
        Ok(())
    }
}

/// Batch estimate of `E sum_i xi_i dm_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentEstimate<F> {
    pub g: Vec<F>,
    pub n_episodes: usize,
    /// Variance of each component of `g` (episode-level sample variance over `n`).
    pub covariance_diag: Vec<F>,
}

impl<F: Scalar> MomentEstimate<F> {
    pub fn std_errors(&self) -> Vec<F> {
        self.covariance_diag.iter().map(|v| v.sqrt()).collect()
    }

    pub fn norm(&self) -> F {
        crate::scalar::dot(&self.g, &self.g).sqrt()
    }
}

/// One trajectory's `sum_i xi_i dm_i`, accumulated into `out`.
pub fn trajectory_moment<F: Scalar>(
    model: &ValueModel<F>,
    traj: &Trajectory<F>,
    test: &TestFunction<F>,
    rho: F,
    out: &mut [F],
) -> Result<()> {
    let l = model.n_params();
    let mut em = test.emitter(l, traj.dt(), false)?;
    let mut xi = vec![F::zero(); em.dim()];
    let mut g0 = vec![F::zero(); l];
    let mut g1 = vec![F::zero(); l];
    out.iter_mut().for_each(|v| *v = F::zero());
    let mut j0 = model.value_grad(traj.time(0), traj.state(0), &mut g0)?;
    for i in 0..traj.steps() {
        em.emit(model, traj.time(i), traj.state(i), &g0, &mut xi, None)?;
        let j1 = model.value_grad(traj.time(i + 1), traj.state(i + 1), &mut g1)?;
        let dm = increment(j0, j1, traj.rewards()[i], rho, traj.dt());
        if !dm.is_finite() {
            return Err(Error::NonFinite("martingale increment"));
        }
        crate::scalar::axpy(dm, &xi, out);
        j0 = j1;
        std::mem::swap(&mut g0, &mut g1);
    }
    Ok(())
}

/// Batch mean of per-trajectory moment contributions, reduced in index order.
pub fn moment_estimate<F: Scalar>(
    model: &ValueModel<F>,
    batch: &EpisodeBatch<F>,
    test: &TestFunction<F>,
    rho: F,
) -> Result<MomentEstimate<F>> {
    let d = test.dim(model.n_params());
    let mut per_episode = vec![F::zero(); d];
    let mut sum = vec![F::zero(); d];
    let mut sum_sq = vec![F::zero(); d];
    for traj in batch.iter() {
        trajectory_moment(model, traj, test, rho, &mut per_episode)?;
        for j in 0..d {
            sum[j] += per_episode[j];
            sum_sq[j] += per_episode[j] * per_episode[j];
        }
    }
    let n = batch.len();
    let nf = F::from_usize_lossy(n);
    let g: Vec<F> = sum.iter().map(|&s| s / nf).collect();
    let covariance_diag = (0..d)
        .map(|j| {
            if n < 2 {
                F::zero()
            } else {
                let var = (sum_sq[j] - nf * g[j] * g[j]) / (nf - F::one());
                var.max(F::zero()) / nf
            }
        })
        .collect();
    Ok(MomentEstimate { g, n_episodes: n, covariance_diag })
}

/// The `i`-th summand `xi_i dm_i` (trace tests replay the history `0..=i`).
pub fn moment_residual_step<F: Scalar>(
    model: &ValueModel<F>,
    traj: &Trajectory<F>,
    i: usize,
    test: &TestFunction<F>,
    rho: F,
) -> Result<Vec<F>> {
    let k = traj.steps();
    if i >= k {
        return Err(Error::IndexOutOfRange { index: i, max: k.saturating_sub(1) });
    }
    let l = model.n_params();
    let mut em = test.emitter(l, traj.dt(), false)?;
    let mut xi = vec![F::zero(); em.dim()];
    let mut g = vec![F::zero(); l];
    let mut j0 = F::zero();
    for j in 0..=i {
        j0 = model.value_grad(traj.time(j), traj.state(j), &mut g)?;
        em.emit(model, traj.time(j), traj.state(j), &g, &mut xi, None)?;
    }
    let j1 = model.eval(traj.time(i + 1), traj.state(i + 1))?;
    let dm = increment(j0, j1, traj.rewards()[i], rho, traj.dt());
    Ok(xi.iter().map(|&v| v * dm).collect())
}
