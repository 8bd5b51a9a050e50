//! Parametric value-function families and the martingale increment they induce.

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::env::{TimeGrid, Trajectory};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Above this magnitude an exponent is treated as divergence instead of overflowing to infinity.
pub const EXPONENT_LIMIT: f64 = 500.0;

/// Writes `phi(t, x)` into the output slice.
pub type BasisFn<F> = Arc<dyn Fn(F, &[F], &mut [F]) + Send + Sync>;
pub type OffsetFn<F> = Arc<dyn Fn(F, &[F]) -> F + Send + Sync>;

/// `J = offset(t, x) + sum_j theta_j phi_j(t, x)`.
#[derive(Clone)]
pub struct LinearBasis<F> {
    pub len: usize,
    pub basis: BasisFn<F>,
    pub offset: Option<OffsetFn<F>>,
    pub label: String,
}

impl<F: Scalar> LinearBasis<F> {
    pub fn new(len: usize, label: impl Into<String>, basis: BasisFn<F>) -> Self {
        Self { len, basis, offset: None, label: label.into() }
    }

    pub fn with_offset(mut self, offset: OffsetFn<F>) -> Self {
        self.offset = Some(offset);
        self
    }

    /// Basis `(x^2/2, x, 1)`; the same function space as [`Family::LqQuadratic`].
    pub fn lq() -> Self {
        let half = F::lit(0.5);
        Self::new(3, "lq", Arc::new(move |_, x: &[F], out: &mut [F]| {
            out[0] = half * x[0] * x[0];
            out[1] = x[0];
            out[2] = F::one();
        }))
    }

    /// `J = x^2 / (2 rho) + theta`.
    pub fn shifted_quadratic(rho: F) -> Self {
        let c = F::one() / (F::lit(2.0) * rho);
        Self::new(1, "shifted-quadratic", Arc::new(|_, _: &[F], out: &mut [F]| out[0] = F::one()))
            .with_offset(Arc::new(move |_, x: &[F]| c * x[0] * x[0]))
    }
}

/// Architecture constants of the payoff-residual network.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MlpSpec<F> {
    pub strike: F,
    pub maturity: F,
    pub hidden1: usize,
    pub hidden2: usize,
}

impl<F: Scalar> MlpSpec<F> {
    pub fn new(strike: F, maturity: F) -> Self {
        Self { strike, maturity, hidden1: 128, hidden2: 64 }
    }

    pub fn n_params(&self) -> usize {
        let (h1, h2) = (self.hidden1, self.hidden2);
        h1 * 2 + h1 + h2 * h1 + h2 + h2 + 1
    }
}

#[derive(Clone)]
pub enum Family<F> {
    /// `[theta (1 - t) + 1] x`.
    AffineTimeScaled,
    /// `[th0 (1 - t) + 1] x^2 + th1 (1 - t) x + th2 (1 - t)`.
    QuadTriple,
    /// `theta x^3`.
    Cubic,
    /// `x + (1 - t) exp(theta x - theta^2 t / 2 + theta)`.
    ExpPinned,
    /// `x + (1 - t) exp(theta x - theta^2 t / 2) [(theta + 1)^2 + 1]`.
    ExpUnpinned,
    LinearBasis(LinearBasis<F>),
    /// `th0 x^2 / 2 + th1 x + th2`.
    LqQuadratic,
    /// `(x - K)^+ + (T - t) NN(t, x)` with two softplus hidden layers.
    PayoffResidualMlp(MlpSpec<F>),
    /// `J_i(x) = theta_i x` on grid slice `i`, with `theta_K = 1` fixed.
    Sectional(TimeGrid<F>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FamilyId {
    AffineTimeScaled,
    QuadTriple,
    Cubic,
    ExpPinned,
    ExpUnpinned,
    LinearBasis,
    LqQuadratic,
    PayoffResidualMlp,
    Sectional,
}

impl fmt::Display for FamilyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            FamilyId::AffineTimeScaled => "affine-time-scaled",
            FamilyId::QuadTriple => "quad-triple",
            FamilyId::Cubic => "cubic",
            FamilyId::ExpPinned => "exp-pinned",
            FamilyId::ExpUnpinned => "exp-unpinned",
            FamilyId::LinearBasis => "linear-basis",
            FamilyId::LqQuadratic => "lq-quadratic",
            FamilyId::PayoffResidualMlp => "payoff-residual-mlp",
            FamilyId::Sectional => "sectional",
        };
        f.write_str(s)
    }
}

impl<F: Scalar> Family<F> {
    pub fn id(&self) -> FamilyId {
        match self {
            Family::AffineTimeScaled => FamilyId::AffineTimeScaled,
            Family::QuadTriple => FamilyId::QuadTriple,
            Family::Cubic => FamilyId::Cubic,
            Family::ExpPinned => FamilyId::ExpPinned,
            Family::ExpUnpinned => FamilyId::ExpUnpinned,
            Family::LinearBasis(_) => FamilyId::LinearBasis,
            Family::LqQuadratic => FamilyId::LqQuadratic,
            Family::PayoffResidualMlp(_) => FamilyId::PayoffResidualMlp,
            Family::Sectional(_) => FamilyId::Sectional,
        }
    }

    pub fn n_params(&self) -> usize {
        match self {
            Family::AffineTimeScaled | Family::Cubic | Family::ExpPinned | Family::ExpUnpinned => 1,
            Family::QuadTriple | Family::LqQuadratic => 3,
            Family::LinearBasis(b) => b.len,
            Family::PayoffResidualMlp(spec) => spec.n_params(),
            Family::Sectional(grid) => grid.steps(),
        }
    }

    /// True when `J` is linear in `theta`, so its parameter Hessian vanishes.
    pub fn is_linear(&self) -> bool {
        !matches!(self, Family::ExpPinned | Family::ExpUnpinned | Family::PayoffResidualMlp(_))
    }

    /// Horizon at which the family reproduces the terminal payoff for every `theta`.
    pub fn pinned_at(&self) -> Option<F> {
        match self {
            Family::AffineTimeScaled | Family::QuadTriple | Family::ExpPinned => Some(F::one()),
            Family::PayoffResidualMlp(spec) => Some(spec.maturity),
            Family::Sectional(grid) => Some(grid.t_end()),
            _ => None,
        }
    }
}

impl<F: Scalar> fmt::Debug for Family<F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Family::LinearBasis(b) => write!(f, "LinearBasis({}, len {})", b.label, b.len),
            Family::PayoffResidualMlp(spec) => write!(f, "PayoffResidualMlp({spec:?})"),
            Family::Sectional(g) => write!(f, "Sectional(K = {})", g.steps()),
            other => write!(f, "{}", other.id()),
        }
    }
}

#[inline]
fn guarded_exp<F: Scalar>(e: F, family: &'static str) -> Result<F> {
    if !(e.abs() <= F::lit(EXPONENT_LIMIT)) {
        return Err(Error::Overflow { family, exponent: e.to_f64_lossy() });
    }
    Ok(e.exp())
}

#[inline]
fn softplus<F: Scalar>(z: F) -> F {
    if z > F::lit(30.0) {
        z
    } else {
        z.exp().ln_1p()
    }
}

#[inline]
fn sigmoid<F: Scalar>(z: F) -> F {
    F::one() / (F::one() + (-z).exp())
}

/// A family together with its current parameter vector.
#[derive(Clone)]
pub struct ValueModel<F> {
    family: Family<F>,
    params: Vec<F>,
}

impl<F: Scalar> fmt::Debug for ValueModel<F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ValueModel")
            .field("family", &self.family)
            .field("n_params", &self.params.len())
            .finish()
    }
}

impl<F: Scalar> ValueModel<F> {
    pub fn new(family: Family<F>, params: Vec<F>) -> Result<Self> {
        if params.len() != family.n_params() {
            return Err(Error::Dimension(format!(
                "{} expects {} parameters, got {}",
                family.id(),
                family.n_params(),
                params.len()
            )));
        }
        if !params.iter().all(|p| p.is_finite()) {
            return Err(Error::NonFinite("initial parameters"));
        }
        Ok(Self { family, params })
    }

    /// Network with uniform `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` weights and zero biases.
    pub fn mlp(spec: MlpSpec<F>, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h1, h2) = (spec.hidden1, spec.hidden2);
        let mut params = Vec::with_capacity(spec.n_params());
        let mut layer = |rows: usize, cols: usize, params: &mut Vec<F>| {
            let bound = 1.0 / (cols as f64).sqrt();
            for _ in 0..rows * cols {
                params.push(F::lit(rng.random_range(-bound..bound)));
            }
            params.extend(std::iter::repeat_n(F::zero(), rows));
        };
        layer(h1, 2, &mut params);
        layer(h2, h1, &mut params);
        layer(1, h2, &mut params);
        Self { family: Family::PayoffResidualMlp(spec), params }
    }

    pub fn family(&self) -> &Family<F> {
        &self.family
    }

    pub fn params(&self) -> &[F] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [F] {
        &mut self.params
    }

    pub fn set_params(&mut self, params: &[F]) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::Dimension(format!(
                "expected {} parameters, got {}",
                self.params.len(),
                params.len()
            )));
        }
        self.params.copy_from_slice(params);
        Ok(())
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn eval(&self, t: F, x: &[F]) -> Result<F> {
        self.eval_at(&self.params, t, x)
    }

    /// Evaluates with an explicit parameter vector instead of the stored one.
    pub fn eval_at(&self, theta: &[F], t: F, x: &[F]) -> Result<F> {
        let one = F::one();
        let half = F::lit(0.5);
        let v = match &self.family {
            Family::AffineTimeScaled => (theta[0] * (one - t) + one) * x[0],
            Family::QuadTriple => {
                let s = one - t;
                (theta[0] * s + one) * x[0] * x[0] + theta[1] * s * x[0] + theta[2] * s
            }
            Family::Cubic => theta[0] * x[0] * x[0] * x[0],
            Family::ExpPinned => {
                let th = theta[0];
                let e = guarded_exp(th * x[0] - half * th * th * t + th, "exp-pinned")?;
                x[0] + (one - t) * e
            }
            Family::ExpUnpinned => {
                let th = theta[0];
                let e = guarded_exp(th * x[0] - half * th * th * t, "exp-unpinned")?;
                let p = (th + one) * (th + one) + one;
                x[0] + (one - t) * e * p
            }
            Family::LinearBasis(b) => {
                let mut phi = [F::zero(); 8];
                let mut heap;
                let phi: &mut [F] = if b.len <= 8 {
                    &mut phi[..b.len]
                } else {
                    heap = vec![F::zero(); b.len];
                    &mut heap
                };
                (b.basis)(t, x, phi);
                let off = b.offset.as_ref().map_or(F::zero(), |o| o(t, x));
                off + crate::scalar::dot(theta, phi)
            }
            Family::LqQuadratic => half * theta[0] * x[0] * x[0] + theta[1] * x[0] + theta[2],
            Family::PayoffResidualMlp(spec) => {
                let nn = mlp_forward(spec, theta, t, x[0], None);
                (x[0] - spec.strike).max(F::zero()) + (spec.maturity - t) * nn
            }
            Family::Sectional(grid) => {
                let i = slice_index(grid, t);
                let th = if i >= grid.steps() { one } else { theta[i] };
                th * x[0]
            }
        };
        if !v.is_finite() {
            return Err(Error::NonFinite("value function evaluation"));
        }
        Ok(v)
    }

    /// Returns `J` and writes `dJ/dtheta` into `grad`.
    pub fn value_grad(&self, t: F, x: &[F], grad: &mut [F]) -> Result<F> {
        self.value_grad_at(&self.params, t, x, grad)
    }

    pub fn value_grad_at(&self, theta: &[F], t: F, x: &[F], grad: &mut [F]) -> Result<F> {
        let one = F::one();
        let half = F::lit(0.5);
        let v = match &self.family {
            Family::AffineTimeScaled => {
                grad[0] = (one - t) * x[0];
                (theta[0] * (one - t) + one) * x[0]
            }
            Family::QuadTriple => {
                let s = one - t;
                grad[0] = s * x[0] * x[0];
                grad[1] = s * x[0];
                grad[2] = s;
                (theta[0] * s + one) * x[0] * x[0] + theta[1] * s * x[0] + theta[2] * s
            }
            Family::Cubic => {
                let c = x[0] * x[0] * x[0];
                grad[0] = c;
                theta[0] * c
            }
            Family::ExpPinned => {
                let th = theta[0];
                let e = guarded_exp(th * x[0] - half * th * th * t + th, "exp-pinned")?;
                grad[0] = (one - t) * e * (x[0] - th * t + one);
                x[0] + (one - t) * e
            }
            Family::ExpUnpinned => {
                let th = theta[0];
                let e = guarded_exp(th * x[0] - half * th * th * t, "exp-unpinned")?;
                let p = (th + one) * (th + one) + one;
                let de = x[0] - th * t;
                grad[0] = (one - t) * e * (de * p + F::lit(2.0) * (th + one));
                x[0] + (one - t) * e * p
            }
            Family::LinearBasis(b) => {
                (b.basis)(t, x, grad);
                let off = b.offset.as_ref().map_or(F::zero(), |o| o(t, x));
                off + crate::scalar::dot(theta, grad)
            }
            Family::LqQuadratic => {
                grad[0] = half * x[0] * x[0];
                grad[1] = x[0];
                grad[2] = one;
                half * theta[0] * x[0] * x[0] + theta[1] * x[0] + theta[2]
            }
            Family::PayoffResidualMlp(spec) => {
                let nn = mlp_forward(spec, theta, t, x[0], Some(grad));
                let scale = spec.maturity - t;
                for g in grad.iter_mut() {
                    *g *= scale;
                }
                (x[0] - spec.strike).max(F::zero()) + scale * nn
            }
            Family::Sectional(grid) => {
                grad.fill(F::zero());
                let i = slice_index(grid, t);
                if i >= grid.steps() {
                    x[0]
                } else {
                    grad[i] = x[0];
                    theta[i] * x[0]
                }
            }
        };
        if !v.is_finite() || !grad.iter().all(|g| g.is_finite()) {
            return Err(Error::NonFinite("value function gradient"));
        }
        Ok(v)
    }

    /// Row-major `L x L` parameter Hessian of `J`.
    ///
    /// Closed form for the scalar exponential families, zero for linear ones,
    /// central differences of the analytic gradient for the network.
    pub fn hessian(&self, t: F, x: &[F], out: &mut [F]) -> Result<()> {
        let one = F::one();
        let half = F::lit(0.5);
        let theta = &self.params;
        match &self.family {
            f if f.is_linear() => out.fill(F::zero()),
            Family::ExpPinned => {
                let th = theta[0];
                let e = guarded_exp(th * x[0] - half * th * th * t + th, "exp-pinned")?;
                let de = x[0] - th * t + one;
                out[0] = (one - t) * e * (de * de - t);
            }
            Family::ExpUnpinned => {
                let th = theta[0];
                let e = guarded_exp(th * x[0] - half * th * th * t, "exp-unpinned")?;
                let p = (th + one) * (th + one) + one;
                let dp = F::lit(2.0) * (th + one);
                let de = x[0] - th * t;
                out[0] = (one - t) * e * (de * (de * p + dp) - t * p + de * dp + F::lit(2.0));
            }
            _ => {
                let l = self.n_params();
                let mut plus = vec![F::zero(); l];
                let mut minus = vec![F::zero(); l];
                let mut th = theta.clone();
                for j in 0..l {
                    let h = F::lit(1e-5) * th[j].abs().max(one);
                    let orig = th[j];
                    th[j] = orig + h;
                    self.value_grad_at(&th, t, x, &mut plus)?;
                    th[j] = orig - h;
                    self.value_grad_at(&th, t, x, &mut minus)?;
                    th[j] = orig;
                    for r in 0..l {
                        out[r * l + j] = (plus[r] - minus[r]) / (h + h);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Grid slice holding time `t` (nearest grid point).
fn slice_index<F: Scalar>(grid: &TimeGrid<F>, t: F) -> usize {
    let r = ((t - grid.t0()) / grid.dt()).round();
    if r <= F::zero() {
        0
    } else {
        r.to_usize().unwrap_or(usize::MAX).min(grid.steps())
    }
}

/// Network output; when `grad` is given, writes `d out / d theta` by reverse accumulation.
fn mlp_forward<F: Scalar>(spec: &MlpSpec<F>, theta: &[F], t: F, x: F, grad: Option<&mut [F]>) -> F {
    let (h1, h2) = (spec.hidden1, spec.hidden2);
    let w1 = &theta[..2 * h1];
    let b1 = &theta[2 * h1..3 * h1];
    let o2 = 3 * h1;
    let w2 = &theta[o2..o2 + h2 * h1];
    let b2 = &theta[o2 + h2 * h1..o2 + h2 * h1 + h2];
    let o3 = o2 + h2 * h1 + h2;
    let w3 = &theta[o3..o3 + h2];
    let b3 = theta[o3 + h2];

    let mut z1 = vec![F::zero(); h1];
    let mut a1 = vec![F::zero(); h1];
    for k in 0..h1 {
        z1[k] = w1[2 * k] * t + w1[2 * k + 1] * x + b1[k];
        a1[k] = softplus(z1[k]);
    }
    let mut z2 = vec![F::zero(); h2];
    let mut a2 = vec![F::zero(); h2];
    for r in 0..h2 {
        let row = &w2[r * h1..(r + 1) * h1];
        z2[r] = crate::scalar::dot(row, &a1) + b2[r];
        a2[r] = softplus(z2[r]);
    }
    let out = crate::scalar::dot(w3, &a2) + b3;

    if let Some(g) = grad {
        let mut d1 = vec![F::zero(); h1];
        for r in 0..h2 {
            let d2 = w3[r] * sigmoid(z2[r]);
            g[o3 + r] = a2[r];
            g[o2 + h2 * h1 + r] = d2;
            let row = &w2[r * h1..(r + 1) * h1];
            let grow = &mut g[o2 + r * h1..o2 + (r + 1) * h1];
            for k in 0..h1 {
                grow[k] = d2 * a1[k];
                d1[k] += d2 * row[k];
            }
        }
        g[o3 + h2] = F::one();
        for k in 0..h1 {
            let d = d1[k] * sigmoid(z1[k]);
            g[2 * k] = d * t;
            g[2 * k + 1] = d * x;
            g[2 * h1 + k] = d;
        }
    }
    out
}

/// One martingale increment and its parameter gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct MIncrement<F> {
    pub dm: F,
    pub grad_dm: Vec<F>,
}

/// `M_{i+1} - M_i`; with `rho > 0` the discounted form `dJ + r dt - rho J dt`.
pub fn m_increment<F: Scalar>(
    model: &ValueModel<F>,
    traj: &Trajectory<F>,
    i: usize,
    rho: F,
) -> Result<MIncrement<F>> {
    let k = traj.steps();
    if i >= k {
        return Err(Error::IndexOutOfRange { index: i, max: k.saturating_sub(1) });
    }
    let l = model.n_params();
    let mut g0 = vec![F::zero(); l];
    let mut g1 = vec![F::zero(); l];
    let j0 = model.value_grad(traj.time(i), traj.state(i), &mut g0)?;
    let j1 = model.value_grad(traj.time(i + 1), traj.state(i + 1), &mut g1)?;
    let dt = traj.dt();
    let dm = increment(j0, j1, traj.rewards()[i], rho, dt);
    let mut grad_dm = g1;
    if rho == F::zero() {
        for (a, b) in grad_dm.iter_mut().zip(&g0) {
            *a -= *b;
        }
    } else {
        let c = F::one() + rho * dt;
        for (a, b) in grad_dm.iter_mut().zip(&g0) {
            *a -= c * *b;
        }
    }
    Ok(MIncrement { dm, grad_dm })
}

/// Scalar increment from the two endpoint values.
#[inline]
pub fn increment<F: Scalar>(j0: F, j1: F, reward: F, rho: F, dt: F) -> F {
    if rho == F::zero() {
        j1 - j0 + reward * dt
    } else {
        j1 - j0 + reward * dt - rho * j0 * dt
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub probes: usize,
    pub max_rel_deviation: f64,
    pub worst_t: f64,
    pub worst_x: f64,
    pub worst_theta: Vec<f64>,
    pub pass: bool,
}

/// Compares analytic gradients with central differences (step `1e-5`) at random probes.
///
/// Probes draw `t` uniformly on the model's time range, `x` uniformly on `[-2, 2]`
/// (`[0.5, 1.5]` for the option network), and perturb each parameter by up to `0.5`.
/// The deviation of a probe is `|g - g_fd|_inf / max(|g|_inf, |g_fd|_inf, 1)`.
pub fn grad_check<F: Scalar>(model: &ValueModel<F>, probes: usize, seed: u64) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let l = model.n_params();
    let horizon = model.family().pinned_at().map_or(1.0, |h| h.to_f64_lossy());
    let (xlo, xhi) = match model.family() {
        Family::PayoffResidualMlp(_) => (0.5, 1.5),
        _ => (-2.0, 2.0),
    };
    let mut report = GradCheckReport {
        probes,
        max_rel_deviation: 0.0,
        worst_t: 0.0,
        worst_x: 0.0,
        worst_theta: Vec::new(),
        pass: true,
    };
    let mut probe_model = model.clone();
    let mut grad = vec![F::zero(); l];
    for _ in 0..probes.max(1) {
        let t: f64 = rng.random_range(0.0..horizon);
        let x: f64 = rng.random_range(xlo..xhi);
        let perturb = !matches!(model.family(), Family::PayoffResidualMlp(_));
        let theta: Vec<F> = model
            .params()
            .iter()
            .map(|&p| if perturb { p + F::lit(rng.random_range(-0.5..0.5)) } else { p })
            .collect();
        probe_model.params_mut().copy_from_slice(&theta);
        let (tf, xf) = (F::lit(t), [F::lit(x)]);
        let dev = match probe_model.value_grad(tf, &xf, &mut grad) {
            Ok(_) => {
                let mut th = theta.clone();
                let mut diff = 0.0f64;
                let mut scale = 1.0f64;
                for j in 0..l {
                    let h = 1e-5 * th[j].to_f64_lossy().abs().max(1.0);
                    let orig = th[j];
                    th[j] = orig + F::lit(h);
                    let up = probe_model.eval_at(&th, tf, &xf);
                    th[j] = orig - F::lit(h);
                    let down = probe_model.eval_at(&th, tf, &xf);
                    th[j] = orig;
                    let fd = match (up, down) {
                        (Ok(u), Ok(d)) => (u.to_f64_lossy() - d.to_f64_lossy()) / (2.0 * h),
                        _ => f64::NAN,
                    };
                    let g = grad[j].to_f64_lossy();
                    diff = diff.max((g - fd).abs());
                    scale = scale.max(g.abs()).max(fd.abs());
                }
                diff / scale
            }
            Err(_) => f64::NAN,
        };
        if dev.is_nan() || dev > report.max_rel_deviation {
            report.max_rel_deviation = if dev.is_nan() { f64::INFINITY } else { dev };
            report.worst_t = t;
            report.worst_x = x;
            report.worst_theta = theta.iter().map(|v| v.to_f64_lossy()).collect();
        }
    }
    report.pass = report.max_rel_deviation <= 1e-4;
    report
}
