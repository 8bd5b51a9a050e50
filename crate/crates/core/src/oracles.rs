//! Closed-form and brute-force ground truths.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    ClosedForm,
    NumericBruteforce,
}

/// Grid and refinement record of a brute-force search.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SearchRecord {
    pub bounds: Vec<(f64, f64)>,
    pub grid_n: usize,
    pub refinements: usize,
    pub evaluations: usize,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct OracleValue {
    pub value: Vec<f64>,
    pub provenance: Provenance,
    pub tolerance: f64,
    /// Which algorithm is expected to converge to this value.
    pub reference: String,
    pub search: Option<SearchRecord>,
}

impl OracleValue {
    fn closed(value: Vec<f64>, tolerance: f64, reference: &str) -> Self {
        Self { value, provenance: Provenance::ClosedForm, tolerance, reference: reference.into(), search: None }
    }

    pub fn scalar(&self) -> f64 {
        self.value[0]
    }
}

/// Standard normal CDF through `erfc`.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x * FRAC_1_SQRT_2)
}

pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

/// Black-Scholes call price and delta; at or after maturity returns the payoff and `1{x > K}`.
pub fn black_scholes(t: f64, x: f64, strike: f64, maturity: f64, r: f64, q: f64, sigma: f64) -> Result<(f64, f64)> {
    if !(sigma > 0.0 && x > 0.0 && strike > 0.0) || ![t, maturity, r, q].iter().all(|v| v.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "black-scholes needs sigma > 0, x > 0, K > 0 (sigma={sigma}, x={x}, K={strike})"
        )));
    }
    if t >= maturity {
        let delta = if x > strike { 1.0 } else { 0.0 };
        return Ok(((x - strike).max(0.0), delta));
    }
    let tau = maturity - t;
    let s = sigma * tau.sqrt();
    let d_plus = ((x / strike).ln() + (r - q + 0.5 * sigma * sigma) * tau) / s;
    let d_minus = d_plus - s;
    let df_q = (-q * tau).exp();
    let price = x * df_q * normal_cdf(d_plus) - strike * (-r * tau).exp() * normal_cdf(d_minus);
    Ok((price, df_q * normal_cdf(d_plus)))
}

/// `E[e^{-r tau} (X_T - K)^+]` by composite Simpson integration over the log-normal law.
pub fn black_scholes_by_integration(
    t: f64,
    x: f64,
    strike: f64,
    maturity: f64,
    r: f64,
    q: f64,
    sigma: f64,
    nodes: usize,
) -> Result<f64> {
    if t >= maturity {
        return Ok((x - strike).max(0.0));
    }
    let tau = maturity - t;
    let drift = (r - q - 0.5 * sigma * sigma) * tau;
    let vol = sigma * tau.sqrt();
    let payoff = |z: f64| (x * (drift + vol * z).exp() - strike).max(0.0) * normal_pdf(z);
    let n = nodes.max(2) & !1;
    Ok((-r * tau).exp() * simpson(payoff, -12.0, 12.0, n))
}

/// Composite Simpson rule with `n` (even) panels.
pub fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let n = n.max(2) & !1;
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        s += w * f(a + h * i as f64);
    }
    s * h / 3.0
}

/// Coefficients of `J(x) = A x^2 / 2 + B x + C` for `dX = a(b - X)dt + sigma dW`,
/// running reward `x^2 / 2 + q x`, discount `rho`.
pub fn lq_coefficients(a: f64, b: f64, sigma: f64, rho: f64, q: f64) -> Result<(f64, f64, f64)> {
    if !(rho > 0.0 && rho + 2.0 * a > 0.0 && rho + a > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "LQ coefficients need rho > 0, rho + 2a > 0, rho + a > 0 (a={a}, rho={rho})"
        )));
    }
    let big_a = 1.0 / (rho + 2.0 * a);
    let big_b = (a * b * big_a + q) / (rho + a);
    let big_c = (a * b * big_b + 0.5 * sigma * sigma * big_a) / rho;
    Ok((big_a, big_b, big_c))
}

/// Coefficients of `(x^2, x, 1)` in `L J + r - rho J` for the quadratic `J` above.
pub fn lq_bellman_residual(a: f64, b: f64, sigma: f64, rho: f64, q: f64, coef: (f64, f64, f64)) -> [f64; 3] {
    let (ca, cb, cc) = coef;
    // L J = a(b - x)(A x + B) + sigma^2 A / 2
    let x2 = -a * ca + 0.5 - 0.5 * rho * ca;
    let x1 = a * b * ca - a * cb + q - rho * cb;
    let x0 = a * b * cb + 0.5 * sigma * sigma * ca - rho * cc;
    [x2, x1, x0]
}

/// Mean and variance of the conventional CTD(0) iterate for the Brownian LQ
/// problem with `J = x^2 / (2 rho) + theta`, started from `X_0 = 0`.
pub fn ctd0_theta_moments_bm_lq(theta0: f64, rho: f64, t: f64) -> Result<(f64, f64)> {
    if !(rho > 0.0 && t >= 0.0) {
        return Err(Error::InvalidArgument(format!("need rho > 0 and t >= 0 (rho={rho}, t={t})")));
    }
    let e = (-rho * t).exp();
    let rho2 = rho * rho;
    let mean = (2.0 * theta0 * rho2 * e + 1.0 - e) / (2.0 * rho2);
    // Solves d/dt E[z^2] = -2 rho E[z^2] + t / rho^2 with z_0 = 0.
    let var = ((-2.0 * rho * t).exp() - 1.0 + 2.0 * rho * t) / (4.0 * rho2 * rho2);
    Ok((mean, var.max(0.0)))
}

/// Example 4 CTD(0) moment condition in closed form.
pub fn ex4_ctd0_moment(theta: f64) -> f64 {
    let t2 = theta * theta;
    (2.0 * theta).exp() * (2.0 - theta + t2 - t2 * theta + t2.exp() * (-2.0 + theta + t2)) / theta.powi(5)
}

/// Example 4 CTD(1) moment condition in closed form.
pub fn ex4_ctd1_moment(theta: f64) -> f64 {
    let t2 = theta * theta;
    (2.0 * theta).exp()
        * (6.0 + 2.0 * t2.exp() * (-3.0 + theta + t2) - (theta - 1.0) * theta * (-2.0 + 2.0 * theta + t2 * theta))
        / theta.powi(7)
}

/// `int_0^1 (1 - t)^2 e^{theta^2 t} dt` in closed form.
fn weighted_exp_integral(theta: f64) -> f64 {
    let t2 = theta * theta;
    -(2.0 - 2.0 * t2.exp() + 2.0 * t2 + t2 * t2) / t2.powi(3)
}

/// Example 4 MSVE in closed form.
pub fn ex4_msve(theta: f64) -> f64 {
    (2.0 * theta).exp() * weighted_exp_integral(theta)
}

/// Example 5 MSVE (the martingale-loss target) in closed form.
pub fn ex5_msve(theta: f64) -> f64 {
    let p = (theta + 1.0).powi(2) + 1.0;
    weighted_exp_integral(theta) * p * p
}

/// Example 3 MSVE: `int_0^1 (t - 6 theta t^2 + 15 theta^2 t^3) dt`.
pub fn ex3_msve(theta: f64) -> f64 {
    0.5 - 2.0 * theta + 3.75 * theta * theta
}

/// Example 1 MSTDE: `theta^2 / 3 + theta + 1`.
pub fn ex1_mstde(theta: f64) -> f64 {
    theta * theta / 3.0 + theta + 1.0
}

/// Example 1 global family: `E int_0^1 theta^2 (1 - t)^2 W_t^2 dt = theta^2 / 12`.
pub fn ex1_global_msve(theta: f64) -> f64 {
    theta * theta / 12.0
}

/// Example 1 sectional family `J_i = theta_i x`: `sum_i (theta_i - 1)^2 t_i dt`.
pub fn ex1_sectional_msve(theta: &[f64], points: &[f64]) -> f64 {
    theta
        .iter()
        .zip(points.windows(2))
        .map(|(th, w)| (th - 1.0).powi(2) * w[0] * (w[1] - w[0]))
        .sum()
}

/// Bisection root of `f` on `[lo, hi]` (a sign change is required).
pub fn bisect(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64, tol: f64) -> Result<f64> {
    let mut flo = f(lo);
    let fhi = f(hi);
    if !(flo.is_finite() && fhi.is_finite()) || flo * fhi > 0.0 {
        return Err(Error::InvalidArgument(format!("no sign change on [{lo}, {hi}]: f = ({flo}, {fhi})")));
    }
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        let fm = f(mid);
        if fm == 0.0 {
            return Ok(mid);
        }
        if (fm < 0.0) == (flo < 0.0) {
            lo = mid;
            flo = fm;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

const GOLDEN: f64 = 0.618_033_988_749_894_9;

fn golden_section(f: &dyn Fn(f64) -> f64, mut a: f64, mut b: f64, iters: usize, evals: &mut usize) -> (f64, f64) {
    let mut c = b - GOLDEN * (b - a);
    let mut d = a + GOLDEN * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    *evals += 2;
    for _ in 0..iters {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - GOLDEN * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + GOLDEN * (b - a);
            fd = f(d);
        }
        *evals += 1;
    }
    (0.5 * (a + b), b - a)
}

/// Grid scan over `bounds` followed by `refinements` rounds of coordinate-wise golden-section search.
///
/// A minimizer on the outer boundary of the grid is an error because it points to wrong bounds.
pub fn bruteforce_minimize(
    f: impl Fn(&[f64]) -> f64,
    bounds: &[(f64, f64)],
    grid_n: usize,
    refinements: usize,
) -> Result<OracleValue> {
    let dim = bounds.len();
    if !(1..=3).contains(&dim) || grid_n < 3 {
        return Err(Error::InvalidArgument(format!("brute force needs 1-3 dims and grid_n >= 3, got {dim}, {grid_n}")));
    }
    let h: Vec<f64> = bounds.iter().map(|&(lo, hi)| (hi - lo) / (grid_n - 1) as f64).collect();
    let mut best = f64::INFINITY;
    let mut best_idx = vec![0usize; dim];
    let mut idx = vec![0usize; dim];
    let mut point = vec![0.0; dim];
    let mut evals = 0;
    loop {
        for j in 0..dim {
            point[j] = bounds[j].0 + h[j] * idx[j] as f64;
        }
        let v = f(&point);
        evals += 1;
        if !v.is_finite() {
            return Err(Error::NonFinite("brute-force objective"));
        }
        if v < best {
            best = v;
            best_idx.clone_from(&idx);
        }
        let mut j = 0;
        while j < dim {
            idx[j] += 1;
            if idx[j] < grid_n {
                break;
            }
            idx[j] = 0;
            j += 1;
        }
        if j == dim {
            break;
        }
    }
    let mut x: Vec<f64> = (0..dim).map(|j| bounds[j].0 + h[j] * best_idx[j] as f64).collect();
    if best_idx.iter().any(|&i| i == 0 || i == grid_n - 1) {
        return Err(Error::BoundaryMinimum { at: x });
    }
    let mut width = h.iter().map(|v| 2.0 * v).collect::<Vec<_>>();
    for _ in 0..refinements.max(2) {
        for j in 0..dim {
            let lo = x[j] - width[j];
            let hi = x[j] + width[j];
            let xs = x.clone();
            let g = |v: f64| {
                let mut p = xs.clone();
                p[j] = v;
                f(&p)
            };
            let (m, w) = golden_section(&g, lo, hi, 80, &mut evals);
            x[j] = m;
            width[j] = (w.max(1e-12) * 64.0).min(width[j]);
        }
    }
    let tolerance = width.iter().fold(0.0f64, |a, &w| a.max(w / 64.0));
    Ok(OracleValue {
        value: x,
        provenance: Provenance::NumericBruteforce,
        tolerance,
        reference: "brute-force search".into(),
        search: Some(SearchRecord { bounds: bounds.to_vec(), grid_n, refinements: refinements.max(2), evaluations: evals }),
    })
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RateFit {
    pub mesh_sizes: Vec<f64>,
    pub errors: Vec<f64>,
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

/// Least-squares line through `(log dt, log error)`.
pub fn rate_fit(mesh_errors: &[(f64, f64)]) -> Result<RateFit> {
    if mesh_errors.len() < 3 {
        return Err(Error::InvalidArgument(format!("rate fit needs >= 3 points, got {}", mesh_errors.len())));
    }
    if let Some(&(dt, e)) = mesh_errors.iter().find(|(dt, e)| !(*e > 0.0 && *dt > 0.0)) {
        return Err(Error::InvalidArgument(format!("nonpositive entry (dt={dt}, error={e})")));
    }
    let mut pts = mesh_errors.to_vec();
    pts.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    let xs: Vec<f64> = pts.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = pts.iter().map(|p| p.1.ln()).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r_squared = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    Ok(RateFit {
        mesh_sizes: pts.iter().map(|p| p.0).collect(),
        errors: pts.iter().map(|p| p.1).collect(),
        slope,
        intercept,
        r_squared,
    })
}

pub const EXAMPLE_IDS: &[&str] = &[
    "ex1_mstde",
    "ex1_truth",
    "ex2_mstde",
    "ex2_truth",
    "ex3_msve",
    "ex3_moment",
    "ex4_ctd0",
    "ex4_ctd1",
    "ex4_msve",
    "ex5_ml",
    "ex5_mspbe",
    "lq_ou",
    "lq_bm_theta_true",
];

/// Tabulated targets, each computed from its closed form.
pub fn analytic_minimizer(example_id: &str) -> Result<OracleValue> {
    let tol = 1e-10;
    Ok(match example_id {
        "ex1_mstde" => OracleValue::closed(vec![-1.5], 0.0, "residual-gradient"),
        "ex1_truth" => OracleValue::closed(vec![0.0], 0.0, "ml, ctd0, ctd1"),
        "ex2_mstde" => OracleValue::closed(vec![-2.0, 0.0, 0.0], 0.0, "residual-gradient"),
        "ex2_truth" => OracleValue::closed(vec![0.0, 0.0, 0.0], 0.0, "ml, ctd0, ctd1"),
        "ex3_msve" => OracleValue::closed(vec![4.0 / 15.0], 0.0, "ml"),
        "ex3_moment" => OracleValue::closed(vec![0.0], 0.0, "ctd0, ctd1"),
        "ex4_ctd0" => OracleValue::closed(vec![bisect(ex4_ctd0_moment, -3.0, -1.0, 1e-13)?], tol, "ctd0"),
        "ex4_ctd1" => OracleValue::closed(vec![bisect(ex4_ctd1_moment, -3.0, -1.0, 1e-13)?], tol, "ctd1"),
        "ex4_msve" => {
            let d = |th: f64| (ex4_msve(th + 1e-6) - ex4_msve(th - 1e-6)) / 2e-6;
            OracleValue::closed(vec![bisect(d, -3.0, -1.0, 1e-11)?], 1e-8, "ml")
        }
        "ex5_ml" => {
            let d = |th: f64| (ex5_msve(th + 1e-6) - ex5_msve(th - 1e-6)) / 2e-6;
            OracleValue::closed(vec![bisect(d, -2.0, -0.3, 1e-11)?], 1e-8, "ml")
        }
        "ex5_mspbe" => OracleValue::closed(vec![-1.0], 0.0, "cgtd2"),
        "lq_ou" => {
            let (a, b, c) = lq_coefficients(1.0, 1.0, 0.5, 1.5, 1.0)?;
            OracleValue::closed(vec![a, b, c], 1e-15, "clstd0, cgtd2, ctd0")
        }
        "lq_bm_theta_true" => {
            let (a, _, c) = lq_coefficients(0.0, 0.0, 1.0, 1.5, 0.0)?;
            debug_assert!((a - 1.0 / 1.5).abs() < 1e-15);
            OracleValue::closed(vec![c], 1e-15, "ctd0 with shifted quadratic")
        }
        other => return Err(Error::UnknownId(other.into())),
    })
}
