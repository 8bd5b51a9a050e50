//! Batch estimates of the scalar objectives: MSTDE, martingale loss, MSVE,
//! realized quadratic variation, GMM quadratic forms and MSPBE.

use std::io::Write;

use crate::env::{EpisodeBatch, Trajectory};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::models::{increment, ValueModel};
use crate::moments::TestFunction;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveValue<F> {
    pub value: F,
    pub n_episodes: usize,
    pub std_error: F,
}

/// Mean and standard error of per-episode values, summed in index order.
pub fn mean_with_error<F: Scalar>(values: &[F]) -> ObjectiveValue<F> {
    let n = values.len();
    let nf = F::from_usize_lossy(n.max(1));
    let mean = values.iter().copied().sum::<F>() / nf;
    let std_error = if n < 2 {
        F::zero()
    } else {
        let ss = values.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>();
        (ss / (nf - F::one()) / nf).sqrt()
    };
    ObjectiveValue { value: mean, n_episodes: n, std_error }
}

/// Values `J(t_i, X_i)` for `i = 0..=K`.
pub fn path_values<F: Scalar>(model: &ValueModel<F>, traj: &Trajectory<F>) -> Result<Vec<F>> {
    (0..=traj.steps()).map(|i| model.eval(traj.time(i), traj.state(i))).collect()
}

/// Increments `dm_i` for `i = 0..K`.
pub fn path_increments<F: Scalar>(model: &ValueModel<F>, traj: &Trajectory<F>, rho: F) -> Result<Vec<F>> {
    let j = path_values(model, traj)?;
    let dt = traj.dt();
    let out: Vec<F> = (0..traj.steps())
        .map(|i| increment(j[i], j[i + 1], traj.rewards()[i], rho, dt))
        .collect();
    if !out.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("martingale increment"));
    }
    Ok(out)
}

fn per_episode<F: Scalar>(
    batch: &EpisodeBatch<F>,
    f: impl Fn(&Trajectory<F>) -> Result<F>,
) -> Result<ObjectiveValue<F>> {
    let values = batch.iter().map(f).collect::<Result<Vec<_>>>()?;
    Ok(mean_with_error(&values))
}

/// One trajectory's `1/2 sum_i (dm_i / dt)^2 dt`.
pub fn trajectory_mstde<F: Scalar>(model: &ValueModel<F>, tr: &Trajectory<F>) -> Result<F> {
    let dm = path_increments(model, tr, F::zero())?;
    Ok(F::lit(0.5) * dm.iter().map(|&d| d * d).sum::<F>() / tr.dt())
}

/// `1/2 E sum_i (dm_i / dt)^2 dt` with undiscounted increments.
pub fn mstde<F: Scalar>(model: &ValueModel<F>, batch: &EpisodeBatch<F>) -> Result<ObjectiveValue<F>> {
    per_episode(batch, |tr| trajectory_mstde(model, tr))
}

/// `1/2 E sum_i (G_i - e^{-rho t_i} J_i)^2 dt` with `G` the (discounted) reward-to-go.
pub fn martingale_loss<F: Scalar>(
    model: &ValueModel<F>,
    batch: &EpisodeBatch<F>,
    rho: F,
) -> Result<ObjectiveValue<F>> {
    per_episode(batch, |tr| trajectory_martingale_loss(model, tr, rho))
}

/// One trajectory's `1/2 sum_i (G_i - e^{-rho t_i} J_i)^2 dt`.
pub fn trajectory_martingale_loss<F: Scalar>(model: &ValueModel<F>, tr: &Trajectory<F>, rho: F) -> Result<F> {
    let g = tr.rewards_to_go(rho);
    let dt = tr.dt();
    let mut acc = F::zero();
    for i in 0..tr.steps() {
        let j = model.eval(tr.time(i), tr.state(i))?;
        let target = if rho == F::zero() { j } else { (-rho * tr.time(i)).exp() * j };
        let e = g[i] - target;
        acc += e * e * dt;
    }
    Ok(F::lit(0.5) * acc)
}

/// `E sum_i (oracle(t_i, X_i) - J_i)^2 dt`.
pub fn msve<F: Scalar>(
    model: &ValueModel<F>,
    batch: &EpisodeBatch<F>,
    oracle: impl Fn(F, &[F]) -> F,
) -> Result<ObjectiveValue<F>> {
    per_episode(batch, |tr| {
        let dt = tr.dt();
        let mut acc = F::zero();
        for i in 0..tr.steps() {
            let e = oracle(tr.time(i), tr.state(i)) - model.eval(tr.time(i), tr.state(i))?;
            acc += e * e * dt;
        }
        Ok(acc)
    })
}

/// MSVE divided by the window length, for infinite-horizon problems.
pub fn msve_time_averaged<F: Scalar>(
    model: &ValueModel<F>,
    batch: &EpisodeBatch<F>,
    oracle: impl Fn(F, &[F]) -> F,
) -> Result<ObjectiveValue<F>> {
    let window = batch.grid().t_end() - batch.grid().t0();
    let mut v = msve(model, batch, oracle)?;
    v.value /= window;
    v.std_error /= window;
    Ok(v)
}

/// `E sum_i dm_i^2`, the realized quadratic variation of `M`.
pub fn realized_qv<F: Scalar>(model: &ValueModel<F>, batch: &EpisodeBatch<F>) -> Result<ObjectiveValue<F>> {
    per_episode(batch, |tr| {
        let dm = path_increments(model, tr, F::zero())?;
        Ok(dm.iter().map(|&d| d * d).sum())
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Weighting<F> {
    Identity,
    /// `(E sum xi xi^T dt)^{-1}` estimated on the same batch.
    InverseGram,
    /// Inverse of the Gram matrix plus `ridge * I`.
    InverseGramRidge(F),
}

/// Moment vector `g`, its per-episode contributions, and the Gram matrix.
struct MomentData<F> {
    g: Vec<F>,
    per_episode: Vec<Vec<F>>,
    gram: Matrix<F>,
}

fn moment_data<F: Scalar>(
    model: &ValueModel<F>,
    batch: &EpisodeBatch<F>,
    test: &TestFunction<F>,
    rho: F,
) -> Result<MomentData<F>> {
    let l = model.n_params();
    let d = test.dim(l);
    let mut gram = Matrix::zeros(d);
    let mut per_episode = Vec::with_capacity(batch.len());
    let mut xi = vec![F::zero(); d];
    let mut g0 = vec![F::zero(); l];
    let mut g1 = vec![F::zero(); l];
    for tr in batch.iter() {
        let dt = tr.dt();
        let mut em = test.emitter(l, dt, false)?;
        let mut acc = vec![F::zero(); d];
        let mut j0 = model.value_grad(tr.time(0), tr.state(0), &mut g0)?;
        for i in 0..tr.steps() {
            em.emit(model, tr.time(i), tr.state(i), &g0, &mut xi, None)?;
            let j1 = model.value_grad(tr.time(i + 1), tr.state(i + 1), &mut g1)?;
            let dm = increment(j0, j1, tr.rewards()[i], rho, dt);
            crate::scalar::axpy(dm, &xi, &mut acc);
            gram.add_outer(dt, &xi, &xi);
            j0 = j1;
            std::mem::swap(&mut g0, &mut g1);
        }
        per_episode.push(acc);
    }
    let nf = F::from_usize_lossy(batch.len());
    gram.scale(F::one() / nf);
    let mut g = vec![F::zero(); d];
    for e in &per_episode {
        crate::scalar::axpy(F::one(), e, &mut g);
    }
    g.iter_mut().for_each(|v| *v /= nf);
    if !g.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("moment estimate"));
    }
    Ok(MomentData { g, per_episode, gram })
}

/// Delta-method standard error of `1/2 g^T A g`, treating `A` as fixed.
fn quadratic_form_error<F: Scalar>(data: &MomentData<F>, ag: &[F]) -> F {
    let projected: Vec<F> = data.per_episode.iter().map(|e| crate::scalar::dot(ag, e)).collect();
    mean_with_error(&projected).std_error
}

/// `1/2 g^T A g` with `g` the batch moment vector.
pub fn gmm_objective<F: Scalar>(
    model: &ValueModel<F>,
    batch: &EpisodeBatch<F>,
    test: &TestFunction<F>,
    weighting: Weighting<F>,
    rho: F,
) -> Result<ObjectiveValue<F>> {
    let data = moment_data(model, batch, test, rho)?;
    let d = data.g.len();
    let a = match weighting {
        Weighting::Identity => Matrix::identity(d),
        Weighting::InverseGram => data.gram.inverse().map_err(|e| gram_context(e, "gmm"))?,
        Weighting::InverseGramRidge(eps) => {
            let mut g = data.gram.clone();
            g.add_diagonal(eps);
            g.inverse().map_err(|e| gram_context(e, "gmm"))?
        }
    };
    let mut ag = vec![F::zero(); d];
    a.mul_vec(&data.g, &mut ag);
    let value = F::lit(0.5) * crate::scalar::dot(&data.g, &ag);
    Ok(ObjectiveValue { value, n_episodes: batch.len(), std_error: quadratic_form_error(&data, &ag) })
}

fn gram_context(e: Error, context: &str) -> Error {
    match e {
        Error::SingularMatrix { condition, .. } => {
            Error::SingularMatrix { context: format!("{context} gram matrix"), condition }
        }
        other => other,
    }
}

/// Mean-square projected Bellman error for the stacked tests: `1/2 g^T u` with `Gram u = g`.
pub fn mspbe<F: Scalar>(
    model: &ValueModel<F>,
    batch: &EpisodeBatch<F>,
    tests: &[TestFunction<F>],
    rho: F,
) -> Result<ObjectiveValue<F>> {
    let test = TestFunction::Composite(tests.to_vec());
    let data = moment_data(model, batch, &test, rho)?;
    let u = data.gram.solve(&data.g).map_err(|e| gram_context(e, "mspbe"))?;
    let value = F::lit(0.5) * crate::scalar::dot(&data.g, &u);
    Ok(ObjectiveValue { value, n_episodes: batch.len(), std_error: quadratic_form_error(&data, &u) })
}

/// Writes `theta.., value, std_error` rows of an objective sweep.
pub fn write_sweep_csv<F: Scalar, W: Write>(
    mut w: W,
    rows: &[(Vec<F>, ObjectiveValue<F>)],
) -> Result<()> {
    let l = rows.first().map_or(0, |r| r.0.len());
    let mut header: Vec<String> = (0..l).map(|j| format!("theta{j}")).collect();
    header.push("value".into());
    header.push("std_error".into());
    writeln!(w, "{}", header.join(","))?;
    for (theta, v) in rows {
        let mut cells: Vec<String> = theta.iter().map(|x| x.to_string()).collect();
        cells.push(v.value.to_string());
        cells.push(v.std_error.to_string());
        writeln!(w, "{}", cells.join(","))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{presets, sample_batch, DiffusionModel, Dynamics, TimeGrid};
    use crate::models::Family;
    use std::sync::Arc;

    fn affine(theta: f64) -> ValueModel<f64> {
        ValueModel::new(Family::AffineTimeScaled, vec![theta]).unwrap()
    }

    fn bm_batch(k: usize, n: usize, seed: u64) -> EpisodeBatch<f64> {
        let m = presets::brownian_identity::<f64>();
        let g = TimeGrid::new(0.0, 1.0, k).unwrap();
        sample_batch(&m, &g, seed, n).unwrap()
    }

    #[test]
    fn mstde_zero_on_constant_process() {
        let m = DiffusionModel::new(
            Dynamics::General {
                dim: 1,
                noise_dim: 1,
                drift: Arc::new(|_, _, o: &mut [f64]| o[0] = 0.0),
                diffusion: Arc::new(|_, _, o: &mut [f64]| o[0] = 0.0),
            },
            Arc::new(|_, _| 0.0),
            Arc::new(|_| 0.0),
            vec![0.4],
            Some(1.0),
            0.0,
        )
        .unwrap();
        let g = TimeGrid::new(0.0, 1.0, 10).unwrap();
        let b = sample_batch(&m, &g, 0, 3).unwrap();
        let v = ValueModel::new(Family::QuadTriple, vec![0.5, 0.0, 0.0]).unwrap();
        // J depends on t here; use a time-constant member instead.
        let c = ValueModel::new(Family::Cubic, vec![0.8]).unwrap();
        assert_eq!(mstde(&c, &b).unwrap().value, 0.0);
        assert!(mstde(&v, &b).unwrap().value > 0.0);
        assert_eq!(realized_qv(&c, &b).unwrap().value, 0.0);
    }

    #[test]
    fn mstde_matches_quadratic_variation_formula() {
        let b = bm_batch(1000, 1000, 1);
        for th in [-1.5, 0.0, 1.0] {
            let v = mstde(&affine(th), &b).unwrap().value * 1e-3;
            let expected = 0.5 * (th * th / 3.0 + th + 1.0);
            assert!((v - expected).abs() <= 0.05 * expected, "theta {th}: {v} vs {expected}");
        }
    }

    #[test]
    fn realized_qv_examples() {
        let b = bm_batch(1000, 1000, 2);
        let v = realized_qv(&affine(0.0), &b).unwrap().value;
        assert!((v - 1.0).abs() < 0.03, "{v}");
        let v = realized_qv(&affine(-1.5), &b).unwrap().value;
        assert!((v - 0.25).abs() < 0.05 * 0.25, "{v}");
    }

    #[test]
    fn martingale_loss_at_truth() {
        let b = bm_batch(100, 1000, 3);
        let v = martingale_loss(&affine(0.0), &b, 0.0).unwrap().value;
        assert!((v - 0.25).abs() < 0.05 * 0.25, "{v}");
    }

    #[test]
    fn msve_examples() {
        let b = bm_batch(100, 2000, 4);
        let truth = |_: f64, x: &[f64]| x[0];
        assert_eq!(msve(&affine(0.0), &b, truth).unwrap().value, 0.0);
        let v = msve(&affine(0.8), &b, truth).unwrap().value;
        let expected = 0.64 / 12.0;
        assert!((v - expected).abs() < 0.05 * expected, "{v} vs {expected}");
    }

    #[test]
    fn gmm_zero_test_and_truth() {
        let b = bm_batch(100, 500, 5);
        let v = gmm_objective(&affine(0.3), &b, &TestFunction::constant(0.0), Weighting::Identity, 0.0)
            .unwrap();
        assert_eq!(v.value, 0.0);
        let singular = gmm_objective(&affine(0.3), &b, &TestFunction::constant(0.0), Weighting::InverseGram, 0.0);
        assert!(matches!(singular, Err(Error::SingularMatrix { .. })));
    }

    #[test]
    fn mspbe_equals_inverse_gram_gmm() {
        let sq = presets::brownian_square_minus_time::<f64>();
        let g = TimeGrid::new(0.0, 1.0, 50).unwrap();
        let b = sample_batch(&sq, &g, 9, 200).unwrap();
        let m = ValueModel::new(Family::QuadTriple, vec![0.3, -0.2, 0.4]).unwrap();
        let tests = vec![TestFunction::GradTheta, TestFunction::TailoredReciprocal];
        let a = mspbe(&m, &b, &tests, 0.0).unwrap().value;
        let c = gmm_objective(&m, &b, &TestFunction::Composite(tests), Weighting::InverseGram, 0.0)
            .unwrap()
            .value;
        assert!((a - c).abs() <= 1e-10 * a.abs().max(1.0), "{a} vs {c}");
    }

    #[test]
    fn objectives_invariant_under_permutation() {
        let b = bm_batch(50, 40, 6);
        let mut rev = b.trajectories().to_vec();
        rev.reverse();
        let r = EpisodeBatch::new(rev).unwrap();
        let m = affine(0.4);
        let close = |x: f64, y: f64| (x - y).abs() <= 1e-12 * x.abs().max(1.0);
        assert!(close(mstde(&m, &b).unwrap().value, mstde(&m, &r).unwrap().value));
        assert!(close(
            martingale_loss(&m, &b, 0.0).unwrap().value,
            martingale_loss(&m, &r, 0.0).unwrap().value
        ));
        assert!(close(realized_qv(&m, &b).unwrap().value, realized_qv(&m, &r).unwrap().value));
    }

    #[test]
    fn sweep_csv_layout() {
        let rows = vec![(vec![0.5f64], ObjectiveValue { value: 1.0, n_episodes: 2, std_error: 0.1 })];
        let mut buf = Vec::new();
        write_sweep_csv(&mut buf, &rows).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "theta0,value,std_error\n0.5,1,0.1\n");
    }
}
