//! Closed-form engine for a Gaussian prior observed through additive white
//! Gaussian noise of unit variance.
//!
//! With the square-root interpolant `I_t = x0 + sqrt(t) xi`, a model
//! `N(b~, S~)` has marginals `N(b~, S~ + t I)`, so every field is affine and
//! every transport is a matrix function of `S~`. The iteration, its EM
//! counterpart and the associated distances are all computed exactly here.
//!
//! `eps` in this module is the diffusion in the convention
//! `dX = (1 + eps)/2 * (-score) dt + sqrt(eps) dW`, so `eps = 1` reproduces EM.
//! The generic reverse SDE uses noise `sqrt(2 eps)`; the two are related by a
//! factor of two (see [`AffineGaussianField::sqrt_awgn`]).

use nalgebra::{DMatrix, DVector};
use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{ensure_dim, invalid, Error, Result};
use crate::schedule::Schedule;
use crate::transport::VelocityField;

const SYMMETRY_TOL: f64 = 1e-10;

/// Mean and covariance of a Gaussian. The covariance is symmetric and PSD;
/// eigenvalues down to `-1e-10` are accepted and clamped to zero.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianModel {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
}

impl GaussianModel {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        ensure_dim(d, cov.nrows())?;
        ensure_dim(d, cov.ncols())?;
        if cov.iter().chain(mean.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite);
        }
        let scale = cov.amax().max(1.0);
        if (&cov - cov.transpose()).amax() > SYMMETRY_TOL * scale {
            return Err(invalid("covariance is not symmetric"));
        }
        let cov = symmetrize(&cov);
        let eig = MatrixFn::new(&cov);
        let min = eig.eigenvalues().min();
        if min < -SYMMETRY_TOL * scale {
            return Err(invalid(format!("covariance has negative eigenvalue {min}")));
        }
        let cov = if min < 0.0 { eig.apply(|l| l.max(0.0)) } else { cov };
        Ok(Self { mean, cov })
    }

    pub fn centered(cov: DMatrix<f64>) -> Result<Self> {
        let d = cov.nrows();
        Self::new(DVector::zeros(d), cov)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn is_centered(&self) -> bool {
        self.mean.iter().all(|v| *v == 0.0)
    }

    /// The law of `x + xi` with `xi ~ N(0, sigma^2 I)`.
    pub fn observed(&self, sigma: f64) -> Self {
        let d = self.dim();
        Self {
            mean: self.mean.clone(),
            cov: &self.cov + DMatrix::identity(d, d) * (sigma * sigma),
        }
    }

    /// Draws `n` samples as rows.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Array2<f64> {
        let root = MatrixFn::new(&self.cov).apply(f64::sqrt);
        let d = self.dim();
        let mut out = Array2::zeros((n, d));
        for mut row in out.axis_iter_mut(Axis(0)) {
            let z = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
            let x = &self.mean + &root * z;
            row.iter_mut().zip(x.iter()).for_each(|(o, v)| *o = *v);
        }
        out
    }

    /// Empirical mean and covariance (divisor `n`) of the rows of `x`.
    pub fn fit(x: ArrayView2<f64>) -> Result<Self> {
        let n = x.nrows();
        if n == 0 {
            return Err(Error::Empty("samples"));
        }
        let d = x.ncols();
        let mean = DVector::from_fn(d, |j, _| x.column(j).sum() / n as f64);
        let mut cov = DMatrix::zeros(d, d);
        for row in x.axis_iter(Axis(0)) {
            let c = DVector::from_fn(d, |j, _| row[j] - mean[j]);
            cov += &c * c.transpose();
        }
        Self::new(mean, cov / n as f64)
    }
}

pub(crate) fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

/// Eigendecomposition of a symmetric matrix for evaluating `f(A)`.
#[derive(Clone, Debug)]
pub struct MatrixFn {
    q: DMatrix<f64>,
    lambda: DVector<f64>,
}

impl MatrixFn {
    pub fn new(a: &DMatrix<f64>) -> Self {
        let eig = symmetrize(a).symmetric_eigen();
        Self { q: eig.eigenvectors, lambda: eig.eigenvalues }
    }

    pub fn eigenvalues(&self) -> &DVector<f64> {
        &self.lambda
    }

    pub fn eigenvectors(&self) -> &DMatrix<f64> {
        &self.q
    }

    /// `Q f(Lambda) Q^T`
    pub fn apply(&self, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
        let mut scaled = self.q.clone();
        for (j, l) in self.lambda.iter().enumerate() {
            let fl = f(*l);
            scaled.column_mut(j).scale_mut(fl);
        }
        symmetrize(&(scaled * self.q.transpose()))
    }

    /// `Q diag(values) Q^T`, with eigenvalues clamped at zero before `f`.
    pub fn apply_psd(&self, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
        self.apply(|l| f(l.max(0.0)))
    }

    pub fn reconstruct(&self) -> DMatrix<f64> {
        self.apply(|l| l)
    }
}

fn exponent(eps: f64) -> f64 {
    0.5 * (1.0 + eps)
}

/// `-(S~ + t I)^{-1} (x - b~)`, the score of `N(b~, S~ + t I)`.
pub fn gaussian_score(t: f64, x: &DVector<f64>, m: &GaussianModel) -> Result<DVector<f64>> {
    ensure_dim(m.dim(), x.len())?;
    let d = m.dim();
    let shifted = m.cov() + DMatrix::identity(d, d) * t;
    let chol = shifted.cholesky().ok_or(Error::Singular)?;
    let r = chol.solve(&(x - m.mean()));
    if r.iter().any(|v| !v.is_finite()) {
        return Err(Error::Singular);
    }
    Ok(-r)
}

/// `B = (S (S + I)^{-1})^{(1 + eps)/2}`, the linear part of the transport from
/// observations to data for the model covariance `S`.
pub fn solution_map_b(cov: &DMatrix<f64>, eps: f64) -> DMatrix<f64> {
    let c = exponent(eps);
    MatrixFn::new(cov).apply_psd(|l| (l / (l + 1.0)).powf(c))
}

/// Linear part of the transport between reverse times `s <= t` in `[0, 1]`
/// (reverse time 0 is the observation, 1 the data):
/// `(S + (1 - t) I)^{(1+eps)/2} (S + (1 - s) I)^{-(1+eps)/2}`.
pub fn solution_map_phi(cov: &DMatrix<f64>, eps: f64, t: f64, s: f64) -> DMatrix<f64> {
    let c = exponent(eps);
    MatrixFn::new(cov).apply_psd(|l| {
        let num = l + 1.0 - t;
        if num == 0.0 {
            0.0
        } else {
            (num / (l + 1.0 - s)).powf(c)
        }
    })
}

/// Covariance of the noise injected along the reverse SDE,
/// `eps * int_0^1 Phi(1, s) Phi(1, s)^T ds = S - B (S + I) B`.
pub fn noise_covariance(cov: &DMatrix<f64>, eps: f64) -> DMatrix<f64> {
    MatrixFn::new(cov).apply_psd(|l| {
        if l == 0.0 {
            0.0
        } else {
            l - l.powf(1.0 + eps) * (l + 1.0).powf(-eps)
        }
    })
}

/// The same integral by composite Simpson quadrature on `n` (even) panels.
pub fn noise_covariance_quadrature(cov: &DMatrix<f64>, eps: f64, n: usize) -> DMatrix<f64> {
    let n = n + n % 2;
    let h = 1.0 / n as f64;
    let d = cov.nrows();
    let mut acc = DMatrix::zeros(d, d);
    for i in 0..=n {
        let w = if i == 0 || i == n { 1.0 } else if i % 2 == 1 { 4.0 } else { 2.0 };
        let phi = solution_map_phi(cov, eps, 1.0, i as f64 * h);
        acc += (&phi * phi.transpose()) * w;
    }
    acc * (eps * h / 3.0)
}

/// One exact self-consistent update:
/// `b+ = b_k + B (b - b_k)`, `S+ = S_k + B (S - S_k) B`, `B = B(S_k)`.
pub fn scsi_update(current: &GaussianModel, truth: &GaussianModel, eps: f64) -> Result<GaussianModel> {
    ensure_dim(current.dim(), truth.dim())?;
    let b = solution_map_b(current.cov(), eps);
    let mean = current.mean() + &b * (truth.mean() - current.mean());
    let cov = current.cov() + &b * (truth.cov() - current.cov()) * &b;
    GaussianModel::new(mean, symmetrize(&cov))
}

/// One EM step for a centered Gaussian prior:
/// `S+ = S_k + M (S - S_k) M` with `M = S_k (S_k + I)^{-1}`.
pub fn em_update(current: &GaussianModel, truth: &GaussianModel) -> Result<GaussianModel> {
    ensure_dim(current.dim(), truth.dim())?;
    if !current.is_centered() || !truth.is_centered() {
        return Err(invalid("em_update is defined for centered Gaussians"));
    }
    let m = MatrixFn::new(current.cov()).apply_psd(|l| l / (l + 1.0));
    let cov = current.cov() + &m * (truth.cov() - current.cov()) * &m;
    GaussianModel::centered(symmetrize(&cov))
}

/// `1 - eta^{1+eps} (1 + eta)^{-1-eps}`, the per-step contraction bound for
/// the covariance error when all eigenvalues stay above `eta`.
pub fn rate_factor(eta: f64, eps: f64) -> Result<f64> {
    if !(eta > 0.0) {
        return Err(invalid(format!("eta must be > 0, got {eta}")));
    }
    if !(eps >= 0.0) {
        return Err(invalid(format!("eps must be >= 0, got {eps}")));
    }
    Ok(1.0 - (eta / (1.0 + eta)).powf(1.0 + eps))
}

/// `Tr(A + B - 2 (A^{1/2} B A^{1/2})^{1/2})`, the squared 2-Wasserstein
/// distance between centered Gaussians.
pub fn gaussian_w2sq(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let ra = MatrixFn::new(a).apply_psd(f64::sqrt);
    let inner = symmetrize(&(&ra * b * &ra));
    let cross = MatrixFn::new(&inner).eigenvalues().iter().map(|l| l.max(0.0).sqrt()).sum::<f64>();
    (a.trace() + b.trace() - 2.0 * cross).max(0.0)
}

/// `Tr((T_A - T_B)(A + I)(T_A - T_B))` with `T_X = solution_map_b(X, eps)`:
/// the mean squared discrepancy of the two transports on observations drawn
/// from the law generated by `A`.
pub fn transport_cost(a: &DMatrix<f64>, b: &DMatrix<f64>, eps: f64) -> f64 {
    let d = a.nrows();
    let diff = solution_map_b(a, eps) - solution_map_b(b, eps);
    let obs = a + DMatrix::identity(d, d);
    (&diff * obs * &diff).trace().max(0.0)
}

/// `KL(p || q)`; infinite if `p` is singular while `q` is not.
pub fn gaussian_kl(p: &GaussianModel, q: &GaussianModel) -> Result<f64> {
    ensure_dim(p.dim(), q.dim())?;
    let d = p.dim() as f64;
    let chol = q.cov().clone().cholesky().ok_or(Error::Singular)?;
    let logdet_q = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let p_eigs = MatrixFn::new(p.cov());
    if p_eigs.eigenvalues().iter().any(|l| *l <= 0.0) {
        return Ok(f64::INFINITY);
    }
    let logdet_p = p_eigs.eigenvalues().iter().map(|l| l.ln()).sum::<f64>();
    let trace = chol.solve(p.cov()).trace();
    let dm = q.mean() - p.mean();
    let quad = dm.dot(&chol.solve(&dm));
    Ok((0.5 * (trace + quad - d + logdet_q - logdet_p)).max(0.0))
}

/// Ratio of data-side to observation-side KL for a candidate covariance, and
/// the bound `(1 + 1/lambda_min(S))^2` on it. Returns ratio 1 when the
/// candidate equals the truth.
pub fn condition_ratio_check(truth: &GaussianModel, candidate: &GaussianModel) -> Result<(f64, f64)> {
    ensure_dim(truth.dim(), candidate.dim())?;
    let lmin = MatrixFn::new(truth.cov()).eigenvalues().min();
    if lmin <= 0.0 {
        return Err(Error::Singular);
    }
    let bound = (1.0 + 1.0 / lmin).powi(2);
    let num = gaussian_kl(truth, candidate)?;
    let den = gaussian_kl(&truth.observed(1.0), &candidate.observed(1.0))?;
    if den == 0.0 {
        return Ok((1.0, bound));
    }
    Ok((num / den, bound))
}

/// `scale * G G^T / dof` with `G` a `d x dof` standard Gaussian matrix.
pub fn wishart_sample<R: Rng + ?Sized>(d: usize, dof: usize, scale: f64, rng: &mut R) -> Result<DMatrix<f64>> {
    if d == 0 {
        return Err(invalid("wishart dimension must be positive"));
    }
    if !(scale.is_finite() && scale >= 0.0) {
        return Err(invalid("wishart scale must be >= 0"));
    }
    let g = DMatrix::from_fn(d, dof, |_, _| rng.sample::<f64, _>(StandardNormal));
    Ok(symmetrize(&(&g * g.transpose())) * (scale / dof as f64))
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn lambda_min(a: &DMatrix<f64>) -> f64 {
    MatrixFn::new(a).eigenvalues().min()
}

/// Operator (spectral) norm of a symmetric matrix.
pub fn spectral_norm(a: &DMatrix<f64>) -> f64 {
    MatrixFn::new(a).eigenvalues().amax()
}

/// Covariance error trajectory `||S - S_k||_F^2`, `k = 0..=iters`, of the
/// exact iteration started from `N(0, S0)`.
pub fn covariance_error_trajectory(
    truth: &DMatrix<f64>,
    start: &DMatrix<f64>,
    eps: f64,
    iters: usize,
) -> Result<Vec<f64>> {
    let truth = GaussianModel::centered(truth.clone())?;
    let mut cur = GaussianModel::centered(start.clone())?;
    let mut out = Vec::with_capacity(iters + 1);
    out.push((truth.cov() - cur.cov()).norm_squared());
    for _ in 0..iters {
        cur = scsi_update(&cur, &truth, eps)?;
        out.push((truth.cov() - cur.cov()).norm_squared());
    }
    Ok(out)
}

/// Which affine field of a Gaussian model to evaluate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FieldPart {
    /// `E[dI/dt | I_t = x]`
    Drift,
    /// `E[z | I_t = x]`
    Denoiser,
    /// drift plus `eps_t / gamma(t)` times the denoiser, i.e. drift minus
    /// `eps_t` times the score
    Combined,
}

/// The exact fields of the interpolant between `x0 ~ N(b~, S~)` and
/// `x1 = x0 + sigma xi` under a schedule with `alpha + beta = 1`.
///
/// The interpolant has law `N(b~, S~ + c(t) I)` with
/// `c(t) = beta^2 sigma^2 + gamma^2`, which gives drift
/// `c'/2 (S~ + c I)^{-1} (x - b~)`, denoiser `gamma (S~ + c I)^{-1} (x - b~)`
/// and score `-(S~ + c I)^{-1} (x - b~)`.
#[derive(Clone, Debug)]
pub struct AffineGaussianField {
    mean: DVector<f64>,
    eig: MatrixFn,
    schedule: Schedule,
    sigma: f64,
    epsilon: f64,
    part: FieldPart,
}

impl AffineGaussianField {
    /// `epsilon` is the constant generic diffusion used by [`FieldPart::Combined`].
    pub fn new(model: &GaussianModel, schedule: Schedule, sigma: f64, epsilon: f64, part: FieldPart) -> Self {
        Self {
            mean: model.mean().clone(),
            eig: MatrixFn::new(model.cov()),
            schedule,
            sigma,
            epsilon,
            part,
        }
    }

    /// The square-root schedule's combined field for diffusion `eps` in this
    /// module's convention: `(1 + eps)/2 (S~ + t I)^{-1} (x - b~)`, which is
    /// the generic field with diffusion `eps / 2`.
    pub fn sqrt_awgn(model: &GaussianModel, eps: f64) -> Self {
        Self::new(model, Schedule::sqrt_awgn(), 1.0, 0.5 * eps, FieldPart::Combined)
    }

    /// `(c(t), c'(t))`
    fn variance_profile(&self, t: f64) -> (f64, f64) {
        let k = self.schedule.coefficients(t);
        let s2 = self.sigma * self.sigma;
        (
            k.beta * k.beta * s2 + k.gamma * k.gamma,
            self.schedule.beta_sq_rate(t) * s2 + 2.0 * k.gamma * k.gamma_dot,
        )
    }

    /// Scalar multiplying `(S~ + c I)^{-1} (x - b~)` at time `t`, and `c(t)`.
    fn coefficient(&self, t: f64) -> (f64, f64) {
        let (c, dc) = self.variance_profile(t);
        let k = match self.part {
            FieldPart::Drift => 0.5 * dc,
            FieldPart::Denoiser => self.schedule.gamma(t),
            FieldPart::Combined => 0.5 * dc + self.epsilon,
        };
        (k, c)
    }

    /// The linear map `x - b~ -> field` at time `t`.
    pub fn matrix(&self, t: f64) -> DMatrix<f64> {
        let (k, c) = self.coefficient(t);
        self.eig.apply(|l| k / (l.max(0.0) + c))
    }
}

impl VelocityField for AffineGaussianField {
    fn dim(&self) -> usize {
        self.mean.len()
    }

    fn eval_batch(&self, t: f64, x: ArrayView2<f64>, _latent: Option<ArrayView2<f64>>, out: &mut Array2<f64>) -> Result<()> {
        let a = self.matrix(t);
        if a.iter().any(|v| !v.is_finite()) {
            return Err(Error::Singular);
        }
        let d = self.dim();
        for (xr, mut or) in x.axis_iter(Axis(0)).zip(out.axis_iter_mut(Axis(0))) {
            let c = DVector::from_fn(d, |j, _| xr[j] - self.mean[j]);
            let v = &a * c;
            or.iter_mut().zip(v.iter()).for_each(|(o, vi)| *o = *vi);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transport::{integrate_ode, pushforward, Drift, Scheme, TransportConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn scalar(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    fn random_spd(d: usize, seed: u64) -> DMatrix<f64> {
        wishart_sample(d, 2 * d, 1.0, &mut rng(seed)).unwrap() + DMatrix::identity(d, d) * 0.05
    }

    #[test]
    fn matrix_fn_reconstructs() {
        let a = random_spd(6, 1);
        let r = MatrixFn::new(&a).reconstruct();
        assert!((r - &a).norm() < 1e-8 * a.norm());
    }

    #[test]
    fn model_validation() {
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.4, 1.0]);
        assert!(GaussianModel::centered(bad).is_err());
        let neg = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(GaussianModel::centered(neg).is_err());
        let tiny = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1e-12]);
        let m = GaussianModel::centered(tiny).unwrap();
        assert!(lambda_min(m.cov()) >= 0.0);
    }

    #[test]
    fn score_values() {
        let m = GaussianModel::centered(scalar(1.0)).unwrap();
        let s = gaussian_score(1.0, &DVector::from_element(1, 2.0), &m).unwrap();
        assert!((s[0] + 1.0).abs() < 1e-15);
        let off = GaussianModel::new(DVector::from_vec(vec![1.0, 2.0]), random_spd(2, 3)).unwrap();
        assert_eq!(gaussian_score(0.3, off.mean(), &off).unwrap().norm(), 0.0);
        let degenerate = GaussianModel::centered(DMatrix::zeros(2, 2)).unwrap();
        assert!(matches!(
            gaussian_score(0.0, &DVector::from_element(2, 1.0), &degenerate),
            Err(Error::Singular)
        ));
    }

    #[test]
    fn score_is_gradient_of_log_density() {
        let cov = random_spd(3, 4);
        let mean = DVector::from_vec(vec![0.5, -1.0, 2.0]);
        let m = GaussianModel::new(mean.clone(), cov.clone()).unwrap();
        let t = 0.37;
        let shifted = &cov + DMatrix::identity(3, 3) * t;
        let prec = shifted.clone().try_inverse().unwrap();
        let logp = |x: &DVector<f64>| -0.5 * (x - &mean).dot(&(&prec * (x - &mean)));
        let mut r = rng(5);
        for _ in 0..10 {
            let x = DVector::from_fn(3, |_, _| r.sample::<f64, _>(StandardNormal) * 2.0);
            let s = gaussian_score(t, &x, &m).unwrap();
            let h = 1e-5;
            for j in 0..3 {
                let mut xp = x.clone();
                xp[j] += h;
                let mut xm = x.clone();
                xm[j] -= h;
                let fd = (logp(&xp) - logp(&xm)) / (2.0 * h);
                assert!((fd - s[j]).abs() < 1e-6, "{fd} vs {}", s[j]);
            }
        }
    }

    #[test]
    fn solution_map_values() {
        assert_eq!(solution_map_b(&DMatrix::zeros(3, 3), 0.0).norm(), 0.0);
        assert!((solution_map_b(&scalar(1.0), 0.0)[(0, 0)] - 0.5f64.sqrt()).abs() < 1e-15);
        assert!((solution_map_b(&scalar(1.0), 1.0)[(0, 0)] - 0.5).abs() < 1e-15);
        let b = solution_map_b(&random_spd(5, 6), 0.3);
        let eigs = MatrixFn::new(&b);
        assert!(eigs.eigenvalues().iter().all(|l| *l >= 0.0 && *l < 1.0));
        // Phi(1, 0) is B
        let cov = random_spd(4, 7);
        assert!((solution_map_phi(&cov, 0.4, 1.0, 0.0) - solution_map_b(&cov, 0.4)).norm() < 1e-12);
        assert!((solution_map_phi(&cov, 0.4, 0.3, 0.3) - DMatrix::identity(4, 4)).norm() < 1e-12);
    }

    #[test]
    fn scsi_update_values() {
        let cur = GaussianModel::centered(scalar(1.0)).unwrap();
        let truth = GaussianModel::centered(scalar(3.0)).unwrap();
        let next = scsi_update(&cur, &truth, 0.0).unwrap();
        assert!((next.cov()[(0, 0)] - 2.0).abs() < 1e-14);
        let em = em_update(&cur, &truth).unwrap();
        assert!((em.cov()[(0, 0)] - 1.5).abs() < 1e-14);
    }

    #[test]
    fn fixed_point() {
        let truth = GaussianModel::new(DVector::from_vec(vec![1.0, -2.0, 0.5]), random_spd(3, 8)).unwrap();
        for eps in [0.0, 0.5, 1.0] {
            let next = scsi_update(&truth, &truth, eps).unwrap();
            assert!((next.cov() - truth.cov()).amax() < 1e-10);
            assert!((next.mean() - truth.mean()).amax() < 1e-10);
        }
        let centered = GaussianModel::centered(truth.cov().clone()).unwrap();
        assert!((em_update(&centered, &centered).unwrap().cov() - centered.cov()).amax() < 1e-10);
        assert!(em_update(&truth, &truth).is_err());
    }

    #[test]
    fn em_precision_form_agrees() {
        for seed in 0..20 {
            let d = 4;
            let cur = random_spd(d, 100 + seed);
            let truth = random_spd(d, 200 + seed);
            let next = em_update(&GaussianModel::centered(cur.clone()).unwrap(), &GaussianModel::centered(truth.clone()).unwrap())
                .unwrap();
            let id = DMatrix::<f64>::identity(d, d);
            let inv = |m: DMatrix<f64>| m.try_inverse().unwrap();
            let prec = inv(cur.clone()) + &id
                - inv(inv(&truth + &id) - inv(&cur + &id) + &id);
            let from_precision = inv(prec);
            let gap = (from_precision - next.cov()).amax();
            assert!(gap < 1e-8, "seed {seed}: {gap}");
        }
    }

    #[test]
    fn eps_one_is_em() {
        for seed in 0..100 {
            let cur = GaussianModel::centered(random_spd(5, seed)).unwrap();
            let truth = GaussianModel::centered(random_spd(5, 1000 + seed)).unwrap();
            let a = scsi_update(&cur, &truth, 1.0).unwrap();
            let b = em_update(&cur, &truth).unwrap();
            assert!((a.cov() - b.cov()).amax() < 1e-10);
        }
    }

    #[test]
    fn rate_factor_values() {
        assert!((rate_factor(1.0, 0.0).unwrap() - 0.5).abs() < 1e-15);
        assert!(rate_factor(0.0, 0.0).is_err());
        assert!(rate_factor(-1.0, 0.0).is_err());
        for eta in [0.01, 0.5, 3.0] {
            assert!(rate_factor(eta, 0.5).unwrap() > rate_factor(eta, 0.0).unwrap());
            assert!(rate_factor(eta, 1.0).unwrap() > rate_factor(eta, 0.5).unwrap());
        }
    }

    #[test]
    fn w2_and_transport_cost_values() {
        let a = DMatrix::identity(2, 2) * 4.0;
        let b = DMatrix::identity(2, 2);
        assert!((gaussian_w2sq(&a, &b) - 2.0).abs() < 1e-12);
        assert!(gaussian_w2sq(&a, &a) < 1e-12);
        assert!((transport_cost(&scalar(1.0), &scalar(0.0), 0.0) - 1.0).abs() < 1e-14);
        let c = random_spd(3, 9);
        assert!(transport_cost(&c, &c, 0.0) < 1e-14);
    }

    #[test]
    fn transport_cost_matches_monte_carlo() {
        let a = random_spd(3, 10);
        let b = random_spd(3, 11);
        let eps = 0.0;
        let diff = solution_map_b(&a, eps) - solution_map_b(&b, eps);
        let obs = GaussianModel::centered(&a + DMatrix::identity(3, 3)).unwrap();
        let n = 200_000;
        let ys = obs.sample(n, &mut rng(12));
        let mut sum = 0.0;
        let mut sq = 0.0;
        for row in ys.axis_iter(Axis(0)) {
            let y = DVector::from_iterator(3, row.iter().copied());
            let v = (&diff * y).norm_squared();
            sum += v;
            sq += v * v;
        }
        let mean = sum / n as f64;
        let se = ((sq / n as f64 - mean * mean) / n as f64).sqrt();
        let exact = transport_cost(&a, &b, eps);
        assert!((mean - exact).abs() < 4.0 * se && (mean - exact).abs() < 0.01 * exact, "{mean} vs {exact}");
    }

    #[test]
    fn kl_values() {
        let p = GaussianModel::centered(scalar(1.0)).unwrap();
        let q = GaussianModel::centered(scalar(2.0)).unwrap();
        let pq = gaussian_kl(&p, &q).unwrap();
        assert!((pq - 0.5 * (0.5 - 1.0 + 2.0f64.ln())).abs() < 1e-12);
        assert!((pq - 0.096_57).abs() < 1e-5);
        let qp = gaussian_kl(&q, &p).unwrap();
        assert!((qp - pq).abs() > 1e-3);
        assert_eq!(gaussian_kl(&p, &p).unwrap(), 0.0);
        let singular = GaussianModel::centered(DMatrix::zeros(1, 1)).unwrap();
        assert!(matches!(gaussian_kl(&p, &singular), Err(Error::Singular)));
    }

    #[test]
    fn condition_ratio_at_truth() {
        let truth = GaussianModel::centered(random_spd(3, 13)).unwrap();
        let (ratio, bound) = condition_ratio_check(&truth, &truth).unwrap();
        assert_eq!(ratio, 1.0);
        assert!(bound > 1.0);
    }

    #[test]
    fn condition_bound_is_local() {
        // both KLs are quadratic near the truth, with curvatures in ratio ((s+1)/s)^2
        let s = 0.5;
        let truth = GaussianModel::centered(DMatrix::from_element(1, 1, s)).unwrap();
        let near = GaussianModel::centered(DMatrix::from_element(1, 1, s * 1.001)).unwrap();
        let (ratio, bound) = condition_ratio_check(&truth, &near).unwrap();
        assert!((ratio / bound - 1.0).abs() < 1e-2, "{ratio} {bound}");
        // far away the data-side KL blows up like s/(2u) while the observed one stays finite
        let far = GaussianModel::centered(DMatrix::from_element(1, 1, 1e-3)).unwrap();
        let (ratio, bound) = condition_ratio_check(&truth, &far).unwrap();
        assert!(ratio > 10.0 * bound);
    }

    #[test]
    fn condition_ratio_is_at_least_one() {
        let mut r = rng(21);
        let truth = GaussianModel::centered(wishart_sample(3, 6, 1.0, &mut r).unwrap()).unwrap();
        for _ in 0..200 {
            let cand = GaussianModel::centered(wishart_sample(3, 6, 1.0, &mut r).unwrap()).unwrap();
            assert!(condition_ratio_check(&truth, &cand).unwrap().0 >= 1.0 - 1e-12);
        }
    }

    #[test]
    fn wishart_properties() {
        let w = wishart_sample(4, 8, 2.0, &mut rng(1)).unwrap();
        assert!((&w - w.transpose()).amax() < 1e-12);
        assert!(lambda_min(&w) > -1e-12);
        assert_eq!(w, wishart_sample(4, 8, 2.0, &mut rng(1)).unwrap());
        let mut r = rng(2);
        let n = 10_000;
        let mut mean = DMatrix::zeros(4, 4);
        for _ in 0..n {
            mean += wishart_sample(4, 64, 1.0, &mut r).unwrap();
        }
        mean /= n as f64;
        assert!(spectral_norm(&(mean - DMatrix::identity(4, 4))) < 0.1);
    }

    #[test]
    fn noise_covariance_closed_form_matches_quadrature() {
        let cov = random_spd(3, 14);
        for eps in [0.0, 0.3, 1.0, 2.0] {
            let closed = noise_covariance(&cov, eps);
            let quad = noise_covariance_quadrature(&cov, eps, 2000);
            assert!((&closed - &quad).amax() < 1e-9, "eps {eps}");
            // identity: S - B (S + I) B
            let b = solution_map_b(&cov, eps);
            let alt = &cov - &b * (&cov + DMatrix::identity(3, 3)) * &b;
            assert!((closed - alt).amax() < 1e-12);
        }
    }

    #[test]
    fn eigenvalue_floor_along_trajectory() {
        for seed in 0..10 {
            let truth = GaussianModel::centered(random_spd(4, 300 + seed)).unwrap();
            let mut cur = GaussianModel::centered(random_spd(4, 400 + seed)).unwrap();
            let floor = lambda_min(truth.cov()).min(lambda_min(cur.cov()));
            for _ in 0..100 {
                cur = scsi_update(&cur, &truth, 0.5).unwrap();
                assert!(lambda_min(cur.cov()) >= floor - 1e-12);
            }
        }
    }

    #[test]
    fn heun_transport_matches_linear_map() {
        let model = GaussianModel::new(DVector::from_vec(vec![0.5, -0.3]), random_spd(2, 15)).unwrap();
        let field = AffineGaussianField::sqrt_awgn(&model, 0.0);
        let cfg = TransportConfig { t_min: 0.0, ..TransportConfig::ode(256, Scheme::Heun) };
        let b = solution_map_b(model.cov(), 0.0);
        for y in [[1.0, 2.0], [-0.5, 0.7]] {
            let x = integrate_ode(&field, &y, None, &cfg).unwrap();
            let yv = DVector::from_vec(y.to_vec());
            let expected = &b * (yv - model.mean()) + model.mean();
            for j in 0..2 {
                assert!((x[j] - expected[j]).abs() < 1e-2, "{} vs {}", x[j], expected[j]);
            }
        }
    }

    #[test]
    fn general_field_reduces_to_heat_equation_field() {
        let model = GaussianModel::centered(random_spd(2, 16)).unwrap();
        let drift = AffineGaussianField::new(&model, Schedule::sqrt_awgn(), 1.0, 0.0, FieldPart::Drift);
        let t = 0.4;
        let expected = (model.cov() + DMatrix::identity(2, 2) * t).try_inverse().unwrap() * 0.5;
        assert!((drift.matrix(t) - expected).amax() < 1e-12);
    }

    #[test]
    fn sde_terminal_moments_match_closed_form() {
        let model = GaussianModel::new(DVector::from_vec(vec![0.2, -0.1]), random_spd(2, 17) + DMatrix::identity(2, 2) * 0.3)
            .unwrap();
        let eps5 = 1.0;
        let field = AffineGaussianField::sqrt_awgn(&model, eps5);
        let sched = Schedule::sqrt_awgn();
        let cfg = TransportConfig { t_min: 0.0, ..TransportConfig::sde(512, 0.5 * eps5) };
        let n = 20_000;
        let y = [1.0, -1.0];
        let ys = Array2::from_shape_fn((n, 2), |(_, j)| y[j]);
        let out = pushforward(Drift::Velocity(&field), ys.view(), None, &mut rng(18), &cfg, &sched).unwrap();
        let fit = GaussianModel::fit(out.view()).unwrap();
        let b = solution_map_b(model.cov(), eps5);
        let mean = &b * (DVector::from_vec(y.to_vec()) - model.mean()) + model.mean();
        let cov = noise_covariance_quadrature(model.cov(), eps5, 2000);
        assert!((fit.mean() - &mean).amax() < 0.02);
        assert!((fit.cov() - &cov).amax() < 0.05 * cov.amax(), "{} vs {}", fit.cov(), cov);
    }
}
