//! B-spline functional PCA and its equivalence with a GP whose mean is
//! spline-linear and whose kernel is the spline inner product.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::gp::{self, GaussianPosterior, GpPrior, Kernel, MeanFunction};
use crate::linalg::{cholesky, solve_cholesky, DenseMatrix};
use crate::scalar::{c, Scalar};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SplineBasis<T> {
    degree: usize,
    knots: Vec<T>,
}

impl<T: Scalar> SplineBasis<T> {
    pub fn new(degree: usize, knots: Vec<T>) -> Result<Self> {
        if knots.windows(2).any(|w| !(w[0] <= w[1])) {
            return Err(Error::Config("knots must be non-decreasing".into()));
        }
        if knots.len() < degree + 2 {
            return Err(Error::Config(format!(
                "{} knots cannot carry a degree-{degree} basis",
                knots.len()
            )));
        }
        if !(knots[degree] < knots[knots.len() - degree - 1]) {
            return Err(Error::Config("empty knot span".into()));
        }
        Ok(Self { degree, knots })
    }

    /// Clamped uniform knots on `[lo, hi]` giving `q` basis functions.
    pub fn clamped_uniform(degree: usize, q: usize, lo: f64, hi: f64) -> Result<Self> {
        if q <= degree {
            return Err(Error::Config(format!(
                "a clamped degree-{degree} basis needs more than {degree} functions"
            )));
        }
        let intervals = q - degree;
        let mut knots = vec![c::<T>(lo); degree];
        for i in 0..intervals {
            knots.push(c(lo + (hi - lo) * i as f64 / intervals as f64));
        }
        knots.extend(std::iter::repeat_n(c::<T>(hi), degree + 1));
        Self::new(degree, knots)
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn knots(&self) -> &[T] {
        &self.knots
    }

    /// Number of basis functions.
    pub fn q(&self) -> usize {
        self.knots.len() - self.degree - 1
    }

    pub fn span(&self) -> (T, T) {
        (self.knots[self.degree], self.knots[self.knots.len() - self.degree - 1])
    }

    /// `b(x)` by the Cox–de Boor recursion.
    pub fn eval(&self, x: T) -> Result<Vec<T>> {
        let (lo, hi) = self.span();
        if !(x >= lo && x <= hi) {
            return Err(Error::OutOfSpan {
                value: x.to_real(),
                lo: lo.to_real(),
                hi: hi.to_real(),
            });
        }
        let t = &self.knots;
        let p = self.degree;
        // Knot interval [t_mu, t_mu+1) holding x; the right end of the span
        // belongs to the last non-empty interval.
        let last = t.len() - p - 2;
        let mut mu = p;
        while mu < last && !(x < t[mu + 1]) {
            mu += 1;
        }
        while mu > p && t[mu] == t[mu + 1] {
            mu -= 1;
        }

        // Non-zero functions N_{mu-p..=mu}, built up degree by degree.
        let mut n = vec![T::zero(); p + 1];
        let mut left = vec![T::zero(); p + 1];
        let mut right = vec![T::zero(); p + 1];
        n[0] = T::one();
        for j in 1..=p {
            left[j] = x - t[mu + 1 - j];
            right[j] = t[mu + j] - x;
            let mut saved = T::zero();
            for r in 0..j {
                let denom = right[r + 1] + left[j - r];
                let temp = if denom > T::zero() { n[r] / denom } else { T::zero() };
                n[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            n[j] = saved;
        }

        let mut row = vec![T::zero(); self.q()];
        for (j, v) in n.into_iter().enumerate() {
            row[mu - p + j] = v;
        }
        Ok(row)
    }

    /// Design matrix `(B_x)_ij = b_j(x_i)`.
    pub fn design(&self, x: &[T]) -> Result<DenseMatrix<T>> {
        let q = self.q();
        let mut data = Vec::with_capacity(x.len() * q);
        for &xi in x {
            data.extend(self.eval(xi)?);
        }
        DenseMatrix::from_vec(x.len(), q, data)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FpcaModel<T> {
    pub basis: SplineBasis<T>,
    pub theta_m: Vec<T>,
    pub sigma2: T,
}

/// Closed-form FPCA posterior quantities for one function.
#[derive(Debug, Clone)]
pub struct FpcaFit<T> {
    /// `β̂ = θ_m + θ_c`
    pub beta: Vec<T>,
    /// `Γ̂ = (I + σ⁻²BᵀB)⁻¹`
    pub gamma: DenseMatrix<T>,
}

impl<T: Scalar> FpcaModel<T> {
    pub fn new(basis: SplineBasis<T>, theta_m: Vec<T>, sigma2: T) -> Result<Self> {
        if theta_m.len() != basis.q() {
            return Err(Error::DimensionMismatch(format!(
                "{} mean coefficients for {} basis functions",
                theta_m.len(),
                basis.q()
            )));
        }
        if !(sigma2 > T::zero()) {
            return Err(Error::Config("FPCA noise variance must be positive".into()));
        }
        Ok(Self { basis, theta_m, sigma2 })
    }

    /// The GP prior whose posterior coincides with this model's.
    pub fn as_gp_prior(&self) -> GpPrior<T> {
        GpPrior {
            mean: MeanFunction::Spline {
                basis: self.basis.clone(),
                coefficients: self.theta_m.clone(),
            },
            kernel: Kernel::SplineInner {
                basis: self.basis.clone(),
            },
            log_noise_var: self.sigma2.ln(),
        }
    }

    /// Takes `θ_m` from a (possibly meta-trained) spline-mean prior.
    pub fn with_mean_from(&self, prior: &GpPrior<T>) -> Result<Self> {
        match &prior.mean {
            MeanFunction::Spline { coefficients, .. } => Self::new(self.basis.clone(), coefficients.clone(), self.sigma2),
            _ => Err(Error::Config("prior does not carry a spline mean".into())),
        }
    }

    pub fn fit(&self, x: &[T], y: &[T]) -> Result<FpcaFit<T>> {
        if x.is_empty() || x.len() != y.len() {
            return Err(Error::DimensionMismatch(format!(
                "FPCA fit needs n ≥ 1 matching inputs/targets, got {} and {}",
                x.len(),
                y.len()
            )));
        }
        let bx = self.basis.design(x)?;
        let q = self.basis.q();
        let mut system = bx.t_matmul(&bx)?;
        system.add_to_diagonal(self.sigma2);
        let factor = cholesky(&system, T::zero())?;

        let fitted = bx.matvec(&self.theta_m)?;
        let residual: Vec<T> = y.iter().zip(fitted).map(|(&a, b)| a - b).collect();
        let rhs = bx.t_matmul(&DenseMatrix::column(&residual))?;
        let theta_c = solve_cholesky(&factor, &rhs)?.into_vec();
        let beta = self.theta_m.iter().zip(theta_c).map(|(&a, b)| a + b).collect();

        // (I + σ⁻²BᵀB)⁻¹ = σ² (BᵀB + σ²I)⁻¹
        let mut gamma = solve_cholesky(&factor, &DenseMatrix::identity(q))?.scale(self.sigma2);
        gamma.symmetrize();
        Ok(FpcaFit { beta, gamma })
    }
}

/// Predictive distribution of noisy observations: mean `B_*β̂`, covariance
/// `σ²I + B_*Γ̂B_*ᵀ`.
pub fn fpca_posterior<T: Scalar>(model: &FpcaModel<T>, x: &[T], y: &[T], x_star: &[T]) -> Result<GaussianPosterior<T>> {
    let fit = model.fit(x, y)?;
    let bs = model.basis.design(x_star)?;
    let mean = bs.matvec(&fit.beta)?;
    let mut cov = bs.matmul(&fit.gamma)?.matmul_t(&bs)?;
    cov.add_to_diagonal(model.sigma2);
    cov.symmetrize();
    Ok(GaussianPosterior { mean, cov })
}

/// Maximum discrepancies between the GP route and the FPCA route.
#[derive(Debug, Clone, PartialEq)]
pub struct EquivalenceReport {
    /// `(trial, mean discrepancy, covariance discrepancy)`
    pub trials: Vec<(usize, f64, f64)>,
    pub max_mean_discrepancy: f64,
    pub max_cov_discrepancy: f64,
}

impl EquivalenceReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("trial,mean_disc,cov_disc\n");
        for (t, m, cv) in &self.trials {
            out.push_str(&format!("{t},{m:e},{cv:e}\n"));
        }
        out
    }
}

/// Compares both posterior routes on random in-span inputs and targets
/// (`1 ≤ n ≤ 20` context points, `1 ≤ m ≤ 20` test points).
pub fn check_gp_fpca_equivalence(model: &FpcaModel<f64>, trials: usize, seed: u64) -> Result<EquivalenceReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lo, hi) = model.basis.span();
    let prior = model.as_gp_prior();
    let mut report = EquivalenceReport {
        trials: Vec::with_capacity(trials),
        max_mean_discrepancy: 0.0,
        max_cov_discrepancy: 0.0,
    };
    for trial in 0..trials {
        let n = rng.random_range(1..=20);
        let m = rng.random_range(1..=20);
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(lo..=hi)).collect();
        let y: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let xs: Vec<f64> = (0..m).map(|_| rng.random_range(lo..=hi)).collect();

        let f = fpca_posterior(model, &x, &y, &xs)?;
        let g = gp::posterior_predict(&prior, &DenseMatrix::column(&x), &y, &DenseMatrix::column(&xs))?;
        let mut g_cov = g.cov.clone();
        g_cov.add_to_diagonal(model.sigma2);

        let mean_disc = f
            .mean
            .iter()
            .zip(&g.mean)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        let cov_disc = f.cov.sub(&g_cov)?.max_abs();
        report.max_mean_discrepancy = report.max_mean_discrepancy.max(mean_disc);
        report.max_cov_discrepancy = report.max_cov_discrepancy.max(cov_disc);
        report.trials.push((trial, mean_disc, cov_disc));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clamped_knots_end_exactly_at_hi() {
        for (lo, hi) in [(-2.9, 0.6), (-0.3, 0.1), (-1.7, 2.2)] {
            for q in 4..=10 {
                let b = SplineBasis::<f64>::clamped_uniform(3, q, lo, hi).unwrap();
                assert_eq!(b.knots().len(), q + 4);
                assert!(b.knots()[q..].iter().all(|&k| k == hi));
                assert!(b.knots()[..4].iter().all(|&k| k == lo));
            }
        }
    }

    #[test]
    fn indicator_basis() {
        let b = SplineBasis::<f64>::new(0, vec![0.0, 1.0, 2.0]).unwrap();
        assert_eq!(b.q(), 2);
        assert_eq!(b.eval(0.5).unwrap(), vec![1.0, 0.0]);
        assert_eq!(b.eval(1.5).unwrap(), vec![0.0, 1.0]);
        assert_eq!(b.eval(2.0).unwrap(), vec![0.0, 1.0]);
    }

    #[test]
    fn linear_hats() {
        let b = SplineBasis::<f64>::new(1, vec![0.0, 0.0, 1.0, 1.0]).unwrap();
        let row = b.eval(0.25).unwrap();
        assert!((row[0] - 0.75).abs() < 1e-15 && (row[1] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn partition_of_unity() {
        for q in [4, 8, 10] {
            let b = SplineBasis::<f64>::clamped_uniform(3, q, -1.0, 2.0).unwrap();
            assert_eq!(b.q(), q);
            for i in 0..=300 {
                let x = -1.0 + 3.0 * i as f64 / 300.0;
                let s: f64 = b.eval(x).unwrap().iter().sum();
                assert!((s - 1.0).abs() < 1e-12, "x={x} sum={s}");
                assert!(b.eval(x).unwrap().iter().all(|&v| v >= -1e-15));
            }
        }
    }

    /// Direct recursive definition, used as an oracle for the table-based evaluation.
    fn naive(t: &[f64], i: usize, k: usize, x: f64, last_interval: bool) -> f64 {
        if k == 0 {
            let inside = t[i] <= x && x < t[i + 1];
            let right_end = last_interval && x == t[i + 1] && t[i] < t[i + 1];
            return if inside || right_end { 1.0 } else { 0.0 };
        }
        let mut v = 0.0;
        if t[i + k] > t[i] {
            v += (x - t[i]) / (t[i + k] - t[i]) * naive(t, i, k - 1, x, last_interval);
        }
        if t[i + k + 1] > t[i + 1] {
            v += (t[i + k + 1] - x) / (t[i + k + 1] - t[i + 1]) * naive(t, i + 1, k - 1, x, last_interval);
        }
        v
    }

    #[test]
    fn matches_naive_recursion() {
        let b = SplineBasis::<f64>::new(2, vec![0.0, 0.0, 0.0, 0.3, 0.3, 0.8, 1.0, 1.0, 1.0]).unwrap();
        for i in 0..=50 {
            let x = i as f64 / 50.0;
            let row = b.eval(x).unwrap();
            for (j, &v) in row.iter().enumerate() {
                // Only the final interval may close on the right.
                let oracle = naive(b.knots(), j, 2, x, x == 1.0);
                assert!((v - oracle).abs() < 1e-12, "x={x} j={j}: {v} vs {oracle}");
            }
        }
    }

    #[test]
    fn out_of_span() {
        let b = SplineBasis::<f64>::clamped_uniform(3, 6, 0.0, 1.0).unwrap();
        assert!(matches!(b.eval(1.01), Err(Error::OutOfSpan { .. })));
        assert!(matches!(b.design(&[0.5, -0.2]), Err(Error::OutOfSpan { .. })));
    }

    #[test]
    fn bad_bases() {
        assert!(SplineBasis::<f64>::new(1, vec![1.0, 0.0, 2.0]).is_err());
        assert!(SplineBasis::<f64>::new(3, vec![0.0, 1.0]).is_err());
        assert!(SplineBasis::<f64>::clamped_uniform(3, 3, 0.0, 1.0).is_err());
    }

    #[test]
    fn zero_residual_keeps_mean() {
        let basis = SplineBasis::<f64>::clamped_uniform(3, 6, 0.0, 1.0).unwrap();
        let theta: Vec<f64> = (0..6).map(|i| i as f64 * 0.3 - 0.5).collect();
        let model = FpcaModel::new(basis.clone(), theta.clone(), 0.2).unwrap();
        let x = [0.1, 0.35, 0.9];
        let y = basis.design(&x).unwrap().matvec(&theta).unwrap();
        let fit = model.fit(&x, &y).unwrap();
        for (b, t) in fit.beta.iter().zip(&theta) {
            assert!((b - t).abs() < 1e-12);
        }
        let xs = [0.0, 0.5, 1.0];
        let post = fpca_posterior(&model, &x, &y, &xs).unwrap();
        let expected = basis.design(&xs).unwrap().matvec(&theta).unwrap();
        for (a, b) in post.mean.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn scalar_case() {
        // q = 1 with b ≡ 1: β̂ = θ_m + (y − θ_m)/(1 + σ²).
        let basis = SplineBasis::<f64>::new(0, vec![0.0, 1.0]).unwrap();
        for (theta, y, s2) in [(0.5, 2.0, 0.25), (-1.0, 0.3, 1.0)] {
            let model = FpcaModel::new(basis.clone(), vec![theta], s2).unwrap();
            let fit = model.fit(&[0.4], &[y]).unwrap();
            assert!((fit.beta[0] - (theta + (y - theta) / (1.0 + s2))).abs() < 1e-14);
            assert!((fit.gamma[(0, 0)] - 1.0 / (1.0 + 1.0 / s2)).abs() < 1e-14);
        }
    }

    #[test]
    fn requires_context() {
        let basis = SplineBasis::<f64>::clamped_uniform(3, 5, 0.0, 1.0).unwrap();
        let model = FpcaModel::new(basis, vec![0.0; 5], 1.0).unwrap();
        assert!(fpca_posterior(&model, &[], &[], &[0.5]).is_err());
    }

    #[test]
    fn equivalence_small() {
        let basis = SplineBasis::clamped_uniform(3, 8, 0.0, 1.0).unwrap();
        let theta: Vec<f64> = (0..8).map(|i| (i as f64).sin()).collect();
        let model = FpcaModel::new(basis, theta, 0.1).unwrap();
        let a = check_gp_fpca_equivalence(&model, 10, 3).unwrap();
        assert!(a.max_mean_discrepancy < 1e-8 && a.max_cov_discrepancy < 1e-8, "{a:?}");
        assert_eq!(a, check_gp_fpca_equivalence(&model, 10, 3).unwrap());
    }

    #[test]
    fn push_through_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..10 {
            let n = rng.random_range(1..12);
            let q = rng.random_range(1..9);
            let s2 = rng.random_range(0.05..2.0);
            let b = DenseMatrix::from_fn(n, q, |_, _| rng.random_range(-1.0..1.0));
            let mut bbt = b.matmul_t(&b).unwrap();
            bbt.add_to_diagonal(s2);
            let mut btb = b.t_matmul(&b).unwrap();
            btb.add_to_diagonal(s2);
            // Bᵀ(BBᵀ+σ²I)⁻¹ = ((BBᵀ+σ²I)⁻¹B)ᵀ
            let left = solve_cholesky(&cholesky(&bbt, 0.0).unwrap(), &b).unwrap().transpose();
            let right = solve_cholesky(&cholesky(&btb, 0.0).unwrap(), &b.transpose()).unwrap();
            assert!(left.sub(&right).unwrap().max_abs() < 1e-9);
        }
    }
}
