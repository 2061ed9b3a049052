//! Exact Gaussian-process regression with parameterized mean and kernel.
//!
//! All hyperparameters that must stay positive (lengthscale, signal and noise
//! variance) are stored as logarithms so that plain gradient steps keep them
//! valid.

use crate::fpca::SplineBasis;
use crate::linalg::{cholesky, dot, logdet_from_cholesky, CholeskyFactor, DenseMatrix};
use crate::nn::{self, MlpSpec, ParamVector};
use crate::scalar::{c, Scalar};
use crate::{Error, Result};

/// Named closed-form shapes for analytic mean functions. The mean is
/// `scale · shape(x₀)`, where `x₀` is the first input coordinate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ClosedForm {
    Sine { frequency: f64 },
    Constant,
}

impl ClosedForm {
    fn eval<T: Scalar>(self, x0: T) -> T {
        match self {
            ClosedForm::Sine { frequency } => (c::<T>(frequency) * x0).sin(),
            ClosedForm::Constant => T::one(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum MeanFunction<T> {
    Zero,
    Analytic { form: ClosedForm, scale: T },
    /// Network with a single output.
    Deep { spec: MlpSpec, params: ParamVector<T> },
    /// `m(x) = b(x)ᵀθ` on one-dimensional inputs.
    Spline { basis: SplineBasis<T>, coefficients: Vec<T> },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rbf<T> {
    pub log_lengthscale: T,
    pub log_signal_var: T,
}

impl<T: Scalar> Rbf<T> {
    pub fn new(lengthscale: f64, signal_var: f64) -> Self {
        Self {
            log_lengthscale: c(lengthscale.ln()),
            log_signal_var: c(signal_var.ln()),
        }
    }

    pub fn lengthscale(&self) -> T {
        self.log_lengthscale.exp()
    }

    pub fn signal_var(&self) -> T {
        self.log_signal_var.exp()
    }

    /// `σ_f² exp(−‖a−b‖²/(2ℓ²))` for all row pairs.
    fn gram(&self, a: &DenseMatrix<T>, b: &DenseMatrix<T>) -> DenseMatrix<T> {
        let s = self.signal_var();
        let inv = c::<T>(-0.5) / (self.lengthscale() * self.lengthscale());
        DenseMatrix::from_fn(a.rows(), b.rows(), |i, j| s * (sq_dist(a.row(i), b.row(j)) * inv).exp())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Kernel<T> {
    Rbf(Rbf<T>),
    /// RBF applied to a learned embedding of the inputs.
    Deep { spec: MlpSpec, params: ParamVector<T>, rbf: Rbf<T> },
    /// `k(x, x′) = b(x)ᵀb(x′)` on one-dimensional inputs.
    SplineInner { basis: SplineBasis<T> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct GpPrior<T> {
    pub mean: MeanFunction<T>,
    pub kernel: Kernel<T>,
    /// `log σ²`; negative infinity gives a noiseless prior.
    pub log_noise_var: T,
}

/// Which parameter groups a gradient is requested for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamGroups {
    pub mean: bool,
    pub kernel: bool,
    pub noise: bool,
}

impl ParamGroups {
    pub const ALL: Self = Self {
        mean: true,
        kernel: true,
        noise: true,
    };
    pub const NONE: Self = Self {
        mean: false,
        kernel: false,
        noise: false,
    };

    pub fn is_empty(&self) -> bool {
        !(self.mean || self.kernel || self.noise)
    }
}

/// Gradient over (mean parameters, kernel parameters, log noise variance).
///
/// Kernel layout: RBF is `[log ℓ, log σ_f²]`; a deep kernel is the network
/// parameters followed by its RBF pair; the spline kernel has none.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorGradient<T> {
    pub mean: Vec<T>,
    pub kernel: Vec<T>,
    pub log_noise_var: T,
}

impl<T: Scalar> PriorGradient<T> {
    pub fn zeros_like(p: &GpPrior<T>) -> Self {
        Self {
            mean: vec![T::zero(); p.mean.param_count()],
            kernel: vec![T::zero(); p.kernel.param_count()],
            log_noise_var: T::zero(),
        }
    }

    pub fn norm(&self) -> T {
        let sq = self.mean.iter().chain(&self.kernel).map(|&g| g * g).sum::<T>()
            + self.log_noise_var * self.log_noise_var;
        sq.sqrt()
    }

    pub fn scale(&mut self, s: T) {
        self.mean.iter_mut().chain(self.kernel.iter_mut()).for_each(|g| *g *= s);
        self.log_noise_var *= s;
    }

    /// Zeroes every group not in `keep`.
    pub fn mask(&mut self, keep: ParamGroups) {
        if !keep.mean {
            self.mean.iter_mut().for_each(|g| *g = T::zero());
        }
        if !keep.kernel {
            self.kernel.iter_mut().for_each(|g| *g = T::zero());
        }
        if !keep.noise {
            self.log_noise_var = T::zero();
        }
    }

    pub fn flatten(&self) -> Vec<T> {
        let mut v = self.mean.clone();
        v.extend_from_slice(&self.kernel);
        v.push(self.log_noise_var);
        v
    }

    pub fn is_finite(&self) -> bool {
        self.flatten().iter().all(|g| g.is_finite())
    }
}

#[inline]
fn sq_dist<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut s = T::zero();
    for (&u, &v) in a.iter().zip(b) {
        let d = u - v;
        s += d * d;
    }
    s
}

fn first_column<T: Scalar>(x: &DenseMatrix<T>) -> Result<Vec<T>> {
    if x.cols() != 1 {
        return Err(Error::DimensionMismatch(format!(
            "spline functions take 1-d inputs, got {} columns",
            x.cols()
        )));
    }
    Ok(x.as_slice().to_vec())
}

impl<T: Scalar> MeanFunction<T> {
    pub fn param_count(&self) -> usize {
        match self {
            MeanFunction::Zero => 0,
            MeanFunction::Analytic { .. } => 1,
            MeanFunction::Deep { params, .. } => params.len(),
            MeanFunction::Spline { coefficients, .. } => coefficients.len(),
        }
    }

    pub fn params(&self) -> Vec<T> {
        match self {
            MeanFunction::Zero => Vec::new(),
            MeanFunction::Analytic { scale, .. } => vec![*scale],
            MeanFunction::Deep { params, .. } => params.values.clone(),
            MeanFunction::Spline { coefficients, .. } => coefficients.clone(),
        }
    }

    /// Adds `step · delta` to the parameters.
    pub fn apply_step(&mut self, delta: &[T], step: T) {
        let target: &mut [T] = match self {
            MeanFunction::Zero => &mut [],
            MeanFunction::Analytic { scale, .. } => std::slice::from_mut(scale),
            MeanFunction::Deep { params, .. } => &mut params.values,
            MeanFunction::Spline { coefficients, .. } => coefficients,
        };
        for (p, &d) in target.iter_mut().zip(delta) {
            *p += step * d;
        }
    }
}

/// Evaluates the mean function at every row of `x`.
pub fn mean_eval<T: Scalar>(m: &MeanFunction<T>, x: &DenseMatrix<T>) -> Result<Vec<T>> {
    match m {
        MeanFunction::Zero => Ok(vec![T::zero(); x.rows()]),
        MeanFunction::Analytic { form, scale } => {
            if x.cols() == 0 {
                return Err(Error::DimensionMismatch("analytic mean on 0-d inputs".into()));
            }
            Ok((0..x.rows()).map(|i| *scale * form.eval(x[(i, 0)])).collect())
        }
        MeanFunction::Deep { spec, params } => {
            if spec.output_dim() != 1 {
                return Err(Error::DimensionMismatch(format!(
                    "deep mean network must have one output, has {}",
                    spec.output_dim()
                )));
            }
            Ok(nn::forward(spec, params, x)?.into_vec())
        }
        MeanFunction::Spline { basis, coefficients } => {
            let b = basis.design(&first_column(x)?)?;
            b.matvec(coefficients)
        }
    }
}

/// `∂(Σᵢ upstreamᵢ m(xᵢ))/∂θ_mean`
fn mean_vjp<T: Scalar>(m: &MeanFunction<T>, x: &DenseMatrix<T>, upstream: &[T]) -> Result<Vec<T>> {
    match m {
        MeanFunction::Zero => Ok(Vec::new()),
        MeanFunction::Analytic { form, .. } => {
            Ok(vec![(0..x.rows()).map(|i| upstream[i] * form.eval(x[(i, 0)])).sum()])
        }
        MeanFunction::Deep { spec, params } => {
            Ok(nn::vjp(spec, params, x, &DenseMatrix::column(upstream))?.param_grad)
        }
        MeanFunction::Spline { basis, .. } => {
            let b = basis.design(&first_column(x)?)?;
            b.t_matmul(&DenseMatrix::column(upstream)).map(DenseMatrix::into_vec)
        }
    }
}

impl<T: Scalar> Kernel<T> {
    pub fn param_count(&self) -> usize {
        match self {
            Kernel::Rbf(_) => 2,
            Kernel::Deep { params, .. } => params.len() + 2,
            Kernel::SplineInner { .. } => 0,
        }
    }

    pub fn params(&self) -> Vec<T> {
        match self {
            Kernel::Rbf(r) => vec![r.log_lengthscale, r.log_signal_var],
            Kernel::Deep { params, rbf, .. } => {
                let mut v = params.values.clone();
                v.push(rbf.log_lengthscale);
                v.push(rbf.log_signal_var);
                v
            }
            Kernel::SplineInner { .. } => Vec::new(),
        }
    }

    pub fn apply_step(&mut self, delta: &[T], step: T) {
        match self {
            Kernel::Rbf(r) => {
                r.log_lengthscale += step * delta[0];
                r.log_signal_var += step * delta[1];
            }
            Kernel::Deep { params, rbf, .. } => {
                let n = params.len();
                for (p, &d) in params.values.iter_mut().zip(&delta[..n]) {
                    *p += step * d;
                }
                rbf.log_lengthscale += step * delta[n];
                rbf.log_signal_var += step * delta[n + 1];
            }
            Kernel::SplineInner { .. } => {}
        }
    }

    /// Representation the base kernel acts on: raw inputs, network
    /// embeddings, or spline features.
    fn features(&self, x: &DenseMatrix<T>) -> Result<DenseMatrix<T>> {
        match self {
            Kernel::Rbf(_) => Ok(x.clone()),
            Kernel::Deep { spec, params, .. } => nn::forward(spec, params, x),
            Kernel::SplineInner { basis } => basis.design(&first_column(x)?),
        }
    }

    fn gram_from_features(&self, a: &DenseMatrix<T>, b: &DenseMatrix<T>) -> Result<DenseMatrix<T>> {
        match self {
            Kernel::Rbf(r) | Kernel::Deep { rbf: r, .. } => Ok(r.gram(a, b)),
            Kernel::SplineInner { .. } => a.matmul_t(b),
        }
    }

    /// `k(x, x)` for every row.
    pub fn diag(&self, x: &DenseMatrix<T>) -> Result<Vec<T>> {
        match self {
            Kernel::Rbf(r) | Kernel::Deep { rbf: r, .. } => Ok(vec![r.signal_var(); x.rows()]),
            Kernel::SplineInner { basis } => {
                let b = basis.design(&first_column(x)?)?;
                Ok((0..b.rows()).map(|i| dot(b.row(i), b.row(i))).collect())
            }
        }
    }
}

/// Gram matrix `K_ij = k(a_i, b_j)`.
pub fn kernel_matrix<T: Scalar>(k: &Kernel<T>, a: &DenseMatrix<T>, b: &DenseMatrix<T>) -> Result<DenseMatrix<T>> {
    if a.cols() != b.cols() {
        return Err(Error::DimensionMismatch(format!(
            "kernel inputs with {} and {} columns",
            a.cols(),
            b.cols()
        )));
    }
    let fa = k.features(a)?;
    let fb = k.features(b)?;
    k.gram_from_features(&fa, &fb)
}

impl<T: Scalar> GpPrior<T> {
    pub fn new(mean: MeanFunction<T>, kernel: Kernel<T>, noise_var: f64) -> Self {
        Self {
            mean,
            kernel,
            log_noise_var: c(noise_var.ln()),
        }
    }

    pub fn noise_var(&self) -> T {
        self.log_noise_var.exp()
    }

    pub fn param_count(&self) -> usize {
        self.mean.param_count() + self.kernel.param_count() + 1
    }

    /// `[mean…, kernel…, log σ²]`
    pub fn flat_params(&self) -> Vec<T> {
        let mut v = self.mean.params();
        v.extend(self.kernel.params());
        v.push(self.log_noise_var);
        v
    }

    /// Inverse of [`GpPrior::flat_params`].
    pub fn set_flat_params(&mut self, values: &[T]) -> Result<()> {
        if values.len() != self.param_count() {
            return Err(Error::DimensionMismatch(format!(
                "{} values for {} prior parameters",
                values.len(),
                self.param_count()
            )));
        }
        let nm = self.mean.param_count();
        let nk = self.kernel.param_count();
        match &mut self.mean {
            MeanFunction::Zero => {}
            MeanFunction::Analytic { scale, .. } => *scale = values[0],
            MeanFunction::Deep { params, .. } => params.values.copy_from_slice(&values[..nm]),
            MeanFunction::Spline { coefficients, .. } => coefficients.copy_from_slice(&values[..nm]),
        }
        match &mut self.kernel {
            Kernel::Rbf(r) => {
                r.log_lengthscale = values[nm];
                r.log_signal_var = values[nm + 1];
            }
            Kernel::Deep { params, rbf, .. } => {
                let np = params.len();
                params.values.copy_from_slice(&values[nm..nm + np]);
                rbf.log_lengthscale = values[nm + np];
                rbf.log_signal_var = values[nm + np + 1];
            }
            Kernel::SplineInner { .. } => {}
        }
        self.log_noise_var = values[nm + nk];
        Ok(())
    }

    /// `ψ ← ψ + step · g`
    pub fn apply_step(&mut self, g: &PriorGradient<T>, step: T) {
        self.mean.apply_step(&g.mean, step);
        self.kernel.apply_step(&g.kernel, step);
        self.log_noise_var += step * g.log_noise_var;
    }

    pub fn is_finite(&self) -> bool {
        self.flat_params()
            .iter()
            .enumerate()
            .all(|(i, v)| v.is_finite() || (i + 1 == self.param_count() && *v == T::neg_infinity()))
    }
}

/// Factorized `K + σ²I` for one data set, with the residual solve.
struct Conditioned<T> {
    features: DenseMatrix<T>,
    gram: DenseMatrix<T>,
    factor: CholeskyFactor<T>,
    residual: Vec<T>,
    alpha: Vec<T>,
}

fn check_data<T: Scalar>(x: &DenseMatrix<T>, y: &[T]) -> Result<()> {
    if x.rows() != y.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} inputs but {} targets",
            x.rows(),
            y.len()
        )));
    }
    Ok(())
}

fn condition<T: Scalar>(p: &GpPrior<T>, x: &DenseMatrix<T>, y: &[T]) -> Result<Conditioned<T>> {
    check_data(x, y)?;
    let features = p.kernel.features(x)?;
    let gram = p.kernel.gram_from_features(&features, &features)?;
    let mut a = gram.clone();
    a.add_to_diagonal(p.noise_var());
    let factor = cholesky(&a, T::zero())?;
    let m = mean_eval(&p.mean, x)?;
    let residual: Vec<T> = y.iter().zip(&m).map(|(&yi, &mi)| yi - mi).collect();
    let alpha = factor.solve_vec(&residual)?;
    Ok(Conditioned {
        features,
        gram,
        factor,
        residual,
        alpha,
    })
}

/// LML gradients over the mean parameters alone, for a prior whose kernel
/// and noise stay fixed; `K + σ²I` is factored once.
pub struct FixedCovariance<T> {
    factor: CholeskyFactor<T>,
}

impl<T: Scalar> FixedCovariance<T> {
    pub fn new(p: &GpPrior<T>, x: &DenseMatrix<T>) -> Result<Self> {
        let features = p.kernel.features(x)?;
        let mut a = p.kernel.gram_from_features(&features, &features)?;
        a.add_to_diagonal(p.noise_var());
        Ok(Self {
            factor: cholesky(&a, T::zero())?,
        })
    }

    /// Same values as the mean part of [`lml_gradient_for`].
    pub fn mean_gradient(&self, mean: &MeanFunction<T>, x: &DenseMatrix<T>, y: &[T]) -> Result<Vec<T>> {
        check_data(x, y)?;
        if x.rows() != self.factor.dim() {
            return Err(Error::DimensionMismatch(format!(
                "factor of size {} for {} inputs",
                self.factor.dim(),
                x.rows()
            )));
        }
        let m = mean_eval(mean, x)?;
        let residual: Vec<T> = y.iter().zip(&m).map(|(&yi, &mi)| yi - mi).collect();
        mean_vjp(mean, x, &self.factor.solve_vec(&residual)?)
    }
}

fn lml_value<T: Scalar>(cd: &Conditioned<T>) -> T {
    let n = cd.residual.len();
    let fit = dot(&cd.residual, &cd.alpha);
    let two_pi = c::<T>(2.0) * T::PI();
    c::<T>(-0.5) * fit - c::<T>(0.5) * logdet_from_cholesky(&cd.factor) - c::<T>(0.5) * T::from_count(n) * two_pi.ln()
}

/// `log p(y | X) = −½ rᵀ(K+σ²I)⁻¹r − ½ log|K+σ²I| − (n/2) log 2π`, `r = y − m(X)`.
pub fn log_marginal_likelihood<T: Scalar>(p: &GpPrior<T>, x: &DenseMatrix<T>, y: &[T]) -> Result<T> {
    Ok(lml_value(&condition(p, x, y)?))
}

/// Log marginal likelihood together with its gradient.
pub struct LmlEval<T> {
    pub value: T,
    pub gradient: PriorGradient<T>,
}

/// Gradient of the log marginal likelihood (the ascent direction) for every
/// parameter group.
pub fn lml_gradient<T: Scalar>(p: &GpPrior<T>, x: &DenseMatrix<T>, y: &[T]) -> Result<LmlEval<T>> {
    lml_gradient_for(p, x, y, ParamGroups::ALL)
}

/// As [`lml_gradient`], computing only the requested groups; the others are
/// left at zero.
pub fn lml_gradient_for<T: Scalar>(
    p: &GpPrior<T>,
    x: &DenseMatrix<T>,
    y: &[T],
    groups: ParamGroups,
) -> Result<LmlEval<T>> {
    let cd = condition(p, x, y)?;
    let mut gradient = PriorGradient::zeros_like(p);

    // ∂LML/∂m = α
    if groups.mean {
        gradient.mean = mean_vjp(&p.mean, x, &cd.alpha)?;
    }

    if groups.kernel || groups.noise {
        // ∂LML/∂K = ½(ααᵀ − (K+σ²I)⁻¹)
        let mut adj = cd.factor.inverse();
        let half = c::<T>(0.5);
        let n = x.rows();
        for i in 0..n {
            let ai = cd.alpha[i];
            for (j, v) in adj.row_mut(i).iter_mut().enumerate() {
                *v = half * (ai * cd.alpha[j] - *v);
            }
        }
        if groups.noise {
            let trace: T = adj.diag().into_iter().sum();
            gradient.log_noise_var = p.noise_var() * trace;
        }
        if groups.kernel {
            gradient.kernel = kernel_param_grad(&p.kernel, x, &cd, &adj)?;
        }
    }

    Ok(LmlEval {
        value: lml_value(&cd),
        gradient,
    })
}

/// Chains the Gram-matrix adjoint through the kernel parameters.
fn kernel_param_grad<T: Scalar>(
    k: &Kernel<T>,
    x: &DenseMatrix<T>,
    cd: &Conditioned<T>,
    adj: &DenseMatrix<T>,
) -> Result<Vec<T>> {
    let rbf = match k {
        Kernel::Rbf(r) | Kernel::Deep { rbf: r, .. } => r,
        Kernel::SplineInner { .. } => return Ok(Vec::new()),
    };
    let n = x.rows();
    let z = &cd.features;
    let ell2 = rbf.lengthscale() * rbf.lengthscale();
    // W = adj ⊙ K
    let mut d_log_s = T::zero();
    let mut d_log_ell = T::zero();
    let mut weights = DenseMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let w = adj[(i, j)] * cd.gram[(i, j)];
            weights[(i, j)] = w;
            d_log_s += w;
            d_log_ell += w * sq_dist(z.row(i), z.row(j));
        }
    }
    d_log_ell /= ell2;

    match k {
        Kernel::Rbf(_) => Ok(vec![d_log_ell, d_log_s]),
        Kernel::Deep { spec, params, .. } => {
            // ∂LML/∂z_i = −(2/ℓ²) Σ_j W_ij (z_i − z_j)
            let dim = z.cols();
            let scale = c::<T>(-2.0) / ell2;
            let mut dz = DenseMatrix::zeros(n, dim);
            for i in 0..n {
                let wi = weights.row(i);
                let row_sum: T = wi.iter().copied().sum();
                for d in 0..dim {
                    let mut acc = row_sum * z[(i, d)];
                    for (j, &w) in wi.iter().enumerate() {
                        acc -= w * z[(j, d)];
                    }
                    dz[(i, d)] = scale * acc;
                }
            }
            let mut g = nn::vjp(spec, params, x, &dz)?.param_grad;
            g.push(d_log_ell);
            g.push(d_log_s);
            Ok(g)
        }
        Kernel::SplineInner { .. } => unreachable!(),
    }
}

/// Predictive distribution of the latent function at the test inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPosterior<T> {
    pub mean: Vec<T>,
    pub cov: DenseMatrix<T>,
}

/// Means and marginal variances only.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginalPosterior<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Scalar> GaussianPosterior<T> {
    pub fn marginals(&self) -> MarginalPosterior<T> {
        MarginalPosterior {
            mean: self.mean.clone(),
            var: self.cov.diag(),
        }
    }
}

fn clamp_var<T: Scalar>(v: T) -> T {
    v.max(T::zero())
}

/// `m* = m(X*) + K*ˣ(Kˣˣ+σ²I)⁻¹(y − m(X))`, `K* = K** − K*ˣ(Kˣˣ+σ²I)⁻¹Kˣ*`.
/// With no context points the prior at `xs` is returned.
pub fn posterior_predict<T: Scalar>(
    p: &GpPrior<T>,
    x: &DenseMatrix<T>,
    y: &[T],
    xs: &DenseMatrix<T>,
) -> Result<GaussianPosterior<T>> {
    let prior_mean = mean_eval(&p.mean, xs)?;
    let fs = p.kernel.features(xs)?;
    let mut cov = p.kernel.gram_from_features(&fs, &fs)?;
    if x.rows() == 0 {
        check_data(x, y)?;
        clamp_diag(&mut cov);
        return Ok(GaussianPosterior { mean: prior_mean, cov });
    }
    if x.cols() != xs.cols() {
        return Err(Error::DimensionMismatch("context and test inputs differ in width".into()));
    }
    let cd = condition(p, x, y)?;
    let cross = p.kernel.gram_from_features(&cd.features, &fs)?; // n × m
    let mean = cross
        .t_matmul(&DenseMatrix::column(&cd.alpha))?
        .into_vec()
        .into_iter()
        .zip(prior_mean)
        .map(|(a, b)| a + b)
        .collect();
    let v = cd.factor.solve_lower(&cross)?;
    let reduction = v.t_matmul(&v)?;
    cov = cov.sub(&reduction)?;
    cov.symmetrize();
    clamp_diag(&mut cov);
    Ok(GaussianPosterior { mean, cov })
}

fn clamp_diag<T: Scalar>(cov: &mut DenseMatrix<T>) {
    for i in 0..cov.rows() {
        cov[(i, i)] = clamp_var(cov[(i, i)]);
    }
}

/// Means and marginal variances of the posterior without forming the full
/// test covariance.
pub fn posterior_marginals<T: Scalar>(
    p: &GpPrior<T>,
    x: &DenseMatrix<T>,
    y: &[T],
    xs: &DenseMatrix<T>,
) -> Result<MarginalPosterior<T>> {
    let prior_mean = mean_eval(&p.mean, xs)?;
    let prior_var = p.kernel.diag(xs)?;
    if x.rows() == 0 {
        check_data(x, y)?;
        return Ok(MarginalPosterior {
            mean: prior_mean,
            var: prior_var.into_iter().map(clamp_var).collect(),
        });
    }
    if x.cols() != xs.cols() {
        return Err(Error::DimensionMismatch("context and test inputs differ in width".into()));
    }
    let cd = condition(p, x, y)?;
    let fs = p.kernel.features(xs)?;
    let cross = p.kernel.gram_from_features(&cd.features, &fs)?;
    let shift = cross.t_matmul(&DenseMatrix::column(&cd.alpha))?.into_vec();
    let v = cd.factor.solve_lower(&cross)?;
    let mut reduction = vec![T::zero(); xs.rows()];
    for k in 0..v.rows() {
        for (r, &vk) in reduction.iter_mut().zip(v.row(k)) {
            *r += vk * vk;
        }
    }
    Ok(MarginalPosterior {
        mean: prior_mean.into_iter().zip(shift).map(|(a, b)| a + b).collect(),
        var: prior_var
            .into_iter()
            .zip(reduction)
            .map(|(pv, r)| clamp_var(pv - r))
            .collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub mse: f64,
    pub avg_log_density: f64,
}

/// Test MSE of the posterior mean and the average per-point log density
/// `log N(yᵢ; m*ᵢ, K*ᵢᵢ + σ²)`.
pub fn predictive_metrics<T: Scalar>(post: &MarginalPosterior<T>, p: &GpPrior<T>, y_true: &[T]) -> Result<Metrics> {
    if post.mean.len() != y_true.len() || post.var.len() != y_true.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} predictions for {} targets",
            post.mean.len(),
            y_true.len()
        )));
    }
    if y_true.is_empty() {
        return Ok(Metrics {
            mse: f64::NAN,
            avg_log_density: f64::NAN,
        });
    }
    let noise = p.noise_var().to_real();
    let ln_2pi = (2.0 * std::f64::consts::PI).ln();
    let mut sq = 0.0;
    let mut ll = 0.0;
    for ((&m, &v), &y) in post.mean.iter().zip(&post.var).zip(y_true) {
        let r = y.to_real() - m.to_real();
        let var = v.to_real() + noise;
        sq += r * r;
        ll += -0.5 * (ln_2pi + var.ln() + r * r / var);
    }
    let n = y_true.len() as f64;
    Ok(Metrics {
        mse: sq / n,
        avg_log_density: ll / n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{init_params, MlpSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const LN_2PI: f64 = 1.8378770664093453;

    fn rbf_prior(ell: f64, sf2: f64, noise: f64) -> GpPrior<f64> {
        GpPrior::new(MeanFunction::Zero, Kernel::Rbf(Rbf::new(ell, sf2)), noise)
    }

    fn col(v: &[f64]) -> DenseMatrix<f64> {
        DenseMatrix::column(v)
    }

    #[test]
    fn rbf_values() {
        let k = Kernel::<f64>::Rbf(Rbf::new(1.0, 1.0));
        let a = DenseMatrix::from_rows(&[[0.5, -1.0]]);
        assert!((kernel_matrix(&k, &a, &a).unwrap()[(0, 0)] - 1.0).abs() < 1e-15);
        let b = DenseMatrix::from_rows(&[[1.5, 0.0]]);
        assert!((kernel_matrix(&k, &a, &b).unwrap()[(0, 0)] - (-1f64).exp()).abs() < 1e-15);
        assert!(kernel_matrix(&k, &a, &col(&[1.0])).is_err());
    }

    #[test]
    fn collapsed_deep_kernel_is_constant() {
        let spec = MlpSpec::sigmoid(1, &[3], 2);
        let k = Kernel::Deep {
            params: ParamVector::zeros(&spec),
            spec,
            rbf: Rbf::new(0.7, 2.5),
        };
        let x = col(&[-3.0, 0.0, 1.0, 9.0]);
        let g = kernel_matrix(&k, &x, &x).unwrap();
        assert!(g.as_slice().iter().all(|&v| (v - 2.5).abs() < 1e-14));
    }

    #[test]
    fn mean_values() {
        let x = col(&[std::f64::consts::FRAC_PI_2, 0.0]);
        assert_eq!(mean_eval(&MeanFunction::Zero, &x).unwrap(), vec![0.0, 0.0]);
        let sine = MeanFunction::Analytic {
            form: ClosedForm::Sine { frequency: 1.0 },
            scale: 1.0,
        };
        assert!((mean_eval(&sine, &x).unwrap()[0] - 1.0).abs() < 1e-15);
        let spec = MlpSpec::sigmoid(1, &[4], 1);
        let deep = MeanFunction::Deep {
            params: ParamVector::zeros(&spec),
            spec,
        };
        assert_eq!(mean_eval(&deep, &x).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn lml_scalar_cases() {
        let p = GpPrior {
            log_noise_var: f64::NEG_INFINITY,
            ..rbf_prior(1.0, 1.0, 1.0)
        };
        let x = col(&[0.0]);
        let v0 = log_marginal_likelihood(&p, &x, &[0.0]).unwrap();
        assert!((v0 + 0.5 * LN_2PI).abs() < 1e-9);
        let v1 = log_marginal_likelihood(&p, &x, &[1.0]).unwrap();
        assert!((v1 + 0.5 + 0.5 * LN_2PI).abs() < 1e-9);
    }

    /// Independent 2×2 evaluation using the adjugate inverse and explicit determinant.
    fn lml_2x2(p: &GpPrior<f64>, x: &DenseMatrix<f64>, y: &[f64]) -> f64 {
        let k = kernel_matrix(&p.kernel, x, x).unwrap();
        let s = p.noise_var();
        let (a, b, d) = (k[(0, 0)] + s, k[(0, 1)], k[(1, 1)] + s);
        let det = a * d - b * b;
        let m = mean_eval(&p.mean, x).unwrap();
        let r = [y[0] - m[0], y[1] - m[1]];
        let quad = (d * r[0] * r[0] - 2.0 * b * r[0] * r[1] + a * r[1] * r[1]) / det;
        -0.5 * quad - 0.5 * det.ln() - LN_2PI
    }

    #[test]
    fn lml_matches_two_point_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..25 {
            let p = GpPrior::new(
                MeanFunction::Analytic {
                    form: ClosedForm::Sine { frequency: 1.3 },
                    scale: rng.random_range(-2.0..2.0),
                },
                Kernel::Rbf(Rbf::new(rng.random_range(0.3..2.0), rng.random_range(0.2..3.0))),
                rng.random_range(0.01..1.0),
            );
            let x = DenseMatrix::from_fn(2, 2, |_, _| rng.random_range(-2.0..2.0));
            let y = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
            let got = log_marginal_likelihood(&p, &x, &y).unwrap();
            assert!((got - lml_2x2(&p, &x, &y)).abs() < 1e-10);
        }
    }

    #[test]
    fn signal_variance_gradient_scalar() {
        // n = 1, σ² = 0: LML = −½y²/s − ½ log s − ½ log 2π, d/d log s = ½(y²/s − 1).
        for (s, y) in [(1.0, 0.3), (2.5, -1.7), (0.4, 2.0)] {
            let p = GpPrior {
                log_noise_var: f64::NEG_INFINITY,
                ..rbf_prior(1.0, s, 1.0)
            };
            let g = lml_gradient(&p, &col(&[0.2]), &[y]).unwrap();
            let expected = 0.5 * (y * y / s - 1.0);
            assert!((g.gradient.kernel[1] - expected).abs() < 1e-8, "{} vs {expected}", g.gradient.kernel[1]);
            assert_eq!(g.gradient.kernel[0], 0.0);
        }
    }

    #[test]
    fn zero_residual_gives_zero_mean_gradient() {
        let spec = MlpSpec::sigmoid(1, &[3], 1);
        let mean = MeanFunction::Deep {
            params: init_params(&spec, 2),
            spec,
        };
        let x = col(&[-1.0, 0.0, 0.5]);
        let y = mean_eval(&mean, &x).unwrap();
        let p = GpPrior::new(mean, Kernel::Rbf(Rbf::new(1.0, 1.0)), 0.1);
        let g = lml_gradient(&p, &x, &y).unwrap();
        assert!(g.gradient.mean.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fixed_covariance_matches_full_gradient() {
        let spec = MlpSpec::sigmoid(2, &[4], 1);
        let kspec = MlpSpec::sigmoid(2, &[3], 2);
        let p = GpPrior::new(
            MeanFunction::Deep {
                params: init_params(&spec, 5),
                spec,
            },
            Kernel::Deep {
                params: init_params(&kspec, 6),
                spec: kspec,
                rbf: Rbf::new(0.7, 1.3),
            },
            0.05,
        );
        let x = DenseMatrix::from_fn(6, 2, |i, j| (i as f64 - 2.5) * 0.4 + j as f64 * 0.1);
        let y = [0.3, -0.2, 0.9, 0.1, -0.7, 0.4];
        let fixed = FixedCovariance::new(&p, &x).unwrap();
        let full = lml_gradient_for(&p, &x, &y, ParamGroups { mean: true, kernel: false, noise: false }).unwrap();
        assert_eq!(fixed.mean_gradient(&p.mean, &x, &y).unwrap(), full.gradient.mean);
        assert!(fixed.mean_gradient(&p.mean, &col(&[0.0]), &[0.0]).is_err());
    }

    fn fd_check(p: &GpPrior<f64>, x: &DenseMatrix<f64>, y: &[f64]) -> f64 {
        let analytic = lml_gradient(p, x, y).unwrap().gradient.flatten();
        let base = p.flat_params();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for k in 0..base.len() {
            let eval = |delta: f64| {
                let mut q = p.clone();
                let mut v = base.clone();
                v[k] += delta;
                q.set_flat_params(&v).unwrap();
                log_marginal_likelihood(&q, x, y).unwrap()
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let err = (fd - analytic[k]).abs() / fd.abs().max(analytic[k].abs()).max(1e-5);
            worst = worst.max(err);
        }
        worst
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mean_spec = MlpSpec::sigmoid(1, &[5], 1);
        let kern_spec = MlpSpec::sigmoid(1, &[5], 2);
        for trial in 0..4u64 {
            let n = 6;
            let x = DenseMatrix::from_fn(n, 1, |_, _| rng.random_range(-2.0..2.0));
            let y: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let means = [
                MeanFunction::Zero,
                MeanFunction::Deep {
                    spec: mean_spec.clone(),
                    params: init_params(&mean_spec, trial),
                },
            ];
            let kernels = [
                Kernel::Rbf(Rbf::new(0.8, 1.3)),
                Kernel::Deep {
                    spec: kern_spec.clone(),
                    params: init_params(&kern_spec, trial + 100),
                    rbf: Rbf::new(0.5, 1.1),
                },
            ];
            for m in &means {
                for k in &kernels {
                    let p = GpPrior::new(m.clone(), k.clone(), 0.05);
                    let err = fd_check(&p, &x, &y);
                    assert!(err < 1e-4, "trial {trial}: {err}");
                }
            }
        }
    }

    #[test]
    fn posterior_cases() {
        let p = rbf_prior(1.0, 1.0, 0.3);
        let xs = col(&[0.0, 1.0]);
        let empty = DenseMatrix::zeros(0, 1);
        let prior = posterior_predict(&p, &empty, &[], &xs).unwrap();
        assert_eq!(prior.mean, vec![0.0, 0.0]);
        assert_eq!(prior.cov, kernel_matrix(&p.kernel, &xs, &xs).unwrap());

        let noiseless = GpPrior {
            log_noise_var: f64::NEG_INFINITY,
            ..p.clone()
        };
        let x = col(&[0.4]);
        let post = posterior_predict(&noiseless, &x, &[1.7], &x).unwrap();
        assert!((post.mean[0] - 1.7).abs() < 1e-8);
        assert!(post.cov[(0, 0)].abs() < 1e-8);

        let sine = GpPrior::new(
            MeanFunction::Analytic {
                form: ClosedForm::Sine { frequency: 1.0 },
                scale: 2.0,
            },
            Kernel::Rbf(Rbf::new(1.0, 1.0)),
            0.01,
        );
        let far = col(&[100.0]);
        let post = posterior_predict(&sine, &col(&[0.0]), &[5.0], &far).unwrap();
        assert!((post.mean[0] - 2.0 * 100f64.sin()).abs() < 1e-8);
        assert!((post.cov[(0, 0)] - 1.0).abs() < 1e-8);
    }

    #[test]
    fn marginals_agree_with_full_posterior() {
        let spec = MlpSpec::sigmoid(2, &[4], 2);
        let p = GpPrior::new(
            MeanFunction::Analytic {
                form: ClosedForm::Constant,
                scale: 0.3,
            },
            Kernel::Deep {
                params: init_params(&spec, 9),
                spec,
                rbf: Rbf::new(0.6, 1.4),
            },
            0.02,
        );
        let x = DenseMatrix::from_fn(5, 2, |i, j| (i * 2 + j) as f64 * 0.17 - 0.5);
        let y = [0.1, 0.4, -0.3, 0.9, 0.0];
        let xs = DenseMatrix::from_fn(7, 2, |i, j| (i + j) as f64 * 0.21 - 0.7);
        let full = posterior_predict(&p, &x, &y, &xs).unwrap().marginals();
        let cheap = posterior_marginals(&p, &x, &y, &xs).unwrap();
        for i in 0..7 {
            assert!((full.mean[i] - cheap.mean[i]).abs() < 1e-12);
            assert!((full.var[i] - cheap.var[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn metric_cases() {
        let p = GpPrior {
            log_noise_var: f64::NEG_INFINITY,
            ..rbf_prior(1.0, 1.0, 1.0)
        };
        let post = MarginalPosterior {
            mean: vec![0.5, -1.0],
            var: vec![1.0, 1.0],
        };
        let m = predictive_metrics(&post, &p, &[0.5, -1.0]).unwrap();
        assert_eq!(m.mse, 0.0);
        assert!((m.avg_log_density + 0.5 * LN_2PI).abs() < 1e-15);

        let p1 = rbf_prior(1.0, 1.0, 0.25);
        let post = MarginalPosterior {
            mean: vec![0.0],
            var: vec![0.75],
        };
        let m = predictive_metrics(&post, &p1, &[2.0]).unwrap();
        assert!((m.mse - 4.0).abs() < 1e-15);
        assert!((m.avg_log_density - (-2.0 - 0.5 * LN_2PI)).abs() < 1e-12);
        assert!(predictive_metrics(&post, &p1, &[1.0, 2.0]).is_err());
    }
}
