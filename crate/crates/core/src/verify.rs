//! Self-checks of the numerical machinery: finite-difference gradient checks,
//! the GP/FPCA posterior equivalence, the zero-mean counter-example and the
//! dense linear-algebra properties.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::fpca::{check_gp_fpca_equivalence, FpcaModel, SplineBasis};
use crate::gp::{
    lml_gradient, log_marginal_likelihood, posterior_predict, ClosedForm, GpPrior, Kernel, MeanFunction, Rbf,
};
use crate::linalg::{cholesky, logdet_from_cholesky, solve_cholesky, DenseMatrix};
use crate::nn::{forward, init_params, vjp, Activation, MlpSpec, ParamVector};
use crate::Result;

type Prior = GpPrior<f64>;
type Matrix = DenseMatrix<f64>;

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_REL_TOL: f64 = 1e-4;
/// Denominator floor of the relative error, so that vanishing gradients are
/// compared in absolute terms.
pub const GRAD_REL_FLOOR: f64 = 1e-4;
pub const EQUIVALENCE_TOL: f64 = 1e-8;
pub const COUNTER_ZERO_TOL: f64 = 1e-10;
pub const COUNTER_TRUE_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Default)]
pub struct VerifyReport {
    pub checks: Vec<Check>,
}

impl VerifyReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    fn push(&mut self, name: impl Into<String>, passed: bool, detail: impl Into<String>) {
        self.checks.push(Check {
            name: name.into(),
            passed,
            detail: detail.into(),
        });
    }

    fn push_result(&mut self, name: &str, r: Result<(bool, String)>) {
        match r {
            Ok((passed, detail)) => self.push(name, passed, detail),
            Err(e) => self.push(name, false, format!("error: {e}")),
        }
    }
}

impl fmt::Display for VerifyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            writeln!(f, "{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail)?;
        }
        Ok(())
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(GRAD_REL_FLOOR)
}

/// Largest relative error between `analytic` and central differences of `f`
/// around `x0`.
pub fn max_fd_error(f: impl Fn(&[f64]) -> Result<f64>, analytic: &[f64], x0: &[f64]) -> Result<f64> {
    let mut worst: f64 = 0.0;
    let mut x = x0.to_vec();
    for k in 0..x0.len() {
        x[k] = x0[k] + FD_STEP;
        let up = f(&x)?;
        x[k] = x0[k] - FD_STEP;
        let down = f(&x)?;
        x[k] = x0[k];
        worst = worst.max(rel_err((up - down) / (2.0 * FD_STEP), analytic[k]));
    }
    Ok(worst)
}

/// Signature of an LML gradient routine returning the flat gradient in
/// [`GpPrior::flat_params`] order.
pub type GradientFn = dyn Fn(&Prior, &Matrix, &[f64]) -> Result<Vec<f64>>;

pub fn analytic_lml_gradient(p: &Prior, x: &Matrix, y: &[f64]) -> Result<Vec<f64>> {
    Ok(lml_gradient(p, x, y)?.gradient.flatten())
}

/// Worst relative error of `grad` against finite differences of the LML.
pub fn lml_gradient_error(p: &Prior, x: &Matrix, y: &[f64], grad: &GradientFn) -> Result<f64> {
    let analytic = grad(p, x, y)?;
    let f = |v: &[f64]| {
        let mut q = p.clone();
        q.set_flat_params(v)?;
        log_marginal_likelihood(&q, x, y)
    };
    max_fd_error(f, &analytic, &p.flat_params())
}

/// Mean/kernel combinations exercised by the gradient checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PriorShape {
    ZeroRbf,
    ZeroDeep,
    DeepRbf,
    DeepDeep,
}

impl PriorShape {
    pub const ALL: [PriorShape; 4] = [
        PriorShape::ZeroRbf,
        PriorShape::ZeroDeep,
        PriorShape::DeepRbf,
        PriorShape::DeepDeep,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PriorShape::ZeroRbf => "zero mean / RBF kernel",
            PriorShape::ZeroDeep => "zero mean / deep kernel",
            PriorShape::DeepRbf => "deep mean / RBF kernel",
            PriorShape::DeepDeep => "deep mean / deep kernel",
        }
    }
}

/// A random small prior and data set: `n ≤ 8`, input width 1 or 2, at most
/// a few dozen parameters per network.
pub fn random_lml_instance(shape: PriorShape, rng: &mut ChaCha8Rng) -> (Prior, Matrix, Vec<f64>) {
    let d = rng.random_range(1..=2);
    let n = rng.random_range(2..=8);
    let h1 = rng.random_range(2..=6);
    let h2 = rng.random_range(2..=5);
    let mean = if matches!(shape, PriorShape::DeepRbf | PriorShape::DeepDeep) {
        let spec = MlpSpec::sigmoid(d, &[h1, h2], 1);
        MeanFunction::Deep {
            params: scaled_init(&spec, rng),
            spec,
        }
    } else {
        MeanFunction::Zero
    };
    let rbf = Rbf::new(rng.random_range(0.5..2.0), rng.random_range(0.3..2.0));
    let kernel = if matches!(shape, PriorShape::ZeroDeep | PriorShape::DeepDeep) {
        let spec = MlpSpec::sigmoid(d, &[h1, h2], 2);
        Kernel::Deep {
            params: scaled_init(&spec, rng),
            spec,
            rbf,
        }
    } else {
        Kernel::Rbf(rbf)
    };
    let p = GpPrior::new(mean, kernel, rng.random_range(0.05..0.5));
    let x = DenseMatrix::from_fn(n, d, |_, _| rng.random_range(-2.0..2.0));
    let y = (0..n).map(|_| rng.random_range(-1.5..1.5)).collect();
    (p, x, y)
}

/// Glorot draw with the biases randomized too, so bias gradients are exercised.
fn scaled_init(spec: &MlpSpec, rng: &mut ChaCha8Rng) -> ParamVector<f64> {
    let mut p: ParamVector<f64> = init_params(spec, rng.random());
    for v in &mut p.values {
        if *v == 0.0 {
            *v = rng.random_range(-0.5..0.5);
        }
    }
    p
}

/// Worst finite-difference error over `instances` random priors of one shape.
pub fn lml_gradient_check(shape: PriorShape, instances: usize, seed: u64, grad: &GradientFn) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let (p, x, y) = random_lml_instance(shape, &mut rng);
        worst = worst.max(lml_gradient_error(&p, &x, &y, grad)?);
    }
    Ok(worst)
}

/// Worst finite-difference error of the network vjp over random small
/// networks (at most 50 parameters).
pub fn nn_gradient_check(instances: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let mut done = 0;
    while done < instances {
        let d = rng.random_range(1..=3);
        let h = rng.random_range(1..=5);
        let out = rng.random_range(1..=2);
        let act = if rng.random_bool(0.5) {
            Activation::Sigmoid
        } else {
            Activation::Relu
        };
        let spec = MlpSpec::new(vec![d, h, out], act)?;
        if spec.param_count() > 50 {
            continue;
        }
        let params = scaled_init(&spec, &mut rng);
        let n = rng.random_range(1..=6);
        let x = DenseMatrix::from_fn(n, d, |_, _| rng.random_range(-2.0..2.0));
        let up = DenseMatrix::from_fn(n, out, |_, _| rng.random_range(-1.0..1.0));
        let analytic = vjp(&spec, &params, &x, &up)?.param_grad;
        let f = |v: &[f64]| -> Result<f64> {
            let out = forward(&spec, &ParamVector { values: v.to_vec() }, &x)?;
            Ok(out.as_slice().iter().zip(up.as_slice()).map(|(a, b)| a * b).sum())
        };
        worst = worst.max(max_fd_error(f, &analytic, &params.values)?);
        done += 1;
    }
    Ok(worst)
}

/// Posterior means at test points for the zero-mean counter-example: the
/// target vanishes at every training input, so any zero-mean GP predicts 0
/// there, while the prior with the true mean recovers it exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct CounterExample {
    pub zero_mean_rbf_max: f64,
    pub zero_mean_deep_max: f64,
    pub true_mean_max_err: f64,
}

pub fn counter_example(seed: u64) -> Result<CounterExample> {
    // m_true(x) = sin(πx): zero on the integers, ±1 on the half-integers.
    let form = ClosedForm::Sine {
        frequency: std::f64::consts::PI,
    };
    let x = DenseMatrix::column(&[-3.0, -2.0, -1.0, 0.0, 1.0, 2.0, 3.0]);
    let y = vec![0.0; x.rows()];
    let xs = DenseMatrix::column(&[-2.5, -1.5, -0.5, 0.5, 1.5, 2.5, 0.25]);
    let truth: Vec<f64> = (0..xs.rows()).map(|i| (std::f64::consts::PI * xs[(i, 0)]).sin()).collect();
    let noiseless = 0.0;

    let max_abs = |p: &Prior| -> Result<f64> {
        let post = posterior_predict(p, &x, &y, &xs)?;
        Ok(post.mean.iter().fold(0.0f64, |m, v| m.max(v.abs())))
    };
    let rbf = GpPrior::new(MeanFunction::Zero, Kernel::Rbf(Rbf::new(0.7, 1.0)), noiseless);
    let spec = MlpSpec::sigmoid(1, &[8, 8], 2);
    let deep = GpPrior::new(
        MeanFunction::Zero,
        Kernel::Deep {
            params: init_params(&spec, seed),
            spec,
            rbf: Rbf::new(1.0, 1.0),
        },
        noiseless,
    );
    let truth_prior = GpPrior::new(MeanFunction::Analytic { form, scale: 1.0 }, Kernel::Rbf(Rbf::new(0.7, 1.0)), noiseless);
    let post = posterior_predict(&truth_prior, &x, &y, &xs)?;
    let true_mean_max_err = post.mean.iter().zip(&truth).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    Ok(CounterExample {
        zero_mean_rbf_max: max_abs(&rbf)?,
        zero_mean_deep_max: max_abs(&deep)?,
        true_mean_max_err,
    })
}

fn random_spd(n: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let m = DenseMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    let mut a = m.matmul_t(&m).expect("square");
    a.add_to_diagonal(1.0);
    a
}

fn det_explicit(a: &Matrix) -> f64 {
    match a.rows() {
        2 => a[(0, 0)] * a[(1, 1)] - a[(0, 1)] * a[(1, 0)],
        3 => {
            a[(0, 0)] * (a[(1, 1)] * a[(2, 2)] - a[(1, 2)] * a[(2, 1)])
                - a[(0, 1)] * (a[(1, 0)] * a[(2, 2)] - a[(1, 2)] * a[(2, 0)])
                + a[(0, 2)] * (a[(1, 0)] * a[(2, 1)] - a[(1, 1)] * a[(2, 0)])
        }
        _ => unreachable!("explicit determinants for 2×2 and 3×3 only"),
    }
}

/// Worst (reconstruction, self-solve, logdet) errors over random SPD matrices.
pub fn linalg_properties(trials: usize, seed: u64) -> Result<(f64, f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut rec, mut solve, mut logdet) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..trials {
        let a = random_spd(5, &mut rng);
        let f = cholesky(&a, 0.0)?;
        rec = rec.max(f.reconstruct().sub(&a)?.frobenius_norm() / a.frobenius_norm());
        let inv_a = solve_cholesky(&f, &a)?;
        solve = solve.max(inv_a.sub(&DenseMatrix::identity(5))?.max_abs());
        for n in [2, 3] {
            let b = random_spd(n, &mut rng);
            let got = logdet_from_cholesky(&cholesky(&b, 0.0)?);
            logdet = logdet.max((got - det_explicit(&b).ln()).abs());
        }
    }
    Ok((rec, solve, logdet))
}

/// Runs every check; the report lists each with its threshold.
pub fn verify_suite(seed: u64) -> VerifyReport {
    let mut report = VerifyReport::default();

    report.push_result(
        "network vjp vs finite differences",
        nn_gradient_check(20, seed).map(|e| (e < GRAD_REL_TOL, format!("max rel err {e:.2e} < {GRAD_REL_TOL:e}"))),
    );

    for (i, shape) in PriorShape::ALL.into_iter().enumerate() {
        let name = format!("LML gradient vs finite differences ({})", shape.name());
        report.push_result(
            &name,
            lml_gradient_check(shape, 20, seed.wrapping_add(i as u64 + 1), &analytic_lml_gradient)
                .map(|e| (e < GRAD_REL_TOL, format!("max rel err {e:.2e} < {GRAD_REL_TOL:e} over 20 instances"))),
        );
    }

    let equivalence = SplineBasis::clamped_uniform(3, 8, 0.0, 1.0)
        .and_then(|basis| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let theta: Vec<f64> = (0..basis.q()).map(|_| rng.random_range(-1.0..1.0)).collect();
            FpcaModel::new(basis, theta, 0.1)
        })
        .and_then(|model| check_gp_fpca_equivalence(&model, 50, seed));
    report.push_result(
        "GP and FPCA posteriors coincide",
        equivalence.map(|r| {
            (
                r.max_mean_discrepancy < EQUIVALENCE_TOL && r.max_cov_discrepancy < EQUIVALENCE_TOL,
                format!(
                    "max mean disc {:.2e}, max cov disc {:.2e} < {EQUIVALENCE_TOL:e} over {} trials",
                    r.max_mean_discrepancy,
                    r.max_cov_discrepancy,
                    r.trials.len()
                ),
            )
        }),
    );

    report.push_result(
        "zero-mean counter-example",
        counter_example(seed).map(|c| {
            (
                c.zero_mean_rbf_max <= COUNTER_ZERO_TOL
                    && c.zero_mean_deep_max <= COUNTER_ZERO_TOL
                    && c.true_mean_max_err <= COUNTER_TRUE_TOL,
                format!(
                    "zero-mean |m*| max {:.1e} (RBF), {:.1e} (deep) <= {COUNTER_ZERO_TOL:e}; true-mean err {:.1e} <= {COUNTER_TRUE_TOL:e}",
                    c.zero_mean_rbf_max, c.zero_mean_deep_max, c.true_mean_max_err
                ),
            )
        }),
    );

    report.push_result(
        "dense linear algebra properties",
        linalg_properties(50, seed).map(|(rec, solve, logdet)| {
            (
                rec < 1e-8 && solve < 1e-7 && logdet < 1e-10,
                format!("reconstruction {rec:.1e} < 1e-8, self-solve {solve:.1e} < 1e-7, logdet {logdet:.1e} < 1e-10"),
            )
        }),
    );
    report
}
