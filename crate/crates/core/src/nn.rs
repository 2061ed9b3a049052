//! Small fully connected networks with reverse-mode parameter gradients.
//!
//! These are the function class for deep mean functions and for the feature
//! maps of deep kernels. Parameters live in one flat vector laid out as
//! `[W₁, b₁, W₂, b₂, …]`, each `W` stored row-major with shape
//! `(fan_out, fan_in)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::linalg::{axpy, dot, DenseMatrix};
use crate::scalar::{c, Scalar};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Activation {
    Sigmoid,
    Relu,
}

impl Activation {
    pub fn tag(self) -> u8 {
        match self {
            Activation::Sigmoid => 0,
            Activation::Relu => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Activation::Sigmoid),
            1 => Some(Activation::Relu),
            _ => None,
        }
    }

    #[inline]
    fn apply<T: Scalar>(self, z: T) -> T {
        match self {
            Activation::Sigmoid => T::one() / (T::one() + (-z).exp()),
            Activation::Relu => z.max(T::zero()),
        }
    }

    /// Derivative expressed through the activation's output.
    #[inline]
    fn grad_from_output<T: Scalar>(self, h: T) -> T {
        match self {
            Activation::Sigmoid => h * (T::one() - h),
            Activation::Relu => {
                if h > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
        }
    }
}

/// Architecture: layer widths from input to output; hidden layers use
/// `activation`, the output layer is linear.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct MlpSpec {
    pub layer_sizes: Vec<usize>,
    pub activation: Activation,
}

impl MlpSpec {
    pub fn new(layer_sizes: Vec<usize>, activation: Activation) -> Result<Self> {
        let spec = Self {
            layer_sizes,
            activation,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Sigmoid network `input → hidden… → output`.
    pub fn sigmoid(input: usize, hidden: &[usize], output: usize) -> Self {
        let mut sizes = vec![input];
        sizes.extend_from_slice(hidden);
        sizes.push(output);
        Self {
            layer_sizes: sizes,
            activation: Activation::Sigmoid,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_sizes.len() < 2 || self.layer_sizes.contains(&0) {
            return Err(Error::Config(format!(
                "invalid layer sizes {:?}",
                self.layer_sizes
            )));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().expect("validated spec")
    }

    pub fn num_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    pub fn param_count(&self) -> usize {
        self.layer_sizes
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }

    /// Offsets of (weights, biases) for each layer within the flat vector.
    fn offsets(&self) -> Vec<(usize, usize)> {
        let mut at = 0;
        self.layer_sizes
            .windows(2)
            .map(|w| {
                let weights = at;
                let biases = weights + w[0] * w[1];
                at = biases + w[1];
                (weights, biases)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector<T> {
    pub values: Vec<T>,
}

impl<T: Scalar> ParamVector<T> {
    pub fn zeros(spec: &MlpSpec) -> Self {
        Self {
            values: vec![T::zero(); spec.param_count()],
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    fn check(&self, spec: &MlpSpec) -> Result<()> {
        if self.values.len() != spec.param_count() {
            return Err(Error::DimensionMismatch(format!(
                "{} parameters for a network needing {}",
                self.values.len(),
                spec.param_count()
            )));
        }
        Ok(())
    }
}

pub struct VjpResult<T> {
    pub outputs: DenseMatrix<T>,
    pub param_grad: Vec<T>,
}

/// Glorot-uniform weights, zero biases.
pub fn init_params<T: Scalar>(spec: &MlpSpec, seed: u64) -> ParamVector<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = vec![T::zero(); spec.param_count()];
    for (w, (w_off, b_off)) in spec.layer_sizes.windows(2).zip(spec.offsets()) {
        let limit = (6.0 / (w[0] + w[1]) as f64).sqrt();
        for v in &mut values[w_off..b_off] {
            *v = c(rng.random_range(-limit..limit));
        }
    }
    ParamVector { values }
}

fn check_input<T: Scalar>(spec: &MlpSpec, params: &ParamVector<T>, x: &DenseMatrix<T>) -> Result<()> {
    params.check(spec)?;
    if x.cols() != spec.input_dim() {
        return Err(Error::DimensionMismatch(format!(
            "network expects {} input columns, got {}",
            spec.input_dim(),
            x.cols()
        )));
    }
    Ok(())
}

/// One dense layer: `H Wᵀ + b`, optionally followed by the activation.
fn layer<T: Scalar>(
    h: &DenseMatrix<T>,
    weights: &[T],
    biases: &[T],
    activation: Option<Activation>,
) -> DenseMatrix<T> {
    let fan_in = h.cols();
    let fan_out = biases.len();
    let mut out = DenseMatrix::zeros(h.rows(), fan_out);
    for i in 0..h.rows() {
        let hi = h.row(i);
        let oi = out.row_mut(i);
        for (o, slot) in oi.iter_mut().enumerate() {
            let z = dot(hi, &weights[o * fan_in..(o + 1) * fan_in]) + biases[o];
            *slot = match activation {
                Some(a) => a.apply(z),
                None => z,
            };
        }
    }
    out
}

/// Post-activation outputs of every layer (the last one is the network output).
fn forward_trace<T: Scalar>(
    spec: &MlpSpec,
    params: &ParamVector<T>,
    x: &DenseMatrix<T>,
) -> Vec<DenseMatrix<T>> {
    let last = spec.num_layers() - 1;
    let mut trace: Vec<DenseMatrix<T>> = Vec::with_capacity(spec.num_layers());
    for (l, (w_off, b_off)) in spec.offsets().into_iter().enumerate() {
        let fan_out = spec.layer_sizes[l + 1];
        let act = (l < last).then_some(spec.activation);
        let input = if l == 0 { x } else { &trace[l - 1] };
        let h = layer(
            input,
            &params.values[w_off..b_off],
            &params.values[b_off..b_off + fan_out],
            act,
        );
        trace.push(h);
    }
    trace
}

pub fn forward<T: Scalar>(
    spec: &MlpSpec,
    params: &ParamVector<T>,
    x: &DenseMatrix<T>,
) -> Result<DenseMatrix<T>> {
    check_input(spec, params, x)?;
    Ok(forward_trace(spec, params, x).pop().expect("at least one layer"))
}

/// Vector-Jacobian product with respect to the parameters:
/// `param_grad[k] = Σ_ij upstream_ij ∂out_ij/∂θ_k`.
pub fn vjp<T: Scalar>(
    spec: &MlpSpec,
    params: &ParamVector<T>,
    x: &DenseMatrix<T>,
    upstream: &DenseMatrix<T>,
) -> Result<VjpResult<T>> {
    check_input(spec, params, x)?;
    if upstream.shape() != (x.rows(), spec.output_dim()) {
        return Err(Error::DimensionMismatch(format!(
            "upstream {:?} for outputs ({}, {})",
            upstream.shape(),
            x.rows(),
            spec.output_dim()
        )));
    }
    let trace = forward_trace(spec, params, x);
    let offsets = spec.offsets();
    let mut grad = vec![T::zero(); params.len()];
    let mut delta = upstream.clone();

    for l in (0..spec.num_layers()).rev() {
        let (w_off, b_off) = offsets[l];
        let fan_in = spec.layer_sizes[l];
        let fan_out = spec.layer_sizes[l + 1];
        let input = if l == 0 { x } else { &trace[l - 1] };

        {
            let (gw, gb) = grad[w_off..b_off + fan_out].split_at_mut(b_off - w_off);
            for i in 0..input.rows() {
                let hi = input.row(i);
                for (o, &d) in delta.row(i).iter().enumerate() {
                    if d != T::zero() {
                        axpy(d, hi, &mut gw[o * fan_in..(o + 1) * fan_in]);
                        gb[o] += d;
                    }
                }
            }
        }

        if l > 0 {
            let weights = &params.values[w_off..b_off];
            let mut prev = DenseMatrix::zeros(input.rows(), fan_in);
            for i in 0..input.rows() {
                let pi = prev.row_mut(i);
                for (o, &d) in delta.row(i).iter().enumerate() {
                    if d != T::zero() {
                        axpy(d, &weights[o * fan_in..(o + 1) * fan_in], pi);
                    }
                }
                for (p, &h) in pi.iter_mut().zip(input.row(i)) {
                    *p *= spec.activation.grad_from_output(h);
                }
            }
            delta = prev;
        }
        debug_assert_eq!(delta.cols(), if l > 0 { fan_in } else { fan_out });
    }

    Ok(VjpResult {
        outputs: trace.into_iter().last().expect("at least one layer"),
        param_grad: grad,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn col(v: &[f64]) -> DenseMatrix<f64> {
        DenseMatrix::column(v)
    }

    #[test]
    fn init_is_deterministic_and_laid_out() {
        let spec = MlpSpec::sigmoid(1, &[64, 64], 1);
        assert_eq!(init_params::<f64>(&spec, 7), init_params::<f64>(&spec, 7));
        assert_ne!(init_params::<f64>(&spec, 7), init_params::<f64>(&spec, 8));
        assert_eq!(MlpSpec::sigmoid(2, &[3], 1).param_count(), 13);

        let small = MlpSpec::sigmoid(1, &[2], 1);
        let p = init_params::<f64>(&small, 123);
        // [W1(2), b1(2), W2(2), b2(1)]
        assert_eq!(&p.values[2..4], &[0.0, 0.0]);
        assert_eq!(p.values[6], 0.0);
        let limit = (6.0f64 / 3.0).sqrt();
        assert!(p.values[..2].iter().all(|w| w.abs() <= limit));
    }

    #[test]
    fn spec_validation() {
        assert!(MlpSpec::new(vec![3], Activation::Sigmoid).is_err());
        assert!(MlpSpec::new(vec![3, 0, 1], Activation::Relu).is_err());
        assert!(MlpSpec::new(vec![3, 1], Activation::Relu).is_ok());
    }

    #[test]
    fn forward_examples() {
        let spec = MlpSpec::sigmoid(1, &[2], 1);
        let zero = ParamVector::zeros(&spec);
        let out = forward(&spec, &zero, &col(&[-3.0, 0.0, 5.0])).unwrap();
        assert!(out.as_slice().iter().all(|&v| v == 0.0));

        let affine = MlpSpec::sigmoid(1, &[], 1);
        let p = ParamVector { values: vec![2.0, 1.0] };
        assert_eq!(forward(&affine, &p, &col(&[3.0])).unwrap()[(0, 0)], 7.0);

        let one = MlpSpec::sigmoid(1, &[1], 1);
        let p = ParamVector { values: vec![0.0, 0.0, 4.0, 0.0] };
        let out = forward(&one, &p, &col(&[-10.0, 0.3, 42.0])).unwrap();
        assert!(out.as_slice().iter().all(|&v| (v - 2.0).abs() < 1e-15));
    }

    #[test]
    fn relu_forward() {
        let spec = MlpSpec::new(vec![1, 1, 1], Activation::Relu).unwrap();
        let p = ParamVector { values: vec![1.0, -1.0, 3.0, 0.5] };
        let out = forward(&spec, &p, &col(&[0.0, 3.0])).unwrap();
        assert_eq!(out.as_slice(), &[0.5, 6.5]);
    }

    #[test]
    fn dimension_errors() {
        let spec = MlpSpec::sigmoid(2, &[3], 1);
        let p = init_params::<f64>(&spec, 0);
        assert!(matches!(
            forward(&spec, &p, &col(&[1.0])),
            Err(Error::DimensionMismatch(_))
        ));
        let x = DenseMatrix::zeros(4, 2);
        assert!(matches!(
            vjp(&spec, &p, &x, &DenseMatrix::zeros(4, 2)),
            Err(Error::DimensionMismatch(_))
        ));
        let short = ParamVector { values: vec![0.0; 3] };
        assert!(forward(&spec, &short, &x).is_err());
    }

    #[test]
    fn vjp_examples() {
        let spec = MlpSpec::sigmoid(1, &[4], 1);
        let p = init_params::<f64>(&spec, 3);
        let x = col(&[0.1, -0.7]);
        let r = vjp(&spec, &p, &x, &DenseMatrix::zeros(2, 1)).unwrap();
        assert!(r.param_grad.iter().all(|&g| g == 0.0));

        let affine = MlpSpec::sigmoid(1, &[], 1);
        let p = ParamVector { values: vec![2.0, 1.0] };
        let r = vjp(&affine, &p, &col(&[3.0]), &col(&[1.0])).unwrap();
        assert_eq!(r.param_grad, vec![3.0, 1.0]);
        assert_eq!(r.outputs[(0, 0)], 7.0);
    }

    /// Central differences of `Σ upstream ⊙ forward`.
    fn fd_grad(spec: &MlpSpec, p: &ParamVector<f64>, x: &DenseMatrix<f64>, up: &DenseMatrix<f64>, h: f64) -> Vec<f64> {
        let objective = |q: &ParamVector<f64>| -> f64 {
            let out = forward(spec, q, x).unwrap();
            out.as_slice().iter().zip(up.as_slice()).map(|(a, b)| a * b).sum()
        };
        (0..p.len())
            .map(|k| {
                let mut plus = p.clone();
                plus.values[k] += h;
                let mut minus = p.clone();
                minus.values[k] -= h;
                (objective(&plus) - objective(&minus)) / (2.0 * h)
            })
            .collect()
    }

    fn max_rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
            .fold(0.0, f64::max)
    }

    #[test]
    fn vjp_matches_finite_differences_single() {
        let spec = MlpSpec::sigmoid(1, &[4], 1);
        let p = init_params::<f64>(&spec, 11);
        let x = col(&[0.3, -1.2, 2.0]);
        let up = col(&[0.5, -1.0, 0.25]);
        let r = vjp(&spec, &p, &x, &up).unwrap();
        let fd = fd_grad(&spec, &p, &x, &up, 1e-5);
        assert!(max_rel_err(&r.param_grad, &fd, 1e-6) < 1e-5);
    }

    #[test]
    fn vjp_matches_finite_differences_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut worst: f64 = 0.0;
        for draw in 0..20 {
            let input = rng.random_range(1..=3);
            let hidden: Vec<usize> = (0..rng.random_range(1..=2)).map(|_| rng.random_range(1..=4)).collect();
            let output = rng.random_range(1..=2);
            let activation = if draw % 4 == 3 { Activation::Relu } else { Activation::Sigmoid };
            let mut spec = MlpSpec::sigmoid(input, &hidden, output);
            spec.activation = activation;
            assert!(spec.param_count() <= 50);
            let mut p = init_params::<f64>(&spec, draw);
            for v in &mut p.values {
                *v += rng.random_range(-0.5..0.5);
            }
            let n = rng.random_range(1..=5);
            let x = DenseMatrix::from_fn(n, input, |_, _| rng.random_range(-2.0..2.0));
            let up = DenseMatrix::from_fn(n, output, |_, _| rng.random_range(-1.0..1.0));
            let r = vjp(&spec, &p, &x, &up).unwrap();
            let fd = fd_grad(&spec, &p, &x, &up, 1e-5);
            worst = worst.max(max_rel_err(&r.param_grad, &fd, 1e-6));
        }
        assert!(worst < 1e-4, "worst relative error {worst}");
    }

    #[test]
    fn forward_is_repeatable() {
        let spec = MlpSpec::sigmoid(2, &[8, 8], 2);
        let p = init_params::<f64>(&spec, 5);
        let x = DenseMatrix::from_fn(6, 2, |i, j| (i as f64) * 0.3 - j as f64);
        let a = forward(&spec, &p, &x).unwrap();
        let b = forward(&spec, &p, &x).unwrap();
        assert!(a.as_slice().iter().zip(b.as_slice()).all(|(u, v)| u.to_bits() == v.to_bits()));
    }

    #[test]
    fn single_precision_tracks_double() {
        let spec = MlpSpec::sigmoid(1, &[16, 8], 1);
        let p64 = init_params::<f64>(&spec, 1);
        let p32 = ParamVector {
            values: p64.values.iter().map(|&v| v as f32).collect(),
        };
        let x = DenseMatrix::from_fn(10, 1, |i, _| i as f64 * 0.2 - 1.0);
        let a = forward(&spec, &p64, &x).unwrap();
        let b = forward(&spec, &p32, &x.cast::<f32>()).unwrap();
        for (u, v) in a.as_slice().iter().zip(b.as_slice()) {
            assert!((u - *v as f64).abs() < 1e-5);
        }
    }
}
