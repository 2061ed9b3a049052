//! Binary records, all little-endian and versioned:
//!
//! * `GPMN` network: version `u32`, layer count `u32`, layer sizes `u32`,
//!   activation tag `u8`, parameter count `u64`, parameters `f64`.
//! * `GPPR` prior: version `u32`, tagged mean, tagged kernel, `log σ²` as `f64`.
//!   Networks inside a prior are embedded `GPMN` records.
//! * `GPTK` task cache: version `u32`, task count `u64`, then per task the
//!   generator name, seed, id, input width and the context and test points.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};

use crate::fpca::SplineBasis;
use crate::gp::{ClosedForm, GpPrior, Kernel, MeanFunction, Rbf};
use crate::linalg::DenseMatrix;
use crate::nn::{Activation, MlpSpec, ParamVector};
use crate::scalar::Scalar;
use crate::tasks::{RegressionTask, TaskMeta};
use crate::{Error, Result};

const NETWORK_MAGIC: &[u8; 4] = b"GPMN";
const PRIOR_MAGIC: &[u8; 4] = b"GPPR";
const TASKS_MAGIC: &[u8; 4] = b"GPTK";
const VERSION: u32 = 1;

/// Cap on any length field, to fail fast on corrupt input instead of allocating.
const MAX_LEN: u64 = 1 << 32;

fn read_err(e: io::Error) -> Error {
    if e.kind() == io::ErrorKind::UnexpectedEof {
        Error::Checkpoint("record truncated".into())
    } else {
        Error::Io(e)
    }
}

fn expect_header<R: Read>(r: &mut R, magic: &[u8; 4]) -> Result<()> {
    let mut got = [0u8; 4];
    r.read_exact(&mut got).map_err(read_err)?;
    if &got != magic {
        return Err(Error::Checkpoint(format!(
            "expected magic {:?}, found {:?}",
            String::from_utf8_lossy(magic),
            String::from_utf8_lossy(&got)
        )));
    }
    let version = r.read_u32::<LE>().map_err(read_err)?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    Ok(())
}

fn write_header<W: Write>(w: &mut W, magic: &[u8; 4]) -> io::Result<()> {
    w.write_all(magic)?;
    w.write_u32::<LE>(VERSION)
}

fn read_len<R: Read>(r: &mut R) -> Result<usize> {
    let n = r.read_u64::<LE>().map_err(read_err)?;
    if n > MAX_LEN {
        return Err(Error::Checkpoint(format!("implausible length {n}")));
    }
    Ok(n as usize)
}

fn write_reals<W: Write, T: Scalar>(w: &mut W, values: &[T]) -> io::Result<()> {
    w.write_u64::<LE>(values.len() as u64)?;
    values.iter().try_for_each(|v| w.write_f64::<LE>(v.to_real()))
}

fn read_reals<R: Read, T: Scalar>(r: &mut R) -> Result<Vec<T>> {
    let n = read_len(r)?;
    (0..n)
        .map(|_| r.read_f64::<LE>().map(T::from_real).map_err(read_err))
        .collect()
}

fn read_real<R: Read, T: Scalar>(r: &mut R) -> Result<T> {
    r.read_f64::<LE>().map(T::from_real).map_err(read_err)
}

pub fn write_network<W: Write, T: Scalar>(w: &mut W, spec: &MlpSpec, params: &ParamVector<T>) -> Result<()> {
    if params.len() != spec.param_count() {
        return Err(Error::DimensionMismatch(format!(
            "{} parameters for a network needing {}",
            params.len(),
            spec.param_count()
        )));
    }
    write_header(w, NETWORK_MAGIC)?;
    w.write_u32::<LE>(spec.layer_sizes.len() as u32)?;
    for &s in &spec.layer_sizes {
        w.write_u32::<LE>(s as u32)?;
    }
    w.write_u8(spec.activation.tag())?;
    write_reals(w, &params.values)?;
    Ok(())
}

pub fn read_network<R: Read, T: Scalar>(r: &mut R) -> Result<(MlpSpec, ParamVector<T>)> {
    expect_header(r, NETWORK_MAGIC)?;
    let layers = r.read_u32::<LE>().map_err(read_err)? as usize;
    if layers as u64 > MAX_LEN {
        return Err(Error::Checkpoint(format!("implausible layer count {layers}")));
    }
    let sizes = (0..layers)
        .map(|_| r.read_u32::<LE>().map(|s| s as usize).map_err(read_err))
        .collect::<Result<Vec<_>>>()?;
    let tag = r.read_u8().map_err(read_err)?;
    let activation = Activation::from_tag(tag).ok_or_else(|| Error::Checkpoint(format!("unknown activation tag {tag}")))?;
    let spec = MlpSpec::new(sizes, activation).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let values = read_reals(r)?;
    if values.len() != spec.param_count() {
        return Err(Error::Checkpoint(format!(
            "{} parameters stored for a network needing {}",
            values.len(),
            spec.param_count()
        )));
    }
    Ok((spec, ParamVector { values }))
}

fn write_rbf<W: Write, T: Scalar>(w: &mut W, rbf: &Rbf<T>) -> io::Result<()> {
    w.write_f64::<LE>(rbf.log_lengthscale.to_real())?;
    w.write_f64::<LE>(rbf.log_signal_var.to_real())
}

fn read_rbf<R: Read, T: Scalar>(r: &mut R) -> Result<Rbf<T>> {
    Ok(Rbf {
        log_lengthscale: read_real(r)?,
        log_signal_var: read_real(r)?,
    })
}

fn write_basis<W: Write, T: Scalar>(w: &mut W, basis: &SplineBasis<T>) -> io::Result<()> {
    w.write_u32::<LE>(basis.degree() as u32)?;
    write_reals(w, basis.knots())
}

fn read_basis<R: Read, T: Scalar>(r: &mut R) -> Result<SplineBasis<T>> {
    let degree = r.read_u32::<LE>().map_err(read_err)? as usize;
    SplineBasis::new(degree, read_reals(r)?).map_err(|e| Error::Checkpoint(e.to_string()))
}

pub fn write_prior<W: Write, T: Scalar>(w: &mut W, p: &GpPrior<T>) -> Result<()> {
    write_header(w, PRIOR_MAGIC)?;
    match &p.mean {
        MeanFunction::Zero => w.write_u8(0)?,
        MeanFunction::Analytic { form, scale } => {
            w.write_u8(1)?;
            match form {
                ClosedForm::Sine { frequency } => {
                    w.write_u8(0)?;
                    w.write_f64::<LE>(*frequency)?;
                }
                ClosedForm::Constant => w.write_u8(1)?,
            }
            w.write_f64::<LE>(scale.to_real())?;
        }
        MeanFunction::Deep { spec, params } => {
            w.write_u8(2)?;
            write_network(w, spec, params)?;
        }
        MeanFunction::Spline { basis, coefficients } => {
            w.write_u8(3)?;
            write_basis(w, basis)?;
            write_reals(w, coefficients)?;
        }
    }
    match &p.kernel {
        Kernel::Rbf(rbf) => {
            w.write_u8(0)?;
            write_rbf(w, rbf)?;
        }
        Kernel::Deep { spec, params, rbf } => {
            w.write_u8(1)?;
            write_network(w, spec, params)?;
            write_rbf(w, rbf)?;
        }
        Kernel::SplineInner { basis } => {
            w.write_u8(2)?;
            write_basis(w, basis)?;
        }
    }
    w.write_f64::<LE>(p.log_noise_var.to_real())?;
    Ok(())
}

pub fn read_prior<R: Read, T: Scalar>(r: &mut R) -> Result<GpPrior<T>> {
    expect_header(r, PRIOR_MAGIC)?;
    let mean = match r.read_u8().map_err(read_err)? {
        0 => MeanFunction::Zero,
        1 => {
            let form = match r.read_u8().map_err(read_err)? {
                0 => ClosedForm::Sine {
                    frequency: r.read_f64::<LE>().map_err(read_err)?,
                },
                1 => ClosedForm::Constant,
                t => return Err(Error::Checkpoint(format!("unknown closed form tag {t}"))),
            };
            MeanFunction::Analytic {
                form,
                scale: read_real(r)?,
            }
        }
        2 => {
            let (spec, params) = read_network(r)?;
            MeanFunction::Deep { spec, params }
        }
        3 => {
            let basis = read_basis(r)?;
            let coefficients = read_reals(r)?;
            if coefficients.len() != basis.q() {
                return Err(Error::Checkpoint("spline coefficient count differs from basis size".into()));
            }
            MeanFunction::Spline { basis, coefficients }
        }
        t => return Err(Error::Checkpoint(format!("unknown mean tag {t}"))),
    };
    let kernel = match r.read_u8().map_err(read_err)? {
        0 => Kernel::Rbf(read_rbf(r)?),
        1 => {
            let (spec, params) = read_network(r)?;
            Kernel::Deep {
                spec,
                params,
                rbf: read_rbf(r)?,
            }
        }
        2 => Kernel::SplineInner { basis: read_basis(r)? },
        t => return Err(Error::Checkpoint(format!("unknown kernel tag {t}"))),
    };
    Ok(GpPrior {
        mean,
        kernel,
        log_noise_var: read_real(r)?,
    })
}

pub fn save_prior<T: Scalar>(path: &Path, p: &GpPrior<T>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_prior(&mut w, p)?;
    w.flush()?;
    Ok(())
}

pub fn load_prior<T: Scalar>(path: &Path) -> Result<GpPrior<T>> {
    if !path.exists() {
        return Err(Error::MissingData(path.to_path_buf()));
    }
    let mut r = BufReader::new(File::open(path)?);
    let p = read_prior(&mut r).map_err(|e| e.context(path.display().to_string()))?;
    expect_end(&mut r)?;
    Ok(p)
}

fn expect_end<R: Read>(r: &mut R) -> Result<()> {
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(Error::Checkpoint(format!("{} unexpected trailing bytes", rest.len())));
    }
    Ok(())
}

fn write_matrix<W: Write, T: Scalar>(w: &mut W, m: &DenseMatrix<T>) -> io::Result<()> {
    w.write_u64::<LE>(m.rows() as u64)?;
    m.as_slice().iter().try_for_each(|v| w.write_f64::<LE>(v.to_real()))
}

fn read_matrix<R: Read, T: Scalar>(r: &mut R, cols: usize) -> Result<DenseMatrix<T>> {
    let rows = read_len(r)?;
    let data = (0..rows * cols).map(|_| read_real(r)).collect::<Result<Vec<T>>>()?;
    DenseMatrix::from_vec(rows, cols, data)
}

pub fn write_tasks<W: Write, T: Scalar>(w: &mut W, tasks: &[RegressionTask<T>]) -> Result<()> {
    write_header(w, TASKS_MAGIC)?;
    w.write_u64::<LE>(tasks.len() as u64)?;
    for t in tasks {
        let name = t.meta.generator.as_bytes();
        w.write_u32::<LE>(name.len() as u32)?;
        w.write_all(name)?;
        w.write_u64::<LE>(t.meta.seed)?;
        w.write_u64::<LE>(t.meta.task_id)?;
        w.write_u32::<LE>(t.input_dim() as u32)?;
        write_matrix(w, &t.x)?;
        write_reals(w, &t.y)?;
        write_matrix(w, &t.x_star)?;
        write_reals(w, &t.y_star)?;
    }
    Ok(())
}

pub fn read_tasks<R: Read, T: Scalar>(r: &mut R) -> Result<Vec<RegressionTask<T>>> {
    expect_header(r, TASKS_MAGIC)?;
    let count = read_len(r)?;
    let mut tasks = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.read_u32::<LE>().map_err(read_err)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name).map_err(read_err)?;
        let generator = String::from_utf8(name).map_err(|_| Error::Checkpoint("generator name is not UTF-8".into()))?;
        let seed = r.read_u64::<LE>().map_err(read_err)?;
        let task_id = r.read_u64::<LE>().map_err(read_err)?;
        let dim = r.read_u32::<LE>().map_err(read_err)? as usize;
        let x = read_matrix(r, dim)?;
        let y = read_reals(r)?;
        let x_star = read_matrix(r, dim)?;
        let y_star = read_reals(r)?;
        tasks.push(
            RegressionTask::new(
                x,
                y,
                x_star,
                y_star,
                TaskMeta {
                    generator,
                    seed,
                    task_id,
                },
            )
            .map_err(|e| Error::Checkpoint(e.to_string()))?,
        );
    }
    Ok(tasks)
}

pub fn save_tasks<T: Scalar>(path: &Path, tasks: &[RegressionTask<T>]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_tasks(&mut w, tasks)?;
    w.flush()?;
    Ok(())
}

pub fn load_tasks<T: Scalar>(path: &Path) -> Result<Vec<RegressionTask<T>>> {
    if !path.exists() {
        return Err(Error::MissingData(path.to_path_buf()));
    }
    let mut r = BufReader::new(File::open(path)?);
    let tasks = read_tasks(&mut r).map_err(|e| e.context(path.display().to_string()))?;
    expect_end(&mut r)?;
    Ok(tasks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gp::mean_eval;
    use crate::nn::{forward, init_params};
    use crate::tasks::{gen_step_tasks, mnist_completion_tasks, IdxArray, PixelCoords};

    #[test]
    fn network_round_trip_is_bitwise() {
        let spec = MlpSpec::sigmoid(2, &[7, 3], 2);
        let params: ParamVector<f64> = init_params(&spec, 12);
        let mut buf = Vec::new();
        write_network(&mut buf, &spec, &params).unwrap();
        assert_eq!(&buf[..4], b"GPMN");
        assert_eq!(buf.len(), 4 + 4 + 4 + 4 * 4 + 1 + 8 + 8 * spec.param_count());
        let (spec2, params2) = read_network::<_, f64>(&mut buf.as_slice()).unwrap();
        assert_eq!(spec2, spec);
        let x = DenseMatrix::from_fn(5, 2, |i, j| (i as f64 - 2.0) * 0.3 + j as f64);
        let a = forward(&spec, &params, &x).unwrap();
        let b = forward(&spec2, &params2, &x).unwrap();
        assert!(a.as_slice().iter().zip(b.as_slice()).all(|(u, v)| u.to_bits() == v.to_bits()));
    }

    #[test]
    fn corrupt_network_records() {
        let spec = MlpSpec::sigmoid(1, &[2], 1);
        let mut buf = Vec::new();
        write_network(&mut buf, &spec, &init_params::<f64>(&spec, 0)).unwrap();
        assert!(read_network::<_, f64>(&mut &buf[..buf.len() - 1]).is_err());
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_network::<_, f64>(&mut bad.as_slice()), Err(Error::Checkpoint(_))));
        let mut bad = buf.clone();
        bad[4] = 9;
        assert!(read_network::<_, f64>(&mut bad.as_slice()).is_err());
    }

    #[test]
    fn prior_round_trip() {
        let ms = MlpSpec::sigmoid(1, &[4], 1);
        let ks = MlpSpec::sigmoid(1, &[3], 2);
        let priors = [
            GpPrior::new(MeanFunction::Zero, Kernel::Rbf(Rbf::new(0.5, 2.0)), 0.1),
            GpPrior::new(
                MeanFunction::Analytic {
                    form: ClosedForm::Sine { frequency: 1.5 },
                    scale: 0.75,
                },
                Kernel::SplineInner {
                    basis: SplineBasis::clamped_uniform(3, 6, -1.0, 1.0).unwrap(),
                },
                0.2,
            ),
            GpPrior::new(
                MeanFunction::Deep {
                    params: init_params(&ms, 1),
                    spec: ms,
                },
                Kernel::Deep {
                    params: init_params(&ks, 2),
                    spec: ks,
                    rbf: Rbf::new(1.1, 0.9),
                },
                0.01,
            ),
            GpPrior::new(
                MeanFunction::Spline {
                    basis: SplineBasis::clamped_uniform(2, 5, 0.0, 4.0).unwrap(),
                    coefficients: vec![0.1, 0.2, 0.3, 0.4, 0.5],
                },
                Kernel::Rbf(Rbf::new(1.0, 1.0)),
                0.0,
            ),
        ];
        let dir = tempfile::tempdir().unwrap();
        for (i, p) in priors.iter().enumerate() {
            let path = dir.path().join(format!("p{i}.bin"));
            save_prior(&path, p).unwrap();
            let q: GpPrior<f64> = load_prior(&path).unwrap();
            assert_eq!(&q, p);
            let x = DenseMatrix::column(&[0.1, 0.5, 0.9]);
            assert_eq!(mean_eval(&q.mean, &x).unwrap(), mean_eval(&p.mean, &x).unwrap());
        }
        assert!(matches!(load_prior::<f64>(&dir.path().join("absent")), Err(Error::MissingData(_))));
    }

    #[test]
    fn task_cache_round_trip() {
        let mut tasks = gen_step_tasks(3, 8);
        let images = IdxArray {
            dims: vec![1, 4, 4],
            data: (0..16).map(|v| v * 16).collect(),
        };
        tasks.extend(mnist_completion_tasks(&images, 5, 11, 0, PixelCoords::Unit).unwrap());
        let mut buf = Vec::new();
        write_tasks(&mut buf, &tasks).unwrap();
        assert_eq!(&buf[..4], b"GPTK");
        let back: Vec<RegressionTask<f64>> = read_tasks(&mut buf.as_slice()).unwrap();
        assert_eq!(back, tasks);
        assert!(read_tasks::<_, f64>(&mut &buf[..buf.len() - 3]).is_err());
    }
}
