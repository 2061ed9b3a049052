//! Task generators and loaders: the sinusoid and step-function environments,
//! MNIST image completion, and per-entity CSV time series.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::gp::{kernel_matrix, Kernel, Rbf};
use crate::linalg::{cholesky, DenseMatrix};
use crate::scalar::Scalar;
use crate::{Error, Result};

/// Where a task came from.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct TaskMeta {
    pub generator: String,
    pub seed: u64,
    pub task_id: u64,
}

/// Context points `(x, y)` and held-out test points `(x_star, y_star)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionTask<T> {
    pub x: DenseMatrix<T>,
    pub y: Vec<T>,
    pub x_star: DenseMatrix<T>,
    pub y_star: Vec<T>,
    pub meta: TaskMeta,
}

impl<T: Scalar> RegressionTask<T> {
    pub fn new(
        x: DenseMatrix<T>,
        y: Vec<T>,
        x_star: DenseMatrix<T>,
        y_star: Vec<T>,
        meta: TaskMeta,
    ) -> Result<Self> {
        if x.rows() != y.len() || x_star.rows() != y_star.len() || (x_star.rows() > 0 && x.cols() != x_star.cols()) {
            return Err(Error::DimensionMismatch(format!(
                "task with x {:?}, y {}, x* {:?}, y* {}",
                x.shape(),
                y.len(),
                x_star.shape(),
                y_star.len()
            )));
        }
        Ok(Self {
            x,
            y,
            x_star,
            y_star,
            meta,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.x.cols()
    }

    pub fn context_len(&self) -> usize {
        self.y.len()
    }

    pub fn test_len(&self) -> usize {
        self.y_star.len()
    }

    /// Context and test points stacked together.
    pub fn all_observations(&self) -> (DenseMatrix<T>, Vec<T>) {
        if self.test_len() == 0 {
            return (self.x.clone(), self.y.clone());
        }
        let mut data = self.x.as_slice().to_vec();
        data.extend_from_slice(self.x_star.as_slice());
        let x = DenseMatrix::from_vec(self.context_len() + self.test_len(), self.input_dim(), data).expect("consistent widths");
        let mut y = self.y.clone();
        y.extend_from_slice(&self.y_star);
        (x, y)
    }

    pub fn cast<U: Scalar>(&self) -> RegressionTask<U> {
        RegressionTask {
            x: self.x.cast(),
            y: self.y.iter().map(|&v| U::from_real(v.to_real())).collect(),
            x_star: self.x_star.cast(),
            y_star: self.y_star.iter().map(|&v| U::from_real(v.to_real())).collect(),
            meta: self.meta.clone(),
        }
    }
}

/// Per-task generator stream: same seed and task id always give the same draws.
fn task_rng(seed: u64, task_id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(task_id);
    rng
}

/// `count` points evenly spaced over `[lo, hi]`, endpoints included.
pub fn grid(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    if count == 1 {
        return vec![lo];
    }
    (0..count)
        .map(|i| lo + (hi - lo) * i as f64 / (count - 1) as f64)
        .collect()
}

/// Functions drawn from a GP with mean `a·sin(b·x)` and an RBF kernel,
/// observed on 50 evenly spaced points in `[−5, 5]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SinusoidConfig {
    pub count: usize,
    pub amplitude: f64,
    pub frequency: f64,
    pub lengthscale: f64,
    pub signal_var: f64,
    /// Variance of the Gaussian observation noise.
    pub noise_var: f64,
    pub seed: u64,
}

pub const SINUSOID_GRID: (f64, f64, usize) = (-5.0, 5.0, 50);

impl Default for SinusoidConfig {
    fn default() -> Self {
        Self {
            count: 1000,
            amplitude: 1.0,
            frequency: 1.0,
            lengthscale: 1.0,
            signal_var: 1.0,
            noise_var: 0.01,
            seed: 0,
        }
    }
}

pub fn gen_sinusoid_tasks(cfg: &SinusoidConfig) -> Result<Vec<RegressionTask<f64>>> {
    let (lo, hi, n) = SINUSOID_GRID;
    let xs = grid(lo, hi, n);
    let x = DenseMatrix::column(&xs);
    let chol = if cfg.signal_var > 0.0 {
        let k = kernel_matrix(&Kernel::Rbf(Rbf::new(cfg.lengthscale, cfg.signal_var)), &x, &x)?;
        Some(cholesky(&k, 0.0)?)
    } else {
        None
    };
    let noise_std = cfg.noise_var.max(0.0).sqrt();
    let mut tasks = Vec::with_capacity(cfg.count);
    for id in 0..cfg.count as u64 {
        let mut rng = task_rng(cfg.seed, id);
        let z: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let mut y: Vec<f64> = xs.iter().map(|&v| cfg.amplitude * (cfg.frequency * v).sin()).collect();
        if let Some(f) = &chol {
            for (i, yi) in y.iter_mut().enumerate() {
                *yi += crate::linalg::dot(&f.l().row(i)[..=i], &z[..=i]);
            }
        }
        if noise_std > 0.0 {
            for yi in &mut y {
                let e: f64 = rng.sample(StandardNormal);
                *yi += noise_std * e;
            }
        }
        tasks.push(RegressionTask::new(
            x.clone(),
            y,
            DenseMatrix::zeros(0, 1),
            Vec::new(),
            TaskMeta {
                generator: "sinusoid".into(),
                seed: cfg.seed,
                task_id: id,
            },
        )?);
    }
    Ok(tasks)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOrientation {
    /// `(y₁, y₂) = (0, 1)`
    Up,
    /// `(y₁, y₂) = (1, 0)`
    Down,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepFnParams {
    pub x_step: f64,
    pub orientation: StepOrientation,
}

impl StepFnParams {
    pub fn new(x_step: f64, orientation: StepOrientation) -> Result<Self> {
        if !(-1.0..=1.0).contains(&x_step) {
            return Err(Error::Config(format!("step location {x_step} outside [-1, 1]")));
        }
        Ok(Self { x_step, orientation })
    }

    pub fn eval(&self, x: f64) -> f64 {
        let (before, after) = match self.orientation {
            StepOrientation::Up => (0.0, 1.0),
            StepOrientation::Down => (1.0, 0.0),
        };
        if x < self.x_step {
            before
        } else {
            after
        }
    }
}

pub const STEP_GRID: (f64, f64, usize) = (-2.0, 2.0, 50);

pub fn step_task(params: StepFnParams, meta: TaskMeta) -> RegressionTask<f64> {
    let (lo, hi, n) = STEP_GRID;
    let xs = grid(lo, hi, n);
    let y = xs.iter().map(|&v| params.eval(v)).collect();
    RegressionTask::new(DenseMatrix::column(&xs), y, DenseMatrix::zeros(0, 1), Vec::new(), meta).expect("consistent grid")
}

/// Heaviside steps and their mirror images, noiseless, on 50 points in `[−2, 2]`.
pub fn gen_step_tasks(count: usize, seed: u64) -> Vec<RegressionTask<f64>> {
    (0..count as u64)
        .map(|id| {
            let mut rng = task_rng(seed, id);
            let orientation = if rng.random_bool(0.5) {
                StepOrientation::Up
            } else {
                StepOrientation::Down
            };
            let x_step = rng.random_range(-1.0..=1.0);
            step_task(
                StepFnParams { x_step, orientation },
                TaskMeta {
                    generator: "step".into(),
                    seed,
                    task_id: id,
                },
            )
        })
        .collect()
}

/// An unsigned-byte IDX tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

const IDX_UBYTE: u8 = 0x08;

/// Parses an IDX stream: two zero bytes, the type code (0x08, unsigned byte),
/// the number of dimensions, one big-endian `u32` per dimension, then the
/// payload. The payload must have exactly the declared length.
pub fn parse_idx(bytes: &[u8]) -> Result<IdxArray> {
    if bytes.len() < 4 {
        return Err(Error::TruncatedStream {
            expected: 4,
            found: bytes.len(),
        });
    }
    let magic = u32::from_be_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]);
    let ndims = bytes[3] as usize;
    if bytes[0] != 0 || bytes[1] != 0 || bytes[2] != IDX_UBYTE || ndims == 0 {
        return Err(Error::BadMagic(magic));
    }
    let header = 4 + 4 * ndims;
    if bytes.len() < header {
        return Err(Error::TruncatedStream {
            expected: header,
            found: bytes.len(),
        });
    }
    let dims: Vec<usize> = bytes[4..header]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let payload = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .and_then(|p| p.checked_add(header))
        .unwrap_or(usize::MAX);
    if bytes.len() < payload {
        return Err(Error::TruncatedStream {
            expected: payload,
            found: bytes.len(),
        });
    }
    if bytes.len() > payload {
        return Err(Error::TrailingBytes(bytes.len() - payload));
    }
    Ok(IdxArray {
        dims,
        data: bytes[header..].to_vec(),
    })
}

pub fn serialize_idx(array: &IdxArray) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + 4 * array.dims.len() + array.data.len());
    out.extend_from_slice(&[0, 0, IDX_UBYTE, array.dims.len() as u8]);
    for &d in &array.dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(&array.data);
    out
}

pub fn read_idx_file(path: &Path) -> Result<IdxArray> {
    if !path.exists() {
        return Err(Error::MissingData(path.to_path_buf()));
    }
    parse_idx(&fs::read(path)?).map_err(|e| e.context(path.display().to_string()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MnistSplit {
    Train,
    Test,
}

impl MnistSplit {
    pub fn images_file(self) -> &'static str {
        match self {
            MnistSplit::Train => "train-images-idx3-ubyte",
            MnistSplit::Test => "t10k-images-idx3-ubyte",
        }
    }
}

pub fn mnist_images_path(dir: &Path, split: MnistSplit) -> PathBuf {
    dir.join(split.images_file())
}

/// Loads the images of one split; fails with `MissingData` naming the file.
pub fn load_mnist_images(dir: &Path, split: MnistSplit) -> Result<IdxArray> {
    let images = read_idx_file(&mnist_images_path(dir, split))?;
    if images.dims.len() != 3 {
        return Err(Error::DimensionMismatch(format!(
            "image file has {} dimensions",
            images.dims.len()
        )));
    }
    Ok(images)
}

/// How pixel coordinates enter the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PixelCoords {
    /// `(row, col) / (side − 1)`, in `[0, 1]²`.
    #[default]
    Unit,
    /// Raw indices in `{0, …, side − 1}²`.
    Raw,
}

/// Image-completion tasks: inputs are pixel coordinates, targets intensity/255.
/// Per image, `n_context` pixels are drawn without replacement; the test set
/// is the remaining pixels, capped at `n_test`.
pub fn mnist_completion_tasks(
    images: &IdxArray,
    n_context: usize,
    n_test: usize,
    seed: u64,
    coords: PixelCoords,
) -> Result<Vec<RegressionTask<f64>>> {
    let (count, rows, cols) = match images.dims[..] {
        [n, r, c] => (n, r, c),
        _ => return Err(Error::DimensionMismatch("expected images × rows × cols".into())),
    };
    let pixels = rows * cols;
    if n_context > pixels {
        return Err(Error::Config(format!("{n_context} context pixels in a {pixels}-pixel image")));
    }
    let scale = |v: usize, side: usize| match coords {
        PixelCoords::Unit if side > 1 => v as f64 / (side - 1) as f64,
        PixelCoords::Unit => 0.0,
        PixelCoords::Raw => v as f64,
    };
    let mut tasks = Vec::with_capacity(count);
    for id in 0..count {
        let image = &images.data[id * pixels..(id + 1) * pixels];
        let mut rng = task_rng(seed, id as u64);
        let order = index::sample(&mut rng, pixels, pixels).into_vec();
        let n_test = n_test.min(pixels - n_context);
        let build = |idx: &[usize]| {
            let x = DenseMatrix::from_fn(idx.len(), 2, |i, j| {
                let p = idx[i];
                if j == 0 {
                    scale(p / cols, rows)
                } else {
                    scale(p % cols, cols)
                }
            });
            let y = idx.iter().map(|&p| image[p] as f64 / 255.0).collect::<Vec<_>>();
            (x, y)
        };
        let (x, y) = build(&order[..n_context]);
        let (xs, ys) = build(&order[n_context..n_context + n_test]);
        tasks.push(RegressionTask::new(
            x,
            y,
            xs,
            ys,
            TaskMeta {
                generator: "mnist".into(),
                seed,
                task_id: id as u64,
            },
        )?);
    }
    Ok(tasks)
}

/// What happens to context points not kept by [`subsample_context`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Leftover {
    Discard,
    /// Appended to the test set.
    ToTest,
}

/// Keeps `n_tilde` uniformly chosen context points (in their original order).
pub fn subsample_context<T: Scalar>(
    task: &RegressionTask<T>,
    n_tilde: usize,
    seed: u64,
    leftover: Leftover,
) -> Result<RegressionTask<T>> {
    let n = task.context_len();
    if n_tilde > n {
        return Err(Error::Config(format!("cannot keep {n_tilde} of {n} context points")));
    }
    let mut rng = task_rng(seed, task.meta.task_id);
    let mut keep = index::sample(&mut rng, n, n_tilde).into_vec();
    keep.sort_unstable();
    let mut kept = vec![false; n];
    keep.iter().for_each(|&i| kept[i] = true);

    let x = task.x.select_rows(&keep);
    let y = keep.iter().map(|&i| task.y[i]).collect();
    let (x_star, y_star) = match leftover {
        Leftover::Discard => (task.x_star.clone(), task.y_star.clone()),
        Leftover::ToTest => {
            let rest: Vec<usize> = (0..n).filter(|&i| !kept[i]).collect();
            let moved = task.x.select_rows(&rest);
            let mut data = moved.as_slice().to_vec();
            data.extend_from_slice(task.x_star.as_slice());
            let xs = DenseMatrix::from_vec(rest.len() + task.test_len(), task.input_dim(), data)?;
            let mut ys: Vec<T> = rest.iter().map(|&i| task.y[i]).collect();
            ys.extend_from_slice(&task.y_star);
            (xs, ys)
        }
    };
    RegressionTask::new(x, y, x_star, y_star, task.meta.clone())
}

/// Column names and split for per-entity time-series tables.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvTimeseriesConfig {
    pub entity_column: String,
    pub time_column: String,
    pub value_column: String,
    /// Observations strictly before this time (hours) are context.
    pub split_time: f64,
    /// Multiplier applied to times before they become model inputs.
    pub time_scale: f64,
}

impl Default for CsvTimeseriesConfig {
    fn default() -> Self {
        Self {
            entity_column: "id".into(),
            time_column: "time".into(),
            value_column: "value".into(),
            split_time: 24.0,
            time_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CsvLoad {
    pub tasks: Vec<RegressionTask<f64>>,
    /// Entities whose rows were all dropped.
    pub skipped_entities: usize,
    /// Rows with a missing time or value.
    pub dropped_rows: usize,
}

fn is_missing(field: &str) -> bool {
    matches!(field.trim(), "" | "NA" | "na" | "NaN" | "nan" | "null")
}

/// One task per entity, in order of first appearance; each entity's rows are
/// sorted by time and split at `split_time`.
pub fn load_csv_timeseries(path: &Path, cfg: &CsvTimeseriesConfig) -> Result<CsvLoad> {
    let display = path.display().to_string();
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path).map_err(|e| Error::Parse {
        path: display.clone(),
        line: 0,
        message: e.to_string(),
    })?;
    let headers = reader.headers().map_err(|e| Error::Parse {
        path: display.clone(),
        line: 1,
        message: e.to_string(),
    })?;
    let column = |name: &str| {
        headers.iter().position(|h| h == name).ok_or_else(|| Error::Parse {
            path: display.clone(),
            line: 1,
            message: format!("no column named {name:?}"),
        })
    };
    let (ei, ti, vi) = (column(&cfg.entity_column)?, column(&cfg.time_column)?, column(&cfg.value_column)?);

    let mut order: Vec<String> = Vec::new();
    let mut series: HashMap<String, Vec<(f64, f64)>> = HashMap::new();
    let mut dropped_rows = 0;
    for record in reader.records() {
        let record = record.map_err(|e| Error::Parse {
            path: display.clone(),
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let field = |i: usize| record.get(i).unwrap_or("");
        let entity = field(ei).to_string();
        if !series.contains_key(&entity) {
            order.push(entity.clone());
            series.insert(entity.clone(), Vec::new());
        }
        if is_missing(field(ti)) || is_missing(field(vi)) {
            dropped_rows += 1;
            continue;
        }
        let parse = |i: usize, what: &str| {
            field(i).parse::<f64>().map_err(|_| Error::Parse {
                path: display.clone(),
                line,
                message: format!("malformed {what} {:?}", field(i)),
            })
        };
        let t = parse(ti, "time")?;
        let v = parse(vi, "value")?;
        series.get_mut(&entity).expect("inserted above").push((t, v));
    }

    let mut tasks = Vec::new();
    let mut skipped_entities = 0;
    for (id, entity) in order.iter().enumerate() {
        let mut rows = series.remove(entity).unwrap_or_default();
        if rows.is_empty() {
            skipped_entities += 1;
            continue;
        }
        rows.sort_by(|a, b| a.0.total_cmp(&b.0));
        let (ctx, test): (Vec<_>, Vec<_>) = rows.into_iter().partition(|(t, _)| *t < cfg.split_time);
        let to_cols = |part: &[(f64, f64)]| {
            let xs: Vec<f64> = part.iter().map(|(t, _)| t * cfg.time_scale).collect();
            (DenseMatrix::column(&xs), part.iter().map(|(_, v)| *v).collect::<Vec<_>>())
        };
        let (x, y) = to_cols(&ctx);
        let (xs, ys) = to_cols(&test);
        tasks.push(RegressionTask::new(
            x,
            y,
            xs,
            ys,
            TaskMeta {
                generator: format!("csv:{entity}"),
                seed: 0,
                task_id: id as u64,
            },
        )?);
    }
    Ok(CsvLoad {
        tasks,
        skipped_entities,
        dropped_rows,
    })
}
