//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. The table criteria drive the release binary end to end.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use metagp::error::Error;
use metagp::fpca::{check_gp_fpca_equivalence, FpcaModel, SplineBasis};
use metagp::tasks::{parse_idx, serialize_idx, IdxArray};
use metagp::verify::{analytic_lml_gradient, counter_example, lml_gradient_error, random_lml_instance, PriorShape};

struct Outcome {
    passed: bool,
    detail: String,
}

impl Outcome {
    fn new(passed: bool, detail: impl Into<String>) -> Self {
        Self {
            passed,
            detail: detail.into(),
        }
    }
}

fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_metagp"));
    cmd.env("RUST_LOG", "warn");
    cmd
}

/// Runs the binary, returning wall time.
fn run_bin(args: &[&str]) -> Result<Duration, String> {
    let start = Instant::now();
    let out = bin().args(args).output().map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!(
            "metagp {} exited with {}: {}",
            args.join(" "),
            out.status,
            String::from_utf8_lossy(&out.stderr)
        ));
    }
    Ok(start.elapsed())
}

type Rows = HashMap<(String, String), Cell>;

#[derive(Debug, Clone, Copy)]
struct Cell {
    mse: f64,
    ll: Option<f64>,
}

/// `(method, n_tilde)` → metrics, from a results CSV.
fn read_rows(path: &Path) -> Result<Rows, String> {
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let mut rows = HashMap::new();
    for line in text.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 7 {
            return Err(format!("malformed row {line:?}"));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|e| format!("{s:?}: {e}"));
        let cell = Cell {
            mse: num(f[2])?,
            ll: if f[4].is_empty() { None } else { Some(num(f[4])?) },
        };
        if !cell.mse.is_finite() || cell.ll.is_some_and(|l| !l.is_finite()) {
            return Err(format!("non-finite metrics in {line:?}"));
        }
        rows.insert((f[0].to_string(), f[1].to_string()), cell);
    }
    Ok(rows)
}

fn cell(rows: &Rows, method: &str, n: &str) -> Result<Cell, String> {
    rows.get(&(method.to_string(), n.to_string()))
        .copied()
        .ok_or_else(|| format!("no row for {method} at {n}"))
}

fn criterion_1() -> Result<Outcome, String> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    let mut detail = String::new();
    for shape in PriorShape::ALL {
        let mut shape_worst: f64 = 0.0;
        for _ in 0..20 {
            let (p, x, y) = random_lml_instance(shape, &mut rng);
            if x.rows() > 8 || p.param_count() > 200 {
                return Err(format!("instance too large: n={}, params={}", x.rows(), p.param_count()));
            }
            let err = lml_gradient_error(&p, &x, &y, &analytic_lml_gradient).map_err(|e| e.to_string())?;
            shape_worst = shape_worst.max(err);
        }
        write!(detail, "{}: {shape_worst:.1e}; ", shape.name()).unwrap();
        worst = worst.max(shape_worst);
    }
    let secs = start.elapsed().as_secs_f64();
    Ok(Outcome::new(
        worst < 1e-4 && secs < 30.0,
        format!("max rel err {worst:.2e} < 1e-4 ({detail}{secs:.1} s < 30 s)"),
    ))
}

fn criterion_2() -> Result<Outcome, String> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let (mut mean, mut cov) = (0.0f64, 0.0f64);
    for trial in 0..50 {
        let q = rng.random_range(4..=10);
        let lo = rng.random_range(-3.0..0.0);
        let hi = lo + rng.random_range(0.5..4.0);
        let basis = SplineBasis::clamped_uniform(3, q, lo, hi).map_err(|e| e.to_string())?;
        let theta = (0..q).map(|_| rng.random_range(-2.0..2.0)).collect();
        let model = FpcaModel::new(basis, theta, rng.random_range(0.01..1.0)).map_err(|e| e.to_string())?;
        let r = check_gp_fpca_equivalence(&model, 1, trial).map_err(|e| e.to_string())?;
        mean = mean.max(r.max_mean_discrepancy);
        cov = cov.max(r.max_cov_discrepancy);
    }
    let secs = start.elapsed().as_secs_f64();
    Ok(Outcome::new(
        mean <= 1e-8 && cov <= 1e-8 && secs < 10.0,
        format!("mean disc {mean:.1e}, cov disc {cov:.1e} <= 1e-8 over 50 instances ({secs:.2} s < 10 s)"),
    ))
}

fn criterion_3() -> Result<Outcome, String> {
    let c = counter_example(3).map_err(|e| e.to_string())?;
    Ok(Outcome::new(
        c.zero_mean_rbf_max <= 1e-10 && c.zero_mean_deep_max <= 1e-10 && c.true_mean_max_err <= 1e-8,
        format!(
            "zero-mean |m*| {:.1e} (RBF), {:.1e} (deep) <= 1e-10; true-mean err {:.1e} <= 1e-8",
            c.zero_mean_rbf_max, c.zero_mean_deep_max, c.true_mean_max_err
        ),
    ))
}

fn reproduce(table: &str, out: &Path, mnist: Option<&Path>) -> Result<(Duration, Rows), String> {
    let out_s = out.to_str().unwrap();
    let mut args = vec!["reproduce", table, "--scale", "desk", "--seed", "42", "--out-dir", out_s];
    let mnist_s;
    if let Some(dir) = mnist {
        mnist_s = dir.to_str().unwrap().to_string();
        args.extend(["--mnist-dir", &mnist_s]);
    }
    let secs = run_bin(&args)?;
    Ok((secs, read_rows(&out.join(format!("{table}.csv")))?))
}

fn criterion_4(tmp: &Path) -> Result<Outcome, String> {
    let (t, rows) = reproduce("tableS1", &tmp.join("s1"), None)?;
    let zero = cell(&rows, "vanilla", "1")?.mse;
    let learned = cell(&rows, "learned_mean", "1")?.mse;
    let truth = cell(&rows, "true_mean", "1")?.mse;
    let rel = (learned - truth).abs() / truth;
    let mins = t.as_secs_f64() / 60.0;
    Ok(Outcome::new(
        (0.6..=1.0).contains(&learned) && learned < zero && rel <= 0.15 && mins < 10.0,
        format!(
            "ñ=1 MSE learned {learned:.3} in [0.6, 1.0], < zero {zero:.3}, {:.1}% from true {truth:.3} ({mins:.1} min < 10)",
            100.0 * rel
        ),
    ))
}

fn criterion_5(rows: &Rows, t: Duration) -> Result<Outcome, String> {
    let both = cell(rows, "learned_both", "1")?;
    let mean = cell(rows, "learned_mean", "1")?;
    let kernel = cell(rows, "learned_kernel", "1")?;
    let (lb, lk) = (both.ll.unwrap_or(f64::NAN), kernel.ll.unwrap_or(f64::NAN));
    let mut at20 = Vec::new();
    for m in ["vanilla", "learned_kernel", "learned_mean", "learned_both"] {
        at20.push(cell(rows, m, "20")?.mse);
    }
    let in_band = at20.iter().all(|v| (0.01..=0.05).contains(v));
    let mins = t.as_secs_f64() / 60.0;
    Ok(Outcome::new(
        both.mse < mean.mse && mean.mse < kernel.mse && lb >= lk - 0.02 && in_band && mins < 20.0,
        format!(
            "ñ=1 MSE {:.3} < {:.3} < {:.3}; ll {lb:.3} >= {lk:.3} - 0.02; ñ=20 MSEs {:?} in [0.01, 0.05] ({mins:.1} min < 20)",
            both.mse,
            mean.mse,
            kernel.mse,
            at20.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>()
        ),
    ))
}

fn criterion_6(tmp: &Path) -> Result<Outcome, String> {
    let mnist = workspace_root().join("data/mnist");
    let (t, rows) = reproduce("tableS2", &tmp.join("s2"), Some(&mnist))?;
    let l50 = cell(&rows, "learned_mean", "50")?.mse;
    let v50 = cell(&rows, "vanilla", "50")?.mse;
    let l3 = cell(&rows, "learned_mean", "3")?.mse;
    let t3 = cell(&rows, "mean_on_target", "3")?.mse;
    let nn50 = cell(&rows, "nn_direct", "50")?.mse;
    let mins = t.as_secs_f64() / 60.0;
    Ok(Outcome::new(
        l50 < v50 && t3 >= 1.5 * l3 && l50 <= nn50 && mins < 30.0,
        format!(
            "ñ=50 learned {l50:.4} < vanilla {v50:.4}; ñ=3 on-target {t3:.4} >= 1.5 x learned {l3:.4}; ñ=50 learned <= nn {nn50:.4} ({mins:.1} min < 30)"
        ),
    ))
}

fn idx_err(bytes: &[u8]) -> Option<Error> {
    parse_idx(bytes).err()
}

fn criterion_7() -> Result<Outcome, String> {
    let mut failures = Vec::new();
    let mut check = |name: &str, ok: bool| {
        if !ok {
            failures.push(name.to_string());
        }
    };

    let valid: Vec<u8> = [&[0, 0, 8, 2, 0, 0, 0, 2, 0, 0, 0, 3][..], &[1, 2, 3, 4, 5, 255]].concat();
    check(
        "2x3 array",
        parse_idx(&valid).ok()
            == Some(IdxArray {
                dims: vec![2, 3],
                data: vec![1, 2, 3, 4, 5, 255],
            }),
    );
    check(
        "empty payload",
        parse_idx(&[0, 0, 8, 1, 0, 0, 0, 0]).ok()
            == Some(IdxArray {
                dims: vec![0],
                data: vec![],
            }),
    );
    check("short magic", matches!(idx_err(&[0, 0]), Some(Error::TruncatedStream { expected: 4, found: 2 })));
    check("nonzero lead byte", matches!(idx_err(&[1, 0, 8, 1, 0, 0, 0, 0]), Some(Error::BadMagic(0x0100_0801))));
    check("float type code", matches!(idx_err(&[0, 0, 0x0d, 1, 0, 0, 0, 0]), Some(Error::BadMagic(0x0000_0d01))));
    check("zero dimensions", matches!(idx_err(&[0, 0, 8, 0]), Some(Error::BadMagic(0x0000_0800))));
    check(
        "truncated header",
        matches!(idx_err(&valid[..7]), Some(Error::TruncatedStream { expected: 12, found: 7 })),
    );
    check(
        "truncated payload",
        matches!(idx_err(&valid[..17]), Some(Error::TruncatedStream { expected: 18, found: 17 })),
    );
    let mut long = valid.clone();
    long.extend([9, 9]);
    check("trailing bytes", matches!(idx_err(&long), Some(Error::TrailingBytes(2))));

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut round_trips = 0;
    for _ in 0..200 {
        let dims: Vec<usize> = (0..rng.random_range(1..=4)).map(|_| rng.random_range(0..6)).collect();
        let len = dims.iter().product();
        let array = IdxArray {
            dims,
            data: (0..len).map(|_| rng.random()).collect(),
        };
        let bytes = serialize_idx(&array);
        if parse_idx(&bytes).ok().as_ref() == Some(&array) && serialize_idx(&parse_idx(&bytes).unwrap()) == bytes {
            round_trips += 1;
        }
    }
    check("round trip", round_trips == 200);

    Ok(Outcome::new(
        failures.is_empty(),
        if failures.is_empty() {
            "9 hand-crafted streams parse as specified; 200/200 random round trips".to_string()
        } else {
            format!("failed: {}", failures.join(", "))
        },
    ))
}

fn criterion_8(a: &Path, b: &Path) -> Result<Outcome, String> {
    let first = fs::read(a.join("table1.csv")).map_err(|e| e.to_string())?;
    let second = fs::read(b.join("table1.csv")).map_err(|e| e.to_string())?;
    Ok(Outcome::new(
        first == second,
        format!("two runs of reproduce table1 --scale desk --seed 42: {} vs {} bytes, identical: {}", first.len(), second.len(), first == second),
    ))
}

/// Per-entity series sharing a sinusoidal mean, hourly over two days.
fn write_series(path: &Path, entities: usize, seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.1).unwrap();
    let offset = Normal::new(0.0, 0.2).unwrap();
    let mut out = String::from("id,time,value\n");
    for e in 0..entities {
        let shift = offset.sample(&mut rng);
        let amp = rng.random_range(1.5..2.5);
        for h in 0..48 {
            let t = h as f64;
            let v = amp * (2.0 * std::f64::consts::PI * t / 48.0).sin() + shift + noise.sample(&mut rng);
            writeln!(out, "p{e},{t},{v}").unwrap();
        }
    }
    fs::write(path, out).map_err(|e| e.to_string())
}

fn criterion_9(tmp: &Path) -> Result<Outcome, String> {
    let dir = tmp.join("csv");
    fs::create_dir_all(&dir).map_err(|e| e.to_string())?;
    let (train, test) = (dir.join("train.csv"), dir.join("test.csv"));
    write_series(&train, 200, 1)?;
    write_series(&test, 50, 2)?;
    let config = dir.join("icu.ini");
    fs::write(
        &config,
        format!(
            "[experiment]\nenv = csv\nmodels = vanilla, learned_mean\n\n[csv]\ntrain = {}\ntest = {}\nsplit_time = 24\n",
            train.display(),
            test.display()
        ),
    )
    .map_err(|e| e.to_string())?;
    let out = dir.join("out");
    run_bin(&["evaluate", "--config", config.to_str().unwrap(), "--seed", "42", "--out-dir", out.to_str().unwrap()])?;
    let rows = read_rows(&out.join("results.csv"))?;
    let zero = cell(&rows, "vanilla", "all")?.mse;
    let learned = cell(&rows, "learned_mean", "all")?.mse;
    Ok(Outcome::new(
        learned < zero,
        format!("after t=24: learned-mean test MSE {learned:.4} < zero-mean {zero:.4}"),
    ))
}

fn main() {
    let tmp = tempfile::tempdir().expect("temporary directory");
    let tmp = tmp.path();
    let mut results: Vec<(usize, &str, Result<Outcome, String>)> = Vec::new();
    let mut report = |n: usize, name: &'static str, r: Result<Outcome, String>| {
        let line = match &r {
            Ok(o) => format!("{} criterion {n} ({name}): {}", if o.passed { "PASS" } else { "FAIL" }, o.detail),
            Err(e) => format!("FAIL criterion {n} ({name}): {e}"),
        };
        println!("{line}");
        results.push((n, name, r));
    };

    report(1, "LML gradient correctness", criterion_1());
    report(2, "GP/FPCA posterior equivalence", criterion_2());
    report(3, "zero-mean counter-example", criterion_3());
    report(4, "tableS1 orderings", criterion_4(tmp));

    let (a, b) = (tmp.join("t1a"), tmp.join("t1b"));
    let first = reproduce("table1", &a, None);
    let second = reproduce("table1", &b, None);
    let c5 = match &first {
        Ok((t, rows)) => criterion_5(rows, *t),
        Err(e) => Err(e.clone()),
    };
    report(5, "table1 orderings", c5);
    report(6, "tableS2 orderings", criterion_6(tmp));
    report(7, "IDX parser", criterion_7());
    let c8 = match (&first, &second) {
        (Ok(_), Ok(_)) => criterion_8(&a, &b),
        (Err(e), _) | (_, Err(e)) => Err(e.clone()),
    };
    report(8, "end-to-end determinism", c8);
    report(9, "CSV time-series pipeline", criterion_9(tmp));

    let failed = results.iter().filter(|(_, _, r)| !matches!(r, Ok(o) if o.passed)).count();
    println!("{} of {} acceptance criteria passed", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
