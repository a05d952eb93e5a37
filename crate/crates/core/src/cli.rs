//! The `plab` command line.
//!
//! Errors are printed as a single line, `plab: error[<kind>]: <message>`, and
//! exit with status 1. Usage errors (unknown subcommand or flag) print the
//! usage text and exit with status 2.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::analysis::{mean_std_across, pearson, sliding_window_corr};
use crate::collapse::{accumulate_stats, nc1, nc2, nc3, nc4, FeatureBatch};
use crate::data::{
    grayscale_to_cifar_records, load_mnist_idx, synthetic_digits, write_cifar10_binary,
    write_mnist_idx, CIFAR_PIXELS,
};
use crate::error::{Error, Result};
use crate::experiments::{self, ExperimentConfig, Protocol};
use crate::linalg::Matrix;
use crate::plot::{emit_plot, PlotOptions, PlotSeries};
use crate::runlog::{read_csv, write_csv, RunLog, RunRecord};

#[derive(Debug, Parser)]
#[command(name = "plab", version, about = "Neural collapse and plasticity-loss experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct RunArgs {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Run a single seed instead of the configured list.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Permuted MNIST: sequential tasks with per-task collapse metrics.
    Continual(RunArgs),
    /// Permuted MNIST: vary first-task epochs, probe the second task.
    FirstTaskSweep(RunArgs),
    /// Permuted MNIST: train the first task down to NC1 thresholds.
    NcThreshold(RunArgs),
    /// Warm starting with optional shrink-and-perturb / NC1 penalty.
    Warmstart(RunArgs),
    /// Correlate two logged columns, globally and in sliding windows.
    Analyze(AnalyzeArgs),
    /// Collapse metrics from a saved feature dump.
    NcMetrics(NcMetricsArgs),
    /// Write small valid MNIST/CIFAR files for tests and smoke runs.
    Fixtures(FixturesArgs),
}

#[derive(Debug, Args)]
struct AnalyzeArgs {
    /// RunLog CSV to analyze.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value = "nc1")]
    x: String,
    #[arg(long, default_value = "test_acc")]
    y: String,
    /// Only rows with this task index (default: 1 for warm-start logs, all otherwise).
    #[arg(long)]
    task: Option<usize>,
    /// Sliding-window length; omit for global correlations only.
    #[arg(long)]
    window: Option<usize>,
    #[arg(long, default_value_t = 1)]
    stride: usize,
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

#[derive(Debug, Args)]
struct NcMetricsArgs {
    /// CSV with header `label,f0..f{d-1}` and optional logit columns `z0..z{C-1}`.
    #[arg(long)]
    features: PathBuf,
    /// Optional classifier weight, one row per class, no header.
    #[arg(long)]
    classifier: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    num_classes: usize,
    /// Output CSV (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct FixturesArgs {
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
    /// Images per fixture.
    #[arg(long, default_value_t = 100)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Re-encode an IDX image/label pair as a CIFAR binary batch.
    #[arg(long, num_args = 2, value_names = ["IMAGES", "LABELS"])]
    cifar_from_idx: Option<Vec<PathBuf>>,
}

/// Runs the CLI on `args` (including the program name) and returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("plab: error[{}]: {}", e.kind(), one_line(&e.to_string()));
            1
        }
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Continual(a) => run_protocol(Protocol::Continual, &a),
        Command::FirstTaskSweep(a) => run_protocol(Protocol::FirstTaskSweep, &a),
        Command::NcThreshold(a) => run_protocol(Protocol::NcThreshold, &a),
        Command::Warmstart(a) => run_protocol(Protocol::Warmstart, &a),
        Command::Analyze(a) => analyze(&a),
        Command::NcMetrics(a) => nc_metrics(&a),
        Command::Fixtures(a) => fixtures(&a),
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn run_protocol(protocol: Protocol, args: &RunArgs) -> Result<()> {
    let mut cfg = ExperimentConfig::from_file(&args.config)?;
    if cfg.protocol != protocol {
        return Err(Error::Config {
            path: args.config.clone(),
            detail: format!(
                "config is for protocol `{}`, not `{}`",
                cfg.protocol.as_str(),
                protocol.as_str()
            ),
        });
    }
    if let Some(seed) = args.seed {
        cfg.seeds = vec![seed];
    }
    let log = experiments::run(&cfg)?;
    ensure_dir(&args.out_dir)?;
    let stem = protocol.as_str();
    let csv_path = args.out_dir.join(format!("{stem}.csv"));
    write_csv(&log, &csv_path)?;
    let snap = args.out_dir.join(format!("{stem}.config.toml"));
    fs::write(&snap, cfg.to_toml()).map_err(|e| Error::io(&snap, e))?;
    for (name, series, opts) in protocol_plots(protocol, &log)? {
        emit_plot(&series, &opts, &args.out_dir.join(name))?;
    }
    println!("{}", csv_path.display());
    Ok(())
}

/// Mean and std across seeds of `y` at each `x`, using rows selected by `keep`.
fn aggregate(
    log: &RunLog,
    keep: impl Fn(&RunRecord) -> bool,
    x: impl Fn(&RunRecord) -> Option<f64>,
    y: impl Fn(&RunRecord) -> Option<f64>,
) -> Option<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let mut per_seed: BTreeMap<u64, Vec<(f64, f64)>> = BTreeMap::new();
    for r in log.filter(keep) {
        if let (Some(xv), Some(yv)) = (x(r), y(r)) {
            per_seed.entry(r.seed).or_default().push((xv, yv));
        }
    }
    let first = per_seed.values().next()?.clone();
    let xs: Vec<f64> = first.iter().map(|p| p.0).collect();
    let runs: Vec<Vec<f64>> = per_seed
        .values()
        .filter(|v| v.iter().map(|p| p.0).eq(xs.iter().copied()))
        .map(|v| v.iter().map(|p| p.1).collect())
        .collect();
    let (mean, std) = mean_std_across(&runs).ok()?;
    Some((xs, mean, std))
}

type Plot = (String, Vec<PlotSeries>, PlotOptions);

fn band_plot(
    file: &str,
    title: &str,
    x_label: &str,
    parts: Vec<(&str, Option<(Vec<f64>, Vec<f64>, Vec<f64>)>)>,
) -> Option<Plot> {
    let series: Vec<PlotSeries> = parts
        .into_iter()
        .filter_map(|(name, agg)| {
            agg.map(|(x, m, s)| PlotSeries::line(name, x, m).with_band(s))
        })
        .collect();
    (!series.is_empty()).then(|| {
        (
            file.to_string(),
            series,
            PlotOptions {
                title: title.into(),
                x_label: x_label.into(),
                y_label: "mean ± std over seeds".into(),
            },
        )
    })
}

fn protocol_plots(protocol: Protocol, log: &RunLog) -> Result<Vec<Plot>> {
    let col = |name: &'static str| move |r: &RunRecord| r.column(name);
    let plots = match protocol {
        Protocol::Continual => vec![
            band_plot(
                "continual_nc1.svg",
                "NC1 per task",
                "task",
                vec![("NC1", aggregate(log, |_| true, col("task"), col("nc1")))],
            ),
            band_plot(
                "continual_acc.svg",
                "Training accuracy per task",
                "task",
                vec![("train acc", aggregate(log, |_| true, col("task"), col("train_acc")))],
            ),
        ],
        Protocol::FirstTaskSweep => {
            let e0 = |r: &RunRecord| {
                r.variant
                    .strip_prefix("e0=")
                    .and_then(|v| v.parse::<f64>().ok())
            };
            vec![
                band_plot(
                    "first_task_sweep_nc1.svg",
                    "NC1 after the first task",
                    "first-task epochs",
                    vec![("NC1", aggregate(log, |r| r.task == 0, e0, col("nc1")))],
                ),
                band_plot(
                    "first_task_sweep_probe.svg",
                    "Second-task accuracy after one epoch",
                    "first-task epochs",
                    vec![("probe acc", aggregate(log, |r| r.task == 1, e0, col("train_acc")))],
                ),
            ]
        }
        Protocol::NcThreshold => vec![band_plot(
            "nc_threshold.svg",
            "Epochs needed per NC1 threshold",
            "threshold",
            vec![(
                "epochs",
                aggregate(
                    log,
                    |r| r.task == 0 && r.converged == Some(true),
                    |r| r.variant.strip_prefix("thr=").and_then(|v| v.parse().ok()),
                    col("epochs_used"),
                ),
            )],
        )],
        Protocol::Warmstart => vec![
            band_plot(
                "warmstart_nc1.svg",
                "NC1 on the warm-up data",
                "warm-up epochs",
                vec![("NC1", aggregate(log, |r| r.task == 0, col("epoch"), col("nc1")))],
            ),
            band_plot(
                "warmstart_acc.svg",
                "Test accuracy",
                "warm-up epochs",
                vec![
                    (
                        "after warm-up",
                        aggregate(log, |r| r.task == 0, col("epoch"), col("test_acc")),
                    ),
                    (
                        "after full data",
                        aggregate(log, |r| r.task == 1, col("epoch"), col("test_acc")),
                    ),
                ],
            ),
        ],
    };
    Ok(plots.into_iter().flatten().collect())
}

/// `(seed, variant)` groups of paired `(x, y)` values, in log order.
pub fn paired_series(
    log: &RunLog,
    x: &str,
    y: &str,
    task: Option<usize>,
) -> Vec<((u64, String), Vec<f64>, Vec<f64>)> {
    let mut groups: Vec<((u64, String), Vec<f64>, Vec<f64>)> = Vec::new();
    for r in &log.records {
        if task.is_some_and(|t| r.task != t) {
            continue;
        }
        let (Some(xv), Some(yv)) = (r.column(x), r.column(y)) else {
            continue;
        };
        let key = (r.seed, r.variant.clone());
        match groups.iter_mut().find(|g| g.0 == key) {
            Some(g) => {
                g.1.push(xv);
                g.2.push(yv);
            }
            None => groups.push((key, vec![xv], vec![yv])),
        }
    }
    groups
}

fn io(p: &Path) -> impl Fn(std::io::Error) -> Error + '_ {
    move |e| Error::io(p, e)
}

fn fmt_r(r: Option<f64>) -> String {
    r.map_or_else(String::new, |v| format!("{v:.16e}"))
}

fn create(path: &Path) -> Result<std::io::BufWriter<fs::File>> {
    fs::File::create(path)
        .map(std::io::BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

fn analyze(a: &AnalyzeArgs) -> Result<()> {
    let log = read_csv(&a.input)?;
    let task = a.task.or_else(|| {
        log.records
            .iter()
            .any(|r| r.protocol == Protocol::Warmstart.as_str())
            .then_some(1)
    });
    let groups = paired_series(&log, &a.x, &a.y, task);
    if groups.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no rows carry both `{}` and `{}`",
            a.x, a.y
        )));
    }
    ensure_dir(&a.out_dir)?;

    let path = a.out_dir.join("correlation.csv");
    let mut out = create(&path)?;
    writeln!(out, "seed,variant,n,r").map_err(io(&path))?;
    for ((seed, variant), xs, ys) in &groups {
        let r = match pearson(xs, ys) {
            Ok(c) => Some(c.r),
            Err(Error::DegenerateSeries(_)) => None,
            Err(e) => return Err(e),
        };
        writeln!(out, "{seed},{variant},{},{}", xs.len(), fmt_r(r)).map_err(io(&path))?;
    }
    out.flush().map_err(io(&path))?;

    let Some(window) = a.window else {
        return Ok(());
    };
    let path = a.out_dir.join("sliding.csv");
    let mut out = create(&path)?;
    writeln!(out, "seed,variant,window,start,r").map_err(io(&path))?;
    let mut by_variant: BTreeMap<String, Vec<Vec<Option<f64>>>> = BTreeMap::new();
    for ((seed, variant), xs, ys) in &groups {
        let w = sliding_window_corr(xs, ys, window, a.stride)?;
        for c in &w {
            writeln!(out, "{seed},{variant},{window},{},{}", c.start, fmt_r(c.r))
                .map_err(io(&path))?;
        }
        by_variant
            .entry(variant.clone())
            .or_default()
            .push(w.iter().map(|c| c.r).collect());
    }
    out.flush().map_err(io(&path))?;

    let path = a.out_dir.join("sliding_summary.csv");
    let mut out = create(&path)?;
    writeln!(out, "variant,start,seeds,mean_r,std_r").map_err(io(&path))?;
    let mut series = Vec::new();
    for (variant, runs) in &by_variant {
        let len = runs.iter().map(Vec::len).min().unwrap_or(0);
        let (mut xs, mut means, mut stds) = (Vec::new(), Vec::new(), Vec::new());
        for i in 0..len {
            let vals: Vec<Vec<f64>> = runs.iter().filter_map(|r| r[i]).map(|v| vec![v]).collect();
            let start = i * a.stride;
            if vals.is_empty() {
                writeln!(out, "{variant},{start},0,,").map_err(io(&path))?;
                continue;
            }
            let (m, s) = mean_std_across(&vals)?;
            writeln!(
                out,
                "{variant},{start},{},{},{}",
                vals.len(),
                fmt_r(Some(m[0])),
                fmt_r(Some(s[0]))
            )
            .map_err(io(&path))?;
            xs.push(start as f64);
            means.push(m[0]);
            stds.push(s[0]);
        }
        if !xs.is_empty() {
            let name = if variant.is_empty() { "r" } else { variant.as_str() };
            series.push(PlotSeries::line(name, xs, means).with_band(stds));
        }
    }
    out.flush().map_err(io(&path))?;
    if !series.is_empty() {
        emit_plot(
            &series,
            &PlotOptions {
                title: format!("corr({}, {}), window {window}", a.x, a.y),
                x_label: "window start".into(),
                y_label: "Pearson r".into(),
            },
            &a.out_dir.join("sliding.svg"),
        )?;
    }
    Ok(())
}

/// Parsed feature dump: features, labels, and logits if present.
pub fn read_feature_dump(path: &Path) -> Result<(Matrix, Vec<usize>, Option<Matrix>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header: Vec<&str> = lines
        .next()
        .ok_or_else(|| Error::Csv {
            line: 1,
            detail: "missing header".into(),
        })?
        .split(',')
        .collect();
    if header.first() != Some(&"label") {
        return Err(Error::Csv {
            line: 1,
            detail: "first column must be `label`".into(),
        });
    }
    let d = header.iter().filter(|h| h.starts_with('f')).count();
    let c = header.iter().filter(|h| h.starts_with('z')).count();
    if d == 0 || 1 + d + c != header.len() {
        return Err(Error::Csv {
            line: 1,
            detail: "expected columns label,f0..,z0..".into(),
        });
    }
    let (mut feats, mut logits, mut labels) = (Vec::new(), Vec::new(), Vec::new());
    for (k, line) in lines.enumerate() {
        let lineno = k as u64 + 2;
        if line.is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != header.len() {
            return Err(Error::Csv {
                line: lineno,
                detail: format!("expected {} fields, found {}", header.len(), cells.len()),
            });
        }
        let bad = |v: &str| Error::Csv {
            line: lineno,
            detail: format!("cannot parse {v:?}"),
        };
        labels.push(cells[0].parse::<usize>().map_err(|_| bad(cells[0]))?);
        for (j, cell) in cells[1..].iter().enumerate() {
            let v: f64 = cell.parse().map_err(|_| bad(cell))?;
            if j < d {
                feats.push(v);
            } else {
                logits.push(v);
            }
        }
    }
    let n = labels.len();
    let logits = (c > 0).then(|| Matrix::new(n, c, logits)).transpose()?;
    Ok((Matrix::new(n, d, feats)?, labels, logits))
}

/// Writes features (and optional logits) in the format read by `nc-metrics`.
pub fn write_feature_dump(
    path: &Path,
    features: &Matrix,
    labels: &[usize],
    logits: Option<&Matrix>,
) -> Result<()> {
    let mut out = create(path)?;
    let io = |e: std::io::Error| Error::io(path, e);
    let mut header = vec!["label".to_string()];
    header.extend((0..features.cols()).map(|j| format!("f{j}")));
    if let Some(z) = logits {
        header.extend((0..z.cols()).map(|j| format!("z{j}")));
    }
    writeln!(out, "{}", header.join(",")).map_err(io)?;
    for (i, y) in labels.iter().enumerate() {
        let mut row = vec![y.to_string()];
        row.extend(features.row(i).iter().map(|v| format!("{v:.16e}")));
        if let Some(z) = logits {
            row.extend(z.row(i).iter().map(|v| format!("{v:.16e}")));
        }
        writeln!(out, "{}", row.join(",")).map_err(io)?;
    }
    out.flush().map_err(io)
}

fn read_matrix_rows(path: &Path) -> Result<Matrix> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let rows = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(k, l)| {
            l.split(',')
                .map(|c| {
                    c.trim().parse::<f64>().map_err(|_| Error::Csv {
                        line: k as u64 + 1,
                        detail: format!("cannot parse {c:?}"),
                    })
                })
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Matrix::from_rows(&rows)
}

fn nc_metrics(a: &NcMetricsArgs) -> Result<()> {
    let (features, labels, logits) = read_feature_dump(&a.features)?;
    let batch = FeatureBatch::new(features, labels, a.num_classes)?;
    let stats = accumulate_stats(&batch)?;
    let v1 = nc1(&stats)?;
    let (cv, ang) = nc2(&stats)?;
    let v3 = match &a.classifier {
        Some(p) => Some(nc3(&stats, &read_matrix_rows(p)?)?),
        None => None,
    };
    let v4 = match &logits {
        Some(z) => Some(nc4(&stats, batch.features(), z)?),
        None => None,
    };
    let body = format!(
        "nc1,nc2_norm_cv,nc2_angle_dev,nc3,nc4_mismatch\n{},{},{},{},{}\n",
        fmt_r(Some(v1)),
        fmt_r(Some(cv)),
        fmt_r(Some(ang)),
        fmt_r(v3),
        fmt_r(v4)
    );
    match &a.out {
        Some(p) => fs::write(p, body).map_err(|e| Error::io(p, e)),
        None => {
            print!("{body}");
            Ok(())
        }
    }
}

fn fixtures(a: &FixturesArgs) -> Result<()> {
    ensure_dir(&a.out_dir)?;
    if let Some(paths) = &a.cifar_from_idx {
        let ds = load_mnist_idx(&paths[0], &paths[1])?;
        let (px, lb) = grayscale_to_cifar_records(&ds)?;
        let out = a.out_dir.join("data_batch_from_idx.bin");
        write_cifar10_binary(&out, &px, &lb)?;
        println!("{}", out.display());
        return Ok(());
    }
    let (px, lb) = synthetic_digits(a.n, 28, a.seed);
    write_mnist_idx(
        &a.out_dir.join("fixture-images-idx3-ubyte"),
        &a.out_dir.join("fixture-labels-idx1-ubyte"),
        28,
        28,
        &px,
        &lb,
    )?;
    let (px, lb) = synthetic_digits(a.n, 32, a.seed.wrapping_add(1));
    let rgb: Vec<u8> = px
        .chunks_exact(CIFAR_PIXELS / 3)
        .flat_map(|plane| plane.iter().chain(plane).chain(plane).copied())
        .collect();
    write_cifar10_binary(&a.out_dir.join("fixture_batch.bin"), &rgb, &lb)?;
    println!("{}", a.out_dir.display());
    Ok(())
}
