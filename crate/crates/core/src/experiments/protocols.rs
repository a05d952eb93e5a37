use std::time::Instant;

use log::{info, warn};

use crate::data::{
    channel_means, load_cifar10_binary, load_mnist_idx, make_permuted_task, split_warmup,
    subtract_channel_means, CifarOptions, LabeledDataset, PermutedTask, NUM_CLASSES,
};
use crate::error::{Error, Result};
use crate::interventions::shrink_and_perturb;
use crate::nn::{evaluate, MlpModel};
use crate::runlog::{RunLog, RunRecord};

use super::config::{ExperimentConfig, Protocol};
use super::training::{measure, plasticity_probe, train_epoch, EpochKey, ProbeEval, TrainSettings};

/// Loads the Permuted MNIST base set and optional test set named in `cfg`.
pub fn load_mnist(cfg: &ExperimentConfig) -> Result<(LabeledDataset, Option<LabeledDataset>)> {
    let missing = |key: &str| Error::InvalidArgument(format!("config key `{key}` is required"));
    let images = cfg.mnist_images.as_ref().ok_or_else(|| missing("mnist_images"))?;
    let labels = cfg.mnist_labels.as_ref().ok_or_else(|| missing("mnist_labels"))?;
    let mut train = load_mnist_idx(&cfg.resolve(images), &cfg.resolve(labels))?;
    let test = match (&cfg.mnist_test_images, &cfg.mnist_test_labels) {
        (Some(i), Some(l)) => Some(load_mnist_idx(&cfg.resolve(i), &cfg.resolve(l))?),
        _ if cfg.holdout > 0 => {
            let (tr, te) = train.holdout_split(cfg.holdout, cfg.data_seed);
            train = tr;
            Some(te)
        }
        _ => None,
    };
    if cfg.train_subset > 0 {
        train = train.subset(cfg.train_subset, cfg.data_seed);
    }
    Ok((train, test))
}

/// Loads the warm-start training set and test set named in `cfg`.
pub fn load_cifar(cfg: &ExperimentConfig) -> Result<(LabeledDataset, LabeledDataset)> {
    if cfg.cifar_train.is_empty() {
        return Err(Error::InvalidArgument(
            "config key `cifar_train` is required".into(),
        ));
    }
    let paths: Vec<_> = cfg.cifar_train.iter().map(|p| cfg.resolve(p)).collect();
    let mut train = load_cifar10_binary(&paths, CifarOptions::default())?;
    let mut test = if cfg.cifar_test.is_empty() {
        if cfg.holdout == 0 {
            return Err(Error::InvalidArgument(
                "warm start needs `cifar_test` files or a nonzero `holdout`".into(),
            ));
        }
        let (tr, te) = train.holdout_split(cfg.holdout, cfg.data_seed);
        train = tr;
        te
    } else {
        let paths: Vec<_> = cfg.cifar_test.iter().map(|p| cfg.resolve(p)).collect();
        load_cifar10_binary(&paths, CifarOptions::default())?
    };
    if cfg.train_subset > 0 {
        train = train.subset(cfg.train_subset, cfg.data_seed);
    }
    if cfg.cifar_normalize {
        let means = channel_means(&train.images);
        subtract_channel_means(&mut train.images, &means);
        subtract_channel_means(&mut test.images, &means);
    }
    Ok((train, test))
}

/// Loads the protocol's data and runs it.
pub fn run(cfg: &ExperimentConfig) -> Result<RunLog> {
    cfg.validate()?;
    match cfg.protocol {
        Protocol::Continual => {
            let (train, test) = load_mnist(cfg)?;
            run_continual(cfg, &train, test.as_ref())
        }
        Protocol::FirstTaskSweep => {
            let (train, _) = load_mnist(cfg)?;
            run_first_task_sweep(cfg, &train)
        }
        Protocol::NcThreshold => {
            let (train, _) = load_mnist(cfg)?;
            run_nc1_thresholds(cfg, &train)
        }
        Protocol::Warmstart => {
            let (train, test) = load_cifar(cfg)?;
            run_warmstart(cfg, &train, &test)
        }
    }
}

fn settings(cfg: &ExperimentConfig, seed: u64) -> TrainSettings<'static> {
    TrainSettings {
        sgd: cfg.sgd(),
        batch_size: cfg.batch_size,
        seed,
        reg: None,
    }
}

fn new_model(cfg: &ExperimentConfig, input_dim: usize, seed: u64) -> MlpModel {
    MlpModel::new(input_dim, &cfg.hidden_dims, NUM_CLASSES, seed)
}

struct Clock {
    start: Instant,
    enabled: bool,
}

impl Clock {
    fn new(cfg: &ExperimentConfig) -> Self {
        Clock {
            start: Instant::now(),
            enabled: cfg.record_wall_time,
        }
    }

    fn stamp(&self) -> Option<f64> {
        self.enabled.then(|| self.start.elapsed().as_secs_f64())
    }
}

fn permuted_test(test: &LabeledDataset, task: &PermutedTask) -> Result<LabeledDataset> {
    Ok(LabeledDataset {
        images: task.apply(&test.images)?,
        labels: test.labels.clone(),
        source: format!("{}[task {}]", test.source, task.task_index),
    })
}

/// Sequential Permuted MNIST: `first_task_epochs` on task 0, `task_epochs`
/// on each later task, with accuracy and collapse metrics recorded on each
/// task's training data once it finishes.
pub fn run_continual(
    cfg: &ExperimentConfig,
    base: &LabeledDataset,
    test: Option<&LabeledDataset>,
) -> Result<RunLog> {
    let protocol = Protocol::Continual.as_str();
    let mut log = RunLog::new();
    for &seed in &cfg.seeds {
        let clock = Clock::new(cfg);
        let s = settings(cfg, seed);
        let mut model = new_model(cfg, base.dim(), seed);
        for t in 0..cfg.tasks {
            let (task_ds, perm) = make_permuted_task(base, t, seed, cfg.identity_first_task)?;
            let epochs = if t == 0 {
                cfg.first_task_epochs
            } else {
                cfg.task_epochs
            };
            for e in 0..epochs {
                train_epoch(&mut model, &task_ds, &s, EpochKey::new(t, e))?;
            }
            let (acc, nc) = measure(&model, &task_ds, cfg.metric_samples)?;
            let mut rec = RunRecord::new(seed, protocol, "", t, epochs);
            rec.train_acc = Some(acc);
            rec.nc = nc;
            if let Some(test) = test {
                let tt = permuted_test(test, &perm)?;
                rec.test_acc = Some(evaluate(&model, &tt.images, &tt.labels)?);
            }
            rec.wall_time_s = clock.stamp();
            info!(
                "seed {seed} task {t}: train acc {acc:.4}, nc1 {}",
                nc.map_or("n/a".into(), |r| format!("{:.4}", r.nc1))
            );
            log.push(rec);
        }
    }
    Ok(log)
}

/// For each `E0` in the sweep: collapse metrics after `E0` epochs on task 0,
/// then a `probe_epochs` probe on task 1.
///
/// Epoch shuffles depend only on `(seed, task, epoch)`, so the model after
/// `E0` epochs of one long run is exactly the model a separate `E0`-epoch run
/// would produce; the sweep trains once per seed and snapshots.
pub fn run_first_task_sweep(cfg: &ExperimentConfig, base: &LabeledDataset) -> Result<RunLog> {
    let protocol = Protocol::FirstTaskSweep.as_str();
    let mut points = cfg.first_task_epoch_sweep.clone();
    points.sort_unstable();
    points.dedup();
    let mut log = RunLog::new();
    for &seed in &cfg.seeds {
        let clock = Clock::new(cfg);
        let s = settings(cfg, seed);
        let (task0, _) = make_permuted_task(base, 0, seed, cfg.identity_first_task)?;
        let (task1, _) = make_permuted_task(base, 1, seed, cfg.identity_first_task)?;
        let mut model = new_model(cfg, base.dim(), seed);
        let mut trained = 0;
        for &e0 in &points {
            while trained < e0 {
                train_epoch(&mut model, &task0, &s, EpochKey::new(0, trained))?;
                trained += 1;
            }
            let variant = format!("e0={e0}");
            let (acc, nc) = if e0 == 0 {
                warn!("seed {seed}: E0 = 0, skipping task-0 collapse metrics");
                (evaluate(&model, &task0.images, &task0.labels)?, None)
            } else {
                measure(&model, &task0, cfg.metric_samples)?
            };
            let mut rec = RunRecord::new(seed, protocol, &variant, 0, e0);
            rec.train_acc = Some(acc);
            rec.nc = nc;
            rec.epochs_used = Some(e0);
            rec.wall_time_s = clock.stamp();
            log.push(rec);

            let probe = plasticity_probe(&model, &task1, cfg.probe_epochs, &s, 1, ProbeEval::Train)?;
            let mut rec = RunRecord::new(seed, protocol, &variant, 1, cfg.probe_epochs);
            rec.train_acc = Some(probe);
            rec.wall_time_s = clock.stamp();
            info!("seed {seed} E0 {e0}: task-0 acc {acc:.4}, probe acc {probe:.4}");
            log.push(rec);
        }
    }
    Ok(log)
}

#[derive(Clone, Debug)]
pub struct ThresholdHit {
    pub threshold: f64,
    pub epochs_used: usize,
    pub train_acc: f64,
    pub report: crate::collapse::CollapseReport,
    pub model: MlpModel,
}

/// Trains on task 0 until each threshold (descending) is undercut, checking
/// NC1 on the task-0 training data after every epoch. Returns one entry per
/// threshold: the hit, or `ThresholdUnreachable` once the cap is spent.
pub fn threshold_search(
    cfg: &ExperimentConfig,
    task0: &LabeledDataset,
    seed: u64,
    thresholds: &[f64],
) -> Result<Vec<Result<ThresholdHit>>> {
    let s = settings(cfg, seed);
    let mut model = new_model(cfg, task0.dim(), seed);
    let mut out = Vec::with_capacity(thresholds.len());
    let mut best = f64::INFINITY;
    for epoch in 1..=cfg.threshold_epoch_cap {
        if out.len() == thresholds.len() {
            break;
        }
        train_epoch(&mut model, task0, &s, EpochKey::new(0, epoch - 1))?;
        let (acc, nc) = measure(&model, task0, cfg.metric_samples)?;
        let Some(report) = nc else { continue };
        best = best.min(report.nc1);
        log::debug!("seed {seed} epoch {epoch}: nc1 {:.5}", report.nc1);
        while out.len() < thresholds.len() && report.nc1 < thresholds[out.len()] {
            out.push(Ok(ThresholdHit {
                threshold: thresholds[out.len()],
                epochs_used: epoch,
                train_acc: acc,
                report,
                model: model.clone(),
            }));
        }
    }
    while out.len() < thresholds.len() {
        out.push(Err(Error::ThresholdUnreachable {
            threshold: thresholds[out.len()],
            cap: cfg.threshold_epoch_cap,
            best_nc1: best,
        }));
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct ThresholdOutcome {
    pub epochs_used: usize,
    pub final_nc1: f64,
    pub next_task_acc: f64,
    pub model: MlpModel,
    pub log: RunLog,
}

/// Trains task 0 until NC1 drops below `threshold`, then probes task 1.
pub fn train_to_nc1_threshold(
    cfg: &ExperimentConfig,
    base: &LabeledDataset,
    threshold: f64,
    seed: u64,
) -> Result<ThresholdOutcome> {
    if !(threshold > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "threshold must be positive, got {threshold}"
        )));
    }
    let (task0, _) = make_permuted_task(base, 0, seed, cfg.identity_first_task)?;
    let (task1, _) = make_permuted_task(base, 1, seed, cfg.identity_first_task)?;
    let hit = threshold_search(cfg, &task0, seed, &[threshold])?
        .pop()
        .expect("one result per threshold")?;
    let mut log = RunLog::new();
    let probe = threshold_records(cfg, seed, &hit, &task1, &mut log)?;
    Ok(ThresholdOutcome {
        epochs_used: hit.epochs_used,
        final_nc1: hit.report.nc1,
        next_task_acc: probe,
        model: hit.model,
        log,
    })
}

fn threshold_records(
    cfg: &ExperimentConfig,
    seed: u64,
    hit: &ThresholdHit,
    task1: &LabeledDataset,
    log: &mut RunLog,
) -> Result<f64> {
    let protocol = Protocol::NcThreshold.as_str();
    let variant = format!("thr={}", hit.threshold);
    let mut rec = RunRecord::new(seed, protocol, &variant, 0, hit.epochs_used);
    rec.train_acc = Some(hit.train_acc);
    rec.nc = Some(hit.report);
    rec.epochs_used = Some(hit.epochs_used);
    rec.converged = Some(true);
    log.push(rec);
    let probe = plasticity_probe(
        &hit.model,
        task1,
        cfg.probe_epochs,
        &settings(cfg, seed),
        1,
        ProbeEval::Train,
    )?;
    let mut rec = RunRecord::new(seed, protocol, &variant, 1, cfg.probe_epochs);
    rec.train_acc = Some(probe);
    log.push(rec);
    Ok(probe)
}

/// The thresholds x seeds grid. Each seed trains once and snapshots at every
/// threshold crossing; an unreachable threshold becomes a `converged = false`
/// row instead of aborting the grid.
pub fn run_nc1_thresholds(cfg: &ExperimentConfig, base: &LabeledDataset) -> Result<RunLog> {
    let protocol = Protocol::NcThreshold.as_str();
    let mut log = RunLog::new();
    for &seed in &cfg.seeds {
        let clock = Clock::new(cfg);
        let (task0, _) = make_permuted_task(base, 0, seed, cfg.identity_first_task)?;
        let (task1, _) = make_permuted_task(base, 1, seed, cfg.identity_first_task)?;
        for result in threshold_search(cfg, &task0, seed, &cfg.nc1_thresholds)? {
            match result {
                Ok(hit) => {
                    let probe = threshold_records(cfg, seed, &hit, &task1, &mut log)?;
                    info!(
                        "seed {seed} threshold {}: {} epochs, nc1 {:.4}, probe {probe:.4}",
                        hit.threshold, hit.epochs_used, hit.report.nc1
                    );
                }
                Err(Error::ThresholdUnreachable {
                    threshold,
                    cap,
                    best_nc1,
                }) => {
                    warn!("seed {seed}: threshold {threshold} unreachable in {cap} epochs (best {best_nc1})");
                    let mut rec =
                        RunRecord::new(seed, protocol, &format!("thr={threshold}"), 0, cap);
                    rec.epochs_used = Some(cap);
                    rec.converged = Some(false);
                    log.push(rec);
                }
                Err(e) => return Err(e),
            }
        }
        if let Some(last) = log.records.last_mut() {
            last.wall_time_s = clock.stamp();
        }
    }
    Ok(log)
}

/// Warm starting. Phase 1 trains on the warm-up half (optionally with the NC1
/// penalty) and logs a task-0 row per epoch: warm-up accuracy, test accuracy,
/// and collapse metrics on the warm-up data. From every warm-up length in
/// the sweep, a copy is optionally shrunk and perturbed and then trained on
/// the full set until `convergence_accuracy` or the epoch cap; its task-1 row
/// (epoch = warm-up length) holds the collapse metrics of the phase-boundary
/// weights, the boundary test accuracy as `warmup_acc`, and the final
/// training and test accuracies.
pub fn run_warmstart(
    cfg: &ExperimentConfig,
    full: &LabeledDataset,
    test: &LabeledDataset,
) -> Result<RunLog> {
    let protocol = Protocol::Warmstart.as_str();
    let variant = cfg.warmstart_variant();
    let points = cfg.warmup_points();
    let last_point = points.last().copied().unwrap_or(0);
    let reg = cfg.nc1_reg_config();
    let mut log = RunLog::new();
    for &seed in &cfg.seeds {
        let clock = Clock::new(cfg);
        let split = split_warmup(full, seed)?;
        let plain = settings(cfg, seed);
        let phase1 = TrainSettings {
            reg: reg.as_ref(),
            ..plain
        };
        let mut model = new_model(cfg, full.dim(), seed);
        let mut records = Vec::new();
        let mut boundary_rows = Vec::new();
        for e in 0..=cfg.warmup_epochs.max(last_point) {
            if e > 0 {
                train_epoch(&mut model, &split.warmup, &phase1, EpochKey::new(0, e - 1))?;
            }
            let (acc, nc) = measure(&model, &split.warmup, cfg.metric_samples)?;
            let mut rec = RunRecord::new(seed, protocol, &variant, 0, e);
            rec.train_acc = Some(acc);
            rec.test_acc = Some(evaluate(&model, &test.images, &test.labels)?);
            rec.nc = nc;
            rec.wall_time_s = clock.stamp();
            records.push(rec);

            if points.binary_search(&e).is_ok() {
                let row = full_data_phase(cfg, &model, &split.warmup, &split.full, test, seed, e)?;
                info!(
                    "seed {seed} warm-up {e}: phase 2 {} epochs, test acc {:.4}",
                    row.epochs_used.unwrap_or(0),
                    row.test_acc.unwrap_or(f64::NAN)
                );
                boundary_rows.push(RunRecord {
                    wall_time_s: clock.stamp(),
                    ..row
                });
            }
        }
        records.extend(boundary_rows);
        log.records.extend(records);
    }
    Ok(log)
}

fn full_data_phase(
    cfg: &ExperimentConfig,
    warm: &MlpModel,
    warmup: &LabeledDataset,
    full: &LabeledDataset,
    test: &LabeledDataset,
    seed: u64,
    warmup_len: usize,
) -> Result<RunRecord> {
    let mut model = if cfg.shrink_perturb {
        shrink_and_perturb(warm, &cfg.shrink_perturb_params(seed))?
    } else {
        warm.clone()
    };
    let (_, boundary_nc) = measure(&model, warmup, cfg.metric_samples)?;
    let boundary_test = evaluate(&model, &test.images, &test.labels)?;
    let s = settings(cfg, seed);
    let mut train_acc = evaluate(&model, &full.images, &full.labels)?;
    let mut used = 0;
    while train_acc < cfg.convergence_accuracy && used < cfg.phase2_epoch_cap {
        train_epoch(&mut model, full, &s, EpochKey::new(1, used))?;
        used += 1;
        train_acc = evaluate(&model, &full.images, &full.labels)?;
    }
    let converged = train_acc >= cfg.convergence_accuracy;
    if !converged {
        warn!(
            "seed {seed} warm-up {warmup_len}: full-data phase stopped at the {}-epoch cap (train acc {train_acc:.4})",
            cfg.phase2_epoch_cap
        );
    }
    let mut rec = RunRecord::new(
        seed,
        Protocol::Warmstart.as_str(),
        &cfg.warmstart_variant(),
        1,
        warmup_len,
    );
    rec.train_acc = Some(train_acc);
    rec.test_acc = Some(evaluate(&model, &test.images, &test.labels)?);
    rec.warmup_acc = Some(boundary_test);
    rec.nc = boundary_nc;
    rec.epochs_used = Some(used);
    rec.converged = Some(converged);
    Ok(rec)
}
