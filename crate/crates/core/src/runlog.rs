//! Run records and their CSV form.
//!
//! Column order is fixed (see [`COLUMNS`]). Reals are written with 17
//! significant digits so every finite `f64` reads back bit-exactly; absent
//! optional values are empty cells. Files are UTF-8 with LF line endings and
//! always start with the header row.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::collapse::CollapseReport;
use crate::error::{Error, Result};

pub const COLUMNS: [&str; 16] = [
    "seed",
    "protocol",
    "variant",
    "task",
    "epoch",
    "train_acc",
    "test_acc",
    "warmup_acc",
    "nc1",
    "nc2_norm_cv",
    "nc2_angle_dev",
    "nc3",
    "nc4_mismatch",
    "epochs_used",
    "converged",
    "wall_time_s",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub seed: u64,
    pub protocol: String,
    /// Setting within a protocol, e.g. `e0=50`, `thr=0.2`, `plain`.
    pub variant: String,
    pub task: usize,
    pub epoch: usize,
    pub train_acc: Option<f64>,
    pub test_acc: Option<f64>,
    pub warmup_acc: Option<f64>,
    pub nc: Option<CollapseReport>,
    pub epochs_used: Option<usize>,
    pub converged: Option<bool>,
    pub wall_time_s: Option<f64>,
}

impl RunRecord {
    pub fn new(seed: u64, protocol: &str, variant: &str, task: usize, epoch: usize) -> Self {
        RunRecord {
            seed,
            protocol: protocol.to_string(),
            variant: variant.to_string(),
            task,
            epoch,
            train_acc: None,
            test_acc: None,
            warmup_acc: None,
            nc: None,
            epochs_used: None,
            converged: None,
            wall_time_s: None,
        }
    }

    /// Numeric value of a named column, if present in this record.
    pub fn column(&self, name: &str) -> Option<f64> {
        let nc = self.nc.as_ref();
        match name {
            "seed" => Some(self.seed as f64),
            "task" => Some(self.task as f64),
            "epoch" => Some(self.epoch as f64),
            "train_acc" => self.train_acc,
            "test_acc" => self.test_acc,
            "warmup_acc" => self.warmup_acc,
            "nc1" => nc.map(|r| r.nc1),
            "nc2_norm_cv" => nc.map(|r| r.nc2_norm_cv),
            "nc2_angle_dev" => nc.map(|r| r.nc2_angle_dev),
            "nc3" => nc.map(|r| r.nc3),
            "nc4_mismatch" => nc.map(|r| r.nc4_mismatch),
            "epochs_used" => self.epochs_used.map(|v| v as f64),
            "converged" => self.converged.map(|v| if v { 1.0 } else { 0.0 }),
            "wall_time_s" => self.wall_time_s,
            _ => None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunLog {
    pub records: Vec<RunRecord>,
}

impl RunLog {
    pub fn new() -> Self {
        RunLog::default()
    }

    pub fn push(&mut self, r: RunRecord) {
        self.records.push(r);
    }

    pub fn extend(&mut self, other: RunLog) {
        self.records.extend(other.records);
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn seeds(&self) -> Vec<u64> {
        let mut s: Vec<u64> = self.records.iter().map(|r| r.seed).collect();
        s.sort_unstable();
        s.dedup();
        s
    }

    pub fn filter<'a>(&'a self, pred: impl Fn(&RunRecord) -> bool + 'a) -> impl Iterator<Item = &'a RunRecord> + 'a {
        self.records.iter().filter(move |r| pred(r))
    }

    /// Clears timing so logs from repeated runs compare equal.
    pub fn without_wall_time(mut self) -> Self {
        self.records.iter_mut().for_each(|r| r.wall_time_s = None);
        self
    }
}

fn real(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x:.16e}"))
}

fn int(v: Option<usize>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

pub fn write_csv_to<W: Write>(log: &RunLog, out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(out);
    let err = |e: csv::Error| Error::Csv {
        line: 0,
        detail: e.to_string(),
    };
    w.write_record(COLUMNS).map_err(err)?;
    for r in &log.records {
        let nc = r.nc.as_ref();
        w.write_record([
            r.seed.to_string(),
            r.protocol.clone(),
            r.variant.clone(),
            r.task.to_string(),
            r.epoch.to_string(),
            real(r.train_acc),
            real(r.test_acc),
            real(r.warmup_acc),
            real(nc.map(|n| n.nc1)),
            real(nc.map(|n| n.nc2_norm_cv)),
            real(nc.map(|n| n.nc2_angle_dev)),
            real(nc.map(|n| n.nc3)),
            real(nc.map(|n| n.nc4_mismatch)),
            int(r.epochs_used),
            r.converged.map_or_else(String::new, |c| c.to_string()),
            real(r.wall_time_s),
        ])
        .map_err(err)?;
    }
    w.flush().map_err(|e| Error::Csv {
        line: 0,
        detail: e.to_string(),
    })
}

pub fn write_csv(log: &RunLog, path: &Path) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    write_csv_to(log, BufWriter::new(f))
}

pub fn read_csv(path: &Path) -> Result<RunLog> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv_from(f)
}

pub fn read_csv_from<R: std::io::Read>(input: R) -> Result<RunLog> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(input);
    let mut rows = rdr.records();
    let header = match rows.next() {
        Some(h) => h.map_err(|e| Error::Csv {
            line: 1,
            detail: e.to_string(),
        })?,
        None => {
            return Err(Error::Csv {
                line: 1,
                detail: "missing header row".into(),
            })
        }
    };
    if header.iter().ne(COLUMNS.iter().copied()) {
        return Err(Error::Csv {
            line: 1,
            detail: format!("unexpected header; expected {}", COLUMNS.join(",")),
        });
    }
    let mut log = RunLog::new();
    for (k, row) in rows.enumerate() {
        let line = k as u64 + 2;
        let row = row.map_err(|e| Error::Csv {
            line,
            detail: e.to_string(),
        })?;
        log.push(parse_row(&row, line)?);
    }
    Ok(log)
}

fn parse_row(row: &csv::StringRecord, line: u64) -> Result<RunRecord> {
    if row.len() != COLUMNS.len() {
        return Err(Error::Csv {
            line,
            detail: format!("expected {} fields, found {}", COLUMNS.len(), row.len()),
        });
    }
    let bad = |col: &str, v: &str| Error::Csv {
        line,
        detail: format!("column {col}: cannot parse {v:?}"),
    };
    let req_int = |i: usize| -> Result<u64> { row[i].parse().map_err(|_| bad(COLUMNS[i], &row[i])) };
    let opt_real = |i: usize| -> Result<Option<f64>> {
        if row[i].is_empty() {
            return Ok(None);
        }
        let v: f64 = row[i].parse().map_err(|_| bad(COLUMNS[i], &row[i]))?;
        if v.is_nan() {
            return Err(bad(COLUMNS[i], &row[i]));
        }
        Ok(Some(v))
    };
    let nc_vals = [opt_real(8)?, opt_real(9)?, opt_real(10)?, opt_real(11)?, opt_real(12)?];
    let nc = match nc_vals {
        [Some(nc1), Some(a), Some(b), Some(c), Some(d)] => Some(CollapseReport {
            nc1,
            nc2_norm_cv: a,
            nc2_angle_dev: b,
            nc3: c,
            nc4_mismatch: d,
        }),
        [None, None, None, None, None] => None,
        _ => {
            return Err(Error::Csv {
                line,
                detail: "collapse columns must be all present or all empty".into(),
            })
        }
    };
    let epochs_used = if row[13].is_empty() {
        None
    } else {
        Some(req_int(13)? as usize)
    };
    let converged = match &row[14] {
        "" => None,
        "true" => Some(true),
        "false" => Some(false),
        v => return Err(bad(COLUMNS[14], v)),
    };
    Ok(RunRecord {
        seed: req_int(0)?,
        protocol: row[1].to_string(),
        variant: row[2].to_string(),
        task: req_int(3)? as usize,
        epoch: req_int(4)? as usize,
        train_acc: opt_real(5)?,
        test_acc: opt_real(6)?,
        warmup_acc: opt_real(7)?,
        nc,
        epochs_used,
        converged,
        wall_time_s: opt_real(15)?,
    })
}
