//! Pearson correlation, sliding-window correlation, and across-seed summaries.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub name: String,
    pub values: Vec<f64>,
    /// Task or epoch label for each value.
    pub index: Vec<f64>,
}

impl Series {
    pub fn new(name: impl Into<String>, values: Vec<f64>) -> Result<Self> {
        let index = (0..values.len()).map(|i| i as f64).collect();
        Series::with_index(name, values, index)
    }

    pub fn with_index(name: impl Into<String>, values: Vec<f64>, index: Vec<f64>) -> Result<Self> {
        let name = name.into();
        if values.len() != index.len() {
            return Err(Error::InvalidArgument(format!(
                "series {name}: {} values but {} index labels",
                values.len(),
                index.len()
            )));
        }
        if values.iter().any(|v| v.is_nan()) {
            return Err(Error::InvalidArgument(format!("series {name} contains NaN")));
        }
        Ok(Series {
            name,
            values,
            index,
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationResult {
    pub r: f64,
    pub n: usize,
    pub window: Option<usize>,
}

/// Product-moment correlation coefficient.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<CorrelationResult> {
    if x.len() != y.len() {
        return Err(Error::InvalidArgument(format!(
            "series lengths differ: {} vs {}",
            x.len(),
            y.len()
        )));
    }
    let n = x.len();
    if n < 2 {
        return Err(Error::DegenerateSeries(format!("need at least 2 points, got {n}")));
    }
    let constant = |v: &[f64]| v.iter().all(|&a| a == v[0]);
    if constant(x) || constant(y) {
        return Err(Error::DegenerateSeries("zero variance".into()));
    }
    let nf = n as f64;
    let mx = x.iter().sum::<f64>() / nf;
    let my = y.iter().sum::<f64>() / nf;
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::DegenerateSeries("zero variance".into()));
    }
    let r = (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0);
    Ok(CorrelationResult { r, n, window: None })
}

pub fn pearson_series(x: &Series, y: &Series) -> Result<CorrelationResult> {
    pearson(&x.values, &y.values)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WindowCorrelation {
    /// Position of the window's first element.
    pub start: usize,
    /// `None` marks a window where one side had zero variance.
    pub r: Option<f64>,
}

/// Pearson `r` over every window `[i, i + w)`, advancing by `stride`.
pub fn sliding_window_corr(
    x: &[f64],
    y: &[f64],
    window: usize,
    stride: usize,
) -> Result<Vec<WindowCorrelation>> {
    if x.len() != y.len() {
        return Err(Error::InvalidArgument(format!(
            "series lengths differ: {} vs {}",
            x.len(),
            y.len()
        )));
    }
    if window < 2 {
        return Err(Error::InvalidArgument(format!("window must be >= 2, got {window}")));
    }
    if stride == 0 {
        return Err(Error::InvalidArgument("stride must be >= 1".into()));
    }
    if window > x.len() {
        return Err(Error::InvalidArgument(format!(
            "window {window} exceeds series length {}",
            x.len()
        )));
    }
    (0..=x.len() - window)
        .step_by(stride)
        .map(|start| {
            let end = start + window;
            match pearson(&x[start..end], &y[start..end]) {
                Ok(c) => Ok(WindowCorrelation {
                    start,
                    r: Some(c.r),
                }),
                Err(Error::DegenerateSeries(_)) => Ok(WindowCorrelation { start, r: None }),
                Err(e) => Err(e),
            }
        })
        .collect()
}

/// Per-position mean and population standard deviation across runs.
pub fn mean_std_across(runs: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<f64>)> {
    let len = runs
        .first()
        .map(Vec::len)
        .ok_or_else(|| Error::InvalidArgument("no runs to summarize".into()))?;
    if runs.iter().any(|r| r.len() != len) {
        return Err(Error::InvalidArgument("runs have different lengths".into()));
    }
    let k = runs.len() as f64;
    let mut mean = vec![0.0; len];
    let mut std = vec![0.0; len];
    for i in 0..len {
        let m = runs.iter().map(|r| r[i]).sum::<f64>() / k;
        let v = runs.iter().map(|r| (r[i] - m) * (r[i] - m)).sum::<f64>() / k;
        mean[i] = m;
        std[i] = v.sqrt();
    }
    Ok((mean, std))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_and_anti() {
        let x = [1.0, 2.0, 3.0];
        assert_eq!(pearson(&x, &x).unwrap().r, 1.0);
        assert_eq!(pearson(&x, &[3.0, 2.0, 1.0]).unwrap().r, -1.0);
    }

    #[test]
    fn degenerate_inputs() {
        assert!(matches!(
            pearson(&[1.0, 1.0], &[1.0, 2.0]),
            Err(Error::DegenerateSeries(_))
        ));
        assert!(pearson(&[1.0], &[1.0]).is_err());
        assert!(pearson(&[1.0, 2.0], &[1.0]).is_err());
    }

    #[test]
    fn whole_window_equals_global() {
        let x = [1.0, 4.0, 2.0, 8.0, 5.0];
        let y = [0.5, 1.0, 3.0, 2.0, 9.0];
        let w = sliding_window_corr(&x, &y, 5, 1).unwrap();
        assert_eq!(w.len(), 1);
        assert_eq!(w[0].r, Some(pearson(&x, &y).unwrap().r));
    }

    #[test]
    fn self_correlation_windows_are_one() {
        let x = [1.0, 4.0, 2.0, 8.0, 5.0, 7.0];
        let w = sliding_window_corr(&x, &x, 3, 1).unwrap();
        assert_eq!(w.len(), 4);
        assert!(w.iter().all(|c| (c.r.unwrap() - 1.0).abs() < 1e-15));
    }

    #[test]
    fn flat_window_is_a_gap() {
        let x = [1.0, 1.0, 1.0, 2.0];
        let y = [1.0, 2.0, 3.0, 4.0];
        let w = sliding_window_corr(&x, &y, 3, 1).unwrap();
        assert_eq!(w[0].r, None);
        assert!(w[1].r.is_some());
    }

    #[test]
    fn window_longer_than_series() {
        assert!(sliding_window_corr(&[1.0, 2.0], &[1.0, 2.0], 3, 1).is_err());
        assert!(sliding_window_corr(&[1.0, 2.0], &[1.0, 2.0], 1, 1).is_err());
    }

    #[test]
    fn stride_skips_windows() {
        let x: Vec<f64> = (0..10).map(|i| (i * i) as f64).collect();
        let w = sliding_window_corr(&x, &x, 4, 3).unwrap();
        assert_eq!(w.iter().map(|c| c.start).collect::<Vec<_>>(), vec![0, 3, 6]);
    }

    #[test]
    fn series_rejects_nan() {
        assert!(Series::new("x", vec![1.0, f64::NAN]).is_err());
    }

    #[test]
    fn two_run_std() {
        let (m, s) = mean_std_across(&[vec![1.0, 2.0], vec![3.0, 2.0]]).unwrap();
        assert_eq!(m, vec![2.0, 2.0]);
        assert_eq!(s, vec![1.0, 0.0]);
    }
}
