//! Scatter statistics of last-layer features and the four neural-collapse
//! metrics.
//!
//! * NC1 `Tr(Sigma_W Sigma_B^+) / C`: within-class variability relative to
//!   between-class spread. Lower is more collapsed.
//! * NC2: how far the centered class means are from a simplex ETF, reported as
//!   the coefficient of variation of their norms and a cosine deviation.
//! * NC3: distance between the normalized classifier and the normalized
//!   centered class-mean matrix (self-duality).
//! * NC4: disagreement between the classifier and the nearest-class-center rule.
//!
//! Covariances use the population `1/N` normalization. Classes with no samples
//! are ignored by NC2 and NC4 and contribute zero rows to the class-mean matrix.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{sym_eig, symmetric_tol, Matrix, DEFAULT_RANK_TOL};

/// `lambda_max(Sigma_B)` below this means NC1 is undefined.
pub const VANISHED_BETWEEN_CLASS: f64 = 1e-14;

/// Smallest centered class-mean norm accepted by NC2.
pub const MIN_MEAN_NORM: f64 = 1e-14;

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBatch {
    features: Matrix,
    labels: Vec<usize>,
    num_classes: usize,
}

impl FeatureBatch {
    pub fn new(features: Matrix, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if features.rows() == 0 || features.cols() == 0 {
            return Err(Error::EmptyDataset);
        }
        if labels.len() != features.rows() {
            return Err(Error::CountMismatch {
                images: features.rows(),
                labels: labels.len(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                num_classes,
            });
        }
        Ok(FeatureBatch {
            features,
            labels,
            num_classes,
        })
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScatterStats {
    /// `C x d`; rows of empty classes are zero.
    pub class_means: Matrix,
    pub global_mean: Vec<f64>,
    pub sigma_w: Matrix,
    pub sigma_b: Matrix,
    pub class_counts: Vec<usize>,
}

impl ScatterStats {
    pub fn num_classes(&self) -> usize {
        self.class_counts.len()
    }

    pub fn dim(&self) -> usize {
        self.global_mean.len()
    }

    pub fn nonempty_classes(&self) -> Vec<usize> {
        (0..self.num_classes())
            .filter(|&c| self.class_counts[c] > 0)
            .collect()
    }

    /// `C x d` matrix whose rows are `mu_c - mu_G` (zero for empty classes).
    pub fn centered_means(&self) -> Matrix {
        let mut m = Matrix::zeros(self.num_classes(), self.dim());
        for c in self.nonempty_classes() {
            for ((o, &mu), &g) in m
                .row_mut(c)
                .iter_mut()
                .zip(self.class_means.row(c))
                .zip(&self.global_mean)
            {
                *o = mu - g;
            }
        }
        m
    }
}

/// Class means, global mean, and the within/between-class covariances.
///
/// Two passes: means first, then centered outer products.
pub fn accumulate_stats(batch: &FeatureBatch) -> Result<ScatterStats> {
    let x = batch.features();
    let (n, d) = x.shape();
    let c = batch.num_classes();
    let mut counts = vec![0usize; c];
    let mut means = Matrix::zeros(c, d);
    let mut global = vec![0.0; d];
    for (i, &y) in batch.labels().iter().enumerate() {
        counts[y] += 1;
        for ((m, g), &v) in means.row_mut(y).iter_mut().zip(global.iter_mut()).zip(x.row(i)) {
            *m += v;
            *g += v;
        }
    }
    let found = counts.iter().filter(|&&k| k > 0).count();
    if found < 2 {
        return Err(Error::TooFewClasses { found });
    }
    for (k, &cnt) in counts.iter().enumerate() {
        if cnt > 0 {
            let inv = 1.0 / cnt as f64;
            means.row_mut(k).iter_mut().for_each(|v| *v *= inv);
        }
    }
    let inv_n = 1.0 / n as f64;
    global.iter_mut().for_each(|v| *v *= inv_n);

    let mut resid = x.clone();
    for (i, &y) in batch.labels().iter().enumerate() {
        for (r, &m) in resid.row_mut(i).iter_mut().zip(means.row(y)) {
            *r -= m;
        }
    }
    let mut sigma_w = resid.transposed_matmul(&resid)?;
    sigma_w.scale(inv_n);

    let mut weighted = Matrix::zeros(c, d);
    let mut centered = Matrix::zeros(c, d);
    for k in 0..c {
        if counts[k] == 0 {
            continue;
        }
        let w = counts[k] as f64 * inv_n;
        for j in 0..d {
            let v = means.get(k, j) - global[j];
            centered.set(k, j, v);
            weighted.set(k, j, w * v);
        }
    }
    let sigma_b = weighted.transposed_matmul(&centered)?;
    // Round-off can leave tiny asymmetries; average them away.
    let sigma_b = symmetrize(sigma_b);

    Ok(ScatterStats {
        class_means: means,
        global_mean: global,
        sigma_w,
        sigma_b,
        class_counts: counts,
    })
}

fn symmetrize(mut m: Matrix) -> Matrix {
    let n = m.rows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m.get(i, j) + m.get(j, i));
            m.set(i, j, v);
            m.set(j, i, v);
        }
    }
    m
}

/// `Tr(Sigma_W Sigma_B^+) / C` with the default rank tolerance.
pub fn nc1(stats: &ScatterStats) -> Result<f64> {
    nc1_with_tol(stats, DEFAULT_RANK_TOL)
}

pub fn nc1_with_tol(stats: &ScatterStats, rank_tol: f64) -> Result<f64> {
    let eig = sym_eig(&stats.sigma_b, symmetric_tol(&stats.sigma_b))?;
    let lambda_max = eig.lambda_max();
    if lambda_max < VANISHED_BETWEEN_CLASS {
        return Err(Error::VanishedBetweenClass { lambda_max });
    }
    let pinv = eig.pseudoinverse(rank_tol);
    // Tr(A B) = sum_ij A_ij B_ji, and B is symmetric.
    let tr: f64 = stats
        .sigma_w
        .data()
        .iter()
        .zip(pinv.data())
        .map(|(a, b)| a * b)
        .sum();
    let value = tr / stats.num_classes() as f64;
    Ok(clamp_round_off(value))
}

pub(crate) fn clamp_round_off(value: f64) -> f64 {
    if value < 0.0 {
        if value < -1e-10 {
            warn!("NC1 evaluated to {value:e}; clamping to 0");
        } else {
            log::debug!("NC1 round-off {value:e} clamped to 0");
        }
        0.0
    } else {
        value
    }
}

/// `(norm_cv, angle_dev)` for the centered class means of nonempty classes.
///
/// `norm_cv` is std/mean of `||mu_c - mu_G||`. `angle_dev` is the std of the
/// pairwise cosines plus their mean absolute deviation from `-1/(K-1)`, where
/// `K` counts nonempty classes.
pub fn nc2(stats: &ScatterStats) -> Result<(f64, f64)> {
    let present = stats.nonempty_classes();
    if present.len() < 2 {
        return Err(Error::TooFewClasses {
            found: present.len(),
        });
    }
    let centered = stats.centered_means();
    let norms: Vec<f64> = present
        .iter()
        .map(|&c| centered.row(c).iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    if let Some(&tiny) = norms.iter().find(|&&v| v < MIN_MEAN_NORM) {
        return Err(Error::DegenerateNorm {
            what: "centered class mean",
            norm: tiny,
        });
    }
    let (mean_norm, std_norm) = mean_std(&norms);
    let norm_cv = std_norm / mean_norm;

    let mut cosines = Vec::with_capacity(present.len() * (present.len() - 1) / 2);
    for a in 0..present.len() {
        for b in (a + 1)..present.len() {
            let dot: f64 = centered
                .row(present[a])
                .iter()
                .zip(centered.row(present[b]))
                .map(|(x, y)| x * y)
                .sum();
            cosines.push(dot / (norms[a] * norms[b]));
        }
    }
    let target = -1.0 / (present.len() as f64 - 1.0);
    let (_, std_cos) = mean_std(&cosines);
    let shift = cosines.iter().map(|c| (c - target).abs()).sum::<f64>() / cosines.len() as f64;
    Ok((norm_cv, std_cos + shift))
}

/// `|| W/||W||_F - M/||M||_F ||_F^2` with `M` the centered class-mean matrix.
pub fn nc3(stats: &ScatterStats, classifier_weight: &Matrix) -> Result<f64> {
    let centered = stats.centered_means();
    if classifier_weight.shape() != centered.shape() {
        return Err(Error::Shape {
            op: "nc3",
            left: classifier_weight.shape(),
            right: centered.shape(),
        });
    }
    let wn = classifier_weight.frobenius_norm();
    if wn == 0.0 {
        return Err(Error::DegenerateNorm {
            what: "classifier weight",
            norm: wn,
        });
    }
    let mn = centered.frobenius_norm();
    if mn == 0.0 {
        return Err(Error::DegenerateNorm {
            what: "centered class-mean matrix",
            norm: mn,
        });
    }
    Ok(classifier_weight
        .data()
        .iter()
        .zip(centered.data())
        .map(|(w, m)| {
            let d = w / wn - m / mn;
            d * d
        })
        .sum())
}

/// Nearest class mean among nonempty classes; ties go to the smaller index.
pub fn nearest_class_center(stats: &ScatterStats, x: &[f64]) -> usize {
    let mut best = usize::MAX;
    let mut best_dist = f64::INFINITY;
    for c in stats.nonempty_classes() {
        let dist: f64 = stats
            .class_means
            .row(c)
            .iter()
            .zip(x)
            .map(|(m, v)| (v - m) * (v - m))
            .sum();
        if dist < best_dist {
            best_dist = dist;
            best = c;
        }
    }
    best
}

/// Fraction of rows where the argmax logit differs from the nearest class
/// center of the feature vector.
pub fn nc4(stats: &ScatterStats, features: &Matrix, logits: &Matrix) -> Result<f64> {
    if features.rows() != logits.rows() {
        return Err(Error::Shape {
            op: "nc4",
            left: features.shape(),
            right: logits.shape(),
        });
    }
    if features.cols() != stats.dim() {
        return Err(Error::Shape {
            op: "nc4",
            left: features.shape(),
            right: stats.class_means.shape(),
        });
    }
    if features.rows() == 0 {
        return Err(Error::EmptyDataset);
    }
    let predicted = logits.argmax_rows();
    let mismatches = predicted
        .iter()
        .enumerate()
        .filter(|&(i, &p)| p != nearest_class_center(stats, features.row(i)))
        .count();
    Ok(mismatches as f64 / features.rows() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CollapseReport {
    pub nc1: f64,
    pub nc2_norm_cv: f64,
    pub nc2_angle_dev: f64,
    pub nc3: f64,
    pub nc4_mismatch: f64,
}

impl CollapseReport {
    pub fn compute(
        batch: &FeatureBatch,
        classifier_weight: &Matrix,
        logits: &Matrix,
    ) -> Result<Self> {
        let stats = accumulate_stats(batch)?;
        let nc1 = nc1(&stats)?;
        let (nc2_norm_cv, nc2_angle_dev) = nc2(&stats)?;
        let nc3 = nc3(&stats, classifier_weight)?;
        let nc4_mismatch = nc4(&stats, batch.features(), logits)?;
        Ok(CollapseReport {
            nc1,
            nc2_norm_cv,
            nc2_angle_dev,
            nc3,
            nc4_mismatch,
        })
    }
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch(rows: &[&[f64]], labels: &[usize], c: usize) -> FeatureBatch {
        let m = Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap();
        FeatureBatch::new(m, labels.to_vec(), c).unwrap()
    }

    #[test]
    fn single_points_have_no_within_scatter() {
        let s = accumulate_stats(&batch(&[&[1.0, 2.0], &[-1.0, 0.0]], &[0, 1], 2)).unwrap();
        assert!(s.sigma_w.data().iter().all(|&v| v == 0.0));
        let eig = sym_eig(&s.sigma_b, 1e-12).unwrap();
        assert!(eig.values[0] > 0.0);
        assert!(eig.values[1].abs() < 1e-15);
    }

    #[test]
    fn identical_features_rejected_downstream() {
        let s = accumulate_stats(&batch(&[&[1.0], &[1.0], &[1.0]], &[0, 1, 1], 2)).unwrap();
        assert!(matches!(nc1(&s), Err(Error::VanishedBetweenClass { .. })));
    }

    #[test]
    fn one_class_rejected() {
        let r = accumulate_stats(&batch(&[&[1.0], &[2.0]], &[1, 1], 3));
        assert!(matches!(r, Err(Error::TooFewClasses { found: 1 })));
    }

    #[test]
    fn perfect_collapse_is_zero() {
        let s = accumulate_stats(&batch(
            &[&[1.0, 0.0], &[1.0, 0.0], &[0.0, 3.0], &[0.0, 3.0]],
            &[0, 0, 1, 1],
            2,
        ))
        .unwrap();
        assert_eq!(nc1(&s).unwrap(), 0.0);
    }

    #[test]
    fn scalar_two_class_case() {
        // Means +-1, within-class variance 0.04, equal counts.
        let s = accumulate_stats(&batch(
            &[&[1.2], &[0.8], &[-1.2], &[-0.8]],
            &[0, 0, 1, 1],
            2,
        ))
        .unwrap();
        assert!((s.sigma_w.get(0, 0) - 0.04).abs() < 1e-15);
        assert!((s.sigma_b.get(0, 0) - 1.0).abs() < 1e-15);
        assert!((nc1(&s).unwrap() - 0.02).abs() < 1e-12);
    }

    #[test]
    fn simplex_etf_has_zero_nc2() {
        let r3 = 3f64.sqrt() / 2.0;
        let s = accumulate_stats(&batch(
            &[&[1.0, 0.0], &[-0.5, r3], &[-0.5, -r3]],
            &[0, 1, 2],
            3,
        ))
        .unwrap();
        let (cv, ang) = nc2(&s).unwrap();
        assert!(cv.abs() < 1e-10, "{cv}");
        assert!(ang.abs() < 1e-10, "{ang}");
    }

    #[test]
    fn antipodal_pair_has_zero_nc2() {
        let s = accumulate_stats(&batch(&[&[2.0, 1.0], &[-2.0, -1.0]], &[0, 1], 2)).unwrap();
        let (cv, ang) = nc2(&s).unwrap();
        assert!(cv.abs() < 1e-15);
        assert!(ang.abs() < 1e-15);
    }

    #[test]
    fn nc2_rejects_mean_at_center() {
        let s = accumulate_stats(&batch(
            &[&[1.0], &[-1.0], &[0.0]],
            &[0, 1, 2],
            3,
        ))
        .unwrap();
        assert!(matches!(nc2(&s), Err(Error::DegenerateNorm { .. })));
    }

    #[test]
    fn nc3_self_dual_and_opposite() {
        let s = accumulate_stats(&batch(
            &[&[1.0, 0.5], &[-0.3, 2.0], &[0.0, -1.0]],
            &[0, 1, 2],
            3,
        ))
        .unwrap();
        let m = s.centered_means();
        assert!(nc3(&s, &m.scaled(7.5)).unwrap() < 1e-15);
        assert!((nc3(&s, &m.scaled(-1.0)).unwrap() - 4.0).abs() < 1e-12);
        assert!(nc3(&s, &Matrix::zeros(3, 2)).is_err());
        assert!(nc3(&s, &Matrix::zeros(2, 2)).is_err());
    }

    #[test]
    fn nc4_self_agreement_and_constant_classifier() {
        let b = batch(
            &[&[0.0, 0.1], &[0.1, 0.0], &[5.0, 5.1], &[5.1, 5.0]],
            &[0, 0, 1, 1],
            2,
        );
        let s = accumulate_stats(&b).unwrap();
        let mut ncc_logits = Matrix::zeros(4, 2);
        for i in 0..4 {
            ncc_logits.set(i, nearest_class_center(&s, b.features().row(i)), 1.0);
        }
        assert_eq!(nc4(&s, b.features(), &ncc_logits).unwrap(), 0.0);
        let mut constant = Matrix::zeros(4, 2);
        for i in 0..4 {
            constant.set(i, 1, 3.0);
        }
        assert_eq!(nc4(&s, b.features(), &constant).unwrap(), 0.5);
    }

    #[test]
    fn ncc_ties_go_to_smaller_class() {
        let s = accumulate_stats(&batch(&[&[-1.0], &[1.0]], &[0, 1], 2)).unwrap();
        assert_eq!(nearest_class_center(&s, &[0.0]), 0);
    }
}
