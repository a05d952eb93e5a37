//! Brute-force reference implementations shared by the integration tests.
//! Nothing here calls into the library's numeric code.

#![allow(dead_code)]

use plab_core::linalg::Matrix;
use plab_core::nn::MlpModel;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gauss(r: &mut ChaCha8Rng) -> f64 {
    // Box-Muller, kept local so the oracle does not share the library's sampler.
    let u1: f64 = r.random::<f64>().max(1e-300);
    let u2: f64 = r.random();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

pub fn random_matrix(r: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::new(rows, cols, (0..rows * cols).map(|_| gauss(r)).collect()).unwrap()
}

pub fn to_rows(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
}

pub fn matmul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let (n, k, m) = (a.len(), b.len(), b.first().map_or(0, Vec::len));
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for j in 0..m {
            let mut s = 0.0;
            for t in 0..k {
                s += a[i][t] * b[t][j];
            }
            out[i][j] = s;
        }
    }
    out
}

pub fn transpose(a: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let cols = a.first().map_or(0, Vec::len);
    (0..cols).map(|j| a.iter().map(|r| r[j]).collect()).collect()
}

pub fn max_abs(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dotv(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Inverse by Gauss-Jordan elimination with partial pivoting.
pub fn invert(a: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = a.len();
    let mut m: Vec<Vec<f64>> = a
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let mut row = r.clone();
            row.extend((0..n).map(|j| if i == j { 1.0 } else { 0.0 }));
            row
        })
        .collect();
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&x, &y| m[x][col].abs().total_cmp(&m[y][col].abs()))
            .unwrap();
        m.swap(col, piv);
        let p = m[col][col];
        assert!(p.abs() > 1e-300, "singular");
        for v in m[col].iter_mut() {
            *v /= p;
        }
        for r in 0..n {
            if r != col {
                let f = m[r][col];
                if f != 0.0 {
                    for c in 0..2 * n {
                        m[r][c] -= f * m[col][c];
                    }
                }
            }
        }
    }
    m.into_iter().map(|r| r[n..].to_vec()).collect()
}

/// Orthonormal basis of span(vectors) by twice-applied Gram-Schmidt.
pub fn orthonormal_basis(vectors: &[Vec<f64>], rel_tol: f64) -> Vec<Vec<f64>> {
    let scale = vectors.iter().map(|v| norm(v)).fold(0.0, f64::max);
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for v in vectors {
        let mut w = v.clone();
        for _ in 0..2 {
            for q in &basis {
                let c = dotv(&w, q);
                for (wi, qi) in w.iter_mut().zip(q) {
                    *wi -= c * qi;
                }
            }
        }
        let n = norm(&w);
        if n > rel_tol * scale {
            basis.push(w.iter().map(|x| x / n).collect());
        }
    }
    basis
}

/// Pseudoinverse of a PSD matrix `S` whose range is spanned by `span`:
/// `Q (Q^T S Q)^{-1} Q^T`.
pub fn psd_pinv_on_span(s: &[Vec<f64>], span: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let q = transpose(&orthonormal_basis(span, 1e-9)); // d x r
    let d = s.len();
    if q.first().map_or(true, Vec::is_empty) {
        return vec![vec![0.0; d]; d];
    }
    let inner = invert(&matmul(&matmul(&transpose(&q), s), &q));
    matmul(&matmul(&q, &inner), &transpose(&q))
}

pub struct NcOracle {
    pub means: Vec<Vec<f64>>,
    pub global: Vec<f64>,
    pub sigma_w: Vec<Vec<f64>>,
    pub sigma_b: Vec<Vec<f64>>,
    pub present: Vec<usize>,
}

/// Scatter matrices by explicit double loops over samples and coordinates.
pub fn scatter(features: &[Vec<f64>], labels: &[usize], c: usize) -> NcOracle {
    let n = features.len();
    let d = features[0].len();
    let mut counts = vec![0usize; c];
    let mut means = vec![vec![0.0; d]; c];
    let mut global = vec![0.0; d];
    for (x, &y) in features.iter().zip(labels) {
        counts[y] += 1;
        for j in 0..d {
            means[y][j] += x[j];
            global[j] += x[j];
        }
    }
    for k in 0..c {
        if counts[k] > 0 {
            for j in 0..d {
                means[k][j] /= counts[k] as f64;
            }
        }
    }
    for g in &mut global {
        *g /= n as f64;
    }
    let mut sigma_w = vec![vec![0.0; d]; d];
    for (x, &y) in features.iter().zip(labels) {
        for a in 0..d {
            for b in 0..d {
                sigma_w[a][b] += (x[a] - means[y][a]) * (x[b] - means[y][b]) / n as f64;
            }
        }
    }
    let mut sigma_b = vec![vec![0.0; d]; d];
    for k in 0..c {
        let w = counts[k] as f64 / n as f64;
        for a in 0..d {
            for b in 0..d {
                sigma_b[a][b] += w * (means[k][a] - global[a]) * (means[k][b] - global[b]);
            }
        }
    }
    let present = (0..c).filter(|&k| counts[k] > 0).collect();
    NcOracle {
        means,
        global,
        sigma_w,
        sigma_b,
        present,
    }
}

impl NcOracle {
    fn centered(&self, k: usize) -> Vec<f64> {
        self.means[k]
            .iter()
            .zip(&self.global)
            .map(|(m, g)| m - g)
            .collect()
    }

    pub fn nc1(&self, c: usize) -> f64 {
        let span: Vec<Vec<f64>> = self.present.iter().map(|&k| self.centered(k)).collect();
        let pinv = psd_pinv_on_span(&self.sigma_b, &span);
        let prod = matmul(&self.sigma_w, &pinv);
        (0..prod.len()).map(|i| prod[i][i]).sum::<f64>() / c as f64
    }

    pub fn nc2(&self) -> (f64, f64) {
        let cm: Vec<Vec<f64>> = self.present.iter().map(|&k| self.centered(k)).collect();
        let norms: Vec<f64> = cm.iter().map(|v| norm(v)).collect();
        let (mean, std) = mean_std(&norms);
        let k = cm.len();
        let mut cos = Vec::new();
        for i in 0..k {
            for j in 0..k {
                if i != j {
                    cos.push(dotv(&cm[i], &cm[j]) / (norms[i] * norms[j]));
                }
            }
        }
        let (_, cstd) = mean_std(&cos);
        let target = -1.0 / (k as f64 - 1.0);
        let dev = cos.iter().map(|c| (c - target).abs()).sum::<f64>() / cos.len() as f64;
        (std / mean, cstd + dev)
    }

    pub fn nc3(&self, w: &[Vec<f64>]) -> f64 {
        let m: Vec<Vec<f64>> = (0..w.len()).map(|k| self.centered(k)).collect();
        let wn = w.iter().flatten().map(|x| x * x).sum::<f64>().sqrt();
        let mn = m.iter().flatten().map(|x| x * x).sum::<f64>().sqrt();
        w.iter()
            .flatten()
            .zip(m.iter().flatten())
            .map(|(a, b)| (a / wn - b / mn).powi(2))
            .sum()
    }

    pub fn nc4(&self, features: &[Vec<f64>], logits: &[Vec<f64>]) -> f64 {
        let mut bad = 0;
        for (x, z) in features.iter().zip(logits) {
            let mut pred = 0;
            for j in 1..z.len() {
                if z[j] > z[pred] {
                    pred = j;
                }
            }
            let mut best = usize::MAX;
            let mut best_d = f64::INFINITY;
            for &k in &self.present {
                let d: f64 = x.iter().zip(&self.means[k]).map(|(a, b)| (a - b).powi(2)).sum();
                if d < best_d {
                    best_d = d;
                    best = k;
                }
            }
            if pred != best {
                bad += 1;
            }
        }
        bad as f64 / features.len() as f64
    }
}

/// Population mean and standard deviation.
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    (m, var.sqrt())
}

/// Pearson r straight from the textbook formula.
pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    sxy / (sxx * syy).sqrt()
}

/// Per-sample forward pass: `(logits, features)` for one input row.
pub fn forward_one(model: &MlpModel, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let layers = model.layers();
    let mut h = x.to_vec();
    let mut features = Vec::new();
    for (k, l) in layers.iter().enumerate() {
        let mut out = vec![0.0; l.out_dim()];
        for (o, v) in out.iter_mut().enumerate() {
            let mut s = l.bias[o];
            for i in 0..l.in_dim() {
                s += l.weight.get(o, i) * h[i];
            }
            *v = s;
        }
        if k + 1 < layers.len() {
            for v in &mut out {
                *v = v.max(0.0);
            }
            if k + 2 == layers.len() {
                features = out.clone();
            }
        }
        h = out;
    }
    if layers.len() == 1 {
        features = x.to_vec();
    }
    (h, features)
}

/// Mean cross-entropy computed sample by sample with log-sum-exp.
pub fn cross_entropy(logits: &[Vec<f64>], labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for (z, &y) in logits.iter().zip(labels) {
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - z[y];
    }
    total / labels.len() as f64
}

/// Random labelled features with every class present.
pub fn random_instance(
    r: &mut ChaCha8Rng,
    n: usize,
    d: usize,
    c: usize,
) -> (Vec<Vec<f64>>, Vec<usize>) {
    let centers: Vec<Vec<f64>> = (0..c).map(|_| (0..d).map(|_| 2.0 * gauss(r)).collect()).collect();
    let spread = 0.2 + r.random::<f64>();
    let mut labels: Vec<usize> = (0..n).map(|i| if i < c { i } else { r.random_range(0..c) }).collect();
    labels.rotate_left(r.random_range(0..n));
    let feats = labels
        .iter()
        .map(|&y| centers[y].iter().map(|m| m + spread * gauss(r)).collect())
        .collect();
    (feats, labels)
}
