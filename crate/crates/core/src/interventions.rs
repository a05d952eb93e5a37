//! Shrink-and-perturb reinitialization and the batch-wise NC1 penalty.

use log::debug;
use serde::{Deserialize, Serialize};

use crate::collapse::VANISHED_BETWEEN_CLASS;
use crate::error::{Error, Result};
use crate::linalg::{dot, sym_eig, symmetric_tol, Matrix, DEFAULT_RANK_TOL};
use crate::nn::MlpModel;
use crate::rng::{Purpose, RngStream};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShrinkPerturbParams {
    /// Shrink factor applied to every parameter.
    pub lambda: f64,
    /// Scale of the added `N(0, 2/fan_in)` noise.
    pub b: f64,
    pub seed: u64,
}

impl Default for ShrinkPerturbParams {
    fn default() -> Self {
        ShrinkPerturbParams {
            lambda: 0.6,
            b: 0.01,
            seed: 0,
        }
    }
}

impl ShrinkPerturbParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::InvalidArgument(format!(
                "shrink factor must be in [0, 1], got {}",
                self.lambda
            )));
        }
        if !(self.b >= 0.0 && self.b.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "noise scale must be >= 0, got {}",
                self.b
            )));
        }
        Ok(())
    }
}

/// `theta <- lambda * theta + b * eps`, `eps ~ N(0, 2/n)` with `n` the fan-in
/// of the parameter's layer. Biases are perturbed like weights.
pub fn shrink_and_perturb(model: &MlpModel, p: &ShrinkPerturbParams) -> Result<MlpModel> {
    p.validate()?;
    let mut out = model.clone();
    for (k, layer) in out.layers_mut().iter_mut().enumerate() {
        let std = (2.0 / layer.in_dim() as f64).sqrt();
        let mut rng = RngStream::new(p.seed, Purpose::Perturb, k as u64);
        for v in layer.weight.data_mut().iter_mut().chain(layer.bias.iter_mut()) {
            *v = p.lambda * *v + p.b * std * rng.standard_normal();
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Nc1RegConfig {
    pub weight: f64,
    pub min_classes_in_batch: usize,
}

impl Default for Nc1RegConfig {
    fn default() -> Self {
        Nc1RegConfig {
            weight: 0.05,
            min_classes_in_batch: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Nc1Penalty {
    pub penalty: f64,
    /// Gradient of `penalty` (unweighted) with respect to each feature row.
    pub grad_features: Matrix,
    /// Set when the batch lacked class diversity and the penalty was not applied.
    pub skipped: bool,
}

impl Nc1Penalty {
    fn skipped(shape: (usize, usize)) -> Self {
        Nc1Penalty {
            penalty: 0.0,
            grad_features: Matrix::zeros(shape.0, shape.1),
            skipped: true,
        }
    }
}

/// NC1 of a minibatch and its gradient with the between-class pseudoinverse
/// held fixed.
///
/// With `A` the `C x d` matrix of rows `sqrt(n_c/N) (mu_c - mu_G)`, we have
/// `Sigma_B = A^T A` and `Sigma_B^+ = (G^+ A)^T (G^+ A)` for the `C x C` Gram
/// matrix `G = A A^T`, so only a class-sized eigenproblem is solved. Writing
/// `r_i = x_i - mu_{y_i}`:
///
/// ```text
/// penalty  = 1/(N C) * sum_i |G^+ A r_i|^2
/// d/dx_i   = 2/(N C) * Sigma_B^+ r_i
/// ```
///
/// The class-mean terms of the derivative cancel because residuals sum to
/// zero within each class.
pub fn nc1_batch_loss(
    features: &Matrix,
    labels: &[usize],
    num_classes: usize,
    cfg: &Nc1RegConfig,
) -> Result<Nc1Penalty> {
    let (n, d) = features.shape();
    if labels.len() != n {
        return Err(Error::CountMismatch {
            images: n,
            labels: labels.len(),
        });
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
        return Err(Error::LabelOutOfRange {
            label: bad,
            num_classes,
        });
    }
    let mut counts = vec![0usize; num_classes];
    let mut means = Matrix::zeros(num_classes, d);
    let mut global = vec![0.0; d];
    for (i, &y) in labels.iter().enumerate() {
        counts[y] += 1;
        for ((m, g), &v) in means.row_mut(y).iter_mut().zip(global.iter_mut()).zip(features.row(i)) {
            *m += v;
            *g += v;
        }
    }
    let present = counts.iter().filter(|&&k| k > 0).count();
    if present < cfg.min_classes_in_batch.max(2) {
        debug!("NC1 penalty skipped: {present} classes in batch");
        return Ok(Nc1Penalty::skipped((n, d)));
    }
    let inv_n = 1.0 / n as f64;
    global.iter_mut().for_each(|v| *v *= inv_n);
    let mut factor = Matrix::zeros(num_classes, d);
    for c in 0..num_classes {
        if counts[c] == 0 {
            continue;
        }
        let inv = 1.0 / counts[c] as f64;
        let w = (counts[c] as f64 * inv_n).sqrt();
        for j in 0..d {
            let mu = means.get(c, j) * inv;
            means.set(c, j, mu);
            factor.set(c, j, w * (mu - global[j]));
        }
    }

    let gram = factor.matmul_transposed(&factor)?;
    let eig = sym_eig(&gram, symmetric_tol(&gram))?;
    if eig.lambda_max() < VANISHED_BETWEEN_CLASS {
        debug!("NC1 penalty skipped: between-class variance vanished");
        return Ok(Nc1Penalty::skipped((n, d)));
    }
    let gram_pinv = eig.pseudoinverse(DEFAULT_RANK_TOL);
    // Rows of `proj` span the retained range; Sigma_B^+ = proj^T proj.
    let proj = gram_pinv.matmul(&factor)?;

    let mut penalty = 0.0;
    let mut grad = Matrix::zeros(n, d);
    let scale = 2.0 * inv_n / num_classes as f64;
    let mut resid = vec![0.0; d];
    let mut coords = vec![0.0; num_classes];
    for (i, &y) in labels.iter().enumerate() {
        for ((r, &x), &m) in resid.iter_mut().zip(features.row(i)).zip(means.row(y)) {
            *r = x - m;
        }
        for (c, u) in coords.iter_mut().enumerate() {
            *u = dot(proj.row(c), &resid);
        }
        penalty += coords.iter().map(|u| u * u).sum::<f64>();
        let g = grad.row_mut(i);
        for (c, &u) in coords.iter().enumerate() {
            if u != 0.0 {
                for (gv, &pv) in g.iter_mut().zip(proj.row(c)) {
                    *gv += scale * u * pv;
                }
            }
        }
    }
    Ok(Nc1Penalty {
        penalty: penalty * inv_n / num_classes as f64,
        grad_features: grad,
        skipped: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::LinearLayer;

    #[test]
    fn identity_and_zeroing() {
        let m = MlpModel::new(6, &[5], 3, 2);
        let same = shrink_and_perturb(
            &m,
            &ShrinkPerturbParams {
                lambda: 1.0,
                b: 0.0,
                seed: 1,
            },
        )
        .unwrap();
        assert_eq!(same, m);
        let zero = shrink_and_perturb(
            &m,
            &ShrinkPerturbParams {
                lambda: 0.0,
                b: 0.0,
                seed: 1,
            },
        )
        .unwrap();
        assert!(zero
            .layers()
            .iter()
            .all(|l| l.weight.data().iter().chain(&l.bias).all(|&v| v == 0.0)));
    }

    #[test]
    fn perturbation_is_seeded() {
        let m = MlpModel::new(6, &[5], 3, 2);
        let p = ShrinkPerturbParams::default();
        assert_eq!(
            shrink_and_perturb(&m, &p).unwrap().param_hash(),
            shrink_and_perturb(&m, &p).unwrap().param_hash()
        );
        let q = ShrinkPerturbParams { seed: 9, ..p };
        assert_ne!(shrink_and_perturb(&m, &q).unwrap(), shrink_and_perturb(&m, &p).unwrap());
    }

    #[test]
    fn rejects_out_of_range_params() {
        let m = MlpModel::from_layers(vec![LinearLayer::zeros(2, 2)]).unwrap();
        let p = ShrinkPerturbParams {
            lambda: 1.5,
            ..Default::default()
        };
        assert!(shrink_and_perturb(&m, &p).is_err());
    }

    #[test]
    fn collapsed_batch_has_zero_penalty() {
        let x = Matrix::new(4, 2, vec![1.0, 0.0, 1.0, 0.0, 0.0, 2.0, 0.0, 2.0]).unwrap();
        let p = nc1_batch_loss(&x, &[0, 0, 1, 1], 2, &Nc1RegConfig::default()).unwrap();
        assert!(!p.skipped);
        assert_eq!(p.penalty, 0.0);
        assert!(p.grad_features.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn scalar_case_matches_hand_derivation() {
        // Means +-1, within variance 0.04, Sigma_B = 1, C = 2, N = 4:
        // penalty = 0.04 / 2, d/dx_i = 2/(N C) * (x_i - mu) * 1.
        let x = Matrix::new(4, 1, vec![1.2, 0.8, -1.2, -0.8]).unwrap();
        let p = nc1_batch_loss(&x, &[0, 0, 1, 1], 2, &Nc1RegConfig::default()).unwrap();
        assert!((p.penalty - 0.02).abs() < 1e-12);
        let expected = [0.2, -0.2, -0.2, 0.2].map(|r| 2.0 / 8.0 * r);
        for (g, e) in p.grad_features.data().iter().zip(expected) {
            assert!((g - e).abs() < 1e-12, "{g} vs {e}");
        }
    }

    #[test]
    fn single_class_batch_is_skipped() {
        let x = Matrix::new(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let p = nc1_batch_loss(&x, &[4, 4, 4], 10, &Nc1RegConfig::default()).unwrap();
        assert!(p.skipped);
        assert_eq!(p.penalty, 0.0);
    }

    #[test]
    fn min_classes_threshold_is_respected() {
        let x = Matrix::new(4, 1, vec![1.2, 0.8, -1.2, -0.8]).unwrap();
        let cfg = Nc1RegConfig {
            weight: 0.05,
            min_classes_in_batch: 3,
        };
        assert!(nc1_batch_loss(&x, &[0, 0, 1, 1], 3, &cfg).unwrap().skipped);
    }
}
