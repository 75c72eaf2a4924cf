//! Channel PCA of attention queries, fitted jointly over every frame's tokens.

use log::debug;

use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor, Var};

/// Eigenvalues below `RANK_TOL · λ_max` count as numerically zero.
const RANK_TOL: f64 = 1e-10;

/// Eigen-decomposition of a symmetric `n × n` row-major matrix by cyclic
/// Jacobi rotations. Returns `(values, vectors)` with `vectors[k]` the unit
/// eigenvector of `values[k]`, sorted by decreasing eigenvalue.
pub fn symmetric_eigen(a: &[f64], n: usize) -> (Vec<f64>, Vec<Vec<f64>>) {
    assert_eq!(a.len(), n * n, "symmetric_eigen expects an n×n matrix");
    let mut m = a.to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let scale: f64 = m.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[i * n + j] * m[i * n + j])
            .sum::<f64>()
            .sqrt();
        if off <= 1e-15 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p * n + q];
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let (app, aqq) = (m[p * n + p], m[q * n + q]);
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (mkp, mkq) = (m[k * n + p], m[k * n + q]);
                    m[k * n + p] = c * mkp - s * mkq;
                    m[k * n + q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let (mpk, mqk) = (m[p * n + k], m[q * n + k]);
                    m[p * n + k] = c * mpk - s * mqk;
                    m[q * n + k] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[k * n + p], v[k * n + q]);
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| m[b * n + b].total_cmp(&m[a * n + a]).then(a.cmp(&b)));
    let values = order.iter().map(|&k| m[k * n + k]).collect();
    let vectors = order
        .iter()
        .map(|&k| (0..n).map(|i| v[i * n + k]).collect())
        .collect();
    (values, vectors)
}

/// Fitted projection `x ↦ basis · (x − mean)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PcaBasis {
    /// `[M, C]`; rows orthonormal except zero rows past the numerical rank.
    pub basis: Tensor<f64>,
    /// `[C]`.
    pub mean: Tensor<f64>,
    /// Explained variance per component, non-increasing.
    pub variances: Vec<f64>,
    pub rank: usize,
}

impl PcaBasis {
    /// Fit `m` components to the rows of `[.., C]` tokens.
    pub fn fit<T: Float>(tokens: &Tensor<T>, m: usize) -> Result<Self> {
        let c = *tokens.shape().last().expect("non-empty shape");
        let rows = tokens.numel() / c;
        if m == 0 {
            return Err(Error::Config("pca_dim must be >= 1".into()));
        }
        if rows == 0 {
            return Err(Error::InvalidShape {
                shape: tokens.shape().to_vec(),
                reason: "PCA needs at least one token".into(),
            });
        }
        let x = tokens.to_f64_vec();
        let mut mean = vec![0.0; c];
        for r in 0..rows {
            for (k, mk) in mean.iter_mut().enumerate() {
                *mk += x[r * c + k];
            }
        }
        mean.iter_mut().for_each(|v| *v /= rows as f64);
        let mut cov = vec![0.0; c * c];
        for r in 0..rows {
            let row = &x[r * c..(r + 1) * c];
            for i in 0..c {
                let di = row[i] - mean[i];
                for j in i..c {
                    cov[i * c + j] += di * (row[j] - mean[j]);
                }
            }
        }
        for i in 0..c {
            for j in i..c {
                let v = cov[i * c + j] / rows as f64;
                cov[i * c + j] = v;
                cov[j * c + i] = v;
            }
        }
        let (values, vectors) = symmetric_eigen(&cov, c);
        let top = values.first().copied().unwrap_or(0.0).max(0.0);
        let rank = values.iter().filter(|&&v| v > RANK_TOL * top && v > 0.0).count();
        let keep = m.min(rank);
        if keep < m {
            debug!("PCA requested {m} components but the data has rank {rank} (C={c}); zero-padding");
        }
        let mut basis = vec![0.0; m * c];
        let mut variances = vec![0.0; m];
        for k in 0..keep {
            let mut vec = vectors[k].clone();
            let lead = vec
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()).then(b.0.cmp(&a.0)))
                .map(|(i, _)| i)
                .unwrap_or(0);
            if vec[lead] < 0.0 {
                vec.iter_mut().for_each(|v| *v = -*v);
            }
            basis[k * c..(k + 1) * c].copy_from_slice(&vec);
            variances[k] = values[k].max(0.0);
        }
        Ok(Self {
            basis: Tensor::new([m, c], basis)?,
            mean: Tensor::new([c], mean)?,
            variances,
            rank: keep,
        })
    }

    pub fn components(&self) -> usize {
        self.basis.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.basis.shape()[1]
    }

    /// `[.., C]` → `[.., M]`; basis and mean enter as constants.
    pub fn project_var<T: Float>(&self, x: &Var<T>) -> Result<Var<T>> {
        let basis_t: Tensor<T> = self.basis.cast::<T>().permute(&[1, 0])?;
        x.sub(&Var::constant(self.mean.cast()))?
            .matmul(&Var::constant(basis_t))
    }

    pub fn project<T: Float>(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.project_var(&Var::constant(x.clone()))?.into_value())
    }

    /// `[.., M]` → `[.., C]`.
    pub fn reconstruct<T: Float>(&self, y: &Tensor<T>) -> Result<Tensor<T>> {
        y.matmul(&self.basis.cast())?.add(&self.mean.cast())
    }
}

/// Reduced query features of one site: `[f, M, H', W']`.
#[derive(Clone, Debug)]
pub struct ReducedFeature<T: Float = f32> {
    pub features: Var<T>,
    pub basis: Option<PcaBasis>,
}

/// Token features `[f, H'·W', C]` → `[f, M, H', W']` under `basis` (or the
/// raw channels when `basis` is `None`).
pub fn reduce_tokens<T: Float>(
    tokens: &Var<T>,
    basis: Option<&PcaBasis>,
    grid: (usize, usize),
) -> Result<Var<T>> {
    let [f, n, _] = *tokens.shape() else {
        return Err(Error::InvalidShape {
            shape: tokens.shape().to_vec(),
            reason: "expected [frames, tokens, channels]".into(),
        });
    };
    if n != grid.0 * grid.1 {
        return Err(Error::InvalidShape {
            shape: tokens.shape().to_vec(),
            reason: format!("{n} tokens do not tile a {}x{} grid", grid.0, grid.1),
        });
    }
    let y = match basis {
        Some(b) => b.project_var(tokens)?,
        None => tokens.clone(),
    };
    let m = y.shape()[2];
    y.permute(&[0, 2, 1])?.reshape([f, m, grid.0, grid.1])
}

/// Fit a joint basis over all frames of `queries: [f, tokens, C]` and reduce.
pub fn pca_reduce<T: Float>(queries: &Var<T>, m: usize, grid: (usize, usize)) -> Result<ReducedFeature<T>> {
    let basis = PcaBasis::fit(queries.value(), m)?;
    Ok(ReducedFeature {
        features: reduce_tokens(queries, Some(&basis), grid)?,
        basis: Some(basis),
    })
}
