use super::{numel_of, Float, Tensor};
use crate::error::{Error, Result};

const PAD: u32 = u32::MAX;

#[derive(Debug, Clone)]
enum Rows {
    /// One source element per output (or zero padding).
    Gather(Vec<u32>),
    /// CSR rows of `(source, weight)` pairs.
    Weighted {
        offsets: Vec<usize>,
        index: Vec<u32>,
        weight: Vec<f64>,
    },
}

/// A fixed linear map `out[i] = Σ w · in[j]` with few terms per row.
///
/// Gathers, padding, crops, pooling, upsampling and bilinear resampling are
/// all instances; the tape differentiates them through [`SparseMap::transpose_apply`].
#[derive(Debug, Clone)]
pub struct SparseMap {
    in_shape: Vec<usize>,
    out_shape: Vec<usize>,
    rows: Rows,
}

impl SparseMap {
    /// `source[i]` is the flat input index feeding output `i`, or `None` for a zero.
    pub fn gather(
        in_shape: impl Into<Vec<usize>>,
        out_shape: impl Into<Vec<usize>>,
        source: impl IntoIterator<Item = Option<usize>>,
    ) -> Result<Self> {
        let (in_shape, out_shape) = (in_shape.into(), out_shape.into());
        let n_in = numel_of(&in_shape);
        let idx: Vec<u32> = source
            .into_iter()
            .map(|s| match s {
                Some(j) if j < n_in => Ok(j as u32),
                Some(j) => Err(Error::InvalidShape {
                    shape: in_shape.clone(),
                    reason: format!("gather index {j} out of range"),
                }),
                None => Ok(PAD),
            })
            .collect::<Result<_>>()?;
        if idx.len() != numel_of(&out_shape) {
            return Err(Error::InvalidShape {
                shape: out_shape,
                reason: format!("gather got {} indices", idx.len()),
            });
        }
        Ok(Self {
            in_shape,
            out_shape,
            rows: Rows::Gather(idx),
        })
    }

    /// One row of weighted taps per output element.
    pub fn weighted(
        in_shape: impl Into<Vec<usize>>,
        out_shape: impl Into<Vec<usize>>,
        rows: impl IntoIterator<Item = Vec<(usize, f64)>>,
    ) -> Result<Self> {
        let (in_shape, out_shape) = (in_shape.into(), out_shape.into());
        let n_in = numel_of(&in_shape);
        let mut offsets = vec![0];
        let (mut index, mut weight) = (Vec::new(), Vec::new());
        for row in rows {
            for (j, w) in row {
                if j >= n_in {
                    return Err(Error::InvalidShape {
                        shape: in_shape,
                        reason: format!("weighted index {j} out of range"),
                    });
                }
                index.push(j as u32);
                weight.push(w);
            }
            offsets.push(index.len());
        }
        if offsets.len() - 1 != numel_of(&out_shape) {
            return Err(Error::InvalidShape {
                shape: out_shape,
                reason: format!("weighted map got {} rows", offsets.len() - 1),
            });
        }
        Ok(Self {
            in_shape,
            out_shape,
            rows: Rows::Weighted {
                offsets,
                index,
                weight,
            },
        })
    }

    pub fn in_shape(&self) -> &[usize] {
        &self.in_shape
    }

    pub fn out_shape(&self) -> &[usize] {
        &self.out_shape
    }

    fn check_input<T: Float>(&self, x: &Tensor<T>) -> Result<()> {
        if x.shape() != self.in_shape.as_slice() {
            return Err(Error::ShapeMismatch {
                op: "sparse_map",
                lhs: self.in_shape.clone(),
                rhs: x.shape().to_vec(),
            });
        }
        Ok(())
    }

    pub fn apply<T: Float>(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let xd = x.data();
        let out = match &self.rows {
            Rows::Gather(idx) => idx
                .iter()
                .map(|&j| if j == PAD { T::zero() } else { xd[j as usize] })
                .collect(),
            Rows::Weighted {
                offsets,
                index,
                weight,
            } => offsets
                .windows(2)
                .map(|w| {
                    let acc: f64 = (w[0]..w[1])
                        .map(|e| weight[e] * xd[index[e] as usize].to_wide())
                        .sum();
                    T::from_wide(acc)
                })
                .collect(),
        };
        Ok(Tensor::from_parts(self.out_shape.clone(), out))
    }

    /// Adjoint map: scatter-add `g` (output-shaped) back onto the input shape.
    pub fn transpose_apply<T: Float>(&self, g: &Tensor<T>) -> Result<Tensor<T>> {
        if g.shape() != self.out_shape.as_slice() {
            return Err(Error::ShapeMismatch {
                op: "sparse_map_transpose",
                lhs: self.out_shape.clone(),
                rhs: g.shape().to_vec(),
            });
        }
        let gd = g.data();
        let mut acc = vec![0f64; numel_of(&self.in_shape)];
        match &self.rows {
            Rows::Gather(idx) => {
                for (i, &j) in idx.iter().enumerate() {
                    if j != PAD {
                        acc[j as usize] += gd[i].to_wide();
                    }
                }
            }
            Rows::Weighted {
                offsets,
                index,
                weight,
            } => {
                for (i, w) in offsets.windows(2).enumerate() {
                    let gi = gd[i].to_wide();
                    for e in w[0]..w[1] {
                        acc[index[e] as usize] += weight[e] * gi;
                    }
                }
            }
        }
        Ok(Tensor::from_parts(
            self.in_shape.clone(),
            acc.into_iter().map(T::from_wide).collect(),
        ))
    }
}
