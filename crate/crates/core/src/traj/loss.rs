//! Masked cross-frame alignment of reduced features.

use std::sync::Arc;

use super::boxes::GridBox;
use super::mask::SemanticMask;
use crate::error::{Error, Result};
use crate::tensor::{Float, SparseMap, Tensor, Var};

/// Weighted map from `features: [f, M, H, W]` to the frame-`frame` crop of
/// `bx`, bilinearly resampled (half-pixel centers, edge clamped) to
/// `[M, out.0, out.1]`. Equal sizes reduce to a plain crop.
pub fn crop_resample_map(
    shape: &[usize],
    frame: usize,
    bx: &GridBox,
    out: (usize, usize),
) -> Result<SparseMap> {
    let [f, m, h, w] = *shape else {
        return Err(Error::InvalidShape {
            shape: shape.to_vec(),
            reason: "expected [frames, channels, height, width]".into(),
        });
    };
    if frame >= f || bx.x1 > w || bx.y1 > h {
        return Err(Error::Trajectory(format!(
            "box {bx:?} on frame {frame} falls outside the {h}x{w} grid of {f} frames"
        )));
    }
    let (oh, ow) = out;
    let taps = |o: usize, n_out: usize, n_in: usize| -> [(usize, f64); 2] {
        if n_out == n_in {
            return [(o, 1.0), (o, 0.0)];
        }
        let s = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(n_in - 1);
        let frac = s - i0 as f64;
        [(i0, 1.0 - frac), (i1, frac)]
    };
    let mut rows = Vec::with_capacity(m * oh * ow);
    for c in 0..m {
        for oy in 0..oh {
            let ty = taps(oy, oh, bx.height());
            for ox in 0..ow {
                let tx = taps(ox, ow, bx.width());
                let mut row = Vec::with_capacity(4);
                for &(yy, wy) in &ty {
                    for &(xx, wx) in &tx {
                        let wgt = wy * wx;
                        if wgt != 0.0 {
                            let idx = ((frame * m + c) * h + bx.y0 + yy) * w + bx.x0 + xx;
                            row.push((idx, wgt));
                        }
                    }
                }
                rows.push(row);
            }
        }
    }
    SparseMap::weighted(shape.to_vec(), [m, oh, ow], rows)
}

/// Contribution of one `(group, frame)` pair.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignmentTerm {
    pub group: usize,
    pub frame: usize,
    /// Cells where both masks are foreground after registration.
    pub overlap: usize,
    pub value: f64,
}

/// `Σ_i Σ_{j≥2} ‖ M_1 ⊙ M_j ⊙ (F_j[B_j] − sg(F_1[B_1])) ‖²`.
///
/// `boxes[i][j]` and `masks[i][j]` index group `i`, frame `j` (0-based).
/// Frame-`j` crops and masks are registered onto the frame-1 crop shape
/// (bilinear for features, nearest for masks). Frame 1 is a constant.
pub fn alignment_loss<T: Float>(
    features: &Var<T>,
    boxes: &[Vec<GridBox>],
    masks: &[Vec<SemanticMask>],
) -> Result<(Var<T>, Vec<AlignmentTerm>)> {
    let shape = features.shape().to_vec();
    let f = shape[0];
    if boxes.len() != masks.len() {
        return Err(Error::Trajectory("boxes and masks disagree on group count".into()));
    }
    let mut total: Option<Var<T>> = None;
    let mut terms = Vec::new();
    for (i, (gb, gm)) in boxes.iter().zip(masks).enumerate() {
        if gb.len() != f || gm.len() != f {
            return Err(Error::Trajectory(format!(
                "group {i} needs {f} boxes and masks, got {} and {}",
                gb.len(),
                gm.len()
            )));
        }
        let b1 = gb[0];
        let out = (b1.height(), b1.width());
        let anchor = crop_resample_map(&shape, 0, &b1, out)?.apply(features.value())?;
        let anchor = Var::constant(anchor);
        for j in 1..f {
            let mask = registered_mask(&gm[0], &gm[j], out)?;
            let overlap = mask.count();
            let weight: Tensor<T> = mask.to_tensor()?;
            let crop = features.sparse(&Arc::new(crop_resample_map(&shape, j, &gb[j], out)?))?;
            let term = crop.sub(&anchor)?.mul(&Var::constant(weight))?.square()?.sum_all()?;
            terms.push(AlignmentTerm {
                group: i,
                frame: j,
                overlap,
                value: term.value().item()?.to_wide(),
            });
            total = Some(match total {
                Some(t) => t.add(&term)?,
                None => term,
            });
        }
    }
    let total = match total {
        Some(t) => t,
        None => Var::constant(Tensor::scalar(T::zero())),
    };
    Ok((total, terms))
}

/// `M_1 ⊙ M_j` on the frame-1 crop grid.
pub fn registered_mask(m1: &SemanticMask, mj: &SemanticMask, out: (usize, usize)) -> Result<SemanticMask> {
    if (m1.height, m1.width) != out {
        return Err(Error::Trajectory(format!(
            "frame-1 mask is {}x{}, crop is {}x{}",
            m1.height, m1.width, out.0, out.1
        )));
    }
    let mj = mj.resample(out.0, out.1);
    Ok(SemanticMask {
        height: out.0,
        width: out.1,
        values: m1.values.iter().zip(&mj.values).map(|(&a, &b)| a && b).collect(),
        degenerate: m1.degenerate || mj.degenerate,
    })
}
