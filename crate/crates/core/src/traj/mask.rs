//! Salient points, cosine similarity maps and the two-cluster mask split.

use log::warn;

use super::boxes::GridBox;
use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

/// Guards cosine similarity against zero-norm vectors.
pub const COSINE_EPS: f64 = 1e-8;
/// Similarity maps with a value range below this are treated as flat.
pub const FLAT_RANGE: f64 = 1e-6;

/// Grid coordinate `(y, x)`.
pub type Point = (usize, usize);

/// Binary mask over a box crop, row-major `[height, width]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SemanticMask {
    pub height: usize,
    pub width: usize,
    pub values: Vec<bool>,
    /// The similarity map was flat and the mask defaulted to all-ones.
    pub degenerate: bool,
}

impl SemanticMask {
    pub fn ones(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            values: vec![true; height * width],
            degenerate: false,
        }
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.values[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.values.iter().filter(|&&v| v).count()
    }

    /// Nearest-neighbour resample to `height × width`.
    pub fn resample(&self, height: usize, width: usize) -> Self {
        if (height, width) == (self.height, self.width) {
            return self.clone();
        }
        let values = (0..height * width)
            .map(|i| {
                let (y, x) = (i / width, i % width);
                let sy = ((y as f64 + 0.5) * self.height as f64 / height as f64).floor() as usize;
                let sx = ((x as f64 + 0.5) * self.width as f64 / width as f64).floor() as usize;
                self.get(sy.min(self.height - 1), sx.min(self.width - 1))
            })
            .collect();
        Self {
            height,
            width,
            values,
            degenerate: self.degenerate,
        }
    }

    pub fn to_tensor<T: Float>(&self) -> Result<Tensor<T>> {
        Tensor::new(
            [self.height, self.width],
            self.values.iter().map(|&v| if v { T::one() } else { T::zero() }).collect(),
        )
    }

    /// Mean foreground cell index `(x, y)` in crop coordinates.
    pub fn centroid(&self) -> Option<(f64, f64)> {
        let mut acc = (0.0, 0.0, 0usize);
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(y, x) {
                    acc = (acc.0 + x as f64, acc.1 + y as f64, acc.2 + 1);
                }
            }
        }
        (acc.2 > 0).then(|| (acc.0 / acc.2 as f64, acc.1 / acc.2 as f64))
    }
}

/// Positions of `n` evenly spaced samples along an axis of length `len`.
fn spread(n: usize, len: usize) -> Vec<usize> {
    (0..n).map(|i| (i + 1) * len / (n + 1)).collect()
}

/// Up to `k` points spread over `bx` on a uniform `⌈√k⌉ × ⌈√k⌉` lattice
/// (clipped to the box), taken row-major. `k` shrinks to the cell count.
pub fn select_salient_points(bx: &GridBox, k: usize) -> Result<Vec<Point>> {
    if k == 0 {
        return Err(Error::Trajectory("salient_k must be >= 1".into()));
    }
    let (h, w) = (bx.height(), bx.width());
    let k_eff = k.min(h * w);
    if k_eff < k {
        warn!("box {bx:?} has only {} cells; salient points reduced from {k} to {k_eff}", h * w);
    }
    let g = (k_eff as f64).sqrt().ceil() as usize;
    let (mut gy, mut gx) = (g.min(h), g.min(w));
    if gy * gx < k_eff {
        if gy == h {
            gx = k_eff.div_ceil(gy);
        } else {
            gy = k_eff.div_ceil(gx);
        }
    }
    let ys = spread(gy, h);
    let xs = spread(gx, w);
    Ok(ys
        .iter()
        .flat_map(|&y| xs.iter().map(move |&x| (bx.y0 + y, bx.x0 + x)))
        .take(k_eff)
        .collect())
}

/// Feature vector of `features: [M, H, W]` at `(y, x)`.
pub fn feature_at<T: Float>(features: &Tensor<T>, p: Point) -> Vec<f64> {
    let [m, h, w] = *features.shape() else {
        panic!("feature_at expects [M, H, W]")
    };
    let d = features.data();
    (0..m).map(|c| d[(c * h + p.0) * w + p.1].to_wide()).collect()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    (dot / (na * nb).max(COSINE_EPS)).clamp(-1.0, 1.0)
}

/// Cosine similarity between `reference` and every cell of `bx` in
/// `features: [M, H, W]`, row-major over the crop.
pub fn similarity_map<T: Float>(features: &Tensor<T>, bx: &GridBox, reference: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(bx.cells());
    for y in bx.y0..bx.y1 {
        for x in bx.x0..bx.x1 {
            out.push(cosine(&feature_at(features, (y, x)), reference));
        }
    }
    out
}

/// Pointwise maximum over maps of equal length.
pub fn aggregate_similarity(maps: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = maps
        .first()
        .ok_or_else(|| Error::Trajectory("no similarity maps to aggregate".into()))?;
    if maps.iter().any(|m| m.len() != first.len()) {
        return Err(Error::Trajectory("similarity maps differ in size".into()));
    }
    Ok((0..first.len())
        .map(|i| maps.iter().map(|m| m[i]).fold(f64::NEG_INFINITY, f64::max))
        .collect())
}

/// Two-cluster split of `values` minimising within-cluster squared error;
/// the cluster with the larger center is foreground. Returns the boolean
/// foreground flags and whether the flat-map rule fired.
///
/// One-dimensional optima are contiguous in sorted order, so scanning every
/// threshold between distinct values finds the global optimum; that
/// partition is also a fixed point of Lloyd iteration.
pub fn kmeans2(values: &[f64]) -> Result<(Vec<bool>, bool)> {
    if values.is_empty() {
        return Err(Error::Trajectory("cannot cluster an empty map".into()));
    }
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if !(hi - lo >= FLAT_RANGE) {
        return Ok((vec![true; values.len()], true));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let mut prefix = vec![0.0; n + 1];
    let mut prefix_sq = vec![0.0; n + 1];
    for (i, &v) in sorted.iter().enumerate() {
        prefix[i + 1] = prefix[i] + v;
        prefix_sq[i + 1] = prefix_sq[i] + v * v;
    }
    let sse = |a: usize, b: usize| {
        let (s, sq, len) = (prefix[b] - prefix[a], prefix_sq[b] - prefix_sq[a], (b - a) as f64);
        sq - s * s / len
    };
    let mut best: Option<(f64, usize)> = None;
    for split in 1..n {
        if sorted[split] == sorted[split - 1] {
            continue;
        }
        let cost = sse(0, split) + sse(split, n);
        if best.map_or(true, |(c, _)| cost < c) {
            best = Some((cost, split));
        }
    }
    let (_, split) = best.expect("at least two distinct values");
    let threshold = sorted[split];
    Ok((values.iter().map(|&v| v >= threshold).collect(), false))
}

/// Foreground mask of a `height × width` aggregated similarity map.
pub fn kmeans2_mask(sim: &[f64], height: usize, width: usize) -> Result<SemanticMask> {
    if sim.len() != height * width {
        return Err(Error::Trajectory(format!(
            "similarity map has {} values, expected {height}x{width}",
            sim.len()
        )));
    }
    let (values, degenerate) = kmeans2(sim)?;
    Ok(SemanticMask {
        height,
        width,
        values,
        degenerate,
    })
}

/// Masks per group (outer) and frame (inner) from reduced features
/// `[f, M, H, W]`. Salient points come from frame 1's box of each group.
pub fn compute_masks<T: Float>(
    features: &Tensor<T>,
    boxes: &[Vec<GridBox>],
    salient_k: &[usize],
) -> Result<Vec<Vec<SemanticMask>>> {
    let [f, m, h, w] = *features.shape() else {
        return Err(Error::InvalidShape {
            shape: features.shape().to_vec(),
            reason: "expected [frames, channels, height, width]".into(),
        });
    };
    let frames: Vec<Tensor<T>> = (0..f)
        .map(|j| features.narrow(0, j, 1)?.reshape([m, h, w]))
        .collect::<Result<_>>()?;
    boxes
        .iter()
        .zip(salient_k)
        .map(|(group, &k)| {
            let points = select_salient_points(&group[0], k)?;
            let refs: Vec<Vec<f64>> = points.iter().map(|&p| feature_at(&frames[0], p)).collect();
            group
                .iter()
                .enumerate()
                .map(|(j, bx)| {
                    let maps: Vec<Vec<f64>> =
                        refs.iter().map(|r| similarity_map(&frames[j], bx, r)).collect();
                    kmeans2_mask(&aggregate_similarity(&maps)?, bx.height(), bx.width())
                })
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lattice_points_in_box() {
        let b = GridBox::new(0, 0, 8, 8).unwrap();
        assert_eq!(
            select_salient_points(&b, 4).unwrap(),
            vec![(2, 2), (2, 5), (5, 2), (5, 5)]
        );
        let tiny = GridBox::new(3, 3, 4, 4).unwrap();
        assert_eq!(select_salient_points(&tiny, 9).unwrap(), vec![(3, 3)]);
    }

    #[test]
    fn split_picks_high_cluster() {
        let (fg, _) = kmeans2(&[0.1, 0.2, 0.9, 1.0]).unwrap();
        assert_eq!(fg, vec![false, false, true, true]);
        let (fg, flat) = kmeans2(&[0.5; 4]).unwrap();
        assert!(flat && fg.iter().all(|&v| v));
    }
}
