//! Toy linear latent codec standing in for a VAE.
//!
//! Each non-overlapping `b × b` RGB pixel block (values mapped to `[-1, 1]`)
//! is projected onto `C` orthonormal directions; the first is the block
//! mean direction, the rest are seeded and Gram–Schmidt orthogonalised.
//! Decoding applies the transpose, i.e. the orthogonal projection back onto
//! the spanned subspace, so constant blocks survive exactly.

use rand_distr::{Distribution, StandardNormal};

use super::image::ConditionImage;
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

/// Fixed codec seed; the pair is part of the build, not of a run.
pub const CODEC_SEED: u64 = 0xC0DEC;
pub const DEFAULT_BLOCK: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct ToyCodec {
    block: usize,
    channels: usize,
    /// `[channels][3·b²]`, orthonormal rows.
    rows: Vec<Vec<f64>>,
}

impl ToyCodec {
    pub fn new(block: usize, channels: usize) -> Result<Self> {
        let dim = 3 * block * block;
        if block == 0 || channels == 0 || channels > dim {
            return Err(Error::Config(format!(
                "codec needs 1 <= channels <= {dim}, got {channels}"
            )));
        }
        let mut stream = rng::substream(CODEC_SEED, "codec");
        let mut rows: Vec<Vec<f64>> = vec![vec![1.0 / (dim as f64).sqrt(); dim]];
        while rows.len() < channels {
            let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut stream)).collect();
            for r in &rows {
                let dot: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(r).for_each(|(a, b)| *a -= dot * b);
            }
            let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            if norm > 1e-6 {
                rows.push(v.into_iter().map(|a| a / norm).collect());
            }
        }
        Ok(Self {
            block,
            channels,
            rows,
        })
    }

    pub fn block(&self) -> usize {
        self.block
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    fn block_index(&self, width: usize, bx: usize, by: usize, k: usize) -> usize {
        // k runs over (dy, dx, rgb) inside the block.
        let b = self.block;
        let (dy, rest) = (k / (3 * b), k % (3 * b));
        let (dx, ch) = (rest / 3, rest % 3);
        ((by * b + dy) * width + bx * b + dx) * 3 + ch
    }

    /// `[1, C, H/b, W/b]` latent of an image.
    pub fn encode(&self, img: &ConditionImage) -> Result<Tensor> {
        let b = self.block;
        if img.width % b != 0 || img.height % b != 0 {
            return Err(Error::Image(format!(
                "{}x{} image is not a multiple of the {b}-pixel codec block",
                img.width, img.height
            )));
        }
        let (lh, lw) = (img.height / b, img.width / b);
        let mut out = vec![0f32; self.channels * lh * lw];
        for by in 0..lh {
            for bx in 0..lw {
                for (c, row) in self.rows.iter().enumerate() {
                    let acc: f64 = row
                        .iter()
                        .enumerate()
                        .map(|(k, w)| {
                            let p = img.pixels[self.block_index(img.width, bx, by, k)];
                            w * (p as f64 / 127.5 - 1.0)
                        })
                        .sum();
                    out[(c * lh + by) * lw + bx] = acc as f32;
                }
            }
        }
        Tensor::new([1, self.channels, lh, lw], out)
    }

    /// Decode one `[C, h, w]` (or `[1, C, h, w]`) latent frame.
    pub fn decode(&self, z: &Tensor) -> Result<ConditionImage> {
        let (c, lh, lw) = match *z.shape() {
            [c, h, w] | [1, c, h, w] => (c, h, w),
            _ => {
                return Err(Error::InvalidShape {
                    shape: z.shape().to_vec(),
                    reason: "decode expects one [C, H, W] frame".into(),
                })
            }
        };
        if c != self.channels {
            return Err(Error::ShapeMismatch {
                op: "toy_decode",
                lhs: vec![self.channels, lh, lw],
                rhs: z.shape().to_vec(),
            });
        }
        let b = self.block;
        let (w, h) = (lw * b, lh * b);
        let mut pixels = vec![0u8; w * h * 3];
        let d = z.data();
        for by in 0..lh {
            for bx in 0..lw {
                for k in 0..3 * b * b {
                    let v: f64 = (0..c)
                        .map(|ci| self.rows[ci][k] * d[(ci * lh + by) * lw + bx] as f64)
                        .sum();
                    let p = ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8;
                    pixels[self.block_index(w, bx, by, k)] = p;
                }
            }
        }
        ConditionImage::from_rgb(w, h, pixels)
    }
}

/// Pearson correlation between two equally long byte buffers.
pub fn pearson(a: &[u8], b: &[u8]) -> f64 {
    let n = a.len().min(b.len()) as f64;
    let ma = a.iter().map(|&v| v as f64).sum::<f64>() / n;
    let mb = b.iter().map(|&v| v as f64).sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (dx, dy) = (x as f64 - ma, y as f64 - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    sab / (saa * sbb).sqrt().max(f64::MIN_POSITIVE)
}
