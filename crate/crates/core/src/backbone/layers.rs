//! Building blocks of the toy U-Net. Every layer reads its parameters from a
//! [`ParamSource`] by path, so seeded construction and checkpoint loading
//! share one code path.

use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, Mutex};

use rand_distr::{Distribution, StandardNormal};

use super::tap::{TapAddress, TapKind};
use super::ForwardCtx;
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Float, SparseMap, Tensor, Var};

#[derive(Clone, Copy, Debug)]
pub(crate) enum Init {
    /// Standard normal scaled by `gain / sqrt(fan_in)`.
    Normal { fan_in: usize, gain: f64 },
    Zeros,
    Ones,
}

pub(crate) trait ParamSource<T: Float> {
    fn take(&mut self, path: &str, shape: &[usize], init: Init) -> Result<Tensor<T>>;
}

/// Draws each parameter from its own `(seed, path)` keyed stream.
pub(crate) struct SeededParams<'a, T: Float> {
    pub seed: u64,
    pub out: &'a mut BTreeMap<String, Tensor<T>>,
}

impl<T: Float> ParamSource<T> for SeededParams<'_, T> {
    fn take(&mut self, path: &str, shape: &[usize], init: Init) -> Result<Tensor<T>> {
        let t = match init {
            Init::Zeros => Tensor::zeros(shape.to_vec())?,
            Init::Ones => Tensor::ones(shape.to_vec())?,
            Init::Normal { fan_in, gain } => {
                let mut stream = rng::substream(self.seed, path);
                let scale = gain / (fan_in as f64).sqrt();
                Tensor::from_fn(shape.to_vec(), |_| {
                    let z: f64 = StandardNormal.sample(&mut stream);
                    // Round through f32 so every precision sees identical weights.
                    T::from_wide((z * scale) as f32 as f64)
                })?
            }
        };
        self.out.insert(path.to_string(), t.clone());
        Ok(t)
    }
}

/// Reads parameters from an existing path → tensor map.
pub(crate) struct MapParams<'a, T: Float> {
    pub map: &'a BTreeMap<String, Tensor<T>>,
    pub out: &'a mut BTreeMap<String, Tensor<T>>,
}

impl<T: Float> ParamSource<T> for MapParams<'_, T> {
    fn take(&mut self, path: &str, shape: &[usize], _: Init) -> Result<Tensor<T>> {
        let t = self
            .map
            .get(path)
            .ok_or_else(|| Error::Config(format!("missing parameter {path}")))?;
        if t.shape() != shape {
            return Err(Error::ShapeMismatch {
                op: "load_param",
                lhs: shape.to_vec(),
                rhs: t.shape().to_vec(),
            });
        }
        self.out.insert(path.to_string(), t.clone());
        Ok(t.clone())
    }
}

/// Cached index maps for convolution, pooling and upsampling.
#[derive(Default)]
pub(crate) struct MapCache {
    maps: Mutex<HashMap<(u8, [usize; 4]), Arc<SparseMap>>>,
}

const IM2COL: u8 = 0;
const POOL: u8 = 1;
const UPSAMPLE: u8 = 2;

impl MapCache {
    fn get(
        &self,
        kind: u8,
        dims: [usize; 4],
        build: impl FnOnce() -> Result<SparseMap>,
    ) -> Result<Arc<SparseMap>> {
        let mut maps = self.maps.lock().expect("map cache poisoned");
        if let Some(m) = maps.get(&(kind, dims)) {
            return Ok(Arc::clone(m));
        }
        let m = Arc::new(build()?);
        maps.insert((kind, dims), Arc::clone(&m));
        Ok(m)
    }

    /// `[F, C, H, W]` → `[F, H·W, C·9]` patches of a 3×3 zero-padded conv.
    fn im2col3(&self, f: usize, c: usize, h: usize, w: usize) -> Result<Arc<SparseMap>> {
        self.get(IM2COL, [f, c, h, w], || {
            let mut src = Vec::with_capacity(f * h * w * c * 9);
            for fi in 0..f {
                for y in 0..h {
                    for x in 0..w {
                        for ci in 0..c {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let (sy, sx) = (y + ky, x + kx);
                                    let inside = sy >= 1 && sx >= 1 && sy <= h && sx <= w;
                                    src.push(inside.then(|| {
                                        ((fi * c + ci) * h + (sy - 1)) * w + (sx - 1)
                                    }));
                                }
                            }
                        }
                    }
                }
            }
            SparseMap::gather([f, c, h, w], [f, h * w, c * 9], src)
        })
    }

    /// 2×2 average pooling.
    pub fn pool2(&self, f: usize, c: usize, h: usize, w: usize) -> Result<Arc<SparseMap>> {
        self.get(POOL, [f, c, h, w], || {
            let (ho, wo) = (h / 2, w / 2);
            let mut rows = Vec::with_capacity(f * c * ho * wo);
            for plane in 0..f * c {
                for y in 0..ho {
                    for x in 0..wo {
                        let base = plane * h * w;
                        rows.push(vec![
                            (base + 2 * y * w + 2 * x, 0.25),
                            (base + 2 * y * w + 2 * x + 1, 0.25),
                            (base + (2 * y + 1) * w + 2 * x, 0.25),
                            (base + (2 * y + 1) * w + 2 * x + 1, 0.25),
                        ]);
                    }
                }
            }
            SparseMap::weighted([f, c, h, w], [f, c, ho, wo], rows)
        })
    }

    /// Nearest-neighbour 2× upsampling.
    pub fn upsample2(&self, f: usize, c: usize, h: usize, w: usize) -> Result<Arc<SparseMap>> {
        self.get(UPSAMPLE, [f, c, h, w], || {
            let (ho, wo) = (2 * h, 2 * w);
            let mut src = Vec::with_capacity(f * c * ho * wo);
            for plane in 0..f * c {
                for y in 0..ho {
                    for x in 0..wo {
                        src.push(Some(plane * h * w + (y / 2) * w + x / 2));
                    }
                }
            }
            SparseMap::gather([f, c, h, w], [f, c, ho, wo], src)
        })
    }
}

pub(crate) struct Linear<T: Float> {
    weight: Tensor<T>,
    bias: Option<Tensor<T>>,
}

impl<T: Float> Linear<T> {
    pub fn new(
        src: &mut dyn ParamSource<T>,
        path: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        gain: f64,
    ) -> Result<Self> {
        let weight = src.take(
            &format!("{path}.weight"),
            &[fan_in, fan_out],
            Init::Normal { fan_in, gain },
        )?;
        let bias = bias
            .then(|| src.take(&format!("{path}.bias"), &[fan_out], Init::Zeros))
            .transpose()?;
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, x: &Var<T>) -> Result<Var<T>> {
        let y = x.matmul(&Var::constant(self.weight.clone()))?;
        match &self.bias {
            Some(b) => y.add(&Var::constant(b.clone())),
            None => Ok(y),
        }
    }
}

/// 3×3 (padding 1) or 1×1 convolution over `[F, C, H, W]`.
pub(crate) struct Conv2d<T: Float> {
    weight: Tensor<T>,
    bias: Tensor<T>,
    kernel: usize,
    out_channels: usize,
}

impl<T: Float> Conv2d<T> {
    pub fn new(
        src: &mut dyn ParamSource<T>,
        path: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        gain: f64,
    ) -> Result<Self> {
        debug_assert!(kernel == 1 || kernel == 3);
        let fan_in = cin * kernel * kernel;
        Ok(Self {
            weight: src.take(
                &format!("{path}.weight"),
                &[fan_in, cout],
                Init::Normal { fan_in, gain },
            )?,
            bias: src.take(&format!("{path}.bias"), &[cout], Init::Zeros)?,
            kernel,
            out_channels: cout,
        })
    }

    pub fn forward(&self, x: &Var<T>, maps: &MapCache) -> Result<Var<T>> {
        let [f, c, h, w] = dims4(x)?;
        let cols = if self.kernel == 3 {
            x.sparse(&maps.im2col3(f, c, h, w)?)?
        } else {
            x.reshape([f, c, h * w])?.permute(&[0, 2, 1])?
        };
        cols.matmul(&Var::constant(self.weight.clone()))?
            .add(&Var::constant(self.bias.clone()))?
            .permute(&[0, 2, 1])?
            .reshape([f, self.out_channels, h, w])
    }
}

pub(crate) struct GroupNorm<T: Float> {
    gamma: Tensor<T>,
    beta: Tensor<T>,
    groups: usize,
}

pub(crate) const NORM_EPS: f64 = 1e-5;

impl<T: Float> GroupNorm<T> {
    pub fn new(src: &mut dyn ParamSource<T>, path: &str, channels: usize, groups: usize) -> Result<Self> {
        Ok(Self {
            gamma: src.take(&format!("{path}.gamma"), &[channels, 1, 1], Init::Ones)?,
            beta: src.take(&format!("{path}.beta"), &[channels, 1, 1], Init::Zeros)?,
            groups,
        })
    }

    /// Normalises each frame independently.
    pub fn forward(&self, x: &Var<T>) -> Result<Var<T>> {
        let [f, c, h, w] = dims4(x)?;
        let g = x.reshape([f, self.groups, (c / self.groups) * h * w])?;
        let centered = g.sub(&g.mean_axis(2)?)?;
        let var = centered.square()?.mean_axis(2)?;
        let normed = centered.div(&var.add_scalar(NORM_EPS)?.sqrt()?)?;
        normed
            .reshape([f, c, h, w])?
            .mul(&Var::constant(self.gamma.clone()))?
            .add(&Var::constant(self.beta.clone()))
    }
}

pub(crate) fn dims4<T: Float>(x: &Var<T>) -> Result<[usize; 4]> {
    match *x.shape() {
        [f, c, h, w] => Ok([f, c, h, w]),
        _ => Err(Error::InvalidShape {
            shape: x.shape().to_vec(),
            reason: "expected [frames, channels, height, width]".into(),
        }),
    }
}

/// `[F, C, H, W]` → `[F, H·W, C]`.
pub(crate) fn to_tokens<T: Float>(x: &Var<T>) -> Result<Var<T>> {
    let [f, c, h, w] = dims4(x)?;
    x.reshape([f, c, h * w])?.permute(&[0, 2, 1])
}

/// `[F, H·W, C]` → `[F, C, H, W]`.
pub(crate) fn from_tokens<T: Float>(t: &Var<T>, h: usize, w: usize) -> Result<Var<T>> {
    let (f, c) = (t.shape()[0], t.shape()[2]);
    t.permute(&[0, 2, 1])?.reshape([f, c, h, w])
}

pub(crate) struct ResBlock<T: Float> {
    norm1: GroupNorm<T>,
    conv1: Conv2d<T>,
    temb: Linear<T>,
    norm2: GroupNorm<T>,
    conv2: Conv2d<T>,
    skip: Option<Conv2d<T>>,
    out_channels: usize,
}

impl<T: Float> ResBlock<T> {
    pub fn new(
        src: &mut dyn ParamSource<T>,
        path: &str,
        cin: usize,
        cout: usize,
        temb_dim: usize,
        groups: usize,
    ) -> Result<Self> {
        Ok(Self {
            norm1: GroupNorm::new(src, &format!("{path}.norm1"), cin, groups)?,
            conv1: Conv2d::new(src, &format!("{path}.conv1"), cin, cout, 3, 1.0)?,
            temb: Linear::new(src, &format!("{path}.temb"), temb_dim, cout, true, 1.0)?,
            norm2: GroupNorm::new(src, &format!("{path}.norm2"), cout, groups)?,
            conv2: Conv2d::new(src, &format!("{path}.conv2"), cout, cout, 3, 1.0)?,
            skip: (cin != cout)
                .then(|| Conv2d::new(src, &format!("{path}.skip"), cin, cout, 1, 1.0))
                .transpose()?,
            out_channels: cout,
        })
    }

    pub fn forward(&self, x: &Var<T>, temb: &Var<T>, maps: &MapCache) -> Result<Var<T>> {
        let h = self.conv1.forward(&self.norm1.forward(x)?.silu()?, maps)?;
        let t = self
            .temb
            .forward(&temb.silu()?)?
            .reshape([self.out_channels, 1, 1])?;
        let h = h.add(&t)?;
        let h = self.conv2.forward(&self.norm2.forward(&h)?.silu()?, maps)?;
        let skip = match &self.skip {
            Some(conv) => conv.forward(x, maps)?,
            None => x.clone(),
        };
        skip.add(&h)
    }
}

/// Multi-head scaled dot-product attention on `[B, N, C]` queries and
/// `[B, M, C]` keys/values. Returns the `[B, N, C]` output and the
/// `[B, heads, N, M]` map.
pub fn attend<T: Float>(
    q: &Var<T>,
    k: &Var<T>,
    v: &Var<T>,
    heads: usize,
) -> Result<(Var<T>, Var<T>)> {
    let (b, n, c) = (q.shape()[0], q.shape()[1], q.shape()[2]);
    let m = k.shape()[k.shape().len() - 2];
    let d = c / heads;
    let split = |x: &Var<T>, len: usize| -> Result<Var<T>> {
        x.reshape([b, len, heads, d])?.permute(&[0, 2, 1, 3])
    };
    let (qh, kh, vh) = (split(q, n)?, split(k, m)?, split(v, m)?);
    let scores = qh
        .matmul(&kh.transpose_last2()?)?
        .mul_scalar(1.0 / (d as f64).sqrt())?;
    let map = scores.softmax(3)?;
    let out = map
        .matmul(&vh)?
        .permute(&[0, 2, 1, 3])?
        .reshape([b, n, c])?;
    Ok((out, map))
}

/// Per-frame spatial self-attention with addressable Q/K/V/map sites.
pub(crate) struct SpatialAttention<T: Float> {
    norm: GroupNorm<T>,
    to_q: Linear<T>,
    to_k: Linear<T>,
    to_v: Linear<T>,
    to_out: Linear<T>,
    heads: usize,
}

impl<T: Float> SpatialAttention<T> {
    pub fn new(src: &mut dyn ParamSource<T>, path: &str, c: usize, heads: usize, groups: usize) -> Result<Self> {
        Ok(Self {
            norm: GroupNorm::new(src, &format!("{path}.norm"), c, groups)?,
            to_q: Linear::new(src, &format!("{path}.to_q"), c, c, false, 1.0)?,
            to_k: Linear::new(src, &format!("{path}.to_k"), c, c, false, 1.0)?,
            to_v: Linear::new(src, &format!("{path}.to_v"), c, c, false, 1.0)?,
            to_out: Linear::new(src, &format!("{path}.to_out"), c, c, false, 1.0)?,
            heads,
        })
    }

    /// Attention over `tokens: [F, N, C]`, each frame attending only to
    /// itself. Returns the projected output (no residual).
    pub fn attend_tokens(
        &self,
        tokens: &Var<T>,
        site: TapAddress,
        ctx: &mut ForwardCtx<'_, T>,
    ) -> Result<Var<T>> {
        let q = ctx.site(site.with_kind(TapKind::Query), self.to_q.forward(tokens)?)?;
        let k = ctx.site(site.with_kind(TapKind::Key), self.to_k.forward(tokens)?)?;
        let v = ctx.site(site.with_kind(TapKind::Value), self.to_v.forward(tokens)?)?;
        let (out, map) = attend(&q, &k, &v, self.heads)?;
        ctx.capture(site.with_kind(TapKind::AttentionMap), &map);
        self.to_out.forward(&out)
    }

    pub fn forward(&self, x: &Var<T>, site: TapAddress, ctx: &mut ForwardCtx<'_, T>) -> Result<Var<T>> {
        let [_, _, h, w] = dims4(x)?;
        let tokens = to_tokens(&self.norm.forward(x)?)?;
        let out = self.attend_tokens(&tokens, site, ctx)?;
        x.add(&from_tokens(&out, h, w)?)
    }
}

/// Cross-attention from image tokens to the conditioning embedding.
pub(crate) struct CrossAttention<T: Float> {
    norm: GroupNorm<T>,
    to_q: Linear<T>,
    to_k: Linear<T>,
    to_v: Linear<T>,
    to_out: Linear<T>,
    heads: usize,
}

impl<T: Float> CrossAttention<T> {
    pub fn new(
        src: &mut dyn ParamSource<T>,
        path: &str,
        c: usize,
        cond_dim: usize,
        heads: usize,
        groups: usize,
    ) -> Result<Self> {
        Ok(Self {
            norm: GroupNorm::new(src, &format!("{path}.norm"), c, groups)?,
            to_q: Linear::new(src, &format!("{path}.to_q"), c, c, false, 1.0)?,
            to_k: Linear::new(src, &format!("{path}.to_k"), cond_dim, c, false, 1.0)?,
            to_v: Linear::new(src, &format!("{path}.to_v"), cond_dim, c, false, 1.0)?,
            to_out: Linear::new(src, &format!("{path}.to_out"), c, c, false, 1.0)?,
            heads,
        })
    }

    pub fn forward(&self, x: &Var<T>, cond: &Var<T>) -> Result<Var<T>> {
        let [f, _, h, w] = dims4(x)?;
        let tokens = to_tokens(&self.norm.forward(x)?)?;
        let q = self.to_q.forward(&tokens)?;
        let (l, c) = (cond.shape()[0], q.shape()[2]);
        let k = self.to_k.forward(cond)?.broadcast_to(&[f, l, c])?;
        let v = self.to_v.forward(cond)?.broadcast_to(&[f, l, c])?;
        let (out, _) = attend(&q, &k, &v, self.heads)?;
        x.add(&from_tokens(&self.to_out.forward(&out)?, h, w)?)
    }
}

/// Per-token attention across the frame axis.
pub(crate) struct TemporalAttention<T: Float> {
    norm: GroupNorm<T>,
    to_q: Linear<T>,
    to_k: Linear<T>,
    to_v: Linear<T>,
    to_out: Linear<T>,
    heads: usize,
}

/// Output-projection gain of temporal layers (near-zero init).
pub(crate) const TEMPORAL_OUT_GAIN: f64 = 0.1;

impl<T: Float> TemporalAttention<T> {
    pub fn new(src: &mut dyn ParamSource<T>, path: &str, c: usize, heads: usize, groups: usize) -> Result<Self> {
        Ok(Self {
            norm: GroupNorm::new(src, &format!("{path}.norm"), c, groups)?,
            to_q: Linear::new(src, &format!("{path}.to_q"), c, c, false, 1.0)?,
            to_k: Linear::new(src, &format!("{path}.to_k"), c, c, false, 1.0)?,
            to_v: Linear::new(src, &format!("{path}.to_v"), c, c, false, 1.0)?,
            to_out: Linear::new(src, &format!("{path}.to_out"), c, c, false, TEMPORAL_OUT_GAIN)?,
            heads,
        })
    }

    pub fn forward(&self, x: &Var<T>) -> Result<Var<T>> {
        let [_, _, h, w] = dims4(x)?;
        // [F, N, C] -> [N, F, C]: every spatial token attends over frames.
        let tokens = to_tokens(&self.norm.forward(x)?)?.permute(&[1, 0, 2])?;
        let q = self.to_q.forward(&tokens)?;
        let k = self.to_k.forward(&tokens)?;
        let v = self.to_v.forward(&tokens)?;
        let (out, _) = attend(&q, &k, &v, self.heads)?;
        let out = self.to_out.forward(&out)?.permute(&[1, 0, 2])?;
        x.add(&from_tokens(&out, h, w)?)
    }
}
