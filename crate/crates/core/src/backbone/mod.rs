//! Deterministic toy 3D U-Net.
//!
//! Encoder and decoder blocks stack a residual block, per-frame spatial
//! self-attention, cross-attention to a fixed conditioning embedding and a
//! switchable temporal self-attention. Decoder blocks are indexed from the
//! bottleneck outward (`up.0` is the lowest resolution) and carry
//! `up_layers` layers each, so sites such as `up.1.q.1` resolve.

mod checkpoint;
mod layers;
mod tap;

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use layers::attend;
pub use tap::{
    FeatureBundle, NoHook, SiteHook, Stage, StaticOverrides, TapAddress, TapKind, TapSet,
};

use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor, Var};
use layers::{
    Conv2d, CrossAttention, GroupNorm, Linear, MapCache, MapParams, ParamSource, ResBlock,
    SeededParams, SpatialAttention, TemporalAttention,
};

/// Channel groups used by every group norm.
pub const NORM_GROUPS: usize = 8;

/// Gain of the output convolution; keeps the noise prediction small so the
/// untrained network is close to scale-equivariant along DDIM trajectories.
pub const OUTPUT_GAIN: f64 = 0.002;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub latent_channels: usize,
    pub base_width: usize,
    pub num_down_blocks: usize,
    pub up_layers: usize,
    pub attn_heads: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub cond_tokens: usize,
    pub cond_dim: usize,
    pub seed: u64,
    pub temporal_enabled: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            latent_channels: 4,
            base_width: 32,
            num_down_blocks: 3,
            up_layers: 2,
            attn_heads: 2,
            frames: 4,
            height: 16,
            width: 16,
            cond_tokens: 4,
            cond_dim: 32,
            seed: 0,
            temporal_enabled: true,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.num_down_blocks == 0 || self.up_layers == 0 {
            return bad("num_down_blocks and up_layers must be >= 1".into());
        }
        if self.latent_channels == 0 || self.frames == 0 || self.cond_tokens == 0 || self.cond_dim == 0 {
            return bad("channel, frame and conditioning sizes must be positive".into());
        }
        let factor = 1usize << (self.num_down_blocks - 1);
        if self.height == 0 || self.width == 0 || self.height % factor != 0 || self.width % factor != 0 {
            return bad(format!(
                "height {} and width {} must be positive multiples of {factor}",
                self.height, self.width
            ));
        }
        if self.base_width == 0 || self.base_width % NORM_GROUPS != 0 {
            return bad(format!("base_width must be a positive multiple of {NORM_GROUPS}"));
        }
        if self.attn_heads == 0 || self.base_width % self.attn_heads != 0 {
            return bad("attn_heads must divide base_width".into());
        }
        Ok(())
    }

    /// Channels at encoder level `level` (0 = full resolution).
    pub fn channels(&self, level: usize) -> usize {
        self.base_width << level
    }

    /// Spatial size `(h, w)` at encoder level `level`.
    pub fn resolution(&self, level: usize) -> (usize, usize) {
        (self.height >> level, self.width >> level)
    }

    /// Encoder level of the block a site lives in.
    fn level_of(&self, stage: Stage, block: usize) -> usize {
        match stage {
            Stage::Down => block,
            Stage::Mid => self.num_down_blocks - 1,
            Stage::Up => self.num_down_blocks - 1 - block,
        }
    }

    pub fn resolves(&self, addr: &TapAddress) -> bool {
        let n = self.num_down_blocks;
        match addr.stage {
            Stage::Down => addr.block_index < n && addr.layer_index == 0,
            Stage::Mid => {
                addr.block_index == 0
                    && match addr.kind {
                        TapKind::ResidualHidden => addr.layer_index < 2,
                        _ => addr.layer_index == 0,
                    }
            }
            Stage::Up => addr.block_index < n && addr.layer_index < self.up_layers,
        }
    }

    /// Every addressable site, in a fixed order.
    pub fn sites(&self) -> Vec<TapAddress> {
        const KINDS: [TapKind; 5] = [
            TapKind::ResidualHidden,
            TapKind::Query,
            TapKind::Key,
            TapKind::Value,
            TapKind::AttentionMap,
        ];
        let mut out = Vec::new();
        for b in 0..self.num_down_blocks {
            out.extend(KINDS.iter().map(|&k| TapAddress::new(Stage::Down, b, k, 0)));
        }
        out.extend(KINDS.iter().map(|&k| TapAddress::new(Stage::Mid, 0, k, 0)));
        out.push(TapAddress::new(Stage::Mid, 0, TapKind::ResidualHidden, 1));
        for b in 0..self.num_down_blocks {
            for j in 0..self.up_layers {
                out.extend(KINDS.iter().map(|&k| TapAddress::new(Stage::Up, b, k, j)));
            }
        }
        out
    }

    /// Shape of the tensor found at `addr` for a pass over `frames` frames.
    pub fn site_shape(&self, addr: &TapAddress, frames: usize) -> Result<Vec<usize>> {
        if !self.resolves(addr) {
            return Err(Error::UnresolvedTap(addr.to_string()));
        }
        let level = self.level_of(addr.stage, addr.block_index);
        let c = self.channels(level);
        let (h, w) = self.resolution(level);
        Ok(match addr.kind {
            TapKind::ResidualHidden => vec![frames, c, h, w],
            TapKind::Query | TapKind::Key | TapKind::Value => vec![frames, h * w, c],
            TapKind::AttentionMap => vec![frames, self.attn_heads, h * w, h * w],
        })
    }

    /// Feature-grid size `(h, w)` at the site.
    pub fn site_grid(&self, addr: &TapAddress) -> Result<(usize, usize)> {
        if !self.resolves(addr) {
            return Err(Error::UnresolvedTap(addr.to_string()));
        }
        Ok(self.resolution(self.level_of(addr.stage, addr.block_index)))
    }
}

/// Per-pass capture and substitution state threaded through the layers.
pub struct ForwardCtx<'a, T: Float> {
    hook: &'a mut dyn SiteHook<T>,
    taps: &'a TapSet,
    captured: BTreeMap<TapAddress, Var<T>>,
}

impl<T: Float> ForwardCtx<'_, T> {
    /// Offer `live` to the hook, then capture whatever flows downstream.
    pub(crate) fn site(&mut self, addr: TapAddress, live: Var<T>) -> Result<Var<T>> {
        let value = match self.hook.at_site(&addr, &live)? {
            Some(sub) => {
                if sub.shape() != live.shape() {
                    return Err(Error::ShapeMismatch {
                        op: "site override",
                        lhs: live.shape().to_vec(),
                        rhs: sub.shape().to_vec(),
                    });
                }
                sub
            }
            None => live,
        };
        self.capture(addr, &value);
        Ok(value)
    }

    pub(crate) fn capture(&mut self, addr: TapAddress, value: &Var<T>) {
        if self.taps.contains(&addr) {
            self.captured.insert(addr, value.clone());
        }
    }
}

/// Result of one forward pass.
pub struct ForwardOutput<T: Float> {
    pub eps: Var<T>,
    pub taps: BTreeMap<TapAddress, Var<T>>,
}

impl<T: Float> ForwardOutput<T> {
    pub fn bundle(&self, timestep: usize) -> FeatureBundle<T> {
        FeatureBundle {
            timestep,
            taps: self
                .taps
                .iter()
                .map(|(a, v)| (*a, v.value().clone()))
                .collect(),
        }
    }
}

struct Layer<T: Float> {
    res: ResBlock<T>,
    attn: SpatialAttention<T>,
    cross: CrossAttention<T>,
    temporal: TemporalAttention<T>,
}

impl<T: Float> Layer<T> {
    fn new(src: &mut dyn ParamSource<T>, path: &str, cfg: &BackboneConfig, cin: usize, cout: usize) -> Result<Self> {
        let temb = 4 * cfg.base_width;
        Ok(Self {
            res: ResBlock::new(src, &format!("{path}.res"), cin, cout, temb, NORM_GROUPS)?,
            attn: SpatialAttention::new(src, &format!("{path}.attn"), cout, cfg.attn_heads, NORM_GROUPS)?,
            cross: CrossAttention::new(
                src,
                &format!("{path}.cross"),
                cout,
                cfg.cond_dim,
                cfg.attn_heads,
                NORM_GROUPS,
            )?,
            temporal: TemporalAttention::new(src, &format!("{path}.temporal"), cout, cfg.attn_heads, NORM_GROUPS)?,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn forward(
        &self,
        x: &Var<T>,
        temb: &Var<T>,
        cond: &Var<T>,
        site: TapAddress,
        temporal: bool,
        maps: &MapCache,
        ctx: &mut ForwardCtx<'_, T>,
    ) -> Result<Var<T>> {
        let h = self.res.forward(x, temb, maps)?;
        let h = ctx.site(site.with_kind(TapKind::ResidualHidden), h)?;
        let h = self.attn.forward(&h, site, ctx)?;
        let h = self.cross.forward(&h, cond)?;
        if temporal {
            self.temporal.forward(&h)
        } else {
            Ok(h)
        }
    }
}

struct Net<T: Float> {
    time1: Linear<T>,
    time2: Linear<T>,
    conv_in: Conv2d<T>,
    down: Vec<Layer<T>>,
    mid: Layer<T>,
    mid_res: ResBlock<T>,
    up: Vec<Vec<Layer<T>>>,
    out_norm: GroupNorm<T>,
    conv_out: Conv2d<T>,
}

impl<T: Float> Net<T> {
    fn new(cfg: &BackboneConfig, src: &mut dyn ParamSource<T>) -> Result<Self> {
        let n = cfg.num_down_blocks;
        let base = cfg.base_width;
        let temb = 4 * base;
        let time1 = Linear::new(src, "time.lin1", base, temb, true, 1.0)?;
        let time2 = Linear::new(src, "time.lin2", temb, temb, true, 1.0)?;
        let conv_in = Conv2d::new(src, "conv_in", cfg.latent_channels, base, 3, 1.0)?;
        let mut down = Vec::with_capacity(n);
        let mut prev = base;
        for l in 0..n {
            let c = cfg.channels(l);
            down.push(Layer::new(src, &format!("down.{l}.0"), cfg, prev, c)?);
            prev = c;
        }
        let deepest = cfg.channels(n - 1);
        let mid = Layer::new(src, "mid.0.0", cfg, deepest, deepest)?;
        let mid_res = ResBlock::new(src, "mid.0.1.res", deepest, deepest, temb, NORM_GROUPS)?;
        let mut up = Vec::with_capacity(n);
        let mut prev = deepest;
        for u in 0..n {
            let l = n - 1 - u;
            let c = cfg.channels(l);
            let mut block = Vec::with_capacity(cfg.up_layers);
            for j in 0..cfg.up_layers {
                let cin = if j == 0 { prev + c } else { c };
                block.push(Layer::new(src, &format!("up.{u}.{j}"), cfg, cin, c)?);
            }
            up.push(block);
            prev = c;
        }
        let out_norm = GroupNorm::new(src, "out.norm", base, NORM_GROUPS)?;
        let conv_out = Conv2d::new(src, "out.conv", base, cfg.latent_channels, 3, OUTPUT_GAIN)?;
        Ok(Self {
            time1,
            time2,
            conv_in,
            down,
            mid,
            mid_res,
            up,
            out_norm,
            conv_out,
        })
    }
}

/// Sinusoidal timestep features of width `dim`.
pub fn timestep_features<T: Float>(t: usize, dim: usize) -> Result<Tensor<T>> {
    let half = dim / 2;
    let mut v = vec![0f64; dim];
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        v[i] = (t as f64 * freq).sin();
        v[half + i] = (t as f64 * freq).cos();
    }
    Tensor::from_f64([1, dim], &v)
}

/// Immutable, cheaply clonable network.
pub struct Backbone<T: Float = f32> {
    cfg: BackboneConfig,
    params: Arc<BTreeMap<String, Tensor<T>>>,
    net: Arc<Net<T>>,
    maps: Arc<MapCache>,
}

impl<T: Float> Clone for Backbone<T> {
    fn clone(&self) -> Self {
        Self {
            cfg: self.cfg.clone(),
            params: Arc::clone(&self.params),
            net: Arc::clone(&self.net),
            maps: Arc::clone(&self.maps),
        }
    }
}

impl<T: Float> Backbone<T> {
    /// Seeded construction: each parameter is drawn from a stream keyed by
    /// `(cfg.seed, parameter path)` and scaled by `1/sqrt(fan_in)`.
    pub fn build(cfg: &BackboneConfig) -> Result<Self> {
        cfg.validate()?;
        let mut params = BTreeMap::new();
        let net = Net::new(
            cfg,
            &mut SeededParams {
                seed: cfg.seed,
                out: &mut params,
            },
        )?;
        Ok(Self::assemble(cfg.clone(), params, net))
    }

    /// Construct from an explicit parameter map (e.g. a checkpoint).
    pub fn from_params(cfg: &BackboneConfig, source: &BTreeMap<String, Tensor<T>>) -> Result<Self> {
        cfg.validate()?;
        let mut params = BTreeMap::new();
        let net = Net::new(
            cfg,
            &mut MapParams {
                map: source,
                out: &mut params,
            },
        )?;
        if params.len() != source.len() {
            return Err(Error::Config(format!(
                "parameter map has {} entries, network uses {}",
                source.len(),
                params.len()
            )));
        }
        Ok(Self::assemble(cfg.clone(), params, net))
    }

    fn assemble(cfg: BackboneConfig, params: BTreeMap<String, Tensor<T>>, net: Net<T>) -> Self {
        Self {
            cfg,
            params: Arc::new(params),
            net: Arc::new(net),
            maps: Arc::new(MapCache::default()),
        }
    }

    /// Same weights in another precision.
    pub fn cast<U: Float>(&self) -> Result<Backbone<U>> {
        let params: BTreeMap<String, Tensor<U>> =
            self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect();
        Backbone::from_params(&self.cfg, &params)
    }

    /// Shares weights; only the temporal switch differs.
    pub fn with_temporal(&self, enabled: bool) -> Self {
        let mut bb = self.clone();
        bb.cfg.temporal_enabled = enabled;
        bb
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor<T>> {
        &self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// FNV-1a over parameter paths and their `f32` bit patterns.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xCBF2_9CE4_8422_2325;
        let mut eat = |b: u8| {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01B3);
        };
        for (path, t) in self.params.iter() {
            path.bytes().for_each(&mut eat);
            for v in t.data() {
                (v.to_wide() as f32).to_bits().to_le_bytes().into_iter().for_each(&mut eat);
            }
        }
        h
    }

    fn check_inputs(&self, z: &Var<T>, cond: &Tensor<T>) -> Result<()> {
        let c = &self.cfg;
        let ok = matches!(*z.shape(), [f, ch, h, w] if f >= 1 && ch == c.latent_channels && h == c.height && w == c.width);
        if !ok {
            return Err(Error::ShapeMismatch {
                op: "forward latent",
                lhs: vec![c.frames, c.latent_channels, c.height, c.width],
                rhs: z.shape().to_vec(),
            });
        }
        if cond.shape() != [c.cond_tokens, c.cond_dim] {
            return Err(Error::ShapeMismatch {
                op: "forward conditioning",
                lhs: vec![c.cond_tokens, c.cond_dim],
                rhs: cond.shape().to_vec(),
            });
        }
        Ok(())
    }

    /// Noise prediction for `z: [F, C, H, W]` at train timestep `t`.
    ///
    /// `hook` may substitute residual hidden states, queries, keys and
    /// values; `taps` lists sites to capture. Captured values are the ones
    /// that flow downstream, i.e. after any substitution.
    pub fn forward(
        &self,
        z: &Var<T>,
        t: usize,
        cond: &Tensor<T>,
        taps: &TapSet,
        hook: &mut dyn SiteHook<T>,
    ) -> Result<ForwardOutput<T>> {
        self.check_inputs(z, cond)?;
        for addr in taps {
            if !self.cfg.resolves(addr) {
                return Err(Error::UnresolvedTap(addr.to_string()));
            }
        }
        for addr in hook.declared_sites() {
            if !self.cfg.resolves(&addr) {
                return Err(Error::UnresolvedTap(addr.to_string()));
            }
            if addr.kind == TapKind::AttentionMap {
                return Err(Error::MapOverride(addr.to_string()));
            }
        }

        let cfg = &self.cfg;
        let net = &*self.net;
        let maps = &*self.maps;
        let temporal = cfg.temporal_enabled;
        let mut ctx = ForwardCtx {
            hook,
            taps,
            captured: BTreeMap::new(),
        };
        let cond = Var::constant(cond.clone());
        let temb = Var::constant(timestep_features::<T>(t, cfg.base_width)?);
        let temb = net.time2.forward(&net.time1.forward(&temb)?.silu()?)?;

        let n = cfg.num_down_blocks;
        let mut h = net.conv_in.forward(z, maps)?;
        let mut skips = Vec::with_capacity(n);
        for (l, layer) in net.down.iter().enumerate() {
            let site = TapAddress::new(Stage::Down, l, TapKind::ResidualHidden, 0);
            h = layer.forward(&h, &temb, &cond, site, temporal, maps, &mut ctx)?;
            skips.push(h.clone());
            if l + 1 < n {
                let [f, c, hh, ww] = layers::dims4(&h)?;
                h = h.sparse(&maps.pool2(f, c, hh, ww)?)?;
            }
        }

        let site = TapAddress::new(Stage::Mid, 0, TapKind::ResidualHidden, 0);
        h = net.mid.forward(&h, &temb, &cond, site, temporal, maps, &mut ctx)?;
        h = net.mid_res.forward(&h, &temb, maps)?;
        h = ctx.site(TapAddress::new(Stage::Mid, 0, TapKind::ResidualHidden, 1), h)?;

        for (u, block) in net.up.iter().enumerate() {
            let skip = &skips[n - 1 - u];
            for (j, layer) in block.iter().enumerate() {
                let input = if j == 0 { Var::concat(&[&h, skip], 1)? } else { h.clone() };
                let site = TapAddress::new(Stage::Up, u, TapKind::ResidualHidden, j);
                h = layer.forward(&input, &temb, &cond, site, temporal, maps, &mut ctx)?;
            }
            if u + 1 < n {
                let [f, c, hh, ww] = layers::dims4(&h)?;
                h = h.sparse(&maps.upsample2(f, c, hh, ww)?)?;
            }
        }

        let eps = net.conv_out.forward(&net.out_norm.forward(&h)?.silu()?, maps)?;
        Ok(ForwardOutput {
            eps,
            taps: ctx.captured,
        })
    }

    /// Plain noise prediction without hooks or taps.
    pub fn predict(&self, z: &Tensor<T>, t: usize, cond: &Tensor<T>) -> Result<Tensor<T>> {
        let out = self.forward(&Var::constant(z.clone()), t, cond, &TapSet::new(), &mut NoHook)?;
        Ok(out.eps.into_value())
    }
}

/// Replace frames `2..F` of `x: [F, ..]` with copies of frame 1.
pub fn propagate_first_frame<T: Float>(x: &Var<T>) -> Result<Var<T>> {
    let f = x.shape()[0];
    if f == 1 {
        return Ok(x.clone());
    }
    let first = x.narrow(0, 0, 1)?;
    let mut shape = x.shape().to_vec();
    shape[0] = f;
    first.broadcast_to(&shape)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> BackboneConfig {
        BackboneConfig {
            base_width: 8,
            attn_heads: 2,
            height: 8,
            width: 8,
            frames: 2,
            cond_dim: 4,
            cond_tokens: 2,
            ..Default::default()
        }
    }

    #[test]
    fn indivisible_size_is_rejected() {
        let cfg = BackboneConfig {
            height: 10,
            ..Default::default()
        };
        assert!(matches!(Backbone::<f32>::build(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn every_listed_site_resolves_with_its_shape() {
        let cfg = tiny();
        let bb = Backbone::<f32>::build(&cfg).unwrap();
        let taps: TapSet = cfg.sites().into_iter().collect();
        let z = Var::constant(crate::rng::normal_tensor(1, "z", &[2, 4, 8, 8]).unwrap());
        let cond = Tensor::zeros([2, 4]).unwrap();
        let out = bb.forward(&z, 10, &cond, &taps, &mut NoHook).unwrap();
        assert_eq!(out.taps.len(), taps.len());
        for (addr, v) in &out.taps {
            assert_eq!(v.shape(), cfg.site_shape(addr, 2).unwrap().as_slice(), "{addr}");
        }
        assert_eq!(out.eps.shape(), z.shape());
    }

    #[test]
    fn unresolvable_tap_is_an_error() {
        let bb = Backbone::<f32>::build(&tiny()).unwrap();
        let z = Var::constant(Tensor::zeros([1, 4, 8, 8]).unwrap());
        let cond = Tensor::zeros([2, 4]).unwrap();
        let taps: TapSet = [TapAddress::up(5, TapKind::Query, 0)].into();
        assert!(matches!(
            bb.forward(&z, 1, &cond, &taps, &mut NoHook),
            Err(Error::UnresolvedTap(_))
        ));
    }
}
