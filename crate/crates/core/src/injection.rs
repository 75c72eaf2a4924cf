//! First-frame feature injection.
//!
//! Residual hidden states captured during inversion are re-normalised
//! patch-wise against the live generation pass (AdaIN over `p × p` windows)
//! before replacing frame 1; stored queries replace frame 1 verbatim; and
//! every later frame attends with frame 1's keys and values.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::backbone::{
    propagate_first_frame, BackboneConfig, FeatureBundle, SiteHook, TapAddress, TapKind,
};
use crate::error::{Error, Result};
use crate::tensor::{Float, SparseMap, Tensor, Var};

/// Patch standard deviations are taken as `sqrt(σ² + ε²)`: a constant
/// patch divides by exactly ε, and `adain(x, x)` stays within ~ε²/σ² of `x`.
pub const ADAIN_EPS: f64 = 1e-6;

fn patch_dims(shape: &[usize], p: usize) -> Result<[usize; 4]> {
    let [b, c, h, w] = *shape else {
        return Err(Error::InvalidShape {
            shape: shape.to_vec(),
            reason: "patchify expects [batch, channels, height, width]".into(),
        });
    };
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::PatchSize {
            patch: p,
            height: h,
            width: w,
        });
    }
    Ok([b, c, h, w])
}

/// Gather map `[B, C, H, W]` → `[B, (H/p)(W/p), C, p, p]`, patches row-major.
pub fn patchify_map(shape: &[usize], p: usize) -> Result<SparseMap> {
    let [b, c, h, w] = patch_dims(shape, p)?;
    let (ny, nx) = (h / p, w / p);
    let mut src = Vec::with_capacity(b * c * h * w);
    for bi in 0..b {
        for py in 0..ny {
            for px in 0..nx {
                for ci in 0..c {
                    for y in 0..p {
                        for x in 0..p {
                            src.push(Some(((bi * c + ci) * h + py * p + y) * w + px * p + x));
                        }
                    }
                }
            }
        }
    }
    SparseMap::gather([b, c, h, w], [b, ny * nx, c, p, p], src)
}

/// Lossless `p × p` tiling of a `[B, C, H, W]` tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchGrid<T: Float = f32> {
    pub patch_size: usize,
    /// Original `[B, C, H, W]`.
    pub source_shape: [usize; 4],
    /// `[B, (H·W)/p², C, p, p]`.
    pub patches: Tensor<T>,
}

pub fn patchify<T: Float>(h: &Tensor<T>, p: usize) -> Result<PatchGrid<T>> {
    let dims = patch_dims(h.shape(), p)?;
    Ok(PatchGrid {
        patch_size: p,
        source_shape: dims,
        patches: patchify_map(h.shape(), p)?.apply(h)?,
    })
}

impl<T: Float> PatchGrid<T> {
    pub fn unpatchify(&self) -> Result<Tensor<T>> {
        unpatchify_map(&self.source_shape, self.patch_size)?.apply(&self.patches)
    }
}

/// Per-(patch, channel) mean and population std of `[B, N, C, p, p]`
/// patches, each shaped `[B, N, C, 1]`.
fn patch_moments<T: Float>(patches: &Var<T>) -> Result<(Var<T>, Var<T>, Var<T>)> {
    let s = patches.shape().to_vec();
    let flat = patches.reshape([s[0], s[1], s[2], s[3] * s[4]])?;
    let mean = flat.mean_axis(3)?;
    let centered = flat.sub(&mean)?;
    let std = centered.square()?.mean_axis(3)?.add_scalar(ADAIN_EPS * ADAIN_EPS)?.sqrt()?;
    Ok((centered, mean, std))
}

/// Patch-wise AdaIN: each `p × p` window of `h_i` takes the per-channel mean
/// and std of the matching window of `h_s`. Differentiable in both inputs.
pub fn adain_patch_var<T: Float>(h_i: &Var<T>, h_s: &Var<T>, p: usize) -> Result<Var<T>> {
    if h_i.shape() != h_s.shape() {
        return Err(Error::ShapeMismatch {
            op: "adain_patch",
            lhs: h_i.shape().to_vec(),
            rhs: h_s.shape().to_vec(),
        });
    }
    let map = Arc::new(patchify_map(h_i.shape(), p)?);
    let pi = h_i.sparse(&map)?;
    let ps = h_s.sparse(&map)?;
    let (centered_i, _, std_i) = patch_moments(&pi)?;
    let (_, mean_s, std_s) = patch_moments(&ps)?;
    let out = centered_i
        .div(&std_i)?
        .mul(&std_s)?
        .add(&mean_s)?
        .reshape(pi.shape().to_vec())?;
    out.sparse(&Arc::new(unpatchify_map(h_i.shape(), p)?))
}

/// Inverse of [`patchify_map`].
pub fn unpatchify_map(shape: &[usize], p: usize) -> Result<SparseMap> {
    let [b, c, h, w] = patch_dims(shape, p)?;
    let (ny, nx) = (h / p, w / p);
    let mut src = Vec::with_capacity(b * c * h * w);
    for bi in 0..b {
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let patch = (y / p) * nx + x / p;
                    src.push(Some((((bi * ny * nx + patch) * c + ci) * p + y % p) * p + x % p));
                }
            }
        }
    }
    SparseMap::gather([b, ny * nx, c, p, p], [b, c, h, w], src)
}

pub fn adain_patch<T: Float>(h_i: &Tensor<T>, h_s: &Tensor<T>, p: usize) -> Result<Tensor<T>> {
    Ok(adain_patch_var(&Var::constant(h_i.clone()), &Var::constant(h_s.clone()), p)?.into_value())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InjectionPlan {
    pub residual_sites: Vec<TapAddress>,
    pub query_sites: Vec<TapAddress>,
    pub kv_propagate: bool,
    pub debias: bool,
    pub patch_size: usize,
}

impl Default for InjectionPlan {
    fn default() -> Self {
        let res = |b| TapAddress::up(b, TapKind::ResidualHidden, 0);
        let q = |b, l| TapAddress::up(b, TapKind::Query, l);
        Self {
            residual_sites: vec![res(1), res(2)],
            query_sites: vec![q(1, 0), q(1, 1), q(2, 0), q(2, 1)],
            kv_propagate: true,
            debias: true,
            patch_size: 4,
        }
    }
}

impl InjectionPlan {
    /// Replace the site lists with an explicit address list, split by kind.
    pub fn with_sites(mut self, sites: &[TapAddress]) -> Result<Self> {
        self.residual_sites.clear();
        self.query_sites.clear();
        for &s in sites {
            match s.kind {
                TapKind::ResidualHidden => self.residual_sites.push(s),
                TapKind::Query => self.query_sites.push(s),
                _ => {
                    return Err(Error::Config(format!(
                        "injection site {s} must be a residual (res) or query (q) site"
                    )))
                }
            }
        }
        Ok(self)
    }

    /// Sites whose features must be captured during inversion.
    pub fn capture_sites(&self) -> Vec<TapAddress> {
        self.residual_sites.iter().chain(&self.query_sites).copied().collect()
    }

    pub fn validate(&self, cfg: &BackboneConfig) -> Result<()> {
        for s in &self.residual_sites {
            if s.kind != TapKind::ResidualHidden {
                return Err(Error::Config(format!("{s} is not a residual site")));
            }
            let (h, w) = cfg.site_grid(s)?;
            if self.debias && (self.patch_size == 0 || h % self.patch_size != 0 || w % self.patch_size != 0) {
                return Err(Error::PatchSize {
                    patch: self.patch_size,
                    height: h,
                    width: w,
                });
            }
        }
        for s in &self.query_sites {
            if s.kind != TapKind::Query {
                return Err(Error::Config(format!("{s} is not a query site")));
            }
            cfg.site_shape(s, 1)?;
        }
        Ok(())
    }
}

/// Site hook that injects first-frame features; see the module docs.
pub struct InjectionHook<T: Float = f32> {
    plan: InjectionPlan,
    stored: BTreeMap<TapAddress, Tensor<T>>,
    kv_sites: Vec<TapAddress>,
}

impl<T: Float> InjectionHook<T> {
    pub fn new(bundle: &FeatureBundle<T>, plan: &InjectionPlan, cfg: &BackboneConfig) -> Result<Self> {
        plan.validate(cfg)?;
        let mut stored = BTreeMap::new();
        for addr in plan.capture_sites() {
            let t = bundle.get(&addr)?;
            let expect = cfg.site_shape(&addr, 1)?;
            if t.shape() != expect.as_slice() {
                return Err(Error::ShapeMismatch {
                    op: "injection bundle",
                    lhs: expect,
                    rhs: t.shape().to_vec(),
                });
            }
            stored.insert(addr, t.clone());
        }
        let kv_sites = if plan.kv_propagate {
            cfg.sites()
                .into_iter()
                .filter(|a| matches!(a.kind, TapKind::Key | TapKind::Value))
                .collect()
        } else {
            Vec::new()
        };
        Ok(Self {
            plan: plan.clone(),
            stored,
            kv_sites,
        })
    }

    pub fn plan(&self) -> &InjectionPlan {
        &self.plan
    }

    /// Replace frame 1 of `live` with `first`.
    fn splice(first: Var<T>, live: &Var<T>) -> Result<Var<T>> {
        let f = live.shape()[0];
        if f == 1 {
            return Ok(first);
        }
        Var::concat(&[&first, &live.narrow(0, 1, f - 1)?], 0)
    }
}

impl<T: Float> SiteHook<T> for InjectionHook<T> {
    fn at_site(&mut self, addr: &TapAddress, live: &Var<T>) -> Result<Option<Var<T>>> {
        match addr.kind {
            TapKind::ResidualHidden | TapKind::Query => {
                let Some(stored) = self.stored.get(addr) else {
                    return Ok(None);
                };
                let is_res = addr.kind == TapKind::ResidualHidden;
                if !(is_res && self.plan.residual_sites.contains(addr)
                    || !is_res && self.plan.query_sites.contains(addr))
                {
                    return Ok(None);
                }
                let stored = Var::constant(stored.clone());
                let first = if is_res && self.plan.debias {
                    adain_patch_var(&stored, &live.narrow(0, 0, 1)?, self.plan.patch_size)?
                } else {
                    stored
                };
                Ok(Some(Self::splice(first, live)?))
            }
            TapKind::Key | TapKind::Value if self.plan.kv_propagate => {
                Ok(Some(propagate_first_frame(live)?))
            }
            _ => Ok(None),
        }
    }

    fn declared_sites(&self) -> Vec<TapAddress> {
        self.plan
            .capture_sites()
            .into_iter()
            .chain(self.kv_sites.iter().copied())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patch_shapes_follow_grid() {
        let h: Tensor = Tensor::from_fn([1, 2, 4, 4], |i| i as f32).unwrap();
        let g = patchify(&h, 2).unwrap();
        assert_eq!(g.patches.shape(), &[1, 4, 2, 2, 2]);
        assert_eq!(g.unpatchify().unwrap(), h);
        assert!(matches!(patchify(&h, 3), Err(Error::PatchSize { .. })));
    }

    #[test]
    fn constant_patch_takes_source_mean() {
        let hi: Tensor = Tensor::full([1, 1, 2, 2], 5.0).unwrap();
        let hs: Tensor = Tensor::new([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 6.0]).unwrap();
        let out = adain_patch(&hi, &hs, 2).unwrap();
        for v in out.data() {
            assert!((v - 3.0).abs() < 1e-6);
        }
    }
}
