//! Latent optimization against the masked alignment objective.

use std::collections::BTreeMap;

use log::warn;
use serde::{Deserialize, Serialize};

use super::boxes::GridBox;
use super::loss::{alignment_loss, AlignmentTerm};
use super::mask::{compute_masks, SemanticMask};
use super::pca::{reduce_tokens, PcaBasis};
use super::{MaskMode, TrajOptions, TrajectorySpec};
use crate::backbone::{Backbone, BackboneConfig, SiteHook, TapAddress, TapKind, TapSet};
use crate::error::{Error, Result};
use crate::tensor::{Float, Tape, Tensor, Var};

/// Everything one optimizer firing needs besides the latent.
pub struct StepContext<'a, T: Float> {
    pub model: &'a Backbone<T>,
    pub t: usize,
    pub cond: &'a Tensor<T>,
    /// Active during every forward of the firing (injection, or `NoHook`).
    pub hook: &'a mut dyn SiteHook<T>,
}

/// Frozen state of one target site for the duration of a firing.
#[derive(Clone, Debug)]
pub struct SiteObjective {
    pub target: TapAddress,
    /// Site captured for the feature choice (query or residual).
    pub capture: TapAddress,
    pub grid: (usize, usize),
    /// Channels of the captured feature.
    pub channels: usize,
    pub basis: Option<PcaBasis>,
    /// `boxes[group][frame]` on this site's grid.
    pub boxes: Vec<Vec<GridBox>>,
    pub masks: Vec<Vec<SemanticMask>>,
}

impl SiteObjective {
    /// Channels of the reduced feature.
    pub fn width(&self) -> usize {
        match &self.basis {
            Some(b) => b.components(),
            None => self.channels,
        }
    }
}

/// Loss terms of one site.
#[derive(Clone, Debug, PartialEq)]
pub struct SiteTerm {
    pub site: TapAddress,
    pub term: AlignmentTerm,
}

/// Alignment objective with basis and masks held fixed.
#[derive(Clone, Debug)]
pub struct Objective {
    pub sites: Vec<SiteObjective>,
}

/// `[f, N, C]` tokens from a captured query or residual tensor.
pub fn site_tokens<T: Float>(captured: &Var<T>) -> Result<Var<T>> {
    match *captured.shape() {
        [_, _, _] => Ok(captured.clone()),
        [f, c, h, w] => captured.reshape([f, c, h * w])?.permute(&[0, 2, 1]),
        _ => Err(Error::InvalidShape {
            shape: captured.shape().to_vec(),
            reason: "expected query tokens or a residual feature map".into(),
        }),
    }
}

fn captured<'a, T: Float>(taps: &'a BTreeMap<TapAddress, Var<T>>, addr: &TapAddress) -> Result<&'a Var<T>> {
    taps.get(addr)
        .ok_or_else(|| Error::UnresolvedTap(format!("{addr} (not captured)")))
}

impl Objective {
    pub fn taps(&self) -> TapSet {
        self.sites.iter().map(|s| s.capture).collect()
    }

    /// Reduced features `[f, M, H', W']` of one site.
    pub fn features<T: Float>(&self, site: &SiteObjective, taps: &BTreeMap<TapAddress, Var<T>>) -> Result<Var<T>> {
        reduce_tokens(&site_tokens(captured(taps, &site.capture)?)?, site.basis.as_ref(), site.grid)
    }

    /// Summed loss over sites from features captured by a forward pass.
    pub fn loss<T: Float>(&self, taps: &BTreeMap<TapAddress, Var<T>>) -> Result<(Var<T>, Vec<SiteTerm>)> {
        let mut total: Option<Var<T>> = None;
        let mut terms = Vec::new();
        for site in &self.sites {
            let (l, t) = alignment_loss(&self.features(site, taps)?, &site.boxes, &site.masks)?;
            terms.extend(t.into_iter().map(|term| SiteTerm {
                site: site.target,
                term,
            }));
            total = Some(match total {
                Some(acc) => acc.add(&l)?,
                None => l,
            });
        }
        let total = total.unwrap_or_else(|| Var::constant(Tensor::scalar(T::zero())));
        Ok((total, terms))
    }

    /// Forward at `z` and evaluate.
    pub fn evaluate<T: Float>(&self, z: &Var<T>, ctx: &mut StepContext<'_, T>) -> Result<(Var<T>, Vec<SiteTerm>)> {
        let out = ctx.model.forward(z, ctx.t, ctx.cond, &self.taps(), &mut *ctx.hook)?;
        self.loss(&out.taps)
    }
}

/// Outcome of one firing.
#[derive(Clone, Debug)]
pub struct OptOutcome<T: Float = f32> {
    pub latent: Tensor<T>,
    /// Loss before each update and after the last one.
    pub losses: Vec<f64>,
    /// A non-finite loss or gradient stopped the loop early.
    pub aborted: bool,
    /// L2 norm of the total latent change.
    pub update_norm: f64,
    /// Terms of the first evaluation.
    pub terms: Vec<SiteTerm>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FiringRecord {
    pub t: usize,
    pub losses: Vec<f64>,
    pub aborted: bool,
    pub update_norm: f64,
    /// `(site, group, frame)` pairs whose registered masks do not overlap.
    pub empty_overlaps: Vec<(TapAddress, usize, usize)>,
    pub degenerate_masks: usize,
}

/// Per-run trajectory controller; holds the frozen basis and static masks
/// across firings and records each firing.
pub struct TrajController {
    spec: TrajectorySpec,
    opts: TrajOptions,
    image: (usize, usize),
    grids: BTreeMap<TapAddress, (usize, usize)>,
    frozen_basis: BTreeMap<TapAddress, Option<PcaBasis>>,
    static_masks: BTreeMap<TapAddress, Vec<Vec<SemanticMask>>>,
    history: Vec<FiringRecord>,
}

impl TrajController {
    /// `image = (height, width)` in pixels.
    pub fn new(spec: TrajectorySpec, opts: TrajOptions, cfg: &BackboneConfig, image: (usize, usize)) -> Result<Self> {
        spec.validate(cfg.frames, image)?;
        if opts.targets.is_empty() {
            return Err(Error::Config("at least one optimization target is required".into()));
        }
        let mut grids = BTreeMap::new();
        for t in &opts.targets {
            if !matches!(t.kind, TapKind::Query | TapKind::ResidualHidden) {
                return Err(Error::Config(format!("optimization target {t} must be a q or res site")));
            }
            let capture = opts.capture_site(t);
            grids.insert(*t, cfg.site_grid(&capture)?);
            spec.grid_boxes(image, cfg.site_grid(&capture)?)?;
        }
        Ok(Self {
            spec,
            opts,
            image,
            grids,
            frozen_basis: BTreeMap::new(),
            static_masks: BTreeMap::new(),
            history: Vec::new(),
        })
    }

    pub fn spec(&self) -> &TrajectorySpec {
        &self.spec
    }

    pub fn options(&self) -> &TrajOptions {
        &self.opts
    }

    pub fn history(&self) -> &[FiringRecord] {
        &self.history
    }

    pub fn taps(&self) -> TapSet {
        self.opts.targets.iter().map(|t| self.opts.capture_site(t)).collect()
    }

    fn salient_k(&self) -> Vec<usize> {
        self.spec.groups.iter().map(|g| g.salient_k).collect()
    }

    /// Freeze basis and masks from features captured at the current latent.
    pub fn prepare<T: Float>(&mut self, taps: &BTreeMap<TapAddress, Var<T>>) -> Result<Objective> {
        let mut sites = Vec::with_capacity(self.opts.targets.len());
        for target in self.opts.targets.clone() {
            let capture = self.opts.capture_site(&target);
            let grid = self.grids[&target];
            let tokens = site_tokens(captured(taps, &capture)?)?;
            let basis = if !self.opts.pca {
                None
            } else if self.opts.freeze_pca_basis {
                match self.frozen_basis.get(&target) {
                    Some(b) => b.clone(),
                    None => {
                        let b = Some(PcaBasis::fit(tokens.value(), self.spec.pca_dim)?);
                        self.frozen_basis.insert(target, b.clone());
                        b
                    }
                }
            } else {
                Some(PcaBasis::fit(tokens.value(), self.spec.pca_dim)?)
            };
            let boxes = self.spec.grid_boxes(self.image, grid)?;
            let masks = match self.opts.masks {
                MaskMode::None => boxes
                    .iter()
                    .map(|g| g.iter().map(|b| SemanticMask::ones(b.height(), b.width())).collect())
                    .collect(),
                mode => {
                    let cached = (mode == MaskMode::Static)
                        .then(|| self.static_masks.get(&target).cloned())
                        .flatten();
                    match cached {
                        Some(m) => m,
                        None => {
                            let feats = reduce_tokens(&Var::constant(tokens.value().clone()), basis.as_ref(), grid)?;
                            let m = compute_masks(feats.value(), &boxes, &self.salient_k())?;
                            if mode == MaskMode::Static {
                                self.static_masks.insert(target, m.clone());
                            }
                            m
                        }
                    }
                }
            };
            sites.push(SiteObjective {
                target,
                capture,
                grid,
                channels: tokens.shape()[2],
                basis,
                boxes,
                masks,
            });
        }
        Ok(Objective { sites })
    }

    /// Adaptive masks at `target` computed from `taps` without touching
    /// controller state (used for reporting).
    pub fn masks_at<T: Float>(
        &self,
        target: &TapAddress,
        taps: &BTreeMap<TapAddress, Var<T>>,
    ) -> Result<Vec<Vec<SemanticMask>>> {
        let target = *target;
        let capture = self.opts.capture_site(&target);
        let grid = *self
            .grids
            .get(&target)
            .ok_or_else(|| Error::Config(format!("{target} is not an optimization target")))?;
        let tokens = site_tokens(captured(taps, &capture)?)?;
        let basis = if self.opts.pca {
            match self.frozen_basis.get(&target) {
                Some(b) if self.opts.freeze_pca_basis => b.clone(),
                _ => Some(PcaBasis::fit(tokens.value(), self.spec.pca_dim)?),
            }
        } else {
            None
        };
        let feats = reduce_tokens(&tokens, basis.as_ref(), grid)?;
        compute_masks(feats.value(), &self.spec.grid_boxes(self.image, grid)?, &self.salient_k())
    }

    /// Gradient descent on frames `2..f` of `z` for `iters` steps of size
    /// `lr`. Frame 1 enters every pass as a constant.
    pub fn optimize_latent<T: Float>(
        &mut self,
        z: &Tensor<T>,
        ctx: &mut StepContext<'_, T>,
        iters: usize,
        lr: f64,
    ) -> Result<OptOutcome<T>> {
        let f = z.shape()[0];
        let taps = self.taps();
        let mut current = z.clone();
        let mut losses = Vec::with_capacity(iters + 1);
        let mut aborted = false;
        let mut objective: Option<Objective> = None;
        let mut first_terms = Vec::new();
        if f >= 2 {
            for it in 0..=iters {
                let tape = Tape::new();
                let head = Var::constant(current.narrow(0, 0, 1)?);
                let rest = tape.leaf(current.narrow(0, 1, f - 1)?)?;
                let zv = Var::concat(&[&head, &rest], 0)?;
                let pass = (|| -> Result<(Var<T>, Vec<SiteTerm>)> {
                    let out = ctx.model.forward(&zv, ctx.t, ctx.cond, &taps, &mut *ctx.hook)?;
                    if objective.is_none() {
                        objective = Some(self.prepare(&out.taps)?);
                    }
                    objective.as_ref().expect("prepared").loss(&out.taps)
                })();
                let (loss, terms) = match pass {
                    Ok(v) => v,
                    Err(e) if e.is_numeric() => {
                        aborted = true;
                        break;
                    }
                    Err(e) => return Err(e),
                };
                let value = loss.value().item()?.to_wide();
                if !value.is_finite() {
                    aborted = true;
                    break;
                }
                losses.push(value);
                if it == 0 {
                    first_terms = terms;
                }
                if it == iters || !loss.is_tracked() {
                    break;
                }
                let grads = match tape.backward(&loss) {
                    Ok(g) => g,
                    Err(e) if e.is_numeric() => {
                        aborted = true;
                        break;
                    }
                    Err(e) => return Err(e),
                };
                let Some(g) = grads.get(&rest) else { break };
                let updated = rest.value().sub(&g.scale(lr))?;
                if !updated.is_finite() {
                    aborted = true;
                    break;
                }
                current = Tensor::concat(&[&head.value().clone(), &updated], 0)?;
            }
        }
        if aborted {
            warn!("non-finite alignment loss at t={}; keeping the last finite latent", ctx.t);
        }
        let update_norm = current.sub(z)?.l2_norm();
        let objective_masks = objective.as_ref().map(|o| o.sites.as_slice()).unwrap_or(&[]);
        let degenerate_masks = objective_masks
            .iter()
            .flat_map(|s| s.masks.iter().flatten())
            .filter(|m| m.degenerate)
            .count();
        let empty_overlaps = first_terms
            .iter()
            .filter(|t| t.term.overlap == 0)
            .map(|t| (t.site, t.term.group, t.term.frame))
            .collect();
        self.history.push(FiringRecord {
            t: ctx.t,
            losses: losses.clone(),
            aborted,
            update_norm,
            empty_overlaps,
            degenerate_masks,
        });
        Ok(OptOutcome {
            latent: current,
            losses,
            aborted,
            update_norm,
            terms: first_terms,
        })
    }
}
