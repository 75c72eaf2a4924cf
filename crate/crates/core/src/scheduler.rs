//! Deterministic DDIM (eta = 0): schedule, sampling and exact inversion.
//!
//! Train timesteps index `alpha_bars` directly. The sampling grid uses a
//! step offset of one, `t_i = i * (T / S) + 1`, so for `T = 1000, S = 25`
//! the grid is `961, 921, ..., 41, 1` and the default `t_alpha = 201` lies
//! on it. The last sampling transition lands on the clean latent (`ᾱ = 1`).
//!
//! Sampling steps are also numbered by a countdown `c = S..1` (noisiest
//! first). Optimization fires when `c >= opt_threshold` and
//! `(S - c) % opt_every == 0`; injection applies while `t >= t_alpha`.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, FeatureBundle, NoHook, SiteHook, TapSet};
use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor, Var};

pub const DEFAULT_TRAIN_STEPS: usize = 1000;
pub const DEFAULT_SAMPLING_STEPS: usize = 25;
pub const BETA_START: f64 = 8.5e-4;
pub const BETA_END: f64 = 1.2e-2;

#[derive(Clone, Debug, PartialEq)]
pub struct Schedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
    steps: Vec<usize>,
}

impl Default for Schedule {
    fn default() -> Self {
        Self::linear(DEFAULT_TRAIN_STEPS, DEFAULT_SAMPLING_STEPS).expect("default schedule")
    }
}

impl Schedule {
    /// Linear betas from [`BETA_START`] to [`BETA_END`].
    pub fn linear(train_steps: usize, sampling_steps: usize) -> Result<Self> {
        if train_steps < 2 {
            return Err(Error::Config("train_steps must be >= 2".into()));
        }
        if sampling_steps == 0 || sampling_steps > train_steps {
            return Err(Error::Config(format!(
                "sampling_steps must be in 1..={train_steps}, got {sampling_steps}"
            )));
        }
        let betas: Vec<f64> = (0..train_steps)
            .map(|i| BETA_START + (BETA_END - BETA_START) * i as f64 / (train_steps - 1) as f64)
            .collect();
        let mut acc = 1.0;
        let alpha_bars = betas
            .iter()
            .map(|b| {
                acc *= 1.0 - b;
                acc
            })
            .collect();
        let stride = train_steps / sampling_steps;
        // Offset by one so the grid is `1 + k * stride`, clamped inside [0, T).
        let steps = (0..sampling_steps)
            .rev()
            .map(|i| (i * stride + 1).min(train_steps - 1))
            .collect::<Vec<_>>();
        if steps.windows(2).any(|w| w[0] <= w[1]) {
            return Err(Error::Config(format!(
                "{sampling_steps} sampling steps do not fit in {train_steps} train steps"
            )));
        }
        Ok(Self {
            betas,
            alpha_bars,
            steps,
        })
    }

    pub fn train_steps(&self) -> usize {
        self.betas.len()
    }

    pub fn sampling_steps(&self) -> usize {
        self.steps.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// Sampling grid, strictly descending.
    pub fn steps(&self) -> &[usize] {
        &self.steps
    }

    /// `ᾱ_t`; `None` denotes the clean latent with `ᾱ = 1`.
    pub fn alpha_bar(&self, t: Option<usize>) -> Result<f64> {
        match t {
            None => Ok(1.0),
            Some(t) => self.alpha_bars.get(t).copied().ok_or_else(|| {
                Error::Timestep(format!("t={t} outside [0, {})", self.train_steps()))
            }),
        }
    }

    /// Timestep the sampler moves to after grid entry `index`.
    pub fn prev_of(&self, index: usize) -> Option<usize> {
        self.steps.get(index + 1).copied()
    }

    /// Nearest grid step to `t` (ties go to the smaller timestep).
    pub fn snap(&self, t: usize) -> usize {
        *self
            .steps
            .iter()
            .min_by_key(|&&s| (s.abs_diff(t), s))
            .expect("non-empty grid")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowConfig {
    pub t_alpha: usize,
    pub opt_every: usize,
    pub opt_threshold: usize,
    pub inner_iters: usize,
    pub lr: f64,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self {
            t_alpha: 201,
            opt_every: 5,
            opt_threshold: 20,
            inner_iters: 5,
            lr: 0.01,
        }
    }
}

impl WindowConfig {
    pub fn validate(&self, schedule: &Schedule) -> Result<()> {
        if self.t_alpha == 0 || self.t_alpha >= schedule.train_steps() {
            return Err(Error::Config(format!(
                "t_alpha must be in (0, {}), got {}",
                schedule.train_steps(),
                self.t_alpha
            )));
        }
        if self.opt_every == 0 {
            return Err(Error::Config("opt_every must be >= 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        Ok(())
    }

    /// Whether optimization fires at countdown `c` of `S` steps.
    pub fn fires(&self, countdown: usize, sampling_steps: usize) -> bool {
        fires(countdown, sampling_steps, self.opt_every, self.opt_threshold)
    }
}

/// Firing predicate: `c >= threshold` and `(S - c) % every == 0`.
pub fn fires(countdown: usize, sampling_steps: usize, every: usize, threshold: usize) -> bool {
    countdown >= 1
        && countdown <= sampling_steps
        && countdown >= threshold
        && every > 0
        && (sampling_steps - countdown) % every == 0
}

/// Countdowns (descending) at which optimization fires.
pub fn firing_countdowns(sampling_steps: usize, every: usize, threshold: usize) -> Vec<usize> {
    (1..=sampling_steps)
        .rev()
        .filter(|&c| fires(c, sampling_steps, every, threshold))
        .collect()
}

fn transfer<T: Float>(z: &Tensor<T>, eps: &Tensor<T>, ab_from: f64, ab_to: f64) -> Result<Tensor<T>> {
    z.same_shape(eps, "ddim_step")?;
    let (sa_from, sb_from) = (ab_from.sqrt(), (1.0 - ab_from).sqrt());
    let (sa_to, sb_to) = (ab_to.sqrt(), (1.0 - ab_to).sqrt());
    let data = z
        .data()
        .iter()
        .zip(eps.data())
        .map(|(&z, &e)| {
            let (z, e) = (z.to_wide(), e.to_wide());
            let x0 = (z - sb_from * e) / sa_from;
            T::from_wide(sa_to * x0 + sb_to * e)
        })
        .collect();
    Tensor::new(z.shape().to_vec(), data)
}

/// One deterministic DDIM update from `t` to `t_prev` (`None` = clean).
/// `t_prev == t` is the identity.
pub fn ddim_step<T: Float>(
    schedule: &Schedule,
    z_t: &Tensor<T>,
    eps: &Tensor<T>,
    t: usize,
    t_prev: Option<usize>,
) -> Result<Tensor<T>> {
    match t_prev {
        Some(p) if p == t => {
            z_t.same_shape(eps, "ddim_step")?;
            return Ok(z_t.clone());
        }
        Some(p) if p > t => {
            return Err(Error::Timestep(format!("ddim_step needs t > t_prev, got {t} -> {p}")));
        }
        _ => {}
    }
    transfer(z_t, eps, schedule.alpha_bar(Some(t))?, schedule.alpha_bar(t_prev)?)
}

/// Exact algebraic inverse of [`ddim_step`]: from `t_prev` up to `t`.
pub fn ddim_inverse_step<T: Float>(
    schedule: &Schedule,
    z_prev: &Tensor<T>,
    eps: &Tensor<T>,
    t_prev: Option<usize>,
    t: usize,
) -> Result<Tensor<T>> {
    if let Some(p) = t_prev {
        if p == t {
            z_prev.same_shape(eps, "ddim_inverse_step")?;
            return Ok(z_prev.clone());
        }
        if p > t {
            return Err(Error::Timestep(format!(
                "ddim_inverse_step needs t_prev < t, got {p} -> {t}"
            )));
        }
    }
    transfer(z_prev, eps, schedule.alpha_bar(t_prev)?, schedule.alpha_bar(Some(t))?)
}

/// Grid-snapped `t_alpha`, warning when it moved.
pub fn snap_t_alpha(schedule: &Schedule, t_alpha: usize) -> usize {
    let snapped = schedule.snap(t_alpha);
    if snapped != t_alpha {
        warn!("t_alpha={t_alpha} is not on the sampling grid; snapped to {snapped}");
    }
    snapped
}

#[derive(Clone, Debug)]
pub struct Inversion<T: Float = f32> {
    /// `z_0` followed by the latent at each grid step, ascending in noise.
    pub trajectory: Vec<Tensor<T>>,
    /// Timesteps matching `trajectory` (`None` for the clean latent).
    pub timesteps: Vec<Option<usize>>,
    /// Taps captured by a forward at `(z_{t_alpha}, t_alpha)`.
    pub features: Option<FeatureBundle<T>>,
    pub t_alpha: usize,
    pub t_alpha_requested: usize,
}

impl<T: Float> Inversion<T> {
    /// Fully noised latent `z_T` (top of the grid).
    pub fn z_t(&self) -> &Tensor<T> {
        self.trajectory.last().expect("non-empty trajectory")
    }

    pub fn latent_at(&self, t: usize) -> Option<&Tensor<T>> {
        self.timesteps
            .iter()
            .position(|&s| s == Some(t))
            .map(|i| &self.trajectory[i])
    }

    pub fn snapped(&self) -> bool {
        self.t_alpha != self.t_alpha_requested
    }
}

/// Invert a clean latent `z0: [F, C, H, W]` along the sampling grid with the
/// temporal modules disabled, capturing `taps` at `t_alpha`.
pub fn ddim_invert<T: Float>(
    z0: &Tensor<T>,
    model: &Backbone<T>,
    cond: &Tensor<T>,
    schedule: &Schedule,
    t_alpha: usize,
    taps: &TapSet,
) -> Result<Inversion<T>> {
    let model = model.with_temporal(false);
    let t_alpha_snapped = snap_t_alpha(schedule, t_alpha);
    let mut trajectory = vec![z0.clone()];
    let mut timesteps = vec![None];
    let mut features = None;
    let mut prev = None;
    for (k, &t) in schedule.steps().iter().rev().enumerate() {
        let z = trajectory.last().expect("non-empty");
        let step = |e: Error| Error::AtStep {
            step: k,
            timestep: t,
            source: Box::new(e),
        };
        let eps = model.predict(z, t, cond).map_err(step)?;
        let next = ddim_inverse_step(schedule, z, &eps, prev, t).map_err(step)?;
        if !next.is_finite() {
            return Err(step(Error::NonFinite { op: "ddim_invert" }));
        }
        if t == t_alpha_snapped && !taps.is_empty() {
            let out = model
                .forward(&Var::constant(next.clone()), t, cond, taps, &mut NoHook)
                .map_err(step)?;
            features = Some(out.bundle(t));
        }
        trajectory.push(next);
        timesteps.push(Some(t));
        prev = Some(t);
    }
    Ok(Inversion {
        trajectory,
        timesteps,
        features,
        t_alpha: t_alpha_snapped,
        t_alpha_requested: t_alpha,
    })
}

/// Bookkeeping for one sampling step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepInfo {
    /// 0-based position along the grid.
    pub index: usize,
    /// `S - index`, i.e. `S..1`.
    pub countdown: usize,
    pub t: usize,
    pub t_prev: Option<usize>,
    pub inject: bool,
    pub optimize: bool,
}

/// Per-step schedule for a window configuration (with `t_alpha` snapped).
pub fn plan_steps(schedule: &Schedule, window: &WindowConfig) -> Vec<StepInfo> {
    let s = schedule.sampling_steps();
    let t_alpha = schedule.snap(window.t_alpha);
    schedule
        .steps()
        .iter()
        .enumerate()
        .map(|(index, &t)| StepInfo {
            index,
            countdown: s - index,
            t,
            t_prev: schedule.prev_of(index),
            inject: t >= t_alpha,
            optimize: window.fires(s - index, s),
        })
        .collect()
}

/// Callbacks driven by [`sample`].
pub trait SampleHooks<T: Float> {
    /// Runs before the denoising forward at steps where optimization fires;
    /// may return an updated latent.
    fn optimize(&mut self, _step: &StepInfo, _z: &Tensor<T>) -> Result<Option<Tensor<T>>> {
        Ok(None)
    }

    /// Site hook for the denoising forward at steps inside the injection
    /// window.
    fn injection(&mut self, _step: &StepInfo) -> Option<&mut dyn SiteHook<T>> {
        None
    }
}

/// No callbacks: plain DDIM sampling.
pub struct NoHooks;

impl<T: Float> SampleHooks<T> for NoHooks {}

#[derive(Clone, Debug)]
pub struct Sampling<T: Float = f32> {
    /// `z_T` first, final clean latent last.
    pub trajectory: Vec<Tensor<T>>,
    pub steps: Vec<StepInfo>,
}

impl<T: Float> Sampling<T> {
    pub fn final_latent(&self) -> &Tensor<T> {
        self.trajectory.last().expect("non-empty trajectory")
    }
}

/// Deterministic DDIM sampling from `z_T` down to the clean latent.
pub fn sample<T: Float>(
    z_t: &Tensor<T>,
    model: &Backbone<T>,
    cond: &Tensor<T>,
    schedule: &Schedule,
    window: &WindowConfig,
    hooks: &mut dyn SampleHooks<T>,
) -> Result<Sampling<T>> {
    window.validate(schedule)?;
    let steps = plan_steps(schedule, window);
    let mut trajectory = vec![z_t.clone()];
    for info in &steps {
        let at = |e: Error| Error::AtStep {
            step: info.countdown,
            timestep: info.t,
            source: Box::new(e),
        };
        let mut z = trajectory.last().expect("non-empty").clone();
        if info.optimize {
            if let Some(updated) = hooks.optimize(info, &z).map_err(at)? {
                z.same_shape(&updated, "optimization hook").map_err(at)?;
                z = updated;
            }
        }
        let eps = {
            let zv = Var::constant(z.clone());
            let hook = if info.inject { hooks.injection(info) } else { None };
            match hook {
                Some(h) => model.forward(&zv, info.t, cond, &TapSet::new(), h),
                None => model.forward(&zv, info.t, cond, &TapSet::new(), &mut NoHook),
            }
            .map_err(at)?
            .eps
            .into_value()
        };
        let next = ddim_step(schedule, &z, &eps, info.t, info.t_prev).map_err(at)?;
        if !next.is_finite() {
            return Err(at(Error::NonFinite { op: "sample" }));
        }
        trajectory.push(next);
    }
    Ok(Sampling { trajectory, steps })
}
