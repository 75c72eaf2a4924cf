//! End-to-end runs: invert the condition image, capture features at
//! `t_alpha`, sample with injection and latent optimization, decode and
//! write every artifact plus a manifest that replays bit for bit.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use log::warn;
use serde::{Deserialize, Serialize};

use super::codec::{ToyCodec, DEFAULT_BLOCK};
use super::image::{encode_pgm, encode_ppm, ingest_image, ConditionImage};
use super::manifest::{
    digest, ArtifactRecord, Hyperparameters, InputRecord, MaskRecord, RunManifest, StepEvent,
    MANIFEST_FILE, MANIFEST_VERSION,
};
use super::report::{adherence_report, AdherenceReport};
use crate::backbone::{
    load_checkpoint, Backbone, BackboneConfig, FeatureBundle, NoHook, SiteHook, TapAddress, TapKind, TapSet,
};
use crate::error::{Error, Result};
use crate::injection::{InjectionHook, InjectionPlan};
use crate::rng;
use crate::scheduler::{
    ddim_invert, sample, Inversion, SampleHooks, Sampling, Schedule, StepInfo, WindowConfig,
};
use crate::tensor::{rtd, Tensor, Var};
use crate::traj::optimize::{FiringRecord, StepContext, TrajController};
use crate::traj::pca::PcaBasis;
use crate::traj::{GridBox, SemanticMask, TrajOptions, TrajectorySpec};

/// How frames are initialised before sampling.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LatentInit {
    /// Every frame starts from the inverted condition latent.
    Inverted,
    /// Every frame draws seeded standard-normal noise.
    Noise,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingSource {
    /// Standard-normal pseudo-embedding keyed by this seed.
    Seeded(u64),
    /// RTD1 dump of a `[cond_tokens, cond_dim]` tensor.
    File(PathBuf),
}

/// Snapshot of every knob of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub backbone: BackboneConfig,
    pub train_steps: usize,
    pub sampling_steps: usize,
    pub window: WindowConfig,
    pub injection: InjectionPlan,
    pub trajectory: TrajOptions,
    /// Overrides the trajectory file's `pca_dim`.
    pub pca_dim: Option<usize>,
    pub optimize: bool,
    pub init: LatentInit,
    pub codec_block: usize,
    pub embedding: EmbeddingSource,
    pub checkpoint: Option<PathBuf>,
    pub modality: String,
    pub dump_latents: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            backbone: BackboneConfig::default(),
            train_steps: crate::scheduler::DEFAULT_TRAIN_STEPS,
            sampling_steps: crate::scheduler::DEFAULT_SAMPLING_STEPS,
            window: WindowConfig::default(),
            injection: InjectionPlan::default(),
            trajectory: TrajOptions::default(),
            pca_dim: None,
            optimize: true,
            init: LatentInit::Inverted,
            codec_block: DEFAULT_BLOCK,
            embedding: EmbeddingSource::Seeded(0),
            checkpoint: None,
            modality: "other".into(),
            dump_latents: false,
        }
    }
}

impl RunConfig {
    /// Default configuration with every seeded stream keyed by `seed`.
    pub fn seeded(seed: u64) -> Self {
        let mut cfg = Self::default();
        cfg.set_seed(seed);
        cfg
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.backbone.seed = seed;
        if let EmbeddingSource::Seeded(_) = self.embedding {
            self.embedding = EmbeddingSource::Seeded(seed);
        }
    }

    pub fn schedule(&self) -> Result<Schedule> {
        Schedule::linear(self.train_steps, self.sampling_steps)
    }

    /// Pixel size `(height, width)` the codec expects.
    pub fn image_size(&self) -> (usize, usize) {
        (
            self.backbone.height * self.codec_block,
            self.backbone.width * self.codec_block,
        )
    }

    pub fn resolved_pca_dim(&self, spec: Option<&TrajectorySpec>) -> usize {
        self.pca_dim
            .or(spec.map(|s| s.pca_dim))
            .unwrap_or(crate::traj::DEFAULT_PCA_DIM)
    }

    pub fn hyperparameters(&self, spec: Option<&TrajectorySpec>) -> Hyperparameters {
        Hyperparameters {
            train_steps: self.train_steps,
            sampling_steps: self.sampling_steps,
            t_alpha: self.window.t_alpha,
            patch_size: self.injection.patch_size,
            pca_dim: self.resolved_pca_dim(spec),
            lr: self.window.lr,
            opt_every: self.window.opt_every,
            opt_threshold: self.window.opt_threshold,
            inner_iters: self.window.inner_iters,
        }
    }
}

/// Model, codec, schedule and conditioning shared by all commands.
pub struct Session {
    pub config: RunConfig,
    pub backbone: Backbone,
    pub codec: ToyCodec,
    pub schedule: Schedule,
    pub cond: Tensor,
}

impl Session {
    pub fn new(config: &RunConfig) -> Result<Self> {
        let mut config = config.clone();
        let backbone = match &config.checkpoint {
            Some(dir) => {
                let bb = load_checkpoint(dir)?;
                config.backbone = bb.config().clone();
                bb
            }
            None => Backbone::build(&config.backbone)?,
        };
        let bcfg = backbone.config();
        let codec = ToyCodec::new(config.codec_block, bcfg.latent_channels)?;
        let schedule = config.schedule()?;
        config.window.validate(&schedule)?;
        config.injection.validate(bcfg)?;
        let shape = [bcfg.cond_tokens, bcfg.cond_dim];
        let cond = match &config.embedding {
            EmbeddingSource::Seeded(seed) => rng::normal_tensor(*seed, "embedding", &shape)?,
            EmbeddingSource::File(path) => {
                let t: Tensor = rtd::read(path)?;
                if t.shape() != shape {
                    return Err(Error::ShapeMismatch {
                        op: "embedding",
                        lhs: shape.to_vec(),
                        rhs: t.shape().to_vec(),
                    });
                }
                t
            }
        };
        Ok(Self {
            config,
            backbone,
            codec,
            schedule,
            cond,
        })
    }

    pub fn encode(&self, image: &ConditionImage) -> Result<Tensor> {
        let (h, w) = self.config.image_size();
        if (image.height, image.width) != (h, w) {
            return Err(Error::Image(format!(
                "condition image is {}x{}, the configured latent grid needs {w}x{h}",
                image.width, image.height
            )));
        }
        self.codec.encode(image)
    }

    /// Invert the encoded image (temporal modules off), capturing `taps`.
    pub fn invert(&self, image: &ConditionImage, taps: &TapSet) -> Result<Inversion> {
        let z0 = self.encode(image)?;
        ddim_invert(&z0, &self.backbone, &self.cond, &self.schedule, self.config.window.t_alpha, taps)
            .map_err(|e| e.context("inversion"))
    }
}

struct GenerateHooks<'a> {
    model: &'a Backbone,
    cond: &'a Tensor,
    window: &'a WindowConfig,
    injection: Option<InjectionHook>,
    traj: Option<&'a mut TrajController>,
}

impl SampleHooks<f32> for GenerateHooks<'_> {
    fn optimize(&mut self, step: &StepInfo, z: &Tensor) -> Result<Option<Tensor>> {
        let Some(ctl) = self.traj.as_deref_mut() else {
            return Ok(None);
        };
        let mut none = NoHook;
        let hook: &mut dyn SiteHook<f32> = match (&mut self.injection, step.inject) {
            (Some(h), true) => h,
            _ => &mut none,
        };
        let mut ctx = StepContext {
            model: self.model,
            t: step.t,
            cond: self.cond,
            hook,
        };
        let out = ctl.optimize_latent(z, &mut ctx, self.window.inner_iters, self.window.lr)?;
        Ok(Some(out.latent))
    }

    fn injection(&mut self, _step: &StepInfo) -> Option<&mut dyn SiteHook<f32>> {
        self.injection.as_mut().map(|h| h as &mut dyn SiteHook<f32>)
    }
}

/// Report masks of one run, on the finest optimization-target grid.
#[derive(Clone, Debug)]
pub struct RunMasks {
    pub site: TapAddress,
    pub boxes: Vec<Vec<GridBox>>,
    pub masks: Vec<Vec<SemanticMask>>,
    pub scale: f64,
}

/// In-memory result of [`generate`].
#[derive(Clone, Debug)]
pub struct Generation {
    pub config: RunConfig,
    pub inversion: Inversion,
    pub sampling: Sampling,
    pub frames: Vec<ConditionImage>,
    pub firings: Vec<FiringRecord>,
    pub masks: Option<RunMasks>,
    pub report: Option<AdherenceReport>,
    pub warnings: Vec<String>,
    pub backbone_checksum: u64,
}

impl Generation {
    pub fn final_latent(&self) -> &Tensor {
        self.sampling.final_latent()
    }
}

fn trajectory_warnings(
    session: &Session,
    spec: &TrajectorySpec,
    opts: &TrajOptions,
    image: (usize, usize),
    warnings: &mut Vec<String>,
) -> Result<()> {
    let cfg = session.backbone.config();
    for t in &opts.targets {
        let site = opts.capture_site(t);
        let c = *cfg.site_shape(&site, 1)?.last().expect("non-empty");
        if opts.pca && spec.pca_dim > c {
            warnings.push(format!(
                "pca_dim {} exceeds the {c} channels at {site}; extra components are zero",
                spec.pca_dim
            ));
        }
        for (i, g) in spec.grid_boxes(image, cfg.site_grid(&site)?)?.iter().enumerate() {
            let k = spec.groups[i].salient_k;
            if g[0].cells() < k {
                warnings.push(format!(
                    "group {i} at {site}: box has {} cells, salient points reduced from {k}",
                    g[0].cells()
                ));
            }
        }
    }
    Ok(())
}

/// Full generation in memory.
pub fn generate(config: &RunConfig, image: &ConditionImage, spec: Option<&TrajectorySpec>) -> Result<Generation> {
    let session = Session::new(config)?;
    let config = session.config.clone();
    let bcfg = session.backbone.config().clone();
    let image_size = config.image_size();
    let mut warnings = Vec::new();

    let plan = &config.injection;
    let taps: TapSet = plan.capture_sites().into_iter().collect();
    let inversion = session.invert(image, &taps)?;
    if inversion.snapped() {
        warnings.push(format!(
            "t_alpha {} is not on the sampling grid; snapped to {}",
            inversion.t_alpha_requested, inversion.t_alpha
        ));
    }
    // An empty plan still propagates first-frame keys and values.
    let bundle = inversion.features.clone().unwrap_or(FeatureBundle {
        timestep: inversion.t_alpha,
        taps: Default::default(),
    });
    let injection = InjectionHook::new(&bundle, plan, &bcfg)?;

    let spec = spec.map(|s| {
        let mut s = s.clone();
        s.pca_dim = config.resolved_pca_dim(Some(&s));
        s
    });
    let mut controller = match &spec {
        Some(s) => {
            trajectory_warnings(&session, s, &config.trajectory, image_size, &mut warnings)?;
            Some(TrajController::new(s.clone(), config.trajectory.clone(), &bcfg, image_size)?)
        }
        None => None,
    };

    let f = bcfg.frames;
    let z_t = match config.init {
        LatentInit::Inverted => {
            let one = inversion.z_t();
            Tensor::concat(&vec![one; f], 0)?
        }
        LatentInit::Noise => rng::normal_tensor(config.seed, "noise", &[f, bcfg.latent_channels, bcfg.height, bcfg.width])?,
    };

    let mut window = config.window.clone();
    window.t_alpha = inversion.t_alpha;
    let sampling = {
        let mut hooks = GenerateHooks {
            model: &session.backbone,
            cond: &session.cond,
            window: &window,
            injection: Some(injection),
            traj: if config.optimize { controller.as_mut() } else { None },
        };
        sample(&z_t, &session.backbone, &session.cond, &session.schedule, &window, &mut hooks)
            .map_err(|e| e.context("sampling"))?
    };

    let firings = controller.as_ref().map(|c| c.history().to_vec()).unwrap_or_default();
    for (k, r) in firings.iter().enumerate() {
        if r.aborted {
            warnings.push(format!("firing {k} (t={}) stopped on a non-finite loss", r.t));
        }
        if r.degenerate_masks > 0 {
            warnings.push(format!("firing {k} (t={}): {} flat similarity maps", r.t, r.degenerate_masks));
        }
        for (site, g, j) in &r.empty_overlaps {
            warnings.push(format!("firing {k} (t={}): masks of group {g} frame {} do not overlap at {site}", r.t, j + 1));
        }
    }

    let z0 = sampling.final_latent().clone();
    let frames = (0..f)
        .map(|j| session.codec.decode(&z0.narrow(0, j, 1)?))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .map(|img| img.with_modality(config.modality.clone()))
        .collect();

    let (masks, report) = match &controller {
        Some(ctl) => {
            let site = *config
                .trajectory
                .targets
                .iter()
                .max_by_key(|t| {
                    let g = bcfg.site_grid(&config.trajectory.capture_site(t)).unwrap_or((0, 0));
                    (g.0 * g.1, std::cmp::Reverse(**t))
                })
                .expect("targets validated non-empty");
            let capture = config.trajectory.capture_site(&site);
            let t_last = *session.schedule.steps().last().expect("non-empty grid");
            let out = session.backbone.forward(
                &Var::constant(z0.clone()),
                t_last,
                &session.cond,
                &[capture].into(),
                &mut NoHook,
            )?;
            let masks = ctl.masks_at(&site, &out.taps)?;
            let grid = bcfg.site_grid(&capture)?;
            let boxes = ctl.spec().grid_boxes(image_size, grid)?;
            let scale = bcfg.width as f64 / grid.1 as f64;
            let degenerate = masks.iter().flatten().filter(|m| m.degenerate).count();
            if degenerate > 0 {
                warnings.push(format!("{degenerate} report masks fell back to all-ones"));
            }
            let report = adherence_report(&masks, &boxes, scale)?;
            (
                Some(RunMasks {
                    site,
                    boxes,
                    masks,
                    scale,
                }),
                Some(report),
            )
        }
        None => (None, None),
    };

    for w in &warnings {
        warn!("{w}");
    }
    Ok(Generation {
        backbone_checksum: session.backbone.checksum(),
        config: session.config.clone(),
        inversion,
        sampling,
        frames,
        firings,
        masks,
        report,
        warnings,
    })
}

/// Collects artifact files with digests, relative to an output directory.
struct ArtifactWriter<'a> {
    root: &'a Path,
    records: Vec<ArtifactRecord>,
}

impl<'a> ArtifactWriter<'a> {
    fn new(root: &'a Path) -> Result<Self> {
        fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        Ok(Self {
            root,
            records: Vec::new(),
        })
    }

    fn put(&mut self, rel: &str, bytes: &[u8]) -> Result<String> {
        let path = self.root.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(&path, bytes).map_err(|e| Error::io(path.clone(), e))?;
        self.records.push(ArtifactRecord {
            path: rel.to_string(),
            digest: digest(bytes),
        });
        Ok(rel.to_string())
    }

    fn tensor(&mut self, rel: &str, t: &Tensor) -> Result<String> {
        self.put(rel, &rtd::encode(t))
    }
}

fn input_record(role: &str, path: &Path) -> Result<InputRecord> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(InputRecord {
        role: role.into(),
        path: path.to_string_lossy().into_owned(),
        digest: digest(&bytes),
    })
}

fn base_manifest(command: &str, config: &RunConfig, spec: Option<&TrajectorySpec>, inputs: Vec<InputRecord>) -> RunManifest {
    RunManifest {
        version: MANIFEST_VERSION,
        command: command.into(),
        config: config.clone(),
        hyperparameters: config.hyperparameters(spec),
        inputs,
        backbone_checksum: String::new(),
        t_alpha_requested: config.window.t_alpha,
        t_alpha_used: config.window.t_alpha,
        steps: Vec::new(),
        firings: Vec::new(),
        masks: Vec::new(),
        artifacts: Vec::new(),
        warnings: Vec::new(),
    }
}

fn gather_inputs(config: &RunConfig, image: &Path, traj: Option<&Path>) -> Result<Vec<InputRecord>> {
    let mut inputs = vec![input_record("image", image)?];
    if let Some(t) = traj {
        inputs.push(input_record("trajectory", t)?);
    }
    if let EmbeddingSource::File(p) = &config.embedding {
        inputs.push(input_record("embedding", p)?);
    }
    Ok(inputs)
}

/// File-level generation request.
#[derive(Clone, Debug)]
pub struct GenerateRequest {
    pub config: RunConfig,
    pub image: PathBuf,
    pub trajectory: Option<PathBuf>,
    pub out_dir: PathBuf,
}

/// Read inputs, [`generate`], and write frames, masks, latents and the
/// manifest under `out_dir`.
pub fn run_generate(req: &GenerateRequest) -> Result<(RunManifest, Generation)> {
    let image = ingest_image(&req.image)?.with_modality(req.config.modality.clone());
    let spec = req.trajectory.as_deref().map(TrajectorySpec::load).transpose()?;
    let inputs = gather_inputs(&req.config, &req.image, req.trajectory.as_deref())?;
    let gen = generate(&req.config, &image, spec.as_ref())?;

    let mut out = ArtifactWriter::new(&req.out_dir)?;
    for (j, frame) in gen.frames.iter().enumerate() {
        out.put(
            &format!("frames/frame_{:02}.ppm", j + 1),
            &encode_ppm(frame.width, frame.height, &frame.pixels),
        )?;
    }
    let mut mask_records = Vec::new();
    if let Some(m) = &gen.masks {
        for (i, (gm, gb)) in m.masks.iter().zip(&m.boxes).enumerate() {
            for (j, (mask, bx)) in gm.iter().zip(gb).enumerate() {
                let gray: Vec<u8> = mask.values.iter().map(|&v| if v { 255 } else { 0 }).collect();
                let path = out.put(
                    &format!("masks/group{i}_frame_{:02}.pgm", j + 1),
                    &encode_pgm(mask.width, mask.height, &gray),
                )?;
                mask_records.push(MaskRecord {
                    group: i,
                    frame: j,
                    site: m.site,
                    grid_box: *bx,
                    scale: m.scale,
                    degenerate: mask.degenerate,
                    path,
                });
            }
        }
    }
    out.tensor("latents/final.rtd", gen.final_latent())?;
    out.tensor("latents/inverted_zT.rtd", gen.inversion.z_t())?;
    if gen.config.dump_latents {
        for (k, z) in gen.sampling.trajectory.iter().enumerate() {
            out.tensor(&format!("latents/sample_{k:02}.rtd"), z)?;
        }
        for (k, z) in gen.inversion.trajectory.iter().enumerate() {
            out.tensor(&format!("latents/invert_{k:02}.rtd"), z)?;
        }
    }

    let mut manifest = base_manifest("generate", &gen.config, spec.as_ref(), inputs);
    manifest.backbone_checksum = format!("{:016x}", gen.backbone_checksum);
    manifest.t_alpha_used = gen.inversion.t_alpha;
    manifest.steps = gen
        .sampling
        .steps
        .iter()
        .map(|s| StepEvent {
            countdown: s.countdown,
            t: s.t,
            injected: s.inject,
            optimized: s.optimize && gen.config.optimize && spec.is_some(),
        })
        .collect();
    manifest.firings = gen.firings.clone();
    manifest.masks = mask_records;
    manifest.artifacts = out.records;
    manifest.warnings = gen.warnings.clone();
    manifest.write(&req.out_dir.join(MANIFEST_FILE))?;
    Ok((manifest, gen))
}

/// Re-run a recorded `generate` into `out_dir`; inputs must be unchanged.
pub fn replay(manifest_path: &Path, out_dir: &Path) -> Result<(RunManifest, Generation)> {
    let recorded = RunManifest::load(manifest_path)?;
    if recorded.command != "generate" {
        return Err(Error::Manifest(format!("cannot replay a `{}` manifest", recorded.command)));
    }
    for input in &recorded.inputs {
        let now = input_record(&input.role, Path::new(&input.path))?;
        if now.digest != input.digest {
            return Err(Error::Manifest(format!("input {} changed since the recorded run", input.path)));
        }
    }
    let image = recorded
        .input("image")
        .ok_or_else(|| Error::Manifest("manifest lacks the image input".into()))?;
    let req = GenerateRequest {
        config: recorded.config.clone(),
        image: PathBuf::from(&image.path),
        trajectory: recorded.input("trajectory").map(|t| PathBuf::from(&t.path)),
        out_dir: out_dir.to_path_buf(),
    };
    run_generate(&req)
}

/// Invert a condition image and write the latent trajectory and the
/// features captured at `t_alpha`.
pub fn run_invert(config: &RunConfig, image_path: &Path, taps: &TapSet, out_dir: &Path) -> Result<(RunManifest, Inversion)> {
    let session = Session::new(config)?;
    let image = ingest_image(image_path)?;
    let inversion = session.invert(&image, taps)?;
    let mut out = ArtifactWriter::new(out_dir)?;
    for (k, z) in inversion.trajectory.iter().enumerate() {
        out.tensor(&format!("latents/invert_{k:02}.rtd"), z)?;
    }
    if let Some(bundle) = &inversion.features {
        write_bundle(&mut out, bundle)?;
    }
    let mut manifest = base_manifest("invert", &session.config, None, gather_inputs(&session.config, image_path, None)?);
    manifest.backbone_checksum = format!("{:016x}", session.backbone.checksum());
    manifest.t_alpha_used = inversion.t_alpha;
    if inversion.snapped() {
        manifest.warnings.push(format!(
            "t_alpha {} is not on the sampling grid; snapped to {}",
            inversion.t_alpha_requested, inversion.t_alpha
        ));
    }
    manifest.artifacts = out.records;
    manifest.write(&out_dir.join(MANIFEST_FILE))?;
    Ok((manifest, inversion))
}

fn write_bundle(out: &mut ArtifactWriter<'_>, bundle: &FeatureBundle) -> Result<()> {
    for (addr, t) in &bundle.taps {
        out.tensor(&format!("features/{addr}.rtd"), t)?;
    }
    Ok(())
}

/// First three principal components of a captured feature as an RGB
/// image, each component min-max scaled, upsampled by `zoom`.
pub fn pca_rgb(feature: &Tensor, zoom: usize) -> Result<Option<ConditionImage>> {
    let (tokens, h, w) = match *feature.shape() {
        [1, c, h, w] => (feature.reshape([c, h * w])?.permute(&[1, 0])?, h, w),
        [1, n, c] => {
            let side = (n as f64).sqrt() as usize;
            if side * side != n {
                return Ok(None);
            }
            (feature.reshape([n, c])?, side, side)
        }
        _ => return Ok(None),
    };
    let basis = PcaBasis::fit(&tokens, 3)?;
    let proj = basis.project(&tokens)?;
    let d = proj.data();
    let mut lo = [f32::INFINITY; 3];
    let mut hi = [f32::NEG_INFINITY; 3];
    for (i, &v) in d.iter().enumerate() {
        lo[i % 3] = lo[i % 3].min(v);
        hi[i % 3] = hi[i % 3].max(v);
    }
    let zoom = zoom.max(1);
    let (zh, zw) = (h * zoom, w * zoom);
    let mut pixels = vec![0u8; zh * zw * 3];
    for y in 0..zh {
        for x in 0..zw {
            let tok = (y / zoom) * w + x / zoom;
            for c in 0..3 {
                let span = hi[c] - lo[c];
                let v = if span > 0.0 { (d[tok * 3 + c] - lo[c]) / span } else { 0.5 };
                pixels[(y * zw + x) * 3 + c] = (v * 255.0).round() as u8;
            }
        }
    }
    ConditionImage::from_rgb(zw, zh, pixels).map(Some)
}

/// Invert and dump the requested taps as RTD1 plus PCA-RGB previews.
pub fn run_inspect_taps(config: &RunConfig, image_path: &Path, taps: &TapSet, out_dir: &Path) -> Result<RunManifest> {
    let session = Session::new(config)?;
    for t in taps {
        if !session.backbone.config().resolves(t) {
            return Err(Error::UnresolvedTap(t.to_string()));
        }
    }
    let image = ingest_image(image_path)?;
    let inversion = session.invert(&image, taps)?;
    let mut out = ArtifactWriter::new(out_dir)?;
    let bundle = inversion.features.clone().unwrap_or(FeatureBundle {
        timestep: inversion.t_alpha,
        taps: BTreeMap::new(),
    });
    write_bundle(&mut out, &bundle)?;
    let (ih, _) = config.image_size();
    // Attention maps have no channel axis to reduce; they are dumped only.
    for (addr, t) in bundle.taps.iter().filter(|(a, _)| a.kind != TapKind::AttentionMap) {
        let grid = session.backbone.config().site_grid(addr)?;
        if let Some(img) = pca_rgb(t, ih / grid.0)? {
            out.put(&format!("features/{addr}_pca.ppm"), &encode_ppm(img.width, img.height, &img.pixels))?;
        }
    }
    let mut manifest = base_manifest("inspect-taps", &session.config, None, gather_inputs(&session.config, image_path, None)?);
    manifest.backbone_checksum = format!("{:016x}", session.backbone.checksum());
    manifest.t_alpha_used = inversion.t_alpha;
    manifest.artifacts = out.records;
    manifest.write(&out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}
