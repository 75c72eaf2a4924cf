use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use condvid::backbone::{save_checkpoint, Backbone, TapAddress, TapSet};
use condvid::pipeline::{
    report_from_run, replay, run_generate, run_inspect_taps, run_invert, EmbeddingSource,
    GenerateRequest, RunConfig, RunManifest, MANIFEST_FILE,
};
use condvid::traj::{MaskMode, OptFeature};
use condvid::{Error, Result};

#[derive(Parser)]
#[command(name = "condvid", version, about = "First-frame conditioned video generation with trajectory control")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// DDIM-invert a condition image and dump the latent trajectory and captured features.
    Invert {
        #[arg(long)]
        image: PathBuf,
        /// Extra taps to capture at t_alpha (defaults to the injection sites).
        #[arg(long)]
        taps: Option<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Generate a clip from a condition image, optionally following a trajectory.
    Generate {
        #[arg(long, required_unless_present = "replay")]
        image: Option<PathBuf>,
        /// Trajectory spec (JSON).
        #[arg(long)]
        traj: Option<PathBuf>,
        /// Re-run a recorded manifest instead of reading flags.
        #[arg(long, conflicts_with_all = ["image", "traj"])]
        replay: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Dump features at the given taps as RTD1 plus PCA-RGB previews.
    InspectTaps {
        #[arg(long)]
        image: PathBuf,
        /// Comma-separated addresses such as `up.1.res.0,up.2.q.1`.
        #[arg(long)]
        taps: String,
        #[command(flatten)]
        common: Common,
    },
    /// Print the per-frame centroid error table of a generate run.
    Report {
        /// Run directory (or its run.json).
        run: PathBuf,
        #[arg(long)]
        json: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum FeatureArg {
    Query,
    Residual,
}

#[derive(Args)]
struct Common {
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    frames: Option<usize>,
    /// Latent grid, `N` or `HxW`.
    #[arg(long)]
    size: Option<String>,
    #[arg(long)]
    no_temporal: bool,
    #[arg(long)]
    load_checkpoint: Option<PathBuf>,
    #[arg(long)]
    save_checkpoint: Option<PathBuf>,

    #[arg(long)]
    t_alpha: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    opt_every: Option<usize>,
    #[arg(long)]
    opt_threshold: Option<usize>,
    #[arg(long)]
    inner_iters: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    dump_latents: bool,

    #[arg(long)]
    no_debias: bool,
    #[arg(long)]
    no_kv_propagate: bool,
    #[arg(long)]
    patch_size: Option<usize>,
    #[arg(long)]
    inject_sites: Option<String>,

    #[arg(long)]
    pca_dim: Option<usize>,
    /// Disable PCA and align raw channels.
    #[arg(long)]
    no_pca: bool,
    #[arg(long, conflicts_with = "no_mask")]
    static_mask: bool,
    #[arg(long)]
    no_mask: bool,
    #[arg(long)]
    opt_target: Option<String>,
    #[arg(long, value_enum)]
    opt_feature: Option<FeatureArg>,
    #[arg(long)]
    freeze_pca_basis: bool,
    #[arg(long)]
    no_optimize: bool,

    /// RTD1 `[tokens, dim]` prompt embedding.
    #[arg(long, conflicts_with = "seed_embedding")]
    embedding: Option<PathBuf>,
    #[arg(long)]
    seed_embedding: Option<u64>,
    #[arg(long, default_value = "other")]
    modality: String,
}

fn parse_size(text: &str) -> Result<(usize, usize)> {
    let bad = || Error::Config(format!("--size expects N or HxW, got `{text}`"));
    match text.split_once(['x', 'X']) {
        Some((h, w)) => Ok((h.trim().parse().map_err(|_| bad())?, w.trim().parse().map_err(|_| bad())?)),
        None => {
            let n = text.trim().parse().map_err(|_| bad())?;
            Ok((n, n))
        }
    }
}

impl Common {
    fn config(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::seeded(self.seed);
        let bb = &mut cfg.backbone;
        if let Some(f) = self.frames {
            bb.frames = f;
        }
        if let Some(s) = &self.size {
            (bb.height, bb.width) = parse_size(s)?;
        }
        bb.temporal_enabled = !self.no_temporal;
        cfg.checkpoint = self.load_checkpoint.clone();

        let w = &mut cfg.window;
        if let Some(v) = self.t_alpha {
            w.t_alpha = v;
        }
        if let Some(v) = self.steps {
            cfg.sampling_steps = v;
        }
        if let Some(v) = self.opt_every {
            w.opt_every = v;
        }
        if let Some(v) = self.opt_threshold {
            w.opt_threshold = v;
        }
        if let Some(v) = self.inner_iters {
            w.inner_iters = v;
        }
        if let Some(v) = self.lr {
            w.lr = v;
        }
        cfg.dump_latents = self.dump_latents;

        if let Some(s) = &self.inject_sites {
            cfg.injection = cfg.injection.clone().with_sites(&TapAddress::parse_list(s)?)?;
        }
        cfg.injection.debias = !self.no_debias;
        cfg.injection.kv_propagate = !self.no_kv_propagate;
        if let Some(p) = self.patch_size {
            cfg.injection.patch_size = p;
        }

        let t = &mut cfg.trajectory;
        cfg.pca_dim = self.pca_dim;
        t.pca = !self.no_pca;
        t.masks = if self.no_mask {
            MaskMode::None
        } else if self.static_mask {
            MaskMode::Static
        } else {
            MaskMode::Adaptive
        };
        if let Some(s) = &self.opt_target {
            t.targets = TapAddress::parse_list(s)?;
        }
        if let Some(f) = self.opt_feature {
            t.feature = match f {
                FeatureArg::Query => OptFeature::Query,
                FeatureArg::Residual => OptFeature::Residual,
            };
        }
        t.freeze_pca_basis = self.freeze_pca_basis;
        cfg.optimize = !self.no_optimize;

        if let Some(p) = &self.embedding {
            cfg.embedding = EmbeddingSource::File(p.clone());
        } else if let Some(s) = self.seed_embedding {
            cfg.embedding = EmbeddingSource::Seeded(s);
        }
        cfg.modality = self.modality.clone();
        Ok(cfg)
    }

    fn save(&self, cfg: &RunConfig) -> Result<()> {
        if let Some(dir) = &self.save_checkpoint {
            let bb = match &cfg.checkpoint {
                Some(src) => condvid::backbone::load_checkpoint(src)?,
                None => Backbone::build(&cfg.backbone)?,
            };
            save_checkpoint(&bb, dir)?;
            info!("checkpoint written to {}", dir.display());
        }
        Ok(())
    }
}

fn summarize(manifest: &RunManifest, out: &Path) {
    for w in &manifest.warnings {
        eprintln!("warning: {w}");
    }
    println!(
        "{}: {} artifacts in {}",
        manifest.command,
        manifest.artifacts.len(),
        out.display()
    );
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Invert { image, taps, common } => {
            let cfg = common.config()?;
            common.save(&cfg)?;
            let mut set: TapSet = cfg.injection.capture_sites().into_iter().collect();
            if let Some(t) = taps {
                set.extend(TapAddress::parse_list(&t)?);
            }
            let (manifest, inv) = run_invert(&cfg, &image, &set, &common.out)?;
            println!("t_alpha used: {}", inv.t_alpha);
            summarize(&manifest, &common.out);
        }
        Command::Generate {
            image,
            traj,
            replay: from,
            common,
        } => {
            let (manifest, gen) = match from {
                Some(path) => replay(&path, &common.out)?,
                None => {
                    let cfg = common.config()?;
                    common.save(&cfg)?;
                    run_generate(&GenerateRequest {
                        config: cfg,
                        image: image.expect("required by clap"),
                        trajectory: traj,
                        out_dir: common.out.clone(),
                    })?
                }
            };
            for (k, f) in gen.firings.iter().enumerate() {
                println!(
                    "firing {k} t={}: loss {:.4} -> {:.4}",
                    f.t,
                    f.losses.first().copied().unwrap_or(0.0),
                    f.losses.last().copied().unwrap_or(0.0)
                );
            }
            if let Some(r) = &gen.report {
                print!("{r}");
            }
            summarize(&manifest, &common.out);
        }
        Command::InspectTaps { image, taps, common } => {
            let cfg = common.config()?;
            common.save(&cfg)?;
            let set: TapSet = TapAddress::parse_list(&taps)?.into_iter().collect();
            let manifest = run_inspect_taps(&cfg, &image, &set, &common.out)?;
            summarize(&manifest, &common.out);
        }
        Command::Report { run, json } => {
            let dir = if run.file_name().is_some_and(|n| n == MANIFEST_FILE) {
                run.parent().map(Path::to_path_buf).unwrap_or_default()
            } else {
                run
            };
            let report = report_from_run(&dir)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&report)?);
            } else {
                print!("{report}");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // Wrapping variants already render their source.
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numeric() { 3 } else { 2 })
        }
    }
}
