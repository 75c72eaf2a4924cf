//! Invert an encoded image to t_alpha and sample back down, for a few step
//! counts. Reconstruction error shrinks as the grid gets finer.

use condvid::backbone::TapSet;
use condvid::pipeline::{ConditionImage, RunConfig, Session};
use condvid::scheduler::{ddim_invert, sample, NoHooks, WindowConfig};
use condvid::Result;

fn main() -> Result<()> {
    let px: Vec<u8> = (0..64 * 64).flat_map(|i| [(i % 64 * 4) as u8, (i / 64 * 4) as u8, 128]).collect();
    let image = ConditionImage::from_rgb(64, 64, px)?;
    for steps in [10, 25, 50] {
        let mut cfg = RunConfig::seeded(0);
        cfg.sampling_steps = steps;
        let session = Session::new(&cfg)?;
        let z0 = session.encode(&image)?;
        let inv = ddim_invert(&z0, &session.backbone, &session.cond, &session.schedule, 201, &TapSet::new())?;
        let back = sample(
            inv.z_t(),
            &session.backbone.with_temporal(false),
            &session.cond,
            &session.schedule,
            &WindowConfig::default(),
            &mut NoHooks,
        )?;
        println!("S={steps:<3} relative L2 error {:.3e}", back.final_latent().rel_l2(&z0)?);
    }
    Ok(())
}
