//! One trajectory-control firing: a few gradient steps on the latent pull
//! later frames' features toward the first frame's inside the boxes.

use condvid::backbone::{Backbone, BackboneConfig, NoHook};
use condvid::traj::{StepContext, TrajController, TrajOptions, TrajectorySpec};
use condvid::{Result, Tensor};

fn main() -> Result<()> {
    let cfg = BackboneConfig::default();
    let bb: Backbone = Backbone::build(&cfg)?;
    let cond = Tensor::zeros([cfg.cond_tokens, cfg.cond_dim])?;

    // A bump that sits at a different place in every frame; the boxes ask
    // for it to stay where frame 1 has it.
    let cx = [8.0, 12.0, 13.0, 14.0];
    let z = Tensor::from_fn([4, 4, 16, 16], |i| {
        let (f, c, y, x) = (i / 1024, (i / 256) % 4, (i / 16) % 16, i % 16);
        let d2 = (x as f64 + 0.5 - cx[f]).powi(2) + (y as f64 - 7.5).powi(2);
        let sign = if c % 2 == 0 { 1.0 } else { -0.5 };
        (3.0 * (sign * (-d2 / 8.0).exp() - 0.2)) as f32
    })?;
    let spec = TrajectorySpec::stationary(&[[16.0, 16.0, 48.0, 48.0]], cfg.frames);
    let mut ctl = TrajController::new(spec, TrajOptions::default(), &cfg, (64, 64))?;
    let out = ctl.optimize_latent(&z, &mut StepContext { model: &bb, t: 961, cond: &cond, hook: &mut NoHook }, 5, 0.01)?;
    for (k, l) in out.losses.iter().enumerate() {
        println!("iter {k}  loss {l:.4}");
    }
    println!("latent moved by {:.4} (frame 1 untouched)", out.update_norm);
    Ok(())
}
