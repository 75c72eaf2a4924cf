//! One forward pass of the toy U-Net with a few feature taps attached.

use condvid::backbone::{Backbone, BackboneConfig, NoHook, TapAddress};
use condvid::{Result, Tensor, Var};

fn main() -> Result<()> {
    let cfg = BackboneConfig::default();
    let bb: Backbone = Backbone::build(&cfg)?;
    println!("backbone checksum {:016x}", bb.checksum());

    let taps = TapAddress::parse_list("up.1.q.0,up.2.res.0,up.2.k.1")?.into_iter().collect();
    let z = Tensor::from_fn([cfg.frames, cfg.latent_channels, cfg.height, cfg.width], |i| ((i % 97) as f64 / 48.0 - 1.0) as f32)?;
    let cond = Tensor::zeros([cfg.cond_tokens, cfg.cond_dim])?;
    let out = bb.forward(&Var::constant(z), 500, &cond, &taps, &mut NoHook)?;

    println!("eps {:?}", out.eps.value().shape());
    for (addr, v) in &out.taps {
        println!("{addr:<12} {:?}  l2 {:.4}", v.value().shape(), v.value().l2_norm());
    }
    Ok(())
}
