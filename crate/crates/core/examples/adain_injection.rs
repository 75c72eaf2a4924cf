//! Patch-wise AdaIN: the output carries the source's per-patch statistics
//! while keeping the layout of the input within each patch.

use condvid::injection::adain_patch;
use condvid::{Result, Tensor};

fn patch_stats(x: &Tensor, p: usize, py: usize, px: usize) -> (f64, f64) {
    let v: Vec<f64> = (0..p * p).map(|k| x.get(&[0, 0, py * p + k / p, px * p + k % p]).unwrap() as f64).collect();
    let m = v.iter().sum::<f64>() / v.len() as f64;
    (m, (v.iter().map(|a| (a - m).powi(2)).sum::<f64>() / v.len() as f64).sqrt())
}

fn main() -> Result<()> {
    let content = Tensor::from_fn([1, 1, 8, 8], |i| ((i * 7) % 13) as f32 * 0.1)?;
    let source = Tensor::from_fn([1, 1, 8, 8], |i| 3.0 + ((i * 5) % 11) as f32 * (1.0 + (i / 32) as f32))?;
    let out = adain_patch(&content, &source, 4)?;
    for (py, px) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
        let (ms, ss) = patch_stats(&source, 4, py, px);
        let (mo, so) = patch_stats(&out, 4, py, px);
        println!("patch ({py},{px})  source mean {ms:7.3} std {ss:6.3}   output mean {mo:7.3} std {so:6.3}");
    }
    println!("adain(x, x) - x: {:.2e}", adain_patch(&content, &content, 4)?.max_abs_diff(&content)?);
    Ok(())
}
