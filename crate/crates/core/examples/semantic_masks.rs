//! PCA-reduce query tokens and split a box into object and background with
//! 2-means on salient-point similarity.

use condvid::traj::{aggregate_similarity, kmeans2_mask, pca_reduce, select_salient_points, similarity_map, GridBox};
use condvid::traj::mask::feature_at;
use condvid::{Result, Tensor, Var};

fn main() -> Result<()> {
    // One frame, 12×12 grid, 8 channels; a disc of one texture on another.
    let (h, w, c) = (12, 12, 8);
    let tokens = Tensor::from_fn([1, h * w, c], |i| {
        let (pos, ch) = (i / c, i % c);
        let (y, x) = ((pos / w) as f64 + 0.5, (pos % w) as f64 + 0.5);
        let inside = (x - 6.0).hypot(y - 6.0) < 2.6;
        let base = if inside { (ch as f64).cos() } else { -(ch as f64 * 0.5).sin() };
        (base + 0.05 * ((pos * 31 + ch * 17) % 7) as f64) as f32
    })?;
    let reduced = pca_reduce(&Var::constant(tokens), 3, (h, w))?;
    let basis = reduced.basis.expect("basis is fitted");
    println!("explained variances {:?}", basis.variances);

    let features = reduced.features.value().narrow(0, 0, 1)?.reshape([3, h, w])?;
    let bx = GridBox::new(3, 3, 9, 9)?;
    let maps: Vec<Vec<f64>> = select_salient_points(&bx, 9)?
        .into_iter()
        .map(|p| similarity_map(&features, &bx, &feature_at(&features, p)))
        .collect();
    let mask = kmeans2_mask(&aggregate_similarity(&maps)?, bx.height(), bx.width())?;
    for y in 0..mask.height {
        let row: String = (0..mask.width).map(|x| if mask.get(y, x) { '#' } else { '.' }).collect();
        println!("{row}");
    }
    println!("foreground cells {} centroid {:?}", mask.count(), mask.centroid());
    Ok(())
}
