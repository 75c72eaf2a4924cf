//! End to end: a disc image, boxes sliding right, and a run with and
//! without trajectory optimization. Writes frames and masks under
//! `target/example-generate/`.

use std::path::Path;

use condvid::pipeline::image::write_ppm;
use condvid::pipeline::{run_generate, ConditionImage, GenerateRequest, RunConfig};
use condvid::traj::{BoxGroup, TrajectorySpec};


fn main() -> Result<(), Box<dyn std::error::Error>> {
    let root = Path::new("target/example-generate");
    std::fs::create_dir_all(root)?;
    let px: Vec<u8> = (0..64 * 64)
        .flat_map(|i| {
            let (x, y) = ((i % 64) as f64 + 0.5, (i / 64) as f64 + 0.5);
            if (x - 20.0).hypot(y - 32.0) < 10.0 { [230, 200, 60] } else { [40, 40, 40] }
        })
        .collect();
    write_ppm(&root.join("cond.ppm"), &ConditionImage::from_rgb(64, 64, px)?)?;
    let spec = TrajectorySpec {
        groups: vec![BoxGroup {
            boxes: (0..4).map(|j| [8.0 + 6.0 * j as f64, 20.0, 32.0 + 6.0 * j as f64, 44.0]).collect(),
            salient_k: 9,
        }],
        pca_dim: 64,
    };
    std::fs::write(root.join("traj.json"), serde_json::to_string_pretty(&spec)?)?;

    for optimize in [false, true] {
        let mut config = RunConfig::seeded(0);
        config.optimize = optimize;
        let out_dir = root.join(if optimize { "on" } else { "off" });
        let (manifest, gen) = run_generate(&GenerateRequest {
            config,
            image: root.join("cond.ppm"),
            trajectory: Some(root.join("traj.json")),
            out_dir: out_dir.clone(),
        })?;
        let report = gen.report.expect("trajectory runs are reported");
        println!(
            "optimize={optimize:<5} firings {}  mean centroid error {:.3}  -> {}",
            manifest.firings.len(),
            report.mean_error.unwrap_or(f64::NAN),
            out_dir.display()
        );
    }
    Ok(())
}
