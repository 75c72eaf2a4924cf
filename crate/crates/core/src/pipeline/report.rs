//! Trajectory-adherence proxy: distance between each mask's centroid and
//! its target box center, in latent-grid units.

use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::image::decode_pnm;
use super::manifest::{RunManifest, MANIFEST_FILE};
use crate::error::{Error, Result};
use crate::traj::{GridBox, SemanticMask};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdherenceRow {
    pub group: usize,
    pub frame: usize,
    /// `None` when the mask is empty.
    pub error: Option<f64>,
    pub degenerate: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdherenceReport {
    pub rows: Vec<AdherenceRow>,
    /// Mean over non-degenerate, nonempty rows.
    pub mean_error: Option<f64>,
}

/// `masks[group][frame]` covers `boxes[group][frame]` cell for cell; `scale`
/// converts grid cells to latent cells. Degenerate (all-ones fallback)
/// masks are flagged and excluded from the mean.
pub fn adherence_report(masks: &[Vec<SemanticMask>], boxes: &[Vec<GridBox>], scale: f64) -> Result<AdherenceReport> {
    if masks.len() != boxes.len() {
        return Err(Error::Trajectory("masks and boxes disagree on group count".into()));
    }
    let mut rows = Vec::new();
    for (i, (gm, gb)) in masks.iter().zip(boxes).enumerate() {
        if gm.len() != gb.len() {
            return Err(Error::Trajectory(format!("group {i}: mask and box counts differ")));
        }
        for (j, (m, b)) in gm.iter().zip(gb).enumerate() {
            if (m.height, m.width) != (b.height(), b.width()) {
                return Err(Error::Trajectory(format!(
                    "group {i} frame {j}: {}x{} mask on a {}x{} box",
                    m.height,
                    m.width,
                    b.height(),
                    b.width()
                )));
            }
            let (bx, by) = b.center();
            let error = m.centroid().map(|(cx, cy)| {
                let (dx, dy) = (b.x0 as f64 + cx - bx, b.y0 as f64 + cy - by);
                (dx * dx + dy * dy).sqrt() * scale
            });
            rows.push(AdherenceRow {
                group: i,
                frame: j,
                error,
                degenerate: m.degenerate,
            });
        }
    }
    let counted: Vec<f64> = rows.iter().filter(|r| !r.degenerate).filter_map(|r| r.error).collect();
    let mean_error = (!counted.is_empty()).then(|| counted.iter().sum::<f64>() / counted.len() as f64);
    Ok(AdherenceReport { rows, mean_error })
}

/// Rebuild the report of a finished run from its manifest and mask files.
pub fn report_from_run(dir: &Path) -> Result<AdherenceReport> {
    let manifest = RunManifest::load(&dir.join(MANIFEST_FILE))?;
    if manifest.masks.is_empty() {
        return Err(Error::Manifest("run recorded no masks (no trajectory?)".into()));
    }
    let groups = manifest.masks.iter().map(|m| m.group).max().unwrap_or(0) + 1;
    let mut masks: Vec<Vec<SemanticMask>> = vec![Vec::new(); groups];
    let mut boxes: Vec<Vec<GridBox>> = vec![Vec::new(); groups];
    let mut scale = 1.0;
    for rec in &manifest.masks {
        let path = dir.join(&rec.path);
        let bytes = fs::read(&path).map_err(|e| Error::io(path.clone(), e))?;
        let img = decode_pnm(&bytes)?;
        if (img.height, img.width) != (rec.grid_box.height(), rec.grid_box.width()) {
            return Err(Error::Manifest(format!("{} does not match its box", rec.path)));
        }
        let values = img.pixels.chunks(3).map(|p| p[0] >= 128).collect();
        masks[rec.group].push(SemanticMask {
            height: img.height,
            width: img.width,
            values,
            degenerate: rec.degenerate,
        });
        boxes[rec.group].push(rec.grid_box);
        scale = rec.scale;
    }
    adherence_report(&masks, &boxes, scale)
}

impl fmt::Display for AdherenceReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "group  frame  centroid_error  note")?;
        for r in &self.rows {
            let err = r.error.map_or("-".to_string(), |e| format!("{e:.4}"));
            let note = if r.degenerate {
                "degenerate (excluded)"
            } else if r.error.is_none() {
                "empty"
            } else {
                ""
            };
            writeln!(f, "{:>5}  {:>5}  {:>14}  {note}", r.group, r.frame + 1, err)?;
        }
        match self.mean_error {
            Some(m) => writeln!(f, "mean centroid error: {m:.4}"),
            None => writeln!(f, "mean centroid error: n/a"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corner_cell_is_two_root_two_from_center() {
        let b = GridBox::new(0, 0, 4, 4).unwrap();
        let mut m = SemanticMask::ones(4, 4);
        m.values.iter_mut().for_each(|v| *v = false);
        m.values[0] = true;
        let r = adherence_report(&[vec![m]], &[vec![b]], 1.0).unwrap();
        assert!((r.mean_error.unwrap() - 2.0 * 2f64.sqrt()).abs() < 1e-12);
    }
}
