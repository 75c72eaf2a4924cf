//! Zero-shot trajectory control.
//!
//! Queries at the target sites are reduced to `M` principal channels (one
//! basis shared by all frames), boxes are mapped onto each site's grid,
//! semantic masks are found by clustering cosine similarity to salient
//! points of frame 1, and the latent of frames `2..f` is moved by gradient
//! descent so their masked box crops match frame 1's.

pub mod boxes;
pub mod loss;
pub mod mask;
pub mod optimize;
pub mod pca;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::{TapAddress, TapKind};
use crate::error::{Error, Result};

pub use boxes::{map_box_to_grid, GridBox};
pub use loss::{alignment_loss, crop_resample_map, AlignmentTerm};
pub use mask::{
    aggregate_similarity, compute_masks, cosine, kmeans2, kmeans2_mask, select_salient_points,
    similarity_map, SemanticMask,
};
pub use optimize::{FiringRecord, Objective, OptOutcome, StepContext, TrajController};
pub use pca::{pca_reduce, reduce_tokens, symmetric_eigen, PcaBasis, ReducedFeature};

pub const DEFAULT_SALIENT_K: usize = 9;
pub const DEFAULT_PCA_DIM: usize = 64;

fn default_salient_k() -> usize {
    DEFAULT_SALIENT_K
}

fn default_pca_dim() -> usize {
    DEFAULT_PCA_DIM
}

/// Per-frame boxes `[x0, y0, x1, y1]` (pixels) of one controlled entity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxGroup {
    pub boxes: Vec<[f64; 4]>,
    #[serde(default = "default_salient_k")]
    pub salient_k: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectorySpec {
    pub groups: Vec<BoxGroup>,
    #[serde(default = "default_pca_dim")]
    pub pca_dim: usize,
}

impl TrajectorySpec {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| e.context(format!("trajectory {}", path.display())))
    }

    /// Every group repeats the same box on all `frames` frames.
    pub fn stationary(boxes: &[[f64; 4]], frames: usize) -> Self {
        Self {
            groups: boxes
                .iter()
                .map(|&b| BoxGroup {
                    boxes: vec![b; frames],
                    salient_k: DEFAULT_SALIENT_K,
                })
                .collect(),
            pca_dim: DEFAULT_PCA_DIM,
        }
    }

    /// `image = (height, width)` in pixels.
    pub fn validate(&self, frames: usize, image: (usize, usize)) -> Result<()> {
        if self.pca_dim == 0 {
            return Err(Error::Trajectory("pca_dim must be >= 1".into()));
        }
        for (i, g) in self.groups.iter().enumerate() {
            if g.boxes.len() != frames {
                return Err(Error::Trajectory(format!(
                    "group {i} has {} boxes for {frames} frames",
                    g.boxes.len()
                )));
            }
            if g.salient_k == 0 {
                return Err(Error::Trajectory(format!("group {i}: salient_k must be >= 1")));
            }
            for b in &g.boxes {
                map_box_to_grid(*b, image, image)
                    .map_err(|e| e.context(format!("group {i}")))?;
            }
        }
        Ok(())
    }

    /// Boxes of every group mapped onto a `grid = (height, width)`.
    pub fn grid_boxes(&self, image: (usize, usize), grid: (usize, usize)) -> Result<Vec<Vec<GridBox>>> {
        self.groups
            .iter()
            .map(|g| g.boxes.iter().map(|&b| map_box_to_grid(b, image, grid)).collect())
            .collect()
    }
}

/// Which feature the alignment loss reads at each target site.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptFeature {
    Query,
    Residual,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskMode {
    /// Recomputed at every optimizer firing.
    Adaptive,
    /// Computed at the first firing and reused.
    Static,
    /// All-ones masks.
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajOptions {
    /// Query sites whose (reduced) features are aligned; losses are summed.
    pub targets: Vec<TapAddress>,
    pub feature: OptFeature,
    pub masks: MaskMode,
    /// `false` aligns raw channels.
    pub pca: bool,
    /// Fit the basis at the first firing only.
    pub freeze_pca_basis: bool,
}

impl Default for TrajOptions {
    fn default() -> Self {
        Self {
            targets: vec![
                TapAddress::up(1, TapKind::Query, 1),
                TapAddress::up(2, TapKind::Query, 0),
            ],
            feature: OptFeature::Query,
            masks: MaskMode::Adaptive,
            pca: true,
            freeze_pca_basis: false,
        }
    }
}

impl TrajOptions {
    /// Site actually captured for `target` under the feature choice.
    pub fn capture_site(&self, target: &TapAddress) -> TapAddress {
        match self.feature {
            OptFeature::Query => target.with_kind(TapKind::Query),
            OptFeature::Residual => target.with_kind(TapKind::ResidualHidden),
        }
    }
}
