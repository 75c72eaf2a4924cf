//! Image IO, the toy latent codec, end-to-end runs, manifests and reports.

pub mod codec;
pub mod image;
pub mod manifest;
pub mod report;
pub mod run;

pub use codec::{pearson, ToyCodec};
pub use image::{decode_pnm, ingest_image, ConditionImage};
pub use manifest::{RunManifest, MANIFEST_FILE};
pub use report::{adherence_report, report_from_run, AdherenceReport, AdherenceRow};
pub use run::{
    generate, replay, run_generate, run_inspect_taps, run_invert, EmbeddingSource, GenerateRequest,
    Generation, LatentInit, RunConfig, RunMasks, Session,
};
