//! Modality-agnostic fMRI decoding toolkit.
//!
//! The pipeline runs voxel time series through a two-phase GLM to get
//! single-trial betas ([`glm`]), fits cross-validated multi-target ridge
//! decoders into model feature spaces ([`ridge`]), scores them with
//! cosine-distance pairwise accuracy ([`eval`]), optionally restricted to
//! atlas-defined regions ([`roi`]). [`synth`] provides a ground-truth
//! forward model for verification and [`report`] drives experiment grids.

pub mod error;
pub mod eval;
pub mod glm;
pub mod model;
pub mod ndm;
pub mod report;
pub mod ridge;
pub mod roi;
pub mod synth;

pub use error::{Error, Result};
pub use model::{
    assemble_dataset, select_modality, BetaMatrix, Dataset, FeatureMatrix, FeatureModality,
    Modality, Role, RunId, ScanParams, StimulusEvent,
};
