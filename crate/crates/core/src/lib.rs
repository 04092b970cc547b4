//! Multi-atlas label fusion for neonatal brain MRI.
//!
//! Atlases vote on the tissue label of each voxel through smooth distance
//! priors. Which atlas to trust is itself a hidden field with a Potts
//! smoothness prior, inferred jointly with per-label intensity mixtures and
//! a multiplicative bias field by variational EM.
//!
//! The crate is organised bottom-up:
//!
//! * [`volume`], [`io`]: voxel grids, NIfTI-1 and raw I/O, resampling;
//! * [`atlas`]: atlases, manifests, the label table, age and MI selection;
//! * [`prior`]: signed distance transforms, logOdds prior, Potts term;
//! * [`intensity`]: Gaussian mixtures, the polynomial bias field;
//! * [`vem`]: the inference engine;
//! * [`metrics`]: Dice, generalized Dice, Tenengrad sharpness;
//! * [`phantom`]: synthetic atlas families with known ground truth;
//! * [`cli`]: the command implementations behind the `fuselage` binary.

pub mod atlas;
pub mod cli;
pub mod domain;
pub mod error;
pub mod intensity;
pub mod io;
pub mod math;
pub mod metrics;
pub mod phantom;
pub mod prior;
pub mod vem;
pub mod volume;

pub use atlas::{label_table, Atlas, AtlasSet, LabelTable};
pub use error::{Error, Result};
pub use vem::{run_vem, SegmentationResult, VemConfig, VemState};
pub use volume::{GridMeta, LabelVolume, ScalarVolume, Volume};
