//! Helical cone-beam CT at desk scale: acquisition geometry with a flying
//! focal spot, analytic and ray-driven projection, row-wise rebinning and
//! weighted FBP, bilateral filtering in the sinogram and volume domains,
//! quality metrics, and a double-DQN agent that tunes the four filter
//! sigmas.

pub mod agent;
pub mod error;
pub mod filters;
pub mod geometry;
pub mod io;
pub mod metrics;
pub mod phantom;
pub mod pipeline;
pub mod projector;
pub mod rebin;
pub mod recon;
pub mod sinogram;
pub mod volume;

pub use error::{Error, FileError, Result};
pub use geometry::{FfsMode, ScanGeometry};
pub use sinogram::{Layout, Sinogram};
pub use volume::{Volume, VolumeGrid};
