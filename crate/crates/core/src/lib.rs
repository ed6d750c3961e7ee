//! Longitudinal PET/CT quantification.
//!
//! The crate covers the non-neural half of the pipeline:
//!
//! - [`volgrid`]: volumes on physical grids, resampling, normalization, MVOL IO
//! - [`phantom`]: deterministic synthetic baseline/interim studies with ground truth
//! - [`lesions`]: threshold-union segmentation, connected components, Dice/FPV/FNV
//! - [`quant`]: MTV, TLG, SUVmax/SUVpeak, Dmax, Dspleen, ΔSUVmax, qPET
//! - [`longitudinal`]: rigid registration, mask propagation and MPDR filtering
//! - [`evaluation`]: detection scoring, Deauville conversion, agreement statistics,
//!   bootstrap intervals and cohort reports

pub mod error;
pub mod evaluation;
pub mod lesions;
pub mod longitudinal;
pub mod phantom;
pub mod quant;
pub mod seed;
pub mod volgrid;

pub use error::{Error, Result};
pub use lesions::{Connectivity, Lesion, LesionSet, Mask};
pub use volgrid::{BoundingBox, Grid, Interp, Kind, Volume3D};
