//! Deformable 3D image registration with feature-based similarity metrics.

pub mod config;
pub mod error;
pub mod evaluation;
pub mod features;
pub mod io;
pub mod optimizer;
pub mod phantom;
pub mod pipeline;
pub mod pyramid;
pub mod sampling;
pub mod similarity;
pub mod spline;
pub mod transform;
pub mod volume;

pub use error::{Error, Result};
pub use spline::{prefilter_cubic, Patch, PatchGeometry, SplineCoefficientVolume};
pub use transform::{AffineTransform, BSplineTransform, CompositeTransform, Transform};
pub use volume::{BinaryMask, Grid, Point3, Volume};
