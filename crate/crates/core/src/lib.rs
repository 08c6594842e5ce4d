//! Domain alignment for semantic segmentation.
//!
//! Image-level alignment (photometric and texture) plus feature-level
//! alignment (manifold projection, category triplets, target consistency)
//! with analytic gradients. Numeric code is generic over [`Scalar`]
//! (`f32` or `f64`); aliases for both are exported here.

pub mod artifact;
pub mod catreg;
pub mod colorspace;
pub mod error;
pub mod gma;
pub mod gpa;
pub mod gtexa;
pub mod imgio;
pub mod matrix;
pub mod rng;
pub mod scalar;
pub mod tcr;
pub mod toytrain;

pub use error::{Error, Result};
pub use imgio::{ImageRgb, LabelMap, IGNORE_LABEL};
pub use matrix::Matrix;
pub use scalar::Scalar;

pub type ImageRgbF32 = imgio::ImageRgb<f32>;
pub type ImageRgbF64 = imgio::ImageRgb<f64>;
pub type ImageLabF32 = colorspace::ImageLab<f32>;
pub type ImageLabF64 = colorspace::ImageLab<f64>;
pub type MatrixF32 = matrix::Matrix<f32>;
pub type MatrixF64 = matrix::Matrix<f64>;
pub type PcaModelF32 = gma::PcaModel<f32>;
pub type PcaModelF64 = gma::PcaModel<f64>;
pub type ManifoldProjectorF32 = gma::ManifoldProjector<f32>;
pub type ManifoldProjectorF64 = gma::ManifoldProjector<f64>;
pub type CategoryCentersF32 = catreg::CategoryCenters<f32>;
pub type CategoryCentersF64 = catreg::CategoryCenters<f64>;
pub type ProbabilityMapF32 = tcr::ProbabilityMap<f32>;
pub type ProbabilityMapF64 = tcr::ProbabilityMap<f64>;
pub type ToySegmenterF32 = toytrain::ToySegmenter<f32>;
pub type ToySegmenterF64 = toytrain::ToySegmenter<f64>;
