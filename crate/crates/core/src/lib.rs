//! Tissue oxygenation from multispectral reflectance.
//!
//! The crate covers the whole pipeline: sampling layered tissue, Monte-Carlo
//! light transport, projection onto the bands of a snapshot camera, small
//! plain and domain-adversarial neural regressors, a Beer–Lambert unmixing
//! baseline, and the clinical-style validation against capillary lactate.
//!
//! Numerical code that has to run in both single and double precision (the
//! network engine, datasets, curve fitting) is generic over [`Scalar`];
//! concrete aliases for the common instantiations live at the crate root.

pub mod clinical;
pub mod cube;
pub mod dataset;
pub mod error;
pub mod network;
pub mod optics;
pub mod rng;
pub mod scalar;
pub mod spectral;
pub mod transport;
pub mod unmixing;

pub use error::{Error, ErrorKind, Result};
pub use scalar::Scalar;

/// Single-precision network, the type used for training and inference.
pub type Network32 = network::Network<f32>;
/// Double-precision network, used for gradient checks.
pub type Network64 = network::Network<f64>;
/// Dataset stored in the 32-bit on-disk layout.
pub type Dataset32 = dataset::Dataset<f32>;
pub type Dataset64 = dataset::Dataset<f64>;
pub type BandSpectrum64 = spectral::BandSpectrum<f64>;
