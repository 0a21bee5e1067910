//! Coherent-state process tomography of heralded photon creation and
//! annihilation: Fock-space primitives, a first-order simulator of the
//! heralded boxes, homodyne statistics, iterative maximum-likelihood process
//! reconstruction and post-reconstruction analysis.

pub mod analysis;
pub mod error;
pub mod fmt;
pub mod fock;
pub mod homodyne;
pub mod linalg;
pub mod process_sim;
pub mod scalar;
pub mod tomography;

pub use error::{Error, Result};
pub use process_sim::BlackBoxKind;
pub use scalar::{Real, C};

pub type PureState64 = fock::PureState<f64>;
pub type DensityMatrix64 = fock::DensityMatrix<f64>;
pub type FockOperator64 = fock::FockOperator<f64>;
pub type ProcessTensor64 = tomography::ProcessTensor<f64>;
pub type JamiolkowskiOperator64 = tomography::JamiolkowskiOperator<f64>;
pub type MleConfig64 = tomography::MleConfig<f64>;
pub type MleResult64 = tomography::MleResult<f64>;
pub type FidelityReport64 = analysis::FidelityReport<f64>;

pub type PureState32 = fock::PureState<f32>;
pub type DensityMatrix32 = fock::DensityMatrix<f32>;
pub type ProcessTensor32 = tomography::ProcessTensor<f32>;
