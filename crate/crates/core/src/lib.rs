//! Data-driven 6x6 covariance estimation for ICP point-cloud registration.
//!
//! The crate provides the full pipeline: an SE(3) kernel, point-cloud
//! filters and spatial indexing, a synthetic LiDAR scene simulator, a
//! trimmed point-to-plane ICP, labeled-dataset construction, a point
//! network with a Gaussian (mean + LDL covariance) head and built-in
//! reverse-mode gradients, negative-log-likelihood training, Monte-Carlo
//! dropout inference, and calibration metrics with trajectory covariance
//! propagation.

pub mod bayes;
pub mod dataset;
pub mod evaluation;
pub mod icp;
pub mod net;
pub mod pointcloud;
pub mod se3;
pub mod seeding;
pub mod sim;
pub mod svg;
pub mod training;

pub use bayes::{McConfig, UncertaintyReport};
pub use dataset::{Dataset, DatasetManifest, InitialGuessConfig, RegistrationSample};
pub use icp::{IcpConfig, IcpResult};
pub use net::{GaussianPrediction, NetworkConfig, NetworkParameters};
pub use pointcloud::{FilteredPair, PointCloud};
pub use se3::{CovarianceSE3, Pose, Twist};
pub use sim::{Archetype, Scene, SensorModel};
pub use training::{Checkpoint, TrainConfig};
