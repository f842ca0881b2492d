pub mod evaluation;
pub mod geometry;
pub mod ins;
pub mod io;
pub mod msckf;
pub mod pipeline;
pub mod scalar;
pub mod simulator;
pub mod tracking;

pub use scalar::Real;

pub type Pose = geometry::Pose<f64>;
pub type FilterState = msckf::FilterState<f64>;
pub type ImuSample = ins::ImuSample<f64>;
pub type LidarPoint = ins::LidarPoint<f64>;
pub type LsppCluster = tracking::LsppCluster<f64>;
pub type OdometryOutput = pipeline::OdometryOutput<f64>;
