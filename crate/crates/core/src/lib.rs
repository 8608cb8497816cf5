//! Cooperative vehicle localization in GPS-degraded urban scenes.
//!
//! The ego vehicle registers its LiDAR scan against a reference map merged
//! from infrastructure and other vehicles' sensors, gates the registrations
//! by local fitness/RMSE envelopes, and fuses the accepted poses with
//! scan-matching odometry to correct a noisy GPS trajectory.
//!
//! Module map:
//! - [`geometry`]: points, clouds, rigid transforms, voxel grids, normals,
//!   k-d tree, PLY I/O
//! - [`descriptors`]: FPFH features and descriptor matching
//! - [`registration`]: closed-form alignment, RANSAC, ICP, full pipeline
//! - [`gps`]: multipath / ionospheric / PDOP error model
//! - [`slam`]: scan-to-map odometry
//! - [`fusion`]: reference-map building, validity gate, trajectory fusion
//! - [`sim`]: synthetic intersection, trajectories, ray-cast LiDAR
//! - [`eval`]: error metrics, per-cell runs and the scenario sweep

pub mod descriptors;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod geometry;
pub mod gps;
pub mod par;
pub mod registration;
pub mod rng;
pub mod sim;
pub mod slam;

pub use error::{Error, Result};
pub use geometry::{Point3, PointCloud, RigidTransform, SpatialIndex, Vector3};
