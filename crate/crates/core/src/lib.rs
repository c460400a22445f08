//! Registration toolkit for sparse, sequentially captured 3D surface scans.
//!
//! The crate covers the full pipeline: quaternion pose algebra ([`pose`]),
//! point clouds and their 2D coordinate-map projections ([`cloud`]),
//! synthetic scan generation ([`synth`]), a trimmed-ICP baseline ([`icp`]),
//! the pose-regression loss family ([`loss`]), a small convolutional pose
//! regressor trained by hand-rolled backprop ([`regressor`]), and multi-frame
//! fusion with outlier smoothing ([`fusion`]). File formats shared by the
//! CLI live in [`io`] and [`dataset`].
//!
//! All numeric state is `f64`. Every randomized routine takes (or derives)
//! an explicit seeded generator, so equal seeds give byte-identical results.

pub mod cloud;
pub mod dataset;
pub mod fusion;
pub mod icp;
pub mod io;
pub mod loss;
pub mod pose;
pub mod regressor;
pub mod synth;

pub(crate) mod vec3;
