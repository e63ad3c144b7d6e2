//! LiDAR SLAM with intensity-aware features, a reflectivity map and
//! intensity scan-context loop closure.

mod par;

pub mod calibration;
pub mod config;
pub mod evaluation;
pub mod features;
pub mod geometry;
pub mod io;
pub mod loop_closure;
pub mod mapping;
pub mod matching;
pub mod pipeline;
pub mod pose_graph;
pub mod simulator;
pub mod spatial;

pub use geometry::{Point, Pose, Scan};
