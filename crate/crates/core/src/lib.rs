//! NMS-free set-prediction 3D object detection on synthetic LiDAR scenes.
//!
//! Pipeline: [`scene`] generates labeled point clouds, [`bev`] turns them into
//! a BEV feature map, [`model`] refines a fixed set of object queries into
//! detections, [`matcher`] supplies the set-to-set losses, [`dense`] is the
//! per-pixel baseline with NMS, [`metrics`] scores the results,
//! and [`harness`] runs training, distillation and evaluation.

pub mod bev;
pub mod config;
pub mod dense;
mod error;
pub mod geometry;
pub mod harness;
pub mod matcher;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod oracle;
pub mod scene;

pub use error::{Error, Result};
