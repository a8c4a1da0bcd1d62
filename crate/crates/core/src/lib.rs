//! Leaf-region segmentation pretreatment in front of an eight-class plant
//! disease classifier, with the training, evaluation, and synthetic-data
//! harness needed to measure the in-domain / out-of-domain accuracy gap.

pub mod aop;
pub mod augment;
pub mod checkpoint;
pub mod classifier;
pub mod commands;
pub mod config;
pub mod dataset;
pub mod error;
pub mod gradcam;
pub mod image;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod plots;
pub mod report;
pub mod seeds;
pub mod synth;

pub use error::{Error, Result};

use candle_core::Device;

/// Environment variable naming the compute device.
pub const DEVICE_ENV: &str = "AOP_DEVICE";

/// Resolves the compute device from `AOP_DEVICE` (default `cpu`).
pub fn device_from_env() -> Result<Device> {
    match std::env::var(DEVICE_ENV) {
        Err(_) => Ok(Device::Cpu),
        Ok(name) => device_by_name(&name),
    }
}

pub fn device_by_name(name: &str) -> Result<Device> {
    match name.trim().to_ascii_lowercase().as_str() {
        "" | "cpu" => Ok(Device::Cpu),
        other => Err(Error::Config(format!("unsupported device {other:?}; this build supports \"cpu\""))),
    }
}
