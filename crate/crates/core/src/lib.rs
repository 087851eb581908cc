//! Fusion of body-worn electromagnetic sensors with monocular camera
//! observations for articulated body pose and global trajectory recovery.

pub mod body;
pub mod calib;
pub mod error;
pub mod geom;
pub mod io;
pub mod metrics;
pub mod optim;
pub mod pipeline;
pub mod registration;
pub mod synth;

pub use error::{Error, Result};
