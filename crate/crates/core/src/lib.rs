//! Measuring how invariances are shared, forgotten, learned, compressed and
//! expanded between a reference network and a target network.
//!
//! The crate is `no_std` (it needs `alloc`). File formats, the command line
//! front end and thread pools live in the `ilens` companion crate.
#![no_std]

extern crate alloc;
#[cfg(feature = "std")]
extern crate std;

pub mod error;
pub mod exec;
pub mod invert;
pub mod metrics;
pub mod numerics;
pub mod sim;
pub mod train;
pub mod data;
pub mod zoo;
pub mod dynamics;

pub use error::{Error, Result};
