//! Multi-granularity sea-ice concentration forecasting.
//!
//! A shared window-attention codec turns every sea-ice frame into a compact
//! token; daily, weekly and monthly token sequences are embedded as three
//! variate tokens and fused by attention before being decoded back to grids.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod error;
pub mod fusion;
pub mod gradcore;
pub mod icegrid;
pub mod init;
pub mod metrics;
pub mod spatialcodec;
pub mod trainer;

pub use error::{Result, SifmError};
