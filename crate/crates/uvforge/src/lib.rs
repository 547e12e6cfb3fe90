//! File formats, synthetic datasets, the experiment pipeline and the
//! `uvforge` command line.

pub mod cli;
pub mod config;
pub mod dataset;
pub mod formats;
pub mod pipeline;
