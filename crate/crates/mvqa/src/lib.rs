//! File formats, the training pipeline, the command line and the HTTP
//! service around [`mvqa_core`].

pub mod cli;
pub mod io;
pub mod pipeline;
pub mod service;
