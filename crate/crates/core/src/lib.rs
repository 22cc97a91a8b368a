//! Micro-expression action unit detection: landmark-guided patch-token
//! attention, AU dependency attention, prompt-aligned contrastive training
//! and zero-shot emotion recognition, with a leave-one-subject-out harness.

pub mod cli;
pub mod config;
pub mod data;
pub mod encoders;
pub mod error;
pub mod gsd;
pub mod losses;
pub mod lsi;
pub mod mer;
pub mod model;
pub mod nn;
pub mod preprocess;
pub mod task;
pub mod train;
pub mod viz;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/intro.md")]
    mod intro {}
    #[doc = include_str!("../../../book/src/tokens.md")]
    mod tokens {}
    #[doc = include_str!("../../../book/src/attention.md")]
    mod attention {}
    #[doc = include_str!("../../../book/src/contrastive.md")]
    mod contrastive {}
    #[doc = include_str!("../../../book/src/emotions.md")]
    mod emotions {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/synthetic.md")]
    mod synthetic {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
