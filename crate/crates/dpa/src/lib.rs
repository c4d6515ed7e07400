//! Desk-scale dynamic-product-ads (DPA) stack.
//!
//! The crate builds up in layers:
//!
//! - [`offset`]: the factorization-based event predictor shared by every
//!   model (vector construction, scoring, incremental training, snapshots).
//! - [`click`]: the product click model with the four-level product
//!   hierarchy and the default-product-group policy.
//! - [`conv`]: conversion-given-click prediction, target-CPA derivation,
//!   final-bid computation, and bounded model publication.
//! - [`trendy`]: the lookalike eligibility model trained from advertiser
//!   pixel feeds, threshold-percentile curves, and bounded publication.
//! - [`serving`]: the request pipeline — gather, match, filter, preliminary
//!   auction, rank, dedupe, group, backfill, render.
//! - [`eval`]: log loss, AUC, lifts, wrapper forward selection, CPA and
//!   advertiser-happiness reports.
//! - [`workbench`]: synthetic world/feed generation, file codecs, and the
//!   end-to-end runner behind the `dpa` binary.
//!
//! See the crate `examples/` directory for one runnable walkthrough per
//! capability, and `dpa --help` for the file-driven CLI.

pub mod click;
pub mod conv;
pub mod error;
pub mod eval;
pub mod offset;
pub mod serving;
pub mod trendy;
// pub mod workbench;

pub use error::{Error, Result};

/// Monetary amounts are integer US cents throughout.
pub type Cents = i64;
