//! Weekly price-direction classification driven by index membership.
//!
//! The crate covers the whole analysis chain: parsing constituent snapshots
//! and company panels ([`ingest`]), grouping and sampling companies by how
//! often they were constituents ([`cohort`]), building normalized labeled
//! datasets ([`dataset`]), screening features with a logistic regression
//! ([`logit`]), training a small sigmoid network on the survivors ([`mlp`]),
//! and orchestrating all of it per company ([`pipeline`]). [`synth`] produces
//! data from a planted model for end-to-end checks.

pub mod cohort;
pub mod dataset;
pub mod ingest;
pub mod logit;
pub mod mlp;
pub mod pipeline;
pub mod seed;
pub mod stats;
pub mod synth;

pub use cohort::{GroupAssignment, MembershipCount};
pub use dataset::{ColumnMeta, LabeledDataset, TargetMode};
pub use ingest::{CompanyPanel, MembershipSnapshot, TradingDate};
pub use logit::LogitFit;
pub use mlp::{EvalReport, NetworkModel};
pub use pipeline::{PipelineConfig, PipelineReport};
pub use synth::PlantedModel;
