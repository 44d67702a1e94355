//! District comparative analytics: ingest raw state tables, clean them,
//! re-attribute direct-funded charters, match each district with its most
//! similar peers and emit self-contained per-district workbook bundles.

pub mod entities;
pub mod error;
pub mod ingest;
pub mod metrics;
pub mod model;
pub mod peers;
pub mod quality;
pub mod storedir;
pub mod synth;
pub mod workbook;

pub use error::{AlmanacError, Result};
