//! Image-quality metrics, attention interpretation, and evaluation reports.

pub mod interp;
pub mod metrics;
pub mod report;
