//! Independent reference implementations used by several test targets.
#![allow(dead_code)]

pub mod fixtures;
pub mod lp_oracle;
pub mod metric_oracle;
