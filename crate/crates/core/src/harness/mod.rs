//! Experiment plumbing: synthetic corpora and workloads, configuration,
//! offline benchmarks and reports.

pub mod bench;
pub mod config;
pub mod corpus;
pub mod report;
pub mod workload;
