//! Virtual-detector processing over partitioned 4D-STEM datasets.
//!
//! Raw detector data is ingested into a directory of frame-aligned partition
//! files described by a sidecar ([`dataset`]). Analyses read partitions in
//! cache-sized tiles ([`io`], [`codec`]), multiply each tile with a stack of
//! masks ([`kernels`]) and merge the per-partition partial results into a
//! result grid as they complete ([`executor`]). [`api`] wraps a job into a
//! blocking call for scripts.

pub mod codec;
pub mod dataset;
pub mod io;
pub mod kernels;
pub mod executor;
pub mod api;
