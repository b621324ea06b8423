//! Benchmark-only crate; see `benches/ops.rs` for the measured hot paths.
