//! Benchmark-only crate; see `benches/scan.rs`.
