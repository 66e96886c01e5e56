//! Benchmark-only crate; see `benches/benchmarks.rs`.
