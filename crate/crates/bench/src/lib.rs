//! Benchmark-only crate: all content lives under `benches/`.
