//! Benchmarks for the svkit back-end live in `benches/`.
