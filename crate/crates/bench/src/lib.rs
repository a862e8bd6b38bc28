//! Criterion benchmarks for the numeric kernels and pipeline stages; see
//! `benches/`.
