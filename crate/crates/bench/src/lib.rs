//! Criterion benchmarks for pqflex. See `benches/`.
