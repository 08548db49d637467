//! Criterion benchmarks for the attnpost kernels; see `benches/`.
