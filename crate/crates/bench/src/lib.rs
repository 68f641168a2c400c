//! Criterion benchmarks for the tensor, feature and layer kernels live in `benches/`.
