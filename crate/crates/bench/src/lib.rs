//! Criterion benchmarks of the lpsv kernels live under `benches/`.
