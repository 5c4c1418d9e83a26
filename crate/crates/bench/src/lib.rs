//! Benchmarks for the polymodel kernels live under `benches/`.
