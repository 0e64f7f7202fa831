//! Criterion benchmarks for the embedding, prototype and network kernels live in `benches/`.
