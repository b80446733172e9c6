//! Criterion benchmarks for the engine kernels, reconstruction and AUC
//! live in `benches/`.
