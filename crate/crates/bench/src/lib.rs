//! Criterion benchmarks for the shrinkage, operator and network kernels; see
//! `benches/kernels.rs`.
