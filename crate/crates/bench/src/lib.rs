//! Criterion benchmarks for the codec, perturbation and protection paths.
//! Run with `cargo bench -p minusface-bench`.
