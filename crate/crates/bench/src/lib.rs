//! Criterion benchmarks for the precompute, sampler and training epoch.
//! Run with `cargo bench -p degfairgt-bench`.
