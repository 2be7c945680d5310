//! Benchmark-only crate; the timings live in `benches/pipeline.rs`.
//! Run them with `cargo bench -p puw-bench`.
