//! Criterion benchmarks of the word-bridged transfer module against direct
//! pixel-to-pixel cross-attention; run with `cargo bench -p lbdt-bench`.
//! Throughput is reported in analytic FLOPs per iteration.
