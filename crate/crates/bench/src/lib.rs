//! Criterion benchmarks for the hot paths of `qgs-core`; see `benches/`.
