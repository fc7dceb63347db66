//! Criterion benchmarks for the geometry, placement and editor hot paths.
