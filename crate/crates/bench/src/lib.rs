//! Criterion benchmarks for the autodiff engine and the bilevel solver; see `benches/`.
