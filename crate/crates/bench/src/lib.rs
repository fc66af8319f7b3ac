//! Criterion benchmarks for `otfs-isac`; see `benches/`.
