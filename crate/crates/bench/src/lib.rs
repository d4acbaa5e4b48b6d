//! Criterion benchmarks for the simulator's hot paths; see `benches/round.rs`.
