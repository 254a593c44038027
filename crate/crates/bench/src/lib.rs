//! Benchmarks for the solver, two-stage and FPCA kernels; see `benches/solvers.rs`.
