//! Criterion benchmarks for the simulation, loss and reparameterization kernels; see `benches/`.
