//! Benchmarks live in `benches/`; run them with `cargo bench -p es2emb-bench`.
