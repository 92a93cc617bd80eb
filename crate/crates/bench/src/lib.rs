// SPDX-License-Identifier: Apache-2.0

//! Criterion benchmarks for the tensor kernels and model passes live in
//! `benches/`. Run them with `cargo bench -p latentqa-bench`.
