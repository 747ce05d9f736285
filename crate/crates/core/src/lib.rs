//! Instrumented toy-scale sequence models and the analysis toolkit around them.
//!
//! The crate is organised bottom-up:
//!
//! * [`meter`] — a guarded allocation meter that tracks live tensor bytes
//!   against an optional budget, with per-category accounting.
//! * [`tensor`] — dense row-major tensors plus the small set of numeric
//!   kernels shared by everything else (softmax, cosine distance, matmul).
//! * [`tape`] — a reverse-mode gradient tape over tensor operations; the
//!   same operation set runs eagerly when recording is off, so model code
//!   is written once and used for benchmarking and attribution alike.
//! * [`model`] — a small LLaMA-style transformer and a Mamba-style
//!   selective-SSM stack with matched parameter budgets.
//! * [`corpus`] — session ingestion, a byte-level fallback tokenizer, and a
//!   deterministic synthetic dialogue generator.
//! * [`bench`] — the load → warmup → reset-peak → measure benchmark
//!   protocol with out-of-budget handling.
//! * [`fit`] — least-squares cost-curve fitting, efficiency ratios, and
//!   crossover solving.
//! * [`repr`] — representation metrics: hidden-state dynamics, attention
//!   statistics, and gradient-based effective-context measurement.
//! * [`shift`] — segment-level shift scoring and detection metrics
//!   (percentile labelling, ROC-AUC, F1).
//! * [`report`] — CSV tables and SVG plots derived from pipeline artifacts.
//! * [`pipeline`] — the end-to-end runner and its manifest.

#![forbid(unsafe_code)]

pub mod bench;
pub mod corpus;
pub mod fit;
pub mod meter;
pub mod model;
pub mod pipeline;
pub mod report;
pub mod repr;
pub mod shift;
pub mod tape;
pub mod tensor;
