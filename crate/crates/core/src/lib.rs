//! Toolkit for context-rich expressive-appropriateness evaluation of narrative speech.
//!
//! The crate covers the deterministic machinery of an LLM-judge evaluation
//! pipeline for expressive speech:
//!
//! * [`corpus`] — annotated narrative corpora: JSONL ingestion, validation,
//!   duration filtering and score-balanced resampling for RL training sets.
//! * [`context`] — cumulative context-window construction around a target line.
//! * [`planner`] — expressive-planner prompting, plan parsing and joint voting
//!   across context sizes.
//! * [`judge`] — judge/baseline prompt rendering, verdict parsing, and token
//!   region annotation for the attention-bias kernel.
//! * [`attnbias`] — the adaptive audio attention bias: region masks, gated
//!   per-position coefficients, biased attention, dynamic traces, gradient
//!   checking and a lossless text export format.
//! * [`reward`] — distance-aware scoring rewards, buckets, group advantages
//!   and the clipped policy objective.
//! * [`metrics`] — correlation/accuracy scoring plus inter-rater agreement
//!   (ICC(2,1), percent agreement, embedding similarity, VAD-lexicon ICC).
//! * [`backend`] — pluggable chat/embedding backends: an HTTP client with
//!   retry/backoff and a deterministic mock for offline runs.
//! * [`pipeline`] — end-to-end orchestration: content-addressed run
//!   directories, persisted intermediates, reports.
//!
//! Model calls always go through the [`backend::ChatBackend`] trait, so every
//! pipeline stage can run fully offline against [`backend::MockBackend`].

pub mod attnbias;
pub mod backend;
pub mod context;
pub mod corpus;
pub mod judge;
pub mod metrics;
pub mod pipeline;
pub mod planner;
pub mod reward;
pub mod templates;
