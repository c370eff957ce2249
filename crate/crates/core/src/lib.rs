//! Claims-trajectory modeling toolkit.
//!
//! The crate covers the whole desk-scale pipeline: seeded synthetic claims
//! cohorts ([`synthgen`]), the token vocabulary and code-level codecs
//! ([`vocab`]), trajectory assembly and its inverse ([`tokenizer`]), a
//! decoder-only transformer written from scratch ([`model`]) with its two
//! training stages ([`training`]), and the evaluation harnesses for disease
//! onset ([`eval_onset`]), next-year expenditure ([`eval_expenditure`]) and
//! negative-control calibrated effect estimation ([`rwe`]). Shared
//! statistical kernels live in [`stats`].
//!
//! Numerical code that can run in either precision is generic over
//! [`Scalar`]; the concrete aliases below are what the pipeline uses.

pub mod calendar;
pub mod eval_expenditure;
pub mod eval_onset;
pub mod model;
pub mod money;
pub mod rwe;
pub mod seed;
pub mod stats;
pub mod synthgen;
pub mod tokenizer;
pub mod training;
pub mod vocab;

mod scalar;

pub use scalar::Scalar;

/// Training precision.
pub type ModelF32 = model::ModelState<f32>;
/// Gradient-check precision.
pub type ModelF64 = model::ModelState<f64>;
pub type GradsF32 = model::Grads<f32>;
pub type GradsF64 = model::Grads<f64>;
pub type TrainerF32 = training::Trainer<f32>;
pub type LossF32 = model::LossBreakdown<f32>;
pub type LossF64 = model::LossBreakdown<f64>;
