//! Class-incremental recognition of static hand gestures from 21-point hand
//! landmarks.
//!
//! The crate is organised bottom-up:
//!
//! - [`data`]: landmark frames, the JSON Lines landmark format, subject
//!   splits and a synthetic gesture generator.
//! - [`features`]: the translation-invariant landmark encodings.
//! - [`net`]: a small fully-connected classifier (batch norm, dropout, Adam,
//!   reduce-on-plateau) with distillation losses and a gradient checker.
//! - [`rehearsal`]: exemplar memory, herding and class means.
//! - [`strategies`]: Joint, fine-tuning, LwF, iCaRL and IL2M learners.
//! - [`harness`]: seeded incremental scenarios, aggregation, timing and
//!   metric files.

pub mod data;
pub mod error;
pub mod features;
pub mod harness;
pub mod net;
pub mod rehearsal;
pub mod strategies;

pub use error::{Error, Result};
