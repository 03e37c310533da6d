//! Desk-scale laboratory for soft-prompt learning with a gated mixture of
//! frozen teacher prompts.
//!
//! A learnable soft prompt (the student) is trained against frozen teacher
//! embedding tables through a top-T gating network that picks
//! instance-specific teachers. The crate carries the full loss family
//! (cross-entropy, single- and mixture-prompt distillation, the selection
//! loss, and the l1/cosine/MMD transfer ablations), seeded synthetic task
//! generation, the training loop with its method variants, and the
//! base-to-new / few-shot / domain-shift / robustness evaluation protocols.
//! Every analytic gradient is checkable against the central finite-difference
//! oracle in [`numerics`].

pub mod backbone;
pub mod cli;
pub mod error;
pub mod eval;
pub mod gating;
pub mod jsonio;
pub mod numerics;
pub mod objectives;
pub mod rng;
pub mod run;
pub mod student;
pub mod synthdata;
pub mod trainer;

pub use error::{MopdError, Result};
