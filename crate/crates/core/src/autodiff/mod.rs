//! Reverse-mode gradients over a static op tape, gradient checking, and AdamW.

mod gradcheck;
mod optim;
mod store;
mod tape;

pub use gradcheck::{relative_error, Gradcheck, GradcheckReport, InputCheck, DEFAULT_STEP, DEFAULT_TOL};
pub use optim::{adam_step, CosineSchedule, OptimConfig};
pub use store::{ParamSlot, ParamStore};
pub use tape::{Fault, Gradients, OpKind, Tape, Var};
