//! Differentiable substrate: tensors, a reverse-mode tape, Adam and a
//! finite-difference gradient checker.

mod adam;
mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamState};
pub use gradcheck::{grad_check, BlockReport, GradCheckOptions, GradCheckReport};
pub use params::{Gradients, ParamId, ParamStore};
#[doc(hidden)]
pub use tape::set_backward_fault;
pub use tape::{Graph, SentenceTerms, Var};
pub use tensor::{Real, Tensor};

pub(crate) use tape::sentence_terms;
#[cfg(test)]
pub(crate) use tape::smoothed_target;
