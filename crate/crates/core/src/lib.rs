//! seqlab-core: a desk-scale sequence-to-sequence laboratory.
//!
//! Everything runs in 64-bit floats on a reverse-mode tape so that each
//! layer, optimizer rule, and decoding routine can be verified against
//! independent oracles (central differences, straight-line re-evaluations,
//! exhaustive enumeration) at small scale, while full-scale configurations
//! are instantiated symbolically for parameter and FLOP accounting.

pub mod arch;
pub mod data;
pub mod decode;
pub mod error;
pub mod nn;
pub mod optim;
pub mod param;
pub mod tensor;

pub use error::{Error, Result};
pub use param::{Fwd, Init, ParamBuilder, ParamId, ParamStore, StoreMode};
pub use tensor::{grad_check, grad_check_multi, Tape, Tensor, Var};
