//! Generalized multi-head attention family under one roof: FPBA, MHA, MQA,
//! GQA, MLA, MFA, and MFA-KR, each in both its inference formulation
//! (explicit per-token keys/values) and its factorized formulation (folded
//! score/output matrices), with KV-cached incremental decoding that exactly
//! matches full-sequence forwards, closed-form capacity/memory accounting
//! cross-checked against constructed weight sets, and a small deterministic
//! byte-level training harness.
//!
//! Start with the runnable walkthroughs in `examples/`; the `gmha` binary
//! exposes the same functionality as subcommands (`report`, `equiv`,
//! `gradcheck`, `train`, `decode`).

pub mod alibi;
pub mod arch;
pub mod capacity;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod attention;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod kr;
pub mod kvcache;
pub mod linalg;
pub mod model;
pub mod optim;
pub mod oracles;
pub mod rope;
pub mod tensor;
pub mod train;
pub mod weights;

pub use arch::{ArchKind, ArchSpec, KrVariant, ModelDims, PosEmbed};
pub use error::{Error, Result};
pub use graph::{Graph, NodeId};
pub use tensor::Tensor;
pub use weights::{audit_shapes, expected_shapes, AttnWeights, ShapeViolation};
