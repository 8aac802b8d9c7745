//! Sparsely-gated mixture-of-experts actors for vision-based legged locomotion.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`] and [`rng`]: dense row-major kernels and a counter-based,
//!   splittable random source.
//! * [`moe`]: noisy top-k gating, sparse expert blending, the importance
//!   (load-balancing) loss and analytic gradients.
//! * [`train`]: a small supervised loop that exercises the load-balancing loss.
//! * [`policy`]: MoE and dense actor networks, the 591-wide observation layout
//!   and parameter accounting.
//! * [`depth`]: the depth-image degradation pipeline and PGM/PFM I/O.
//! * [`domain_rand`]: randomization samplers and observation noising.
//! * [`rewards`]: locomotion reward terms and their weighted, floored sum.
//! * [`analysis`]: gate traces, expert utilization and gate sensitivity.

pub mod analysis;
pub mod depth;
pub mod domain_rand;
mod error;
pub mod moe;
pub mod policy;
pub mod rewards;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use moe::{GateResult, LoadBalanceReport, Mode, MoeGradients, MoeLayer};
pub use policy::{
    ActorKind, ActorSpec, DensePreset, Observation, ObservationLayout, ParamReport,
    PolicyNetwork, OBS_DIM,
};
pub use rng::Rng;
pub use tensor::{Batch, Matrix, Scalar};
