//! Parallel-in-time evaluation of MCMC chains.
//!
//! A chain `s_t = f_t(s_{t-1})` with fixed input noise is solved as a fixed
//! point: every transition is linearized around the current trajectory guess
//! and the resulting linear recursion is evaluated with a parallel scan. The
//! converged trajectory equals the sequential chain up to tolerance.

pub mod deer;
pub mod error;
pub mod linalg;
pub mod metrics;
pub mod noise;
pub mod pscan;
pub mod samplers;
pub mod sequence;
pub mod system;
pub mod targets;

pub use deer::{run_deer, DeerConfig, DeerResult};
pub use error::{Error, Result};
pub use metrics::{
    acceptance_rate, ess, median_heuristic, mmd_subsampled, mmd_unbiased, trace_error, EssReport, KernelParams,
    MmdEstimate, SampleSet, TraceError,
};
pub use noise::{Distribution, NoiseLayout, NoiseTable, ProbeStream, SlotId};
pub use pscan::{AffineElement, AffineKind, AffineSeq};
pub use samplers::{GatedKernel, GibbsKernel, HmcKernel, LeapfrogMode, LeapfrogSystem, MalaKernel};
pub use sequence::{InitialState, StateSequence};
pub use system::{sequential_evaluate, JacobianMode, TransitionSystem};
pub use targets::{ModelSpec, TargetModel};
