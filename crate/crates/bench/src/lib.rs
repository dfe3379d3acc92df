//! Benchmark fixtures.

use parmcmc_core::pscan::AffineElement;
use parmcmc_core::{AffineKind, AffineSeq, InitialState, MalaKernel, ModelSpec};

/// Deterministic contractive affine sequence.
pub fn affine_fixture(kind: AffineKind, dim: usize, len: usize) -> AffineSeq {
    let mut seq = AffineSeq::identity(kind, dim, len).expect("valid shape");
    let (j, u) = seq.parts_mut();
    for (i, v) in j.iter_mut().enumerate() {
        *v = 0.9 * ((i as f64) * 0.618_033_988_7).fract() - 0.45;
    }
    for (i, v) in u.iter_mut().enumerate() {
        *v = ((i as f64) * 0.414_213_562_4).fract() - 0.5;
    }
    seq
}

pub fn element_fixture(kind: AffineKind, dim: usize) -> AffineElement {
    affine_fixture(kind, dim, 1).element(0)
}

/// MALA on the default four-component mixture.
pub fn mog_mala(len: usize) -> (MalaKernel, InitialState) {
    let model = ModelSpec::mog_default().build().expect("valid model");
    let kernel = MalaKernel::new(model, 0.1, 3, len).expect("valid kernel");
    (kernel, InitialState::new(vec![3.0, 3.0]).expect("finite state"))
}
