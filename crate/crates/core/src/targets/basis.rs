use crate::error::{Error, Result};
use crate::linalg;
use crate::sequence::{InitialState, StateSequence};
use crate::system::{JacobianMode, TransitionSystem};

/// Orthogonal `D x D` matrix `Q` (row-major) for the change of variables `z = Qᵀ s`.
#[derive(Debug, Clone, PartialEq)]
pub struct OrthogonalBasis {
    q: Vec<f64>,
    dim: usize,
    eigenvalues: Vec<f64>,
}

impl OrthogonalBasis {
    pub fn identity(dim: usize) -> Self {
        let mut q = vec![0.0; dim * dim];
        for i in 0..dim {
            q[i * dim + i] = 1.0;
        }
        Self {
            q,
            dim,
            eigenvalues: vec![1.0; dim],
        }
    }

    /// Wrap an explicit matrix, checking `‖QᵀQ - I‖_max ≤ 1e-10`.
    pub fn from_matrix(q: Vec<f64>, dim: usize) -> Result<Self> {
        if q.len() != dim * dim {
            return Err(Error::Structure(format!("expected {dim}x{dim} matrix, got {} values", q.len())));
        }
        let b = Self {
            q,
            dim,
            eigenvalues: vec![f64::NAN; dim],
        };
        let err = b.orthogonality_error();
        if !(err <= 1e-10) {
            return Err(Error::Structure(format!("matrix is not orthogonal (error {err:.2e})")));
        }
        Ok(b)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn matrix(&self) -> &[f64] {
        &self.q
    }

    /// Eigenvalues matching the columns, descending (NaN for explicit matrices).
    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    /// `max |QᵀQ - I|`.
    pub fn orthogonality_error(&self) -> f64 {
        let n = self.dim;
        let qtq = linalg::matmul(&linalg::transpose(&self.q, n), &self.q, n);
        let mut err = 0.0_f64;
        for i in 0..n {
            for j in 0..n {
                let want = if i == j { 1.0 } else { 0.0 };
                err = err.max((qtq[i * n + j] - want).abs());
            }
        }
        err
    }

    /// `out = Q z`.
    pub fn to_original(&self, z: &[f64], out: &mut [f64]) {
        linalg::matvec(&self.q, self.dim, z, out);
    }

    /// `out = Qᵀ s`.
    pub fn to_basis(&self, s: &[f64], out: &mut [f64]) {
        linalg::matvec_transpose(&self.q, self.dim, s, out);
    }

    pub fn sequence_to_original(&self, z: &StateSequence) -> Result<StateSequence> {
        self.map_sequence(z, |b, i, o| b.to_original(i, o))
    }

    pub fn sequence_to_basis(&self, s: &StateSequence) -> Result<StateSequence> {
        self.map_sequence(s, |b, i, o| b.to_basis(i, o))
    }

    pub fn initial_to_basis(&self, s0: &InitialState) -> Result<InitialState> {
        let mut z = vec![0.0; self.dim];
        self.to_basis(s0.as_slice(), &mut z);
        InitialState::new(z)
    }

    fn map_sequence(&self, s: &StateSequence, f: impl Fn(&Self, &[f64], &mut [f64])) -> Result<StateSequence> {
        if s.dim() != self.dim {
            return Err(Error::Structure(format!("sequence has dimension {}, basis {}", s.dim(), self.dim)));
        }
        let mut out = StateSequence::zeros(s.len(), s.dim())?;
        for t in 0..s.len() {
            f(self, s.step(t), out.step_mut(t));
        }
        Ok(out)
    }
}

/// Eigenbasis of a symmetric matrix, eigenvalues descending.
pub fn orthogonal_basis(c: &[f64], dim: usize) -> Result<OrthogonalBasis> {
    let (eigenvalues, q) = linalg::symmetric_eigen(c, dim)?;
    Ok(OrthogonalBasis { q, dim, eigenvalues })
}

/// `f̂_t(z) = Qᵀ f_t(Q z)`.
pub struct TransformedSystem<S> {
    inner: S,
    basis: OrthogonalBasis,
}

pub fn transform_system<S: TransitionSystem>(inner: S, basis: OrthogonalBasis) -> Result<TransformedSystem<S>> {
    if inner.dim() != basis.dim() {
        return Err(Error::Structure(format!(
            "system has dimension {}, basis {}",
            inner.dim(),
            basis.dim()
        )));
    }
    Ok(TransformedSystem { inner, basis })
}

impl<S> TransformedSystem<S> {
    pub fn basis(&self) -> &OrthogonalBasis {
        &self.basis
    }

    pub fn inner(&self) -> &S {
        &self.inner
    }
}

impl<S: TransitionSystem> TransitionSystem for TransformedSystem<S> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn steps(&self) -> usize {
        self.inner.steps()
    }

    fn step(&self, t: usize, prev: &[f64], next: &mut [f64]) {
        let d = self.dim();
        let mut x = vec![0.0; d];
        let mut y = vec![0.0; d];
        self.basis.to_original(prev, &mut x);
        self.inner.step(t, &x, &mut y);
        self.basis.to_basis(&y, next);
    }

    fn jvp(&self, t: usize, prev: &[f64], tangent: &[f64], out: &mut [f64]) {
        let d = self.dim();
        let mut x = vec![0.0; d];
        let mut w = vec![0.0; d];
        let mut y = vec![0.0; d];
        self.basis.to_original(prev, &mut x);
        self.basis.to_original(tangent, &mut w);
        self.inner.jvp(t, &x, &w, &mut y);
        self.basis.to_basis(&y, out);
    }

    fn step_jvps(&self, t: usize, prev: &[f64], tangents: &[f64], next: &mut [f64], out: &mut [f64]) {
        let d = self.dim();
        let mut x = vec![0.0; d];
        let mut y = vec![0.0; d];
        self.basis.to_original(prev, &mut x);
        let mut w = vec![0.0; tangents.len()];
        for (v, o) in tangents.chunks_exact(d).zip(w.chunks_exact_mut(d)) {
            self.basis.to_original(v, o);
        }
        let mut jw = vec![0.0; tangents.len()];
        self.inner.step_jvps(t, &x, &w, &mut y, &mut jw);
        self.basis.to_basis(&y, next);
        for (j, o) in jw.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
            self.basis.to_basis(j, o);
        }
    }

    fn supports(&self, mode: JacobianMode) -> bool {
        !matches!(mode, JacobianMode::Block2x2Stochastic)
    }
}
