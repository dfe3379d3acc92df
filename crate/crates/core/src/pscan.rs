//! Affine maps `x -> J x + u` under composition, and a blocked parallel scan
//! that evaluates the time-varying linear recursion `s_t = J_t s_{t-1} + u_t`.
//!
//! Three Jacobian representations are supported: dense `n x n`, diagonal, and
//! 2x2-block-diagonal (`n = 2h`, each block a length-`h` diagonal). The block
//! form composes with eight elementwise products of length `h` and stores
//! `4h = 2n` numbers per step.
//!
//! The scan runs in three passes: every chunk reduces its elements to one
//! affine summary in parallel, the summaries are applied to `s0` serially to
//! get each chunk's entry state, and every chunk then replays its recursion in
//! parallel. With `P` workers the span is `O(T/P + T/C)` for chunk length `C`.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::sequence::StateSequence;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AffineKind {
    Dense,
    Diag,
    Block2x2,
}

impl AffineKind {
    /// Stored Jacobian entries per element for a state of length `n`.
    pub fn jac_len(self, n: usize) -> usize {
        match self {
            AffineKind::Dense => n * n,
            AffineKind::Diag => n,
            AffineKind::Block2x2 => 2 * n,
        }
    }

    fn check_dim(self, n: usize) -> Result<()> {
        if n == 0 {
            return Err(Error::Structure("affine state dimension must be positive".into()));
        }
        if self == AffineKind::Block2x2 && n % 2 != 0 {
            return Err(Error::Structure(format!(
                "2x2-block element needs an even state length, got {n}"
            )));
        }
        Ok(())
    }
}

fn identity_into(kind: AffineKind, n: usize, j: &mut [f64], u: &mut [f64]) {
    u.fill(0.0);
    match kind {
        AffineKind::Dense => {
            j.fill(0.0);
            for i in 0..n {
                j[i * n + i] = 1.0;
            }
        }
        AffineKind::Diag => j.fill(1.0),
        AffineKind::Block2x2 => {
            let h = n / 2;
            j[..h].fill(1.0);
            j[h..3 * h].fill(0.0);
            j[3 * h..].fill(1.0);
        }
    }
}

/// `out = J x + u`.
#[inline]
pub(crate) fn apply_into(kind: AffineKind, n: usize, j: &[f64], u: &[f64], x: &[f64], out: &mut [f64]) {
    match kind {
        AffineKind::Dense => {
            for i in 0..n {
                let row = &j[i * n..(i + 1) * n];
                out[i] = row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + u[i];
            }
        }
        AffineKind::Diag => {
            for i in 0..n {
                out[i] = j[i] * x[i] + u[i];
            }
        }
        AffineKind::Block2x2 => {
            let h = n / 2;
            let (a, rest) = j.split_at(h);
            let (b, rest) = rest.split_at(h);
            let (c, d) = rest.split_at(h);
            let (xp, xv) = x.split_at(h);
            for i in 0..h {
                out[i] = a[i] * xp[i] + b[i] * xv[i] + u[i];
                out[h + i] = c[i] * xp[i] + d[i] * xv[i] + u[h + i];
            }
        }
    }
}

/// `(jo, uo) = (J2 J1, J2 u1 + u2)`, i.e. apply element 1 then element 2.
#[allow(clippy::too_many_arguments)]
fn compose_into(
    kind: AffineKind,
    n: usize,
    j2: &[f64],
    u2: &[f64],
    j1: &[f64],
    u1: &[f64],
    jo: &mut [f64],
    uo: &mut [f64],
) {
    match kind {
        AffineKind::Dense => {
            jo.fill(0.0);
            for i in 0..n {
                for k in 0..n {
                    let a = j2[i * n + k];
                    if a == 0.0 {
                        continue;
                    }
                    let row1 = &j1[k * n..(k + 1) * n];
                    let out = &mut jo[i * n..(i + 1) * n];
                    for (o, b) in out.iter_mut().zip(row1) {
                        *o += a * b;
                    }
                }
            }
        }
        AffineKind::Diag => {
            for i in 0..n {
                jo[i] = j2[i] * j1[i];
            }
        }
        AffineKind::Block2x2 => {
            let h = n / 2;
            for i in 0..h {
                let (a, b, c, d) = (j2[i], j2[h + i], j2[2 * h + i], j2[3 * h + i]);
                let (e, f, g, hh) = (j1[i], j1[h + i], j1[2 * h + i], j1[3 * h + i]);
                jo[i] = a * e + b * g;
                jo[h + i] = a * f + b * hh;
                jo[2 * h + i] = c * e + d * g;
                jo[3 * h + i] = c * f + d * hh;
            }
        }
    }
    apply_into(kind, n, j2, u2, u1, uo);
}

/// One affine map `x -> J x + u`.
#[derive(Debug, Clone, PartialEq)]
pub enum AffineElement {
    /// Row-major `n x n` Jacobian.
    Dense { j: Vec<f64>, u: Vec<f64> },
    Diag { j: Vec<f64>, u: Vec<f64> },
    /// The `2h x 2h` matrix `[[diag(a), diag(b)], [diag(c), diag(d)]]`; `u` has length `2h`.
    Block2x2 {
        a: Vec<f64>,
        b: Vec<f64>,
        c: Vec<f64>,
        d: Vec<f64>,
        u: Vec<f64>,
    },
}

impl AffineElement {
    pub fn identity(kind: AffineKind, n: usize) -> Result<Self> {
        kind.check_dim(n)?;
        let mut j = vec![0.0; kind.jac_len(n)];
        let mut u = vec![0.0; n];
        identity_into(kind, n, &mut j, &mut u);
        Ok(Self::from_parts(kind, n, j, u))
    }

    pub fn kind(&self) -> AffineKind {
        match self {
            AffineElement::Dense { .. } => AffineKind::Dense,
            AffineElement::Diag { .. } => AffineKind::Diag,
            AffineElement::Block2x2 { .. } => AffineKind::Block2x2,
        }
    }

    /// State length the map acts on.
    pub fn dim(&self) -> usize {
        match self {
            AffineElement::Dense { u, .. } | AffineElement::Diag { u, .. } | AffineElement::Block2x2 { u, .. } => {
                u.len()
            }
        }
    }

    fn validate(&self) -> Result<()> {
        let n = self.dim();
        self.kind().check_dim(n)?;
        let ok = match self {
            AffineElement::Dense { j, .. } => j.len() == n * n,
            AffineElement::Diag { j, .. } => j.len() == n,
            AffineElement::Block2x2 { a, b, c, d, .. } => [a, b, c, d].iter().all(|v| v.len() == n / 2),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Structure(format!("{:?} element has inconsistent sizes", self.kind())))
        }
    }

    fn flat_jac(&self) -> Vec<f64> {
        match self {
            AffineElement::Dense { j, .. } | AffineElement::Diag { j, .. } => j.clone(),
            AffineElement::Block2x2 { a, b, c, d, .. } => [a, b, c, d].iter().flat_map(|v| v.iter().copied()).collect(),
        }
    }

    fn bias(&self) -> &[f64] {
        match self {
            AffineElement::Dense { u, .. } | AffineElement::Diag { u, .. } | AffineElement::Block2x2 { u, .. } => u,
        }
    }

    fn from_parts(kind: AffineKind, n: usize, j: Vec<f64>, u: Vec<f64>) -> Self {
        match kind {
            AffineKind::Dense => AffineElement::Dense { j, u },
            AffineKind::Diag => AffineElement::Diag { j, u },
            AffineKind::Block2x2 => {
                let h = n / 2;
                AffineElement::Block2x2 {
                    a: j[..h].to_vec(),
                    b: j[h..2 * h].to_vec(),
                    c: j[2 * h..3 * h].to_vec(),
                    d: j[3 * h..].to_vec(),
                    u,
                }
            }
        }
    }

    /// `self ∘ first`: the map `x -> J_self (J_first x + u_first) + u_self`.
    pub fn compose(&self, first: &AffineElement) -> Result<AffineElement> {
        self.validate()?;
        first.validate()?;
        if self.kind() != first.kind() || self.dim() != first.dim() {
            return Err(Error::Structure(format!(
                "cannot compose {:?}({}) with {:?}({})",
                self.kind(),
                self.dim(),
                first.kind(),
                first.dim()
            )));
        }
        let kind = self.kind();
        let n = self.dim();
        let mut jo = vec![0.0; kind.jac_len(n)];
        let mut uo = vec![0.0; n];
        compose_into(kind, n, &self.flat_jac(), self.bias(), &first.flat_jac(), first.bias(), &mut jo, &mut uo);
        Ok(Self::from_parts(kind, n, jo, uo))
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.validate()?;
        if x.len() != self.dim() {
            return Err(Error::Structure(format!("state of length {} for map of dim {}", x.len(), self.dim())));
        }
        let mut out = vec![0.0; x.len()];
        apply_into(self.kind(), self.dim(), &self.flat_jac(), self.bias(), x, &mut out);
        Ok(out)
    }

    /// Row-major dense expansion of the Jacobian.
    pub fn to_dense(&self) -> Vec<f64> {
        let n = self.dim();
        let mut m = vec![0.0; n * n];
        match self {
            AffineElement::Dense { j, .. } => m.copy_from_slice(j),
            AffineElement::Diag { j, .. } => {
                for i in 0..n {
                    m[i * n + i] = j[i];
                }
            }
            AffineElement::Block2x2 { a, b, c, d, .. } => {
                let h = n / 2;
                for i in 0..h {
                    m[i * n + i] = a[i];
                    m[i * n + h + i] = b[i];
                    m[(h + i) * n + i] = c[i];
                    m[(h + i) * n + h + i] = d[i];
                }
            }
        }
        m
    }
}

/// `T` affine elements of one kind, stored contiguously.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineSeq {
    kind: AffineKind,
    dim: usize,
    len: usize,
    jac: Vec<f64>,
    bias: Vec<f64>,
}

impl AffineSeq {
    /// `len` identity elements.
    pub fn identity(kind: AffineKind, dim: usize, len: usize) -> Result<Self> {
        kind.check_dim(dim)?;
        let jl = kind.jac_len(dim);
        let mut jac = vec![0.0; jl * len];
        let mut bias = vec![0.0; dim * len];
        for (j, u) in jac.chunks_exact_mut(jl).zip(bias.chunks_exact_mut(dim)) {
            identity_into(kind, dim, j, u);
        }
        Ok(Self { kind, dim, len, jac, bias })
    }

    pub fn from_elements(elements: &[AffineElement]) -> Result<Self> {
        let first = elements
            .first()
            .ok_or_else(|| Error::Structure("empty element list".into()))?;
        let kind = first.kind();
        let dim = first.dim();
        let mut jac = Vec::with_capacity(kind.jac_len(dim) * elements.len());
        let mut bias = Vec::with_capacity(dim * elements.len());
        for (t, e) in elements.iter().enumerate() {
            e.validate()?;
            if e.kind() != kind || e.dim() != dim {
                return Err(Error::Structure(format!(
                    "element {t} is {:?}({}) but sequence is {kind:?}({dim})",
                    e.kind(),
                    e.dim()
                )));
            }
            jac.extend(e.flat_jac());
            bias.extend_from_slice(e.bias());
        }
        Ok(Self {
            kind,
            dim,
            len: elements.len(),
            jac,
            bias,
        })
    }

    pub fn kind(&self) -> AffineKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn jac_len(&self) -> usize {
        self.kind.jac_len(self.dim)
    }

    pub fn element(&self, t: usize) -> AffineElement {
        let jl = self.jac_len();
        AffineElement::from_parts(
            self.kind,
            self.dim,
            self.jac[t * jl..(t + 1) * jl].to_vec(),
            self.bias[t * self.dim..(t + 1) * self.dim].to_vec(),
        )
    }

    /// Mutable Jacobian and bias storage, for writers that fill elements in place.
    pub fn parts_mut(&mut self) -> (&mut [f64], &mut [f64]) {
        (&mut self.jac, &mut self.bias)
    }

    pub fn jacobians(&self) -> &[f64] {
        &self.jac
    }

    pub fn biases(&self) -> &[f64] {
        &self.bias
    }

    /// Truncate to the first `len` elements without freeing storage.
    pub fn resize(&mut self, len: usize) {
        let jl = self.jac_len();
        self.jac.resize(jl * len, 0.0);
        self.bias.resize(self.dim * len, 0.0);
        self.len = len;
    }
}

/// Default chunk length: `max(T / (8 * workers), 256)`.
pub fn default_chunk_len(len: usize, workers: usize) -> usize {
    (len / (8 * workers.max(1))).max(256)
}

fn check_s0(seq: &AffineSeq, s0: &[f64]) -> Result<()> {
    if s0.len() != seq.dim {
        return Err(Error::Structure(format!(
            "initial state has length {}, elements act on {}",
            s0.len(),
            seq.dim
        )));
    }
    if seq.len == 0 {
        return Err(Error::Structure("cannot solve an empty sequence".into()));
    }
    Ok(())
}

/// Plain loop `s_t = J_t s_{t-1} + u_t`.
pub fn sequential_affine_solve(seq: &AffineSeq, s0: &[f64]) -> Result<StateSequence> {
    check_s0(seq, s0)?;
    let mut out = vec![0.0; seq.len * seq.dim];
    replay(seq, 0, s0, &mut out);
    StateSequence::from_vec(out, seq.len, seq.dim)
}

/// Run the recursion for elements `start..start + out.len()/dim` from state `x`.
fn replay(seq: &AffineSeq, start: usize, x: &[f64], out: &mut [f64]) {
    let n = seq.dim;
    let jl = seq.jac_len();
    let mut prev = x.to_vec();
    for (k, dst) in out.chunks_exact_mut(n).enumerate() {
        let t = start + k;
        apply_into(
            seq.kind,
            n,
            &seq.jac[t * jl..(t + 1) * jl],
            &seq.bias[t * n..(t + 1) * n],
            &prev,
            dst,
        );
        prev.copy_from_slice(dst);
    }
}

/// All prefixes `(e_t ∘ ... ∘ e_1)(s0)` with the default chunking.
pub fn parallel_affine_solve(seq: &AffineSeq, s0: &[f64]) -> Result<StateSequence> {
    let mut out = vec![0.0; seq.len * seq.dim];
    parallel_affine_solve_into(seq, s0, None, &mut out)?;
    StateSequence::from_vec(out, seq.len, seq.dim)
}

/// Scan into a caller-provided buffer of `T * dim` values.
///
/// For a fixed `chunk_len` the result is bit-identical across runs and
/// worker counts; the default chunk length depends on the worker count.
pub fn parallel_affine_solve_into(
    seq: &AffineSeq,
    s0: &[f64],
    chunk_len: Option<usize>,
    out: &mut [f64],
) -> Result<()> {
    check_s0(seq, s0)?;
    let n = seq.dim;
    let len = seq.len;
    if out.len() != len * n {
        return Err(Error::Structure(format!(
            "output buffer holds {} values, need {}",
            out.len(),
            len * n
        )));
    }
    let chunk = chunk_len
        .unwrap_or_else(|| default_chunk_len(len, rayon::current_num_threads()))
        .max(1);
    let n_chunks = len.div_ceil(chunk);
    if n_chunks == 1 {
        replay(seq, 0, s0, out);
        return Ok(());
    }

    // Pass 1: per-chunk reductions (the last chunk's summary is never needed).
    let jl = seq.jac_len();
    let mut sum_j = vec![0.0; (n_chunks - 1) * jl];
    let mut sum_u = vec![0.0; (n_chunks - 1) * n];
    sum_j
        .par_chunks_mut(jl)
        .zip(sum_u.par_chunks_mut(n))
        .enumerate()
        .for_each(|(c, (aj, au))| {
            let start = c * chunk;
            let end = (start + chunk).min(len);
            aj.copy_from_slice(&seq.jac[start * jl..(start + 1) * jl]);
            au.copy_from_slice(&seq.bias[start * n..(start + 1) * n]);
            let mut tj = vec![0.0; jl];
            let mut tu = vec![0.0; n];
            for t in start + 1..end {
                compose_into(
                    seq.kind,
                    n,
                    &seq.jac[t * jl..(t + 1) * jl],
                    &seq.bias[t * n..(t + 1) * n],
                    aj,
                    au,
                    &mut tj,
                    &mut tu,
                );
                aj.copy_from_slice(&tj);
                au.copy_from_slice(&tu);
            }
        });

    // Pass 2: entry state of every chunk.
    let mut entry = vec![0.0; n_chunks * n];
    entry[..n].copy_from_slice(s0);
    for c in 0..n_chunks - 1 {
        let (done, rest) = entry.split_at_mut((c + 1) * n);
        apply_into(
            seq.kind,
            n,
            &sum_j[c * jl..(c + 1) * jl],
            &sum_u[c * n..(c + 1) * n],
            &done[c * n..],
            &mut rest[..n],
        );
    }

    // Pass 3: replay each chunk from its entry state.
    out.par_chunks_mut(chunk * n)
        .zip(entry.par_chunks(n))
        .enumerate()
        .for_each(|(c, (dst, x))| replay(seq, c * chunk, x, dst));
    Ok(())
}
