use crate::error::{Error, Result};

/// A chain trajectory `s_1..s_T`, stored time-major: step `t` (0-based)
/// occupies `data[t*dim..(t+1)*dim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct StateSequence {
    data: Vec<f64>,
    len: usize,
    dim: usize,
}

impl StateSequence {
    pub fn zeros(len: usize, dim: usize) -> Result<Self> {
        Self::from_vec(vec![0.0; len * dim], len, dim)
    }

    pub fn from_vec(data: Vec<f64>, len: usize, dim: usize) -> Result<Self> {
        if len == 0 || dim == 0 {
            return Err(Error::Structure(format!(
                "state sequence needs T >= 1 and D >= 1, got T={len}, D={dim}"
            )));
        }
        if data.len() != len * dim {
            return Err(Error::Structure(format!(
                "buffer of {} values cannot hold T={len} x D={dim}",
                data.len()
            )));
        }
        Ok(Self { data, len, dim })
    }

    /// Every step set to `state`.
    pub fn repeat(state: &[f64], len: usize) -> Result<Self> {
        let mut data = Vec::with_capacity(len * state.len());
        for _ in 0..len {
            data.extend_from_slice(state);
        }
        Self::from_vec(data, len, state.len())
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn step(&self, t: usize) -> &[f64] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }

    pub fn step_mut(&mut self, t: usize) -> &mut [f64] {
        &mut self.data[t * self.dim..(t + 1) * self.dim]
    }

    pub fn steps(&self) -> std::slice::ChunksExact<'_, f64> {
        self.data.chunks_exact(self.dim)
    }

    /// Index of the first step holding a non-finite entry.
    pub fn first_non_finite(&self) -> Option<usize> {
        self.data
            .iter()
            .position(|x| !x.is_finite())
            .map(|i| i / self.dim)
    }

    pub fn same_shape(&self, other: &StateSequence) -> Result<()> {
        if self.len != other.len || self.dim != other.dim {
            return Err(Error::Structure(format!(
                "shape mismatch: {}x{} vs {}x{}",
                self.len, self.dim, other.len, other.dim
            )));
        }
        Ok(())
    }

    /// Column `d` across all steps.
    pub fn column(&self, d: usize) -> Vec<f64> {
        self.steps().map(|s| s[d]).collect()
    }
}

/// The chain's starting point `s_0`.
#[derive(Debug, Clone, PartialEq)]
pub struct InitialState(Vec<f64>);

impl InitialState {
    pub fn new(s0: Vec<f64>) -> Result<Self> {
        if s0.is_empty() {
            return Err(Error::Structure("initial state must be non-empty".into()));
        }
        if let Some(i) = s0.iter().position(|x| !x.is_finite()) {
            return Err(Error::Contract(format!("initial state entry {i} is not finite")));
        }
        Ok(Self(s0))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

impl AsRef<[f64]> for InitialState {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_checks() {
        assert!(StateSequence::zeros(0, 2).is_err());
        assert!(StateSequence::zeros(2, 0).is_err());
        assert!(StateSequence::from_vec(vec![0.0; 5], 2, 2).is_err());
        let s = StateSequence::from_vec((0..6).map(f64::from).collect(), 3, 2).unwrap();
        assert_eq!(s.step(1), &[2.0, 3.0]);
        assert_eq!(s.column(1), vec![1.0, 3.0, 5.0]);
    }

    #[test]
    fn initial_state_must_be_finite() {
        assert!(InitialState::new(vec![1.0, f64::NAN]).is_err());
        assert!(InitialState::new(vec![]).is_err());
        assert_eq!(InitialState::new(vec![1.0]).unwrap().dim(), 1);
    }

    #[test]
    fn non_finite_detection() {
        let mut s = StateSequence::zeros(4, 3).unwrap();
        assert_eq!(s.first_non_finite(), None);
        s.step_mut(2)[1] = f64::INFINITY;
        assert_eq!(s.first_non_finite(), Some(2));
    }
}
