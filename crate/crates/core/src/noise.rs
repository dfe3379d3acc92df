//! Counter-based input randomness.
//!
//! Every random number consumed by a transition is addressed by
//! `(seed, t, slot, k)` and produced by a Philox4x32-10 block cipher, so the
//! sequential oracle and every parallel solver read bit-identical noise no
//! matter which worker evaluates which step, or in which order.

use rayon::prelude::*;
use statrs::function::erf::erfc_inv;
use statrs::function::gamma::{gamma_lr, ln_gamma};

use crate::error::{Error, Result};

const PHILOX_M0: u32 = 0xD251_1F53;
const PHILOX_M1: u32 = 0xCD9E_8D57;
const PHILOX_W0: u32 = 0x9E37_79B9;
const PHILOX_W1: u32 = 0xBB67_AE85;

/// Philox4x32 with 10 rounds.
pub fn philox4x32(counter: [u32; 4], key: [u32; 2]) -> [u32; 4] {
    let mut c = counter;
    let mut k = key;
    for _ in 0..10 {
        let p0 = u64::from(PHILOX_M0) * u64::from(c[0]);
        let p1 = u64::from(PHILOX_M1) * u64::from(c[2]);
        let (hi0, lo0) = ((p0 >> 32) as u32, p0 as u32);
        let (hi1, lo1) = ((p1 >> 32) as u32, p1 as u32);
        c = [hi1 ^ c[1] ^ k[0], lo1, hi0 ^ c[3] ^ k[1], lo0];
        k[0] = k[0].wrapping_add(PHILOX_W0);
        k[1] = k[1].wrapping_add(PHILOX_W1);
    }
    c
}

fn seed_key(seed: u64) -> [u32; 2] {
    [seed as u32, (seed >> 32) as u32]
}

/// FNV-1a; gives each slot its own counter namespace independent of layout order.
fn slot_tag(name: &str) -> u32 {
    let mut h: u32 = 0x811C_9DC5;
    for b in name.bytes() {
        h ^= u32::from(b);
        h = h.wrapping_mul(0x0100_0193);
    }
    h
}

/// Maps 52 random bits onto the open interval (0, 1).
#[inline]
pub fn open_unit(bits: u64) -> f64 {
    ((bits >> 12) as f64 + 0.5) * (1.0 / (1u64 << 52) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Distribution {
    StandardNormal,
    Uniform,
    /// Chi-squared with the given (possibly fractional) degrees of freedom.
    ChiSquared(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SlotSpec {
    pub name: String,
    pub count: usize,
    pub dist: Distribution,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct NoiseLayout {
    slots: Vec<SlotSpec>,
}

impl NoiseLayout {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_slot(mut self, name: &str, count: usize, dist: Distribution) -> Self {
        self.slots.push(SlotSpec {
            name: name.to_string(),
            count,
            dist,
        });
        self
    }

    pub fn slots(&self) -> &[SlotSpec] {
        &self.slots
    }

    fn validate(&self) -> Result<()> {
        for (i, s) in self.slots.iter().enumerate() {
            if self.slots[..i].iter().any(|o| o.name == s.name) {
                return Err(Error::Config(format!("duplicate noise slot {:?}", s.name)));
            }
            if let Distribution::ChiSquared(nu) = s.dist {
                if !(nu > 0.0 && nu.is_finite()) {
                    return Err(Error::Config(format!(
                        "slot {:?}: chi-squared dof must be positive, got {nu}",
                        s.name
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Handle to a declared slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SlotId(usize);

/// The pure counter-based draw behind every table lookup.
pub fn noise_value(seed: u64, t: usize, slot: &str, k: usize, dist: Distribution) -> f64 {
    let ctr = [t as u32, (t as u64 >> 32) as u32, k as u32, slot_tag(slot)];
    let out = philox4x32(ctr, seed_key(seed));
    let w0 = (u64::from(out[0]) << 32) | u64::from(out[1]);
    let w1 = (u64::from(out[2]) << 32) | u64::from(out[3]);
    match dist {
        Distribution::Uniform => open_unit(w0),
        Distribution::StandardNormal => {
            let u1 = open_unit(w0);
            let u2 = open_unit(w1);
            (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
        }
        Distribution::ChiSquared(nu) => chi_squared_quantile(nu, open_unit(w0)),
    }
}

/// Seed-addressable input randomness for `steps` transitions.
///
/// Lookups are pure in `(seed, t, slot, k)`. `materialize` caches every draw
/// up front; cached and on-demand values are bit-identical.
#[derive(Debug, Clone)]
pub struct NoiseTable {
    seed: u64,
    layout: NoiseLayout,
    steps: usize,
    cache: Option<Vec<Vec<f64>>>,
}

impl NoiseTable {
    pub fn new(seed: u64, layout: NoiseLayout, steps: usize) -> Result<Self> {
        layout.validate()?;
        Ok(Self {
            seed,
            layout,
            steps,
            cache: None,
        })
    }

    /// Precompute every draw in parallel.
    pub fn materialize(mut self) -> Self {
        let seed = self.seed;
        let steps = self.steps;
        let cache = self
            .layout
            .slots
            .iter()
            .map(|s| {
                let mut buf = vec![0.0; steps * s.count];
                if s.count > 0 {
                    buf.par_chunks_mut(s.count).enumerate().for_each(|(t, row)| {
                        for (k, x) in row.iter_mut().enumerate() {
                            *x = noise_value(seed, t, &s.name, k, s.dist);
                        }
                    });
                }
                buf
            })
            .collect();
        self.cache = Some(cache);
        self
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn layout(&self) -> &NoiseLayout {
        &self.layout
    }

    pub fn is_materialized(&self) -> bool {
        self.cache.is_some()
    }

    pub fn slot(&self, name: &str) -> Result<SlotId> {
        self.layout
            .slots
            .iter()
            .position(|s| s.name == name)
            .map(SlotId)
            .ok_or_else(|| Error::Config(format!("undeclared noise slot {name:?}")))
    }

    pub fn slot_count(&self, slot: SlotId) -> usize {
        self.layout.slots[slot.0].count
    }

    /// Single draw by slot name.
    pub fn noise_at(&self, t: usize, slot: &str, k: usize) -> Result<f64> {
        let id = self.slot(slot)?;
        let spec = &self.layout.slots[id.0];
        if t >= self.steps {
            return Err(Error::Index {
                what: "noise step",
                index: t,
                len: self.steps,
            });
        }
        if k >= spec.count {
            return Err(Error::Index {
                what: "noise slot entry",
                index: k,
                len: spec.count,
            });
        }
        Ok(match &self.cache {
            Some(c) => c[id.0][t * spec.count + k],
            None => noise_value(self.seed, t, &spec.name, k, spec.dist),
        })
    }

    /// Copy all draws of `slot` at step `t` into `out`.
    ///
    /// Panics if `t` is past the table or `out` has the wrong length; callers
    /// hold a validated `SlotId`.
    pub fn fill(&self, t: usize, slot: SlotId, out: &mut [f64]) {
        let spec = &self.layout.slots[slot.0];
        assert!(t < self.steps, "noise step {t} beyond table of {}", self.steps);
        assert_eq!(out.len(), spec.count);
        match &self.cache {
            Some(c) => out.copy_from_slice(&c[slot.0][t * spec.count..(t + 1) * spec.count]),
            None => {
                for (k, x) in out.iter_mut().enumerate() {
                    *x = noise_value(self.seed, t, &spec.name, k, spec.dist);
                }
            }
        }
    }

    /// Scalar draw for single-entry slots.
    pub fn scalar(&self, t: usize, slot: SlotId) -> f64 {
        let mut v = [0.0];
        self.fill(t, slot, &mut v);
        v[0]
    }
}

const PROBE_SALT: u64 = 0x5851_F42D_4C95_7F2D;

/// Rademacher probe vectors for stochastic Jacobian-diagonal estimates,
/// keyed by `(iteration, t, sample)` so each Newton iteration draws fresh probes.
#[derive(Debug, Clone, Copy)]
pub struct ProbeStream {
    seed: u64,
}

impl ProbeStream {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn fill_rademacher(&self, iteration: usize, t: usize, sample: usize, out: &mut [f64]) {
        let key = seed_key(self.seed ^ PROBE_SALT);
        for (block, chunk) in out.chunks_mut(128).enumerate() {
            let ctr = [
                t as u32,
                iteration as u32,
                sample as u32,
                (block as u32) ^ (((t as u64) >> 32) as u32).rotate_left(16),
            ];
            let bits = philox4x32(ctr, key);
            for (i, z) in chunk.iter_mut().enumerate() {
                let bit = (bits[i / 32] >> (i % 32)) & 1;
                *z = if bit == 1 { 1.0 } else { -1.0 };
            }
        }
    }
}

/// Quantile function of the chi-squared distribution with `nu` degrees of freedom.
///
/// Solves `P(nu/2, x/2) = u` for `x` by Newton steps safeguarded with a
/// bisection bracket, to 1e-12 absolute (and relative below one).
pub fn chi_squared_quantile(nu: f64, u: f64) -> f64 {
    debug_assert!(nu > 0.0 && u > 0.0 && u < 1.0);
    let a = 0.5 * nu;
    let ln_gamma_a = ln_gamma(a);

    // Initial guess: small-quantile series, otherwise Wilson-Hilferty.
    let series = ((u.ln() + ln_gamma(a + 1.0)) / a).exp();
    let mut y = if series < 0.1 * a.max(0.1) {
        series
    } else {
        let z = -std::f64::consts::SQRT_2 * erfc_inv(2.0 * u);
        let c = 1.0 / (9.0 * a);
        let wh = a * (1.0 - c + z * c.sqrt()).powi(3);
        if wh > 0.0 {
            wh
        } else {
            series.max(f64::MIN_POSITIVE)
        }
    };

    let mut lo = 0.0_f64;
    let mut hi = f64::INFINITY;
    for _ in 0..300 {
        let p = gamma_lr(a, y);
        let diff = p - u;
        if diff > 0.0 {
            hi = hi.min(y);
        } else {
            lo = lo.max(y);
        }
        let ln_pdf = (a - 1.0) * y.ln() - y - ln_gamma_a;
        let pdf = ln_pdf.exp();
        let mut next = if pdf > 0.0 && pdf.is_finite() {
            y - diff / pdf
        } else {
            f64::NAN
        };
        if !(next > lo && next < hi) {
            next = if hi.is_finite() { 0.5 * (lo + hi) } else { 2.0 * y.max(1.0) };
        }
        let tol = 1e-12 * y.min(1.0).max(f64::MIN_POSITIVE);
        let step = (next - y).abs();
        y = next;
        if step <= tol || (hi - lo) <= tol {
            break;
        }
    }
    2.0 * y
}
