//! Outcome model of the phase-sampling circuit.
//!
//! A circuit `(n, phi)` applies the unknown unitary `n` times to a probe in
//! an equal superposition, then a known phase shift `phi`, then measures. The
//! probability of the `|Psi>` outcome is
//!
//! ```text
//! p0(theta; n, phi) = 1/2 + (alpha * beta^n / 2) * cos(n*theta + phi)
//! ```
//!
//! and a batch of `nu` shots yields a binomial count. Everything here is a
//! pure function; randomness only enters through an explicit generator.

use std::f64::consts::{E, FRAC_PI_2, PI, TAU};

use rand::Rng;
use rand_distr::{Binomial, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Below this `|sin(n*theta + phi)|` the linear-propagation variance is reported as divergent.
pub const SINGULAR_TOLERANCE: f64 = 1e-9;

/// Reduces an angle into `[0, 2pi)`.
pub fn reduce_angle(theta: f64) -> f64 {
    let r = theta.rem_euclid(TAU);
    // rem_euclid can return exactly TAU for tiny negative inputs.
    if r >= TAU {
        0.0
    } else {
        r
    }
}

/// Signed difference `b - a` wrapped into `[-pi, pi)`.
pub fn wrapped_difference(a: f64, b: f64) -> f64 {
    let d = (b - a).rem_euclid(TAU);
    if d >= PI {
        d - TAU
    } else {
        d
    }
}

/// Circular distance `min(|a - b|, 2pi - |a - b|)`, always in `[0, pi]`.
pub fn wrapped_distance(a: f64, b: f64) -> f64 {
    wrapped_difference(a, b).abs()
}

/// Visibility `alpha` and per-application decay `beta` of the interference fringe.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    alpha: f64,
    beta: f64,
}

impl NoiseModel {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        let ok = |v: f64| v > 0.0 && v <= 1.0;
        if ok(alpha) && ok(beta) {
            Ok(Self { alpha, beta })
        } else {
            Err(Error::InvalidNoise { alpha, beta })
        }
    }

    pub const fn noiseless() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
        }
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn is_noiseless(&self) -> bool {
        self.alpha == 1.0 && self.beta == 1.0
    }

    /// Fringe contrast `alpha * beta^n` of a depth-`n` circuit.
    pub fn contrast(&self, depth: u32) -> f64 {
        self.alpha * self.beta.powf(f64::from(depth))
    }

    /// Continuous noise-optimal depth `-1 / (2 ln beta)`; `None` when `beta = 1`.
    pub fn optimal_depth(&self) -> Option<f64> {
        if self.beta >= 1.0 {
            None
        } else {
            Some(-1.0 / (2.0 * self.beta.ln()))
        }
    }

    /// Noise-optimal depth rounded to the nearest integer and floored at 1.
    pub fn rounded_optimal_depth(&self) -> Option<u32> {
        self.optimal_depth()
            .map(|n| n.round().clamp(1.0, f64::from(u32::MAX)) as u32)
    }

    /// Minimal single-peak variance per budget, `-2e ln beta / (alpha^2 N_tot)`.
    /// `None` for `beta = 1`, where no finite optimum exists.
    pub fn variance_floor(&self, total_resources: f64) -> Option<f64> {
        if self.beta >= 1.0 {
            None
        } else {
            Some(-2.0 * E * self.beta.ln() / (self.alpha * self.alpha * total_resources))
        }
    }
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self::noiseless()
    }
}

/// A measurement setting: `depth` coherent applications followed by a `phase` shift.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Circuit {
    depth: u32,
    phase: f64,
}

impl Circuit {
    pub fn new(depth: u32, phase: f64) -> Result<Self> {
        if depth == 0 {
            return Err(Error::ZeroDepth);
        }
        Ok(Self {
            depth,
            phase: reduce_angle(phase),
        })
    }

    pub fn depth(&self) -> u32 {
        self.depth
    }

    pub fn phase(&self) -> f64 {
        self.phase
    }

    /// The circuit whose fringe is steepest at `theta`: phase `pi/2 - n*theta`.
    pub fn tuned(depth: u32, theta: f64) -> Result<Self> {
        Self::new(depth, FRAC_PI_2 - f64::from(depth) * theta)
    }
}

/// One batch of shots on a circuit. `successes` is real-valued so that
/// hypothetical fractional counts can be fed through the same update path.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeasurementRecord {
    circuit: Circuit,
    shots: u64,
    successes: f64,
}

impl MeasurementRecord {
    pub fn new(circuit: Circuit, shots: u64, successes: f64) -> Result<Self> {
        if !(successes >= 0.0 && successes <= shots as f64) {
            return Err(Error::InvalidRecord { shots, successes });
        }
        Ok(Self {
            circuit,
            shots,
            successes,
        })
    }

    pub fn circuit(&self) -> Circuit {
        self.circuit
    }

    pub fn shots(&self) -> u64 {
        self.shots
    }

    pub fn successes(&self) -> f64 {
        self.successes
    }

    pub fn failures(&self) -> f64 {
        self.shots as f64 - self.successes
    }

    pub fn has_integer_successes(&self) -> bool {
        self.successes.fract() == 0.0
    }

    /// Unitary applications consumed: `depth * shots`.
    pub fn resources(&self) -> u64 {
        u64::from(self.circuit.depth) * self.shots
    }

    /// Merges another batch of the same circuit into this one.
    pub(crate) fn absorb(&mut self, other: &MeasurementRecord) {
        debug_assert_eq!(self.circuit, other.circuit);
        self.shots += other.shots;
        self.successes += other.successes;
    }
}

/// Probability of the `|Psi>` outcome for a single probe.
pub fn success_probability(theta: f64, circuit: Circuit, noise: NoiseModel) -> f64 {
    let c = noise.contrast(circuit.depth);
    let u = f64::from(circuit.depth) * reduce_angle(theta) + circuit.phase;
    (0.5 + 0.5 * c * u.cos()).clamp(0.0, 1.0)
}

/// `ln C(n, k)` by direct summation; exact enough for the shot counts used here.
pub fn ln_binomial_coefficient(n: u64, k: u64) -> f64 {
    let k = k.min(n - k);
    (1..=k)
        .map(|j| ((n - k + j) as f64 / j as f64).ln())
        .sum()
}

/// Log-likelihood kernel `x ln p + (nu - x) ln(1 - p)` with `0 * ln 0 = 0`.
pub(crate) fn log_kernel(p: f64, successes: f64, failures: f64) -> f64 {
    let mut acc = 0.0;
    if successes > 0.0 {
        acc += successes * p.ln();
    }
    if failures > 0.0 {
        acc += failures * (1.0 - p).ln();
    }
    acc
}

/// Binomial log-likelihood of a record at `theta`.
///
/// Integer counts get the full log-pmf; fractional counts omit the
/// combinatorial factor, which does not depend on `theta`.
pub fn log_likelihood(record: &MeasurementRecord, theta: f64, noise: NoiseModel) -> Result<f64> {
    if !(record.successes >= 0.0 && record.successes <= record.shots as f64) {
        return Err(Error::InvalidRecord {
            shots: record.shots,
            successes: record.successes,
        });
    }
    let p = success_probability(theta, record.circuit, noise);
    let mut ll = log_kernel(p, record.successes, record.failures());
    if record.has_integer_successes() {
        ll += ln_binomial_coefficient(record.shots, record.successes as u64);
    }
    Ok(ll)
}

/// Draws the number of `|Psi>` outcomes among `shots` probes at the true phase.
pub fn sample_outcome<R: Rng + ?Sized>(
    circuit: Circuit,
    shots: u64,
    theta_true: f64,
    noise: NoiseModel,
    rng: &mut R,
) -> u64 {
    if shots == 0 {
        return 0;
    }
    let p = success_probability(theta_true, circuit, noise);
    Binomial::new(shots, p)
        .expect("success probability is clamped to [0, 1]")
        .sample(rng)
}

/// Single-peak variance from linear error propagation for `shots` executions.
pub fn sigma_squared(theta: f64, circuit: Circuit, shots: u64, noise: NoiseModel) -> Result<f64> {
    if shots == 0 {
        return Err(Error::InvalidConfig(
            "variance needs at least one shot".into(),
        ));
    }
    let n = f64::from(circuit.depth);
    let u = n * reduce_angle(theta) + circuit.phase;
    let (s, c) = u.sin_cos();
    if s.abs() < SINGULAR_TOLERANCE {
        return Err(Error::VarianceDivergence { sin_abs: s.abs() });
    }
    let c2 = noise.contrast(circuit.depth).powi(2);
    // 1 - c2 cos^2 written without cancellation near the fringe extrema.
    let numerator = s * s + (1.0 - c2) * c * c;
    Ok(numerator / (c2 * s * s * n * n * shots as f64))
}

/// Depth minimizing the single-peak variance under decay, capped at `depth_limit`,
/// with the phase that puts `theta_guess` on the steepest part of the fringe.
pub fn optimal_circuit(noise: NoiseModel, theta_guess: f64, depth_limit: u32) -> Result<Circuit> {
    if depth_limit == 0 {
        return Err(Error::ZeroDepth);
    }
    let depth = noise
        .rounded_optimal_depth()
        .map_or(depth_limit, |n| n.min(depth_limit));
    Circuit::tuned(depth, theta_guess)
}
