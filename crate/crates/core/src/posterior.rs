//! Discretized posterior over the circle.
//!
//! The density is held as log-weights on `G` uniform nodes `theta_g = 2 pi g / G`.
//! Updates add the binomial log-likelihood node by node and renormalize with
//! max-subtraction, so arbitrarily peaked posteriors stay finite.
//!
//! Confidence and expected loss integrate the trigonometric interpolant of the
//! node densities exactly, which is spectrally accurate once the grid resolves
//! the posterior. Tail masses for the confidence gate use the local quintic
//! interpolant instead, so tiny masses far from the peak keep their relative
//! precision. Over the full circle both reduce to the periodic trapezoid rule,
//! which is what normalization uses.

use std::f64::consts::{PI, TAU};
use std::sync::OnceLock;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{log_kernel, reduce_angle, wrapped_difference, Circuit, MeasurementRecord, NoiseModel};

/// Smallest grid accepted anywhere.
pub const MIN_GRID_SIZE: usize = 64;
/// Nodes required per period of `cos(n theta)`.
pub const POINTS_PER_PERIOD: usize = 32;
pub const DEFAULT_GRID_SIZE: usize = 4096;
/// Resultant length below which the circular mean is undefined.
pub const MIN_RESULTANT: f64 = 1e-12;

/// Smallest admissible grid for circuits up to `depth`.
pub fn min_grid_for_depth(depth: u32) -> usize {
    MIN_GRID_SIZE.max(POINTS_PER_PERIOD * depth as usize)
}

/// Arc `{theta : wrapped_distance(theta, center) <= half_width}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CircularInterval {
    center: f64,
    half_width: f64,
}

impl CircularInterval {
    pub fn new(center: f64, half_width: f64) -> Result<Self> {
        if !(half_width > 0.0 && half_width <= PI) {
            return Err(Error::InvalidConfig(format!(
                "interval half-width {half_width} outside (0, pi]"
            )));
        }
        Ok(Self {
            center: reduce_angle(center),
            half_width,
        })
    }

    pub fn full_circle() -> Self {
        Self {
            center: 0.0,
            half_width: PI,
        }
    }

    pub fn center(&self) -> f64 {
        self.center
    }

    pub fn half_width(&self) -> f64 {
        self.half_width
    }

    pub fn contains(&self, theta: f64) -> bool {
        wrapped_difference(self.center, theta).abs() <= self.half_width
    }

    /// Circular-set inclusion `self ⊆ outer`, with a small slack for rounding.
    pub fn is_within(&self, outer: &CircularInterval, slack: f64) -> bool {
        if outer.half_width >= PI {
            return true;
        }
        let offset = wrapped_difference(outer.center, self.center).abs();
        offset + self.half_width <= outer.half_width + slack
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    AbsoluteError,
    SquaredError,
}

impl LossKind {
    pub fn eval(self, distance: f64) -> f64 {
        match self {
            LossKind::AbsoluteError => distance,
            LossKind::SquaredError => distance * distance,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            LossKind::AbsoluteError => "mae",
            LossKind::SquaredError => "mse",
        }
    }
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mae" | "abs" | "absolute-error" => Ok(LossKind::AbsoluteError),
            "mse" | "sq" | "squared-error" => Ok(LossKind::SquaredError),
            other => Err(Error::Parse(format!("unknown loss kind '{other}'"))),
        }
    }
}

/// Monomial coefficients of the Lagrange basis on the nodes `t = -2..=3`:
/// row `k` holds the `t^k` coefficient of each basis polynomial.
const QUINTIC: [[f64; 6]; 6] = [
    [0.0, 0.0, 1.0, 0.0, 0.0, 0.0],
    [1.0 / 20.0, -1.0 / 2.0, -1.0 / 3.0, 1.0, -1.0 / 4.0, 1.0 / 30.0],
    [-1.0 / 24.0, 2.0 / 3.0, -5.0 / 4.0, 2.0 / 3.0, -1.0 / 24.0, 0.0],
    [-1.0 / 24.0, -1.0 / 24.0, 5.0 / 12.0, -7.0 / 12.0, 7.0 / 24.0, -1.0 / 24.0],
    [1.0 / 24.0, -1.0 / 6.0, 1.0 / 4.0, -1.0 / 6.0, 1.0 / 24.0, 0.0],
    [-1.0 / 120.0, 1.0 / 24.0, -1.0 / 12.0, 1.0 / 12.0, -1.0 / 24.0, 1.0 / 120.0],
];

/// Integral over `[0, 1]` of each quintic basis polynomial.
fn quintic_cell_weights() -> [f64; 6] {
    std::array::from_fn(|i| (0..6).map(|k| QUINTIC[k][i] / (k as f64 + 1.0)).sum())
}

#[derive(Debug, Clone)]
struct Normalized {
    log_density: Vec<f64>,
    density: Vec<f64>,
}

/// Normalized density on a uniform circular grid.
///
/// Log-weights are kept with their maximum at 0; the normalized density is
/// materialized on first use after an update, so runs of updates that only
/// need the MAP never exponentiate the grid.
#[derive(Debug, Clone)]
pub struct GridPosterior {
    weights: Vec<f64>,
    normalized: OnceLock<Normalized>,
    max_depth: u32,
}

impl PartialEq for GridPosterior {
    fn eq(&self, other: &Self) -> bool {
        self.weights == other.weights && self.max_depth == other.max_depth
    }
}

impl GridPosterior {
    pub fn uniform(grid_size: usize) -> Result<Self> {
        if grid_size < MIN_GRID_SIZE {
            return Err(Error::GridTooSmall(grid_size));
        }
        Ok(Self {
            weights: vec![0.0; grid_size],
            normalized: OnceLock::new(),
            max_depth: 0,
        })
    }

    /// Builds a posterior from unnormalized log-weights (`-inf` allowed, NaN not).
    pub fn from_log_weights(log_weights: Vec<f64>) -> Result<Self> {
        if log_weights.len() < MIN_GRID_SIZE {
            return Err(Error::GridTooSmall(log_weights.len()));
        }
        if log_weights.iter().any(|w| w.is_nan() || *w == f64::INFINITY) {
            return Err(Error::InvalidConfig("log-weights must be finite or -inf".into()));
        }
        let mut post = Self {
            weights: log_weights,
            normalized: OnceLock::new(),
            max_depth: 0,
        };
        post.normalize()?;
        Ok(post)
    }

    pub fn grid_size(&self) -> usize {
        self.weights.len()
    }

    /// Node spacing `2 pi / G`.
    pub fn spacing(&self) -> f64 {
        TAU / self.grid_size() as f64
    }

    pub fn angle(&self, index: usize) -> f64 {
        index as f64 * TAU / self.grid_size() as f64
    }

    pub fn angles(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.grid_size()).map(|g| self.angle(g))
    }

    pub fn log_density(&self) -> &[f64] {
        &self.normalized().log_density
    }

    pub fn density(&self) -> &[f64] {
        &self.normalized().density
    }

    /// Deepest circuit folded into this posterior so far.
    pub fn max_depth(&self) -> u32 {
        self.max_depth
    }

    fn normalize(&mut self) -> Result<()> {
        let max = self.weights.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Err(Error::ImpossibleObservation);
        }
        for l in self.weights.iter_mut() {
            *l -= max;
        }
        self.normalized = OnceLock::new();
        Ok(())
    }

    fn normalized(&self) -> &Normalized {
        self.normalized.get_or_init(|| {
            let mut density: Vec<f64> = self.weights.iter().map(|l| l.exp()).collect();
            let mass = density.iter().sum::<f64>() * self.spacing();
            let inv = 1.0 / mass;
            let log_norm = mass.ln();
            density.iter_mut().for_each(|d| *d *= inv);
            let log_density = self.weights.iter().map(|l| l - log_norm).collect();
            Normalized { log_density, density }
        })
    }

    /// Multiplies in the likelihood of `record` and renormalizes. On error the
    /// posterior is left untouched.
    pub fn update(&mut self, record: &MeasurementRecord, noise: NoiseModel) -> Result<()> {
        let circuit = record.circuit();
        if self.grid_size() < min_grid_for_depth(circuit.depth()) {
            return Err(Error::GridTooCoarse {
                grid_size: self.grid_size(),
                depth: circuit.depth(),
            });
        }
        if record.shots() == 0 {
            return Ok(());
        }
        let n = f64::from(circuit.depth());
        let phi = circuit.phase();
        let contrast = noise.contrast(circuit.depth());
        let (x, y) = (record.successes(), record.failures());
        let previous = self.weights.clone();
        for (g, l) in self.weights.iter_mut().enumerate() {
            if *l == f64::NEG_INFINITY {
                continue;
            }
            let theta = g as f64 * TAU / previous.len() as f64;
            let p = (0.5 + 0.5 * contrast * (n * theta + phi).cos()).clamp(0.0, 1.0);
            *l += log_kernel(p, x, y);
        }
        if let Err(e) = self.normalize() {
            self.weights = previous;
            return Err(e);
        }
        self.max_depth = self.max_depth.max(circuit.depth());
        Ok(())
    }

    /// Non-mutating variant of [`GridPosterior::update`].
    pub fn updated(&self, record: &MeasurementRecord, noise: NoiseModel) -> Result<Self> {
        let mut next = self.clone();
        next.update(record, noise)?;
        Ok(next)
    }

    /// Periodic trapezoid integral of the density; 1 after normalization.
    pub fn total_mass(&self) -> f64 {
        self.density().iter().sum::<f64>() * self.spacing()
    }

    #[inline]
    fn node(&self, j: i64) -> f64 {
        self.density()[j.rem_euclid(self.grid_size() as i64) as usize]
    }

    /// Integrates `interp(density)(theta) * q(theta)` over `[s, e]` of cell `j`
    /// (local coordinate), where `q(theta) = c0 + c1 (theta - r) + c2 (theta - r)^2`
    /// and `interp` is the local quintic through the six surrounding nodes.
    fn cell_integral(&self, j: i64, s: f64, e: f64, r: f64, c: [f64; 3]) -> f64 {
        let h = self.spacing();
        let f: [f64; 6] = std::array::from_fn(|k| self.node(j + k as i64 - 2));
        if f.iter().all(|v| *v == 0.0) {
            return 0.0;
        }
        let mut a = [0.0; 6];
        for (ak, row) in a.iter_mut().zip(QUINTIC.iter()) {
            *ak = row.iter().zip(&f).map(|(m, v)| m * v).sum();
        }
        // q in the cell's local coordinate t.
        let d = j as f64 * h - r;
        let q = [c[0] + c[1] * d + c[2] * d * d, c[1] * h + 2.0 * c[2] * d * h, c[2] * h * h];
        let mut p = [0.0; 8];
        for (i, ai) in a.iter().enumerate() {
            for (k, qk) in q.iter().enumerate() {
                p[i + k] += ai * qk;
            }
        }
        let (mut se, mut ss) = (e, s);
        let mut acc = 0.0;
        for (k, coef) in p.iter().enumerate() {
            acc += coef * (se - ss) / (k as f64 + 1.0);
            se *= e;
            ss *= s;
        }
        acc * h
    }

    /// Quintic-interpolant integral of the density over the unwrapped arc `[a, b]`.
    ///
    /// Whole cells only need the interpolant's integration weights, which are
    /// 1 for every node away from the arc ends, so the bulk is a plain sum.
    fn arc_mass(&self, a: f64, b: f64) -> f64 {
        debug_assert!(b >= a && b - a <= TAU + 1e-12);
        let h = self.spacing();
        let (ua, ub) = (a / h, b / h);
        let (j1, j2) = (ua.ceil() as i64, ub.floor() as i64 - 1);
        let one = [1.0, 0.0, 0.0];
        if j2 < j1 + 6 {
            let first = ua.floor() as i64;
            let last = (ub.ceil() as i64 - 1).max(first);
            return (first..=last)
                .map(|j| {
                    let s = (ua - j as f64).max(0.0);
                    let e = (ub - j as f64).min(1.0);
                    if e > s {
                        self.cell_integral(j, s, e, 0.0, one)
                    } else {
                        0.0
                    }
                })
                .sum();
        }
        let mut total = 0.0;
        if ua < j1 as f64 {
            total += self.cell_integral(j1 - 1, ua - (j1 - 1) as f64, 1.0, 0.0, one);
        }
        if ub > (j2 + 1) as f64 {
            total += self.cell_integral(j2 + 1, 0.0, ub - (j2 + 1) as f64, 0.0, one);
        }
        let weights = quintic_cell_weights();
        let mut bulk = 0.0;
        for m in (j1 - 2)..=(j2 + 3) {
            let w = if m >= j1 + 3 && m <= j2 - 2 {
                1.0
            } else {
                // Node m enters cell j = m - i + 2 with weight w_i.
                (0..6)
                    .filter(|&i| (j1..=j2).contains(&(m - i as i64 + 2)))
                    .map(|i| weights[i])
                    .sum()
            };
            bulk += w * self.node(m);
        }
        total + bulk * h
    }

    /// Integrates the trigonometric interpolant of the density against
    /// `q(theta) = c0 + c1 (theta - r) + c2 (theta - r)^2` over `[a, b]`.
    fn spectral_arc(&self, a: f64, b: f64, r: f64, c: [f64; 3]) -> f64 {
        let g = self.grid_size();
        let h = self.spacing();
        let mut coef: Vec<Complex<f64>> = self.density().iter().map(|&d| Complex::new(d, 0.0)).collect();
        FftPlanner::new().plan_fft_forward(g).process(&mut coef);
        let scale = 1.0 / g as f64;
        let twiddle: Vec<Complex<f64>> = (0..g)
            .map(|m| {
                let (s, co) = (TAU * m as f64 / g as f64).sin_cos();
                Complex::new(co, s)
            })
            .collect();
        // Antiderivative of q(theta) e^{i k theta} at one end of the arc.
        let end = |theta: f64, k: usize| -> Complex<f64> {
            let u = theta - r;
            let cell = (theta / h).floor();
            let idx = (cell as i64).rem_euclid(g as i64) as usize;
            let (s, co) = (k as f64 * (theta - cell * h)).sin_cos();
            let phase = twiddle[(k * idx) % g] * Complex::new(co, s);
            let kf = k as f64;
            let inv_ik = Complex::new(0.0, -1.0 / kf);
            let poly = inv_ik * (c[0] + c[1] * u + c[2] * u * u)
                + Complex::new((c[1] + 2.0 * c[2] * u) / (kf * kf), 0.0)
                - inv_ik * (2.0 * c[2] / (kf * kf));
            phase * poly
        };
        let q_int = |u: f64| c[0] * u + c[1] * u * u / 2.0 + c[2] * u * u * u / 3.0;
        let mut total = coef[0].re * scale * (q_int(b - r) - q_int(a - r));
        for k in 1..=g / 2 {
            let weight = if 2 * k == g { 1.0 } else { 2.0 };
            total += weight * scale * (coef[k] * (end(b, k) - end(a, k))).re;
        }
        total
    }

    /// Posterior probability that `theta` lies in the interval.
    pub fn confidence(&self, interval: &CircularInterval) -> f64 {
        if interval.half_width >= PI {
            return self.total_mass().clamp(0.0, 1.0);
        }
        let (a, b) = (
            interval.center - interval.half_width,
            interval.center + interval.half_width,
        );
        self.spectral_arc(a, b, 0.0, [1.0, 0.0, 0.0]).clamp(0.0, 1.0)
    }

    /// Posterior mass outside the interval, integrated directly so that tiny
    /// tail masses keep their relative precision.
    pub fn mass_outside(&self, interval: &CircularInterval) -> f64 {
        if interval.half_width >= PI {
            return 0.0;
        }
        let a = interval.center + interval.half_width;
        let b = interval.center - interval.half_width + TAU;
        self.arc_mass(a, b).clamp(0.0, 1.0)
    }

    fn refine_peak(&self, g: usize) -> f64 {
        let gs = self.grid_size() as i64;
        let lm = self.weights[(g as i64 - 1).rem_euclid(gs) as usize];
        let l0 = self.weights[g];
        let lp = self.weights[(g as i64 + 1).rem_euclid(gs) as usize];
        let denom = lm - 2.0 * l0 + lp;
        let offset = if lm.is_finite() && lp.is_finite() && denom < 0.0 {
            (0.5 * (lm - lp) / denom).clamp(-0.5, 0.5)
        } else {
            0.0
        };
        reduce_angle((g as f64 + offset) * self.spacing())
    }

    /// Maximum-a-posteriori angle. Ties go to the smallest grid index; the
    /// peak is refined by a parabola through the neighbouring log-densities.
    pub fn map_estimate(&self) -> f64 {
        let mut best = 0;
        for (g, &l) in self.weights.iter().enumerate() {
            if l > self.weights[best] {
                best = g;
            }
        }
        self.refine_peak(best)
    }

    /// MAP estimate restricted to the nodes inside `interval`, clamped to it.
    pub fn map_estimate_within(&self, interval: &CircularInterval) -> f64 {
        if interval.half_width >= PI {
            return self.map_estimate();
        }
        let h = self.spacing();
        let gs = self.grid_size() as i64;
        let lo = ((interval.center - interval.half_width) / h).ceil() as i64;
        let hi = ((interval.center + interval.half_width) / h).floor() as i64;
        let best = if hi < lo {
            (interval.center / h).round() as i64
        } else {
            let mut best = lo;
            for j in lo..=hi {
                if self.weights[j.rem_euclid(gs) as usize]
                    > self.weights[best.rem_euclid(gs) as usize]
                {
                    best = j;
                }
            }
            best
        };
        let theta = self.refine_peak(best.rem_euclid(gs) as usize);
        let offset = wrapped_difference(interval.center, theta)
            .clamp(-interval.half_width, interval.half_width);
        reduce_angle(interval.center + offset)
    }

    /// Circular (resultant-direction) mean.
    pub fn circular_mean_estimate(&self) -> Result<f64> {
        let (mut c, mut s) = (0.0, 0.0);
        for (g, &d) in self.density().iter().enumerate() {
            let (sn, cs) = self.angle(g).sin_cos();
            c += d * cs;
            s += d * sn;
        }
        let h = self.spacing();
        let (c, s) = (c * h, s * h);
        let r = c.hypot(s);
        if r <= MIN_RESULTANT {
            return Err(Error::UndefinedMean(r));
        }
        Ok(reduce_angle(s.atan2(c)))
    }

    /// Expected wrapped loss of `estimate` under the posterior.
    pub fn expected_loss(&self, estimate: f64, kind: LossKind) -> f64 {
        let t = reduce_angle(estimate);
        let (up, down) = match kind {
            LossKind::AbsoluteError => ([0.0, 1.0, 0.0], [0.0, -1.0, 0.0]),
            LossKind::SquaredError => ([0.0, 0.0, 1.0], [0.0, 0.0, 1.0]),
        };
        // Distance grows on [t, t + pi] and shrinks on [t + pi, t + 2 pi].
        let near = self.spectral_arc(t, t + PI, t, up);
        let far = self.spectral_arc(t + PI, t + TAU, t + TAU, down);
        (near + far).max(0.0)
    }

    /// Expected number of `|Psi>` outcomes for `shots` executions of `circuit`.
    pub fn predict_outcome(&self, circuit: Circuit, shots: u64, noise: NoiseModel) -> f64 {
        let n = f64::from(circuit.depth());
        let phi = circuit.phase();
        let contrast = noise.contrast(circuit.depth());
        let mean_cos: f64 = self
            .density()
            .iter()
            .enumerate()
            .filter(|(_, d)| **d != 0.0)
            .map(|(g, d)| d * (n * self.angle(g) + phi).cos())
            .sum::<f64>()
            * self.spacing();
        let p = (0.5 + 0.5 * contrast * mean_cos.clamp(-1.0, 1.0)).clamp(0.0, 1.0);
        shots as f64 * p
    }

    /// Expected loss after spending `resources_left` on `circuit`, assuming the
    /// expected outcome is observed.
    pub fn predict_loss(
        &self,
        circuit: Circuit,
        resources_left: u64,
        noise: NoiseModel,
        kind: LossKind,
    ) -> Result<f64> {
        let shots = resources_left / u64::from(circuit.depth());
        if shots == 0 {
            return Err(Error::InsufficientResources {
                available: resources_left,
                depth: circuit.depth(),
            });
        }
        let expected = self.predict_outcome(circuit, shots, noise);
        let record = MeasurementRecord::new(circuit, shots, expected)?;
        let next = self.updated(&record, noise)?;
        Ok(next.expected_loss(next.map_estimate(), kind))
    }
}

/// A posterior over a uniform prior that keeps its (merged) measurement
/// history so it can rebuild itself on a finer grid when deeper circuits
/// arrive.
#[derive(Debug, Clone)]
pub struct RefiningPosterior {
    grid: GridPosterior,
    noise: NoiseModel,
    records: Vec<MeasurementRecord>,
}

impl RefiningPosterior {
    pub fn uniform(grid_size: usize, noise: NoiseModel) -> Result<Self> {
        Ok(Self {
            grid: GridPosterior::uniform(grid_size)?,
            noise,
            records: Vec::new(),
        })
    }

    pub fn grid(&self) -> &GridPosterior {
        &self.grid
    }

    pub fn records(&self) -> &[MeasurementRecord] {
        &self.records
    }

    /// Doubles the grid until it resolves `depth`, replaying the history.
    pub fn ensure_depth(&mut self, depth: u32) -> Result<()> {
        let needed = min_grid_for_depth(depth);
        if self.grid.grid_size() >= needed {
            return Ok(());
        }
        let mut size = self.grid.grid_size();
        while size < needed {
            size *= 2;
        }
        let mut grid = GridPosterior::uniform(size)?;
        for r in &self.records {
            grid.update(r, self.noise)?;
        }
        self.grid = grid;
        Ok(())
    }

    pub fn observe(&mut self, record: MeasurementRecord) -> Result<()> {
        self.ensure_depth(record.circuit().depth())?;
        self.grid.update(&record, self.noise)?;
        match self.records.last_mut() {
            Some(last) if last.circuit() == record.circuit() => last.absorb(&record),
            _ => self.records.push(record),
        }
        Ok(())
    }

    pub fn predict_loss(&mut self, circuit: Circuit, resources_left: u64, kind: LossKind) -> Result<f64> {
        self.ensure_depth(circuit.depth())?;
        self.grid.predict_loss(circuit, resources_left, self.noise, kind)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::success_probability;
    use std::f64::consts::FRAC_PI_2;

    fn circ(n: u32, phi: f64) -> Circuit {
        Circuit::new(n, phi).unwrap()
    }

    fn rec(n: u32, phi: f64, nu: u64, x: f64) -> MeasurementRecord {
        MeasurementRecord::new(circ(n, phi), nu, x).unwrap()
    }

    fn delta(grid: usize, k: usize) -> GridPosterior {
        let mut w = vec![f64::NEG_INFINITY; grid];
        w[k] = 0.0;
        GridPosterior::from_log_weights(w).unwrap()
    }

    fn gaussian(grid: usize, mu: f64, sigma: f64) -> GridPosterior {
        let w = (0..grid)
            .map(|g| {
                let d = wrapped_difference(mu, g as f64 * TAU / grid as f64);
                -0.5 * (d / sigma).powi(2)
            })
            .collect();
        GridPosterior::from_log_weights(w).unwrap()
    }

    /// Independent dense evaluation of the product of binomial pmfs,
    /// normalized by a plain node sum.
    fn brute_force(grid: usize, records: &[MeasurementRecord], noise: NoiseModel) -> Vec<f64> {
        let raw: Vec<f64> = (0..grid)
            .map(|g| {
                let theta = g as f64 * TAU / grid as f64;
                records
                    .iter()
                    .map(|r| {
                        let p = success_probability(theta, r.circuit(), noise);
                        let (nu, x) = (r.shots() as i32, r.successes() as i32);
                        p.powi(x) * (1.0 - p).powi(nu - x)
                    })
                    .product()
            })
            .collect();
        let z: f64 = raw.iter().sum::<f64>() * TAU / grid as f64;
        raw.into_iter().map(|v| v / z).collect()
    }

    fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
        a.iter()
            .zip(b)
            // Below ~1e-280 values are subnormal-adjacent; relative error is meaningless there.
            .filter(|(x, y)| x.abs().max(y.abs()) > 1e-280)
            .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()))
            .fold(0.0, f64::max)
    }

    #[test]
    fn bulk_arc_mass_matches_cellwise_quadrature() {
        let clean = NoiseModel::noiseless();
        let mut p = GridPosterior::uniform(256).unwrap();
        p.update(&rec(1, 0.3, 9, 2.0), clean).unwrap();
        p.update(&rec(4, 1.1, 5, 4.0), clean).unwrap();
        let h = p.spacing();
        for (a, b) in [(0.01, 6.0), (-1.3, 2.2), (2.0 * h, 40.0 * h), (0.5, 0.5 + 3.5 * h), (1.0, 1.0 + TAU)] {
            let (ua, ub) = (a / h, b / h);
            let cellwise: f64 = ((ua.floor() as i64)..(ub.ceil() as i64))
                .map(|j| {
                    let s = (ua - j as f64).max(0.0);
                    let e = (ub - j as f64).min(1.0);
                    p.cell_integral(j, s, e, 0.0, [1.0, 0.0, 0.0])
                })
                .sum();
            assert!((p.arc_mass(a, b) - cellwise).abs() < 1e-13, "[{a}, {b}]");
        }
        assert!((p.arc_mass(1.0, 1.0 + TAU) - 1.0).abs() < 1e-13);
    }

    #[test]
    fn uniform_prior_examples() {
        assert!(matches!(GridPosterior::uniform(32), Err(Error::GridTooSmall(32))));
        let u = GridPosterior::uniform(64).unwrap();
        assert!(u.density().iter().all(|d| (d - 1.0 / TAU).abs() < 1e-15));
        let i = CircularInterval::new(1.0, 0.7).unwrap();
        assert!((u.confidence(&i) - 0.7 / PI).abs() < 1e-12);
        assert_eq!(u.map_estimate(), 0.0);
    }

    #[test]
    fn update_examples() {
        let clean = NoiseModel::noiseless();
        let mut u = GridPosterior::uniform(256).unwrap();
        let before = u.clone();
        u.update(&rec(1, 0.0, 0, 0.0), clean).unwrap();
        assert_eq!(u, before);

        u.update(&rec(1, 0.0, 10, 10.0), clean).unwrap();
        let g = u.grid_size();
        for k in 1..g {
            let (a, b) = (u.density()[k], u.density()[g - k]);
            assert!((a - b).abs() <= 1e-12 * a.max(b), "cell {k}: {a} vs {b}");
        }
    }

    #[test]
    fn sequential_updates_match_brute_force() {
        let clean = NoiseModel::noiseless();
        let records = [rec(1, 0.0, 10, 7.0), rec(2, 0.0, 10, 3.0)];
        let mut p = GridPosterior::uniform(1024).unwrap();
        for r in &records {
            p.update(r, clean).unwrap();
        }
        let oracle = brute_force(1024, &records, clean);
        assert!(max_rel_err(p.density(), &oracle) <= 1e-9);
    }

    #[test]
    fn update_errors() {
        let clean = NoiseModel::noiseless();
        let mut p = GridPosterior::uniform(64).unwrap();
        assert!(matches!(
            p.update(&rec(3, 0.0, 1, 1.0), clean),
            Err(Error::GridTooCoarse { .. })
        ));
        // Only theta = 0 survives (1,0) with x = nu; then x = 0 is impossible there.
        let mut d = delta(64, 0);
        let before = d.clone();
        assert_eq!(
            d.update(&rec(1, 0.0, 3, 0.0), clean),
            Err(Error::ImpossibleObservation)
        );
        assert_eq!(d, before);
    }

    #[test]
    fn confidence_examples() {
        let u = GridPosterior::uniform(512).unwrap();
        assert!((u.confidence(&CircularInterval::full_circle()) - 1.0).abs() < 1e-12);
        let q = CircularInterval::new(2.0, PI / 4.0).unwrap();
        assert!((u.confidence(&q) - 0.25).abs() < 1e-12);
        assert!((u.mass_outside(&q) - 0.75).abs() < 1e-12);
    }

    #[test]
    fn confidence_across_seam_matches_dense_quadrature() {
        // Posterior peaked at pi; interval straddles 0.
        let clean = NoiseModel::noiseless();
        let mut p = GridPosterior::uniform(4096).unwrap();
        p.update(&rec(1, 0.0, 6, 1.0), clean).unwrap();
        let interval = CircularInterval::new(0.0, PI / 8.0).unwrap();
        let got = p.confidence(&interval);

        // Oracle: the exact posterior is prop. to p^1 (1-p)^5 with p = cos^2(theta/2);
        // integrate it with a fine midpoint rule and normalize.
        let f = |t: f64| {
            let p = 0.5 + 0.5 * t.cos();
            p * (1.0 - p).powi(5)
        };
        let m = 2_000_000;
        let h = TAU / m as f64;
        let z: f64 = (0..m).map(|k| f((k as f64 + 0.5) * h)).sum::<f64>() * h;
        let w = PI / 8.0;
        let hi = 2.0 * w / m as f64;
        let inside: f64 = (0..m).map(|k| f(-w + (k as f64 + 0.5) * hi)).sum::<f64>() * hi;
        let oracle = inside / z;
        assert!((got - oracle).abs() < 1e-9, "got {got}, oracle {oracle}");
    }

    #[test]
    fn map_examples() {
        let d = delta(128, 37);
        assert!((d.map_estimate() - d.angle(37)).abs() < 1e-15);

        // (1, pi/2) with x/nu = 14/15: peaks where cos(theta + pi/2) = 2 x/nu - 1.
        let clean = NoiseModel::noiseless();
        let mut p = GridPosterior::uniform(4096).unwrap();
        p.update(&rec(1, FRAC_PI_2, 15, 14.0), clean).unwrap();
        let target = (2.0 * 14.0 / 15.0 - 1.0f64).acos();
        // Dense-scan argmax of p^14 (1-p) over theta.
        let m = 1_000_000;
        let (mut best_t, mut best_v) = (0.0, f64::NEG_INFINITY);
        for k in 0..m {
            let t = k as f64 * TAU / m as f64;
            let q = 0.5 + 0.5 * (t + FRAC_PI_2).cos();
            let v = 14.0 * q.ln() + (1.0 - q).ln();
            if v > best_v {
                best_v = v;
                best_t = t;
            }
        }
        // The mirror peak ties the true peak; compare against the dense argmax.
        let est = p.map_estimate();
        assert!(wrapped_difference(best_t, est).abs() <= p.spacing(), "{est} vs {best_t}");
        assert!(
            ((est + FRAC_PI_2).cos() - (target).cos()).abs() < 1e-3,
            "cos(theta + pi/2) should be about {}",
            target.cos()
        );
    }

    #[test]
    fn masked_map_picks_peak_inside() {
        let clean = NoiseModel::noiseless();
        let mut p = GridPosterior::uniform(1024).unwrap();
        p.update(&rec(1, 0.0, 20, 15.0), clean).unwrap();
        // Mirror peaks at +-acos(0.5); restrict to the negative one.
        let t = (0.5f64).acos();
        let interval = CircularInterval::new(TAU - t, 0.5).unwrap();
        let est = p.map_estimate_within(&interval);
        assert!(wrapped_difference(TAU - t, est).abs() < 2.0 * p.spacing());
    }

    #[test]
    fn circular_mean_examples() {
        let d = delta(256, 200);
        assert!((d.circular_mean_estimate().unwrap() - d.angle(200)).abs() < 1e-12);

        let mut w = vec![f64::NEG_INFINITY; 256];
        w[3] = 0.0;
        w[253] = 0.0;
        let two = GridPosterior::from_log_weights(w).unwrap();
        assert!(wrapped_difference(0.0, two.circular_mean_estimate().unwrap()).abs() < 1e-12);

        let u = GridPosterior::uniform(256).unwrap();
        assert!(matches!(u.circular_mean_estimate(), Err(Error::UndefinedMean(_))));
    }

    #[test]
    fn expected_loss_examples() {
        let u = GridPosterior::uniform(4096).unwrap();
        for est in [0.0, 1.0, 4.5] {
            let l = u.expected_loss(est, LossKind::SquaredError);
            assert!((l - PI * PI / 3.0).abs() < 1e-9, "{l}");
            let l = u.expected_loss(est, LossKind::AbsoluteError);
            assert!((l - PI / 2.0).abs() < 1e-9, "{l}");
        }

        let sigma = 0.01;
        let g = gaussian(4096, 2.5, sigma);
        let l = g.expected_loss(2.5, LossKind::AbsoluteError);
        let oracle = (2.0 / PI).sqrt() * sigma;
        assert!((l - oracle).abs() / oracle < 0.02, "{l} vs {oracle}");

        // A single-node posterior is a point mass up to the interpolation
        // kernel, so its loss vanishes with the spacing.
        let d = delta(4096, 11);
        assert!(d.expected_loss(d.angle(11), LossKind::AbsoluteError) < d.spacing());
        assert!(d.expected_loss(d.angle(11), LossKind::SquaredError) < d.spacing().powi(2));
    }

    #[test]
    fn predict_outcome_examples() {
        let clean = NoiseModel::noiseless();
        let d = delta(256, 40);
        let c = circ(3, 0.4);
        let expected = 12.0 * success_probability(d.angle(40), c, clean);
        assert!((d.predict_outcome(c, 12, clean) - expected).abs() < 1e-12);

        let u = GridPosterior::uniform(256).unwrap();
        assert!((u.predict_outcome(circ(5, 1.3), 40, clean) - 20.0).abs() < 1e-12);

        // After one update, compare with quadrature of the exact posterior.
        let mut p = GridPosterior::uniform(4096).unwrap();
        p.update(&rec(1, 0.0, 6, 4.0), clean).unwrap();
        let got = p.predict_outcome(circ(2, 0.0), 40, clean);
        let post = |t: f64| {
            let q = 0.5 + 0.5 * t.cos();
            q.powi(4) * (1.0 - q).powi(2)
        };
        let m = 1_000_000;
        let h = TAU / m as f64;
        let (mut num, mut den) = (0.0, 0.0);
        for k in 0..m {
            let t = (k as f64 + 0.5) * h;
            num += post(t) * (0.5 + 0.5 * (2.0 * t).cos());
            den += post(t);
        }
        let oracle = 40.0 * num / den;
        assert!((got - oracle).abs() < 1e-8, "{got} vs {oracle}");
    }

    #[test]
    fn predict_loss_examples() {
        let clean = NoiseModel::noiseless();
        let u = GridPosterior::uniform(256).unwrap();
        assert!(matches!(
            u.predict_loss(circ(4, 0.0), 3, clean, LossKind::AbsoluteError),
            Err(Error::InsufficientResources { .. })
        ));

        let d = delta(256, 9);
        for c in [circ(1, 0.0), circ(2, 1.0), circ(4, 2.0)] {
            let l = d.predict_loss(c, 40, clean, LossKind::AbsoluteError).unwrap();
            assert!(l < d.spacing(), "{l}");
        }

        // Mirror-symmetric posterior from (1, 0) data.
        let mut p = GridPosterior::uniform(2048).unwrap();
        p.update(&rec(1, 0.0, 10, 7.0), clean).unwrap();
        let off_axis = p
            .predict_loss(circ(1, PI / 4.0), 20, clean, LossKind::AbsoluteError)
            .unwrap();
        let on_axis = p
            .predict_loss(circ(1, 0.0), 20, clean, LossKind::AbsoluteError)
            .unwrap();
        assert!(off_axis < on_axis, "{off_axis} vs {on_axis}");
    }

    #[test]
    fn refining_posterior_rebuilds_and_merges() {
        let clean = NoiseModel::noiseless();
        let mut r = RefiningPosterior::uniform(64, clean).unwrap();
        r.observe(rec(1, 0.0, 1, 1.0)).unwrap();
        r.observe(rec(1, 0.0, 1, 0.0)).unwrap();
        assert_eq!(r.records().len(), 1);
        assert_eq!(r.records()[0].shots(), 2);
        r.observe(rec(8, 0.3, 2, 1.0)).unwrap();
        assert_eq!(r.grid().grid_size(), 256);
        let direct = brute_force(256, r.records(), clean);
        assert!(max_rel_err(r.grid().density(), &direct) < 1e-9);
    }

    #[test]
    fn peaks_sit_at_predicted_locations() {
        // nu = 50 shots of (n, 0) with the count at its mean for theta = 0.4.
        let clean = NoiseModel::noiseless();
        let theta = 0.4;
        for n in [1u32, 2, 3] {
            let c = circ(n, 0.0);
            let x = (50.0 * success_probability(theta, c, clean)).round();
            let mut p = GridPosterior::uniform(4096).unwrap();
            p.update(&MeasurementRecord::new(c, 50, x).unwrap(), clean).unwrap();
            let d = p.density();
            let g = d.len();
            let maxima: Vec<f64> = (0..g)
                .filter(|&k| d[k] > d[(k + g - 1) % g] && d[k] >= d[(k + 1) % g])
                .map(|k| p.angle(k))
                .collect();
            assert_eq!(maxima.len(), 2 * n as usize, "n = {n}");
            // x/nu rounding moves the peak: cos(n t) = 2x/nu - 1.
            let t0 = (2.0 * x / 50.0 - 1.0f64).acos() / f64::from(n);
            for l in 0..n {
                for cand in [t0 + TAU * f64::from(l) / f64::from(n), -t0 + TAU * f64::from(l) / f64::from(n)] {
                    let nearest = maxima
                        .iter()
                        .map(|m| wrapped_difference(cand, *m).abs())
                        .fold(f64::INFINITY, f64::min);
                    assert!(nearest <= p.spacing(), "n={n} cand={cand}");
                }
            }
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn record_strategy() -> impl Strategy<Value = MeasurementRecord> {
            (1u32..=8, 0.0f64..TAU, 0u64..=20).prop_flat_map(|(n, phi, nu)| {
                (0..=nu).prop_map(move |x| rec(n, phi, nu, x as f64))
            })
        }

        fn noise() -> impl Strategy<Value = NoiseModel> {
            (0.5f64..=1.0, 0.8f64..=1.0).prop_map(|(a, b)| NoiseModel::new(a, b).unwrap())
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn normalization_and_commutation(r1 in record_strategy(), r2 in record_strategy(), nm in noise()) {
                let base = GridPosterior::uniform(512).unwrap();
                let mut a = base.clone();
                let mut b = base.clone();
                let ra = a.update(&r1, nm).and_then(|_| a.update(&r2, nm));
                let rb = b.update(&r2, nm).and_then(|_| b.update(&r1, nm));
                prop_assert_eq!(ra.is_ok(), rb.is_ok());
                if ra.is_ok() {
                    prop_assert!((a.total_mass() - 1.0).abs() < 1e-10);
                    prop_assert!(a.log_density().iter().all(|l| !l.is_nan()));
                    for (x, y) in a.density().iter().zip(b.density()) {
                        prop_assert!((x - y).abs() <= 1e-10 * x.abs().max(*y).max(1e-300));
                    }
                    prop_assert!((a.confidence(&CircularInterval::full_circle()) - 1.0).abs() < 1e-10);
                }
            }

            #[test]
            fn oracle_equivalence(records in prop::collection::vec(record_strategy(), 1..=3), nm in noise()) {
                let mut p = GridPosterior::uniform(512).unwrap();
                for r in &records {
                    p.update(r, nm).unwrap();
                }
                let oracle = brute_force(512, &records, nm);
                prop_assert!(max_rel_err(p.density(), &oracle) <= 1e-9);
            }

            #[test]
            fn losses_and_predictions_bounded(r in record_strategy(), est in 0.0f64..TAU, nm in noise(), nu in 1u64..50) {
                let mut p = GridPosterior::uniform(512).unwrap();
                p.update(&r, nm).unwrap();
                prop_assert!(p.expected_loss(est, LossKind::AbsoluteError) <= PI);
                prop_assert!(p.expected_loss(est, LossKind::SquaredError) <= PI * PI);
                let c = r.circuit();
                let x = p.predict_outcome(c, nu, nm);
                let k = nm.contrast(c.depth());
                prop_assert!(x >= nu as f64 * (1.0 - k) / 2.0 - 1e-9);
                prop_assert!(x <= nu as f64 * (1.0 + k) / 2.0 + 1e-9);
            }

            #[test]
            fn grid_refinement_is_stable(r1 in record_strategy(), r2 in record_strategy(), est in 0.0f64..TAU, c in 0.0f64..TAU, w in 0.05f64..3.0) {
                // Depths <= 8 on G = 512 satisfy depth <= G / 64.
                let nm = NoiseModel::noiseless();
                let build = |g: usize| {
                    let mut p = GridPosterior::uniform(g).unwrap();
                    p.update(&r1, nm).unwrap();
                    p.update(&r2, nm).map(|_| p)
                };
                if let (Ok(a), Ok(b)) = (build(512), build(1024)) {
                    let i = CircularInterval::new(c, w).unwrap();
                    prop_assert!((a.confidence(&i) - b.confidence(&i)).abs() < 1e-6);
                    for kind in [LossKind::AbsoluteError, LossKind::SquaredError] {
                        prop_assert!((a.expected_loss(est, kind) - b.expected_loss(est, kind)).abs() < 1e-6);
                    }
                    let circuit = Circuit::new(3, c).unwrap();
                    prop_assert!((a.predict_outcome(circuit, 30, nm) - b.predict_outcome(circuit, 30, nm)).abs() < 1e-6);
                }
            }
        }
    }
}
