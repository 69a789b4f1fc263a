//! Comparison strategies and reference curves.
//!
//! - textbook QPEA with an `m`-qubit register (noiseless only),
//! - non-adaptive doubling: fixed shots of `(n, 0)` and `(n, pi/2)` for
//!   `n = 1, 2, 4, ...`, labelled `nonadaptive-doubling`,
//! - the classical strategy that only ever runs depth-1 circuits,
//! - SQL / Heisenberg / noisy-floor reference values,
//! - the explicit pre-asymptotic loss bound of the adaptive loop.

use std::f64::consts::{FRAC_PI_2, PI, TAU};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adaptive::chernoff_shots;
use crate::error::{Error, Result};
use crate::model::{reduce_angle, sample_outcome, Circuit, MeasurementRecord, NoiseModel};
use crate::posterior::{GridPosterior, LossKind, RefiningPosterior, DEFAULT_GRID_SIZE, POINTS_PER_PERIOD};

pub const MAX_QPEA_QUBITS: u32 = 24;
/// Largest register for which the QPEA posterior is built on a grid.
pub const MAX_QPEA_POSTERIOR_QUBITS: u32 = 14;

/// What every runner reports back to the harness.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyOutcome {
    pub estimate: f64,
    pub resources_spent: u64,
    pub max_depth: u32,
    /// Posterior expected loss of the estimate, when a posterior exists.
    pub expected_loss: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QpeaConfig {
    pub qubit_count: u32,
    pub noise: NoiseModel,
    pub seed: u64,
}

impl QpeaConfig {
    pub fn new(qubit_count: u32, noise: NoiseModel, seed: u64) -> Result<Self> {
        if !(1..=MAX_QPEA_QUBITS).contains(&qubit_count) {
            return Err(Error::QubitCountOutOfRange(qubit_count));
        }
        if !noise.is_noiseless() {
            return Err(Error::InvalidConfig("QPEA is only modelled without noise".into()));
        }
        Ok(Self {
            qubit_count,
            noise,
            seed,
        })
    }

    /// Unitary applications used by the controlled powers: `2^m - 1`.
    pub fn resources(&self) -> u64 {
        (1u64 << self.qubit_count) - 1
    }

    /// Largest register whose `2^m - 1` applications fit in `budget`.
    pub fn for_budget(budget: u64, noise: NoiseModel, seed: u64) -> Result<Self> {
        let m = (64 - (budget + 1).leading_zeros()).saturating_sub(1);
        Self::new(m.min(MAX_QPEA_QUBITS), noise, seed)
    }
}

/// `Pr[k | theta]` for a single outcome of the inverse-QFT readout.
fn qpea_probability(theta: f64, k: u64, qubit_count: u32) -> f64 {
    let size = (1u64 << qubit_count) as f64;
    // Offset from outcome k in units of the outcome spacing.
    let t = reduce_angle(theta) * size / TAU - k as f64;
    let mut frac = t - t.round();
    if frac.abs() < 1e-12 {
        frac = 0.0;
    }
    if frac == 0.0 {
        return if (t.round() as i64).rem_euclid(size as i64) == 0 {
            1.0
        } else {
            0.0
        };
    }
    let num = (PI * frac).sin();
    let den = (PI * t / size).sin();
    (num * num) / (den * den * size * size)
}

/// Outcome distribution of the `m`-qubit QPEA.
pub fn qpea_outcome_distribution(theta: f64, qubit_count: u32) -> Result<Vec<f64>> {
    if !(1..=MAX_QPEA_QUBITS).contains(&qubit_count) {
        return Err(Error::QubitCountOutOfRange(qubit_count));
    }
    let size = 1u64 << qubit_count;
    Ok((0..size)
        .map(|k| qpea_probability(theta, k, qubit_count))
        .collect())
}

/// Grid posterior over `theta` after observing outcome `k`, from a uniform prior.
pub fn qpea_posterior(k: u64, qubit_count: u32) -> Result<GridPosterior> {
    if !(1..=MAX_QPEA_POSTERIOR_QUBITS).contains(&qubit_count) {
        return Err(Error::QubitCountOutOfRange(qubit_count));
    }
    let grid = DEFAULT_GRID_SIZE.max(POINTS_PER_PERIOD << qubit_count);
    let weights = (0..grid)
        .map(|g| qpea_probability(g as f64 * TAU / grid as f64, k, qubit_count).ln())
        .collect();
    GridPosterior::from_log_weights(weights)
}

/// One run of the QPEA: sample an outcome and report `2 pi k / 2^m`.
pub fn run_qpea(theta_true: f64, config: &QpeaConfig, loss: LossKind) -> Result<StrategyOutcome> {
    let dist = qpea_outcome_distribution(theta_true, config.qubit_count)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut k = dist.len() - 1;
    for (i, p) in dist.iter().enumerate() {
        acc += p;
        if u < acc {
            k = i;
            break;
        }
    }
    // Guard against the cumulative sum ending just below u.
    while dist[k] == 0.0 && k > 0 {
        k -= 1;
    }
    let estimate = TAU * k as f64 / dist.len() as f64;
    let expected_loss = if config.qubit_count <= MAX_QPEA_POSTERIOR_QUBITS {
        Some(qpea_posterior(k as u64, config.qubit_count)?.expected_loss(estimate, loss))
    } else {
        None
    };
    Ok(StrategyOutcome {
        estimate,
        resources_spent: config.resources(),
        max_depth: 1 << (config.qubit_count - 1),
        expected_loss,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DoublingRun {
    pub outcome: StrategyOutcome,
    pub records: Vec<MeasurementRecord>,
}

struct Sampler {
    rng: ChaCha8Rng,
    theta: f64,
    noise: NoiseModel,
    posterior: RefiningPosterior,
    records: Vec<MeasurementRecord>,
    spent: u64,
}

impl Sampler {
    fn new(theta: f64, noise: NoiseModel, seed: u64) -> Result<Self> {
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            theta: reduce_angle(theta),
            noise,
            posterior: RefiningPosterior::uniform(DEFAULT_GRID_SIZE, noise)?,
            records: Vec::new(),
            spent: 0,
        })
    }

    fn sample(&mut self, circuit: Circuit, shots: u64) -> Result<()> {
        if shots == 0 {
            return Ok(());
        }
        let x = sample_outcome(circuit, shots, self.theta, self.noise, &mut self.rng);
        let record = MeasurementRecord::new(circuit, shots, x as f64)?;
        self.posterior.observe(record)?;
        self.records.push(record);
        self.spent += record.resources();
        Ok(())
    }

    /// Splits `shots` between the cosine and sine quadratures of `depth`.
    fn sample_pair(&mut self, depth: u32, shots: u64) -> Result<()> {
        let first = shots.div_ceil(2);
        self.sample(Circuit::new(depth, 0.0)?, first)?;
        self.sample(Circuit::new(depth, FRAC_PI_2)?, shots - first)
    }

    fn finish(self, loss: LossKind) -> DoublingRun {
        let grid = self.posterior.grid();
        let estimate = grid.map_estimate();
        let max_depth = self
            .records
            .iter()
            .map(|r| r.circuit().depth())
            .max()
            .unwrap_or(0);
        DoublingRun {
            outcome: StrategyOutcome {
                estimate,
                resources_spent: self.spent,
                max_depth,
                expected_loss: Some(grid.expected_loss(estimate, loss)),
            },
            records: self.records,
        }
    }
}

/// Non-adaptive doubling: `shots_per_depth` shots of each of `(n, 0)` and
/// `(n, pi/2)` for `n = 1, 2, 4, ...` while the budget allows, then the
/// leftover at the deepest affordable depth.
pub fn run_nonadaptive_doubling(
    total_resources: u64,
    theta_true: f64,
    noise: NoiseModel,
    shots_per_depth: u64,
    seed: u64,
    loss: LossKind,
) -> Result<DoublingRun> {
    if shots_per_depth == 0 {
        return Err(Error::InvalidConfig("shots_per_depth must be at least 1".into()));
    }
    if total_resources < 2 {
        return Err(Error::InsufficientResources {
            available: total_resources,
            depth: 1,
        });
    }
    let mut s = Sampler::new(theta_true, noise, seed)?;
    let mut depth = 1u32;
    let mut deepest = 1u32;
    loop {
        let cost = 2 * shots_per_depth * u64::from(depth);
        if cost > total_resources - s.spent {
            break;
        }
        s.sample(Circuit::new(depth, 0.0)?, shots_per_depth)?;
        s.sample(Circuit::new(depth, FRAC_PI_2)?, shots_per_depth)?;
        deepest = depth;
        match depth.checked_mul(2) {
            Some(d) => depth = d,
            None => break,
        }
    }
    while s.spent < total_resources {
        let left = total_resources - s.spent;
        let mut d = deepest;
        while u64::from(d) > left {
            d /= 2;
        }
        s.sample_pair(d, left / u64::from(d))?;
    }
    Ok(s.finish(loss))
}

/// Separable-probe strategy: the whole budget on depth-1 circuits, split
/// between `(1, 0)` and `(1, pi/2)`.
pub fn run_classical(
    total_resources: u64,
    theta_true: f64,
    noise: NoiseModel,
    seed: u64,
    loss: LossKind,
) -> Result<StrategyOutcome> {
    if total_resources < 2 {
        return Err(Error::InsufficientResources {
            available: total_resources,
            depth: 1,
        });
    }
    let mut s = Sampler::new(theta_true, noise, seed)?;
    s.sample_pair(1, total_resources)?;
    Ok(s.finish(loss).outcome)
}

/// Reference MAE values `sqrt(2/pi) * sigma` for a budget.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LimitCurves {
    pub sql: f64,
    pub hl: f64,
    pub noisy_floor: Option<f64>,
}

/// Half-normal mean for a given variance.
pub fn mae_from_variance(variance: f64) -> f64 {
    (2.0 / PI).sqrt() * variance.sqrt()
}

pub fn limit_curves(total_resources: u64, noise: NoiseModel) -> LimitCurves {
    let n = total_resources as f64;
    LimitCurves {
        sql: mae_from_variance(1.0 / n),
        hl: mae_from_variance(1.0 / (n * n)),
        noisy_floor: noise.variance_floor(n).map(mae_from_variance),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundParams {
    pub epsilon_scale: f64,
    pub exponent: f64,
    pub step_count: u32,
    pub total_resources: u64,
    pub noise: NoiseModel,
}

/// Explicit loss bound for a run of `m` doubling steps.
///
/// Steps `1..m-1` spend the Chernoff worst-case shot counts with
/// `eps_i = min(1, eps (n_i / N_tot)^p)`; the last step gets whatever the
/// budget leaves. The result is capped by the trivial bound (pi or pi^2).
pub fn appendix_loss_bound(params: &BoundParams, kind: LossKind) -> Result<f64> {
    let m = params.step_count;
    if m < 2 || m > 62 {
        return Err(Error::InvalidConfig(format!("step count {m} outside 2..=62")));
    }
    if !(params.exponent >= 0.0 && params.epsilon_scale > 0.0) {
        return Err(Error::InvalidConfig("need p >= 0 and eps > 0".into()));
    }
    let budget = params.total_resources as f64;
    let noise = params.noise;
    let depths: Vec<u32> = (0..m).map(|i| 1u32 << i).collect();
    let eps: Vec<f64> = depths
        .iter()
        .map(|&n| (params.epsilon_scale * (f64::from(n) / budget).powf(params.exponent)).min(1.0))
        .collect();

    let last = (m - 1) as usize;
    let chain: f64 = (0..last)
        .map(|i| {
            let prev = if i == 0 { None } else { Some(eps[i - 1]) };
            f64::from(depths[i]) * chernoff_shots(eps[i], prev, depths[i], noise)
        })
        .sum();
    let n_m = f64::from(depths[last]);
    let final_shots = (budget - chain) / n_m;
    if !(final_shots > 0.0) {
        return Err(Error::InfeasibleChain {
            needed: chain + n_m,
            available: params.total_resources,
        });
    }
    let precision = 8.0 * n_m * n_m / (PI * PI) * (2.0 / eps[last - 1]).ln()
        + noise.contrast(depths[last]).powi(2) * n_m * n_m * final_shots;
    let sigma_sq = 1.0 / precision;

    let middle = 1..last;
    let bound = match kind {
        LossKind::AbsoluteError => {
            1.5 * PI * eps[0]
                + middle
                    .map(|i| eps[i] * PI / (2.0 * f64::from(depths[i])))
                    .sum::<f64>()
                + (2.0 * sigma_sq / PI).sqrt()
        }
        LossKind::SquaredError => {
            3.75 * PI * PI * eps[0]
                + middle
                    .map(|i| eps[i] * 3.0 * PI * PI / (4.0 * f64::from(depths[i]).powi(2)))
                    .sum::<f64>()
                + sigma_sq
        }
    };
    let trivial = match kind {
        LossKind::AbsoluteError => PI,
        LossKind::SquaredError => PI * PI,
    };
    Ok(bound.min(trivial))
}

/// The tightest [`appendix_loss_bound`] over step counts whose deepest circuit
/// respects `min(round(n_opt), n_lim, N_tot)`. Returns the bound and the step count.
pub fn best_loss_bound(
    total_resources: u64,
    exponent: f64,
    epsilon_scale: f64,
    noise: NoiseModel,
    depth_limit: u32,
    kind: LossKind,
) -> Result<(f64, u32)> {
    let cap = noise
        .rounded_optimal_depth()
        .map_or(depth_limit, |n| n.min(depth_limit))
        .min(total_resources.min(u64::from(u32::MAX)) as u32)
        .max(1);
    let max_steps = 32 - cap.leading_zeros();
    let mut best: Option<(f64, u32)> = None;
    let mut last_err = None;
    for m in 2..=max_steps.max(2) {
        let params = BoundParams {
            epsilon_scale,
            exponent,
            step_count: m,
            total_resources,
            noise,
        };
        match appendix_loss_bound(&params, kind) {
            Ok(b) if best.is_none_or(|(v, _)| b < v) => best = Some((b, m)),
            Ok(_) => {}
            Err(e) => last_err = Some(e),
        }
    }
    best.ok_or_else(|| {
        last_err.unwrap_or(Error::InfeasibleChain {
            needed: f64::INFINITY,
            available: total_resources,
        })
    })
}
