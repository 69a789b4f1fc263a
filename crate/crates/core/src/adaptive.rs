//! The adaptive estimation loop.
//!
//! Step `i` samples a circuit of depth `n_i = min(2^(i-1), n_opt, n_lim)`
//! until the posterior puts at least `1 - eps_i` of its mass inside the
//! interval `Theta_i` of half-width `pi / (2 n_{i+1})`. It then predicts the
//! loss of spending every remaining application either on the current depth
//! or on the next one, and either deepens or spends the rest of the budget at
//! the current depth, retuning the phase after every shot. Leftover
//! applications that cannot pay for another deep shot go to `(1, phi_1)`.
//!
//! Intervals after the first are clamped inside their predecessor, so the
//! sequence `Theta_1 ⊇ Theta_2 ⊇ ...` nests as circular sets.

use std::collections::BTreeMap;
use std::f64::consts::{FRAC_PI_4, PI};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{reduce_angle, sample_outcome, wrapped_difference, Circuit, MeasurementRecord, NoiseModel};
use crate::posterior::{CircularInterval, LossKind, RefiningPosterior, DEFAULT_GRID_SIZE};

/// Slack factor applied to the per-step shot budget before a stuck gate is abandoned.
pub const SHOT_CAP_SLACK: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Estimator {
    Map,
    CircularMean,
}

impl std::str::FromStr for Estimator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "map" => Ok(Estimator::Map),
            "circular-mean" | "mean" => Ok(Estimator::CircularMean),
            other => Err(Error::Parse(format!("unknown estimator '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlgorithmConfig {
    pub total_resources: u64,
    pub depth_limit: u32,
    pub epsilon_exponent: f64,
    pub epsilon_scale: f64,
    pub noise: NoiseModel,
    pub loss_kind: LossKind,
    pub estimator: Estimator,
    pub grid_size: usize,
    pub seed: u64,
}

impl AlgorithmConfig {
    /// Noiseless defaults: `p = 3`, `eps = 1`, MAP estimator, absolute-error loss.
    pub fn new(total_resources: u64) -> Self {
        Self {
            total_resources,
            depth_limit: 1 << 20,
            epsilon_exponent: 3.0,
            epsilon_scale: 1.0,
            noise: NoiseModel::noiseless(),
            loss_kind: LossKind::AbsoluteError,
            estimator: Estimator::Map,
            grid_size: DEFAULT_GRID_SIZE,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_resources < 2 {
            return Err(Error::InvalidConfig("total_resources must be at least 2".into()));
        }
        if self.depth_limit == 0 {
            return Err(Error::InvalidConfig("depth_limit must be at least 1".into()));
        }
        if !(self.epsilon_exponent > 0.0 && self.epsilon_exponent.is_finite()) {
            return Err(Error::InvalidConfig("epsilon_exponent must be positive".into()));
        }
        if !(self.epsilon_scale > 0.0 && self.epsilon_scale.is_finite()) {
            return Err(Error::InvalidConfig("epsilon_scale must be positive".into()));
        }
        // Re-validate in case the struct was built field by field.
        NoiseModel::new(self.noise.alpha(), self.noise.beta())?;
        if self.grid_size < crate::posterior::MIN_GRID_SIZE {
            return Err(Error::GridTooSmall(self.grid_size));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Decision {
    Deepen,
    Stay,
    Exhaust,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step_index: u32,
    /// Circuits sampled during this phase; the first step alternates two.
    pub circuits: Vec<Circuit>,
    pub shots_used: u64,
    pub successes: u64,
    pub interval: CircularInterval,
    pub confidence_reached: f64,
    pub required_confidence: f64,
    pub gate_passed: bool,
    pub cap_hit: bool,
    pub predicted_loss_stay: Option<f64>,
    pub predicted_loss_deepen: Option<f64>,
    pub decision: Decision,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeTally {
    pub depth: u32,
    pub shots: u64,
    pub successes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlgorithmTrace {
    pub config: AlgorithmConfig,
    pub theta_true: f64,
    pub steps: Vec<StepRecord>,
    pub resources_spent: u64,
    pub final_estimate: f64,
    pub final_expected_loss: f64,
    pub outcome_counts: Vec<OutcomeTally>,
}

impl AlgorithmTrace {
    pub fn max_depth(&self) -> u32 {
        self.outcome_counts.iter().map(|t| t.depth).max().unwrap_or(0)
    }

    /// Final interval of each gated step, in step order.
    pub fn step_intervals(&self) -> Vec<(u32, CircularInterval)> {
        let mut out: Vec<(u32, CircularInterval)> = Vec::new();
        for s in &self.steps {
            match out.last_mut() {
                Some(last) if last.0 == s.step_index => last.1 = s.interval,
                _ => out.push((s.step_index, s.interval)),
            }
        }
        out
    }

    /// `Theta_i ⊆ Theta_{i-1}` for every consecutive pair of steps.
    pub fn intervals_nest(&self) -> bool {
        self.step_intervals()
            .windows(2)
            .all(|w| w[1].1.is_within(&w[0].1, 1e-9))
    }

    /// `sum(depth * shots)` recomputed from the tallies.
    pub fn tallied_resources(&self) -> u64 {
        self.outcome_counts
            .iter()
            .map(|t| u64::from(t.depth) * t.shots)
            .sum()
    }
}

/// Confidence gate `eps_i = min(1, eps * (n_i / N_tot)^p)`.
pub fn required_confidence(depth: u32, config: &AlgorithmConfig) -> f64 {
    let ratio = f64::from(depth) / config.total_resources as f64;
    (config.epsilon_scale * ratio.powf(config.epsilon_exponent)).min(1.0)
}

/// Depth of step `i`: `min(2^(i-1), round(n_opt), n_lim)`.
pub fn next_depth(step_index: u32, config: &AlgorithmConfig) -> u32 {
    let doubling = if step_index == 0 {
        1
    } else {
        1u64.checked_shl(step_index - 1).unwrap_or(u64::MAX)
    };
    let cap = config
        .noise
        .rounded_optimal_depth()
        .map_or(config.depth_limit, |n| n.min(config.depth_limit));
    doubling.min(u64::from(cap)) as u32
}

/// Centre of the next interval. Past the first step it is clamped so that an
/// interval of half-width `pi / (2 next_depth)` stays inside `previous`.
pub fn choose_center(
    estimate: f64,
    previous: Option<&CircularInterval>,
    next_depth: u32,
    step_index: u32,
) -> Result<f64> {
    if next_depth == 0 {
        return Err(Error::ZeroDepth);
    }
    let half = PI / (2.0 * f64::from(next_depth));
    clamp_center(estimate, previous, half, step_index)
}

/// [`choose_center`] for an explicit half-width.
pub fn clamp_center(
    estimate: f64,
    previous: Option<&CircularInterval>,
    half_width: f64,
    step_index: u32,
) -> Result<f64> {
    let prev = match previous {
        Some(p) if step_index > 1 && p.half_width() < PI => p,
        _ => return Ok(reduce_angle(estimate)),
    };
    if prev.half_width() + 1e-12 < half_width {
        return Err(Error::InfeasibleInterval {
            inner: half_width,
            outer: prev.half_width(),
        });
    }
    // Work in coordinates unwrapped around the previous centre.
    let lo = prev.center() - prev.half_width() + half_width;
    let hi = prev.center() + prev.half_width() - half_width;
    let e = prev.center() + wrapped_difference(prev.center(), estimate);
    Ok(reduce_angle(e.clamp(lo, hi.max(lo))))
}

/// Worst-case shots for a gated phase from the Chernoff bound,
/// `32 / (pi^2 alpha^2 beta^(2n)) * [ln(2/eps_i) - ln(2/eps_{i-1}) / 4]`,
/// clamped at zero. `eps_prev = None` drops the second term (no prior information).
pub fn chernoff_shots(eps_i: f64, eps_prev: Option<f64>, depth: u32, noise: NoiseModel) -> f64 {
    let bracket = (2.0 / eps_i).ln() - eps_prev.map_or(0.0, |e| 0.25 * (2.0 / e).ln());
    if !(bracket > 0.0) {
        return 0.0;
    }
    32.0 / (PI * PI * noise.contrast(depth).powi(2)) * bracket
}

/// [`chernoff_shots`] rounded up to a whole shot count.
pub fn appendix_shot_budget(eps_i: f64, eps_prev: Option<f64>, depth: u32, noise: NoiseModel) -> u64 {
    let nu = chernoff_shots(eps_i, eps_prev, depth, noise).ceil();
    if nu.is_finite() {
        nu as u64
    } else {
        u64::MAX
    }
}

/// Worst-case Chernoff shot budget `nu_i` of step `step_index`.
pub fn max_shots_for_step(step_index: u32, config: &AlgorithmConfig) -> u64 {
    let depth = next_depth(step_index, config);
    let eps = required_confidence(depth, config);
    let prev = if step_index >= 2 {
        Some(required_confidence(next_depth(step_index - 1, config), config))
    } else {
        None
    };
    appendix_shot_budget(eps, prev, depth, config.noise)
}

struct Runner<'a> {
    config: &'a AlgorithmConfig,
    theta_true: f64,
    rng: ChaCha8Rng,
    posterior: RefiningPosterior,
    left: u64,
    tallies: BTreeMap<u32, (u64, u64)>,
    steps: Vec<StepRecord>,
}

impl<'a> Runner<'a> {
    fn shoot(&mut self, circuit: Circuit, shots: u64) -> Result<u64> {
        let x = sample_outcome(circuit, shots, self.theta_true, self.config.noise, &mut self.rng);
        self.posterior
            .observe(MeasurementRecord::new(circuit, shots, x as f64)?)?;
        self.left -= u64::from(circuit.depth()) * shots;
        let t = self.tallies.entry(circuit.depth()).or_default();
        t.0 += shots;
        t.1 += x;
        Ok(x)
    }

    fn shot_cap(&self, step_index: u32, depth: u32) -> u64 {
        let budget = max_shots_for_step(step_index, self.config);
        let affordable = self.left / u64::from(depth);
        if budget == 0 {
            affordable
        } else {
            ((budget as f64 * SHOT_CAP_SLACK).ceil() as u64).min(affordable)
        }
    }

    /// Estimate used inside the loop: MAP restricted to the current outer interval.
    fn masked_estimate(&self, outer: Option<&CircularInterval>) -> f64 {
        match outer {
            Some(i) => self.posterior.grid().map_estimate_within(i),
            None => self.posterior.grid().map_estimate(),
        }
    }

    /// Samples until the gate of step `i` passes, the shot cap is hit, or the
    /// budget cannot pay for another shot.
    fn gated_phase(
        &mut self,
        step_index: u32,
        circuits: &[Circuit],
        outer: Option<CircularInterval>,
    ) -> Result<StepRecord> {
        let depth = circuits[0].depth();
        let following = next_depth(step_index + 1, self.config);
        let half = PI / (2.0 * f64::from(following));
        let eps = required_confidence(depth, self.config);
        let cap = self.shot_cap(step_index, depth);

        let locate = |runner: &Self| -> Result<CircularInterval> {
            let est = runner.masked_estimate(outer.as_ref());
            let c = choose_center(est, outer.as_ref(), following, step_index)?;
            CircularInterval::new(c, half)
        };

        let mut interval = locate(self)?;
        let (mut shots, mut successes) = (0u64, 0u64);
        let mut gate_passed = false;
        while shots < cap && self.left >= u64::from(depth) {
            let circuit = circuits[(shots % circuits.len() as u64) as usize];
            successes += self.shoot(circuit, 1)?;
            shots += 1;
            interval = locate(self)?;
            if self.posterior.grid().mass_outside(&interval) <= eps {
                gate_passed = true;
                break;
            }
        }
        let confidence = self.posterior.grid().confidence(&interval);
        let record = StepRecord {
            step_index,
            circuits: circuits.to_vec(),
            shots_used: shots,
            successes,
            interval,
            confidence_reached: confidence,
            required_confidence: 1.0 - eps,
            gate_passed,
            cap_hit: !gate_passed && shots >= cap && self.left >= u64::from(depth),
            predicted_loss_stay: None,
            predicted_loss_deepen: None,
            decision: Decision::Exhaust,
        };
        Ok(record)
    }

    fn run(mut self) -> Result<AlgorithmTrace> {
        let cfg = self.config;
        let mut step_index = 1u32;
        let mut circuits = vec![Circuit::new(1, 0.0)?, Circuit::new(1, FRAC_PI_4)?];
        let mut outer: Option<CircularInterval> = None;

        // Gated steps until the loop settles on a depth.
        let stay_depth = loop {
            let depth = circuits[0].depth();
            let mut record = self.gated_phase(step_index, &circuits, outer)?;
            let interval = record.interval;

            if self.left < u64::from(depth) {
                self.steps.push(record);
                break None;
            }
            let following = next_depth(step_index + 1, cfg);
            let stay = Circuit::tuned(depth, self.masked_estimate(Some(&interval)))?;
            let loss_stay = self.posterior.predict_loss(stay, self.left, cfg.loss_kind)?;
            record.predicted_loss_stay = Some(loss_stay);

            let deeper = if following > depth && self.left >= u64::from(following) {
                let c = Circuit::tuned(following, interval.center())?;
                let loss = self.posterior.predict_loss(c, self.left, cfg.loss_kind)?;
                record.predicted_loss_deepen = Some(loss);
                Some((c, loss))
            } else {
                None
            };

            match deeper {
                // First step: stay only if strictly better; later steps: deepen only if strictly better.
                Some((c, loss_deep))
                    if (step_index == 1 && !(loss_stay < loss_deep))
                        || (step_index > 1 && loss_deep < loss_stay) =>
                {
                    record.decision = Decision::Deepen;
                    self.steps.push(record);
                    step_index += 1;
                    circuits = vec![c];
                    outer = Some(interval);
                }
                _ => {
                    record.decision = Decision::Stay;
                    self.steps.push(record);
                    break Some((depth, interval));
                }
            }
        };

        // Spend what is left at the chosen depth, retuning after every shot.
        if let Some((depth, interval)) = stay_depth {
            let mut used = Vec::new();
            let (mut shots, mut successes) = (0u64, 0u64);
            while self.left >= u64::from(depth) {
                let c = Circuit::tuned(depth, self.masked_estimate(Some(&interval)))?;
                successes += self.shoot(c, 1)?;
                shots += 1;
                if used.last() != Some(&c) {
                    used.push(c);
                }
            }
            if shots > 0 {
                self.steps.push(self.exhaust_record(step_index, used, shots, successes, interval));
            }
        }

        // Remainder on (1, phi_1) in one batch.
        if self.left > 0 {
            let interval = self
                .steps
                .last()
                .map_or(CircularInterval::full_circle(), |s| s.interval);
            let c = Circuit::tuned(1, self.masked_estimate(Some(&interval)))?;
            let shots = self.left;
            let x = self.shoot(c, shots)?;
            self.steps.push(self.exhaust_record(step_index, vec![c], shots, x, interval));
        }

        let grid = self.posterior.grid();
        let final_estimate = match cfg.estimator {
            Estimator::Map => grid.map_estimate(),
            Estimator::CircularMean => grid.circular_mean_estimate()?,
        };
        let final_expected_loss = grid.expected_loss(final_estimate, cfg.loss_kind);
        let outcome_counts = self
            .tallies
            .iter()
            .map(|(&depth, &(shots, successes))| OutcomeTally {
                depth,
                shots,
                successes,
            })
            .collect();
        Ok(AlgorithmTrace {
            config: *cfg,
            theta_true: self.theta_true,
            steps: self.steps,
            resources_spent: cfg.total_resources - self.left,
            final_estimate,
            final_expected_loss,
            outcome_counts,
        })
    }

    fn exhaust_record(
        &self,
        step_index: u32,
        circuits: Vec<Circuit>,
        shots: u64,
        successes: u64,
        interval: CircularInterval,
    ) -> StepRecord {
        StepRecord {
            step_index,
            circuits,
            shots_used: shots,
            successes,
            interval,
            confidence_reached: self.posterior.grid().confidence(&interval),
            required_confidence: 0.0,
            gate_passed: false,
            cap_hit: false,
            predicted_loss_stay: None,
            predicted_loss_deepen: None,
            decision: Decision::Exhaust,
        }
    }
}

/// Runs one adaptive estimation against a simulated device with phase `theta_true`.
pub fn run(config: &AlgorithmConfig, theta_true: f64) -> Result<AlgorithmTrace> {
    config.validate()?;
    let runner = Runner {
        config,
        theta_true: reduce_angle(theta_true),
        rng: ChaCha8Rng::seed_from_u64(config.seed),
        posterior: RefiningPosterior::uniform(config.grid_size, config.noise)?,
        left: config.total_resources,
        tallies: BTreeMap::new(),
        steps: Vec::new(),
    };
    runner.run()
}
