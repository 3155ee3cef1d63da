//! Synthetic stand-in for the patient + implanted stimulation device.
//!
//! Beta-band amplitude responds to stimulation through a first-order
//! autocorrelated surrogate: β' = (1−ρ)·baseline·(1 − g·a) + ρ·β + ε, clipped
//! at zero. Per-step rewards follow the thresholded two-branch rule with an
//! amplitude penalty; end-of-session quality-of-control metrics are
//! synthesized from the session's beta/stimulation history and combined into
//! the end-of-session reward.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kvconf::KvConfig;
use crate::replay::{Trajectory, TrajectoryConstants, Transition};

/// Stimulation amplitude as a fraction of the clinician-set constant level.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StimAction(f64);

impl StimAction {
    pub fn new(amplitude_fraction: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&amplitude_fraction) || amplitude_fraction.is_nan() {
            return Err(Error::Domain(format!(
                "stimulation amplitude fraction {amplitude_fraction} outside [0, 1]"
            )));
        }
        Ok(StimAction(amplitude_fraction))
    }

    pub fn value(&self) -> f64 {
        self.0
    }
}

/// Anything that maps a beta-window state to a stimulation amplitude.
/// Stochastic controllers carry their own seeded RNG.
pub trait Policy {
    fn action(&mut self, state: &[f64]) -> f64;
}

/// Decorrelates a stochastic controller's RNG from the environment streams
/// that share the same session seed.
pub fn derive_policy_seed(session_seed: u64) -> u64 {
    session_seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(17) ^ 0xD1B5_4A32_D192_ED03
}

/// Fixed-amplitude controller (a ≡ c); c = 1 is the constant-stimulation
/// analog.
#[derive(Debug, Clone, Copy)]
pub struct ConstantPolicy(pub f64);

impl Policy for ConstantPolicy {
    fn action(&mut self, _state: &[f64]) -> f64 {
        self.0
    }
}

/// Synthetic patient parameters. Loaded from a plain key-value file whose
/// keys mirror these fields exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct PatientProfile {
    pub id: String,
    /// Mean unstimulated beta level.
    pub baseline_beta: f64,
    /// Per-unit-amplitude fractional beta reduction, g ∈ (0, 1].
    pub suppression_gain: f64,
    /// Autocorrelation of beta noise, ρ ∈ [0, 1).
    pub ar_coefficient: f64,
    pub noise_std: f64,
    /// ξ_β: the reward threshold on beta.
    pub beta_threshold: f64,
    /// Per-minute beta means above this count as tremor-active time.
    pub tremor_threshold: f64,
    pub qoc_noise_std: f64,
    /// Scale of the synthesized grasp frequency (Hz).
    pub grasp_base: f64,
    pub seed: u64,
}

impl PatientProfile {
    /// The profile used by the acceptance runs: moderate stimulation is
    /// enough to suppress beta below threshold, so energy can be saved.
    pub fn reference() -> Self {
        PatientProfile {
            id: "reference".to_string(),
            baseline_beta: 1.0,
            suppression_gain: 0.8,
            ar_coefficient: 0.7,
            noise_std: 0.02,
            beta_threshold: 0.55,
            tremor_threshold: 0.6,
            qoc_noise_std: 0.05,
            grasp_base: 1.2,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.suppression_gain > 0.0 && self.suppression_gain <= 1.0) {
            return Err(Error::Domain(format!(
                "suppression_gain {} outside (0, 1]",
                self.suppression_gain
            )));
        }
        if !(0.0..1.0).contains(&self.ar_coefficient) {
            return Err(Error::Domain(format!(
                "ar_coefficient {} outside [0, 1)",
                self.ar_coefficient
            )));
        }
        if self.baseline_beta <= self.beta_threshold {
            return Err(Error::Domain(format!(
                "baseline_beta {} must exceed beta_threshold {} (unstimulated patient is pathological)",
                self.baseline_beta, self.beta_threshold
            )));
        }
        if self.noise_std < 0.0 || self.qoc_noise_std < 0.0 {
            return Err(Error::Domain("noise stds must be non-negative".into()));
        }
        if self.grasp_base <= 0.0 {
            return Err(Error::Domain("grasp_base must be positive".into()));
        }
        Ok(())
    }

    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        let profile = PatientProfile {
            id: kv.require("id")?.to_string(),
            baseline_beta: kv.f64_or("baseline_beta", 1.0)?,
            suppression_gain: kv.f64_or("suppression_gain", 0.8)?,
            ar_coefficient: kv.f64_or("ar_coefficient", 0.7)?,
            noise_std: kv.f64_or("noise_std", 0.02)?,
            beta_threshold: kv.f64_or("beta_threshold", 0.55)?,
            tremor_threshold: kv.f64_or("tremor_threshold", 0.6)?,
            qoc_noise_std: kv.f64_or("qoc_noise_std", 0.05)?,
            grasp_base: kv.f64_or("grasp_base", 1.2)?,
            seed: kv.u64_or("seed", 0)?,
        };
        profile.validate()?;
        Ok(profile)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        PatientProfile::from_kv(&KvConfig::load(path)?)
    }

    pub fn to_kv_text(&self) -> String {
        format!(
            "id = {}\nbaseline_beta = {}\nsuppression_gain = {}\nar_coefficient = {}\n\
             noise_std = {}\nbeta_threshold = {}\ntremor_threshold = {}\nqoc_noise_std = {}\n\
             grasp_base = {}\nseed = {}\n",
            self.id,
            self.baseline_beta,
            self.suppression_gain,
            self.ar_coefficient,
            self.noise_std,
            self.beta_threshold,
            self.tremor_threshold,
            self.qoc_noise_std,
            self.grasp_base,
            self.seed
        )
    }
}

/// Per-step and end-of-session reward constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardConfig {
    /// Reward when the fresh beta sample is below threshold (non-negative).
    pub r_a: f64,
    /// Penalty when it is not (negative).
    pub r_b: f64,
    /// Amplitude penalty weight.
    pub c1: f64,
    /// End-of-session weights for grasp frequency, rating, tremor.
    pub c2: f64,
    pub c3: f64,
    pub c4: f64,
    pub gamma: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig { r_a: 0.0, r_b: -1.0, c1: 0.3, c2: 10.0, c3: 10.0, c4: 10.0, gamma: 0.99 }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.r_a >= 0.0 && self.r_b < 0.0) {
            return Err(Error::Domain(format!("need r_a ≥ 0 > r_b, got {} and {}", self.r_a, self.r_b)));
        }
        if self.c1 <= 0.0 {
            return Err(Error::Domain(format!("C1 must be positive, got {}", self.c1)));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::Domain(format!("gamma {} outside [0, 1)", self.gamma)));
        }
        if self.c2 <= 0.0 || self.c3 <= 0.0 || self.c4 <= 0.0 {
            return Err(Error::Domain("C2, C3, C4 must be positive".into()));
        }
        Ok(())
    }

    /// Two-branch per-step reward with the amplitude penalty.
    pub fn step_reward(&self, beta_test: f64, xi_beta: f64, action: f64) -> f64 {
        let base = if beta_test < xi_beta { self.r_a } else { self.r_b };
        base - self.c1 * action
    }

    /// Linear end-of-session combination of the three QoC metrics.
    pub fn end_reward(&self, qoc: &QoCReport) -> f64 {
        self.c2 * qoc.grasp_hz + self.c3 * qoc.rate as f64 - self.c4 * qoc.tremor_pct
    }
}

/// End-of-session quality-of-control metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QoCReport {
    pub grasp_hz: f64,
    /// Patient rating in [1, 10].
    pub rate: i64,
    /// Fraction of tremor-active session time, in [0, 100].
    pub tremor_pct: f64,
    #[serde(skip, default)]
    pub session_len: usize,
}

impl QoCReport {
    pub fn validate(&self) -> Result<()> {
        if !(self.grasp_hz > 0.0) {
            return Err(Error::Domain(format!("grasp frequency {} must be positive", self.grasp_hz)));
        }
        if !(1..=10).contains(&self.rate) {
            return Err(Error::Domain(format!("rating {} outside [1, 10]", self.rate)));
        }
        if !(0.0..=100.0).contains(&self.tremor_pct) {
            return Err(Error::Domain(format!("tremor fraction {} outside [0, 100]", self.tremor_pct)));
        }
        Ok(())
    }
}

/// Grasp frequency from inter-grasp gap times: the reciprocal of the mean
/// gap. `gaps` holds N−1 entries for N grasps.
pub fn grasp_frequency(gaps: &[f64]) -> Result<f64> {
    if gaps.is_empty() {
        return Err(Error::Contract("grasp_frequency needs at least one gap".into()));
    }
    let mean = gaps.iter().sum::<f64>() / gaps.len() as f64;
    if mean <= 0.0 {
        return Err(Error::Domain("non-positive mean gap".into()));
    }
    Ok(1.0 / mean)
}

/// Tremor-active percentage from per-minute severity flags.
pub fn tremor_fraction_pct(active_minutes: &[bool]) -> f64 {
    if active_minutes.is_empty() {
        return 0.0;
    }
    100.0 * active_minutes.iter().filter(|f| **f).count() as f64 / active_minutes.len() as f64
}

/// Environment shape knobs: the sliding-window width and time granularity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnvConfig {
    /// W: samples in the sliding window.
    pub window_size: usize,
    /// m: seconds between beta samples.
    pub sample_interval_s: f64,
    /// When set, the reward threshold test uses the mean of the new window
    /// instead of the single newest sample.
    pub threshold_on_window_mean: bool,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig { window_size: 10, sample_interval_s: 2.0, threshold_on_window_mean: false }
    }
}

impl EnvConfig {
    pub fn steps_per_minute(&self) -> usize {
        (60.0 / self.sample_interval_s).round().max(1.0) as usize
    }
}

/// One running session: sliding beta window, clock, per-session accumulators.
pub struct BgEnv {
    profile: PatientProfile,
    config: EnvConfig,
    reward: RewardConfig,
    rng_step: ChaCha12Rng,
    rng_qoc: ChaCha12Rng,
    window: Vec<f64>,
    step_count: usize,
    ended: bool,
    /// (fresh beta sample, action) per step.
    history: Vec<(f64, f64)>,
}

impl BgEnv {
    /// Starts a session: the initial window holds W unstimulated samples.
    pub fn reset(
        profile: &PatientProfile,
        config: EnvConfig,
        reward: RewardConfig,
        seed: u64,
    ) -> Result<Self> {
        profile.validate()?;
        reward.validate()?;
        if config.window_size == 0 {
            return Err(Error::Domain("window_size must be at least 1".into()));
        }
        let mut rng_step = ChaCha12Rng::seed_from_u64(seed);
        rng_step.set_stream(0);
        let mut rng_qoc = ChaCha12Rng::seed_from_u64(seed);
        rng_qoc.set_stream(1);

        let mut window = Vec::with_capacity(config.window_size);
        let mut beta = profile.baseline_beta;
        for _ in 0..config.window_size {
            beta = next_beta(profile, beta, 0.0, &mut rng_step);
            window.push(beta);
        }
        Ok(BgEnv {
            profile: profile.clone(),
            config,
            reward,
            rng_step,
            rng_qoc,
            window,
            step_count: 0,
            ended: false,
            history: Vec::new(),
        })
    }

    pub fn state(&self) -> &[f64] {
        &self.window
    }

    pub fn steps_taken(&self) -> usize {
        self.step_count
    }

    /// Advances one step: draws the fresh beta sample under the applied
    /// amplitude, slides the window, and scores the two-branch reward.
    pub fn step(&mut self, action: StimAction) -> Result<(Vec<f64>, f64)> {
        if self.ended {
            return Err(Error::Contract("step after end_session".into()));
        }
        let a = action.value();
        let beta_new = next_beta(&self.profile, *self.window.last().unwrap(), a, &mut self.rng_step);
        self.window.remove(0);
        self.window.push(beta_new);
        let beta_test = if self.config.threshold_on_window_mean {
            self.window.iter().sum::<f64>() / self.window.len() as f64
        } else {
            beta_new
        };
        let reward = self.reward.step_reward(beta_test, self.profile.beta_threshold, a);
        self.step_count += 1;
        self.history.push((beta_new, a));
        Ok((self.window.clone(), reward))
    }

    /// Synthesizes the QoC metrics from the session history and folds them
    /// into the end-of-session reward.
    pub fn end_session(&mut self) -> Result<(QoCReport, f64)> {
        if self.history.is_empty() {
            return Err(Error::Contract("end_session on an empty session".into()));
        }
        self.ended = true;
        let below =
            self.history.iter().filter(|(b, _)| *b < self.profile.beta_threshold).count() as f64;
        let u = below / self.history.len() as f64;

        // Grasp frequency through the inter-grasp-gap formula: synthesize a
        // 10 s grasp test whose gap times center on 1/target.
        let target_hz = (self.profile.grasp_base * (0.5 + u)).max(0.05);
        let mean_gap = 1.0 / target_hz;
        let n_gaps = ((10.0 * target_hz).round() as usize).clamp(2, 60) - 1;
        let mut gaps = Vec::with_capacity(n_gaps);
        for _ in 0..n_gaps {
            let jitter: f64 = self.rng_qoc.sample::<f64, _>(StandardNormal) * self.profile.qoc_noise_std;
            gaps.push((mean_gap * (1.0 + jitter)).max(1e-3));
        }
        let grasp_hz = grasp_frequency(&gaps)?;

        let rate = ((1.0 + 9.0 * u).round() as i64).clamp(1, 10);

        // Per-minute tremor classification over chunked beta means.
        let chunk = self.config.steps_per_minute();
        let active: Vec<bool> = self
            .history
            .chunks(chunk)
            .map(|c| {
                let mean = c.iter().map(|(b, _)| b).sum::<f64>() / c.len() as f64;
                mean > self.profile.tremor_threshold
            })
            .collect();
        let tremor_pct = tremor_fraction_pct(&active);

        let qoc = QoCReport { grasp_hz, rate, tremor_pct, session_len: self.history.len() };
        qoc.validate()?;
        let r_end = self.reward.end_reward(&qoc);
        Ok((qoc, r_end))
    }
}

fn next_beta(profile: &PatientProfile, beta: f64, action: f64, rng: &mut ChaCha12Rng) -> f64 {
    let noise: f64 = if profile.noise_std > 0.0 {
        rng.sample::<f64, _>(StandardNormal) * profile.noise_std
    } else {
        0.0
    };
    let drive = (1.0 - profile.ar_coefficient)
        * profile.baseline_beta
        * (1.0 - profile.suppression_gain * action);
    (drive + profile.ar_coefficient * beta + noise).max(0.0)
}

/// Rolls a full session under `policy` and assembles the stored trajectory,
/// including the QoC report and end-of-session reward.
pub fn run_session(
    policy: &mut dyn Policy,
    profile: &PatientProfile,
    config: EnvConfig,
    reward: RewardConfig,
    horizon: usize,
    seed: u64,
    session_id: &str,
    controller_id: &str,
) -> Result<Trajectory> {
    if horizon == 0 {
        return Err(Error::Contract("run_session needs a horizon of at least 1".into()));
    }
    let mut env = BgEnv::reset(profile, config, reward, seed)?;
    let mut transitions = Vec::with_capacity(horizon);
    let mut state = env.state().to_vec();
    for t in 0..horizon {
        let a = StimAction::new(policy.action(&state))?;
        let (next_state, r) = env.step(a)?;
        transitions.push(Transition {
            t,
            state: state.clone(),
            action: a.value(),
            reward: r,
            next_state: next_state.clone(),
        });
        state = next_state;
    }
    let (qoc, r_end) = env.end_session()?;
    Ok(Trajectory {
        version: crate::replay::SCHEMA_VERSION,
        session_id: session_id.to_string(),
        controller_id: controller_id.to_string(),
        profile_id: profile.id.clone(),
        seed,
        constants: TrajectoryConstants::from_parts(&reward, profile.beta_threshold),
        transitions,
        qoc,
        r_end,
    })
}
