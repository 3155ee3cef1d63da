//! Teacher→student policy compression: the small student regresses on the
//! teacher's actions over replayed states plus noise-augmented synthetic
//! states.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

use crate::actor_critic::PolicyNet;
use crate::diffnum::{clip_global_norm, AdamState, ParamReg, Tape};
use crate::error::{Error, Result};
use crate::replay::ReplayBuffer;

#[derive(Debug, Clone, PartialEq)]
pub struct DistillConfig {
    pub student_hidden: Vec<usize>,
    /// Augmentation noise std; `None` derives 0.05 × the per-dimension std
    /// of the buffer states.
    pub sigma: Option<f64>,
    /// Synthetic states generated per real state.
    pub n_aug: usize,
    pub lr: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Fraction of trajectories (by session_id order, from the end) held out
    /// of training.
    pub holdout_fraction: f64,
    pub log_every: usize,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            student_hidden: vec![20, 10],
            sigma: None,
            n_aug: 4,
            lr: 1e-3,
            steps: 4000,
            batch_size: 64,
            seed: 0,
            holdout_fraction: 0.1,
            log_every: 100,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(s) = self.sigma {
            if s < 0.0 {
                return Err(Error::Domain(format!("sigma {s} must be non-negative")));
            }
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(Error::Domain("holdout_fraction outside [0, 1)".into()));
        }
        Ok(())
    }
}

/// For each input state, appends `n_aug` copies with i.i.d. N(0, σ²) noise
/// per dimension; the originals are always retained in front.
pub fn augment(states: &[Vec<f64>], sigma: f64, n_aug: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut out: Vec<Vec<f64>> = states.to_vec();
    for s in states {
        for _ in 0..n_aug {
            out.push(
                s.iter()
                    .map(|v| v + rng.sample::<f64, _>(StandardNormal) * sigma)
                    .collect(),
            );
        }
    }
    out
}

/// Splits the buffer's states into (train, held-out) by session_id order:
/// the last `holdout_fraction` of trajectories never reach training.
pub fn split_states(buffer: &ReplayBuffer, holdout_fraction: f64) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let mut order: Vec<&crate::replay::Trajectory> = buffer.trajectories().iter().collect();
    order.sort_by(|a, b| a.session_id.cmp(&b.session_id));
    let holdout_count = ((order.len() as f64) * holdout_fraction).floor() as usize;
    let split = order.len() - holdout_count;
    let collect = |trajs: &[&crate::replay::Trajectory]| {
        trajs
            .iter()
            .flat_map(|t| t.transitions.iter().map(|tr| tr.state.clone()))
            .collect::<Vec<_>>()
    };
    (collect(&order[..split]), collect(&order[split..]))
}

fn per_dimension_std(states: &[Vec<f64>]) -> f64 {
    if states.is_empty() {
        return 0.0;
    }
    let w = states[0].len();
    let n = states.len() as f64;
    let mut acc = 0.0;
    for d in 0..w {
        let mean = states.iter().map(|s| s[d]).sum::<f64>() / n;
        let var = states.iter().map(|s| (s[d] - mean).powi(2)).sum::<f64>() / n;
        acc += var.sqrt();
    }
    acc / w as f64
}

pub struct DistillResult {
    pub student: PolicyNet,
    pub final_loss: f64,
    pub log: Vec<(usize, f64)>,
    pub held_out_states: Vec<Vec<f64>>,
    pub sigma_used: f64,
}

/// Fits the student to the teacher by mean-squared-error regression on real
/// plus augmented states.
pub fn distill(teacher: &PolicyNet, config: &DistillConfig, buffer: &ReplayBuffer) -> Result<DistillResult> {
    config.validate()?;
    if buffer.is_empty() {
        return Err(Error::Contract("distill on an empty buffer".into()));
    }
    let (train_states, held_out_states) = split_states(buffer, config.holdout_fraction);
    if train_states.is_empty() {
        return Err(Error::Contract("no training states after holdout split".into()));
    }
    let sigma = config.sigma.unwrap_or_else(|| 0.05 * per_dimension_std(&train_states));
    let pool = augment(&train_states, sigma, config.n_aug, config.seed.wrapping_add(0xa06));
    let targets: Vec<f64> =
        pool.iter().map(|s| teacher.act(s)).collect::<Result<Vec<f64>>>()?;

    let w = teacher.state_width();
    let mut rng = ChaCha12Rng::seed_from_u64(config.seed);
    let mut student = PolicyNet::new(w, &config.student_hidden, &mut rng);
    let mut adam = AdamState::new(config.lr);
    let mut log = Vec::new();
    let mut final_loss = f64::NAN;
    for step in 0..config.steps {
        let mut xs = Vec::with_capacity(config.batch_size * w);
        let mut ys = Vec::with_capacity(config.batch_size);
        for _ in 0..config.batch_size {
            let k = rng.gen_range(0..pool.len());
            xs.extend_from_slice(&pool[k]);
            ys.push(targets[k]);
        }
        let mut tape = Tape::new();
        let mut reg = ParamReg::new();
        let x = tape.leaf(xs, vec![config.batch_size, w]);
        let a = student.forward(&mut tape, &mut reg, "student", x)?;
        let y = tape.leaf(ys, vec![config.batch_size, 1]);
        let diff = tape.sub(a, y)?;
        let sq = tape.mul(diff, diff)?;
        let loss = tape.mean(sq);
        final_loss = tape.value_scalar(loss);
        if !final_loss.is_finite() {
            return Err(Error::Numeric { step, detail: format!("distill loss {final_loss}") });
        }
        tape.backward(loss)?;
        let mut params = student.params_mut("student");
        reg.harvest(&tape, &mut params)?;
        clip_global_norm(&mut params, 10.0);
        adam.update(&mut params)?;
        if step % config.log_every.max(1) == 0 || step + 1 == config.steps {
            log.push((step, final_loss));
        }
    }
    Ok(DistillResult { student, final_loss, log, held_out_states, sigma_used: sigma })
}

/// Forward-pass timing summary over a fixed number of evaluations.
#[derive(Debug, Clone, PartialEq)]
pub struct TimingEntry {
    pub label: String,
    pub samples: usize,
    pub median_ns: u128,
    pub mean_ns: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FidelityReport {
    pub max_abs_deviation: f64,
    pub mean_abs_deviation: f64,
    pub states_evaluated: usize,
    /// Exactly two entries: teacher then student.
    pub timing: Vec<TimingEntry>,
}

pub const TIMING_EVALUATIONS: usize = 200;

/// Measures teacher/student divergence on held-out states and the median
/// forward-pass time of each network over 200 evaluations.
pub fn fidelity_report(
    teacher: &PolicyNet,
    student: &PolicyNet,
    held_out: &[Vec<f64>],
) -> Result<FidelityReport> {
    if held_out.is_empty() {
        return Err(Error::Contract("fidelity_report needs held-out states".into()));
    }
    let mut max_dev: f64 = 0.0;
    let mut sum_dev = 0.0;
    for s in held_out {
        let d = (teacher.act(s)? - student.act(s)?).abs();
        max_dev = max_dev.max(d);
        sum_dev += d;
    }
    let timing = vec![
        time_forward("teacher", teacher, held_out),
        time_forward("student", student, held_out),
    ];
    Ok(FidelityReport {
        max_abs_deviation: max_dev,
        mean_abs_deviation: sum_dev / held_out.len() as f64,
        states_evaluated: held_out.len(),
        timing,
    })
}

fn time_forward(label: &str, net: &PolicyNet, states: &[Vec<f64>]) -> TimingEntry {
    let mut samples = Vec::with_capacity(TIMING_EVALUATIONS);
    let mut sink = 0.0;
    // warm-up pass keeps first-touch effects out of the samples
    for s in states.iter().take(8) {
        sink += net.act(s).unwrap_or(0.0);
    }
    for i in 0..TIMING_EVALUATIONS {
        let s = &states[i % states.len()];
        let start = Instant::now();
        sink += net.act(s).unwrap_or(0.0);
        samples.push(start.elapsed().as_nanos());
    }
    std::hint::black_box(sink);
    samples.sort_unstable();
    let median_ns = samples[samples.len() / 2];
    let mean_ns = samples.iter().sum::<u128>() as f64 / samples.len() as f64;
    TimingEntry { label: label.to_string(), samples: samples.len(), median_ns, mean_ns }
}
