//! Shared oracles for the integration suites: central finite differences,
//! Monte Carlo marginalization for the latent model, and synthetic fixtures.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use stimweave_core::bg_env::QoCReport;
use stimweave_core::diffnum::{Tape, Tensor, Var};
use stimweave_core::dlsm::{Dlsm, NoiseSource};
use stimweave_core::replay::{Trajectory, TrajectoryConstants, Transition};

/// Builds a scalar-valued function of leaf tensors on a fresh tape.
pub type LossBuilder = dyn Fn(&mut Tape, &[Var]) -> Var;

/// Central finite differences of `build` at `inputs`, compared against the
/// tape's analytic gradients. Returns the worst relative error over every
/// coordinate of every input.
pub fn max_grad_rel_err(build: &LossBuilder, inputs: &[(Vec<usize>, Vec<f64>)], step: f64) -> f64 {
    // analytic pass
    let mut tape = Tape::new();
    let vars: Vec<Var> =
        inputs.iter().map(|(shape, values)| tape.leaf(values.clone(), shape.clone())).collect();
    let loss = build(&mut tape, &vars);
    tape.backward(loss).expect("backward");
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, (_, values))| {
            tape.grad(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; values.len()])
        })
        .collect();

    let eval = |perturbed: &[(Vec<usize>, Vec<f64>)]| -> f64 {
        let mut t = Tape::new();
        let vs: Vec<Var> =
            perturbed.iter().map(|(shape, values)| t.leaf(values.clone(), shape.clone())).collect();
        let l = build(&mut t, &vs);
        t.value_scalar(l)
    };

    let mut worst = 0.0f64;
    for (i, (_, values)) in inputs.iter().enumerate() {
        for k in 0..values.len() {
            let mut plus = inputs.to_vec();
            plus[i].1[k] += step;
            let mut minus = inputs.to_vec();
            minus[i].1[k] -= step;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * step);
            let a = analytic[i][k];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(rel);
        }
    }
    worst
}

/// ELBO value under a fixed noise seed.
pub fn elbo_value(model: &Dlsm, traj: &Trajectory, noise_seed: u64) -> f64 {
    let mut noise = NoiseSource::seeded(noise_seed);
    model.elbo(traj, &mut noise).expect("elbo").total
}

/// Analytic ELBO gradients for every parameter tensor, keyed by name.
pub fn elbo_param_grads(
    model: &mut Dlsm,
    traj: &Trajectory,
    noise_seed: u64,
) -> Vec<(String, Vec<f64>)> {
    use stimweave_core::diffnum::ParamReg;
    let mut tape = Tape::new();
    let mut reg = ParamReg::new();
    let mut noise = NoiseSource::seeded(noise_seed);
    let (total, _, _) = model.elbo_on_tape(&mut tape, &mut reg, traj, &mut noise).expect("elbo");
    tape.backward(total).expect("backward");
    let mut params = model.params_mut();
    for (_, t) in params.iter_mut() {
        t.clear_grad();
    }
    reg.harvest(&tape, &mut params).expect("harvest");
    let out = params
        .iter()
        .map(|(name, t)| {
            (name.clone(), t.grad().map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]))
        })
        .collect();
    for (_, t) in params.iter_mut() {
        t.clear_grad();
    }
    out
}

/// Worst relative error of the analytic ELBO gradient against central finite
/// differences over every parameter coordinate.
pub fn elbo_grad_max_rel_err(model: &mut Dlsm, traj: &Trajectory, noise_seed: u64, step: f64) -> f64 {
    let analytic = elbo_param_grads(model, traj, noise_seed);
    let mut worst = 0.0f64;
    let n_params = analytic.len();
    for idx in 0..n_params {
        let len = analytic[idx].1.len();
        for k in 0..len {
            let perturb = |model: &mut Dlsm, delta: f64| {
                let mut params = model.params_mut();
                params[idx].1.values_mut()[k] += delta;
            };
            perturb(model, step);
            let plus = elbo_value(model, traj, noise_seed);
            perturb(model, -2.0 * step);
            let minus = elbo_value(model, traj, noise_seed);
            perturb(model, step);
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic[idx].1[k];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(rel);
        }
    }
    worst
}

/// Hand-built trajectory with explicit scalar states (window width 1).
pub fn scalar_trajectory(
    id: &str,
    states: &[f64],
    actions: &[f64],
    rewards: &[f64],
    gamma: f64,
) -> Trajectory {
    assert_eq!(states.len(), actions.len() + 1);
    assert_eq!(actions.len(), rewards.len());
    let qoc = QoCReport { grasp_hz: 1.0, rate: 5, tremor_pct: 0.0, session_len: actions.len() };
    let constants = TrajectoryConstants {
        r_a: 0.0,
        r_b: -1.0,
        c1: 0.3,
        c2: 0.5,
        c3: 0.1,
        c4: 1.0,
        gamma,
        xi_beta: 0.5,
    };
    let r_end = constants.reward_config().end_reward(&qoc);
    Trajectory {
        version: 1,
        session_id: id.to_string(),
        controller_id: "synthetic".to_string(),
        profile_id: "synthetic".to_string(),
        seed: 0,
        constants,
        transitions: (0..actions.len())
            .map(|t| Transition {
                t,
                state: vec![states[t]],
                action: actions[t],
                reward: rewards[t],
                next_state: vec![states[t + 1]],
            })
            .collect(),
        qoc,
        r_end,
    }
}

/// Random trajectory of window width `w` for gradient checks.
pub fn random_trajectory(w: usize, horizon: usize, seed: u64) -> Trajectory {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let qoc = QoCReport { grasp_hz: 1.3, rate: 6, tremor_pct: 10.0, session_len: horizon };
    let constants = TrajectoryConstants {
        r_a: 0.0,
        r_b: -1.0,
        c1: 0.3,
        c2: 1.0,
        c3: 1.0,
        c4: 1.0,
        gamma: 0.95,
        xi_beta: 0.5,
    };
    let r_end = constants.reward_config().end_reward(&qoc);
    let mut states: Vec<Vec<f64>> = Vec::with_capacity(horizon + 1);
    for _ in 0..=horizon {
        states.push((0..w).map(|_| rng.gen_range(0.0..1.2)).collect());
    }
    Trajectory {
        version: 1,
        session_id: format!("rand{seed}"),
        controller_id: "synthetic".to_string(),
        profile_id: "synthetic".to_string(),
        seed,
        constants,
        transitions: (0..horizon)
            .map(|t| Transition {
                t,
                state: states[t].clone(),
                action: rng.gen_range(0.0..1.0),
                reward: rng.gen_range(-1.3..0.0),
                next_state: states[t + 1].clone(),
            })
            .collect(),
        qoc,
        r_end,
    }
}

/// Builds a policy network that outputs a constant action: zeroed final
/// layer with the bias set to the logit of the target.
pub fn constant_policy_net(w: usize, hidden: &[usize], value: f64, seed: u64) -> stimweave_core::actor_critic::PolicyNet {
    use stimweave_core::actor_critic::PolicyNet;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut net = PolicyNet::new(w, hidden, &mut rng);
    let logit = (value / (1.0 - value)).ln();
    let mut params = net.params_mut("actor");
    let n = params.len();
    for (name, t) in &mut params[n - 2..] {
        if name.ends_with(".w") {
            for v in t.values_mut() {
                *v = 0.0;
            }
        } else {
            for v in t.values_mut() {
                *v = logit;
            }
        }
    }
    drop(params);
    net
}

pub fn tensor_from(shape: Vec<usize>, values: Vec<f64>) -> Tensor {
    Tensor::new(shape, values).expect("shape/values agree")
}
