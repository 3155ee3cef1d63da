//! Subcommand implementations. Every command resolves its configuration
//! (file + flags), runs the corresponding library operation, writes its
//! outputs and a manifest, and never mutates its inputs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use stimweave_core::actor_critic::{
    behavior_policy_uniform, discounted_return, finetune, parse_dims, train_offline, uniform_density,
    PolicyNet, PolicyRef, TrainConfig, TrainResult,
};
use stimweave_core::bg_env::{
    derive_policy_seed, run_session, ConstantPolicy, EnvConfig, PatientProfile, Policy,
    RewardConfig,
};
use stimweave_core::diffnum::{CellKind, Checkpoint};
use stimweave_core::distill::{distill, fidelity_report, split_states, DistillConfig};
use stimweave_core::dlsm::{Dlsm, DlsmConfig};
use stimweave_core::kvconf::KvConfig;
use stimweave_core::ope::{
    csv_row, importance_sampling, mae, rank_correlation, regret_at_1, smoothed_policy_density,
    wilcoxon_rank_sum, IsConfig, PolicyEvalRecord,
};
use stimweave_core::replay::{ReplayBuffer, Trajectory};

use crate::manifest::Manifest;

/// Usage failures exit with code 2, runtime failures with code 1.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Runtime(String),
}

impl Failure {
    pub fn usage(msg: impl ToString) -> Self {
        Failure::Usage(msg.to_string())
    }

    pub fn runtime(msg: impl ToString) -> Self {
        Failure::Runtime(msg.to_string())
    }
}

type CmdResult = Result<(), Failure>;

fn load_kv(path: Option<&Path>) -> Result<KvConfig, Failure> {
    match path {
        Some(p) => KvConfig::load(p)
            .map_err(|e| Failure::usage(format!("config {}: {e}", p.display()))),
        None => Ok(KvConfig::default()),
    }
}

fn load_profile(path: &Path) -> Result<PatientProfile, Failure> {
    PatientProfile::load(path)
        .map_err(|e| Failure::usage(format!("profile {}: {e}", path.display())))
}

fn load_buffers(paths: &[PathBuf]) -> Result<ReplayBuffer, Failure> {
    if paths.is_empty() {
        return Err(Failure::usage("at least one --buffer is required"));
    }
    ReplayBuffer::load_many(paths).map_err(|e| Failure::usage(format!("buffer load: {e}")))
}

fn load_policy(path: &Path) -> Result<PolicyNet, Failure> {
    let ck = Checkpoint::load(path)
        .map_err(|e| Failure::usage(format!("checkpoint {}: {e}", path.display())))?;
    PolicyNet::from_checkpoint(&ck)
        .map_err(|e| Failure::usage(format!("checkpoint {}: {e}", path.display())))
}

fn reward_from_kv(kv: &KvConfig) -> Result<RewardConfig, Failure> {
    let d = RewardConfig::default();
    let reward = RewardConfig {
        r_a: kv.f64_or("r_a", d.r_a).map_err(Failure::usage)?,
        r_b: kv.f64_or("r_b", d.r_b).map_err(Failure::usage)?,
        c1: kv.f64_or("c1", d.c1).map_err(Failure::usage)?,
        c2: kv.f64_or("c2", d.c2).map_err(Failure::usage)?,
        c3: kv.f64_or("c3", d.c3).map_err(Failure::usage)?,
        c4: kv.f64_or("c4", d.c4).map_err(Failure::usage)?,
        gamma: kv.f64_or("gamma", d.gamma).map_err(Failure::usage)?,
    };
    reward.validate().map_err(Failure::usage)?;
    Ok(reward)
}

fn env_from_kv(kv: &KvConfig) -> Result<EnvConfig, Failure> {
    let d = EnvConfig::default();
    Ok(EnvConfig {
        window_size: kv.usize_or("window_size", d.window_size).map_err(Failure::usage)?,
        sample_interval_s: kv
            .f64_or("sample_interval_s", d.sample_interval_s)
            .map_err(Failure::usage)?,
        threshold_on_window_mean: kv
            .u64_or("threshold_on_window_mean", 0)
            .map_err(Failure::usage)?
            != 0,
    })
}

fn write_file(path: &Path, contents: &str) -> CmdResult {
    std::fs::write(path, contents)
        .map_err(|e| Failure::runtime(format!("writing {}: {e}", path.display())))
}

// ── collect ─────────────────────────────────────────────────────────

enum ControllerSpec {
    Random(f64),
    Constant(f64),
    Checkpoint(PathBuf),
}

fn parse_controller(spec: &str) -> Result<ControllerSpec, Failure> {
    let parse_arg = |s: &str, name: &str| -> Result<f64, Failure> {
        let inner = s
            .trim_start_matches(name)
            .trim_start_matches(['(', ':'])
            .trim_end_matches(')');
        inner
            .parse::<f64>()
            .map_err(|_| Failure::usage(format!("bad {name} argument in controller spec '{s}'")))
    };
    if spec.starts_with("random") {
        let b = parse_arg(spec, "random")?;
        if !(0.0..1.0).contains(&b) {
            return Err(Failure::usage(format!("random lower bound {b} outside [0, 1)")));
        }
        Ok(ControllerSpec::Random(b))
    } else if spec.starts_with("constant") {
        let a = parse_arg(spec, "constant")?;
        if !(0.0..=1.0).contains(&a) {
            return Err(Failure::usage(format!("constant amplitude {a} outside [0, 1]")));
        }
        Ok(ControllerSpec::Constant(a))
    } else {
        let path = PathBuf::from(spec);
        if !path.exists() {
            return Err(Failure::usage(format!(
                "controller spec '{spec}' is neither random(B), constant(a) nor a readable checkpoint"
            )));
        }
        Ok(ControllerSpec::Checkpoint(path))
    }
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_collect(
    profile_path: &Path,
    controller: &str,
    controller_id: Option<String>,
    sessions: u64,
    horizon: usize,
    seed: u64,
    config: Option<&Path>,
    out: &Path,
) -> CmdResult {
    let profile = load_profile(profile_path)?;
    let kv = load_kv(config)?;
    let reward = reward_from_kv(&kv)?;
    let env = env_from_kv(&kv)?;
    if horizon == 0 {
        return Err(Failure::usage("horizon must be at least 1"));
    }
    let spec = parse_controller(controller)?;
    let id = controller_id.unwrap_or_else(|| controller.to_string());

    let net = match &spec {
        ControllerSpec::Checkpoint(p) => Some(load_policy(p)?),
        _ => None,
    };

    let mut buffer = if out.exists() {
        ReplayBuffer::load(out)
            .map_err(|e| Failure::usage(format!("existing buffer {}: {e}", out.display())))?
    } else {
        ReplayBuffer::new()
    };
    let existing = buffer.len();

    for i in 0..sessions {
        let session_seed = seed.wrapping_add(i);
        let mut policy: Box<dyn Policy> = match &spec {
            ControllerSpec::Random(b) => Box::new(
                behavior_policy_uniform(*b, derive_policy_seed(session_seed))
                    .map_err(|e| Failure::usage(e.to_string()))?,
            ),
            ControllerSpec::Constant(a) => Box::new(ConstantPolicy(*a)),
            ControllerSpec::Checkpoint(_) => {
                Box::new(PolicyRef(net.as_ref().expect("loaded above")))
            }
        };
        let traj = run_session(
            &mut *policy,
            &profile,
            env,
            reward,
            horizon,
            session_seed,
            &format!("{id}-{seed}-{i:05}"),
            &id,
        )
        .map_err(|e| Failure::runtime(format!("session {i}: {e}")))?;
        buffer
            .append(traj)
            .map_err(|e| Failure::runtime(format!("appending session {i}: {e}")))?;
    }
    buffer
        .save(out)
        .map_err(|e| Failure::runtime(format!("saving {}: {e}", out.display())))?;

    let mut manifest = Manifest::new("collect");
    manifest
        .seed(seed)
        .config("profile", profile_path.display())
        .config("controller", controller)
        .config("controller_id", &id)
        .config("sessions", sessions)
        .config("horizon", horizon)
        .config("existing_sessions", existing)
        .config("window_size", env.window_size)
        .config("reward", format!("{reward:?}"));
    manifest.input(profile_path).map_err(|e| Failure::usage(e.to_string()))?;
    if let ControllerSpec::Checkpoint(p) = &spec {
        manifest.input(p).map_err(|e| Failure::usage(e.to_string()))?;
    }
    manifest.output(out);
    manifest.write(out).map_err(|e| Failure::runtime(e.to_string()))?;
    println!("collected {sessions} sessions ({} total) into {}", buffer.len(), out.display());
    Ok(())
}

// ── train / finetune ────────────────────────────────────────────────

fn train_config_from_kv(kv: &KvConfig, seed: u64) -> Result<TrainConfig, Failure> {
    let d = TrainConfig::default();
    let hidden = parse_dims(kv.str_or("hidden", "400,300")).map_err(Failure::usage)?;
    let config = TrainConfig {
        hidden,
        actor_lr: kv.f64_or("actor_lr", d.actor_lr).map_err(Failure::usage)?,
        critic_lr: kv.f64_or("critic_lr", d.critic_lr).map_err(Failure::usage)?,
        gamma: kv.f64_or("gamma", d.gamma).map_err(Failure::usage)?,
        batch_size: kv.usize_or("batch_size", d.batch_size).map_err(Failure::usage)?,
        steps: kv.usize_or("steps", d.steps).map_err(Failure::usage)?,
        tau: kv.f64_or("tau", d.tau).map_err(Failure::usage)?,
        grad_clip: kv.f64_or("grad_clip", d.grad_clip).map_err(Failure::usage)?,
        behavior_reg: kv.f64_or("behavior_reg", 0.0).map_err(Failure::usage)?,
        log_every: kv.usize_or("log_every", d.log_every).map_err(Failure::usage)?,
        seed,
    };
    config.validate().map_err(Failure::usage)?;
    Ok(config)
}

fn write_training_outputs(
    command: &str,
    result: &TrainResult,
    config: &TrainConfig,
    buffers: &[PathBuf],
    extra_input: Option<&Path>,
    out: &Path,
) -> CmdResult {
    let mut ck = result.actor.to_checkpoint();
    ck.set_meta("command", command);
    ck.set_meta("steps", config.steps);
    ck.set_meta("gamma", config.gamma);
    ck.set_meta("seed", config.seed);
    let mut hashes = Vec::new();
    for b in buffers {
        hashes.push(crate::manifest::sha256_file(b).map_err(|e| Failure::usage(e.to_string()))?);
    }
    ck.set_meta("source_buffer_sha256", hashes.join(","));
    ck.save(out).map_err(|e| Failure::runtime(format!("saving {}: {e}", out.display())))?;

    let mut log = String::from("step,critic_loss,actor_objective,mean_batch_action\n");
    for row in &result.log {
        let _ = writeln!(
            log,
            "{},{},{},{}",
            row.step, row.critic_loss, row.actor_objective, row.mean_batch_action
        );
    }
    let log_path = out.with_extension("log.csv");
    write_file(&log_path, &log)?;

    let mut manifest = Manifest::new(command);
    manifest
        .seed(config.seed)
        .config("hidden", result.actor.hidden_dims().iter().map(|d| d.to_string()).collect::<Vec<_>>().join(","))
        .config("actor_lr", config.actor_lr)
        .config("critic_lr", config.critic_lr)
        .config("gamma", config.gamma)
        .config("batch_size", config.batch_size)
        .config("steps", config.steps)
        .config("tau", config.tau)
        .config("grad_clip", config.grad_clip);
    for b in buffers {
        manifest.input(b).map_err(|e| Failure::usage(e.to_string()))?;
    }
    if let Some(p) = extra_input {
        manifest.input(p).map_err(|e| Failure::usage(e.to_string()))?;
    }
    manifest.output(out).output(&log_path);
    manifest.write(out).map_err(|e| Failure::runtime(e.to_string()))?;
    println!("trained {} steps; checkpoint at {}", config.steps, out.display());
    Ok(())
}

pub fn cmd_train(buffers: &[PathBuf], config: Option<&Path>, seed: u64, out: &Path) -> CmdResult {
    let kv = load_kv(config)?;
    let train_config = train_config_from_kv(&kv, seed)?;
    for w in train_config.lr_range_warnings(false) {
        eprintln!("warning: {w}");
    }
    let buffer = load_buffers(buffers)?;
    let result =
        train_offline(&buffer, train_config.clone()).map_err(|e| Failure::runtime(e.to_string()))?;
    write_training_outputs("train", &result, &train_config, buffers, None, out)
}

pub fn cmd_finetune(
    from: &Path,
    buffers: &[PathBuf],
    config: Option<&Path>,
    seed: u64,
    out: &Path,
) -> CmdResult {
    let kv = load_kv(config)?;
    let mut train_config = train_config_from_kv(&kv, seed)?;
    // fine-tuning defaults to the small learning-rate regime unless the
    // config overrides it
    if kv.get("actor_lr").is_none() {
        train_config.actor_lr = 1e-6;
    }
    if kv.get("critic_lr").is_none() {
        train_config.critic_lr = 1e-6;
    }
    for w in train_config.lr_range_warnings(true) {
        eprintln!("warning: {w}");
    }
    let actor = load_policy(from)?;
    if kv.get("hidden").is_none() {
        train_config.hidden = actor.hidden_dims();
    }
    let buffer = load_buffers(buffers)?;
    let result =
        finetune(&buffer, actor, train_config.clone()).map_err(|e| Failure::runtime(e.to_string()))?;
    write_training_outputs("finetune", &result, &train_config, buffers, Some(from), out)
}

// ── distill ─────────────────────────────────────────────────────────

pub fn cmd_distill(
    teacher_path: &Path,
    buffers: &[PathBuf],
    config: Option<&Path>,
    seed: u64,
    out: &Path,
) -> CmdResult {
    let kv = load_kv(config)?;
    let d = DistillConfig::default();
    let config = DistillConfig {
        student_hidden: parse_dims(kv.str_or("student_hidden", "20,10")).map_err(Failure::usage)?,
        sigma: kv.get_f64("sigma").map_err(Failure::usage)?,
        n_aug: kv.usize_or("n_aug", d.n_aug).map_err(Failure::usage)?,
        lr: kv.f64_or("lr", d.lr).map_err(Failure::usage)?,
        steps: kv.usize_or("steps", d.steps).map_err(Failure::usage)?,
        batch_size: kv.usize_or("batch_size", d.batch_size).map_err(Failure::usage)?,
        holdout_fraction: kv
            .f64_or("holdout_fraction", d.holdout_fraction)
            .map_err(Failure::usage)?,
        log_every: kv.usize_or("log_every", d.log_every).map_err(Failure::usage)?,
        seed,
    };
    config.validate().map_err(Failure::usage)?;
    let teacher = load_policy(teacher_path)?;
    let buffer = load_buffers(buffers)?;
    let result =
        distill(&teacher, &config, &buffer).map_err(|e| Failure::runtime(e.to_string()))?;

    let mut ck = result.student.to_checkpoint();
    ck.set_meta("command", "distill");
    ck.set_meta(
        "distilled_from",
        crate::manifest::sha256_file(teacher_path).map_err(|e| Failure::usage(e.to_string()))?,
    );
    ck.set_meta("sigma", result.sigma_used);
    ck.set_meta("final_loss", result.final_loss);
    ck.save(out).map_err(|e| Failure::runtime(format!("saving {}: {e}", out.display())))?;

    let mut log = String::from("step,loss\n");
    for (step, loss) in &result.log {
        let _ = writeln!(log, "{step},{loss}");
    }
    let log_path = out.with_extension("log.csv");
    write_file(&log_path, &log)?;

    let mut manifest = Manifest::new("distill");
    manifest
        .seed(seed)
        .config("student_hidden", kv.str_or("student_hidden", "20,10"))
        .config("sigma", result.sigma_used)
        .config("n_aug", config.n_aug)
        .config("lr", config.lr)
        .config("steps", config.steps)
        .config("holdout_fraction", config.holdout_fraction);
    manifest.input(teacher_path).map_err(|e| Failure::usage(e.to_string()))?;
    for b in buffers {
        manifest.input(b).map_err(|e| Failure::usage(e.to_string()))?;
    }
    manifest.output(out).output(&log_path);
    manifest.write(out).map_err(|e| Failure::runtime(e.to_string()))?;
    println!("distilled student (final loss {}) at {}", result.final_loss, out.display());
    Ok(())
}

// ── train-dlsm ──────────────────────────────────────────────────────

pub fn cmd_train_dlsm(
    buffers: &[PathBuf],
    config: Option<&Path>,
    seed: u64,
    out: &Path,
) -> CmdResult {
    let kv = load_kv(config)?;
    let buffer = load_buffers(buffers)?;
    let state_width = buffer.state_width().ok_or_else(|| Failure::usage("empty buffer"))?;
    let d = DlsmConfig::default();
    let model_config = DlsmConfig {
        latent_dim: kv.usize_or("latent_dim", d.latent_dim).map_err(Failure::usage)?,
        state_width,
        enc_hidden: kv.usize_or("enc_hidden", d.enc_hidden).map_err(Failure::usage)?,
        dec_hidden: kv.usize_or("dec_hidden", d.dec_hidden).map_err(Failure::usage)?,
        head_hidden: parse_dims(kv.str_or("head_hidden", "32")).map_err(Failure::usage)?,
        cell: CellKind::parse(kv.str_or("cell", "mgu")).map_err(Failure::usage)?,
    };
    let batch_size = kv.usize_or("batch_size", 8).map_err(Failure::usage)?;
    let lr = kv.f64_or("lr", 1e-3).map_err(Failure::usage)?;
    let max_iter = kv.usize_or("max_iter", 2000).map_err(Failure::usage)?;

    let mut model = Dlsm::new(model_config.clone(), seed);
    let curve = model
        .train(&buffer, batch_size, lr, max_iter, seed)
        .map_err(|e| Failure::runtime(e.to_string()))?;

    let mut ck = model.to_checkpoint();
    ck.set_meta("command", "train-dlsm");
    ck.set_meta("max_iter", max_iter);
    ck.set_meta("lr", lr);
    ck.set_meta("batch_size", batch_size);
    ck.set_meta("seed", seed);
    ck.save(out).map_err(|e| Failure::runtime(format!("saving {}: {e}", out.display())))?;

    let mut log = String::from("iter,elbo\n");
    for (i, e) in curve.iter().enumerate() {
        let _ = writeln!(log, "{i},{e}");
    }
    let log_path = out.with_extension("log.csv");
    write_file(&log_path, &log)?;

    let mut manifest = Manifest::new("train-dlsm");
    manifest
        .seed(seed)
        .config("latent_dim", model_config.latent_dim)
        .config("state_width", state_width)
        .config("enc_hidden", model_config.enc_hidden)
        .config("dec_hidden", model_config.dec_hidden)
        .config("head_hidden", kv.str_or("head_hidden", "32"))
        .config("cell", model_config.cell.as_str())
        .config("batch_size", batch_size)
        .config("lr", lr)
        .config("max_iter", max_iter);
    for b in buffers {
        manifest.input(b).map_err(|e| Failure::usage(e.to_string()))?;
    }
    manifest.output(out).output(&log_path);
    manifest.write(out).map_err(|e| Failure::runtime(e.to_string()))?;
    println!(
        "trained latent model for {max_iter} iterations (final ELBO {}); checkpoint at {}",
        curve.last().copied().unwrap_or(f64::NAN),
        out.display()
    );
    Ok(())
}

// ── ope ─────────────────────────────────────────────────────────────

#[allow(clippy::too_many_arguments)]
pub fn cmd_ope(
    dlsm_path: &Path,
    policy_paths: &[PathBuf],
    buffers: &[PathBuf],
    profile_path: Option<&Path>,
    config: Option<&Path>,
    seed: u64,
    num_seeds: u64,
    out: &Path,
) -> CmdResult {
    if policy_paths.is_empty() {
        return Err(Failure::usage("at least one --policy is required"));
    }
    let kv = load_kv(config)?;
    let rollouts = kv.usize_or("rollouts", 50).map_err(Failure::usage)?;
    let horizon = kv.usize_or("horizon", 150).map_err(Failure::usage)?;
    let is_sigma = kv.f64_or("is_sigma", 0.1).map_err(Failure::usage)?;
    let behavior_low = kv.f64_or("behavior_low", 0.3).map_err(Failure::usage)?;
    let gt_rollouts = kv.u64_or("gt_rollouts", 100).map_err(Failure::usage)?;
    let sample_end = kv.u64_or("sample_end_reward", 1).map_err(Failure::usage)? != 0;
    let buffer = load_buffers(buffers)?;
    let gamma = kv
        .get_f64("gamma")
        .map_err(Failure::usage)?
        .unwrap_or_else(|| buffer.trajectories()[0].constants.gamma);

    let ck = Checkpoint::load(dlsm_path)
        .map_err(|e| Failure::usage(format!("checkpoint {}: {e}", dlsm_path.display())))?;
    let model = Dlsm::from_checkpoint(&ck)
        .map_err(|e| Failure::usage(format!("checkpoint {}: {e}", dlsm_path.display())))?;

    let mut policies = Vec::new();
    for p in policy_paths {
        let stem = p
            .file_stem()
            .map(|s| s.to_string_lossy().to_string())
            .unwrap_or_else(|| p.display().to_string());
        policies.push((stem, load_policy(p)?));
    }

    // ground truth from fresh environment rollouts when a profile is given
    let reward = reward_from_kv(&kv)?;
    let env = env_from_kv(&kv)?;
    let actual: Option<Vec<f64>> = match profile_path {
        Some(pp) => {
            let profile = load_profile(pp)?;
            let mut values = Vec::new();
            for (idx, (_, net)) in policies.iter().enumerate() {
                let mut total = 0.0;
                for k in 0..gt_rollouts {
                    let mut policy = PolicyRef(net);
                    let traj = run_session(
                        &mut policy,
                        &profile,
                        env,
                        reward,
                        horizon,
                        seed.wrapping_add(0x6774).wrapping_add(idx as u64 * 10_007 + k),
                        &format!("gt-{idx}-{k}"),
                        "gt",
                    )
                    .map_err(|e| Failure::runtime(e.to_string()))?;
                    total += discounted_return(&traj.rewards(), gamma, Some(traj.r_end));
                }
                values.push(total / gt_rollouts as f64);
            }
            Some(values)
        }
        None => None,
    };

    // the importance-sampling estimate is deterministic given the buffer
    let refs: Vec<&Trajectory> = buffer.trajectories().iter().collect();
    let behavior = move |_: &[f64], a: f64| uniform_density(behavior_low, a);
    let mut is_estimates = Vec::new();
    for (_, net) in &policies {
        let net = net.clone();
        let policy_fn = move |s: &[f64]| net.act(s).expect("state width");
        let density = smoothed_policy_density(&policy_fn, is_sigma);
        let est = importance_sampling(
            &refs,
            &density,
            &behavior,
            &IsConfig { sigma: is_sigma, self_normalized: true, gamma: Some(gamma) },
        )
        .map_err(|e| Failure::runtime(e.to_string()))?;
        is_estimates.push(est.estimate);
    }

    let with_truth = actual.is_some();
    let mut csv = String::new();
    if with_truth {
        csv.push_str("row,policy_id,estimator,seed,estimate,actual,abs_error,rank_correlation,regret_at_1\n");
    } else {
        csv.push_str("row,policy_id,estimator,seed,estimate\n");
    }

    let mut summaries = Vec::new();
    for k in 0..num_seeds {
        let seed_k = seed.wrapping_add(k);
        for estimator in ["dlsm", "is"] {
            let mut records = Vec::new();
            for (idx, (id, net)) in policies.iter().enumerate() {
                let estimate = if estimator == "dlsm" {
                    let net = net.clone();
                    let policy_fn = move |s: &[f64]| net.act(s).expect("state width");
                    model
                        .rollout(
                            &policy_fn,
                            horizon,
                            rollouts,
                            gamma,
                            seed_k
                                .wrapping_mul(0x9E37_79B9)
                                .wrapping_add(idx as u64 * 0x85EB_CA6B),
                            sample_end,
                        )
                        .map_err(|e| Failure::runtime(e.to_string()))?
                        .0
                } else {
                    is_estimates[idx]
                };
                let mut fields = vec![
                    "estimate".to_string(),
                    id.clone(),
                    estimator.to_string(),
                    k.to_string(),
                    estimate.to_string(),
                ];
                if let Some(actual) = &actual {
                    fields.push(actual[idx].to_string());
                    fields.push(mae(actual[idx], estimate).to_string());
                    fields.push(String::new());
                    fields.push(String::new());
                }
                csv.push_str(&csv_row(&fields));
                csv.push('\n');
                records.push(PolicyEvalRecord {
                    policy_id: id.clone(),
                    actual: actual.as_ref().map(|a| a[idx]).unwrap_or(f64::NAN),
                    estimated: estimate,
                });
            }
            if let Some(_actual) = &actual {
                let (rho, regret) = if records.len() >= 2 {
                    let rho = rank_correlation(&records)
                        .map_err(|e| Failure::runtime(e.to_string()))?
                        .map(|r| r.to_string())
                        .unwrap_or_else(|| "na".to_string());
                    let regret = regret_at_1(&records)
                        .map(|r| r.to_string())
                        .unwrap_or_else(|_| "na".to_string());
                    (rho, regret)
                } else {
                    ("na".to_string(), "na".to_string())
                };
                summaries.push(csv_row(&[
                    "summary".to_string(),
                    String::new(),
                    estimator.to_string(),
                    k.to_string(),
                    String::new(),
                    String::new(),
                    String::new(),
                    rho,
                    regret,
                ]));
            }
        }
    }
    for s in &summaries {
        csv.push_str(s);
        csv.push('\n');
    }
    write_file(out, &csv)?;

    let mut manifest = Manifest::new("ope");
    manifest
        .seed(seed)
        .config("rollouts", rollouts)
        .config("horizon", horizon)
        .config("gamma", gamma)
        .config("is_sigma", is_sigma)
        .config("behavior_low", behavior_low)
        .config("num_seeds", num_seeds)
        .config("gt_rollouts", gt_rollouts)
        .config("policies", policies.len());
    manifest.input(dlsm_path).map_err(|e| Failure::usage(e.to_string()))?;
    for p in policy_paths {
        manifest.input(p).map_err(|e| Failure::usage(e.to_string()))?;
    }
    for b in buffers {
        manifest.input(b).map_err(|e| Failure::usage(e.to_string()))?;
    }
    if let Some(pp) = profile_path {
        manifest.input(pp).map_err(|e| Failure::usage(e.to_string()))?;
    }
    manifest.output(out);
    manifest.write(out).map_err(|e| Failure::runtime(e.to_string()))?;
    println!(
        "evaluated {} policies with {} estimator seeds; report at {}",
        policies.len(),
        num_seeds,
        out.display()
    );
    Ok(())
}

// ── compare ─────────────────────────────────────────────────────────

fn session_metric(traj: &Trajectory, metric: &str, squared_energy: bool) -> f64 {
    match metric {
        "energy" => {
            let sum: f64 = traj
                .transitions
                .iter()
                .map(|t| if squared_energy { t.action * t.action } else { t.action })
                .sum();
            sum / traj.len() as f64
        }
        "mean_beta" => {
            let sum: f64 =
                traj.transitions.iter().map(|t| t.next_state.last().copied().unwrap()).sum();
            sum / traj.len() as f64
        }
        "grasp" => traj.qoc.grasp_hz,
        "rating" => traj.qoc.rate as f64,
        "tremor" => traj.qoc.tremor_pct,
        _ => unreachable!("metric list is fixed"),
    }
}

pub fn cmd_compare(
    buffers: &[PathBuf],
    reference: &str,
    config: Option<&Path>,
    out: &Path,
) -> CmdResult {
    let kv = load_kv(config)?;
    let squared_energy = kv.str_or("energy_weighting", "amplitude") == "amplitude_squared";
    let buffer = load_buffers(buffers)?;
    let mut groups: BTreeMap<String, Vec<&Trajectory>> = BTreeMap::new();
    for t in buffer.trajectories() {
        groups.entry(t.controller_id.clone()).or_default().push(t);
    }
    let Some(ref_group) = groups.get(reference).cloned() else {
        return Err(Failure::usage(format!(
            "reference controller_id '{reference}' not present (found: {})",
            groups.keys().cloned().collect::<Vec<_>>().join(", ")
        )));
    };

    const METRICS: [&str; 5] = ["energy", "mean_beta", "grasp", "rating", "tremor"];
    let mut csv = String::from(
        "controller_id,metric,n_reference,n_controller,mean_reference,mean_controller,u_statistic,p_value,significant\n",
    );
    for (id, group) in &groups {
        if id == reference {
            continue;
        }
        for metric in METRICS {
            let a: Vec<f64> =
                ref_group.iter().map(|t| session_metric(t, metric, squared_energy)).collect();
            let b: Vec<f64> =
                group.iter().map(|t| session_metric(t, metric, squared_energy)).collect();
            let (u, p) =
                wilcoxon_rank_sum(&a, &b).map_err(|e| Failure::runtime(e.to_string()))?;
            let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
            csv.push_str(&csv_row(&[
                id.clone(),
                metric.to_string(),
                a.len().to_string(),
                b.len().to_string(),
                mean(&a).to_string(),
                mean(&b).to_string(),
                u.to_string(),
                p.to_string(),
                (p < 0.05).to_string(),
            ]));
            csv.push('\n');
        }
    }
    write_file(out, &csv)?;

    let mut manifest = Manifest::new("compare");
    manifest
        .config("reference", reference)
        .config("energy_weighting", if squared_energy { "amplitude_squared" } else { "amplitude" })
        .config("controllers", groups.len());
    for b in buffers {
        manifest.input(b).map_err(|e| Failure::usage(e.to_string()))?;
    }
    manifest.output(out);
    manifest.write(out).map_err(|e| Failure::runtime(e.to_string()))?;
    println!("compared {} controllers against '{reference}'; table at {}", groups.len() - 1, out.display());
    Ok(())
}

// ── timing ──────────────────────────────────────────────────────────

pub fn cmd_timing(
    teacher_path: &Path,
    student_path: &Path,
    buffers: &[PathBuf],
    config: Option<&Path>,
    out: &Path,
) -> CmdResult {
    let kv = load_kv(config)?;
    let holdout = kv.f64_or("holdout_fraction", 0.1).map_err(Failure::usage)?;
    let teacher = load_policy(teacher_path)?;
    let student = load_policy(student_path)?;
    let buffer = load_buffers(buffers)?;
    let (train_states, mut held) = split_states(&buffer, holdout);
    if held.is_empty() {
        held = train_states;
    }
    let report = fidelity_report(&teacher, &student, &held)
        .map_err(|e| Failure::runtime(e.to_string()))?;

    let param_count = |net: &PolicyNet| -> usize {
        net.params("n").iter().map(|(_, t)| t.numel()).sum()
    };
    // the main report holds only run-to-run reproducible quantities
    let mut csv = String::from("metric,value\n");
    let _ = writeln!(csv, "max_abs_deviation,{}", report.max_abs_deviation);
    let _ = writeln!(csv, "mean_abs_deviation,{}", report.mean_abs_deviation);
    let _ = writeln!(csv, "states_evaluated,{}", report.states_evaluated);
    let _ = writeln!(csv, "samples_per_network,{}", report.timing[0].samples);
    let _ = writeln!(csv, "teacher_parameters,{}", param_count(&teacher));
    let _ = writeln!(csv, "student_parameters,{}", param_count(&student));
    write_file(out, &csv)?;

    // wall-clock measurements are host-dependent; they live in a sidecar
    let mut measured = String::from("label,samples,median_ns,mean_ns\n");
    for t in &report.timing {
        let _ = writeln!(measured, "{},{},{},{}", t.label, t.samples, t.median_ns, t.mean_ns);
    }
    let measured_path = out.with_extension("measured.csv");
    write_file(&measured_path, &measured)?;

    let mut manifest = Manifest::new("timing");
    manifest.config("holdout_fraction", holdout).config("evaluations", report.timing[0].samples);
    manifest.input(teacher_path).map_err(|e| Failure::usage(e.to_string()))?;
    manifest.input(student_path).map_err(|e| Failure::usage(e.to_string()))?;
    for b in buffers {
        manifest.input(b).map_err(|e| Failure::usage(e.to_string()))?;
    }
    manifest.output(out);
    manifest.write(out).map_err(|e| Failure::runtime(e.to_string()))?;
    println!(
        "fidelity: mean dev {:.6}, max dev {:.6}; teacher median {} ns vs student {} ns (measured values in {})",
        report.mean_abs_deviation,
        report.max_abs_deviation,
        report.timing[0].median_ns,
        report.timing[1].median_ns,
        measured_path.display()
    );
    Ok(())
}
