//! CLI acceptance: byte-identical outputs for identical (inputs, config,
//! seed), value-exact persistence round trips, and exit-code conventions.

use std::path::Path;
use std::process::{Command, Output};
use std::time::Instant;

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_stimweave")
}

fn run_in(dir: &Path, args: &[&str]) -> Output {
    Command::new(bin())
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawning the workbench binary")
}

fn run_ok(dir: &Path, args: &[&str]) {
    let out = run_in(dir, args);
    assert!(
        out.status.success(),
        "command {:?} failed\nstdout: {}\nstderr: {}",
        args,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

const PROFILE: &str = "\
id = reference
baseline_beta = 1.0
suppression_gain = 0.8
ar_coefficient = 0.7
noise_std = 0.02
beta_threshold = 0.55
tremor_threshold = 0.6
qoc_noise_std = 0.05
grasp_base = 1.2
seed = 0
";

const TRAIN_CONF: &str = "\
hidden = 16,12
steps = 150
batch_size = 8
gamma = 0.9
actor_lr = 1e-4
critic_lr = 1e-3
";

const FINETUNE_CONF: &str = "\
steps = 40
batch_size = 8
gamma = 0.9
actor_lr = 1e-6
critic_lr = 1e-6
";

const DISTILL_CONF: &str = "\
student_hidden = 8,4
steps = 200
lr = 2e-3
batch_size = 16
";

const DLSM_CONF: &str = "\
latent_dim = 3
enc_hidden = 8
dec_hidden = 8
head_hidden = 8
batch_size = 4
lr = 2e-3
max_iter = 60
";

const OPE_CONF: &str = "\
rollouts = 6
horizon = 25
gt_rollouts = 5
";

/// Runs the whole workflow with fixed seeds inside `dir` using relative
/// paths, so artifacts are comparable byte-for-byte across directories.
fn run_full_workflow(dir: &Path) {
    std::fs::write(dir.join("ref.profile"), PROFILE).unwrap();
    std::fs::write(dir.join("train.conf"), TRAIN_CONF).unwrap();
    std::fs::write(dir.join("finetune.conf"), FINETUNE_CONF).unwrap();
    std::fs::write(dir.join("distill.conf"), DISTILL_CONF).unwrap();
    std::fs::write(dir.join("dlsm.conf"), DLSM_CONF).unwrap();
    std::fs::write(dir.join("ope.conf"), OPE_CONF).unwrap();

    run_ok(dir, &["collect", "--profile", "ref.profile", "--controller", "random(0.3)", "--controller-id", "random", "--sessions", "8", "--horizon", "25", "--seed", "1", "--out", "behavior.jsonl"]);
    run_ok(dir, &["collect", "--profile", "ref.profile", "--controller", "constant(1.0)", "--controller-id", "cdbs", "--sessions", "5", "--horizon", "25", "--seed", "50", "--out", "cdbs.jsonl"]);
    run_ok(dir, &["train", "--buffer", "behavior.jsonl", "--config", "train.conf", "--seed", "3", "--out", "actor.ckpt"]);
    run_ok(dir, &["finetune", "--from", "actor.ckpt", "--buffer", "behavior.jsonl", "--config", "finetune.conf", "--seed", "4", "--out", "actor-ft.ckpt"]);
    run_ok(dir, &["distill", "--teacher", "actor.ckpt", "--buffer", "behavior.jsonl", "--config", "distill.conf", "--seed", "5", "--out", "student.ckpt"]);
    run_ok(dir, &["train-dlsm", "--buffer", "behavior.jsonl", "--config", "dlsm.conf", "--seed", "6", "--out", "world.ckpt"]);
    run_ok(dir, &["ope", "--dlsm", "world.ckpt", "--policy", "actor.ckpt", "--policy", "student.ckpt", "--buffer", "behavior.jsonl", "--profile", "ref.profile", "--config", "ope.conf", "--seed", "7", "--num-seeds", "2", "--out", "report.csv"]);
    run_ok(dir, &["compare", "--buffer", "behavior.jsonl", "--buffer", "cdbs.jsonl", "--reference", "cdbs", "--out", "compare.csv"]);
    run_ok(dir, &["timing", "--teacher", "actor.ckpt", "--student", "student.ckpt", "--buffer", "behavior.jsonl", "--out", "timing.csv"]);
}

#[test]
fn criterion_09_determinism_and_persistence() {
    let start = Instant::now();
    let root = tempfile::tempdir().unwrap();
    let dir_a = root.path().join("a");
    let dir_b = root.path().join("b");
    std::fs::create_dir_all(&dir_a).unwrap();
    std::fs::create_dir_all(&dir_b).unwrap();
    run_full_workflow(&dir_a);
    run_full_workflow(&dir_b);

    // every artifact except the host-dependent timing sidecar must match
    let artifacts = [
        "behavior.jsonl",
        "behavior.jsonl.manifest.json",
        "cdbs.jsonl",
        "cdbs.jsonl.manifest.json",
        "actor.ckpt",
        "actor.ckpt.manifest.json",
        "actor.log.csv",
        "actor-ft.ckpt",
        "actor-ft.ckpt.manifest.json",
        "actor-ft.log.csv",
        "student.ckpt",
        "student.ckpt.manifest.json",
        "student.log.csv",
        "world.ckpt",
        "world.ckpt.manifest.json",
        "world.log.csv",
        "report.csv",
        "report.csv.manifest.json",
        "compare.csv",
        "compare.csv.manifest.json",
        "timing.csv",
        "timing.csv.manifest.json",
    ];
    for name in artifacts {
        let a = std::fs::read(dir_a.join(name)).unwrap_or_else(|_| panic!("missing {name} in run A"));
        let b = std::fs::read(dir_b.join(name)).unwrap_or_else(|_| panic!("missing {name} in run B"));
        assert_eq!(a, b, "artifact {name} differs between identical runs");
    }

    // replay persistence: load → save is byte-identical (shortest-round-trip
    // float formatting), and values survive exactly
    let loaded = stimweave_core::replay::ReplayBuffer::load(&dir_a.join("behavior.jsonl")).unwrap();
    let resaved = dir_a.join("behavior-resaved.jsonl");
    loaded.save(&resaved).unwrap();
    assert_eq!(
        std::fs::read(dir_a.join("behavior.jsonl")).unwrap(),
        std::fs::read(&resaved).unwrap(),
        "replay save/load round trip changed bytes"
    );

    // checkpoint persistence: binary load → save is byte-identical
    let ck = stimweave_core::diffnum::Checkpoint::load(&dir_a.join("actor.ckpt")).unwrap();
    let resaved_ck = dir_a.join("actor-resaved.ckpt");
    ck.save(&resaved_ck).unwrap();
    assert_eq!(
        std::fs::read(dir_a.join("actor.ckpt")).unwrap(),
        std::fs::read(&resaved_ck).unwrap(),
        "checkpoint round trip changed bytes"
    );
    // and the JSON encoding preserves values exactly
    let json_ck = dir_a.join("actor.json");
    ck.save(&json_ck).unwrap();
    let back = stimweave_core::diffnum::Checkpoint::load(&json_ck).unwrap();
    assert_eq!(ck.tensors, back.tensors);

    println!(
        "acceptance 09 determinism-persistence: PASS ({} artifacts, {:.0}s)",
        artifacts.len(),
        start.elapsed().as_secs_f64()
    );
}

#[test]
fn exit_codes_follow_the_convention() {
    let dir = tempfile::tempdir().unwrap();
    let dir = dir.path();

    // usage errors exit 2
    let out = run_in(dir, &["collect", "--profile", "missing.profile", "--controller", "random(0.3)", "--out", "b.jsonl"]);
    assert_eq!(out.status.code(), Some(2), "unreadable profile should exit 2");

    std::fs::write(dir.join("ref.profile"), PROFILE).unwrap();
    let out = run_in(dir, &["collect", "--profile", "ref.profile", "--controller", "sorcery(1)", "--out", "b.jsonl"]);
    assert_eq!(out.status.code(), Some(2), "invalid controller spec should exit 2");

    let out = run_in(dir, &["compare", "--buffer", "nope.jsonl", "--reference", "cdbs", "--out", "c.csv"]);
    assert_eq!(out.status.code(), Some(2));

    // clap-level misuse also exits 2
    let out = run_in(dir, &["train"]);
    assert_eq!(out.status.code(), Some(2));

    // success exits 0
    let out = run_in(dir, &["collect", "--profile", "ref.profile", "--controller", "constant(1.0)", "--controller-id", "cdbs", "--sessions", "2", "--horizon", "10", "--out", "b.jsonl"]);
    assert_eq!(out.status.code(), Some(0));

    // missing reference group is a usage error
    let out = run_in(dir, &["compare", "--buffer", "b.jsonl", "--reference", "other", "--out", "c.csv"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("cdbs"), "error should list available ids");
}

#[test]
fn collect_appends_and_detects_duplicates() {
    let dir = tempfile::tempdir().unwrap();
    let dir = dir.path();
    std::fs::write(dir.join("ref.profile"), PROFILE).unwrap();
    run_ok(dir, &["collect", "--profile", "ref.profile", "--controller", "constant(0.8)", "--controller-id", "c8", "--sessions", "3", "--horizon", "10", "--seed", "0", "--out", "b.jsonl"]);
    run_ok(dir, &["collect", "--profile", "ref.profile", "--controller", "constant(0.8)", "--controller-id", "c8", "--sessions", "3", "--horizon", "10", "--seed", "100", "--out", "b.jsonl"]);
    let buffer = stimweave_core::replay::ReplayBuffer::load(&dir.join("b.jsonl")).unwrap();
    assert_eq!(buffer.len(), 6);
    // same seed again duplicates session ids and must fail at runtime
    let out = run_in(dir, &["collect", "--profile", "ref.profile", "--controller", "constant(0.8)", "--controller-id", "c8", "--sessions", "3", "--horizon", "10", "--seed", "0", "--out", "b.jsonl"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("duplicate"));
}

#[test]
fn finetune_warns_on_out_of_range_learning_rate() {
    let dir = tempfile::tempdir().unwrap();
    let dir = dir.path();
    std::fs::write(dir.join("ref.profile"), PROFILE).unwrap();
    std::fs::write(dir.join("train.conf"), TRAIN_CONF).unwrap();
    std::fs::write(
        dir.join("ft.conf"),
        "steps = 10\nbatch_size = 4\nactor_lr = 1e-3\ncritic_lr = 1e-3\nhidden = 16,12\n",
    )
    .unwrap();
    run_ok(dir, &["collect", "--profile", "ref.profile", "--controller", "random(0.3)", "--controller-id", "random", "--sessions", "4", "--horizon", "12", "--out", "b.jsonl"]);
    run_ok(dir, &["train", "--buffer", "b.jsonl", "--config", "train.conf", "--out", "actor.ckpt"]);
    let out = run_in(dir, &["finetune", "--from", "actor.ckpt", "--buffer", "b.jsonl", "--config", "ft.conf", "--out", "ft.ckpt"]);
    assert_eq!(out.status.code(), Some(0), "out-of-range rate warns but proceeds");
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("warning") && stderr.contains("fine-tune"), "stderr: {stderr}");
}

#[test]
fn ope_without_ground_truth_suppresses_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let dir = dir.path();
    std::fs::write(dir.join("ref.profile"), PROFILE).unwrap();
    std::fs::write(dir.join("train.conf"), TRAIN_CONF).unwrap();
    std::fs::write(dir.join("dlsm.conf"), DLSM_CONF).unwrap();
    std::fs::write(dir.join("ope.conf"), OPE_CONF).unwrap();
    run_ok(dir, &["collect", "--profile", "ref.profile", "--controller", "random(0.3)", "--controller-id", "random", "--sessions", "6", "--horizon", "20", "--out", "b.jsonl"]);
    run_ok(dir, &["train", "--buffer", "b.jsonl", "--config", "train.conf", "--out", "actor.ckpt"]);
    run_ok(dir, &["train-dlsm", "--buffer", "b.jsonl", "--config", "dlsm.conf", "--out", "world.ckpt"]);

    // no profile: no actual/abs_error columns, no summary rows
    run_ok(dir, &["ope", "--dlsm", "world.ckpt", "--policy", "actor.ckpt", "--buffer", "b.jsonl", "--config", "ope.conf", "--out", "r1.csv"]);
    let r1 = std::fs::read_to_string(dir.join("r1.csv")).unwrap();
    assert!(r1.lines().next().unwrap().ends_with("estimate"), "{r1}");
    assert!(!r1.contains("summary"));

    // single policy with ground truth: summary metrics are not applicable
    run_ok(dir, &["ope", "--dlsm", "world.ckpt", "--policy", "actor.ckpt", "--buffer", "b.jsonl", "--profile", "ref.profile", "--config", "ope.conf", "--out", "r2.csv"]);
    let r2 = std::fs::read_to_string(dir.join("r2.csv")).unwrap();
    let summary_lines: Vec<&str> = r2.lines().filter(|l| l.starts_with("summary")).collect();
    assert_eq!(summary_lines.len(), 2);
    assert!(summary_lines.iter().all(|l| l.contains("na")), "{summary_lines:?}");
}

/// The protocol shape: P policies × {model-based, importance-sampling} × K
/// seeds estimate rows plus 2 × K summary rows.
#[test]
fn ope_report_has_protocol_row_counts() {
    let dir = tempfile::tempdir().unwrap();
    let dir = dir.path();
    std::fs::write(dir.join("ref.profile"), PROFILE).unwrap();
    std::fs::write(dir.join("train.conf"), TRAIN_CONF).unwrap();
    std::fs::write(dir.join("dlsm.conf"), DLSM_CONF).unwrap();
    std::fs::write(dir.join("ope.conf"), OPE_CONF).unwrap();
    run_ok(dir, &["collect", "--profile", "ref.profile", "--controller", "random(0.3)", "--controller-id", "random", "--sessions", "6", "--horizon", "20", "--out", "b.jsonl"]);
    run_ok(dir, &["train", "--buffer", "b.jsonl", "--config", "train.conf", "--out", "p0.ckpt"]);
    let mut policy_args: Vec<String> = Vec::new();
    for i in 0..6 {
        let name = format!("p{i}.ckpt");
        if i > 0 {
            std::fs::copy(dir.join("p0.ckpt"), dir.join(&name)).unwrap();
        }
        policy_args.push("--policy".into());
        policy_args.push(name);
    }
    run_ok(dir, &["train-dlsm", "--buffer", "b.jsonl", "--config", "dlsm.conf", "--out", "world.ckpt"]);
    let mut args: Vec<String> = vec!["ope".into(), "--dlsm".into(), "world.ckpt".into()];
    args.extend(policy_args);
    args.extend(
        ["--buffer", "b.jsonl", "--profile", "ref.profile", "--config", "ope.conf", "--num-seeds", "3", "--out", "r.csv"]
            .iter()
            .map(|s| s.to_string()),
    );
    let arg_refs: Vec<&str> = args.iter().map(|s| s.as_str()).collect();
    run_ok(dir, &arg_refs);
    let report = std::fs::read_to_string(dir.join("r.csv")).unwrap();
    let estimates = report.lines().filter(|l| l.starts_with("estimate")).count();
    let summaries = report.lines().filter(|l| l.starts_with("summary")).count();
    assert_eq!(estimates, 6 * 2 * 3);
    assert_eq!(summaries, 2 * 3);
}

#[test]
fn compare_emits_five_metrics_and_reference_self_test_is_flat() {
    let dir = tempfile::tempdir().unwrap();
    let dir = dir.path();
    std::fs::write(dir.join("ref.profile"), PROFILE).unwrap();
    run_ok(dir, &["collect", "--profile", "ref.profile", "--controller", "constant(1.0)", "--controller-id", "cdbs", "--sessions", "6", "--horizon", "40", "--seed", "0", "--out", "a.jsonl"]);
    // a second group generated identically except for the label
    run_ok(dir, &["collect", "--profile", "ref.profile", "--controller", "constant(1.0)", "--controller-id", "twin", "--sessions", "6", "--horizon", "40", "--seed", "0", "--out", "t.jsonl"]);
    run_ok(dir, &["compare", "--buffer", "a.jsonl", "--buffer", "t.jsonl", "--reference", "cdbs", "--out", "c.csv"]);
    let table = std::fs::read_to_string(dir.join("c.csv")).unwrap();
    let rows: Vec<&str> = table.lines().skip(1).collect();
    assert_eq!(rows.len(), 5, "{table}");
    for metric in ["energy", "mean_beta", "grasp", "rating", "tremor"] {
        assert!(rows.iter().any(|r| r.contains(metric)), "missing {metric}");
    }
    // identical groups: p = 1 everywhere, nothing significant
    for row in rows {
        assert!(row.ends_with(",1,false"), "row {row}");
    }
    // the constant-1 controller's energy is exactly 1
    let energy_row = table.lines().find(|l| l.contains("energy")).unwrap();
    let fields: Vec<&str> = energy_row.split(',').collect();
    assert_eq!(fields[4], "1");
    assert_eq!(fields[5], "1");
}
