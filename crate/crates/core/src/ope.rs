//! Off-policy evaluation baselines and comparison metrics: trajectory-wise
//! importance sampling with a smoothed deterministic target, Spearman rank
//! correlation, regret@1, MAE, and the Wilcoxon rank-sum test.

use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::actor_critic::discounted_return;
use crate::error::{Error, Result};
use crate::replay::Trajectory;

/// One policy's actual value V and an estimator's value V̂.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyEvalRecord {
    pub policy_id: String,
    pub actual: f64,
    pub estimated: f64,
}

// ── importance sampling ─────────────────────────────────────────────

#[derive(Debug, Clone, Copy)]
pub struct IsConfig {
    /// Smoothing std of the truncated-Gaussian kernel around the
    /// deterministic target action.
    pub sigma: f64,
    /// Self-normalized (weighted-mean) estimate when true; plain mean of
    /// weighted returns otherwise.
    pub self_normalized: bool,
    /// Discount for the per-trajectory return; `None` uses each trajectory's
    /// stored gamma.
    pub gamma: Option<f64>,
}

impl Default for IsConfig {
    fn default() -> Self {
        IsConfig { sigma: 0.1, self_normalized: true, gamma: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IsEstimate {
    pub estimate: f64,
    /// Trajectories whose weight collapsed to zero (behavior density zero at
    /// some logged action).
    pub zero_weight_trajectories: usize,
}

/// Trajectory-wise importance sampling with caller-supplied action densities.
/// The weight of a trajectory is the product over steps of
/// target(s_t, a_t) / behavior(s_t, a_t); returns follow the total-return
/// convention (end-of-session reward plus discounted step rewards).
pub fn importance_sampling(
    trajectories: &[&Trajectory],
    target_density: &dyn Fn(&[f64], f64) -> f64,
    behavior_density: &dyn Fn(&[f64], f64) -> f64,
    config: &IsConfig,
) -> Result<IsEstimate> {
    if trajectories.is_empty() {
        return Err(Error::Contract("importance_sampling needs at least one trajectory".into()));
    }
    let mut weights = Vec::with_capacity(trajectories.len());
    let mut returns = Vec::with_capacity(trajectories.len());
    let mut zero_weight = 0usize;
    for traj in trajectories {
        let mut log_w = 0.0f64;
        let mut dead = false;
        for tr in &traj.transitions {
            let mu = behavior_density(&tr.state, tr.action);
            if mu <= 0.0 {
                dead = true;
                break;
            }
            let pi = target_density(&tr.state, tr.action);
            if pi <= 0.0 {
                dead = true;
                break;
            }
            log_w += pi.ln() - mu.ln();
        }
        let w = if dead {
            zero_weight += 1;
            0.0
        } else {
            log_w.exp()
        };
        let gamma = config.gamma.unwrap_or(traj.constants.gamma);
        weights.push(w);
        returns.push(discounted_return(&traj.rewards(), gamma, Some(traj.r_end)));
    }
    let total_w: f64 = weights.iter().sum();
    let estimate = if config.self_normalized {
        if total_w > 0.0 {
            weights.iter().zip(&returns).map(|(w, g)| w * g).sum::<f64>() / total_w
        } else {
            0.0
        }
    } else {
        weights.iter().zip(&returns).map(|(w, g)| w * g).sum::<f64>() / trajectories.len() as f64
    };
    Ok(IsEstimate { estimate, zero_weight_trajectories: zero_weight })
}

/// Truncated-Gaussian density on [0, 1] centered at the deterministic
/// policy's action: the smoothing that makes a point-mass target integrable
/// against the behavior density.
pub fn smoothed_policy_density<'a>(
    policy: &'a dyn Fn(&[f64]) -> f64,
    sigma: f64,
) -> impl Fn(&[f64], f64) -> f64 + 'a {
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    move |state: &[f64], action: f64| {
        if !(0.0..=1.0).contains(&action) {
            return 0.0;
        }
        let m = policy(state);
        let z = (action - m) / sigma;
        let mass = std_normal.cdf((1.0 - m) / sigma) - std_normal.cdf((0.0 - m) / sigma);
        if mass <= 0.0 {
            return 0.0;
        }
        std_normal.pdf(z) / (sigma * mass)
    }
}

// ── ranking metrics ─────────────────────────────────────────────────

/// Average ranks (1-based), ties get the mean of the tied positions.
fn average_ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).expect("finite values"));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j + 2) as f64 / 2.0;
        for k in i..=j {
            ranks[order[k]] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman's ρ between the rankings of actual and estimated returns.
/// Returns `None` when either side is constant (undefined correlation).
pub fn rank_correlation(records: &[PolicyEvalRecord]) -> Result<Option<f64>> {
    if records.len() < 2 {
        return Err(Error::Contract("rank_correlation needs at least two records".into()));
    }
    let v: Vec<f64> = records.iter().map(|r| r.actual).collect();
    let v_hat: Vec<f64> = records.iter().map(|r| r.estimated).collect();
    let ra = average_ranks(&v);
    let rb = average_ranks(&v_hat);
    let n = ra.len() as f64;
    let mean = (n + 1.0) / 2.0;
    let mut cov = 0.0;
    let mut var_a = 0.0;
    let mut var_b = 0.0;
    for (a, b) in ra.iter().zip(&rb) {
        cov += (a - mean) * (b - mean);
        var_a += (a - mean).powi(2);
        var_b += (b - mean).powi(2);
    }
    if var_a == 0.0 || var_b == 0.0 {
        return Ok(None);
    }
    Ok(Some(cov / (var_a.sqrt() * var_b.sqrt())))
}

/// (max V − V at the estimator's top pick) / max V. Zero when the estimator
/// identifies the actual best policy.
pub fn regret_at_1(records: &[PolicyEvalRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::Contract("regret_at_1 needs at least one record".into()));
    }
    let best_actual = records.iter().map(|r| r.actual).fold(f64::NEG_INFINITY, f64::max);
    if best_actual == 0.0 {
        return Err(Error::Domain("regret_at_1 undefined when the best actual value is 0".into()));
    }
    let picked = records
        .iter()
        .max_by(|a, b| a.estimated.partial_cmp(&b.estimated).expect("finite values"))
        .expect("non-empty");
    Ok((best_actual - picked.actual) / best_actual)
}

/// Absolute difference between actual and estimated return.
pub fn mae(actual: f64, estimated: f64) -> f64 {
    (actual - estimated).abs()
}

// ── Wilcoxon rank-sum ───────────────────────────────────────────────

/// Wilcoxon rank-sum (Mann-Whitney) with midranks for ties. Exact two-sided
/// p by full enumeration of rank assignments when n+m ≤ 20, a tie-corrected
/// normal approximation with continuity correction otherwise. The returned
/// statistic is U = min(U_a, U_b).
pub fn wilcoxon_rank_sum(sample_a: &[f64], sample_b: &[f64]) -> Result<(f64, f64)> {
    if sample_a.is_empty() || sample_b.is_empty() {
        return Err(Error::Contract("wilcoxon_rank_sum needs two non-empty samples".into()));
    }
    let n = sample_a.len();
    let m = sample_b.len();
    let mut pooled: Vec<f64> = sample_a.iter().chain(sample_b.iter()).copied().collect();
    if pooled.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("wilcoxon_rank_sum requires finite samples".into()));
    }
    let ranks = average_ranks(&pooled);
    let r_a: f64 = ranks[..n].iter().sum();
    let u_a = r_a - (n * (n + 1)) as f64 / 2.0;
    let u_b = (n * m) as f64 - u_a;
    let u_obs = u_a.min(u_b);

    let total = n + m;
    let p = if total <= 20 {
        exact_two_sided_p(&ranks, n, u_obs)
    } else {
        pooled.sort_by(|a, b| a.partial_cmp(b).unwrap());
        normal_approx_p(&pooled, n, m, u_obs)
    };
    Ok((u_obs, p))
}

/// Enumerates every C(n+m, n) assignment of the pooled midranks to group A
/// and counts assignments at least as extreme as the observed min-U.
fn exact_two_sided_p(ranks: &[f64], n: usize, u_obs: f64) -> f64 {
    let total = ranks.len();
    let m = total - n;
    let nm = (n * m) as f64;
    let offset = (n * (n + 1)) as f64 / 2.0;
    let mut extreme = 0u64;
    let mut count = 0u64;
    // Gosper's hack over n-subsets of `total` bits
    let mut mask: u32 = (1u32 << n) - 1;
    let limit: u32 = 1u32 << total;
    while mask < limit {
        let mut r_a = 0.0;
        let mut bits = mask;
        while bits != 0 {
            let idx = bits.trailing_zeros() as usize;
            r_a += ranks[idx];
            bits &= bits - 1;
        }
        let u_a = r_a - offset;
        let u_min = u_a.min(nm - u_a);
        if u_min <= u_obs + 1e-9 {
            extreme += 1;
        }
        count += 1;
        // next subset with the same popcount
        let c = mask & mask.wrapping_neg();
        let r = mask + c;
        if r >= limit || c == 0 {
            break;
        }
        mask = (((r ^ mask) >> 2) / c) | r;
    }
    extreme as f64 / count as f64
}

fn normal_approx_p(sorted_pooled: &[f64], n: usize, m: usize, u_obs: f64) -> f64 {
    let big_n = (n + m) as f64;
    let nm = (n * m) as f64;
    // tie correction: Σ (t³ − t) over tie groups
    let mut tie_sum = 0.0;
    let mut i = 0;
    while i < sorted_pooled.len() {
        let mut j = i;
        while j + 1 < sorted_pooled.len() && sorted_pooled[j + 1] == sorted_pooled[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        tie_sum += t * t * t - t;
        i = j + 1;
    }
    let var = nm / 12.0 * ((big_n + 1.0) - tie_sum / (big_n * (big_n - 1.0)));
    if var <= 0.0 {
        return 1.0;
    }
    let z = ((nm / 2.0 - u_obs) - 0.5).max(0.0) / var.sqrt();
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    (2.0 * (1.0 - std_normal.cdf(z))).min(1.0)
}

// ── CSV rendering ───────────────────────────────────────────────────

/// RFC-4180 field quoting.
pub fn csv_field(s: &str) -> String {
    if s.contains(',') || s.contains('"') || s.contains('\n') || s.contains('\r') {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn csv_row(fields: &[String]) -> String {
    fields.iter().map(|f| csv_field(f)).collect::<Vec<_>>().join(",")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn records(v: &[f64], v_hat: &[f64]) -> Vec<PolicyEvalRecord> {
        v.iter()
            .zip(v_hat)
            .enumerate()
            .map(|(i, (a, e))| PolicyEvalRecord {
                policy_id: format!("p{i}"),
                actual: *a,
                estimated: *e,
            })
            .collect()
    }

    #[test]
    fn spearman_identity_reversal_and_swap_case() {
        let r = records(&[1.0, 2.0, 3.0, 4.0], &[10.0, 20.0, 30.0, 40.0]);
        assert!((rank_correlation(&r).unwrap().unwrap() - 1.0).abs() < 1e-12);
        let r = records(&[1.0, 2.0, 3.0, 4.0], &[4.0, 3.0, 2.0, 1.0]);
        assert!((rank_correlation(&r).unwrap().unwrap() + 1.0).abs() < 1e-12);
        // Σd² = 2, n = 4 → ρ = 1 − 6·2/(4·15) = 0.8
        let r = records(&[1.0, 2.0, 3.0, 4.0], &[1.0, 2.0, 4.0, 3.0]);
        let rho = rank_correlation(&r).unwrap().unwrap();
        assert!((rho - 0.8).abs() < 1e-12);
    }

    #[test]
    fn spearman_constant_input_is_undefined() {
        let r = records(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]);
        assert_eq!(rank_correlation(&r).unwrap(), None);
    }

    #[test]
    fn spearman_invariant_under_monotone_transform() {
        let v = [0.3, 1.9, -0.7, 2.5, 0.1];
        let v_hat = [1.0, 0.2, 0.5, 2.0, -0.3];
        let base = rank_correlation(&records(&v, &v_hat)).unwrap().unwrap();
        let v_t: Vec<f64> = v.iter().map(|x| (3.0 * x).exp()).collect();
        let vh_t: Vec<f64> = v_hat.iter().map(|x| x.powi(3) * 2.0 + 7.0).collect();
        let t = rank_correlation(&records(&v_t, &vh_t)).unwrap().unwrap();
        assert!((base - t).abs() < 1e-12);
    }

    #[test]
    fn regret_cases() {
        // estimator picks the actual best
        let r = records(&[10.0, 5.0], &[1.0, 0.5]);
        assert_eq!(regret_at_1(&r).unwrap(), 0.0);
        // estimator prefers the worse policy
        let r = records(&[10.0, 5.0], &[0.5, 1.0]);
        assert!((regret_at_1(&r).unwrap() - 0.5).abs() < 1e-12);
        // single policy
        let r = records(&[10.0], &[0.0]);
        assert_eq!(regret_at_1(&r).unwrap(), 0.0);
        // rescaling all estimates never changes the pick
        let r1 = records(&[3.0, 9.0, 6.0], &[0.1, 0.7, 0.3]);
        let r2 = records(&[3.0, 9.0, 6.0], &[1.0, 7.0, 3.0]);
        assert_eq!(regret_at_1(&r1).unwrap(), regret_at_1(&r2).unwrap());
        // division-domain error
        let r = records(&[0.0, -1.0], &[1.0, 0.0]);
        assert!(regret_at_1(&r).is_err());
    }

    #[test]
    fn mae_cases() {
        assert_eq!(mae(10.0, 7.0), 3.0);
        assert_eq!(mae(4.2, 4.2), 0.0);
        assert_eq!(mae(10.0, 7.0), mae(7.0, 10.0));
    }

    #[test]
    fn wilcoxon_disjoint_samples() {
        let (u, p) = wilcoxon_rank_sum(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]).unwrap();
        assert_eq!(u, 0.0);
        assert!((p - 0.1).abs() < 1e-12, "p {p}");
    }

    #[test]
    fn wilcoxon_identical_samples() {
        let (_, p) = wilcoxon_rank_sum(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(p, 1.0);
    }

    #[test]
    fn wilcoxon_is_symmetric() {
        let a = [0.3, 1.2, 0.9, 2.2];
        let b = [0.1, 0.8, 1.4];
        let (u1, p1) = wilcoxon_rank_sum(&a, &b).unwrap();
        let (u2, p2) = wilcoxon_rank_sum(&b, &a).unwrap();
        assert_eq!(u1, u2);
        assert_eq!(p1, p2);
    }

    #[test]
    fn wilcoxon_exact_close_to_normal_approx() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(17);
        for _ in 0..20 {
            let a: Vec<f64> = (0..10).map(|_| rng.gen_range(0.0..1.0)).collect();
            let b: Vec<f64> = (0..10).map(|_| rng.gen_range(0.0..1.2)).collect();
            let (_, p_exact) = wilcoxon_rank_sum(&a, &b).unwrap();
            let mut pooled: Vec<f64> = a.iter().chain(b.iter()).copied().collect();
            let ranks = average_ranks(&pooled);
            let r_a: f64 = ranks[..10].iter().sum();
            let u_a = r_a - 55.0;
            let u_obs = u_a.min(100.0 - u_a);
            pooled.sort_by(|x, y| x.partial_cmp(y).unwrap());
            let p_norm = normal_approx_p(&pooled, 10, 10, u_obs);
            assert!((p_exact - p_norm).abs() < 0.02, "exact {p_exact} approx {p_norm}");
        }
    }

    mod importance_sampling_tests {
        use super::super::*;
        use crate::bg_env::QoCReport;
        use crate::replay::{TrajectoryConstants, Transition};

        fn synthetic_traj(
            id: &str,
            steps: &[(f64, f64, f64, f64)], // (state0, action, reward, next0)
            gamma: f64,
        ) -> Trajectory {
            let qoc = QoCReport { grasp_hz: 1.0, rate: 5, tremor_pct: 0.0, session_len: steps.len() };
            let constants = TrajectoryConstants {
                r_a: 0.0,
                r_b: -1.0,
                c1: 0.3,
                c2: 0.0001,
                c3: 0.0001,
                c4: 0.0001,
                gamma,
                xi_beta: 0.5,
            };
            Trajectory {
                version: 1,
                session_id: id.to_string(),
                controller_id: "synthetic".to_string(),
                profile_id: "synthetic".to_string(),
                seed: 0,
                constants,
                transitions: steps
                    .iter()
                    .enumerate()
                    .map(|(t, (s, a, r, s2))| Transition {
                        t,
                        state: vec![*s],
                        action: *a,
                        reward: *r,
                        next_state: vec![*s2],
                    })
                    .collect(),
                qoc,
                r_end: 0.0,
            }
        }

        #[test]
        fn identical_target_and_behavior_reduces_to_plain_mean() {
            let t1 = synthetic_traj("a", &[(0.0, 0.5, 1.0, 1.0)], 0.9);
            let t2 = synthetic_traj("b", &[(1.0, 0.7, 3.0, 0.0)], 0.9);
            let density = |_: &[f64], _: f64| 0.5;
            let est = importance_sampling(
                &[&t1, &t2],
                &density,
                &density,
                &IsConfig { gamma: Some(0.9), ..IsConfig::default() },
            )
            .unwrap();
            assert!((est.estimate - 2.0).abs() < 1e-12);
            assert_eq!(est.zero_weight_trajectories, 0);
        }

        #[test]
        fn single_trajectory_self_normalizes_to_its_return() {
            let t1 = synthetic_traj("a", &[(0.0, 0.5, 2.0, 1.0), (1.0, 0.5, 4.0, 0.0)], 0.5);
            let target = |_: &[f64], _: f64| 0.9;
            let behavior = |_: &[f64], _: f64| 0.4;
            let est =
                importance_sampling(&[&t1], &target, &behavior, &IsConfig::default()).unwrap();
            // return = 2 + 0.5·4 = 4 under the stored gamma
            assert!((est.estimate - 4.0).abs() < 1e-12);
        }

        #[test]
        fn out_of_support_actions_zero_the_weight() {
            let t1 = synthetic_traj("a", &[(0.0, 0.1, 1.0, 1.0)], 0.9);
            let t2 = synthetic_traj("b", &[(0.0, 0.8, 5.0, 1.0)], 0.9);
            let target = |_: &[f64], _: f64| 1.0;
            let behavior = |_: &[f64], a: f64| if a >= 0.3 { 1.0 / 0.7 } else { 0.0 };
            let est =
                importance_sampling(&[&t1, &t2], &target, &behavior, &IsConfig::default()).unwrap();
            assert_eq!(est.zero_weight_trajectories, 1);
            assert!((est.estimate - 5.0).abs() < 1e-12);
        }

        #[test]
        fn smoothed_density_integrates_to_one() {
            let policy = |_: &[f64]| 0.8;
            let density = smoothed_policy_density(&policy, 0.1);
            let n = 200_000;
            let h = 1.0 / n as f64;
            let mass: f64 =
                (0..n).map(|k| density(&[], (k as f64 + 0.5) * h) * h).sum();
            assert!((mass - 1.0).abs() < 1e-6, "mass {mass}");
        }
    }
}
