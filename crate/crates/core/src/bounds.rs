//! Exact checks of the model-discrepancy performance-gap and regret bounds
//! on small tabular MDP pairs.

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use serde::Serialize;

use crate::envs::tabular::{make_random_tabular_pair, random_simplex, tv_distance, TabularMdp};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// A stationary stochastic policy, `probs[s][a]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TabularPolicy {
    pub probs: Vec<Vec<f64>>,
}

impl TabularPolicy {
    pub fn deterministic(actions: &[usize], n_actions: usize) -> Self {
        Self {
            probs: actions
                .iter()
                .map(|&a| {
                    (0..n_actions)
                        .map(|b| if a == b { 1.0 } else { 0.0 })
                        .collect()
                })
                .collect(),
        }
    }

    /// Every state's action distribution drawn uniformly from the simplex.
    pub fn random(n_states: usize, n_actions: usize, rng: &mut Rng) -> Self {
        Self {
            probs: (0..n_states)
                .map(|_| random_simplex(n_actions, rng))
                .collect(),
        }
    }
}

/// State values and the initial-distribution objective of one policy.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub values: Vec<f64>,
    pub objective: f64,
}

/// Solve `(I - gamma P_pi) V = R_pi` exactly.
pub fn exact_value(mdp: &TabularMdp, policy: &TabularPolicy) -> Result<Evaluation> {
    let n = mdp.n_states;
    assert!(
        mdp.gamma < 1.0,
        "the Bellman system is singular for gamma = 1"
    );
    if policy.probs.len() != n || policy.probs.iter().any(|p| p.len() != mdp.n_actions) {
        return Err(Error::Invalid("policy shape does not match the MDP".into()));
    }
    let mut a = DMatrix::<f64>::identity(n, n);
    let mut r = DVector::<f64>::zeros(n);
    for s in 0..n {
        for (act, &pa) in policy.probs[s].iter().enumerate() {
            if pa == 0.0 {
                continue;
            }
            r[s] += pa * mdp.reward(s, act);
            for (t, &p) in mdp.row(s, act).iter().enumerate() {
                a[(s, t)] -= mdp.gamma * pa * p;
            }
        }
    }
    let v = a
        .lu()
        .solve(&r)
        .ok_or_else(|| Error::Numeric("singular Bellman system".into()))?;
    let values: Vec<f64> = v.iter().copied().collect();
    let objective = values.iter().zip(&mdp.initial).map(|(v, p)| v * p).sum();
    Ok(Evaluation { values, objective })
}

/// Optimal deterministic policy by exact policy iteration.
pub fn optimal_policy(mdp: &TabularMdp) -> Result<(Vec<usize>, Evaluation)> {
    let (ns, na) = (mdp.n_states, mdp.n_actions);
    let mut actions = vec![0usize; ns];
    // A strict improvement margin prevents cycling between tied actions.
    const MARGIN: f64 = 1e-12;
    for _ in 0..10_000 {
        let eval = exact_value(mdp, &TabularPolicy::deterministic(&actions, na))?;
        let mut changed = false;
        for s in 0..ns {
            let q = |a: usize| -> f64 {
                mdp.reward(s, a)
                    + mdp.gamma
                        * mdp
                            .row(s, a)
                            .iter()
                            .zip(&eval.values)
                            .map(|(p, v)| p * v)
                            .sum::<f64>()
            };
            let current = q(actions[s]);
            let (best, best_q) =
                (0..na)
                    .map(|a| (a, q(a)))
                    .fold((actions[s], current), |acc, x| {
                        if x.1 > acc.1 + MARGIN {
                            x
                        } else {
                            acc
                        }
                    });
            if best != actions[s] && best_q > current + MARGIN {
                actions[s] = best;
                changed = true;
            }
        }
        if !changed {
            return Ok((actions, eval));
        }
    }
    Err(Error::Numeric("policy iteration did not converge".into()))
}

fn check_pair(m: &TabularMdp, mh: &TabularMdp) -> Result<()> {
    if m.n_states != mh.n_states
        || m.n_actions != mh.n_actions
        || m.gamma != mh.gamma
        || m.rewards != mh.rewards
    {
        return Err(Error::Invalid(
            "MDP pair must share states, actions, rewards and discount".into(),
        ));
    }
    Ok(())
}

/// `sum_{s,a} nu(s,a) TV(P_hat(.|s,a), P(.|s,a))`, with `nu` uniform when
/// absent. `nu` is row-major `[s][a]`.
pub fn discrepancy_eps(m: &TabularMdp, mh: &TabularMdp, nu: Option<&[f64]>) -> Result<f64> {
    check_pair(m, mh)?;
    let k = m.n_states * m.n_actions;
    let uniform = vec![1.0 / k as f64; k];
    let nu = nu.unwrap_or(&uniform);
    if nu.len() != k || (nu.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Invalid(
            "nu must be a distribution over state-action pairs".into(),
        ));
    }
    let mut eps = 0.0;
    for s in 0..m.n_states {
        for a in 0..m.n_actions {
            eps += nu[s * m.n_actions + a] * tv_distance(mh.row(s, a), m.row(s, a));
        }
    }
    Ok(eps)
}

/// Largest per-row TV distance.
pub fn sup_tv(m: &TabularMdp, mh: &TabularMdp) -> Result<f64> {
    check_pair(m, mh)?;
    let mut worst: f64 = 0.0;
    for s in 0..m.n_states {
        for a in 0..m.n_actions {
            worst = worst.max(tv_distance(mh.row(s, a), m.row(s, a)));
        }
    }
    Ok(worst)
}

/// `2 eps R_max / (1 - gamma)^2`.
pub fn gap_bound(eps: f64, r_max: f64, gamma: f64) -> f64 {
    2.0 * eps * r_max / (1.0 - gamma).powi(2)
}

/// `4 eps R_max / (1 - gamma)^2`.
pub fn regret_bound(eps: f64, r_max: f64, gamma: f64) -> f64 {
    4.0 * eps * r_max / (1.0 - gamma).powi(2)
}

/// Outcome of the gap and regret checks on one MDP pair.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct BoundReport {
    pub pair_id: usize,
    pub eps: f64,
    pub sup_tv: f64,
    /// Largest `|J_hat(pi) - J(pi)|` over the sampled policies.
    pub max_gap: f64,
    pub lemma_bound: f64,
    /// `J(pi*) - J(pi_hat*)` with both optimal policies computed exactly.
    pub regret: f64,
    pub theorem_bound: f64,
    pub violations: usize,
}

/// Check the performance-gap bound for `num_policies` random stationary
/// policies, each against the pair's own discrepancy.
pub fn lemma1_check(
    m: &TabularMdp,
    mh: &TabularMdp,
    num_policies: usize,
    rng: &mut Rng,
) -> Result<BoundReport> {
    let eps = discrepancy_eps(m, mh, None)?;
    let bound = gap_bound(eps, m.r_max, m.gamma);
    let mut report = BoundReport {
        eps,
        sup_tv: sup_tv(m, mh)?,
        lemma_bound: bound,
        ..BoundReport::default()
    };
    for _ in 0..num_policies {
        let pi = TabularPolicy::random(m.n_states, m.n_actions, rng);
        let gap = (exact_value(mh, &pi)?.objective - exact_value(m, &pi)?.objective).abs();
        report.max_gap = report.max_gap.max(gap);
        if gap > bound {
            report.violations += 1;
        }
    }
    Ok(report)
}

/// Regret of planning in the surrogate: `J_M(pi_M) - J_M(pi_Mhat)`.
pub fn pair_regret(m: &TabularMdp, mh: &TabularMdp) -> Result<f64> {
    check_pair(m, mh)?;
    let (_, best) = optimal_policy(m)?;
    let (hat_actions, _) = optimal_policy(mh)?;
    let planned = exact_value(m, &TabularPolicy::deterministic(&hat_actions, m.n_actions))?;
    Ok(best.objective - planned.objective)
}

/// Summary of the regret bound over a sample of pairs.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TheoremReport {
    pub pairs: usize,
    /// Pairs whose regret exceeds the bound with their own discrepancy.
    pub per_pair_violations: usize,
    pub mean_regret: f64,
    pub mean_eps: f64,
    /// Regret bound evaluated at the mean discrepancy.
    pub averaged_bound: f64,
    /// Whether the mean regret exceeds the averaged bound.
    pub averaged_violation: bool,
    pub reports: Vec<BoundReport>,
}

/// Check the regret bound per pair and in expectation over the sample.
pub fn theorem1_check(pairs: &[(TabularMdp, TabularMdp)]) -> Result<TheoremReport> {
    let mut out = TheoremReport {
        pairs: pairs.len(),
        ..TheoremReport::default()
    };
    if pairs.is_empty() {
        return Ok(out);
    }
    let (r_max, gamma) = (pairs[0].0.r_max, pairs[0].0.gamma);
    for (i, (m, mh)) in pairs.iter().enumerate() {
        if m.r_max != r_max || m.gamma != gamma {
            return Err(Error::Invalid(
                "pairs in one sample must share R_max and discount".into(),
            ));
        }
        let eps = discrepancy_eps(m, mh, None)?;
        let regret = pair_regret(m, mh)?;
        let bound = regret_bound(eps, r_max, gamma);
        let violated = regret > bound;
        out.per_pair_violations += usize::from(violated);
        out.mean_regret += regret;
        out.mean_eps += eps;
        out.reports.push(BoundReport {
            pair_id: i,
            eps,
            sup_tv: sup_tv(m, mh)?,
            regret,
            theorem_bound: bound,
            lemma_bound: gap_bound(eps, r_max, gamma),
            violations: usize::from(violated),
            ..BoundReport::default()
        });
    }
    let n = pairs.len() as f64;
    out.mean_regret /= n;
    out.mean_eps /= n;
    out.averaged_bound = regret_bound(out.mean_eps, r_max, gamma);
    out.averaged_violation = out.mean_regret > out.averaged_bound;
    Ok(out)
}

/// Sampling ranges for randomized bound sweeps.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SweepSizes {
    pub max_states: usize,
    pub max_actions: usize,
    pub gamma: f64,
}

impl Default for SweepSizes {
    fn default() -> Self {
        Self {
            max_states: 5,
            max_actions: 3,
            gamma: 0.9,
        }
    }
}

/// One random pair with sizes and perturbation drawn uniformly.
pub fn sample_pair(sizes: &SweepSizes, rng: &mut Rng) -> Result<(TabularMdp, TabularMdp)> {
    let ns = rng.random_range(1..=sizes.max_states);
    let na = rng.random_range(1..=sizes.max_actions);
    let c = rng.random_range(0.0..=1.0);
    make_random_tabular_pair((ns, na), c, sizes.gamma, rng)
}

/// Full sweep: the gap bound on `pairs` random pairs with `policies` random
/// policies each, then the regret bound on the same pairs. One report per
/// pair.
pub fn bound_sweep(
    pairs: usize,
    policies: usize,
    sizes: &SweepSizes,
    rng: &mut Rng,
) -> Result<Vec<BoundReport>> {
    let mut out = Vec::with_capacity(pairs);
    for id in 0..pairs {
        let (m, mh) = sample_pair(sizes, rng)?;
        let mut r = lemma1_check(&m, &mh, policies, rng)?;
        r.pair_id = id;
        r.regret = pair_regret(&m, &mh)?;
        r.theorem_bound = regret_bound(r.eps, m.r_max, m.gamma);
        r.violations += usize::from(r.regret > r.theorem_bound);
        out.push(r);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::tabular::random_mdp;
    use crate::rng::SeedStream;

    fn single_state(reward: f64, gamma: f64) -> TabularMdp {
        TabularMdp {
            n_states: 1,
            n_actions: 1,
            transitions: vec![1.0],
            rewards: vec![reward],
            r_max: 1.0,
            gamma,
            initial: vec![1.0],
        }
    }

    #[test]
    fn geometric_series() {
        let e = exact_value(
            &single_state(1.0, 0.9),
            &TabularPolicy::deterministic(&[0], 1),
        )
        .unwrap();
        assert!((e.values[0] - 10.0).abs() < 1e-12);
        assert!((e.objective - 10.0).abs() < 1e-12);
    }

    #[test]
    fn zero_rewards_give_zero_values() {
        let mut rng = SeedStream::new(4).rng("mdp");
        let mut m = random_mdp(4, 2, 0.9, 1.0, &mut rng).unwrap();
        m.rewards.fill(0.0);
        let pi = TabularPolicy::random(4, 2, &mut rng);
        assert!(exact_value(&m, &pi)
            .unwrap()
            .values
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn bound_arithmetic() {
        assert!((gap_bound(0.05, 1.0, 0.9) - 10.0).abs() < 1e-12);
        assert!((regret_bound(0.05, 1.0, 0.9) - 20.0).abs() < 1e-12);
    }

    #[test]
    fn identical_pair_has_no_gap_or_regret() {
        let mut rng = SeedStream::new(5).rng("mdp");
        let (m, mh) = make_random_tabular_pair((5, 3), 0.0, 0.9, &mut rng).unwrap();
        assert_eq!(discrepancy_eps(&m, &mh, None).unwrap(), 0.0);
        let r = lemma1_check(&m, &mh, 100, &mut rng).unwrap();
        assert_eq!((r.max_gap, r.lemma_bound, r.violations), (0.0, 0.0, 0));
        assert_eq!(pair_regret(&m, &mh).unwrap(), 0.0);
    }

    #[test]
    fn mismatched_pair_is_rejected() {
        let mut rng = SeedStream::new(6).rng("mdp");
        let a = random_mdp(3, 2, 0.9, 1.0, &mut rng).unwrap();
        let b = random_mdp(3, 2, 0.9, 1.0, &mut rng).unwrap();
        assert!(discrepancy_eps(&a, &b, None).is_err());
    }
}
