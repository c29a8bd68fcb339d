//! Finite MDPs with state-action rewards.

use rand::Rng as _;
use rand_distr::{Distribution, Exp1};

use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct TabularMdp {
    pub n_states: usize,
    pub n_actions: usize,
    /// Row-major `[s][a][s']`.
    pub transitions: Vec<f64>,
    /// Row-major `[s][a]`, each in `[0, r_max]`.
    pub rewards: Vec<f64>,
    pub r_max: f64,
    pub gamma: f64,
    pub initial: Vec<f64>,
}

pub const ROW_TOLERANCE: f64 = 1e-12;

impl TabularMdp {
    pub fn row(&self, s: usize, a: usize) -> &[f64] {
        let n = self.n_states;
        let start = (s * self.n_actions + a) * n;
        &self.transitions[start..start + n]
    }

    pub fn row_mut(&mut self, s: usize, a: usize) -> &mut [f64] {
        let n = self.n_states;
        let start = (s * self.n_actions + a) * n;
        &mut self.transitions[start..start + n]
    }

    pub fn reward(&self, s: usize, a: usize) -> f64 {
        self.rewards[s * self.n_actions + a]
    }

    pub fn validate(&self) -> Result<()> {
        let (ns, na) = (self.n_states, self.n_actions);
        if ns == 0 || na == 0 {
            return Err(Error::Invalid(format!(
                "degenerate sizes |S|={ns}, |A|={na}"
            )));
        }
        if self.transitions.len() != ns * na * ns
            || self.rewards.len() != ns * na
            || self.initial.len() != ns
        {
            return Err(Error::Invalid("tensor lengths do not match sizes".into()));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::Invalid(format!(
                "discount {} outside [0, 1)",
                self.gamma
            )));
        }
        for s in 0..ns {
            for a in 0..na {
                let row = self.row(s, a);
                if row.iter().any(|&p| !(p >= 0.0))
                    || (row.iter().sum::<f64>() - 1.0).abs() > ROW_TOLERANCE
                {
                    return Err(Error::Invalid(format!(
                        "transition row ({s}, {a}) is not a distribution"
                    )));
                }
            }
        }
        if self
            .rewards
            .iter()
            .any(|&r| !(0.0..=self.r_max).contains(&r))
        {
            return Err(Error::Invalid("reward outside [0, r_max]".into()));
        }
        if (self.initial.iter().sum::<f64>() - 1.0).abs() > ROW_TOLERANCE {
            return Err(Error::Invalid(
                "initial distribution does not sum to 1".into(),
            ));
        }
        Ok(())
    }
}

/// A uniformly distributed point on the probability simplex.
pub fn random_simplex(n: usize, rng: &mut Rng) -> Vec<f64> {
    let mut v: Vec<f64> = (0..n).map(|_| Exp1.sample(rng)).collect();
    let total: f64 = v.iter().sum();
    for x in &mut v {
        *x /= total;
    }
    renormalize(&mut v);
    v
}

/// Push the rounding residual onto the largest entry so the row sums to one.
fn renormalize(row: &mut [f64]) {
    let residual = 1.0 - row.iter().sum::<f64>();
    let (imax, _) = row
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| {
            if v > bv {
                (i, v)
            } else {
                (bi, bv)
            }
        });
    row[imax] += residual;
}

pub fn random_mdp(
    n_states: usize,
    n_actions: usize,
    gamma: f64,
    r_max: f64,
    rng: &mut Rng,
) -> Result<TabularMdp> {
    if n_states < 1 || n_actions < 1 {
        return Err(Error::Invalid(format!(
            "degenerate sizes |S|={n_states}, |A|={n_actions}"
        )));
    }
    let mut transitions = Vec::with_capacity(n_states * n_actions * n_states);
    for _ in 0..n_states * n_actions {
        transitions.extend(random_simplex(n_states, rng));
    }
    let rewards = (0..n_states * n_actions)
        .map(|_| rng.random_range(0.0..=r_max))
        .collect();
    let mdp = TabularMdp {
        n_states,
        n_actions,
        transitions,
        rewards,
        r_max,
        gamma,
        initial: random_simplex(n_states, rng),
    };
    mdp.validate()?;
    Ok(mdp)
}

/// Mix every transition row of `base` toward `other` with weight `c`.
pub fn mix_transitions(base: &TabularMdp, other: &[f64], c: f64) -> Result<TabularMdp> {
    if !(0.0..=1.0).contains(&c) {
        return Err(Error::Invalid(format!("perturbation {c} outside [0, 1]")));
    }
    let mut out = base.clone();
    for (p, q) in out.transitions.iter_mut().zip(other) {
        *p = (1.0 - c) * *p + c * q;
    }
    for s in 0..out.n_states {
        for a in 0..out.n_actions {
            renormalize(out.row_mut(s, a));
        }
    }
    out.validate()?;
    Ok(out)
}

/// A random MDP and a copy whose transition rows are mixed toward fresh
/// random rows with coefficient `perturbation`. Rewards are shared.
pub fn make_random_tabular_pair(
    sizes: (usize, usize),
    perturbation: f64,
    gamma: f64,
    rng: &mut Rng,
) -> Result<(TabularMdp, TabularMdp)> {
    if !(0.0..=1.0).contains(&perturbation) {
        return Err(Error::Invalid(format!(
            "perturbation {perturbation} outside [0, 1]"
        )));
    }
    let base = random_mdp(sizes.0, sizes.1, gamma, 1.0, rng)?;
    let mut fresh = Vec::with_capacity(base.transitions.len());
    for _ in 0..sizes.0 * sizes.1 {
        fresh.extend(random_simplex(sizes.0, rng));
    }
    let perturbed = if perturbation == 0.0 {
        base.clone()
    } else {
        mix_transitions(&base, &fresh, perturbation)?
    };
    Ok((base, perturbed))
}

/// Total-variation distance between two distributions.
pub fn tv_distance(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}
