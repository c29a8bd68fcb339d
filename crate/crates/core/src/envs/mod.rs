//! Task distributions over classic-control systems and small tabular MDPs.

pub mod acrobot;
pub mod cartpole;
pub mod dump;
pub mod tabular;

use std::fmt;
use std::str::FromStr;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

pub use acrobot::{Acrobot, AcrobotConsts};
pub use cartpole::{CartPole, CartPoleConsts};
pub use tabular::{make_random_tabular_pair, TabularMdp};

pub type State = [f64; 4];
pub const STATE_DIM: usize = 4;
pub const ACTION_DIM: usize = 1;

/// One classical fourth-order Runge-Kutta step.
pub fn rk4(s: &State, h: f64, f: impl Fn(&State) -> State) -> State {
    let add = |a: &State, b: &State, k: f64| -> State {
        [
            a[0] + k * b[0],
            a[1] + k * b[1],
            a[2] + k * b[2],
            a[3] + k * b[3],
        ]
    };
    let k1 = f(s);
    let k2 = f(&add(s, &k1, h / 2.0));
    let k3 = f(&add(s, &k2, h / 2.0));
    let k4 = f(&add(s, &k3, h));
    let mut out = *s;
    for i in 0..4 {
        out[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnvId {
    Cartpole,
    Acrobot,
}

impl EnvId {
    pub fn horizon(self) -> usize {
        match self {
            EnvId::Cartpole => cartpole::HORIZON,
            EnvId::Acrobot => acrobot::HORIZON,
        }
    }

    /// Whether the dynamics model predicts the state change rather than the
    /// next state.
    pub fn predicts_delta(self) -> bool {
        matches!(self, EnvId::Cartpole)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            EnvId::Cartpole => "cartpole",
            EnvId::Acrobot => "acrobot",
        }
    }

    /// Names of the two randomized parameters.
    pub fn param_names(self) -> [&'static str; 2] {
        match self {
            EnvId::Cartpole => ["cart_mass", "pole_mass"],
            EnvId::Acrobot => ["link1_mass", "link2_mass"],
        }
    }

    /// Sampling ranges of the two randomized parameters.
    pub fn param_ranges(self) -> [(f64, f64); 2] {
        match self {
            EnvId::Cartpole => [(1.0, 2.0), (0.7, 1.0)],
            EnvId::Acrobot => [(0.8, 1.2), (0.8, 1.2)],
        }
    }
}

impl fmt::Display for EnvId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EnvId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cartpole" => Ok(EnvId::Cartpole),
            "acrobot" => Ok(EnvId::Acrobot),
            other => Err(Error::UnknownEnv(other.to_string())),
        }
    }
}

/// One member of a task distribution.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub env: EnvId,
    /// Cart and pole mass, or the two link masses, in kg.
    pub masses: [f64; 2],
    /// Identifies the task; also tags every transition it produces.
    pub seed: u64,
}

pub fn sample_task(env: EnvId, rng: &mut Rng) -> TaskSpec {
    let [(a0, a1), (b0, b1)] = env.param_ranges();
    let m0 = rng.random_range(a0..=a1);
    let m1 = rng.random_range(b0..=b1);
    TaskSpec {
        env,
        masses: [m0, m1],
        seed: rng.random(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Action {
    /// Horizontal force on the cart in N.
    Force(f64),
    /// Index into `{-1, 0, +1}` torques.
    Torque(usize),
}

impl Action {
    /// Numeric action as seen by the dynamics model.
    pub fn value(self) -> f64 {
        match self {
            Action::Force(f) => f.clamp(-cartpole::MAX_FORCE, cartpole::MAX_FORCE),
            Action::Torque(i) => acrobot::TORQUES.get(i).copied().unwrap_or(f64::NAN),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Step {
    pub next: State,
    pub reward: f64,
    pub done: bool,
}

impl TaskSpec {
    pub fn horizon(&self) -> usize {
        self.env.horizon()
    }

    pub fn cartpole(&self) -> CartPole {
        CartPole::new(self.masses[0], self.masses[1])
    }

    pub fn acrobot(&self) -> Acrobot {
        Acrobot::new(self.masses[0], self.masses[1])
    }

    pub fn reset(&self, rng: &mut Rng) -> State {
        match self.env {
            EnvId::Cartpole => {
                let n = Normal::new(0.0, 0.01).expect("valid std");
                [n.sample(rng), n.sample(rng), n.sample(rng), n.sample(rng)]
            }
            EnvId::Acrobot => {
                let mut u = || rng.random_range(-0.1..=0.1);
                [u(), u(), u(), u()]
            }
        }
    }

    /// Advance the real system. Termination by horizon is left to the caller.
    pub fn step(&self, state: &State, action: Action) -> Result<Step> {
        let out = match (self.env, action) {
            (EnvId::Cartpole, Action::Force(f)) => {
                let cp = self.cartpole();
                let next = cp.step(state, f);
                Step {
                    next,
                    reward: cp.reward(&next),
                    done: false,
                }
            }
            (EnvId::Acrobot, Action::Torque(i)) => {
                let torque = *acrobot::TORQUES.get(i).ok_or(Error::InvalidAction(i))?;
                let next = self.acrobot().step(state, torque);
                Step {
                    next,
                    reward: -1.0,
                    done: acrobot::is_terminal(&next),
                }
            }
            (env, a) => {
                return Err(Error::Invalid(format!(
                    "action {a:?} does not apply to {env}"
                )))
            }
        };
        if out.next.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                step: 0,
                state: out.next.to_vec(),
            });
        }
        Ok(out)
    }

    /// Reward the environment assigns on arriving in `next`.
    pub fn reward(&self, next: &State) -> f64 {
        match self.env {
            EnvId::Cartpole => self.cartpole().reward(next),
            EnvId::Acrobot => -1.0,
        }
    }
}

/// Model input for a state-action pair.
pub fn model_input(state: &State, action: f64) -> [f64; STATE_DIM + ACTION_DIM] {
    [state[0], state[1], state[2], state[3], action]
}

/// Model target for a transition under the environment's convention.
pub fn model_target(env: EnvId, state: &State, next: &State) -> State {
    if env.predicts_delta() {
        [
            next[0] - state[0],
            next[1] - state[1],
            next[2] - state[2],
            next[3] - state[3],
        ]
    } else {
        *next
    }
}

/// Inverse of [`model_target`].
pub fn next_from_target(env: EnvId, state: &State, y: &State) -> State {
    if env.predicts_delta() {
        [
            state[0] + y[0],
            state[1] + y[1],
            state[2] + y[2],
            state[3] + y[3],
        ]
    } else {
        *y
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Transition {
    pub task: u64,
    pub state: State,
    pub action: Action,
    pub next: State,
    pub reward: f64,
    pub done: bool,
}

impl Transition {
    pub fn x(&self) -> [f64; STATE_DIM + ACTION_DIM] {
        model_input(&self.state, self.action.value())
    }

    pub fn y(&self, env: EnvId) -> State {
        model_target(env, &self.state, &self.next)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub task: TaskSpec,
    pub transitions: Vec<Transition>,
}

impl Trajectory {
    pub fn rewards(&self) -> Vec<f64> {
        self.transitions.iter().map(|t| t.reward).collect()
    }

    pub fn horizon(&self) -> usize {
        self.task.horizon()
    }

    /// Discounted return, optionally divided by the horizon.
    pub fn discounted_return(&self, gamma: f64, normalize: bool) -> f64 {
        episode_return(&self.rewards(), gamma, normalize.then_some(self.horizon()))
    }
}

/// `sum_t gamma^t r_t`, divided by `horizon` when one is given.
pub fn episode_return(rewards: &[f64], gamma: f64, horizon: Option<usize>) -> f64 {
    let mut total = 0.0;
    let mut weight = 1.0;
    for r in rewards {
        total += weight * r;
        weight *= gamma;
    }
    match horizon {
        Some(h) => total / h as f64,
        None => total,
    }
}

/// Roll out one episode on the real system.
///
/// Episodes end at the horizon or on termination. Every transition's reward
/// is checked against the environment's reward range.
pub fn run_episode(
    task: &TaskSpec,
    rng: &mut Rng,
    mut policy: impl FnMut(&State, &mut Rng) -> Result<Action>,
) -> Result<Trajectory> {
    let mut state = task.reset(rng);
    let mut transitions = Vec::with_capacity(task.horizon());
    for t in 0..task.horizon() {
        let action = policy(&state, rng)?;
        let step = task.step(&state, action).map_err(|e| match e {
            Error::NonFinite { state, .. } => Error::NonFinite { step: t, state },
            other => other,
        })?;
        check_reward(task.env, step.reward)?;
        transitions.push(Transition {
            task: task.seed,
            state,
            action,
            next: step.next,
            reward: step.reward,
            done: step.done,
        });
        state = step.next;
        if step.done {
            break;
        }
    }
    Ok(Trajectory {
        task: *task,
        transitions,
    })
}

fn check_reward(env: EnvId, r: f64) -> Result<()> {
    let ok = match env {
        // exp(-d^2/w^2) - 1 rounds to exactly -1 once the tip is far away.
        EnvId::Cartpole => (-1.0..=0.0).contains(&r),
        EnvId::Acrobot => r == -1.0,
    };
    if ok {
        Ok(())
    } else {
        Err(Error::Numeric(format!(
            "{env} reward {r} outside its range"
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedStream;

    #[test]
    fn sampled_masses_stay_in_range() {
        let mut rng = SeedStream::new(3).rng("tasks");
        for _ in 0..1000 {
            let c = sample_task(EnvId::Cartpole, &mut rng);
            assert!((1.0..=2.0).contains(&c.masses[0]));
            assert!((0.7..=1.0).contains(&c.masses[1]));
            let a = sample_task(EnvId::Acrobot, &mut rng);
            assert!(a.masses.iter().all(|m| (0.8..=1.2).contains(m)));
        }
    }

    #[test]
    fn sampling_is_deterministic() {
        let a = sample_task(EnvId::Acrobot, &mut SeedStream::new(11).rng("t"));
        let b = sample_task(EnvId::Acrobot, &mut SeedStream::new(11).rng("t"));
        assert_eq!(a, b);
    }

    #[test]
    fn unknown_env_is_rejected() {
        assert!(matches!(
            "pendulum".parse::<EnvId>(),
            Err(Error::UnknownEnv(_))
        ));
        assert_eq!("acrobot".parse::<EnvId>().unwrap(), EnvId::Acrobot);
    }

    #[test]
    fn returns_match_hand_sums() {
        assert_eq!(episode_return(&[0.0; 25], 0.9, Some(25)), 0.0);
        assert_eq!(episode_return(&[-1.0; 25], 1.0, Some(25)), -1.0);
        assert!((episode_return(&[1.0, 1.0, 1.0], 0.99, None) - 2.9701).abs() < 1e-12);
    }

    #[test]
    fn invalid_torque_index_is_rejected() {
        let task = TaskSpec {
            env: EnvId::Acrobot,
            masses: [1.0, 1.0],
            seed: 0,
        };
        assert!(matches!(
            task.step(&[0.0; 4], Action::Torque(3)),
            Err(Error::InvalidAction(3))
        ));
    }

    #[test]
    fn acrobot_hanging_step_costs_one() {
        let task = TaskSpec {
            env: EnvId::Acrobot,
            masses: [1.0, 1.0],
            seed: 0,
        };
        let step = task.step(&[0.0; 4], Action::Torque(1)).unwrap();
        assert_eq!(step.reward, -1.0);
        assert!(!step.done);
    }

    #[test]
    fn episodes_are_tagged_and_bounded() {
        let stream = SeedStream::new(5);
        let task = sample_task(EnvId::Cartpole, &mut stream.rng("task"));
        let mut rng = stream.rng("episode");
        let traj = run_episode(&task, &mut rng, |_, r| {
            Ok(Action::Force(r.random_range(-10.0..=10.0)))
        })
        .unwrap();
        assert_eq!(traj.transitions.len(), 25);
        assert!(traj.transitions.iter().all(|t| t.task == task.seed));
        for w in traj.transitions.windows(2) {
            assert_eq!(w[0].next, w[1].state);
        }
        let y = traj.transitions[0].y(EnvId::Cartpole);
        let back = next_from_target(EnvId::Cartpole, &traj.transitions[0].state, &y);
        for i in 0..4 {
            assert!((back[i] - traj.transitions[0].next[i]).abs() < 1e-15);
        }
    }
}
