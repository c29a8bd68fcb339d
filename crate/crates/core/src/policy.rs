//! Latent-conditioned policies, critics, and their optimization inside a
//! learned model: backpropagation through time for continuous control and a
//! clipped-surrogate actor-critic for discrete control.

use std::fmt;
use std::str::FromStr;

use gssm_autodiff::{
    adam_step, clip_global_norm, AdamConfig, AdamState, Bound, Matrix, ParamSet, Reduce, Tape, Var,
};
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::dist::softplus_log_var_value;
use crate::dynamics::WorldModel;
use crate::envs::{acrobot, cartpole, Action, CartPole, EnvId, State, STATE_DIM};
use crate::error::{Error, Result};
use crate::nn::{randn, Activation, Mlp};
use crate::rng::Rng;

/// Whether the latent task variable feeds the actor and critic.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyMode {
    Amortized,
    Ablation,
}

impl PolicyMode {
    pub fn as_str(self) -> &'static str {
        match self {
            PolicyMode::Amortized => "amortized",
            PolicyMode::Ablation => "ablation",
        }
    }

    pub fn uses_latent(self) -> bool {
        self == PolicyMode::Amortized
    }
}

impl fmt::Display for PolicyMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PolicyMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "amortized" => Ok(PolicyMode::Amortized),
            "ablation" => Ok(PolicyMode::Ablation),
            other => Err(Error::Config(format!("unknown policy mode {other:?}"))),
        }
    }
}

/// Actor and critic input: the state, followed by `z` in amortized mode.
fn features(tape: &mut Tape, mode: PolicyMode, states: Var, z: Var) -> Result<Var> {
    if !mode.uses_latent() {
        return Ok(states);
    }
    let z = if z.rows() == states.rows() {
        z
    } else {
        tape.broadcast_to(z, (states.rows(), z.cols()))?
    };
    Ok(tape.concat_cols(&[states, z])?)
}

fn feature_rows(mode: PolicyMode, states: &Matrix, z: &Matrix) -> Matrix {
    if !mode.uses_latent() {
        return states.clone();
    }
    let n = states.nrows();
    let mut out = Matrix::zeros((n, states.ncols() + z.ncols()));
    for i in 0..n {
        let zi = if z.nrows() == n { i } else { 0 };
        for j in 0..states.ncols() {
            out[[i, j]] = states[[i, j]];
        }
        for j in 0..z.ncols() {
            out[[i, states.ncols() + j]] = z[[zi, j]];
        }
    }
    out
}

fn state_row(s: &State) -> Matrix {
    Matrix::from_shape_vec((1, STATE_DIM), s.to_vec()).expect("row shape")
}

fn latent_row(z: &[f64]) -> Matrix {
    Matrix::from_shape_vec((1, z.len()), z.to_vec()).expect("row shape")
}

/// `pi(a | s, z)`, or `pi(a | s)` in ablation mode.
///
/// Cart-pole uses a deterministic force `10 tanh(out)`. Acrobot samples one
/// of three torques from a softmax.
#[derive(Clone, Debug, PartialEq)]
pub struct Policy {
    pub env: EnvId,
    pub mode: PolicyMode,
    pub dim_lat: usize,
    pub params: ParamSet,
    pub actor: Mlp,
}

impl Policy {
    pub fn new(
        env: EnvId,
        mode: PolicyMode,
        dim_lat: usize,
        hidden: usize,
        layers: usize,
        rng: &mut Rng,
    ) -> Self {
        let mut params = ParamSet::new();
        let mut widths = vec![input_width(mode, dim_lat)];
        widths.extend(std::iter::repeat_n(hidden, layers.max(1)));
        widths.push(match env {
            EnvId::Cartpole => 1,
            EnvId::Acrobot => acrobot::TORQUES.len(),
        });
        let actor = Mlp::new(
            &mut params,
            "pi",
            &widths,
            Activation::Relu,
            Activation::Identity,
            rng,
        );
        Self {
            env,
            mode,
            dim_lat,
            params,
            actor,
        }
    }

    pub fn input_width(&self) -> usize {
        self.actor.input_dim()
    }

    /// Forces (`B x 1`) or action log-probabilities (`B x 3`) on the tape.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, states: Var, z: Var) -> Result<Var> {
        let f = features(tape, self.mode, states, z)?;
        let out = self.actor.forward(tape, bound, f)?;
        Ok(match self.env {
            EnvId::Cartpole => {
                let t = tape.tanh(out);
                tape.scale(t, cartpole::MAX_FORCE)
            }
            EnvId::Acrobot => tape.log_softmax_rows(out),
        })
    }

    /// Value-only counterpart of [`Policy::forward`].
    pub fn infer(&self, states: &Matrix, z: &Matrix) -> Result<Matrix> {
        let out = self
            .actor
            .infer(&self.params, &feature_rows(self.mode, states, z));
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite policy output".into()));
        }
        Ok(match self.env {
            EnvId::Cartpole => out.mapv(|v| cartpole::MAX_FORCE * v.tanh()),
            EnvId::Acrobot => log_softmax(&out),
        })
    }

    /// One action and its log-probability. Cart-pole actions are
    /// deterministic and report a log-probability of zero. Acrobot draws
    /// exactly one uniform number per call in either mode.
    pub fn act(&self, state: &State, z: &[f64], rng: &mut Rng) -> Result<(Action, f64)> {
        let out = self.infer(&state_row(state), &latent_row(z))?;
        match self.env {
            EnvId::Cartpole => Ok((Action::Force(out[[0, 0]]), 0.0)),
            EnvId::Acrobot => {
                let u: f64 = rng.random();
                let i = sample_categorical(out.row(0).iter().map(|l| l.exp()), u);
                Ok((Action::Torque(i), out[[0, i]]))
            }
        }
    }
}

fn input_width(mode: PolicyMode, dim_lat: usize) -> usize {
    STATE_DIM + if mode.uses_latent() { dim_lat } else { 0 }
}

/// Index drawn by inverting the cumulative distribution at `u`.
fn sample_categorical(probs: impl Iterator<Item = f64>, u: f64) -> usize {
    let mut acc = 0.0;
    let mut last = 0;
    for (i, p) in probs.enumerate() {
        acc += p;
        last = i;
        if u < acc {
            return i;
        }
    }
    last
}

/// Row-wise log-softmax of a value matrix.
pub fn log_softmax(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

/// State-value critic `V(s, z)`, or `V(s)` in ablation mode.
#[derive(Clone, Debug, PartialEq)]
pub struct ValueFn {
    pub mode: PolicyMode,
    pub params: ParamSet,
    pub net: Mlp,
}

impl ValueFn {
    pub fn new(
        mode: PolicyMode,
        dim_lat: usize,
        hidden: usize,
        layers: usize,
        rng: &mut Rng,
    ) -> Self {
        let mut params = ParamSet::new();
        let mut widths = vec![input_width(mode, dim_lat)];
        widths.extend(std::iter::repeat_n(hidden, layers.max(1)));
        widths.push(1);
        let net = Mlp::new(
            &mut params,
            "v",
            &widths,
            Activation::Relu,
            Activation::Identity,
            rng,
        );
        Self { mode, params, net }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, states: Var, z: Var) -> Result<Var> {
        let f = features(tape, self.mode, states, z)?;
        self.net.forward(tape, bound, f)
    }

    pub fn infer(&self, states: &Matrix, z: &Matrix) -> Matrix {
        self.net
            .infer(&self.params, &feature_rows(self.mode, states, z))
    }
}

/// A differentiable transition model used for policy search.
pub trait RolloutModel {
    /// Bind the model's weights as frozen tape inputs.
    fn bind(&self, tape: &mut Tape) -> Bound;

    /// Next states (`B x 4`) from states (`B x 4`), actions (`B x 1`) and
    /// latents (`B x L` or a shared row). `noise`, when given, is a
    /// standard-normal `B x 4` draw for a stochastic transition.
    fn step(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        s: Var,
        a: Var,
        z: Var,
        noise: Option<Var>,
    ) -> Result<Var>;
}

/// A trained [`WorldModel`] viewed as a transition model in raw state units.
#[derive(Clone, Copy, Debug)]
pub struct LearnedModel<'a> {
    pub model: &'a WorldModel,
    pub env: EnvId,
}

impl<'a> LearnedModel<'a> {
    pub fn new(model: &'a WorldModel, env: EnvId) -> Self {
        Self { model, env }
    }

    /// Value-only next states. `noise` is a standard-normal `B x 4` draw or
    /// `None` for the mean transition.
    pub fn next_values(
        &self,
        s: &Matrix,
        a: &Matrix,
        z: &Matrix,
        noise: Option<&Matrix>,
    ) -> Result<Matrix> {
        let norm = &self.model.norm;
        let n = s.nrows();
        let mut x = Matrix::zeros((n, STATE_DIM + 1));
        x.slice_mut(ndarray::s![.., ..STATE_DIM]).assign(s);
        x.slice_mut(ndarray::s![.., STATE_DIM..]).assign(a);
        let xn = norm.x.apply(&x);
        let mut xz = Matrix::zeros((n, xn.ncols() + z.ncols()));
        for i in 0..n {
            let zi = if z.nrows() == n { i } else { 0 };
            for j in 0..xn.ncols() {
                xz[[i, j]] = xn[[i, j]];
            }
            for j in 0..z.ncols() {
                xz[[i, xn.ncols() + j]] = z[[zi, j]];
            }
        }
        let out = self.model.decoder.mlp.infer(&self.model.params, &xz);
        let d = out.ncols() / 2;
        let mut y = out.slice(ndarray::s![.., ..d]).to_owned();
        if let Some(eps) = noise {
            for ((v, raw), e) in y
                .iter_mut()
                .zip(out.slice(ndarray::s![.., d..]).iter())
                .zip(eps.iter())
            {
                *v += (0.5 * softplus_log_var_value(*raw)).exp() * e;
            }
        }
        let y = norm.y.invert(&y);
        let next = if self.env.predicts_delta() { s + &y } else { y };
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite model rollout state".into()));
        }
        Ok(next)
    }
}

impl RolloutModel for LearnedModel<'_> {
    fn bind(&self, tape: &mut Tape) -> Bound {
        self.model.params.bind_frozen(tape)
    }

    fn step(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        s: Var,
        a: Var,
        z: Var,
        noise: Option<Var>,
    ) -> Result<Var> {
        let norm = &self.model.norm;
        let x = tape.concat_cols(&[s, a])?;
        let mx = tape.input(norm.x.mean_row());
        let sx = tape.input(norm.x.std_row().mapv(|v| 1.0 / v));
        let xc = tape.sub(x, mx)?;
        let xn = tape.mul(xc, sx)?;
        let out = self.model.decoder.decode(tape, bound, xn, z)?;
        let mut y = out.mean;
        if let Some(eps) = noise {
            let half = tape.scale(out.log_var, 0.5);
            let std = tape.exp(half);
            let jitter = tape.mul(std, eps)?;
            y = tape.add(y, jitter)?;
        }
        let sy = tape.input(norm.y.std_row());
        let my = tape.input(norm.y.mean_row());
        let y = tape.mul(y, sy)?;
        let y = tape.add(y, my)?;
        Ok(if self.env.predicts_delta() {
            tape.add(s, y)?
        } else {
            y
        })
    }
}

/// Known cart-pole physics on the tape, integrated with RK4 substeps. Used
/// as a reference model for policy-search tests and diagnostics.
#[derive(Clone, Copy, Debug)]
pub struct CartPolePhysics {
    pub system: CartPole,
    pub substeps: usize,
}

impl CartPolePhysics {
    pub fn new(system: CartPole) -> Self {
        Self {
            system,
            substeps: system.consts.substeps,
        }
    }

    fn derivative(&self, tape: &mut Tape, s: Var, force: Var) -> Result<Var> {
        let c = &self.system.consts;
        let (big_m, m, l, g, b) = (
            self.system.cart_mass,
            self.system.pole_mass,
            c.pole_length,
            c.gravity,
            c.friction,
        );
        let th = tape.slice_cols(s, 1, 2)?;
        let xd = tape.slice_cols(s, 2, 3)?;
        let thd = tape.slice_cols(s, 3, 4)?;
        let sin = tape.sin(th);
        let cos = tape.cos(th);
        let cos2 = tape.square(cos);
        let denom = tape.scale(cos2, -3.0 * m);
        let denom = tape.offset(denom, 4.0 * (big_m + m));
        let thd2 = tape.square(thd);
        let thd2_sin = tape.mul(thd2, sin)?;
        let sin_cos = tape.mul(sin, cos)?;
        let fric = tape.scale(xd, -b);
        let drive = tape.add(force, fric)?;
        // x'' numerator: 2 m l thd^2 sin + 3 m g sin cos + 4 (F - b xd)
        let a1 = tape.scale(thd2_sin, 2.0 * m * l);
        let a2 = tape.scale(sin_cos, 3.0 * m * g);
        let a3 = tape.scale(drive, 4.0);
        let xdd = tape.add(a1, a2)?;
        let xdd = tape.add(xdd, a3)?;
        let xdd = tape.div(xdd, denom)?;
        // theta'' numerator: -3 m l thd^2 sin cos - 6 (M + m) g sin - 6 (F - b xd) cos
        let thd2_sc = tape.mul(thd2_sin, cos)?;
        let b1 = tape.scale(thd2_sc, -3.0 * m * l);
        let b2 = tape.scale(sin, -6.0 * (big_m + m) * g);
        let drive_cos = tape.mul(drive, cos)?;
        let b3 = tape.scale(drive_cos, -6.0);
        let thdd = tape.add(b1, b2)?;
        let thdd = tape.add(thdd, b3)?;
        let ldenom = tape.scale(denom, l);
        let thdd = tape.div(thdd, ldenom)?;
        Ok(tape.concat_cols(&[xd, thd, xdd, thdd])?)
    }
}

impl RolloutModel for CartPolePhysics {
    fn bind(&self, _tape: &mut Tape) -> Bound {
        Bound::from_vars(Vec::new())
    }

    fn step(
        &self,
        tape: &mut Tape,
        _bound: &Bound,
        s: Var,
        a: Var,
        _z: Var,
        _noise: Option<Var>,
    ) -> Result<Var> {
        let f = tape.clamp(a, -cartpole::MAX_FORCE, cartpole::MAX_FORCE);
        let h = self.system.consts.dt / self.substeps as f64;
        let mut x = s;
        for _ in 0..self.substeps {
            let k1 = self.derivative(tape, x, f)?;
            let d = tape.scale(k1, h / 2.0);
            let x2 = tape.add(x, d)?;
            let k2 = self.derivative(tape, x2, f)?;
            let d = tape.scale(k2, h / 2.0);
            let x3 = tape.add(x, d)?;
            let k3 = self.derivative(tape, x3, f)?;
            let d = tape.scale(k3, h);
            let x4 = tape.add(x, d)?;
            let k4 = self.derivative(tape, x4, f)?;
            let k23 = tape.add(k2, k3)?;
            let k23 = tape.scale(k23, 2.0);
            let sum = tape.add(k1, k23)?;
            let sum = tape.add(sum, k4)?;
            let d = tape.scale(sum, h / 6.0);
            x = tape.add(x, d)?;
        }
        Ok(x)
    }
}

/// Cart-pole reward of each row of `states`, `B x 1`, on the tape.
pub fn cartpole_reward(tape: &mut Tape, states: Var) -> Result<Var> {
    cartpole_reward_with_width(tape, states, cartpole::REWARD_WIDTH)
}

/// [`cartpole_reward`] with a different length scale.
pub fn cartpole_reward_with_width(tape: &mut Tape, states: Var, width: f64) -> Result<Var> {
    let l = cartpole::CartPoleConsts::default().pole_length;
    let x = tape.slice_cols(states, 0, 1)?;
    let th = tape.slice_cols(states, 1, 2)?;
    let sin = tape.sin(th);
    let cos = tape.cos(th);
    let tx = tape.scale(sin, l);
    let dx = tape.add(x, tx)?;
    let dy = tape.scale(cos, -l);
    let dy = tape.offset(dy, -l);
    let dx2 = tape.square(dx);
    let dy2 = tape.square(dy);
    let d2 = tape.add(dx2, dy2)?;
    let e = tape.scale(d2, -1.0 / (width * width));
    let e = tape.exp(e);
    Ok(tape.offset(e, -1.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BpttConfig {
    pub horizon: usize,
    pub gamma: f64,
    /// Sample transitions with decoder noise rather than the mean.
    pub stochastic: bool,
    /// Global gradient-norm cap.
    pub clip: f64,
}

impl Default for BpttConfig {
    fn default() -> Self {
        Self {
            horizon: cartpole::HORIZON,
            gamma: 0.95,
            stochastic: true,
            clip: 10.0,
        }
    }
}

/// Per-step reward of a batch of states, `B x 1`, on the tape.
pub type TapeReward<'a> = &'a dyn Fn(&mut Tape, Var) -> Result<Var>;

/// `J = mean_k sum_t gamma^t r(s_{t+1})` over `B` model rollouts started
/// from the rows of `starts`, each with its own fixed latent row of `z`.
///
/// `noise[t]` is the standard-normal draw for step `t` when the rollout is
/// stochastic.
#[allow(clippy::too_many_arguments)]
pub fn bptt_objective<M: RolloutModel + ?Sized>(
    tape: &mut Tape,
    policy: &Policy,
    policy_bound: &Bound,
    model: &M,
    model_bound: &Bound,
    starts: &Matrix,
    z: &Matrix,
    noise: Option<&[Matrix]>,
    cfg: &BpttConfig,
    reward: TapeReward<'_>,
) -> Result<Var> {
    let zv = tape.input(z.clone());
    let mut s = tape.input(starts.clone());
    let mut total: Option<Var> = None;
    let mut weight = 1.0;
    for t in 0..cfg.horizon {
        let a = policy.forward(tape, policy_bound, s, zv)?;
        let eps = noise.map(|n| tape.input(n[t].clone()));
        s = model.step(tape, model_bound, s, a, zv, eps)?;
        let r = reward(tape, s)?;
        let r = tape.scale(r, weight);
        total = Some(match total {
            Some(acc) => tape.add(acc, r)?,
            None => r,
        });
        weight *= cfg.gamma;
    }
    assert_eq!(tape.value(zv), z, "latent changed inside a rollout");
    match total {
        Some(sum) => Ok(tape.mean(sum)),
        None => Ok(tape.constant(0.0)),
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PolicyStepReport {
    /// Objective before the update.
    pub objective: f64,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
    pub skipped: bool,
}

/// One gradient-ascent step on [`bptt_objective`]. A non-finite objective or
/// gradient skips the step.
#[allow(clippy::too_many_arguments)]
pub fn bptt_update<M: RolloutModel + ?Sized>(
    policy: &mut Policy,
    opt: &mut AdamState,
    adam: &AdamConfig,
    model: &M,
    starts: &Matrix,
    z: &Matrix,
    cfg: &BpttConfig,
    reward: TapeReward<'_>,
    rng: &mut Rng,
) -> Result<PolicyStepReport> {
    let noise: Option<Vec<Matrix>> = cfg.stochastic.then(|| {
        (0..cfg.horizon)
            .map(|_| randn(starts.nrows(), STATE_DIM, rng))
            .collect()
    });
    let mut tape = Tape::new();
    let pb = policy.params.bind(&mut tape);
    let mb = model.bind(&mut tape);
    let j = bptt_objective(
        &mut tape,
        policy,
        &pb,
        model,
        &mb,
        starts,
        z,
        noise.as_deref(),
        cfg,
        reward,
    )?;
    let objective = tape.scalar(j);
    let loss = tape.neg(j);
    let mut grads = pb.grads(&tape.backward(loss)?);
    let finite = objective.is_finite() && grads.iter().all(|g| g.iter().all(|v| v.is_finite()));
    if !finite {
        return Ok(PolicyStepReport {
            objective,
            grad_norm: f64::NAN,
            skipped: true,
        });
    }
    let grad_norm = clip_global_norm(&mut grads, cfg.clip);
    adam_step(&mut policy.params, &grads, opt, adam);
    Ok(PolicyStepReport {
        objective,
        grad_norm,
        skipped: false,
    })
}

/// One model-rollout trajectory for the actor-critic learner. `values` holds
/// one more entry than `rewards`: the bootstrap value of the final state, or
/// zero after termination.
#[derive(Clone, Debug, PartialEq)]
pub struct RolloutTrajectory {
    pub z: Vec<f64>,
    pub states: Vec<State>,
    pub actions: Vec<usize>,
    pub log_probs: Vec<f64>,
    pub rewards: Vec<f64>,
    pub values: Vec<f64>,
    pub dones: Vec<bool>,
}

impl RolloutTrajectory {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RolloutBatch {
    pub trajectories: Vec<RolloutTrajectory>,
    pub gamma: f64,
}

impl RolloutBatch {
    pub fn len(&self) -> usize {
        self.trajectories.iter().map(RolloutTrajectory::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Generalized advantage estimates and value targets for one trajectory.
pub fn gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    gamma: f64,
    lambda: f64,
) -> (Vec<f64>, Vec<f64>) {
    assert_eq!(
        values.len(),
        rewards.len() + 1,
        "values need a bootstrap entry"
    );
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut running = 0.0;
    for t in (0..n).rev() {
        let live = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * values[t + 1] * live - values[t];
        running = delta + gamma * lambda * live * running;
        adv[t] = running;
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, returns)
}

/// Advantages and value targets for every step of the batch, flattened in
/// trajectory order. Advantages are normalized to zero mean and unit
/// standard deviation when there is more than one sample.
pub fn gae_advantages(batch: &RolloutBatch, lambda: f64) -> (Vec<f64>, Vec<f64>) {
    let mut adv = Vec::with_capacity(batch.len());
    let mut ret = Vec::with_capacity(batch.len());
    for tr in &batch.trajectories {
        let (a, r) = gae(&tr.rewards, &tr.values, &tr.dones, batch.gamma, lambda);
        adv.extend(a);
        ret.extend(r);
    }
    normalize(&mut adv);
    (adv, ret)
}

fn normalize(v: &mut [f64]) {
    if v.len() < 2 {
        return;
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let std = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
    for x in v.iter_mut() {
        *x = (*x - mean) / (std + 1e-8);
    }
}

/// Mean of `min(r A, clip(r, 1-eps, 1+eps) A)` with `r = exp(lp - lp_old)`.
pub fn clipped_surrogate(
    tape: &mut Tape,
    log_prob: Var,
    old_log_prob: &Matrix,
    advantages: &Matrix,
    eps: f64,
) -> Result<Var> {
    let old = tape.input(old_log_prob.clone());
    let adv = tape.input(advantages.clone());
    let diff = tape.sub(log_prob, old)?;
    let ratio = tape.exp(diff);
    let s1 = tape.mul(ratio, adv)?;
    let clipped = tape.clamp(ratio, 1.0 - eps, 1.0 + eps);
    let s2 = tape.mul(clipped, adv)?;
    let m = tape.minimum(s1, s2)?;
    Ok(tape.mean(m))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PpoConfig {
    pub clip: f64,
    pub epochs: usize,
    pub minibatch: usize,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub lambda: f64,
    pub gamma: f64,
    /// Model-rollout length from buffer start states.
    pub rollout_len: usize,
    /// Rollouts collected per update round.
    pub rollouts: usize,
    /// Global gradient-norm cap for the joint actor-critic loss.
    pub max_grad_norm: f64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            clip: 0.2,
            epochs: 10,
            minibatch: 64,
            entropy_coef: 0.01,
            value_coef: 0.5,
            lambda: 0.95,
            gamma: 0.99,
            rollout_len: 50,
            rollouts: 16,
            max_grad_norm: 0.5,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PpoReport {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub grad_norm: f64,
    pub updates: usize,
    /// Samples dropped for a non-finite probability ratio.
    pub dropped: usize,
}

/// Flattened per-sample view of a rollout batch.
struct Samples {
    states: Matrix,
    z: Matrix,
    actions: Vec<usize>,
    old_log_probs: Vec<f64>,
    advantages: Vec<f64>,
    returns: Vec<f64>,
}

fn flatten(batch: &RolloutBatch, lambda: f64) -> Samples {
    let (advantages, returns) = gae_advantages(batch, lambda);
    let n = batch.len();
    let dz = batch.trajectories.first().map_or(0, |t| t.z.len());
    let mut states = Matrix::zeros((n, STATE_DIM));
    let mut z = Matrix::zeros((n, dz));
    let mut actions = Vec::with_capacity(n);
    let mut old_log_probs = Vec::with_capacity(n);
    let mut i = 0;
    for tr in &batch.trajectories {
        for t in 0..tr.len() {
            for j in 0..STATE_DIM {
                states[[i, j]] = tr.states[t][j];
            }
            for j in 0..dz {
                z[[i, j]] = tr.z[j];
            }
            actions.push(tr.actions[t]);
            old_log_probs.push(tr.log_probs[t]);
            i += 1;
        }
    }
    Samples {
        states,
        z,
        actions,
        old_log_probs,
        advantages,
        returns,
    }
}

fn column(values: impl Iterator<Item = f64>) -> Matrix {
    let v: Vec<f64> = values.collect();
    Matrix::from_shape_vec((v.len(), 1), v).expect("column shape")
}

fn one_hot(actions: &[usize], n: usize) -> Matrix {
    let mut m = Matrix::zeros((actions.len(), n));
    for (i, &a) in actions.iter().enumerate() {
        m[[i, a]] = 1.0;
    }
    m
}

/// Clipped-surrogate actor-critic update over minibatch epochs.
///
/// The loss is `-surrogate + value_coef * mse - entropy_coef * entropy`.
/// Samples whose ratio under the current policy is non-finite are dropped
/// before the epochs start.
pub fn ppo_update(
    policy: &mut Policy,
    value: &mut ValueFn,
    opt: (&mut AdamState, &mut AdamState),
    adam: &AdamConfig,
    batch: &RolloutBatch,
    cfg: &PpoConfig,
    rng: &mut Rng,
) -> Result<PpoReport> {
    if policy.env != EnvId::Acrobot {
        return Err(Error::Invalid(
            "the actor-critic learner needs a discrete-action policy".into(),
        ));
    }
    let mut report = PpoReport::default();
    if batch.is_empty() {
        return Ok(report);
    }
    let s = flatten(batch, cfg.lambda);
    let n_actions = acrobot::TORQUES.len();
    let current = policy.infer(&s.states, &s.z)?;
    let keep: Vec<usize> = (0..s.actions.len())
        .filter(|&i| {
            (current[[i, s.actions[i]]] - s.old_log_probs[i])
                .exp()
                .is_finite()
        })
        .collect();
    report.dropped = s.actions.len() - keep.len();
    let mut order = keep;
    let (opt_pi, opt_v) = opt;
    let mut stats = (0.0, 0.0, 0.0, 0.0);
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        for chunk in order.chunks(cfg.minibatch.max(1)) {
            let rows = |m: &Matrix| m.select(ndarray::Axis(0), chunk);
            let mut tape = Tape::new();
            let pb = policy.params.bind(&mut tape);
            let vb = value.params.bind(&mut tape);
            let st = tape.input(rows(&s.states));
            let zv = tape.input(rows(&s.z));
            let logp_all = policy.forward(&mut tape, &pb, st, zv)?;
            let acts: Vec<usize> = chunk.iter().map(|&i| s.actions[i]).collect();
            let mask = tape.input(one_hot(&acts, n_actions));
            let picked = tape.mul(logp_all, mask)?;
            let logp = tape.sum_axis(picked, Reduce::Cols);
            let old = column(chunk.iter().map(|&i| s.old_log_probs[i]));
            let adv = column(chunk.iter().map(|&i| s.advantages[i]));
            let surr = clipped_surrogate(&mut tape, logp, &old, &adv, cfg.clip)?;
            let v = value.forward(&mut tape, &vb, st, zv)?;
            let target = tape.input(column(chunk.iter().map(|&i| s.returns[i])));
            let err = tape.sub(v, target)?;
            let err = tape.square(err);
            let vloss = tape.mean(err);
            let probs = tape.exp(logp_all);
            let plogp = tape.mul(probs, logp_all)?;
            let ent = tape.sum_axis(plogp, Reduce::Cols);
            let ent = tape.mean(ent);
            let ent = tape.neg(ent);
            let a = tape.neg(surr);
            let b = tape.scale(vloss, cfg.value_coef);
            let c = tape.scale(ent, -cfg.entropy_coef);
            let loss = tape.add(a, b)?;
            let loss = tape.add(loss, c)?;
            if !tape.scalar(loss).is_finite() {
                continue;
            }
            let g = tape.backward(loss)?;
            let mut gp = pb.grads(&g);
            let mut gv = vb.grads(&g);
            let mut all: Vec<Matrix> = gp.drain(..).chain(gv.drain(..)).collect();
            if all.iter().any(|m| m.iter().any(|v| !v.is_finite())) {
                continue;
            }
            let norm = clip_global_norm(&mut all, cfg.max_grad_norm);
            let gv: Vec<Matrix> = all.split_off(policy.params.len());
            adam_step(&mut policy.params, &all, opt_pi, adam);
            adam_step(&mut value.params, &gv, opt_v, adam);
            stats.0 += tape.scalar(a);
            stats.1 += tape.scalar(vloss);
            stats.2 += tape.scalar(ent);
            stats.3 += norm;
            report.updates += 1;
        }
    }
    if report.updates > 0 {
        let k = report.updates as f64;
        report.policy_loss = stats.0 / k;
        report.value_loss = stats.1 / k;
        report.entropy = stats.2 / k;
        report.grad_norm = stats.3 / k;
    }
    Ok(report)
}

/// Collect actor-critic rollouts inside a learned acrobot model. Each
/// rollout starts from one of `starts`, keeps its latent row fixed and stops
/// at `cfg.rollout_len` steps or at a predicted terminal state.
#[allow(clippy::too_many_arguments)]
pub fn collect_model_rollouts(
    model: &LearnedModel<'_>,
    policy: &Policy,
    value: &ValueFn,
    starts: &[State],
    latents: &[Vec<f64>],
    cfg: &PpoConfig,
    stochastic: bool,
    rng: &mut Rng,
) -> Result<RolloutBatch> {
    assert_eq!(starts.len(), latents.len(), "one latent per rollout");
    let b = starts.len();
    let dz = latents.first().map_or(0, Vec::len);
    let z = Matrix::from_shape_fn((b, dz), |(i, j)| latents[i][j]);
    let mut trajs: Vec<RolloutTrajectory> = latents
        .iter()
        .map(|zi| RolloutTrajectory {
            z: zi.clone(),
            states: Vec::new(),
            actions: Vec::new(),
            log_probs: Vec::new(),
            rewards: Vec::new(),
            values: Vec::new(),
            dones: Vec::new(),
        })
        .collect();
    let mut states = Matrix::from_shape_fn((b, STATE_DIM), |(i, j)| starts[i][j]);
    let mut live = vec![true; b];
    for _ in 0..cfg.rollout_len {
        if !live.iter().any(|&l| l) {
            break;
        }
        let logp = policy.infer(&states, &z)?;
        let v = value.infer(&states, &z);
        let mut actions = Matrix::zeros((b, 1));
        let mut chosen = vec![0usize; b];
        for i in 0..b {
            let u: f64 = rng.random();
            let a = sample_categorical(logp.row(i).iter().map(|l| l.exp()), u);
            chosen[i] = a;
            actions[[i, 0]] = acrobot::TORQUES[a];
        }
        let eps = stochastic.then(|| randn(b, STATE_DIM, rng));
        let next = model.next_values(&states, &actions, &z, eps.as_ref())?;
        for i in 0..b {
            if !live[i] {
                continue;
            }
            let s: State = std::array::from_fn(|j| states[[i, j]]);
            let ns: State = std::array::from_fn(|j| next[[i, j]]);
            let done = acrobot::is_terminal(&ns);
            let tr = &mut trajs[i];
            tr.states.push(s);
            tr.actions.push(chosen[i]);
            tr.log_probs.push(logp[[i, chosen[i]]]);
            tr.rewards.push(-1.0);
            tr.values.push(v[[i, 0]]);
            tr.dones.push(done);
            live[i] = !done;
        }
        states = next;
    }
    let last = value.infer(&states, &z);
    for (i, tr) in trajs.iter_mut().enumerate() {
        let terminal = tr.dones.last().copied().unwrap_or(false);
        tr.values.push(if terminal {
            0.0
        } else {
            last_value(&last, i, tr)
        });
    }
    Ok(RolloutBatch {
        trajectories: trajs,
        gamma: cfg.gamma,
    })
}

/// Bootstrap value of a trajectory cut by the rollout length.
fn last_value(last: &Matrix, i: usize, tr: &RolloutTrajectory) -> f64 {
    if tr.is_empty() {
        0.0
    } else {
        last[[i, 0]]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedStream;

    fn zero(policy: &mut Policy) {
        for p in policy.params.values_mut() {
            p.fill(0.0);
        }
    }

    #[test]
    fn zero_weights_give_zero_force_and_uniform_torques() {
        let mut rng = SeedStream::new(1).rng("init");
        let mut cp = Policy::new(EnvId::Cartpole, PolicyMode::Amortized, 3, 50, 1, &mut rng);
        zero(&mut cp);
        let (a, lp) = cp
            .act(&[0.1, 2.0, -1.0, 0.5], &[0.3, 0.1, -0.2], &mut rng)
            .unwrap();
        assert_eq!(a, Action::Force(0.0));
        assert_eq!(lp, 0.0);
        let mut ac = Policy::new(EnvId::Acrobot, PolicyMode::Amortized, 3, 128, 1, &mut rng);
        zero(&mut ac);
        let out = ac
            .infer(&Matrix::ones((1, 4)), &Matrix::ones((1, 3)))
            .unwrap();
        for v in out.iter() {
            assert!((v.exp() - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn input_width_follows_mode() {
        let mut rng = SeedStream::new(2).rng("init");
        let a = Policy::new(EnvId::Cartpole, PolicyMode::Amortized, 16, 50, 1, &mut rng);
        let b = Policy::new(EnvId::Cartpole, PolicyMode::Ablation, 16, 50, 1, &mut rng);
        assert_eq!(a.input_width(), 4 + 16);
        assert_eq!(b.input_width(), 4);
    }

    #[test]
    fn categorical_inversion_hits_every_bucket() {
        let p = [0.2, 0.5, 0.3];
        assert_eq!(sample_categorical(p.iter().copied(), 0.0), 0);
        assert_eq!(sample_categorical(p.iter().copied(), 0.19), 0);
        assert_eq!(sample_categorical(p.iter().copied(), 0.21), 1);
        assert_eq!(sample_categorical(p.iter().copied(), 0.71), 2);
        assert_eq!(sample_categorical(p.iter().copied(), 1.0), 2);
    }

    #[test]
    fn policy_mode_parses() {
        assert_eq!(
            "amortized".parse::<PolicyMode>().unwrap(),
            PolicyMode::Amortized
        );
        assert_eq!(
            "ablation".parse::<PolicyMode>().unwrap(),
            PolicyMode::Ablation
        );
        assert!("none".parse::<PolicyMode>().is_err());
    }
}
