//! Context encoders producing diagonal-Gaussian task latents.
//!
//! The graph encoder treats the context set as a fully connected graph.
//! Edge weights are a row softmax of `beta` times the cosine similarity of
//! learned input features. Message passing uses `h' = relu(H W + S H W + b)`.
//! The prior `q(z_c)` pools `S H` by the mean over nodes. The target posterior
//! `q(z_*)` weights node embeddings by similarity to the target input.
//!
//! The mean-pool encoder is the neural-process baseline: a per-point MLP,
//! averaged, then mapped to a Gaussian.

use std::fmt;
use std::str::FromStr;

use gssm_autodiff::{Bound, Matrix, ParamId, ParamSet, Reduce, Tape, Var};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dist::{DiagGaussian, GaussianVars};
use crate::error::{Error, Result};
use crate::nn::{Activation, Linear, Mlp};
use crate::rng::Rng;

/// Guard added to feature norms before dividing.
pub const NORM_GUARD: f64 = 1e-12;
/// Logit offset that removes the self edge when self loops are disabled.
const NO_SELF_LOGIT: f64 = -1e30;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderKind {
    Gssm,
    MeanPool,
}

impl EncoderKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EncoderKind::Gssm => "gssm",
            EncoderKind::MeanPool => "mean-pool",
        }
    }
}

impl fmt::Display for EncoderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EncoderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gssm" => Ok(EncoderKind::Gssm),
            "mean-pool" => Ok(EncoderKind::MeanPool),
            other => Err(Error::Config(format!(
                "unknown encoder {other:?}; expected gssm or mean-pool"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EncoderDims {
    pub dim_x: usize,
    pub dim_y: usize,
    pub dim_latxy: usize,
    pub dim_lat: usize,
    pub layers: usize,
    /// Whether a node's softmax neighbourhood includes itself.
    pub self_loop: bool,
}

/// Transitions of one task in model units: `x` is `N x dim_x`, `y` is
/// `N x dim_y`.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextSet {
    pub x: Matrix,
    pub y: Matrix,
}

impl ContextSet {
    pub fn new(x: Matrix, y: Matrix) -> Result<Self> {
        if x.nrows() == 0 {
            return Err(Error::Invalid("empty context set".into()));
        }
        if x.nrows() != y.nrows() {
            return Err(Error::Invalid(format!(
                "context has {} inputs but {} targets",
                x.nrows(),
                y.nrows()
            )));
        }
        if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Invalid("non-finite context feature".into()));
        }
        Ok(Self { x, y })
    }

    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.nrows() == 0
    }

    pub fn permuted(&self, order: &[usize]) -> Self {
        Self {
            x: self.x.select(ndarray::Axis(0), order),
            y: self.y.select(ndarray::Axis(0), order),
        }
    }

    /// Record the context as tape inputs.
    pub fn bind(&self, tape: &mut Tape) -> (Var, Var) {
        (tape.input(self.x.clone()), tape.input(self.y.clone()))
    }
}

/// Cosine similarity with a guard on each norm.
pub fn similarity(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt() + NORM_GUARD;
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt() + NORM_GUARD;
    dot / (na * nb)
}

/// Row softmax of `beta * raw`.
pub fn normalize_weights(raw: &Matrix, beta: f64) -> Matrix {
    let mut out = raw.mapv(|s| beta * s);
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let total = row.sum();
        row.mapv_inplace(|v| v / total);
    }
    out
}

/// Node embeddings and the quantities derived along the way.
#[derive(Clone, Debug)]
pub struct Embedding {
    /// Unit-normalized transformed inputs, `N x dim_latxy`.
    pub t_hat: Var,
    /// Row-stochastic context weights, `N x N`.
    pub weights: Var,
    /// Final node embeddings, `N x dim_latxy`.
    pub h: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GraphEncoder {
    pub dims: EncoderDims,
    /// Feature transform `t(x)` used for similarities.
    pub t_net: Mlp,
    pub layers: Vec<Linear>,
    pub beta: ParamId,
    pub prior_head: Linear,
    pub posterior_head: Linear,
}

fn unit_rows(tape: &mut Tape, t: Var) -> Result<Var> {
    let sq = tape.square(t);
    let ss = tape.sum_axis(sq, Reduce::Cols);
    let norm = tape.sqrt(ss);
    let norm = tape.offset(norm, NORM_GUARD);
    Ok(tape.div(t, norm)?)
}

impl GraphEncoder {
    pub fn new(params: &mut ParamSet, name: &str, dims: EncoderDims, rng: &mut Rng) -> Self {
        let EncoderDims {
            dim_x,
            dim_y,
            dim_latxy,
            dim_lat,
            layers,
            ..
        } = dims;
        let t_net = Mlp::new(
            params,
            &format!("{name}.t"),
            &[dim_x, dim_latxy, dim_latxy],
            Activation::Relu,
            Activation::Identity,
            rng,
        );
        let layers = (0..layers)
            .map(|l| {
                let inputs = if l == 0 { dim_x + dim_y } else { dim_latxy };
                Linear::new(params, &format!("{name}.mp{l}"), inputs, dim_latxy, rng)
            })
            .collect();
        let beta = params.add(format!("{name}.beta"), Matrix::from_elem((1, 1), 1.0));
        let prior_head = Linear::new(
            params,
            &format!("{name}.prior"),
            dim_latxy,
            2 * dim_lat,
            rng,
        );
        let posterior_head =
            Linear::new(params, &format!("{name}.post"), dim_latxy, 2 * dim_lat, rng);
        Self {
            dims,
            t_net,
            layers,
            beta,
            prior_head,
            posterior_head,
        }
    }

    fn features(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        let t = self.t_net.forward(tape, bound, x)?;
        unit_rows(tape, t)
    }

    /// Softmax of `beta * cos(t_a, t_b)` for every row of `a` against `b`.
    fn weights(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        a: Var,
        b: Var,
        mask_self: bool,
    ) -> Result<Var> {
        let bt = tape.transpose(b);
        let sim = tape.matmul(a, bt)?;
        let mut logits = tape.mul(sim, bound[self.beta])?;
        if mask_self && !self.dims.self_loop && a.rows() > 1 {
            let n = a.rows();
            let mask =
                Matrix::from_shape_fn((n, n), |(i, j)| if i == j { NO_SELF_LOGIT } else { 0.0 });
            let mask = tape.input(mask);
            logits = tape.add(logits, mask)?;
        }
        Ok(tape.softmax_rows(logits))
    }

    /// Similarity weights and message passing over the context graph.
    pub fn embed(&self, tape: &mut Tape, bound: &Bound, cx: Var, cy: Var) -> Result<Embedding> {
        let t_hat = self.features(tape, bound, cx)?;
        let weights = self.weights(tape, bound, t_hat, t_hat, true)?;
        let mut h = tape.concat_cols(&[cx, cy])?;
        for layer in &self.layers {
            h = message_pass(tape, bound, layer, weights, h)?;
        }
        Ok(Embedding { t_hat, weights, h })
    }

    /// `q(z_c)` from the mean over nodes of `S H`, `1 x dim_lat`.
    pub fn aggregate_context(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        e: &Embedding,
    ) -> Result<GaussianVars> {
        let r = tape.matmul(e.weights, e.h)?;
        let rc = tape.mean_axis(r, Reduce::Rows);
        let out = self.prior_head.forward(tape, bound, rc)?;
        GaussianVars::from_head(tape, out)
    }

    /// Target-to-context weights, `M x N`.
    pub fn target_weights(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        e: &Embedding,
        tx: Var,
    ) -> Result<Var> {
        let t_star = self.features(tape, bound, tx)?;
        self.weights(tape, bound, t_star, e.t_hat, false)
    }

    /// `q(z_*)` for each target input, `M x dim_lat`.
    pub fn encode_target(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        e: &Embedding,
        tx: Var,
    ) -> Result<GaussianVars> {
        let w = self.target_weights(tape, bound, e, tx)?;
        let r = tape.matmul(w, e.h)?;
        let out = self.posterior_head.forward(tape, bound, r)?;
        GaussianVars::from_head(tape, out)
    }
}

/// One layer `relu(H W + S H W + b)`.
pub fn message_pass(
    tape: &mut Tape,
    bound: &Bound,
    layer: &Linear,
    weights: Var,
    h: Var,
) -> Result<Var> {
    let hw = tape.matmul(h, bound[layer.w])?;
    let msg = tape.matmul(weights, hw)?;
    let sum = tape.add(hw, msg)?;
    let sum = tape.add(sum, bound[layer.b])?;
    Ok(tape.relu(sum))
}

#[derive(Clone, Debug, PartialEq)]
pub struct MeanPoolEncoder {
    pub dims: EncoderDims,
    pub net: Mlp,
    pub head: Linear,
}

impl MeanPoolEncoder {
    pub fn new(params: &mut ParamSet, name: &str, dims: EncoderDims, rng: &mut Rng) -> Self {
        let mut widths = vec![dims.dim_x + dims.dim_y];
        widths.extend(std::iter::repeat_n(dims.dim_latxy, dims.layers.max(1)));
        let net = Mlp::new(
            params,
            &format!("{name}.pool"),
            &widths,
            Activation::Relu,
            Activation::Relu,
            rng,
        );
        let head = Linear::new(
            params,
            &format!("{name}.head"),
            dims.dim_latxy,
            2 * dims.dim_lat,
            rng,
        );
        Self { dims, net, head }
    }

    /// Gaussian from the mean of per-point features, `1 x dim_lat`.
    pub fn encode(&self, tape: &mut Tape, bound: &Bound, x: Var, y: Var) -> Result<GaussianVars> {
        let xy = tape.concat_cols(&[x, y])?;
        let f = self.net.forward(tape, bound, xy)?;
        let r = tape.mean_axis(f, Reduce::Rows);
        let out = self.head.forward(tape, bound, r)?;
        GaussianVars::from_head(tape, out)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Encoder {
    Graph(GraphEncoder),
    MeanPool(MeanPoolEncoder),
}

impl Encoder {
    pub fn new(
        kind: EncoderKind,
        params: &mut ParamSet,
        name: &str,
        dims: EncoderDims,
        rng: &mut Rng,
    ) -> Self {
        match kind {
            EncoderKind::Gssm => Encoder::Graph(GraphEncoder::new(params, name, dims, rng)),
            EncoderKind::MeanPool => {
                Encoder::MeanPool(MeanPoolEncoder::new(params, name, dims, rng))
            }
        }
    }

    pub fn kind(&self) -> EncoderKind {
        match self {
            Encoder::Graph(_) => EncoderKind::Gssm,
            Encoder::MeanPool(_) => EncoderKind::MeanPool,
        }
    }

    pub fn dims(&self) -> EncoderDims {
        match self {
            Encoder::Graph(g) => g.dims,
            Encoder::MeanPool(m) => m.dims,
        }
    }

    /// Context-only latent `q(z_c)`, `1 x dim_lat`; used for planning.
    pub fn prior(&self, tape: &mut Tape, bound: &Bound, cx: Var, cy: Var) -> Result<GaussianVars> {
        match self {
            Encoder::Graph(g) => {
                let e = g.embed(tape, bound, cx, cy)?;
                g.aggregate_context(tape, bound, &e)
            }
            Encoder::MeanPool(m) => m.encode(tape, bound, cx, cy),
        }
    }

    /// The variational posterior and the prior it is regularized toward.
    ///
    /// The graph encoder's posterior is per target (`M x dim_lat`). The
    /// mean-pool posterior encodes context and targets together and is a
    /// single row.
    pub fn elbo_pair(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        (cx, cy): (Var, Var),
        (tx, ty): (Var, Var),
    ) -> Result<(GaussianVars, GaussianVars)> {
        match self {
            Encoder::Graph(g) => {
                let e = g.embed(tape, bound, cx, cy)?;
                let prior = g.aggregate_context(tape, bound, &e)?;
                let post = g.encode_target(tape, bound, &e, tx)?;
                Ok((post, prior))
            }
            Encoder::MeanPool(m) => {
                let prior = m.encode(tape, bound, cx, cy)?;
                let ax = tape.concat_rows(&[cx, tx])?;
                let ay = tape.concat_rows(&[cy, ty])?;
                let post = m.encode(tape, bound, ax, ay)?;
                Ok((post, prior))
            }
        }
    }

    /// Latent distribution used for one-step prediction at `tx`.
    pub fn predictive(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        (cx, cy): (Var, Var),
        tx: Var,
    ) -> Result<GaussianVars> {
        match self {
            Encoder::Graph(g) => {
                let e = g.embed(tape, bound, cx, cy)?;
                g.encode_target(tape, bound, &e, tx)
            }
            Encoder::MeanPool(m) => m.encode(tape, bound, cx, cy),
        }
    }
}

/// `k x dim` reparameterized draws from `g`.
pub fn sample_latent(g: &DiagGaussian, rng: &mut Rng, k: usize) -> Matrix {
    let std: Vec<f64> = g.log_var.iter().map(|lv| (0.5 * lv).exp()).collect();
    Matrix::from_shape_fn((k, g.dim()), |(_, d)| {
        let e: f64 = StandardNormal.sample(rng);
        g.mean[d] + std[d] * e
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn similarity_examples() {
        assert!((similarity(&[0.3, -2.0], &[0.3, -2.0]) - 1.0).abs() < 1e-12);
        assert_eq!(similarity(&[1.0, 0.0], &[0.0, 3.0]), 0.0);
        assert!(
            (similarity(&[1.0, 0.0], &[1.0, 1.0]) - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-10
        );
        assert_eq!(similarity(&[0.0, 0.0], &[1.0, 1.0]), 0.0);
    }

    #[test]
    fn weight_examples() {
        let raw = Matrix::from_shape_vec((2, 3), vec![0.1, 0.9, -0.4, 0.5, 0.0, 0.2]).unwrap();
        let w = normalize_weights(&raw, 0.0);
        assert!(w.iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
        let single = normalize_weights(&Matrix::from_elem((1, 1), 0.3), 5.0);
        assert_eq!(single[[0, 0]], 1.0);
        let dominant = Matrix::from_shape_vec((1, 2), vec![1.0, 0.5]).unwrap();
        assert!(normalize_weights(&dominant, 10.0)[[0, 0]] >= 0.99);
    }
}
