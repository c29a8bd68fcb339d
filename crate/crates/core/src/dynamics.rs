//! Latent-conditioned probabilistic dynamics: decoder, ELBO and predictive
//! mixture.

use gssm_autodiff::checkpoint::Checkpoint;
use gssm_autodiff::{Bound, Matrix, ParamSet, Tape, Var};
use ndarray::Axis;

use crate::dist::{kl_rows, nll_rows, reparameterize, GaussianVars};
use crate::encoder::{ContextSet, Encoder, EncoderDims, EncoderKind};
use crate::error::{Error, Result};
use crate::nn::{randn, Activation, Mlp};
use crate::rng::Rng;

/// Smallest standard deviation a normalizer will divide by.
pub const STD_FLOOR: f64 = 1e-6;

/// Per-column affine standardization.
#[derive(Clone, Debug, PartialEq)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    /// Column means and population standard deviations. Columns whose
    /// deviation falls below the floor get a deviation of one.
    pub fn fit(data: &Matrix) -> Result<Self> {
        let n = data.nrows();
        if n == 0 {
            return Err(Error::Invalid(
                "cannot fit normalization on an empty buffer".into(),
            ));
        }
        let mean: Vec<f64> = data
            .axis_iter(Axis(1))
            .map(|c| c.sum() / n as f64)
            .collect();
        let std = data
            .axis_iter(Axis(1))
            .zip(&mean)
            .map(|(c, m)| {
                let s = (c.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n as f64).sqrt();
                if s < STD_FLOOR {
                    1.0
                } else {
                    s
                }
            })
            .collect();
        Ok(Self { mean, std })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, data: &Matrix) -> Matrix {
        let mut out = data.clone();
        for mut row in out.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - self.mean[j]) / self.std[j];
            }
        }
        out
    }

    pub fn invert(&self, data: &Matrix) -> Matrix {
        let mut out = data.clone();
        for mut row in out.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = *v * self.std[j] + self.mean[j];
            }
        }
        out
    }

    pub fn mean_row(&self) -> Matrix {
        Matrix::from_shape_vec((1, self.dim()), self.mean.clone()).expect("row shape")
    }

    pub fn std_row(&self) -> Matrix {
        Matrix::from_shape_vec((1, self.dim()), self.std.clone()).expect("row shape")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NormalizationStats {
    pub x: Normalizer,
    pub y: Normalizer,
}

impl NormalizationStats {
    pub fn identity(dim_x: usize, dim_y: usize) -> Self {
        Self {
            x: Normalizer::identity(dim_x),
            y: Normalizer::identity(dim_y),
        }
    }
}

pub fn fit_normalization(xs: &Matrix, ys: &Matrix) -> Result<NormalizationStats> {
    Ok(NormalizationStats {
        x: Normalizer::fit(xs)?,
        y: Normalizer::fit(ys)?,
    })
}

/// `p(y | x, z)`: an MLP on `[x, z]` emitting mean and floored softplus
/// variance.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoder {
    pub mlp: Mlp,
}

impl Decoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        dim_x: usize,
        dim_lat: usize,
        dim_y: usize,
        dim_h: usize,
        layers: usize,
        rng: &mut Rng,
    ) -> Self {
        let mut widths = vec![dim_x + dim_lat];
        widths.extend(std::iter::repeat_n(dim_h, layers));
        widths.push(2 * dim_y);
        Self {
            mlp: Mlp::new(
                params,
                name,
                &widths,
                Activation::Relu,
                Activation::Identity,
                rng,
            ),
        }
    }

    /// `x` is `M x dim_x`; `z` is `M x dim_lat` or a single row shared by all
    /// inputs.
    pub fn decode(&self, tape: &mut Tape, bound: &Bound, x: Var, z: Var) -> Result<GaussianVars> {
        let z = if z.rows() == x.rows() {
            z
        } else {
            tape.broadcast_to(z, (x.rows(), z.cols()))?
        };
        let xz = tape.concat_cols(&[x, z])?;
        let out = self.mlp.forward(tape, bound, xz)?;
        GaussianVars::from_head(tape, out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelDims {
    pub encoder: EncoderKind,
    pub dim_x: usize,
    pub dim_y: usize,
    pub dim_lat: usize,
    pub dim_latxy: usize,
    pub enc_layers: usize,
    pub dim_h: usize,
    pub dec_layers: usize,
    pub self_loop: bool,
}

/// Encoder and decoder with one shared parameter set and the data
/// normalization they were trained under.
#[derive(Clone, Debug, PartialEq)]
pub struct WorldModel {
    pub dims: ModelDims,
    pub params: ParamSet,
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub norm: NormalizationStats,
}

impl WorldModel {
    pub fn new(dims: ModelDims, rng: &mut Rng) -> Self {
        let mut params = ParamSet::new();
        let enc_dims = EncoderDims {
            dim_x: dims.dim_x,
            dim_y: dims.dim_y,
            dim_latxy: dims.dim_latxy,
            dim_lat: dims.dim_lat,
            layers: dims.enc_layers,
            self_loop: dims.self_loop,
        };
        let encoder = Encoder::new(dims.encoder, &mut params, "enc", enc_dims, rng);
        let decoder = Decoder::new(
            &mut params,
            "dec",
            dims.dim_x,
            dims.dim_lat,
            dims.dim_y,
            dims.dim_h,
            dims.dec_layers,
            rng,
        );
        Self {
            dims,
            params,
            encoder,
            decoder,
            norm: NormalizationStats::identity(dims.dim_x, dims.dim_y),
        }
    }

    /// Normalized context from raw model inputs and targets.
    pub fn context(&self, x: &Matrix, y: &Matrix) -> Result<ContextSet> {
        ContextSet::new(self.norm.x.apply(x), self.norm.y.apply(y))
    }

    /// Context-only latent `q(z_c)` as values.
    pub fn prior_latent(&self, ctx: &ContextSet) -> Result<crate::dist::DiagGaussian> {
        let mut tape = Tape::new();
        let bound = self.params.bind_frozen(&mut tape);
        let c = ctx.bind(&mut tape);
        let g = self.encoder.prior(&mut tape, &bound, c.0, c.1)?;
        Ok(g.row(&tape, 0))
    }

    pub fn save_into(&self, ck: &mut Checkpoint) {
        ck.push_params("world", &self.params);
        let row = |v: &[f64]| Matrix::from_shape_vec((1, v.len()), v.to_vec()).expect("row shape");
        ck.push("norm/x_mean", row(&self.norm.x.mean));
        ck.push("norm/x_std", row(&self.norm.x.std));
        ck.push("norm/y_mean", row(&self.norm.y.mean));
        ck.push("norm/y_std", row(&self.norm.y.std));
    }

    pub fn restore_from(&mut self, ck: &Checkpoint) -> Result<()> {
        ck.restore_params("world", &mut self.params)?;
        let get = |name: &str, dim: usize| -> Result<Vec<f64>> {
            let m = ck
                .get(name)
                .ok_or_else(|| Error::Invalid(format!("checkpoint lacks {name}")))?;
            if m.dim() != (1, dim) {
                return Err(Error::Invalid(format!(
                    "{name} has shape {:?}, expected (1, {dim})",
                    m.dim()
                )));
            }
            Ok(m.iter().copied().collect())
        };
        self.norm = NormalizationStats {
            x: Normalizer {
                mean: get("norm/x_mean", self.dims.dim_x)?,
                std: get("norm/x_std", self.dims.dim_x)?,
            },
            y: Normalizer {
                mean: get("norm/y_mean", self.dims.dim_y)?,
                std: get("norm/y_std", self.dims.dim_y)?,
            },
        };
        Ok(())
    }
}

/// One task's training split in normalized units.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskBatch {
    pub task: u64,
    pub context_x: Matrix,
    pub context_y: Matrix,
    pub target_x: Matrix,
    pub target_y: Matrix,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ElboReport {
    /// Mean over tasks of the per-task loss.
    pub loss: f64,
    /// Mean over tasks of the per-target reconstruction NLL.
    pub nll: f64,
    /// Mean over tasks of the per-target KL.
    pub kl: f64,
    pub tasks: usize,
    /// Items dropped for an empty context or target split.
    pub skipped: usize,
}

/// Per-task loss: the mean over targets of the `k`-sample NLL average plus
/// the KL from posterior to prior.
pub fn task_loss(
    tape: &mut Tape,
    model: &WorldModel,
    bound: &Bound,
    item: &TaskBatch,
    k: usize,
    rng: &mut Rng,
) -> Result<(Var, f64, f64)> {
    let cx = tape.input(item.context_x.clone());
    let cy = tape.input(item.context_y.clone());
    let tx = tape.input(item.target_x.clone());
    let ty = tape.input(item.target_y.clone());
    let (post, prior) = model.encoder.elbo_pair(tape, bound, (cx, cy), (tx, ty))?;
    let mut nll_sum: Option<Var> = None;
    for _ in 0..k.max(1) {
        let eps = tape.input(randn(post.mean.rows(), post.mean.cols(), rng));
        let z = reparameterize(tape, post, eps)?;
        let out = model.decoder.decode(tape, bound, tx, z)?;
        let nll = nll_rows(tape, ty, out)?;
        nll_sum = Some(match nll_sum {
            Some(acc) => tape.add(acc, nll)?,
            None => nll,
        });
    }
    let nll = tape.scale(nll_sum.expect("at least one sample"), 1.0 / k.max(1) as f64);
    let nll = tape.mean(nll);
    let kl = kl_rows(tape, post, prior)?;
    let kl = tape.mean(kl);
    let loss = tape.add(nll, kl)?;
    let (nv, kv) = (tape.scalar(nll), tape.scalar(kl));
    Ok((loss, nv, kv))
}

/// Monte-Carlo negative ELBO averaged over task items.
pub fn elbo_loss(
    tape: &mut Tape,
    model: &WorldModel,
    bound: &Bound,
    items: &[TaskBatch],
    k: usize,
    rng: &mut Rng,
) -> Result<(Option<Var>, ElboReport)> {
    let mut report = ElboReport::default();
    let mut losses = Vec::new();
    for item in items {
        if item.context_x.nrows() == 0 || item.target_x.nrows() == 0 {
            report.skipped += 1;
            continue;
        }
        let (loss, nll, kl) = task_loss(tape, model, bound, item, k, rng)?;
        losses.push(loss);
        report.nll += nll;
        report.kl += kl;
    }
    if losses.is_empty() {
        return Ok((None, report));
    }
    let n = losses.len() as f64;
    let stacked = tape.concat_rows(&losses)?;
    let loss = tape.mean(stacked);
    report.tasks = losses.len();
    report.loss = tape.scalar(loss);
    report.nll /= n;
    report.kl /= n;
    if !report.loss.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite ELBO loss (nll {}, kl {})",
            report.nll, report.kl
        )));
    }
    Ok((Some(loss), report))
}

/// Uniform mixture over `K` decoder passes, in raw target units.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictiveMixture {
    pub means: Vec<Matrix>,
    pub vars: Vec<Matrix>,
}

impl PredictiveMixture {
    pub fn k(&self) -> usize {
        self.means.len()
    }

    /// Average of component means, `M x dim_y`.
    pub fn mean(&self) -> Matrix {
        let mut acc = self.means[0].clone();
        for m in &self.means[1..] {
            acc += m;
        }
        acc / self.k() as f64
    }
}

/// Predictive mixture at raw inputs `x`, with latents drawn from the
/// encoder's predictive distribution.
pub fn predict(
    model: &WorldModel,
    ctx: &ContextSet,
    x: &Matrix,
    k: usize,
    rng: &mut Rng,
) -> Result<PredictiveMixture> {
    if k == 0 {
        return Err(Error::Invalid(
            "mixture needs at least one component".into(),
        ));
    }
    let mut tape = Tape::new();
    let bound = model.params.bind_frozen(&mut tape);
    let c = ctx.bind(&mut tape);
    let xn = tape.input(model.norm.x.apply(x));
    let q = model.encoder.predictive(&mut tape, &bound, c, xn)?;
    let std_y = model.norm.y.std_row();
    let var_scale = std_y.mapv(|s| s * s);
    let mut means = Vec::with_capacity(k);
    let mut vars = Vec::with_capacity(k);
    for _ in 0..k {
        let eps = tape.input(randn(q.mean.rows(), q.mean.cols(), rng));
        let z = reparameterize(&mut tape, q, eps)?;
        let out = model.decoder.decode(&mut tape, &bound, xn, z)?;
        let (mu, lv) = out.values(&tape);
        if mu.iter().chain(lv.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite decoder output".into()));
        }
        means.push(model.norm.y.invert(&mu));
        vars.push(lv.mapv(f64::exp) * &var_scale);
    }
    Ok(PredictiveMixture { means, vars })
}

/// Mean squared error of the mixture mean against raw targets.
pub fn one_step_mse(
    model: &WorldModel,
    ctx: &ContextSet,
    x: &Matrix,
    y: &Matrix,
    k: usize,
    rng: &mut Rng,
) -> Result<f64> {
    let pred = predict(model, ctx, x, k, rng)?.mean();
    Ok((&pred - y).mapv(|v| v * v).mean().unwrap_or(f64::NAN))
}
