//! Diagonal Gaussians: values, tape expressions, NLL and KL.

use std::f64::consts::PI;

use gssm_autodiff::{Matrix, Reduce, Tape, Var};

use crate::error::Result;

/// Lower bound on every variance produced by a softplus head.
pub const VAR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct DiagGaussian {
    pub mean: Vec<f64>,
    pub log_var: Vec<f64>,
}

impl DiagGaussian {
    pub fn new(mean: Vec<f64>, log_var: Vec<f64>) -> Self {
        assert_eq!(
            mean.len(),
            log_var.len(),
            "mean and log-variance dimensions differ"
        );
        Self { mean, log_var }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn var(&self) -> Vec<f64> {
        self.log_var.iter().map(|l| l.exp()).collect()
    }

    /// Row `i` of a pair of `n x d` matrices.
    pub fn from_rows(mean: &Matrix, log_var: &Matrix, i: usize) -> Self {
        Self::new(mean.row(i).to_vec(), log_var.row(i).to_vec())
    }
}

/// `0.5 * sum_d [log(2 pi var_d) + (y_d - mu_d)^2 / var_d]`.
pub fn gaussian_nll(y: &[f64], g: &DiagGaussian) -> f64 {
    assert_eq!(y.len(), g.dim(), "dimension mismatch");
    y.iter()
        .zip(&g.mean)
        .zip(&g.log_var)
        .map(|((y, m), lv)| 0.5 * ((2.0 * PI).ln() + lv + (y - m).powi(2) / lv.exp()))
        .sum()
}

/// `KL(q || p)` for diagonal Gaussians, summed over dimensions.
pub fn kl_diag(q: &DiagGaussian, p: &DiagGaussian) -> f64 {
    assert_eq!(q.dim(), p.dim(), "dimension mismatch");
    (0..q.dim())
        .map(|d| {
            let (vq, vp) = (q.log_var[d].exp(), p.log_var[d].exp());
            let dm = q.mean[d] - p.mean[d];
            0.5 * (p.log_var[d] - q.log_var[d] + (vq + dm * dm) / vp - 1.0)
        })
        .sum()
}

/// Row-wise Gaussians on a tape: `mean` and `log_var` are `n x d`.
#[derive(Clone, Copy, Debug)]
pub struct GaussianVars {
    pub mean: Var,
    pub log_var: Var,
}

impl GaussianVars {
    pub fn values(&self, tape: &Tape) -> (Matrix, Matrix) {
        (
            tape.value(self.mean).clone(),
            tape.value(self.log_var).clone(),
        )
    }

    pub fn row(&self, tape: &Tape, i: usize) -> DiagGaussian {
        DiagGaussian::from_rows(tape.value(self.mean), tape.value(self.log_var), i)
    }

    /// Split a `n x 2d` head output into mean and floored softplus variance.
    pub fn from_head(tape: &mut Tape, out: Var) -> Result<Self> {
        let d = out.cols() / 2;
        let mean = tape.slice_cols(out, 0, d)?;
        let raw = tape.slice_cols(out, d, 2 * d)?;
        let log_var = softplus_log_var(tape, raw);
        Ok(Self { mean, log_var })
    }
}

/// `log(max(softplus(raw), floor))`.
pub fn softplus_log_var(tape: &mut Tape, raw: Var) -> Var {
    let var = tape.softplus(raw);
    let var = tape.clamp_min(var, VAR_FLOOR);
    tape.log(var)
}

/// Value-only counterpart of [`softplus_log_var`].
pub fn softplus_log_var_value(raw: f64) -> f64 {
    let sp = raw.max(0.0) + (-raw.abs()).exp().ln_1p();
    sp.max(VAR_FLOOR).ln()
}

/// Per-row Gaussian NLL, `n x 1`. Broadcasts `g` across rows of `y`.
pub fn nll_rows(tape: &mut Tape, y: Var, g: GaussianVars) -> Result<Var> {
    let diff = tape.sub(y, g.mean)?;
    let sq = tape.square(diff);
    let neg_lv = tape.neg(g.log_var);
    let inv_var = tape.exp(neg_lv);
    let quad = tape.mul(sq, inv_var)?;
    let terms = tape.add(quad, g.log_var)?;
    let terms = tape.offset(terms, (2.0 * PI).ln());
    let per_row = tape.sum_axis(terms, Reduce::Cols);
    Ok(tape.scale(per_row, 0.5))
}

/// Per-row `KL(q || p)`, `n x 1`. Either side may be a single row.
pub fn kl_rows(tape: &mut Tape, q: GaussianVars, p: GaussianVars) -> Result<Var> {
    let dm = tape.sub(q.mean, p.mean)?;
    let dm2 = tape.square(dm);
    let vq = tape.exp(q.log_var);
    let num = tape.add(vq, dm2)?;
    let neg_lp = tape.neg(p.log_var);
    let inv_vp = tape.exp(neg_lp);
    let ratio = tape.mul(num, inv_vp)?;
    let dlv = tape.sub(p.log_var, q.log_var)?;
    let terms = tape.add(dlv, ratio)?;
    let terms = tape.offset(terms, -1.0);
    let per_row = tape.sum_axis(terms, Reduce::Cols);
    Ok(tape.scale(per_row, 0.5))
}

/// Reparameterized draw `mu + exp(log_var / 2) * eps` with fixed `eps`.
pub fn reparameterize(tape: &mut Tape, g: GaussianVars, eps: Var) -> Result<Var> {
    let half = tape.scale(g.log_var, 0.5);
    let std = tape.exp(half);
    let noise = tape.mul(std, eps)?;
    Ok(tape.add(g.mean, noise)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn g(m: f64, v: f64) -> DiagGaussian {
        DiagGaussian::new(vec![m], vec![v.ln()])
    }

    #[test]
    fn nll_closed_forms() {
        assert!((gaussian_nll(&[0.0], &g(0.0, 1.0)) - 0.918_938_533_204_672_7).abs() < 1e-12);
        assert!((gaussian_nll(&[1.0], &g(0.0, 1.0)) - 1.418_938_533_204_672_7).abs() < 1e-12);
    }

    #[test]
    fn kl_closed_forms() {
        assert_eq!(kl_diag(&g(0.3, 2.0), &g(0.3, 2.0)), 0.0);
        assert!((kl_diag(&g(1.0, 1.0), &g(0.0, 1.0)) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn tape_forms_match_values() {
        let q = DiagGaussian::new(vec![0.2, -1.0], vec![0.1, -0.7]);
        let p = DiagGaussian::new(vec![-0.4, 0.5], vec![-0.2, 0.3]);
        let y = [0.9, -0.3];
        let mut t = Tape::new();
        let row = |t: &mut Tape, v: &[f64]| t.row(v);
        let qv = GaussianVars {
            mean: row(&mut t, &q.mean),
            log_var: row(&mut t, &q.log_var),
        };
        let pv = GaussianVars {
            mean: row(&mut t, &p.mean),
            log_var: row(&mut t, &p.log_var),
        };
        let yv = row(&mut t, &y);
        let nll = nll_rows(&mut t, yv, qv).unwrap();
        let kl = kl_rows(&mut t, qv, pv).unwrap();
        assert!((t.scalar(nll) - gaussian_nll(&y, &q)).abs() < 1e-14);
        assert!((t.scalar(kl) - kl_diag(&q, &p)).abs() < 1e-14);
    }

    #[test]
    fn softplus_head_respects_floor() {
        assert_eq!(softplus_log_var_value(-100.0), VAR_FLOOR.ln());
        assert!((softplus_log_var_value(0.0) - std::f64::consts::LN_2.ln()).abs() < 1e-15);
    }
}
