//! Central finite-difference gradient checks.

use crate::error::Result;
use crate::tape::{Matrix, Reduce, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CheckStatus {
    Ok,
    /// A non-smooth operation sits within one step of its kink.
    Kink,
    /// The forward pass produced a non-finite value.
    NonFinite,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheck {
    /// `max |analytic - central| / (|central| + 1e-8)` over all coordinates.
    pub max_rel_error: f64,
    pub status: CheckStatus,
}

impl GradCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.status == CheckStatus::Ok && self.max_rel_error <= tol
    }
}

/// Check the gradient of a scalar function of one matrix argument.
pub fn grad_check<F>(f: F, point: &Matrix, step: f64) -> Result<GradCheck>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    grad_check_many(
        |tape, vars| f(tape, vars[0]),
        std::slice::from_ref(point),
        step,
    )
}

/// Finite-difference formula used by [`grad_check_stencil`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stencil {
    /// `(f(x+h) - f(x-h)) / 2h`, error `O(h^2)`.
    Central,
    /// `(-f(x+2h) + 8f(x+h) - 8f(x-h) + f(x-2h)) / 12h`, error `O(h^4)`.
    ///
    /// Permits a larger step, which keeps rounding noise well below small
    /// gradient entries of losses with many terms.
    Central4,
}

/// Check the gradient of a scalar function with respect to every coordinate
/// of several matrix arguments.
pub fn grad_check_many<F>(f: F, points: &[Matrix], step: f64) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    grad_check_stencil(f, points, step, Stencil::Central)
}

pub fn grad_check_stencil<F>(
    f: F,
    points: &[Matrix],
    step: f64,
    stencil: Stencil,
) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |pts: &[Matrix]| -> Result<(Tape, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = pts.iter().map(|p| tape.leaf(p.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok((tape, vars, out))
    };
    let non_finite = GradCheck {
        max_rel_error: f64::INFINITY,
        status: CheckStatus::NonFinite,
    };
    // Weighted symmetric differences `w * (f(x+oh) - f(x-oh))`, so a
    // coordinate with no influence yields exactly zero.
    let pairs: &[(f64, f64)] = match stencil {
        Stencil::Central => &[(1.0, 0.5)],
        Stencil::Central4 => &[(1.0, 8.0 / 12.0), (2.0, -1.0 / 12.0)],
    };
    let reach = pairs.iter().fold(0.0f64, |m, (o, _)| m.max(*o)) * step;

    let (tape, vars, out) = eval(points)?;
    if !tape.scalar(out).is_finite() {
        return Ok(non_finite);
    }
    let grads = tape.backward(out)?;
    let mut status = if tape.min_kink_distance() <= reach {
        CheckStatus::Kink
    } else {
        CheckStatus::Ok
    };

    let mut worst: f64 = 0.0;
    let mut shifted: Vec<Matrix> = points.to_vec();
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(*var);
        for idx in 0..points[k].len() {
            let (r, c) = (idx / points[k].ncols(), idx % points[k].ncols());
            let base = points[k][[r, c]];
            let mut estimate = 0.0;
            for &(o, w) in pairs {
                let mut side = [0.0; 2];
                for (v, sign) in side.iter_mut().zip([1.0, -1.0]) {
                    shifted[k][[r, c]] = base + sign * o * step;
                    let (t, _, y) = eval(&shifted)?;
                    *v = t.scalar(y);
                    if !v.is_finite() {
                        return Ok(non_finite);
                    }
                    if t.min_kink_distance() <= reach {
                        status = CheckStatus::Kink;
                    }
                }
                estimate += w * (side[0] - side[1]);
            }
            shifted[k][[r, c]] = base;
            let central = estimate / step;
            let err = (analytic[[r, c]] - central).abs() / (central.abs() + 1e-8);
            worst = worst.max(err);
        }
    }
    Ok(GradCheck {
        max_rel_error: worst,
        status,
    })
}

/// Build a random graph over the primitive set from `plan`, a list of
/// `(op, lhs, rhs)` choices. Each step picks an
/// operation and appends its result to the pool of live nodes; the final
/// loss mixes several nodes so every branch contributes.
pub fn random_graph(t: &mut Tape, inputs: &[Var], plan: &[(u8, usize, usize)]) -> Result<Var> {
    let mut pool: Vec<Var> = inputs.to_vec();
    for &(op, i, j) in plan {
        let a = pool[i % pool.len()];
        let b = pool[j % pool.len()];
        let out = match op % 17 {
            0 => t.add(a, b)?,
            1 => t.sub(a, b)?,
            2 => t.mul(a, b)?,
            3 => {
                let bt = t.transpose(b);
                let p = t.matmul(a, bt)?;
                t.scale(p, 0.3)
            }
            4 => {
                let k = t.constant(0.7);
                t.mul(a, k)?
            }
            5 => {
                let s = t.scale(a, 0.5);
                t.exp(s)
            }
            6 => {
                let sq = t.square(a);
                let pos = t.offset(sq, 1.0);
                t.log(pos)
            }
            7 => t.tanh(a),
            8 => {
                // Shifted away from the kink for every input in [-3, 3].
                let shifted = t.offset(a, 4.0);
                t.relu(shifted)
            }
            9 => t.softplus(a),
            10 => {
                let s = t.sum_axis(a, Reduce::Cols);
                let m = t.mean_axis(a, Reduce::Cols);
                let c = t.mul(s, m)?;
                t.broadcast_to(c, a.shape())?
            }
            11 => t.softmax_rows(a),
            12 => {
                let both = t.concat_cols(&[a, b])?;
                t.slice_cols(both, 1, 1 + a.cols())?
            }
            13 => t.square(a),
            14 => {
                let sq = t.square(a);
                let pos = t.offset(sq, 0.5);
                t.sqrt(pos)
            }
            15 => {
                let s = t.sin(a);
                let c = t.cos(b);
                t.mul(s, c)?
            }
            _ => {
                let m = t.mean(a);
                t.add(b, m)?
            }
        };
        // Keep magnitudes bounded so later ops stay well conditioned.
        let bounded = t.tanh(out);
        pool.push(bounded);
    }
    let tail = &pool[inputs.len().saturating_sub(1)..];
    let mut acc = t.mean(tail[0]);
    for (k, &v) in tail.iter().enumerate().skip(1) {
        let m = t.mean(v);
        let w = t.scale(m, 1.0 + k as f64 * 0.1);
        acc = t.add(acc, w)?;
    }
    Ok(acc)
}
