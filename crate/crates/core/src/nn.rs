//! Dense layers over the autodiff tape, with a tape-free inference path.

use gssm_autodiff::{Bound, Matrix, ParamId, ParamSet, Tape, Var};
use rand::Rng as _;

use crate::error::Result;
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    fn tape(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Relu => tape.relu(x),
            Activation::Tanh => tape.tanh(x),
            Activation::Identity => x,
        }
    }

    fn apply(self, x: &mut Matrix) {
        match self {
            Activation::Relu => x.mapv_inplace(|v| v.max(0.0)),
            Activation::Tanh => x.mapv_inplace(f64::tanh),
            Activation::Identity => {}
        }
    }
}

/// `x W + b` with `W: in x out` and a `1 x out` bias row.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        inputs: usize,
        outputs: usize,
        rng: &mut Rng,
    ) -> Self {
        let w = params.add_glorot(format!("{name}.w"), inputs, outputs, rng);
        let b = params.add_zeros(format!("{name}.b"), 1, outputs);
        Self {
            w,
            b,
            inputs,
            outputs,
        }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        let xw = tape.matmul(x, bound[self.w])?;
        Ok(tape.add(xw, bound[self.b])?)
    }

    pub fn infer(&self, params: &ParamSet, x: &Matrix) -> Matrix {
        x.dot(params.get(self.w)) + params.get(self.b)
    }

    /// Scale the initial weights, e.g. to start an output head near zero.
    pub fn scale_weights(&self, params: &mut ParamSet, k: f64) {
        params.get_mut(self.w).mapv_inplace(|v| v * k);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub hidden: Activation,
    pub output: Activation,
}

impl Mlp {
    /// `widths = [in, hidden..., out]`.
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        widths: &[usize],
        hidden: Activation,
        output: Activation,
        rng: &mut Rng,
    ) -> Self {
        assert!(widths.len() >= 2, "an MLP needs input and output widths");
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(params, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect();
        Self {
            layers,
            hidden,
            output,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs
    }

    pub fn last(&self) -> &Linear {
        &self.layers[self.layers.len() - 1]
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        let mut h = x;
        let n = self.layers.len();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, bound, h)?;
            let act = if i + 1 == n { self.output } else { self.hidden };
            h = act.tape(tape, h);
        }
        Ok(h)
    }

    pub fn infer(&self, params: &ParamSet, x: &Matrix) -> Matrix {
        let mut h = x.clone();
        let n = self.layers.len();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.infer(params, &h);
            let act = if i + 1 == n { self.output } else { self.hidden };
            act.apply(&mut h);
        }
        h
    }
}

/// Standard normal matrix.
pub fn randn(rows: usize, cols: usize, rng: &mut Rng) -> Matrix {
    use rand_distr::{Distribution, StandardNormal};
    Matrix::from_shape_simple_fn((rows, cols), || StandardNormal.sample(rng))
}

/// Uniform matrix on `[lo, hi)`.
pub fn uniform(rows: usize, cols: usize, lo: f64, hi: f64, rng: &mut Rng) -> Matrix {
    Matrix::from_shape_simple_fn((rows, cols), || rng.random_range(lo..hi))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedStream;

    #[test]
    fn tape_and_inference_paths_agree() {
        let mut rng = SeedStream::new(1).rng("mlp");
        let mut params = ParamSet::new();
        let mlp = Mlp::new(
            &mut params,
            "f",
            &[3, 8, 8, 2],
            Activation::Relu,
            Activation::Tanh,
            &mut rng,
        );
        let x = randn(5, 3, &mut rng);
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let xv = tape.input(x.clone());
        let y = mlp.forward(&mut tape, &bound, xv).unwrap();
        let direct = mlp.infer(&params, &x);
        assert_eq!(tape.value(y), &direct);
        assert_eq!((mlp.input_dim(), mlp.output_dim()), (3, 2));
    }
}
