//! Dense loop-based reference implementation of the graph encoder.

use gssm_autodiff::{Matrix, ParamSet, Tape};
use gssm_core::dist::{DiagGaussian, GaussianVars};
use gssm_core::encoder::{similarity, ContextSet, EncoderDims, GraphEncoder};
use gssm_core::nn::{randn, Linear};
use gssm_core::rng::{Rng, SeedStream};

pub type Rows = Vec<Vec<f64>>;

pub fn dims(self_loop: bool) -> EncoderDims {
    EncoderDims {
        dim_x: 3,
        dim_y: 2,
        dim_latxy: 6,
        dim_lat: 4,
        layers: 2,
        self_loop,
    }
}

pub fn rows(m: &Matrix) -> Rows {
    m.rows().into_iter().map(|r| r.to_vec()).collect()
}

pub fn affine(p: &ParamSet, l: &Linear, x: &[f64]) -> Vec<f64> {
    let (w, b) = (p.get(l.w), p.get(l.b));
    (0..l.outputs)
        .map(|j| b[[0, j]] + (0..l.inputs).map(|i| x[i] * w[[i, j]]).sum::<f64>())
        .collect()
}

pub fn relu(v: Vec<f64>) -> Vec<f64> {
    v.into_iter().map(|x| x.max(0.0)).collect()
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

pub fn head(v: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let d = v.len() / 2;
    let sp = |x: f64| x.max(0.0) + (-x.abs()).exp().ln_1p();
    (
        v[..d].to_vec(),
        v[d..].iter().map(|&x| sp(x).max(1e-6).ln()).collect(),
    )
}

pub struct Oracle {
    pub weights: Rows,
    pub h: Rows,
    pub prior: (Vec<f64>, Vec<f64>),
    pub post: Vec<(Vec<f64>, Vec<f64>)>,
}

pub fn oracle(enc: &GraphEncoder, p: &ParamSet, ctx: &ContextSet, targets: &Matrix) -> Oracle {
    let t = |x: &[f64]| -> Vec<f64> {
        let h = relu(affine(p, &enc.t_net.layers[0], x));
        affine(p, &enc.t_net.layers[1], &h)
    };
    let beta = p.get(enc.beta)[[0, 0]];
    let xs = rows(&ctx.x);
    let ys = rows(&ctx.y);
    let ts: Rows = xs.iter().map(|x| t(x)).collect();
    let n = xs.len();
    let weights: Rows = (0..n)
        .map(|i| {
            let logits: Vec<f64> = (0..n)
                .map(|j| {
                    if i == j && !enc.dims.self_loop && n > 1 {
                        f64::NEG_INFINITY
                    } else {
                        beta * similarity(&ts[i], &ts[j])
                    }
                })
                .collect();
            softmax(&logits)
        })
        .collect();
    let mut h: Rows = (0..n)
        .map(|i| [xs[i].clone(), ys[i].clone()].concat())
        .collect();
    for layer in &enc.layers {
        let w = p.get(layer.w);
        let b = p.get(layer.b);
        let hw: Rows = h
            .iter()
            .map(|hi| {
                (0..layer.outputs)
                    .map(|j| (0..layer.inputs).map(|k| hi[k] * w[[k, j]]).sum())
                    .collect()
            })
            .collect();
        h = (0..n)
            .map(|i| {
                (0..layer.outputs)
                    .map(|j| {
                        let msg: f64 = (0..n).map(|k| weights[i][k] * hw[k][j]).sum();
                        (hw[i][j] + msg + b[[0, j]]).max(0.0)
                    })
                    .collect()
            })
            .collect();
    }
    let width = h[0].len();
    let mut rc = vec![0.0; width];
    for i in 0..n {
        for j in 0..width {
            rc[j] += (0..n).map(|k| weights[i][k] * h[k][j]).sum::<f64>() / n as f64;
        }
    }
    let prior = head(&affine(p, &enc.prior_head, &rc));
    let post = rows(targets)
        .iter()
        .map(|x| {
            let tx = t(x);
            let w = softmax(
                &ts.iter()
                    .map(|tj| beta * similarity(&tx, tj))
                    .collect::<Vec<_>>(),
            );
            let r: Vec<f64> = (0..width)
                .map(|j| (0..n).map(|k| w[k] * h[k][j]).sum())
                .collect();
            head(&affine(p, &enc.posterior_head, &r))
        })
        .collect();
    Oracle {
        weights,
        h,
        prior,
        post,
    }
}

pub struct Run {
    pub weights: Matrix,
    pub h: Matrix,
    pub prior: DiagGaussian,
    pub post: (Matrix, Matrix),
}

pub fn run(enc: &GraphEncoder, p: &ParamSet, ctx: &ContextSet, targets: &Matrix) -> Run {
    let mut tape = Tape::new();
    let bound = p.bind(&mut tape);
    let (cx, cy) = ctx.bind(&mut tape);
    let tx = tape.input(targets.clone());
    let e = enc.embed(&mut tape, &bound, cx, cy).unwrap();
    let prior = enc.aggregate_context(&mut tape, &bound, &e).unwrap();
    let post: GaussianVars = enc.encode_target(&mut tape, &bound, &e, tx).unwrap();
    Run {
        weights: tape.value(e.weights).clone(),
        h: tape.value(e.h).clone(),
        prior: prior.row(&tape, 0),
        post: post.values(&tape),
    }
}

pub fn random_context(n: usize, rng: &mut Rng) -> ContextSet {
    ContextSet::new(randn(n, 3, rng), randn(n, 2, rng)).unwrap()
}

pub fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

pub fn flat(m: &Matrix) -> Vec<f64> {
    m.iter().copied().collect()
}

pub fn graph(seed: u64, self_loop: bool) -> (GraphEncoder, ParamSet) {
    let mut p = ParamSet::new();
    let mut rng = SeedStream::new(seed).rng("init");
    let enc = GraphEncoder::new(&mut p, "enc", dims(self_loop), &mut rng);
    p.get_mut(enc.beta)[[0, 0]] = 1.7;
    (enc, p)
}
