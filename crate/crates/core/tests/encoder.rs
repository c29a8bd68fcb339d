//! Encoder properties against a dense loop-based oracle.

mod common;

use common::encoder_oracle::*;

use gssm_autodiff::{Matrix, ParamSet, Tape};
use gssm_core::dist::{DiagGaussian, GaussianVars};
use gssm_core::encoder::{normalize_weights, sample_latent, ContextSet, MeanPoolEncoder};
use gssm_core::nn::randn;
use gssm_core::rng::SeedStream;
use rand::seq::SliceRandom;
use rand::Rng as _;

#[test]
fn layers_match_dense_oracle_for_small_graphs() {
    let stream = SeedStream::new(31);
    for self_loop in [true, false] {
        let (enc, p) = graph(1, self_loop);
        for n in 1..=5 {
            let mut rng = stream.indexed("ctx", n as u64);
            let ctx = random_context(n, &mut rng);
            let targets = randn(3, 3, &mut rng);
            let ours = run(&enc, &p, &ctx, &targets);
            let o = oracle(&enc, &p, &ctx, &targets);
            assert!(max_diff(&flat(&ours.weights), &o.weights.concat()) <= 1e-12);
            assert!(max_diff(&flat(&ours.h), &o.h.concat()) <= 1e-12, "n={n}");
            assert!(max_diff(&ours.prior.mean, &o.prior.0) <= 1e-12);
            assert!(max_diff(&ours.prior.log_var, &o.prior.1) <= 1e-12);
            for (i, (m, lv)) in o.post.iter().enumerate() {
                assert!(max_diff(&ours.post.0.row(i).to_vec(), m) <= 1e-12);
                assert!(max_diff(&ours.post.1.row(i).to_vec(), lv) <= 1e-12);
            }
        }
    }
}

#[test]
fn single_node_sees_itself_with_unit_weight() {
    let (enc, p) = graph(2, true);
    let ctx = random_context(1, &mut SeedStream::new(2).rng("ctx"));
    let ours = run(&enc, &p, &ctx, &ctx.x);
    assert_eq!(ours.weights[[0, 0]], 1.0);
    let h0 = [rows(&ctx.x)[0].clone(), rows(&ctx.y)[0].clone()].concat();
    let l0 = &enc.layers[0];
    let wh = affine(&p, l0, &h0);
    let b = p.get(l0.b);
    let expect: Vec<f64> = wh
        .iter()
        .enumerate()
        .map(|(j, v)| (2.0 * (v - b[[0, j]]) + b[[0, j]]).max(0.0))
        .collect();
    let mut t = Tape::new();
    let bound = p.bind(&mut t);
    let (cx, cy) = ctx.bind(&mut t);
    let xy = t.concat_cols(&[cx, cy]).unwrap();
    let w = t.input(Matrix::ones((1, 1)));
    let h1 = gssm_core::encoder::message_pass(&mut t, &bound, l0, w, xy).unwrap();
    assert!(max_diff(&flat(t.value(h1)), &expect) <= 1e-14);
}

#[test]
fn two_node_context_matches_hand_weighted_sums() {
    let (enc, p) = graph(3, true);
    let ctx = random_context(2, &mut SeedStream::new(3).rng("ctx"));
    let ours = run(&enc, &p, &ctx, &ctx.x);
    let (w, h) = (&ours.weights, &ours.h);
    let width = h.ncols();
    let rc: Vec<f64> = (0..width)
        .map(|j| 0.5 * ((w[[0, 0]] + w[[1, 0]]) * h[[0, j]] + (w[[0, 1]] + w[[1, 1]]) * h[[1, j]]))
        .collect();
    let (m, lv) = head(&affine(&p, &enc.prior_head, &rc));
    assert!(max_diff(&ours.prior.mean, &m) <= 1e-15);
    assert!(max_diff(&ours.prior.log_var, &lv) <= 1e-15);
}

#[test]
fn identical_embeddings_pool_to_themselves() {
    let (enc, p) = graph(4, true);
    let x = Matrix::from_shape_fn((4, 3), |(_, j)| 0.3 * j as f64 - 0.2);
    let y = Matrix::from_shape_fn((4, 2), |(_, j)| 1.0 - j as f64);
    let ctx = ContextSet::new(x, y).unwrap();
    let single = ContextSet::new(
        ctx.x.slice(ndarray::s![0..1, ..]).to_owned(),
        ctx.y.slice(ndarray::s![0..1, ..]).to_owned(),
    )
    .unwrap();
    let a = run(&enc, &p, &ctx, &ctx.x).prior;
    let b = run(&enc, &p, &single, &single.x).prior;
    assert!(max_diff(&a.mean, &b.mean) <= 1e-12);
    assert!(max_diff(&a.log_var, &b.log_var) <= 1e-12);
}

#[test]
fn permutations_leave_latents_unchanged() {
    let stream = SeedStream::new(32);
    let (enc, p) = graph(5, true);
    let mut mp = ParamSet::new();
    let pool = MeanPoolEncoder::new(&mut mp, "enc", dims(true), &mut stream.rng("pool"));
    let mut worst: f64 = 0.0;
    for case in 0..100u64 {
        let mut rng = stream.indexed("case", case);
        let n = rng.random_range(1..=20);
        let ctx = random_context(n, &mut rng);
        let targets = randn(4, 3, &mut rng);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let shuffled = ctx.permuted(&order);
        let a = run(&enc, &p, &ctx, &targets);
        let b = run(&enc, &p, &shuffled, &targets);
        worst = worst
            .max(max_diff(&a.prior.mean, &b.prior.mean))
            .max(max_diff(&a.prior.log_var, &b.prior.log_var))
            .max(max_diff(&flat(&a.post.0), &flat(&b.post.0)))
            .max(max_diff(&flat(&a.post.1), &flat(&b.post.1)));
        for row in a.weights.rows() {
            assert!((row.sum() - 1.0).abs() <= 1e-10);
            assert!(row.iter().all(|&v| v >= 0.0));
        }
        let pa = pool_encode(&pool, &mp, &ctx);
        let pb = pool_encode(&pool, &mp, &shuffled);
        worst = worst
            .max(max_diff(&pa.mean, &pb.mean))
            .max(max_diff(&pa.log_var, &pb.log_var));
    }
    assert!(worst <= 1e-10, "worst deviation {worst}");
}

fn pool_encode(enc: &MeanPoolEncoder, p: &ParamSet, ctx: &ContextSet) -> DiagGaussian {
    let mut t = Tape::new();
    let bound = p.bind(&mut t);
    let (cx, cy) = ctx.bind(&mut t);
    let g = enc.encode(&mut t, &bound, cx, cy).unwrap();
    g.row(&t, 0)
}

#[test]
fn duplicated_context_leaves_prior_unchanged() {
    let stream = SeedStream::new(33);
    let (enc, p) = graph(6, true);
    let mut mp = ParamSet::new();
    let pool = MeanPoolEncoder::new(&mut mp, "enc", dims(true), &mut stream.rng("pool"));
    let ctx = random_context(7, &mut stream.rng("ctx"));
    let order: Vec<usize> = (0..7).chain(0..7).collect();
    let doubled = ctx.permuted(&order);
    let a = run(&enc, &p, &ctx, &ctx.x).prior;
    let b = run(&enc, &p, &doubled, &ctx.x).prior;
    assert!(max_diff(&a.mean, &b.mean) <= 1e-12);
    let pa = pool_encode(&pool, &mp, &ctx);
    let pb = pool_encode(&pool, &mp, &doubled);
    assert!(max_diff(&pa.mean, &pb.mean) <= 1e-12);
    assert!(max_diff(&pa.log_var, &pb.log_var) <= 1e-12);
}

#[test]
fn mean_pool_single_point_is_its_head_output() {
    let stream = SeedStream::new(34);
    let mut mp = ParamSet::new();
    let pool = MeanPoolEncoder::new(&mut mp, "enc", dims(true), &mut stream.rng("pool"));
    let ctx = random_context(1, &mut stream.rng("ctx"));
    let xy = [rows(&ctx.x)[0].clone(), rows(&ctx.y)[0].clone()].concat();
    let mut f = xy;
    for l in &pool.net.layers {
        f = relu(affine(&mp, l, &f));
    }
    let (m, lv) = head(&affine(&mp, &pool.head, &f));
    let g = pool_encode(&pool, &mp, &ctx);
    assert!(max_diff(&g.mean, &m) <= 1e-14);
    assert!(max_diff(&g.log_var, &lv) <= 1e-14);
}

#[test]
fn sharp_target_weights_select_the_matching_node() {
    let (enc, mut p) = graph(7, true);
    p.get_mut(enc.beta)[[0, 0]] = 1e4;
    let ctx = random_context(4, &mut SeedStream::new(7).rng("ctx"));
    let target = ctx.x.slice(ndarray::s![2..3, ..]).to_owned();
    let mut t = Tape::new();
    let bound = p.bind(&mut t);
    let (cx, cy) = ctx.bind(&mut t);
    let tx = t.input(target);
    let e = enc.embed(&mut t, &bound, cx, cy).unwrap();
    let w = enc.target_weights(&mut t, &bound, &e, tx).unwrap();
    let r = t.matmul(w, e.h).unwrap();
    let h2 = t.value(e.h).row(2).to_vec();
    assert!(max_diff(&flat(t.value(r)), &h2) <= 1e-9);
}

#[test]
fn weights_helper_is_row_stochastic() {
    let mut rng = SeedStream::new(35).rng("w");
    for _ in 0..50 {
        let raw = randn(6, 6, &mut rng).mapv(f64::tanh);
        let w = normalize_weights(&raw, rng.random_range(-5.0..5.0));
        for row in w.rows() {
            assert!((row.sum() - 1.0).abs() <= 1e-10);
        }
    }
}

#[test]
fn floored_latent_samples_stay_at_the_mean() {
    let g = DiagGaussian::new(vec![0.4, -2.0], vec![(1e-6f64).ln(); 2]);
    let z = sample_latent(&g, &mut SeedStream::new(36).rng("z"), 1000);
    for row in z.rows() {
        assert!((row[0] - 0.4).abs() <= 1e-2 && (row[1] + 2.0).abs() <= 1e-2);
    }
}

#[test]
fn latent_sample_mean_converges() {
    let g = DiagGaussian::new(vec![0.7, -1.3, 0.0], vec![0.5f64.ln(), 2.0f64.ln(), 0.0]);
    let n = 100_000;
    let z = sample_latent(&g, &mut SeedStream::new(37).rng("z"), n);
    let mean = z.mean_axis(ndarray::Axis(0)).unwrap();
    for d in 0..3 {
        let sigma = (0.5 * g.log_var[d]).exp();
        assert!(
            (mean[d] - g.mean[d]).abs() <= 3.0 * sigma / (n as f64).sqrt(),
            "dim {d}"
        );
    }
}

#[test]
fn pathwise_gradient_wrt_mean_is_one() {
    let eps = Matrix::from_shape_vec((1, 3), vec![0.3, -1.1, 0.8]).unwrap();
    let log_var = Matrix::from_shape_vec((1, 3), vec![-0.5, 0.2, 0.0]).unwrap();
    let check = gssm_autodiff::grad_check(
        |t, mu| {
            let lv = t.input(log_var.clone());
            let e = t.input(eps.clone());
            let z = gssm_core::dist::reparameterize(
                t,
                GaussianVars {
                    mean: mu,
                    log_var: lv,
                },
                e,
            )?;
            Ok(t.mean(z))
        },
        &Matrix::from_shape_vec((1, 3), vec![0.1, 0.2, 0.3]).unwrap(),
        1e-6,
    )
    .unwrap();
    assert!(check.passes(1e-8));
    let mut t = Tape::new();
    let mu = t.leaf(Matrix::zeros((1, 1)));
    let lv = t.input(Matrix::zeros((1, 1)));
    let e = t.input(Matrix::from_elem((1, 1), 0.42));
    let z = gssm_core::dist::reparameterize(
        &mut t,
        GaussianVars {
            mean: mu,
            log_var: lv,
        },
        e,
    )
    .unwrap();
    let z = t.sum(z);
    assert_eq!(t.backward(z).unwrap().wrt(mu)[[0, 0]], 1.0);
}
