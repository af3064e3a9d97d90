//! Independent oracles for the layer primitives: nested-loop convolution
//! references, dense graph products, and central finite-difference gradient
//! checks (64-bit).

use std::sync::Arc;

use graphstad::check::{finite_difference_check, REL_TOL_PER_OP};
use graphstad::tensor::{
    batchnorm, conv3d, deconv3d, fc, gcn_layer, global_attention_pool, lstm_layer, maxpool3d,
    maxunpool3d, mean, mul, relu, sigmoid, softmax_last, square, sum, BatchNormMode, LstmParams,
    Propagation, RunningStats, Tensor,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::from_vec(shape, data)
}

fn randn_param(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::param(shape, data)
}

/// Six-nested-loop cross-correlation reference, stride 1.
fn conv3d_oracle(
    x: &[f64],
    w: &[f64],
    b: &[f64],
    dims: (usize, usize, usize, usize, usize, usize), // B,Ci,Co,D1,D2,D3
    k: usize,
    p: usize,
) -> Vec<f64> {
    let (nb, ci, co, d1, d2, d3) = dims;
    let sp = d1 * d2 * d3;
    let mut out = vec![0.0; nb * co * sp];
    for n in 0..nb {
        for oc in 0..co {
            for z in 0..d1 {
                for y in 0..d2 {
                    for xx in 0..d3 {
                        let mut acc = b[oc];
                        for ic in 0..ci {
                            for kz in 0..k {
                                for ky in 0..k {
                                    for kx in 0..k {
                                        let zi = z as isize + kz as isize - p as isize;
                                        let yi = y as isize + ky as isize - p as isize;
                                        let xi = xx as isize + kx as isize - p as isize;
                                        if zi < 0
                                            || yi < 0
                                            || xi < 0
                                            || zi >= d1 as isize
                                            || yi >= d2 as isize
                                            || xi >= d3 as isize
                                        {
                                            continue;
                                        }
                                        let xv = x[((n * ci + ic) * d1 + zi as usize) * d2 * d3
                                            + yi as usize * d3
                                            + xi as usize];
                                        let wv = w[(((oc * ci + ic) * k + kz) * k + ky) * k + kx];
                                        acc += xv * wv;
                                    }
                                }
                            }
                        }
                        out[((n * co + oc) * d1 + z) * d2 * d3 + y * d3 + xx] = acc;
                    }
                }
            }
        }
    }
    out
}

/// Scatter reference for the transposed convolution, stride 1.
fn deconv3d_oracle(
    x: &[f64],
    w: &[f64],
    b: &[f64],
    dims: (usize, usize, usize, usize, usize, usize), // B,Ci,Co,D1,D2,D3
    k: usize,
    p: usize,
) -> Vec<f64> {
    let (nb, ci, co, d1, d2, d3) = dims;
    let sp = d1 * d2 * d3;
    let mut out = vec![0.0; nb * co * sp];
    for n in 0..nb {
        for oc in 0..co {
            let base = (n * co + oc) * sp;
            for v in &mut out[base..base + sp] {
                *v = b[oc];
            }
        }
    }
    for n in 0..nb {
        for ic in 0..ci {
            for z in 0..d1 {
                for y in 0..d2 {
                    for xx in 0..d3 {
                        let xv = x[((n * ci + ic) * d1 + z) * d2 * d3 + y * d3 + xx];
                        for oc in 0..co {
                            for kz in 0..k {
                                for ky in 0..k {
                                    for kx in 0..k {
                                        let zo = z as isize + kz as isize - p as isize;
                                        let yo = y as isize + ky as isize - p as isize;
                                        let xo = xx as isize + kx as isize - p as isize;
                                        if zo < 0
                                            || yo < 0
                                            || xo < 0
                                            || zo >= d1 as isize
                                            || yo >= d2 as isize
                                            || xo >= d3 as isize
                                        {
                                            continue;
                                        }
                                        let wv = w[(((ic * co + oc) * k + kz) * k + ky) * k + kx];
                                        out[((n * co + oc) * d1 + zo as usize) * d2 * d3
                                            + yo as usize * d3
                                            + xo as usize] += xv * wv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

#[test]
fn conv3d_matches_nested_loop_oracle_seed7() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (nb, ci, co, d1, d2, d3) = (2, 2, 3, 4, 5, 3);
    let x = randn(&mut rng, &[nb, ci, d1, d2, d3]);
    let w = randn(&mut rng, &[co, ci, 3, 3, 3]);
    let b = randn(&mut rng, &[co]);
    let y = conv3d(&x, &w, &b, 1);
    let oracle = conv3d_oracle(
        &x.to_vec(),
        &w.to_vec(),
        &b.to_vec(),
        (nb, ci, co, d1, d2, d3),
        3,
        1,
    );
    for (a, e) in y.to_vec().iter().zip(&oracle) {
        assert!((a - e).abs() < 1e-6, "{a} vs {e}");
    }
}

#[test]
fn conv_and_deconv_match_oracles_on_50_random_shapes() {
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    for case in 0..50 {
        let nb = rng.random_range(1..3);
        let ci = rng.random_range(1..4);
        let co = rng.random_range(1..4);
        let d1 = rng.random_range(1..6);
        let d2 = rng.random_range(1..6);
        let d3 = rng.random_range(1..6);
        let x = randn(&mut rng, &[nb, ci, d1, d2, d3]);
        let b = randn(&mut rng, &[co]);

        let w = randn(&mut rng, &[co, ci, 3, 3, 3]);
        let y = conv3d(&x, &w, &b, 1);
        let oracle = conv3d_oracle(
            &x.to_vec(),
            &w.to_vec(),
            &b.to_vec(),
            (nb, ci, co, d1, d2, d3),
            3,
            1,
        );
        for (a, e) in y.to_vec().iter().zip(&oracle) {
            assert!((a - e).abs() < 1e-6, "conv case {case}: {a} vs {e}");
        }

        let wt = randn(&mut rng, &[ci, co, 3, 3, 3]);
        let y = deconv3d(&x, &wt, &b, 1);
        let oracle = deconv3d_oracle(
            &x.to_vec(),
            &wt.to_vec(),
            &b.to_vec(),
            (nb, ci, co, d1, d2, d3),
            3,
            1,
        );
        for (a, e) in y.to_vec().iter().zip(&oracle) {
            assert!((a - e).abs() < 1e-6, "deconv case {case}: {a} vs {e}");
        }
    }
}

#[test]
fn deconv_forward_equals_conv_input_gradient_seed11() {
    // adjoint identity: deconv(g; w) == d/dx <conv(x; w), g>
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (nb, ci, co, d1, d2, d3) = (1, 2, 3, 3, 4, 2);
    let x = randn_param(&mut rng, &[nb, ci, d1, d2, d3]);
    let w = randn(&mut rng, &[co, ci, 3, 3, 3]);
    let b0 = Tensor::zeros(&[co]);
    let g = randn(&mut rng, &[nb, co, d1, d2, d3]);

    let y = conv3d(&x, &w, &b0, 1);
    sum(&mul(&y, &g)).backward();
    let dx = x.grad().unwrap();

    let bz = Tensor::zeros(&[ci]);
    let via_deconv = deconv3d(&g, &w, &bz, 1);
    for (a, e) in via_deconv.to_vec().iter().zip(&dx) {
        assert!((a - e).abs() < 1e-9, "{a} vs {e}");
    }
}

#[test]
fn conv_deconv_adjointness_inner_products_agree() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for _ in 0..5 {
        let (nb, ci, co, d1, d2, d3) = (1, 2, 2, 3, 3, 4);
        let x = randn(&mut rng, &[nb, ci, d1, d2, d3]);
        let y = randn(&mut rng, &[nb, co, d1, d2, d3]);
        let w = randn(&mut rng, &[co, ci, 3, 3, 3]);
        let b0 = Tensor::zeros(&[co]);
        let bz = Tensor::zeros(&[ci]);
        let lhs: f64 = conv3d(&x, &w, &b0, 1)
            .to_vec()
            .iter()
            .zip(y.to_vec())
            .map(|(a, b)| a * b)
            .sum();
        let rhs: f64 = deconv3d(&y, &w, &bz, 1)
            .to_vec()
            .iter()
            .zip(x.to_vec())
            .map(|(a, b)| a * b)
            .sum();
        assert!((lhs - rhs).abs() < 1e-5, "{lhs} vs {rhs}");
    }
}

#[test]
fn pool_unpool_pair_is_idempotent() {
    // non-negative values, as occupancy maps are; a negative window maximum
    // would lose to the zero fill on the second pass
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let n = 2 * 2 * 5 * 7 * 3;
    let data = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
    let x = Tensor::<f64>::from_vec(&[2, 2, 5, 7, 3], data);
    let (pooled, idx) = maxpool3d(&x);
    let unpooled = maxunpool3d(&pooled, &idx);
    let (pooled2, idx2) = maxpool3d(&unpooled);
    assert_eq!(pooled.to_vec(), pooled2.to_vec());
    assert_eq!(idx, idx2);
    // scatter conservation
    let s1: f64 = pooled.to_vec().iter().sum();
    let s2: f64 = unpooled.to_vec().iter().sum();
    assert!((s1 - s2).abs() < 1e-12);
}

#[test]
fn gcn_matches_dense_matmul_oracle_on_random_30_node_graph() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let m = 30;
    let mut neighbors: Vec<Vec<usize>> = vec![Vec::new(); m];
    for i in 0..m {
        for j in (i + 1)..m {
            if rng.random_bool(0.15) {
                neighbors[i].push(j);
                neighbors[j].push(i);
            }
        }
    }
    let prop = Arc::new(Propagation::from_adjacency(m, &neighbors));
    let (f_in, f_out) = (4, 6);
    let h = randn(&mut rng, &[m, f_in]);
    let w = randn(&mut rng, &[f_in, f_out]);
    let b = randn(&mut rng, &[f_out]);
    let y = gcn_layer(&h, &prop, &w, &b);

    // dense oracle: Ahat * H * W + b
    let dense = prop.to_dense();
    let hv = h.to_vec();
    let wv = w.to_vec();
    let bv = b.to_vec();
    let mut hw = vec![0.0; m * f_out];
    for i in 0..m {
        for o in 0..f_out {
            for k in 0..f_in {
                hw[i * f_out + o] += hv[i * f_in + k] * wv[k * f_out + o];
            }
        }
    }
    let mut oracle = vec![0.0; m * f_out];
    for i in 0..m {
        for o in 0..f_out {
            let mut acc = bv[o];
            for j in 0..m {
                acc += dense[i * m + j] * hw[j * f_out + o];
            }
            oracle[i * f_out + o] = acc;
        }
    }
    for (a, e) in y.to_vec().iter().zip(&oracle) {
        assert!((a - e).abs() < 1e-6, "{a} vs {e}");
    }
}

// --- finite-difference gradient checks, one per differentiable op ---

#[test]
fn fd_conv3d() {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let x = randn_param(&mut rng, &[1, 2, 3, 3, 2]);
    let w = randn_param(&mut rng, &[2, 2, 3, 3, 3]);
    let b = randn_param(&mut rng, &[2]);
    let err = finite_difference_check(
        &[("x", x.clone()), ("w", w.clone()), ("b", b.clone())],
        10,
        &mut rng,
        || sum(&square(&conv3d(&x, &w, &b, 1))),
    );
    assert!(err < REL_TOL_PER_OP, "rel err {err}");
}

#[test]
fn fd_deconv3d() {
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let x = randn_param(&mut rng, &[1, 2, 3, 2, 3]);
    let w = randn_param(&mut rng, &[2, 2, 3, 3, 3]);
    let b = randn_param(&mut rng, &[2]);
    let err = finite_difference_check(
        &[("x", x.clone()), ("w", w.clone()), ("b", b.clone())],
        10,
        &mut rng,
        || sum(&square(&deconv3d(&x, &w, &b, 1))),
    );
    assert!(err < REL_TOL_PER_OP, "rel err {err}");
}

#[test]
fn fd_batchnorm_train_mode() {
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    let x = randn_param(&mut rng, &[4, 3, 5]);
    let gamma = randn_param(&mut rng, &[3]);
    let beta = randn_param(&mut rng, &[3]);
    let err = finite_difference_check(
        &[("x", x.clone()), ("gamma", gamma.clone()), ("beta", beta.clone())],
        10,
        &mut rng,
        || {
            // weight each output by a fixed pattern; sum-of-squares of a
            // batchnorm output is nearly invariant to x, which starves the
            // finite differences of signal
            let rs = RunningStats::new(3);
            let y = batchnorm(&x, &gamma, &beta, &rs, BatchNormMode::Train, 1e-5, 0.1);
            let probe: Vec<f64> = (0..y.numel()).map(|i| ((i * 7 + 3) % 11) as f64 / 11.0).collect();
            sum(&mul(&y, &Tensor::from_vec(&[4, 3, 5], probe)))
        },
    );
    assert!(err < REL_TOL_PER_OP, "rel err {err}");
}

#[test]
fn fd_fc_and_activations() {
    let mut rng = ChaCha8Rng::seed_from_u64(104);
    let x = randn_param(&mut rng, &[3, 4]);
    let w = randn_param(&mut rng, &[4, 5]);
    let b = randn_param(&mut rng, &[5]);
    let err = finite_difference_check(
        &[("x", x.clone()), ("w", w.clone()), ("b", b.clone())],
        10,
        &mut rng,
        || {
            let y = fc(&x, &w, &b);
            sum(&mul(&sigmoid(&y), &softmax_last(&y)))
        },
    );
    assert!(err < REL_TOL_PER_OP, "rel err {err}");
}

#[test]
fn fd_lstm_through_time() {
    let mut rng = ChaCha8Rng::seed_from_u64(105);
    let (f, h) = (3, 4);
    let seq = randn_param(&mut rng, &[4, 2, f]);
    let params = LstmParams {
        w_ih: randn_param(&mut rng, &[f, 4 * h]),
        w_hh: randn_param(&mut rng, &[h, 4 * h]),
        b: randn_param(&mut rng, &[4 * h]),
    };
    let err = finite_difference_check(
        &[
            ("seq", seq.clone()),
            ("w_ih", params.w_ih.clone()),
            ("w_hh", params.w_hh.clone()),
            ("b", params.b.clone()),
        ],
        10,
        &mut rng,
        || sum(&square(&lstm_layer(&seq, &params))),
    );
    assert!(err < REL_TOL_PER_OP, "rel err {err}");
}

#[test]
fn fd_gcn_and_attention_pool() {
    let mut rng = ChaCha8Rng::seed_from_u64(106);
    let m = 6;
    let prop = Arc::new(Propagation::UniformBlocks {
        n: m,
        blocks: vec![vec![0, 1, 2], vec![3, 4, 5]],
    });
    let h = randn_param(&mut rng, &[m, 3]);
    let w = randn_param(&mut rng, &[3, 4]);
    let b = randn_param(&mut rng, &[4]);
    let wg = randn_param(&mut rng, &[4, 1]);
    let bg = randn_param(&mut rng, &[1]);
    let err = finite_difference_check(
        &[
            ("h", h.clone()),
            ("w", w.clone()),
            ("b", b.clone()),
            ("wg", wg.clone()),
        ],
        10,
        &mut rng,
        || {
            // softplus rather than relu: the relu kink near zero spoils the
            // finite differences; relu has its own check with offset inputs
            let y = graphstad::tensor::softplus(&gcn_layer(&h, &prop, &w, &b));
            sum(&square(&global_attention_pool(&y, &wg, &bg)))
        },
    );
    assert!(err < REL_TOL_PER_OP, "rel err {err}");
    // the gate bias shifts every logit equally and cancels in the softmax,
    // so its exact gradient is zero; finite differences only see noise there
    assert!(bg.grad().unwrap()[0].abs() < 1e-12);
}

#[test]
fn fd_relu_away_from_kink() {
    let mut rng = ChaCha8Rng::seed_from_u64(109);
    let data: Vec<f64> = (0..24)
        .map(|_| {
            let m = rng.random_range(0.2..1.0);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    let x = Tensor::<f64>::param(&[4, 6], data);
    let err = finite_difference_check(&[("x", x.clone())], 10, &mut rng, || {
        sum(&square(&relu(&x)))
    });
    assert!(err < REL_TOL_PER_OP, "rel err {err}");
}

#[test]
fn fd_pool_unpool() {
    let mut rng = ChaCha8Rng::seed_from_u64(107);
    let x = randn_param(&mut rng, &[1, 2, 3, 4, 3]);
    let err = finite_difference_check(&[("x", x.clone())], 10, &mut rng, || {
        let (p, idx) = maxpool3d(&x);
        sum(&square(&maxunpool3d(&p, &idx)))
    });
    assert!(err < REL_TOL_PER_OP, "rel err {err}");
}

#[test]
fn fd_gru() {
    let mut rng = ChaCha8Rng::seed_from_u64(108);
    let (f, h) = (3, 4);
    let seq = randn_param(&mut rng, &[3, 2, f]);
    let params = graphstad::tensor::GruParams {
        w_ih: randn_param(&mut rng, &[f, 3 * h]),
        w_hh: randn_param(&mut rng, &[h, 3 * h]),
        b_ih: randn_param(&mut rng, &[3 * h]),
        b_hh: randn_param(&mut rng, &[3 * h]),
    };
    let err = finite_difference_check(
        &[
            ("seq", seq.clone()),
            ("w_ih", params.w_ih.clone()),
            ("w_hh", params.w_hh.clone()),
            ("b_ih", params.b_ih.clone()),
            ("b_hh", params.b_hh.clone()),
        ],
        10,
        &mut rng,
        || sum(&square(&graphstad::tensor::gru_layer(&seq, &params))),
    );
    assert!(err < REL_TOL_PER_OP, "rel err {err}");
}

#[test]
fn forward_is_deterministic_for_identical_inputs() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = randn(&mut rng, &[1, 2, 4, 4, 2]);
        let w = randn(&mut rng, &[3, 2, 3, 3, 3]);
        let b = randn(&mut rng, &[3]);
        mean(&square(&conv3d(&x, &w, &b, 1))).item()
    };
    assert_eq!(run().to_bits(), run().to_bits());
}
