use msenet_tensor::gradcheck::check_gradients;
use msenet_tensor::ops::{
    add, concat_outer, conv2d, conv2d_forward, frozen_batch_norm, max_pool2d, mul, relu, reshape, sum,
};
use msenet_tensor::{gemm, gemm_view, MatMut, MatRef, Tape, Tensor, Var};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-4;
const H: f64 = 1e-6;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn uniform(shape: &[usize], scale: f64, r: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| r.gen_range(-scale..scale))
}

/// `Σ w ⊙ x` with fixed random `w`.
fn probe<'t>(tape: &'t Tape<f64>, x: Var<'t, f64>, seed: u64) -> Var<'t, f64> {
    let w = uniform(&x.shape(), 1.0, &mut rng(seed));
    sum(mul(x, tape.constant(w)).unwrap())
}

fn conv_oracle(x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&Tensor<f64>>, stride: usize, pad: usize) -> Tensor<f64> {
    let (n, cin, h, wd) = x.dims4().unwrap();
    let (cout, _, kh, kw) = w.dims4().unwrap();
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (wd + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * cout * ho * wo];
    for bi in 0..n {
        for o in 0..cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b.map_or(0.0, |b| b.data()[o]);
                    for i in 0..cin {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let y = (oy * stride + ky) as isize - pad as isize;
                                let xx = (ox * stride + kx) as isize - pad as isize;
                                if y < 0 || xx < 0 || y >= h as isize || xx >= wd as isize {
                                    continue;
                                }
                                acc += w.data()[((o * cin + i) * kh + ky) * kw + kx]
                                    * x.data()[((bi * cin + i) * h + y as usize) * wd + xx as usize];
                            }
                        }
                    }
                    out[((bi * cout + o) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    Tensor::from_vec(&[n, cout, ho, wo], out).unwrap()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Random convolution geometry that yields at least one output pixel.
fn geometry() -> impl Strategy<Value = (usize, usize, usize, usize, usize, usize, usize, usize)> {
    (1usize..3, 1usize..4, 1usize..4, 1usize..4, 1usize..3, 3usize..9, 3usize..9).prop_flat_map(
        |(b, cin, cout, k, stride, h, w)| {
            (Just(b), Just(cin), Just(cout), Just(k), Just(stride), 0..=k / 2, Just(h.max(k)), Just(w.max(k)))
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv_matches_loop_oracle((b, cin, cout, k, stride, pad, h, w) in geometry(), seed in any::<u64>(), with_bias in any::<bool>()) {
        let mut r = rng(seed);
        let x = uniform(&[b, cin, h, w], 1.0, &mut r);
        let wt = uniform(&[cout, cin, k, k], 1.0, &mut r);
        let bias = with_bias.then(|| uniform(&[cout], 1.0, &mut r));
        let got = conv2d_forward(&x, &wt, bias.as_ref(), stride, pad).unwrap();
        let want = conv_oracle(&x, &wt, bias.as_ref(), stride, pad);
        prop_assert_eq!(got.shape(), want.shape());
        prop_assert!(max_abs_diff(got.data(), want.data()) < 1e-10);

        // single precision tracks double precision
        let got32 = conv2d_forward(&Tensor::<f32>::from_f64(&x), &Tensor::<f32>::from_f64(&wt), bias.as_ref().map(Tensor::<f32>::from_f64).as_ref(), stride, pad).unwrap();
        prop_assert!(max_abs_diff(got32.to_f64().data(), want.data()) < 1e-4);
    }

    #[test]
    fn conv_gradients_match_finite_differences((b, cin, cout, k, stride, pad, h, w) in geometry(), seed in any::<u64>()) {
        let mut r = rng(seed);
        let inputs = vec![
            uniform(&[b, cin, h, w], 1.0, &mut r),
            uniform(&[cout, cin, k, k], 1.0, &mut r),
            uniform(&[cout], 1.0, &mut r),
        ];
        let report = check_gradients(&inputs, H, |tape, v| probe(tape, conv2d(v[0], v[1], Some(v[2]), stride, pad).unwrap(), seed ^ 1));
        prop_assert!(report.passes(TOL), "{:?}", report);
    }

    #[test]
    fn gemm_matches_naive_product(m in 1usize..9, k in 0usize..9, n in 1usize..9, ta in any::<bool>(), tb in any::<bool>(), seed in any::<u64>()) {
        let mut r = rng(seed);
        let a = uniform(&[m * k], 1.0, &mut r).into_data();
        let b = uniform(&[k * n], 1.0, &mut r).into_data();
        let c0 = uniform(&[m * n], 1.0, &mut r).into_data();
        let at = |i: usize, p: usize| if ta { a[p * m + i] } else { a[i * k + p] };
        let bt = |p: usize, j: usize| if tb { b[j * k + p] } else { b[p * n + j] };
        let want: Vec<f64> = (0..m * n)
            .map(|e| {
                let (i, j) = (e / n, e % n);
                0.5 * (0..k).map(|p| at(i, p) * bt(p, j)).sum::<f64>() + 2.0 * c0[e]
            })
            .collect();
        let mut c = c0.clone();
        gemm(m, k, n, 0.5, &a, ta, &b, tb, 2.0, &mut c);
        prop_assert!(max_abs_diff(&c, &want) < 1e-12);

        // the strided-view entry point agrees on the untransposed layout
        if !ta && !tb {
            let mut cv = c0.clone();
            gemm_view(0.5, MatRef::new(&a, m, k), MatRef::new(&b, k, n), 2.0, MatMut::new(&mut cv, m, n));
            prop_assert!(max_abs_diff(&cv, &want) < 1e-12);
        }
    }

    #[test]
    fn max_pool_matches_window_maximum(b in 1usize..3, c in 1usize..3, h in 3usize..9, w in 3usize..9, seed in any::<u64>()) {
        let mut r = rng(seed);
        // distinct values keep the maximiser unique for the gradient check
        let mut values: Vec<f64> = (0..b * c * h * w).map(|i| i as f64 * 0.01).collect();
        values.shuffle(&mut r);
        let x = Tensor::from_vec(&[b, c, h, w], values).unwrap();
        let tape = Tape::new();
        let y = max_pool2d(tape.constant(x.clone()), 3, 2, 1).unwrap().value();
        let (ho, wo) = ((h - 1) / 2 + 1, (w - 1) / 2 + 1);
        prop_assert_eq!(y.shape(), &[b, c, ho, wo]);
        for plane in 0..b * c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = f64::NEG_INFINITY;
                    for iy in (2 * oy).saturating_sub(1)..(2 * oy + 2).min(h) {
                        for ix in (2 * ox).saturating_sub(1)..(2 * ox + 2).min(w) {
                            best = best.max(x.data()[(plane * h + iy) * w + ix]);
                        }
                    }
                    prop_assert_eq!(y.data()[(plane * ho + oy) * wo + ox], best);
                }
            }
        }
        let report = check_gradients(&[x], 1e-4, |tape, v| probe(tape, max_pool2d(v[0], 3, 2, 1).unwrap(), seed));
        prop_assert!(report.passes(TOL), "{:?}", report);
    }
}

#[test]
fn elementwise_gradients() {
    let mut r = rng(3);
    let a = uniform(&[2, 3, 4], 1.0, &mut r);
    let b = uniform(&[2, 3, 4], 1.0, &mut r);
    let report = check_gradients(&[a.clone(), b.clone()], H, |tape, v| probe(tape, add(v[0], v[1]).unwrap(), 4));
    assert!(report.passes(TOL), "add {report:?}");
    let report = check_gradients(&[a.clone(), b], H, |tape, v| probe(tape, mul(v[0], v[1]).unwrap(), 5));
    assert!(report.passes(TOL), "mul {report:?}");
    // keep every element away from the kink at zero
    let shifted = a.map(|x| if x.abs() < 0.05 { x + 0.1 } else { x });
    let report = check_gradients(&[shifted], H, |tape, v| probe(tape, relu(v[0]), 6));
    assert!(report.passes(TOL), "relu {report:?}");
}

#[test]
fn shape_op_gradients() {
    let mut r = rng(7);
    let a = uniform(&[2, 3, 2], 1.0, &mut r);
    let b = uniform(&[1, 3, 2], 1.0, &mut r);
    let report =
        check_gradients(std::slice::from_ref(&a), H, |tape, v| probe(tape, reshape(v[0], &[3, 4]).unwrap(), 8));
    assert!(report.passes(TOL), "reshape {report:?}");
    let report = check_gradients(&[a, b], H, |tape, v| probe(tape, concat_outer(&[v[0], v[1]]).unwrap(), 9));
    assert!(report.passes(TOL), "concat {report:?}");
}

#[test]
fn frozen_batch_norm_matches_formula_and_gradients() {
    let mut r = rng(11);
    let x = uniform(&[2, 3, 4, 4], 1.0, &mut r);
    let weight = uniform(&[3], 1.0, &mut r);
    let bias = uniform(&[3], 1.0, &mut r);
    let mean = uniform(&[3], 0.5, &mut r);
    let var = uniform(&[3], 0.5, &mut r).map(|v| v.abs() + 0.1);
    let eps = 1e-5;

    let tape = Tape::new();
    let y = frozen_batch_norm(
        tape.constant(x.clone()),
        tape.constant(weight.clone()),
        tape.constant(bias.clone()),
        &mean,
        &var,
        eps,
    )
    .unwrap()
    .value();
    let want: Vec<f64> = (0..x.len())
        .map(|e| {
            let c = (e / 16) % 3;
            (x.data()[e] - mean.data()[c]) / (var.data()[c] + eps).sqrt() * weight.data()[c] + bias.data()[c]
        })
        .collect();
    assert!(max_abs_diff(y.data(), &want) < 1e-12);

    let report = check_gradients(&[x, weight, bias], H, |tape, v| {
        probe(tape, frozen_batch_norm(v[0], v[1], v[2], &mean, &var, eps).unwrap(), 12)
    });
    assert!(report.passes(TOL), "{report:?}");
}
