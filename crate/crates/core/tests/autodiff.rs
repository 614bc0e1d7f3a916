use proptest::prelude::*;
use rand::Rng;

use segcam::gradcheck::finite_diff_check;
use segcam::rng::{self, Purpose};
use segcam::{Error, Graph, Tensor};

fn random(seed: u64, dims: &[usize]) -> Tensor<f64> {
    let mut r = rng::generator(seed, Purpose::Probe, dims.iter().product::<usize>() as u64);
    Tensor::from_fn(dims, |_| r.random_range(-1.0..1.0)).unwrap()
}

/// Six nested loops over (out channel, row, col, in channel, ky, kx).
fn conv_oracle(x: &Tensor<f64>, k: &Tensor<f64>, b: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
    let [n, cin, h, w] = x.dims4("x").unwrap();
    let [cout, _, kh, kw] = k.dims4("k").unwrap();
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * cout * oh * ow];
    for b_i in 0..n {
        for o in 0..cout {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = b.data()[o];
                    for c in 0..cin {
                        for a in 0..kh {
                            for d in 0..kw {
                                let y = (i * stride + a) as isize - pad as isize;
                                let z = (j * stride + d) as isize - pad as isize;
                                if y >= 0 && z >= 0 && (y as usize) < h && (z as usize) < w {
                                    acc += x.at(&[b_i, c, y as usize, z as usize]) * k.at(&[o, c, a, d]);
                                }
                            }
                        }
                    }
                    out[((b_i * cout + o) * oh + i) * ow + j] = acc;
                }
            }
        }
    }
    Tensor::new(&[n, cout, oh, ow], out).unwrap()
}

fn conv(x: &Tensor<f64>, k: &Tensor<f64>, b: &Tensor<f64>, stride: usize, pad: usize) -> Result<Tensor<f64>, Error> {
    let mut g = Graph::new();
    let (xi, ki, bi) = (g.leaf(x.clone(), false), g.leaf(k.clone(), false), g.leaf(b.clone(), false));
    let y = g.conv2d(xi, ki, bi, stride, pad)?;
    Ok(g.value(y)?.clone())
}

#[test]
fn conv_scalar_kernel_scales() {
    let x = Tensor::full(&[1, 1, 3, 3], 1.0).unwrap();
    let y = conv(&x, &Tensor::full(&[1, 1, 1, 1], 2.0).unwrap(), &Tensor::zeros(&[1]).unwrap(), 1, 0).unwrap();
    assert_eq!(y.data(), &[2.0; 9]);
}

#[test]
fn conv_all_ones_center_is_total() {
    let x = Tensor::new(&[1, 1, 3, 3], (1..=9).map(f64::from).collect()).unwrap();
    let y = conv(&x, &Tensor::full(&[1, 1, 3, 3], 1.0).unwrap(), &Tensor::zeros(&[1]).unwrap(), 1, 1).unwrap();
    assert_eq!(y.at(&[0, 0, 1, 1]), 45.0);
}

#[test]
fn conv_matches_direct_loops() {
    let x = random(1, &[1, 2, 5, 5]);
    let k = random(2, &[3, 2, 3, 3]);
    let b = random(3, &[3]);
    for (stride, pad) in [(1, 0), (1, 1), (2, 1)] {
        let got = conv(&x, &k, &b, stride, pad).unwrap();
        let want = conv_oracle(&x, &k, &b, stride, pad);
        assert_eq!(got.dims(), want.dims());
        assert!(got.max_abs_diff(&want) < 1e-6);
    }
}

#[test]
fn conv_shape_errors_name_the_axis() {
    let x = random(1, &[1, 2, 5, 5]);
    let k = random(2, &[3, 4, 3, 3]);
    let err = conv(&x, &k, &random(3, &[3]), 1, 1).unwrap_err().to_string();
    assert!(err.contains("channel"), "{err}");
    let even = random(2, &[3, 2, 2, 2]);
    assert!(conv(&x, &even, &random(3, &[3]), 1, 1).is_err());
    let err = conv(&x, &random(2, &[3, 2, 3, 3]), &random(3, &[2]), 1, 1).unwrap_err().to_string();
    assert!(err.contains("bias"), "{err}");
}

#[test]
fn elementwise_examples() {
    let mut g = Graph::<f32>::new();
    let x = g.leaf(Tensor::new(&[1, 1, 2, 2], vec![-1.0, 2.0, 0.0, -3.0]).unwrap(), false);
    let r = g.relu(x).unwrap();
    assert_eq!(g.value(r).unwrap().data(), &[0.0, 2.0, 0.0, 0.0]);

    let y = g.leaf(Tensor::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(), false);
    let p = g.maxpool2(y).unwrap();
    assert_eq!(g.value(p).unwrap().data(), &[4.0]);

    let z = g.leaf(Tensor::new(&[1, 1, 1, 1], vec![5.0]).unwrap(), false);
    let u = g.upsample2(z).unwrap();
    assert_eq!(g.value(u).unwrap().data(), &[5.0; 4]);

    let odd = g.leaf(Tensor::zeros(&[1, 1, 3, 2]).unwrap(), false);
    assert!(g.maxpool2(odd).is_err());
    let other = g.leaf(Tensor::zeros(&[1, 1, 4, 4]).unwrap(), false);
    assert!(g.concat_channels(y, other).is_err());
}

#[test]
fn relu_gate_and_fan_out() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::new(&[1, 1, 1, 2], vec![-1.0, 2.0]).unwrap(), true);
    let y = g.relu(x).unwrap();
    let grads = g.backward(y, &Tensor::full(&[1, 1, 1, 2], 1.0).unwrap()).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[0.0, 1.0]);

    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::full(&[1, 1, 1, 1], 3.0).unwrap(), true);
    let y = g.add(x, x).unwrap();
    let grads = g.backward(y, &Tensor::full(&[1, 1, 1, 1], 1.0).unwrap()).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[2.0]);
}

#[test]
fn backward_rejects_unknown_nodes_and_bad_seeds() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::zeros(&[1, 1, 2, 2]).unwrap(), true);
    let mut other = Graph::<f64>::new();
    for _ in 0..3 {
        other.leaf(Tensor::zeros(&[1]).unwrap(), false);
    }
    let foreign = other.leaf(Tensor::zeros(&[1]).unwrap(), false);
    assert!(matches!(g.backward(foreign, &Tensor::zeros(&[1]).unwrap()), Err(Error::UnknownNode(3))));
    assert!(g.backward(x, &Tensor::zeros(&[1, 1, 1, 1]).unwrap()).is_err());
}

/// A small net with a skip: `s = relu(conv(x))`, `y = conv(concat(s, upsample(maxpool(s))))`.
fn skip_net(g: &mut Graph<f64>, x: &Tensor<f64>, seed: u64) -> (segcam::NodeId, segcam::NodeId, segcam::NodeId) {
    let xi = g.leaf(x.clone(), true);
    let k1 = g.leaf(random(seed, &[2, 1, 3, 3]), false);
    let b1 = g.leaf(random(seed + 1, &[2]), false);
    let s = g.conv2d(xi, k1, b1, 1, 1).unwrap();
    let s = g.relu(s).unwrap();
    let p = g.maxpool2(s).unwrap();
    let u = g.upsample2(p).unwrap();
    let c = g.concat_channels(s, u).unwrap();
    let k2 = g.leaf(random(seed + 2, &[1, 4, 3, 3]), false);
    let b2 = g.leaf(random(seed + 3, &[1]), false);
    let y = g.conv2d(c, k2, b2, 1, 1).unwrap();
    (xi, s, y)
}

#[test]
fn fan_out_equals_sum_of_single_consumer_paths() {
    // surgery: cut one consumer at a time by feeding it a constant copy of `s`
    let x = random(7, &[1, 1, 4, 4]);
    let seed_grad = random(8, &[1, 1, 4, 4]);

    let mut g = Graph::new();
    let (_, s, y) = skip_net(&mut g, &x, 20);
    let total = g.backward(y, &seed_grad).unwrap().get(s).unwrap().clone();

    let path = |keep_skip: bool| -> Tensor<f64> {
        let mut g = Graph::new();
        let xi = g.leaf(x.clone(), true);
        let k1 = g.leaf(random(20, &[2, 1, 3, 3]), false);
        let b1 = g.leaf(random(21, &[2]), false);
        let s = g.conv2d(xi, k1, b1, 1, 1).unwrap();
        let s = g.relu(s).unwrap();
        let frozen = g.leaf(g.value(s).unwrap().clone(), false);
        let (skip_in, pool_in) = if keep_skip { (s, frozen) } else { (frozen, s) };
        let p = g.maxpool2(pool_in).unwrap();
        let u = g.upsample2(p).unwrap();
        let c = g.concat_channels(skip_in, u).unwrap();
        let k2 = g.leaf(random(22, &[1, 4, 3, 3]), false);
        let b2 = g.leaf(random(23, &[1]), false);
        let y = g.conv2d(c, k2, b2, 1, 1).unwrap();
        let grads = g.backward(y, &seed_grad).unwrap();
        grads.get(s).cloned().unwrap_or_else(|| Tensor::zeros(&[1, 2, 4, 4]).unwrap())
    };
    let a = path(true);
    let b = path(false);
    let sum = Tensor::new(a.dims(), a.data().iter().zip(b.data()).map(|(p, q)| p + q).collect()).unwrap();
    assert!(total.max_abs_diff(&sum) < 1e-12);
}

#[test]
fn finite_diff_examples() {
    let point = Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap();
    let analytic = Tensor::new(&[3], vec![2.0, 4.0, 6.0]).unwrap();
    let err = finite_diff_check(|t| Ok(t.data().iter().map(|v| v * v).sum()), &point, &analytic, 1e-3).unwrap();
    assert!(err < 1e-8, "{err}");

    let zeros = Tensor::zeros(&[3]).unwrap();
    assert_eq!(finite_diff_check(|_| Ok(4.0), &point, &zeros, 1e-3).unwrap(), 0.0);

    let bad = finite_diff_check(|t| Ok(1.0 / (t.data()[0] - 1.0)), &point, &zeros, 1e-3);
    assert!(bad.is_err() || bad.unwrap() > 1.0);
    assert!(matches!(
        finite_diff_check(|_| Ok(f64::NAN), &point, &zeros, 1e-3),
        Err(Error::NonFinite(_))
    ));
}

#[test]
fn conv_output_element_gradient_matches_finite_differences() {
    let x = random(11, &[1, 2, 5, 5]);
    let k = random(12, &[3, 2, 3, 3]);
    let b = random(13, &[3]);
    let (co, i, j) = (1, 2, 3);
    let element = |x: &Tensor<f64>, k: &Tensor<f64>| conv(x, k, &b, 1, 1).map(|y| y.at(&[0, co, i, j]));

    let mut g = Graph::new();
    let (xi, ki, bi) = (g.leaf(x.clone(), true), g.leaf(k.clone(), true), g.leaf(b.clone(), false));
    let y = g.conv2d(xi, ki, bi, 1, 1).unwrap();
    let mut seed = vec![0.0; 3 * 25];
    seed[co * 25 + i * 5 + j] = 1.0;
    let grads = g.backward(y, &Tensor::new(&[1, 3, 5, 5], seed).unwrap()).unwrap();

    let ex = finite_diff_check(|t| element(t, &k), &x, grads.get(xi).unwrap(), 1e-3).unwrap();
    let ek = finite_diff_check(|t| element(&x, t), &k, grads.get(ki).unwrap(), 1e-3).unwrap();
    assert!(ex < 1e-4 && ek < 1e-4, "{ex} {ek}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn conv_matches_oracle_on_random_shapes(
        seed in 0u64..1000,
        cin in 1usize..4,
        cout in 1usize..4,
        h in 3usize..8,
        w in 3usize..8,
        k in prop::sample::select(vec![1usize, 3, 5]),
        stride in 1usize..3,
    ) {
        let pad = k / 2;
        prop_assume!((h + 2 * pad - k) % stride == 0 && (w + 2 * pad - k) % stride == 0);
        let x = random(seed, &[1, cin, h, w]);
        let kern = random(seed + 1, &[cout, cin, k, k]);
        let b = random(seed + 2, &[cout]);
        let got = conv(&x, &kern, &b, stride, pad).unwrap();
        let want = conv_oracle(&x, &kern, &b, stride, pad);
        prop_assert_eq!(got.dims(), want.dims());
        prop_assert!(got.max_abs_diff(&want) < 1e-6);
    }

    #[test]
    fn backward_is_linear_in_the_seed(seed in 0u64..1000, lambda in 0.1f64..10.0) {
        let x = random(seed, &[1, 1, 4, 4]);
        let seed_grad = random(seed + 5, &[1, 1, 4, 4]);
        let mut g = Graph::new();
        let (xi, s, y) = skip_net(&mut g, &x, seed);
        let one = g.backward(y, &seed_grad).unwrap();
        let scaled = g.backward(y, &seed_grad.scale(lambda)).unwrap();
        for id in [xi, s] {
            let expect = one.get(id).unwrap().scale(lambda);
            prop_assert!(scaled.get(id).unwrap().max_abs_diff(&expect) < 1e-5);
        }
    }

    #[test]
    fn forward_and_backward_are_bit_deterministic(seed in 0u64..1000) {
        let x = random(seed, &[1, 1, 4, 4]);
        let seed_grad = random(seed + 5, &[1, 1, 4, 4]);
        let run = || {
            let mut g = Graph::new();
            let (xi, _, y) = skip_net(&mut g, &x, seed);
            let grads = g.backward(y, &seed_grad).unwrap();
            (g.value(y).unwrap().clone(), grads.get(xi).unwrap().clone())
        };
        prop_assert_eq!(run(), run());
    }
}
