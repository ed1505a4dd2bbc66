use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

/// Central finite differences of `f` at `params`, compared entrywise with
/// the analytic gradient. Returns the worst relative error.
fn gradcheck(
    build: impl Fn(&mut Graph<f64>) -> NodeId,
    params: &ParamSet<f64>,
) -> f64 {
    let mut g = Graph::new();
    let root = build(&mut g);
    g.forward(params).unwrap();
    let grads = g.backward(root).unwrap();
    let eval = |p: &ParamSet<f64>| {
        let mut g = Graph::new();
        let root = build(&mut g);
        g.forward(p).unwrap();
        g.scalar_value(root).unwrap()
    };
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for (name, t) in params.iter() {
        let analytic = grads.get(name).unwrap();
        for i in 0..t.numel() {
            let mut plus = t.data().to_vec();
            let mut minus = t.data().to_vec();
            plus[i] += h;
            minus[i] -= h;
            let mut pp = params.clone();
            pp.set(name, Tensor::new(t.shape().to_vec(), plus).unwrap()).unwrap();
            let mut pm = params.clone();
            pm.set(name, Tensor::new(t.shape().to_vec(), minus).unwrap()).unwrap();
            let fd = (eval(&pp) - eval(&pm)) / (2.0 * h);
            let an = analytic.data()[i];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-3);
            worst = worst.max(rel);
        }
    }
    worst
}

#[test]
fn square_forward_and_backward() {
    let mut g = Graph::new();
    let x = g.input("x", vec![], true).unwrap();
    let y = g.mul(x, x).unwrap();
    g.forward(&[("x", Tensor::scalar(3.0))]).unwrap();
    assert_eq!(g.scalar_value(y).unwrap(), 9.0);
    let grads = g.backward(y).unwrap();
    assert_eq!(grads.get("x").unwrap().item(), 6.0);
}

#[test]
fn sin_at_zero() {
    let mut g = Graph::new();
    let x = g.input("x", vec![], true).unwrap();
    let y = g.sin(x);
    g.forward(&[("x", Tensor::scalar(0.0))]).unwrap();
    assert_eq!(g.scalar_value(y).unwrap(), 0.0);
    assert_eq!(g.backward(y).unwrap().get("x").unwrap().item(), 1.0);
}

#[test]
fn identity_convolution_preserves_field() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let field = rand_tensor(&mut rng, &[2, 5, 6]);
    let mut k = vec![0.0; 2 * 2 * 9];
    k[4] = 1.0; // out 0 <- in 0 center
    k[3 * 9 + 4] = 1.0; // out 1 <- in 1 center
    for padding in [Padding::Zero, Padding::Circular, Padding::Replicate] {
        let mut g = Graph::new();
        let x = g.input("x", vec![2, 5, 6], false).unwrap();
        let kn = g.constant(Tensor::new(vec![2, 2, 3, 3], k.clone()).unwrap());
        let y = g.conv2d(x, kn, None, padding).unwrap();
        g.forward(&[("x", field.clone())]).unwrap();
        assert_eq!(g.value(y).unwrap(), field);
    }
}

fn laplace_kernel() -> Tensor<f64> {
    Tensor::new(
        vec![1, 1, 3, 3],
        vec![0.0, 1.0, 0.0, 1.0, -4.0, 1.0, 0.0, 1.0, 0.0],
    )
    .unwrap()
}

fn conv_once(field: Tensor<f64>, kernel: Tensor<f64>, padding: Padding) -> Tensor<f64> {
    let mut g = Graph::new();
    let x = g.input("x", field.shape().to_vec(), false).unwrap();
    let k = g.constant(kernel);
    let y = g.conv2d(x, k, None, padding).unwrap();
    g.forward(&[("x", field)]).unwrap();
    g.value(y).unwrap()
}

#[test]
fn zero_sum_stencil_on_constant_field_is_zero() {
    let field = Tensor::full(vec![1, 4, 4], 3.7);
    let out = conv_once(field, laplace_kernel(), Padding::Circular);
    assert!(out.data().iter().all(|&v| v == 0.0));
}

#[test]
fn laplacian_of_delta_zero_padding() {
    let mut d = vec![0.0; 25];
    d[2 * 5 + 2] = 1.0;
    let out = conv_once(Tensor::new(vec![1, 5, 5], d).unwrap(), laplace_kernel(), Padding::Zero);
    for y in 0..5 {
        for x in 0..5 {
            let expected = match (y as i32 - 2, x as i32 - 2) {
                (0, 0) => -4.0,
                (0, 1) | (0, -1) | (1, 0) | (-1, 0) => 1.0,
                _ => 0.0,
            };
            assert_eq!(out.data()[y * 5 + x], expected, "at ({y},{x})");
        }
    }
}

#[test]
fn laplacian_of_ramp_circular_nonzero_only_at_wrap_columns() {
    // u(x, y) = x on a 3×3 grid; columns x = 0 and x = 2 see the wrap jump.
    let u = Tensor::from_fn(vec![1, 3, 3], |i| (i % 3) as f64);
    let out = conv_once(u, laplace_kernel(), Padding::Circular);
    for y in 0..3 {
        assert_eq!(out.data()[y * 3], 3.0); // 2 + 1 - 2·0
        assert_eq!(out.data()[y * 3 + 1], 0.0);
        assert_eq!(out.data()[y * 3 + 2], -3.0); // 1 + 0 - 2·2
    }
}

#[test]
fn conv_rejects_non_3x3_kernel() {
    let mut g = Graph::<f64>::new();
    let x = g.input("x", vec![1, 5, 5], false).unwrap();
    let k = g.constant(Tensor::zeros(vec![1, 1, 5, 5]));
    assert!(matches!(
        g.conv2d(x, k, None, Padding::Zero),
        Err(crate::Error::KernelSize(_))
    ));
}

#[test]
fn forward_errors() {
    let mut g = Graph::<f64>::new();
    let x = g.input("x", vec![2], true).unwrap();
    let y = g.sum(x);
    assert!(matches!(g.backward(y), Err(crate::Error::NotForwarded)));
    let empty: [(&str, Tensor<f64>); 0] = [];
    assert!(matches!(g.forward(&empty), Err(crate::Error::Unbound(_))));
    assert!(matches!(
        g.forward(&[("x", Tensor::zeros(vec![3]))]),
        Err(crate::Error::Shape(_))
    ));
    g.forward(&[("x", Tensor::zeros(vec![2]))]).unwrap();
    assert!(matches!(g.backward(x), Err(crate::Error::NonScalarRoot(_))));
}

#[test]
fn shape_mismatch_at_build() {
    let mut g = Graph::<f64>::new();
    let a = g.input("a", vec![2, 3], false).unwrap();
    let b = g.input("b", vec![3, 2], false).unwrap();
    assert!(g.add(a, b).is_err());
    let w = g.input("w", vec![2, 4], false).unwrap();
    assert!(g.affine(a, w, None).is_err());
}

#[test]
fn untouched_leaf_gets_zero_gradient() {
    let mut g = Graph::new();
    let x = g.input("x", vec![], true).unwrap();
    let _unused = g.input("u", vec![3], true).unwrap();
    let y = g.square(x);
    g.forward(&[("x", Tensor::scalar(2.0)), ("u", Tensor::zeros(vec![3]))])
        .unwrap();
    let grads = g.backward(y).unwrap();
    assert_eq!(grads.get("u").unwrap().data(), &[0.0; 3]);
}

fn mlp_params(rng: &mut ChaCha8Rng) -> ParamSet<f64> {
    let mut p = ParamSet::new();
    p.insert("x", rand_tensor(rng, &[4, 3])).unwrap();
    p.insert("w0", rand_tensor(rng, &[3, 5])).unwrap();
    p.insert("b0", rand_tensor(rng, &[5])).unwrap();
    p.insert("w1", rand_tensor(rng, &[5, 5])).unwrap();
    p.insert("b1", rand_tensor(rng, &[5])).unwrap();
    p.insert("w2", rand_tensor(rng, &[5, 2])).unwrap();
    p.insert("b2", rand_tensor(rng, &[2])).unwrap();
    p
}

fn mlp_loss(g: &mut Graph<f64>) -> NodeId {
    let x = g.input("x", vec![4, 3], true).unwrap();
    let mut h = x;
    for (l, (i, o)) in [(3, 5), (5, 5), (5, 2)].into_iter().enumerate() {
        let w = g.input(&format!("w{l}"), vec![i, o], true).unwrap();
        let b = g.input(&format!("b{l}"), vec![o], true).unwrap();
        h = g.affine(h, w, Some(b)).unwrap();
        if l < 2 {
            h = g.relu(h);
        }
    }
    let s = g.square(h);
    g.sum(s)
}

#[test]
fn gradcheck_three_layer_mlp() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let p = mlp_params(&mut rng);
    let err = gradcheck(mlp_loss, &p);
    assert!(err < 1e-4, "relative error {err}");
}

#[test]
fn gradcheck_conv_batchnorm_stack() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for padding in [Padding::Zero, Padding::Circular, Padding::Replicate] {
        let mut p = ParamSet::new();
        p.insert("x", rand_tensor(&mut rng, &[2, 2, 4, 5])).unwrap();
        p.insert("k0", rand_tensor(&mut rng, &[3, 2, 3, 3])).unwrap();
        p.insert("c0", rand_tensor(&mut rng, &[3])).unwrap();
        p.insert("gamma", rand_tensor(&mut rng, &[3])).unwrap();
        p.insert("beta", rand_tensor(&mut rng, &[3])).unwrap();
        p.insert("k1", rand_tensor(&mut rng, &[2, 3, 3, 3])).unwrap();
        let build = move |g: &mut Graph<f64>| {
            let x = g.input("x", vec![2, 2, 4, 5], true).unwrap();
            let k0 = g.input("k0", vec![3, 2, 3, 3], true).unwrap();
            let c0 = g.input("c0", vec![3], true).unwrap();
            let ga = g.input("gamma", vec![3], true).unwrap();
            let be = g.input("beta", vec![3], true).unwrap();
            let k1 = g.input("k1", vec![2, 3, 3, 3], true).unwrap();
            let h = g.conv2d(x, k0, Some(c0), padding).unwrap();
            let h = g.batchnorm(h, ga, be).unwrap();
            let h = g.relu(h);
            let h = g.conv2d(h, k1, None, padding).unwrap();
            let s = g.sin(h);
            let s = g.square(s);
            g.mean(s)
        };
        let err = gradcheck(build, &p);
        assert!(err < 1e-4, "{padding:?}: relative error {err}");
    }
}

#[test]
fn gradcheck_elementwise_and_broadcast() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut p = ParamSet::new();
    p.insert("a", rand_tensor(&mut rng, &[3, 2])).unwrap();
    p.insert("b", rand_tensor(&mut rng, &[3, 2])).unwrap();
    p.insert("s", rand_tensor(&mut rng, &[])).unwrap();
    let build = |g: &mut Graph<f64>| {
        let a = g.input("a", vec![3, 2], true).unwrap();
        let b = g.input("b", vec![3, 2], true).unwrap();
        let s = g.input("s", vec![], true).unwrap();
        let sp = g.softplus(s);
        let ab = g.mul(a, b).unwrap();
        let t = g.mul(sp, ab).unwrap();
        let u = g.sub(t, s).unwrap();
        let sq = g.square(b);
        let one = g.scalar(1.0);
        let pos = g.add(sq, one).unwrap();
        let r = g.sqrt(pos);
        let v = g.add(u, r).unwrap();
        let w = g.scale(v, -1.5);
        let m = g.mean(w);
        let q = g.sum(a);
        g.add(m, q).unwrap()
    };
    let err = gradcheck(build, &p);
    assert!(err < 1e-4, "relative error {err}");
}

#[test]
fn gradcheck_deep_composition() {
    // depth-10 chain of mixed primitives on a small vector
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut p = ParamSet::new();
    p.insert("x", rand_tensor(&mut rng, &[2, 3])).unwrap();
    p.insert("w", rand_tensor(&mut rng, &[3, 3])).unwrap();
    let build = |g: &mut Graph<f64>| {
        let mut h = g.input("x", vec![2, 3], true).unwrap();
        let w = g.input("w", vec![3, 3], true).unwrap();
        for d in 0..10 {
            h = match d % 4 {
                0 => g.affine(h, w, None).unwrap(),
                1 => g.sin(h),
                2 => g.softplus(h),
                _ => g.scale(h, 0.7),
            };
        }
        let s = g.square(h);
        g.sum(s)
    };
    let err = gradcheck(build, &p);
    assert!(err < 1e-4, "relative error {err}");
}

#[test]
fn forward_backward_bit_identical_on_repeat() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let p = mlp_params(&mut rng);
    let run = || {
        let mut g = Graph::new();
        let root = mlp_loss(&mut g);
        g.forward(&p).unwrap();
        (g.scalar_value(root).unwrap(), g.backward(root).unwrap())
    };
    let (v1, g1) = run();
    let (v2, g2) = run();
    assert_eq!(v1.to_bits(), v2.to_bits());
    assert_eq!(g1, g2);
}

#[test]
fn non_finite_intermediate_is_reported() {
    let mut g = Graph::new();
    let x = g.input("x", vec![], false).unwrap();
    let neg = g.scale(x, -1.0);
    let _r = g.sqrt(neg);
    assert!(matches!(
        g.forward(&[("x", Tensor::scalar(1.0))]),
        Err(crate::Error::NonFinite(_))
    ));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    /// ∇(a·f + b·g) = a·∇f + b·∇g.
    #[test]
    fn backward_is_linear(a in -3.0f64..3.0, b in -3.0f64..3.0, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&mut rng, &[3, 2]);
        let w = rand_tensor(&mut rng, &[2, 2]);
        let p: ParamSet<f64> = [("x".to_string(), x), ("w".to_string(), w)].into_iter().collect();
        let parts = |g: &mut Graph<f64>| {
            let x = g.input("x", vec![3, 2], true).unwrap();
            let w = g.input("w", vec![2, 2], true).unwrap();
            let h = g.affine(x, w, None).unwrap();
            let s = g.sin(h);
            let f = g.sum(s);
            let q = g.square(h);
            let gq = g.mean(q);
            (f, gq)
        };
        let grad_of = |which: u8| {
            let mut g = Graph::new();
            let (f, q) = parts(&mut g);
            let root = match which {
                0 => f,
                1 => q,
                _ => {
                    let fa = g.scale(f, a);
                    let qb = g.scale(q, b);
                    g.add(fa, qb).unwrap()
                }
            };
            g.forward(&p).unwrap();
            g.backward(root).unwrap()
        };
        let (gf, gg, gc) = (grad_of(0), grad_of(1), grad_of(2));
        for name in ["x", "w"] {
            let (f, q, c) = (gf.get(name).unwrap(), gg.get(name).unwrap(), gc.get(name).unwrap());
            for i in 0..c.numel() {
                let expected = a * f.data()[i] + b * q.data()[i];
                prop_assert!((c.data()[i] - expected).abs() < 1e-12 * (1.0 + expected.abs()));
            }
        }
    }
}
