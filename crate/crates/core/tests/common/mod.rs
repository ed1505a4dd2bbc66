#![allow(dead_code)]

use aphynity::augment::AugmentModel;
use aphynity::diffcore::{Graph, NodeId, ParamSet, Tensor};
use aphynity::integrators::DynamicsModel;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

/// Worst relative error between backward and central differences over
/// every coordinate of every entry in `params`.
pub fn gradcheck(build: impl Fn(&mut Graph<f64>) -> NodeId, params: &ParamSet<f64>) -> f64 {
    let value = |p: &ParamSet<f64>| {
        let mut g = Graph::new();
        let root = build(&mut g);
        g.forward(p).unwrap();
        g.scalar_value(root).unwrap()
    };
    let mut g = Graph::new();
    let root = build(&mut g);
    g.forward(params).unwrap();
    let grads = g.backward(root).unwrap();
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for (name, t) in params.iter() {
        for i in 0..t.numel() {
            let shifted = |d: f64| {
                let mut data = t.data().to_vec();
                data[i] += d;
                let mut p = params.clone();
                p.set(name, Tensor::new(t.shape().to_vec(), data).unwrap()).unwrap();
                value(&p)
            };
            let fd = (shifted(h) - shifted(-h)) / (2.0 * h);
            let an = grads.get(name).unwrap().data()[i];
            worst = worst.max((fd - an).abs() / fd.abs().max(an.abs()).max(1e-3));
        }
    }
    worst
}

pub fn squared_output(model: AugmentModel, x_shape: Vec<usize>) -> impl Fn(&mut Graph<f64>) -> NodeId {
    move |g| {
        let x = g.input("x", x_shape.clone(), true).unwrap();
        let y = model.build(g, x).unwrap();
        let s = g.square(y);
        g.sum(s)
    }
}
