use super::*;
use crate::augment::MlpSpec;
use crate::datagen::{DatasetMeta, Split, System};
use crate::physics::{Family, PhysicalModel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `dX/dt = a·X` with a free scalar `a`.
struct Linear;

impl HybridDynamics<f64> for Linear {
    fn physical(&self, g: &mut Graph<f64>, x: NodeId) -> Result<Option<NodeId>> {
        let a = g.input("phys.a", Vec::new(), true)?;
        g.mul(x, a).map(Some)
    }

    fn augmentation(&self, _: &mut Graph<f64>, _: NodeId) -> Result<Option<NodeId>> {
        Ok(None)
    }

    fn physical_values(&self, p: &ParamSet<f64>) -> Result<BTreeMap<String, f64>> {
        Ok(BTreeMap::from([("a".into(), p.get("phys.a").unwrap().item())]))
    }
}

fn scalar_dataset(series: &[Vec<f64>], dt: f64) -> Dataset {
    let meta = DatasetMeta {
        system: System::Pendulum,
        split: Split::Train,
        spec: StateSpec::Vector(1),
        n_traj: series.len(),
        n_states: series[0].len(),
        dt,
        true_params: BTreeMap::new(),
        noise_sigma: 0.0,
        seed: 0,
        dx: None,
        bc: None,
    };
    Dataset::new(meta, series.concat()).unwrap()
}

fn scalar_traj(v: &[f64]) -> Trajectory<f64> {
    let states = v.iter().map(|&x| Tensor::new(vec![1], vec![x]).unwrap()).collect();
    Trajectory::new(StateSpec::Vector(1), 0.5, states).unwrap()
}

fn pendulum_data(n: usize, seed: u64) -> Dataset {
    let cfg = crate::datagen::PendulumConfig { n_traj: n, steps: 10, ..Default::default() };
    crate::datagen::gen_pendulum(&cfg, Split::Train, seed).unwrap()
}

fn small_hybrid(seed: u64) -> AugmentedModel<f64> {
    let spec = ModelSpec {
        physics: Some(PhysicalModel::learned(Family::PendulumFrictionless, 1.0)),
        augmentation: Some(AugmentModel::Mlp(MlpSpec { hidden_units: 8, hidden_layers: 1, ..MlpSpec::default() })),
    };
    let guesses = BTreeMap::from([("omega0_sq".to_string(), 0.2)]);
    AugmentedModel::new(spec, &guesses, seed).unwrap()
}

#[test]
fn traj_loss_cases() {
    let t = scalar_traj(&[0.3, 0.0, 0.0]);
    assert_eq!(traj_loss(&t, &t).unwrap(), 0.0);
    assert_eq!(traj_loss(&scalar_traj(&[0.3, 1.0, 1.0]), &t).unwrap(), 1.0);

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let spec = StateSpec::Field { channels: 2, height: 3, width: 3 };
    let mk = |rng: &mut ChaCha8Rng| {
        let states = (0..5).map(|_| Tensor::<f64>::from_fn(vec![2, 3, 3], |_| rng.random_range(-1.0..1.0))).collect();
        Trajectory::new(spec, 0.1, states).unwrap()
    };
    let (a, b) = (mk(&mut rng), mk(&mut rng));
    let mut want = 0.0f64;
    for k in 1..5 {
        for i in 0..18 {
            want += (a.states()[k].data()[i] - b.states()[k].data()[i]).powi(2);
        }
    }
    want /= 4.0 * 18.0;
    assert!((traj_loss(&a, &b).unwrap() - want).abs() < 1e-12);

    let mut g = Graph::new();
    let pa: Vec<NodeId> = a.states().iter().map(|s| g.constant(s.clone())).collect();
    let pb: Vec<NodeId> = b.states().iter().map(|s| g.constant(s.clone())).collect();
    let l = traj_loss_graph(&mut g, &pa, &pb).unwrap();
    g.forward(&ParamSet::new()).unwrap();
    assert!((g.scalar_value(l).unwrap() - want).abs() < 1e-12);
    assert!(traj_loss(&scalar_traj(&[0.0, 1.0]), &t).is_err());
}

#[test]
fn fa_norm_cases() {
    let fa = AugmentModel::Mlp(MlpSpec { hidden_layers: 0, ..MlpSpec::default() });
    let mut p: ParamSet<f64> = fa.init_params(0);
    p.set("fa.l0.w", Tensor::zeros(vec![2, 2])).unwrap();
    let one = Tensor::new(vec![1, 2], vec![0.4, -0.9]).unwrap();
    assert_eq!(fa_norm_sq(&fa, &p, one.clone()).unwrap(), 0.0);
    p.set("fa.l0.b", Tensor::new(vec![2], vec![3.0, 4.0]).unwrap()).unwrap();
    assert_eq!(fa_norm_sq(&fa, &p, one).unwrap(), 25.0);
    p.set("fa.l0.b", Tensor::zeros(vec![2])).unwrap();
    p.set("fa.l0.w", Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap()).unwrap();
    let two = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 2.0]).unwrap();
    assert_eq!(fa_norm_sq(&fa, &p, two).unwrap(), 5.0);
}

#[test]
fn finite_differences() {
    let lin = scalar_traj(&[0.0, 1.0, 2.0, 3.0]);
    assert!(finite_diff_derivative(&lin).iter().all(|d| d.item() == 2.0));
    let flat = scalar_traj(&[1.5, 1.5, 1.5]);
    assert!(finite_diff_derivative(&flat).iter().all(|d| d.item() == 0.0));
    let decay = scalar_traj(&[1.0, (-0.5f64).exp()]);
    let d0 = finite_diff_derivative(&decay)[0].item();
    assert!((d0 - ((-0.5f64).exp() - 1.0) / 0.5).abs() < 1e-15);
    assert!((d0 + 0.7869).abs() < 1e-4);
}

/// `L_traj(a)` for the RK4 rollout of `dX/dt = a·X`, in closed form.
fn linear_loss(a: f64, ds: &Dataset) -> f64 {
    let z = a * ds.dt();
    let r = 1.0 + z + z * z / 2.0 + z.powi(3) / 6.0 + z.powi(4) / 24.0;
    let mut s = 0.0;
    for i in 0..ds.n_traj() {
        let mut x = ds.state(i, 0)[0];
        for k in 1..ds.n_states() {
            x *= r;
            s += (x - ds.state(i, k)[0]).powi(2);
        }
    }
    s / (ds.n_traj() * (ds.n_states() - 1)) as f64
}

#[test]
fn linear_fit_reaches_scan_minimizer() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let series: Vec<Vec<f64>> = (0..4)
        .map(|_| {
            let x0: f64 = rng.random_range(0.5..1.5);
            (0..9).map(|k| x0 * (-0.3 * k as f64 * 0.5).exp() + rng.random_range(-0.02..0.02)).collect()
        })
        .collect();
    let ds = scalar_dataset(&series, 0.5);
    // golden-section scan of the loss
    let (mut lo, mut hi) = (-1.0, 0.5);
    let phi = (5f64.sqrt() - 1.0) / 2.0;
    for _ in 0..200 {
        let m1 = hi - phi * (hi - lo);
        let m2 = lo + phi * (hi - lo);
        if linear_loss(m1, &ds) < linear_loss(m2, &ds) {
            hi = m2;
        } else {
            lo = m1;
        }
    }
    let oracle = 0.5 * (lo + hi);

    let mut params = ParamSet::new();
    params.insert("phys.a", Tensor::scalar(0.0)).unwrap();
    let cfg = TrainConfig { mode: Mode::Vanilla, n_epochs: 400, tau1: 0.5, ..TrainConfig::default() };
    let report = fit(&Linear, &mut params, &ds, None, &cfg).unwrap();
    let a = params.get("phys.a").unwrap().item();
    assert!((a - oracle).abs() < 1e-4, "fit {a} vs scan {oracle}");
    assert_eq!(report.summary.stop, StopReason::Epochs);
    assert!((report.epochs.last().unwrap().fit_loss - linear_loss(a, &ds)).abs() < 1e-12);
}

#[test]
fn lambda_follows_multiplier_update() {
    let ds = pendulum_data(3, 1);
    let mut m = small_hybrid(1);
    let cfg = TrainConfig { n_epochs: 3, n_iter: 2, tau1: 1e-3, tau2: 10.0, lambda0: 1.0, ..TrainConfig::default() };
    let r = m.fit(&ds, None, &cfg).unwrap();
    assert_eq!(r.epochs[0].lambda, 1.0);
    for w in r.epochs.windows(2) {
        assert_eq!(w[1].lambda, w[0].lambda + 10.0 * w[0].fit_loss);
        assert!(w[1].lambda > w[0].lambda);
    }
    assert_eq!(r.epochs[2].steps, 6);
    assert_eq!(1.0 + 10.0 * 0.5, 6.0);
}

#[test]
fn objective_gradient_is_linear_in_its_terms() {
    let ds = pendulum_data(3, 2);
    let m = small_hybrid(3);
    let mut sg = build_step::<f64, _>(&m.spec, &ds, 3, Mode::Aphynity).unwrap();
    let idx = [0, 1, 2];
    sg.g.forward(&(&m.params, step_bindings::<f64>(&ds, &idx, Mode::Aphynity, 2.5))).unwrap();
    let total = sg.g.backward(sg.objective).unwrap();
    let fitg = sg.g.backward(sg.fit_loss).unwrap();
    let normg = sg.g.backward(sg.norm.unwrap()).unwrap();
    for (name, t) in total.iter() {
        let (f, n) = (fitg.get(name).unwrap(), normg.get(name).unwrap());
        for i in 0..t.numel() {
            let want = 2.5 * f.data()[i] + n.data()[i];
            assert!((t.data()[i] - want).abs() <= 1e-12 * (1.0 + want.abs()), "{name}");
        }
    }
}

#[test]
fn non_adaptive_matches_aphynity_before_first_update() {
    let ds = pendulum_data(3, 4);
    let cfg = TrainConfig { n_epochs: 1, n_iter: 3, tau1: 1e-3, lambda0: 1.0, tau2: 50.0, ..TrainConfig::default() };
    let mut a = small_hybrid(5);
    let mut b = a.clone();
    a.fit(&ds, None, &cfg).unwrap();
    b.fit(&ds, None, &TrainConfig { mode: Mode::NonAdaptive, ..cfg.clone() }).unwrap();
    assert_eq!(a.params, b.params);
}

#[test]
fn training_is_deterministic() {
    let ds = pendulum_data(4, 5);
    let valid = pendulum_data(2, 6);
    let cfg = TrainConfig {
        n_epochs: 3,
        batch_size: Some(3),
        optimizer: Optimizer::Adam,
        tau1: 1e-2,
        seed: 9,
        ..TrainConfig::default()
    };
    let mut a = small_hybrid(2);
    let mut b = a.clone();
    let ra = a.fit(&ds, Some(&valid), &cfg).unwrap();
    let rb = b.fit(&ds, Some(&valid), &cfg).unwrap();
    assert_eq!(ra, rb);
    assert_eq!(a.params, b.params);
}

#[test]
fn derivative_mode_fits_finite_differences() {
    // with dt small, derivative supervision recovers a linear rate
    let series: Vec<Vec<f64>> = (1..4)
        .map(|i| (0..6).map(|k| i as f64 * (-0.3 * k as f64 * 0.5).exp()).collect())
        .collect();
    let ds = scalar_dataset(&series, 0.5);
    let mut params = ParamSet::new();
    params.insert("phys.a", Tensor::scalar(0.0)).unwrap();
    let cfg = TrainConfig {
        mode: Mode::DerivativeSupervision,
        n_epochs: 300,
        tau1: 0.2,
        tau2: 0.0,
        ..TrainConfig::default()
    };
    fit(&Linear, &mut params, &ds, None, &cfg).unwrap();
    // least squares on forward differences: a = Σ x·d / Σ x²
    let (mut num, mut den) = (0.0, 0.0);
    for s in &series {
        for k in 0..5 {
            num += s[k] * (s[k + 1] - s[k]) / 0.5;
            den += s[k] * s[k];
        }
    }
    let a = params.get("phys.a").unwrap().item();
    assert!((a - num / den).abs() < 1e-6, "{a} vs {}", num / den);
    // the forward-difference rate is biased away from the true −0.3
    assert!((a + 0.3).abs() > 0.02);
}

#[test]
fn early_stopping_restores_best_and_step_cap_applies() {
    let ds = pendulum_data(3, 7);
    let valid = pendulum_data(2, 8);
    let mut m = small_hybrid(4);
    let mut cfg = TrainConfig { n_epochs: 50, tau1: 1e-2, optimizer: Optimizer::Adam, max_steps: Some(7), ..TrainConfig::default() };
    let mut last = small_hybrid(4);
    let r = last.fit(&ds, Some(&valid), &cfg).unwrap();
    let spec = m.spec.clone();
    let mut eval = Evaluator::new(&spec, 3);
    assert_eq!(eval.traj_loss(&last.params, &valid).unwrap(), r.epochs.last().unwrap().valid_traj_loss.unwrap());
    cfg.patience = Some(1000);
    let r = m.fit(&ds, Some(&valid), &cfg).unwrap();
    assert_eq!(r.summary.stop, StopReason::StepCap);
    assert_eq!(r.summary.steps, 7);
    let best = r.summary.best_epoch.unwrap();
    let best_valid = r.epochs[best].valid_traj_loss.unwrap();
    assert!(r.epochs.iter().all(|e| e.valid_traj_loss.unwrap() >= best_valid));
    assert_eq!(eval.traj_loss(&m.params, &valid).unwrap(), best_valid);

    let mut m = small_hybrid(4);
    let cfg = TrainConfig { n_epochs: 200, tau1: 0.5, optimizer: Optimizer::Adam, patience: Some(2), ..TrainConfig::default() };
    let r = m.fit(&ds, Some(&valid), &cfg).unwrap();
    if r.summary.stop == StopReason::EarlyStopping {
        let last = r.epochs.last().unwrap().epoch;
        assert_eq!(last - r.summary.best_epoch.unwrap(), 2);
    }
}

#[test]
fn blow_up_is_reported_as_divergence() {
    let ds = scalar_dataset(&[vec![1.0, 1.0, 1.0]], 0.5);
    let mut params = ParamSet::new();
    params.insert("phys.a", Tensor::scalar(1e200)).unwrap();
    let cfg = TrainConfig { mode: Mode::Vanilla, n_epochs: 3, ..TrainConfig::default() };
    let r = fit(&Linear, &mut params, &ds, None, &cfg).unwrap();
    assert!(r.diverged());
    assert_eq!(r.summary.stop, StopReason::Diverged);
    assert!(r.summary.events.iter().any(|e| e.contains("blow-up")));
    assert_eq!(params.get("phys.a").unwrap().item(), 1e200);
}

#[test]
fn rejects_bad_configuration() {
    let ds = scalar_dataset(&[vec![1.0, 1.0]], 0.5);
    let mut p = ParamSet::new();
    p.insert("phys.a", Tensor::scalar(0.0)).unwrap();
    for cfg in [
        TrainConfig { tau1: 0.0, ..TrainConfig::default() },
        TrainConfig { tau2: -1.0, ..TrainConfig::default() },
        TrainConfig { n_iter: 0, ..TrainConfig::default() },
        TrainConfig { batch_size: Some(0), ..TrainConfig::default() },
    ] {
        assert!(matches!(fit(&Linear, &mut p, &ds, None, &cfg), Err(Error::Config(_))));
    }
    let mut empty = ParamSet::new();
    assert!(fit(&Linear, &mut empty, &ds, None, &TrainConfig::default()).is_err());
    let none = ModelSpec { physics: None, augmentation: None };
    assert!(AugmentedModel::<f64>::new(none, &BTreeMap::new(), 0).is_err());
}

#[test]
fn report_files() {
    let ds = pendulum_data(2, 9);
    let mut m = small_hybrid(1);
    let r = m.fit(&ds, None, &TrainConfig { n_epochs: 2, ..TrainConfig::default() }).unwrap();
    let dir = tempfile::tempdir().unwrap();
    r.write(dir.path()).unwrap();
    let lines = fs::read_to_string(dir.path().join("report.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 2);
    let first: EpochRecord = serde_json::from_str(lines.lines().next().unwrap()).unwrap();
    assert_eq!(first, r.epochs[0]);
    let s: TrainSummary =
        serde_json::from_str(&fs::read_to_string(dir.path().join("summary.json")).unwrap()).unwrap();
    assert_eq!(s, r.summary);
}

#[test]
fn checkpoint_round_trip_of_model() {
    let m = small_hybrid(3);
    let dir = tempfile::tempdir().unwrap();
    m.save(dir.path()).unwrap();
    assert_eq!(AugmentedModel::<f64>::load(dir.path()).unwrap(), m);
}

#[test]
fn clipping_rescales_only_above_the_threshold() {
    let mut g = ParamSet::<f64>::new();
    g.insert("a", Tensor::new(vec![2], vec![3.0, 0.0]).unwrap()).unwrap();
    g.insert("b", Tensor::scalar(4.0)).unwrap();
    let norm = g.norm_sq().sqrt();
    assert_eq!(norm, 5.0);
    assert_eq!(clip_grads(g.clone(), norm, None), g);
    assert_eq!(clip_grads(g.clone(), norm, Some(5.0)), g);
    let c = clip_grads(g, norm, Some(1.0));
    approx::assert_relative_eq!(c.get("a").unwrap().data(), &[0.6, 0.0][..], max_relative = 1e-15);
    approx::assert_relative_eq!(c.get("b").unwrap().item(), 0.8, max_relative = 1e-15);
}
