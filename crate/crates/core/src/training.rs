//! Constrained training of `F = Fp + Fa`.
//!
//! Each epoch runs `n_iter` passes of gradient steps on
//! `λ·L_traj + ‖Fa‖²`, then raises the multiplier with
//! `λ ← λ + τ2·L_traj` evaluated at the new parameters. `L_traj` compares
//! RK4 rollouts from each observed initial state against the observed
//! trajectory; `‖Fa‖²` sums the squared augmentation output over observed
//! states. Ablation modes drop the norm term (vanilla), freeze the
//! multiplier (non-adaptive) or swap `L_traj` for a finite-difference
//! derivative loss.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::augment::AugmentModel;
use crate::datagen::Dataset;
use crate::diffcore::{Graph, NodeId, ParamSet, Tensor};
use crate::error::{Error, Result};
use crate::integrators::{integrate, DynamicsModel, StateSpec, Trajectory};
use crate::physics::PhysicalModel;
use crate::rng;
use crate::scalar::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Aphynity,
    Vanilla,
    DerivativeSupervision,
    NonAdaptive,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Aphynity => "aphynity",
            Mode::Vanilla => "vanilla",
            Mode::DerivativeSupervision => "derivative_supervision",
            Mode::NonAdaptive => "non_adaptive",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    /// Plain gradient descent with step `tau1`.
    Sgd,
    /// Adaptive moments (β1 = 0.9, β2 = 0.999) with learning rate `tau1`.
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: Mode,
    pub n_epochs: usize,
    pub n_iter: usize,
    /// Trajectories per batch; `None` uses the whole training set.
    pub batch_size: Option<usize>,
    pub tau1: f64,
    pub tau2: f64,
    pub lambda0: f64,
    pub seed: u64,
    pub max_grad_norm: Option<f64>,
    pub optimizer: Optimizer,
    /// Early-stopping patience in epochs on validation `L_traj`. When set,
    /// the best-validation parameters are restored at the end; otherwise
    /// the last ones are kept.
    pub patience: Option<usize>,
    /// Hard cap on the number of gradient steps.
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Aphynity,
            n_epochs: 100,
            n_iter: 1,
            batch_size: None,
            tau1: 1e-3,
            tau2: 1.0,
            lambda0: 1.0,
            seed: 0,
            max_grad_norm: None,
            optimizer: Optimizer::Sgd,
            patience: None,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.n_epochs == 0 || self.n_iter == 0 {
            return bad("n_epochs and n_iter must be at least 1");
        }
        if self.batch_size == Some(0) {
            return bad("batch_size must be at least 1");
        }
        if !(self.tau1 > 0.0) || !(self.tau2 >= 0.0) || !(self.lambda0 >= 0.0) {
            return bad("need tau1 > 0, tau2 >= 0 and lambda0 >= 0");
        }
        if self.max_grad_norm.is_some_and(|g| !(g > 0.0)) {
            return bad("max_grad_norm must be positive");
        }
        Ok(())
    }
}

/// A model split into a physical and an augmentation part, either of which
/// may be absent.
pub trait HybridDynamics<T: Real> {
    fn physical(&self, g: &mut Graph<T>, x: NodeId) -> Result<Option<NodeId>>;
    fn augmentation(&self, g: &mut Graph<T>, x: NodeId) -> Result<Option<NodeId>>;
    /// Current physical parameter values by name (empty if none are learned).
    fn physical_values(&self, params: &ParamSet<T>) -> Result<BTreeMap<String, f64>>;
}

/// `Fp + Fa` of a [`HybridDynamics`] as a single dynamics model.
pub struct Full<'a, M: ?Sized>(pub &'a M);

impl<T: Real, M: HybridDynamics<T> + ?Sized> DynamicsModel<T> for Full<'_, M> {
    fn build(&self, g: &mut Graph<T>, x: NodeId) -> Result<NodeId> {
        let p = self.0.physical(g, x)?;
        let a = self.0.augmentation(g, x)?;
        match (p, a) {
            (Some(p), Some(a)) => g.add(p, a),
            (Some(p), None) => Ok(p),
            (None, Some(a)) => Ok(a),
            (None, None) => Err(Error::Config("model has neither physics nor augmentation".into())),
        }
    }
}

/// Architecture of an augmented model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub physics: Option<PhysicalModel>,
    pub augmentation: Option<AugmentModel>,
}

impl<T: Real> HybridDynamics<T> for ModelSpec {
    fn physical(&self, g: &mut Graph<T>, x: NodeId) -> Result<Option<NodeId>> {
        self.physics.as_ref().map(|p| p.build(g, x)).transpose()
    }

    fn augmentation(&self, g: &mut Graph<T>, x: NodeId) -> Result<Option<NodeId>> {
        self.augmentation.as_ref().map(|a| a.build(g, x)).transpose()
    }

    fn physical_values(&self, params: &ParamSet<T>) -> Result<BTreeMap<String, f64>> {
        match &self.physics {
            Some(p) => p.values(params),
            None => Ok(BTreeMap::new()),
        }
    }
}

/// `F = Fp + Fa` together with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedModel<T> {
    pub spec: ModelSpec,
    pub params: ParamSet<T>,
}

impl<T: Real> AugmentedModel<T> {
    /// Initializes physical parameters from `guesses` (twice the floor when
    /// absent) and network weights from `seed`.
    pub fn new(spec: ModelSpec, guesses: &BTreeMap<String, f64>, seed: u64) -> Result<Self> {
        if spec.physics.is_none() && spec.augmentation.is_none() {
            return Err(Error::Config("model needs physics, augmentation or both".into()));
        }
        let mut params = ParamSet::new();
        if let Some(p) = &spec.physics {
            params.merge(p.init_params(guesses)?)?;
        }
        if let Some(a) = &spec.augmentation {
            params.merge(a.init_params(seed))?;
        }
        Ok(Self { spec, params })
    }

    pub fn physical_values(&self) -> Result<BTreeMap<String, f64>> {
        self.spec.physical_values(&self.params)
    }

    pub fn fit(
        &mut self,
        train: &Dataset,
        valid: Option<&Dataset>,
        cfg: &TrainConfig,
    ) -> Result<TrainReport> {
        fit(&self.spec, &mut self.params, train, valid, cfg)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        crate::checkpoint::save(dir, &self.spec, &self.params)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (spec, params) = crate::checkpoint::load(dir)?;
        Ok(Self { spec, params })
    }
}

/// Mean over steps `1..N` and entries of the squared rollout error.
pub fn traj_loss<T: Real>(pred: &Trajectory<T>, truth: &Trajectory<T>) -> Result<f64> {
    if pred.len() != truth.len() || pred.spec() != truth.spec() {
        return Err(Error::Shape(format!(
            "trajectories differ: {} × {:?} vs {} × {:?}",
            pred.len(),
            pred.spec(),
            truth.len(),
            truth.spec()
        )));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for (p, t) in pred.states().iter().zip(truth.states()).skip(1) {
        for (a, b) in p.data().iter().zip(t.data()) {
            sum += (a.to_f64_lossy() - b.to_f64_lossy()).powi(2);
        }
        count += p.numel();
    }
    Ok(sum / count as f64)
}

/// Graph form of [`traj_loss`] over matching state nodes (index 0 skipped).
pub fn traj_loss_graph<T: Real>(
    g: &mut Graph<T>,
    pred: &[NodeId],
    truth: &[NodeId],
) -> Result<NodeId> {
    if pred.len() != truth.len() || pred.len() < 2 {
        return Err(Error::Shape(format!("{} predicted vs {} observed states", pred.len(), truth.len())));
    }
    let mut total: Option<NodeId> = None;
    let mut count = 0usize;
    for (&p, &t) in pred.iter().zip(truth).skip(1) {
        let d = g.sub(p, t)?;
        count += g.shape(d).iter().product::<usize>();
        let sq = g.square(d);
        let s = g.sum(sq);
        total = Some(match total {
            None => s,
            Some(acc) => g.add(acc, s)?,
        });
    }
    Ok(g.scale(total.expect("at least one step"), T::lit(1.0 / count as f64)))
}

/// `Σ_states ‖Fa(X)‖²` over a stack of states `[S, ...]`.
pub fn fa_norm_sq<T: Real>(fa: &AugmentModel, params: &ParamSet<T>, states: Tensor<T>) -> Result<f64> {
    let mut g = Graph::new();
    let x = g.input("states", states.shape().to_vec(), false)?;
    let out = fa.build(&mut g, x)?;
    let sq = g.square(out);
    let s = g.sum(sq);
    g.forward(&(params, [("states", states)]))?;
    Ok(g.scalar_value(s)?.to_f64_lossy())
}

/// Forward differences `(X_{k+1} − X_k)/Δt`, `k = 0..N−1`.
pub fn finite_diff_derivative<T: Real>(traj: &Trajectory<T>) -> Vec<Tensor<T>> {
    let inv = T::lit(1.0 / traj.dt());
    traj.states()
        .windows(2)
        .map(|w| {
            let data = w[1].data().iter().zip(w[0].data()).map(|(&b, &a)| (b - a) * inv).collect();
            Tensor::new(w[0].shape().to_vec(), data).expect("same shape")
        })
        .collect()
}

/// Stacks the listed `(trajectory, step)` states into `[count, ...]`.
pub(crate) fn stack<T: Real>(ds: &Dataset, items: impl Iterator<Item = (usize, usize)>) -> Tensor<T> {
    let mut data = Vec::new();
    let mut count = 0;
    for (i, k) in items {
        data.extend(ds.state(i, k).iter().map(|&v| T::lit(v)));
        count += 1;
    }
    Tensor::new(ds.spec().batched(count), data).expect("dataset states are finite")
}

fn truth_key(k: usize) -> String {
    format!("data.truth{k}")
}

/// Rollout-only graph for a fixed batch size, reused across calls.
struct RolloutGraph<T> {
    g: Graph<T>,
    states: Vec<NodeId>,
    loss: NodeId,
}

fn build_rollout<T: Real>(
    model: &dyn DynamicsModel<T>,
    spec: StateSpec,
    n_steps: usize,
    dt: f64,
    batch: usize,
) -> Result<RolloutGraph<T>> {
    let mut g = Graph::new();
    let x0 = g.input("data.x0", spec.batched(batch), false)?;
    let states = integrate(&mut g, model, x0, n_steps, dt)?;
    let mut truth = vec![x0];
    for k in 1..=n_steps {
        truth.push(g.input(&truth_key(k), spec.batched(batch), false)?);
    }
    let loss = traj_loss_graph(&mut g, &states, &truth)?;
    Ok(RolloutGraph { g, states, loss })
}

fn rollout_bindings<T: Real>(ds: &Dataset, idx: &[usize], n_steps: usize) -> HashMap<String, Tensor<T>> {
    let mut b = HashMap::new();
    b.insert("data.x0".to_string(), stack(ds, idx.iter().map(|&i| (i, 0))));
    for k in 1..=n_steps {
        b.insert(truth_key(k), stack(ds, idx.iter().map(|&i| (i, k))));
    }
    b
}

/// Batched evaluation of a fixed model: rollouts, trajectory loss,
/// derivative loss and augmentation norm over whole datasets.
pub struct Evaluator<'m, T, M: ?Sized> {
    model: &'m M,
    chunk: usize,
    rollouts: HashMap<(usize, usize), RolloutGraph<T>>,
}

impl<'m, T: Real, M: HybridDynamics<T> + ?Sized> Evaluator<'m, T, M> {
    /// `chunk` trajectories are rolled out together (this also sets the
    /// batchnorm statistics of convolutional augmentations).
    pub fn new(model: &'m M, chunk: usize) -> Self {
        Self {
            model,
            chunk: chunk.max(1),
            rollouts: HashMap::new(),
        }
    }

    fn graph(&mut self, ds: &Dataset, n_steps: usize, batch: usize) -> Result<&mut RolloutGraph<T>> {
        if !self.rollouts.contains_key(&(batch, n_steps)) {
            let rg = build_rollout(&Full(self.model), ds.spec(), n_steps, ds.dt(), batch)?;
            self.rollouts.insert((batch, n_steps), rg);
        }
        Ok(self.rollouts.get_mut(&(batch, n_steps)).expect("just inserted"))
    }

    /// Mean-square rollout error over all trajectories, steps `1..N` and entries.
    pub fn traj_loss(&mut self, params: &ParamSet<T>, ds: &Dataset) -> Result<f64> {
        let n_steps = ds.n_states() - 1;
        let idx: Vec<usize> = (0..ds.n_traj()).collect();
        let mut total = 0.0;
        for c in idx.chunks(self.chunk) {
            let rg = self.graph(ds, n_steps, c.len())?;
            rg.g.forward(&(params, rollout_bindings::<T>(ds, c, n_steps)))?;
            total += rg.g.scalar_value(rg.loss)?.to_f64_lossy() * c.len() as f64;
        }
        Ok(total / ds.n_traj() as f64)
    }

    /// Predicted states `1..=n_steps` for every trajectory; `None` where the
    /// rollout blew up. Chunks that blow up are retried one trajectory at a
    /// time.
    pub fn rollout(
        &mut self,
        params: &ParamSet<T>,
        ds: &Dataset,
        n_steps: usize,
    ) -> Result<Vec<Option<Vec<Vec<f64>>>>> {
        if n_steps == 0 || n_steps >= ds.n_states() {
            return Err(Error::Invalid(format!(
                "horizon {n_steps} outside 1..={}",
                ds.n_states() - 1
            )));
        }
        let d = ds.spec().len();
        let idx: Vec<usize> = (0..ds.n_traj()).collect();
        let mut out = Vec::with_capacity(ds.n_traj());
        for c in idx.chunks(self.chunk) {
            let groups: Vec<Vec<usize>> = match self.run_chunk(params, ds, c, n_steps) {
                Ok(()) => vec![c.to_vec()],
                Err(Error::NonFinite(_)) => c.iter().map(|&i| vec![i]).collect(),
                Err(e) => return Err(e),
            };
            for grp in groups {
                if grp.len() == 1 && c.len() > 1 {
                    if let Err(e) = self.run_chunk(params, ds, &grp, n_steps) {
                        match e {
                            Error::NonFinite(_) => {
                                out.push(None);
                                continue;
                            }
                            e => return Err(e),
                        }
                    }
                }
                let rg = self.graph(ds, n_steps, grp.len())?;
                let values: Vec<Tensor<T>> = rg.states[1..]
                    .iter()
                    .map(|&s| rg.g.value(s))
                    .collect::<Result<_>>()?;
                for b in 0..grp.len() {
                    out.push(Some(
                        values
                            .iter()
                            .map(|t| t.data()[b * d..(b + 1) * d].iter().map(|v| v.to_f64_lossy()).collect())
                            .collect(),
                    ));
                }
            }
        }
        Ok(out)
    }

    fn run_chunk(&mut self, params: &ParamSet<T>, ds: &Dataset, c: &[usize], n_steps: usize) -> Result<()> {
        let bindings = rollout_bindings::<T>(ds, c, n_steps);
        let rg = self.graph(ds, n_steps, c.len())?;
        rg.g.forward(&(params, bindings))
    }

    /// Mean of `‖(X_{k+1} − X_k)/Δt − F(X_k)‖²` over all pairs and entries.
    pub fn deriv_loss(&mut self, params: &ParamSet<T>, ds: &Dataset) -> Result<f64> {
        let pairs: Vec<(usize, usize)> =
            (0..ds.n_traj()).flat_map(|i| (0..ds.n_states() - 1).map(move |k| (i, k))).collect();
        let mut total = 0.0;
        let per = self.chunk * (ds.n_states() - 1);
        for c in pairs.chunks(per) {
            let (x, target) = deriv_batch::<T>(ds, c);
            let mut g = Graph::new();
            let xi = g.input("x", x.shape().to_vec(), false)?;
            let ti = g.input("t", x.shape().to_vec(), false)?;
            let f = Full(self.model).build(&mut g, xi)?;
            let d = g.sub(ti, f)?;
            let sq = g.square(d);
            let s = g.sum(sq);
            g.forward(&(params, [("x", x), ("t", target)]))?;
            total += g.scalar_value(s)?.to_f64_lossy();
        }
        Ok(total / (pairs.len() * ds.spec().len()) as f64)
    }

    /// `Σ ‖Fa(X)‖²` over every state of `ds`; `None` without augmentation.
    pub fn fa_norm_sq(&mut self, params: &ParamSet<T>, ds: &Dataset) -> Result<Option<f64>> {
        let mut total = 0.0;
        let mut present = false;
        let per = self.chunk * ds.n_states();
        let items: Vec<(usize, usize)> =
            (0..ds.n_traj()).flat_map(|i| (0..ds.n_states()).map(move |k| (i, k))).collect();
        for c in items.chunks(per) {
            let x: Tensor<T> = stack(ds, c.iter().copied());
            let mut g = Graph::new();
            let xi = g.input("x", x.shape().to_vec(), false)?;
            let Some(a) = self.model.augmentation(&mut g, xi)? else {
                return Ok(None);
            };
            present = true;
            let sq = g.square(a);
            let s = g.sum(sq);
            g.forward(&(params, [("x", x)]))?;
            total += g.scalar_value(s)?.to_f64_lossy();
        }
        Ok(present.then_some(total))
    }
}

fn deriv_batch<T: Real>(ds: &Dataset, pairs: &[(usize, usize)]) -> (Tensor<T>, Tensor<T>) {
    let x = stack(ds, pairs.iter().copied());
    let inv = 1.0 / ds.dt();
    let mut t = Vec::with_capacity(x.numel());
    for &(i, k) in pairs {
        let (a, b) = (ds.state(i, k), ds.state(i, k + 1));
        t.extend(a.iter().zip(b).map(|(a, b)| T::lit((b - a) * inv)));
    }
    let target = Tensor::new(x.shape().to_vec(), t).expect("finite differences of finite data");
    (x, target)
}

/// Training graph for one batch size.
struct StepGraph<T> {
    g: Graph<T>,
    fit_loss: NodeId,
    norm: Option<NodeId>,
    objective: NodeId,
}

const LAMBDA: &str = "train.lambda";

fn build_step<T: Real, M: HybridDynamics<T> + ?Sized>(
    model: &M,
    ds: &Dataset,
    batch: usize,
    mode: Mode,
) -> Result<StepGraph<T>> {
    let spec = ds.spec();
    let n = ds.n_states();
    let mut g = Graph::new();
    let fit_loss = if mode == Mode::DerivativeSupervision {
        let shape = spec.batched(batch * (n - 1));
        let x = g.input("data.dx", shape.clone(), false)?;
        let t = g.input("data.dtarget", shape, false)?;
        let f = Full(model).build(&mut g, x)?;
        let d = g.sub(t, f)?;
        let sq = g.square(d);
        g.mean(sq)
    } else {
        let x0 = g.input("data.x0", spec.batched(batch), false)?;
        let states = integrate(&mut g, &Full(model), x0, n - 1, ds.dt())?;
        let mut truth = vec![x0];
        for k in 1..n {
            truth.push(g.input(&truth_key(k), spec.batched(batch), false)?);
        }
        traj_loss_graph(&mut g, &states, &truth)?
    };
    if mode == Mode::Vanilla {
        return Ok(StepGraph { g, fit_loss, norm: None, objective: fit_loss });
    }
    let obs = g.input("data.obs", spec.batched(batch * n), false)?;
    let norm = match model.augmentation(&mut g, obs)? {
        Some(a) => {
            let sq = g.square(a);
            let s = g.sum(sq);
            // unbiased scaling of the batch sum to the whole training set
            Some(g.scale(s, T::lit(ds.n_traj() as f64 / batch as f64)))
        }
        None => None,
    };
    let lambda = g.input(LAMBDA, Vec::new(), false)?;
    let weighted = g.mul(fit_loss, lambda)?;
    let objective = match norm {
        Some(nm) => g.add(weighted, nm)?,
        None => weighted,
    };
    Ok(StepGraph { g, fit_loss, norm, objective })
}

fn step_bindings<T: Real>(ds: &Dataset, idx: &[usize], mode: Mode, lambda: f64) -> HashMap<String, Tensor<T>> {
    let n = ds.n_states();
    let mut b = if mode == Mode::DerivativeSupervision {
        let pairs: Vec<(usize, usize)> = idx.iter().flat_map(|&i| (0..n - 1).map(move |k| (i, k))).collect();
        let (x, t) = deriv_batch(ds, &pairs);
        HashMap::from([("data.dx".to_string(), x), ("data.dtarget".to_string(), t)])
    } else {
        rollout_bindings(ds, idx, n - 1)
    };
    if mode != Mode::Vanilla {
        b.insert(
            "data.obs".into(),
            stack(ds, idx.iter().flat_map(|&i| (0..n).map(move |k| (i, k)))),
        );
        b.insert(LAMBDA.into(), Tensor::scalar(T::lit(lambda)));
    }
    b
}

enum OptState<T> {
    Sgd,
    Adam { m: ParamSet<T>, v: ParamSet<T>, t: i32 },
}

impl<T: Real> OptState<T> {
    fn new(kind: Optimizer, params: &ParamSet<T>) -> Self {
        match kind {
            Optimizer::Sgd => OptState::Sgd,
            Optimizer::Adam => {
                let zeros: ParamSet<T> = params
                    .iter()
                    .map(|(n, t)| (n.to_string(), Tensor::zeros(t.shape().to_vec())))
                    .collect();
                OptState::Adam { m: zeros.clone(), v: zeros, t: 0 }
            }
        }
    }

    fn step(&mut self, params: &mut ParamSet<T>, grads: &ParamSet<T>, lr: f64) -> Result<()> {
        let lr = T::lit(lr);
        if let OptState::Adam { t, .. } = self {
            *t += 1;
        }
        let names: Vec<String> = params.names().map(str::to_string).collect();
        for name in names {
            let Some(gr) = grads.get(&name) else { continue };
            let p = params.get(&name).expect("listed name");
            let updated: Vec<T> = match self {
                OptState::Sgd => p.data().iter().zip(gr.data()).map(|(&w, &g)| w - lr * g).collect(),
                OptState::Adam { m, v, t } => {
                    let (b1, b2, eps) = (T::lit(0.9), T::lit(0.999), T::lit(1e-8));
                    let mt: Vec<T> = m.get(&name).expect("moment").data().iter().zip(gr.data())
                        .map(|(&m, &g)| b1 * m + (T::one() - b1) * g)
                        .collect();
                    let vt: Vec<T> = v.get(&name).expect("moment").data().iter().zip(gr.data())
                        .map(|(&v, &g)| b2 * v + (T::one() - b2) * g * g)
                        .collect();
                    let c1 = T::one() - b1.powi(*t);
                    let c2 = T::one() - b2.powi(*t);
                    let out = p.data().iter().zip(&mt).zip(&vt)
                        .map(|((&w, &m), &v)| w - lr * (m / c1) / ((v / c2).sqrt() + eps))
                        .collect();
                    let shape = p.shape().to_vec();
                    m.set(&name, Tensor::new(shape.clone(), mt)?)?;
                    v.set(&name, Tensor::new(shape, vt)?)?;
                    out
                }
            };
            let shape = p.shape().to_vec();
            if updated.iter().any(|v| !v.is_finite()) {
                return Err(Error::Divergence(format!("parameter `{name}` became non-finite")));
            }
            params.set(&name, Tensor::new(shape, updated)?)?;
        }
        Ok(())
    }
}

fn clip_grads<T: Real>(grads: ParamSet<T>, norm: f64, max_norm: Option<f64>) -> ParamSet<T> {
    let Some(max) = max_norm else { return grads };
    if norm <= max {
        return grads;
    }
    let s = T::lit(max / norm);
    grads.iter().map(|(n, t)| (n.to_string(), t.map(|v| v * s))).collect()
}

/// One line of the per-epoch report.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Multiplier in force during this epoch.
    pub lambda: f64,
    /// `L_traj` (or `L_deriv`) on the full training set after the epoch.
    pub fit_loss: f64,
    pub fa_norm_sq: Option<f64>,
    pub valid_traj_loss: Option<f64>,
    pub physical_params: BTreeMap<String, f64>,
    /// Gradient steps taken so far.
    pub steps: usize,
    pub skipped_batches: usize,
    pub wall_ms: f64,
}

impl PartialEq for EpochRecord {
    fn eq(&self, o: &Self) -> bool {
        self.epoch == o.epoch
            && self.lambda.to_bits() == o.lambda.to_bits()
            && self.fit_loss.to_bits() == o.fit_loss.to_bits()
            && self.fa_norm_sq.map(f64::to_bits) == o.fa_norm_sq.map(f64::to_bits)
            && self.valid_traj_loss.map(f64::to_bits) == o.valid_traj_loss.map(f64::to_bits)
            && self.physical_params == o.physical_params
            && self.steps == o.steps
            && self.skipped_batches == o.skipped_batches
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Epochs,
    EarlyStopping,
    StepCap,
    Diverged,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub config: TrainConfig,
    pub stop: StopReason,
    pub epochs_run: usize,
    pub steps: usize,
    /// Epoch whose parameters were kept (best validation loss).
    pub best_epoch: Option<usize>,
    pub final_lambda: f64,
    pub final_fit_loss: Option<f64>,
    pub final_fa_norm_sq: Option<f64>,
    pub final_physical_params: BTreeMap<String, f64>,
    pub events: Vec<String>,
    pub diverged: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub summary: TrainSummary,
}

impl TrainReport {
    pub fn diverged(&self) -> bool {
        self.summary.diverged.is_some()
    }

    /// `report.jsonl` (one record per epoch) and `summary.json`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("report.jsonl");
        let mut buf = Vec::new();
        for r in &self.epochs {
            serde_json::to_writer(&mut buf, r).map_err(|e| Error::json(&path, e))?;
            buf.push(b'\n');
        }
        fs::write(&path, buf).map_err(|e| Error::io(&path, e))?;
        let path = dir.join("summary.json");
        let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::to_writer_pretty(&mut f, &self.summary).map_err(|e| Error::json(&path, e))?;
        f.write_all(b"\n").map_err(|e| Error::io(&path, e))
    }
}

/// Runs the configured training loop, updating `params` in place.
///
/// Batches whose rollout blows up are skipped and logged. Divergence (a
/// non-finite parameter, or a whole epoch without a usable batch) stops
/// training; the report then carries the reason and `params` hold the best
/// (or last finite) values.
pub fn fit<T: Real, M: HybridDynamics<T> + ?Sized>(
    model: &M,
    params: &mut ParamSet<T>,
    train: &Dataset,
    valid: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    if params.is_empty() {
        return Err(Error::Config("model has no learnable parameters".into()));
    }
    if let Some(v) = valid {
        if v.spec() != train.spec() || v.dt() != train.dt() {
            return Err(Error::Config("validation data differ from training data in shape or dt".into()));
        }
    }
    let mode = cfg.mode;
    let batch = cfg.batch_size.unwrap_or(train.n_traj()).min(train.n_traj());
    let tau2 = match mode {
        Mode::Aphynity | Mode::DerivativeSupervision => cfg.tau2,
        Mode::Vanilla | Mode::NonAdaptive => 0.0,
    };
    let mut lambda = if mode == Mode::NonAdaptive { 1.0 } else { cfg.lambda0 };

    let mut steps_graphs: HashMap<usize, StepGraph<T>> = HashMap::new();
    let mut eval = Evaluator::new(model, batch);
    let mut opt = OptState::new(cfg.optimizer, params);
    let mut order: Vec<usize> = (0..train.n_traj()).collect();
    let mut shuffle = rng::stream(cfg.seed, 0x5B, 0);
    let start = Instant::now();

    let mut epochs = Vec::new();
    let mut events = Vec::new();
    let mut steps = 0usize;
    let mut best: Option<(f64, usize, ParamSet<T>)> = None;
    let mut stop = StopReason::Epochs;
    let mut diverged = None;
    let mut last_good = params.clone();

    'epochs: for epoch in 0..cfg.n_epochs {
        let mut skipped = 0usize;
        let mut taken = 0usize;
        let mut capped = false;
        'passes: for _ in 0..cfg.n_iter {
            if batch < order.len() {
                order.shuffle(&mut shuffle);
            }
            for idx in order.chunks(batch) {
                if !steps_graphs.contains_key(&idx.len()) {
                    steps_graphs.insert(idx.len(), build_step(model, train, idx.len(), mode)?);
                }
                let sg = steps_graphs.get_mut(&idx.len()).expect("just inserted");
                let bindings = step_bindings::<T>(train, idx, mode, lambda);
                match sg.g.forward(&(&*params, bindings)) {
                    Ok(()) => {}
                    Err(Error::NonFinite(msg)) => {
                        skipped += 1;
                        let ev = format!("epoch {epoch}: batch skipped after blow-up ({msg})");
                        log::warn!("{ev}");
                        events.push(ev);
                        continue;
                    }
                    Err(e) => return Err(e),
                }
                let raw = sg.g.backward(sg.objective)?;
                let grad_norm = raw.norm_sq().to_f64_lossy().sqrt();
                let grads = clip_grads(raw, grad_norm, cfg.max_grad_norm);
                if let Err(e) = opt.step(params, &grads, cfg.tau1) {
                    diverged = Some(e.to_string());
                    break 'passes;
                }
                steps += 1;
                taken += 1;
                if log::log_enabled!(log::Level::Debug) {
                    let fl = sg.g.scalar_value(sg.fit_loss)?.to_f64_lossy();
                    let nm = sg.norm.map(|n| sg.g.scalar_value(n)).transpose()?;
                    log::debug!("step {steps}: fit {fl:.4e} norm {nm:?} grad {grad_norm:.4e}");
                }
                if cfg.max_steps.is_some_and(|m| steps >= m) {
                    capped = true;
                    break 'passes;
                }
            }
        }
        if diverged.is_none() && taken == 0 {
            diverged = Some(format!("epoch {epoch}: every batch blew up"));
        }
        let measured = if diverged.is_none() {
            let fit_loss = match mode {
                Mode::DerivativeSupervision => eval.deriv_loss(params, train),
                _ => eval.traj_loss(params, train),
            };
            match fit_loss.and_then(|l| {
                if l.is_finite() { Ok(l) } else { Err(Error::NonFinite("training loss".into())) }
            }) {
                Ok(l) => Some(l),
                Err(Error::NonFinite(m)) => {
                    diverged = Some(format!("epoch {epoch}: training loss is not finite ({m})"));
                    None
                }
                Err(e) => return Err(e),
            }
        } else {
            None
        };
        let Some(fit_loss) = measured else {
            stop = StopReason::Diverged;
            let msg = diverged.clone().unwrap_or_default();
            log::error!("{msg}");
            events.push(msg);
            *params = best.as_ref().map_or(last_good.clone(), |b| b.2.clone());
            break 'epochs;
        };
        last_good = params.clone();
        let fa_norm = eval.fa_norm_sq(params, train)?;
        let valid_loss = match valid {
            Some(v) => match eval.traj_loss(params, v) {
                Ok(l) if l.is_finite() => Some(l),
                Ok(_) | Err(Error::NonFinite(_)) => Some(f64::INFINITY),
                Err(e) => return Err(e),
            },
            None => None,
        };
        let record = EpochRecord {
            epoch,
            lambda,
            fit_loss,
            fa_norm_sq: fa_norm,
            valid_traj_loss: valid_loss,
            physical_params: model.physical_values(params)?,
            steps,
            skipped_batches: skipped,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        };
        log::info!(
            "epoch {epoch}: lambda {lambda:.4e} fit {fit_loss:.4e} norm {fa_norm:?} valid {valid_loss:?} params {:?}",
            record.physical_params
        );
        epochs.push(record);
        lambda += tau2 * fit_loss;

        if let Some(v) = valid_loss {
            let improved = best.as_ref().map_or(true, |b| v < b.0);
            if improved {
                best = Some((v, epoch, params.clone()));
            } else if cfg.patience.is_some_and(|p| epoch - best.as_ref().expect("set").1 >= p) {
                stop = StopReason::EarlyStopping;
                break;
            }
        }
        if capped {
            stop = StopReason::StepCap;
            break;
        }
    }

    let restore = stop != StopReason::Diverged && cfg.patience.is_some();
    if restore {
        if let Some((_, _, p)) = &best {
            *params = p.clone();
        }
    }
    let best_epoch = best.as_ref().map(|b| b.1);
    let kept = best_epoch
        .filter(|_| restore)
        .and_then(|e| epochs.iter().find(|r| r.epoch == e))
        .or(epochs.last());
    let summary = TrainSummary {
        config: cfg.clone(),
        stop,
        epochs_run: epochs.len(),
        steps,
        best_epoch,
        final_lambda: lambda,
        final_fit_loss: kept.map(|r| r.fit_loss),
        final_fa_norm_sq: kept.and_then(|r| r.fa_norm_sq),
        final_physical_params: model.physical_values(params)?,
        events,
        diverged,
    };
    Ok(TrainReport { epochs, summary })
}

#[cfg(test)]
mod tests;
