//! Time integration.
//!
//! Training and forecasting use a fixed-step classical RK4 written into the
//! differentiation graph, so gradients reach the physical and network
//! parameters through every unrolled step. Ground-truth simulation uses
//! plain (non-differentiable) schemes on raw slices: adaptive
//! Dormand–Prince 5(4) with dense output, fine-step forward Euler and
//! fine-step RK4.

use serde::{Deserialize, Serialize};

use crate::diffcore::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Real;

/// Layout of one (unbatched) state.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StateSpec {
    Vector(usize),
    Field {
        channels: usize,
        height: usize,
        width: usize,
    },
}

impl StateSpec {
    pub fn len(&self) -> usize {
        match *self {
            StateSpec::Vector(d) => d,
            StateSpec::Field {
                channels,
                height,
                width,
            } => channels * height * width,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn shape(&self) -> Vec<usize> {
        match *self {
            StateSpec::Vector(d) => vec![d],
            StateSpec::Field {
                channels,
                height,
                width,
            } => vec![channels, height, width],
        }
    }

    /// Shape of `batch` states stacked along a leading axis.
    pub fn batched(&self, batch: usize) -> Vec<usize> {
        let mut s = vec![batch];
        s.extend(self.shape());
        s
    }
}

/// Uniformly spaced sequence of states `X_{kΔt}`, `k = 0..N`.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory<T> {
    spec: StateSpec,
    dt: f64,
    states: Vec<Tensor<T>>,
}

impl<T: Real> Trajectory<T> {
    pub fn new(spec: StateSpec, dt: f64, states: Vec<Tensor<T>>) -> Result<Self> {
        if states.len() < 2 {
            return Err(Error::Invalid(format!(
                "trajectory needs at least 2 states, got {}",
                states.len()
            )));
        }
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::Invalid(format!("time step must be positive, got {dt}")));
        }
        let shape = spec.shape();
        if let Some(bad) = states.iter().position(|s| s.shape() != shape.as_slice()) {
            return Err(Error::Shape(format!(
                "state {bad} has shape {:?}, expected {shape:?}",
                states[bad].shape()
            )));
        }
        Ok(Self { spec, dt, states })
    }

    pub fn spec(&self) -> StateSpec {
        self.spec
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn states(&self) -> &[Tensor<T>] {
        &self.states
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn last(&self) -> &Tensor<T> {
        self.states.last().expect("trajectory is never empty")
    }

    pub fn into_states(self) -> Vec<Tensor<T>> {
        self.states
    }
}

/// Differentiable dynamics `X ↦ dX/dt` over a batch of states stacked
/// along the leading axis.
pub trait DynamicsModel<T: Real> {
    fn build(&self, g: &mut Graph<T>, x: NodeId) -> Result<NodeId>;
}

impl<T: Real, F> DynamicsModel<T> for F
where
    F: Fn(&mut Graph<T>, NodeId) -> Result<NodeId>,
{
    fn build(&self, g: &mut Graph<T>, x: NodeId) -> Result<NodeId> {
        self(g, x)
    }
}

/// Plain right-hand side used by the simulators: writes `dX/dt` for the
/// flattened state `x` into `dxdt`.
pub trait VectorField<T> {
    fn eval(&self, x: &[T], dxdt: &mut [T]);
}

impl<T, F: Fn(&[T], &mut [T])> VectorField<T> for F {
    fn eval(&self, x: &[T], dxdt: &mut [T]) {
        self(x, dxdt)
    }
}

/// One classical RK4 step written into the graph.
pub fn rk4_step<T: Real, F: DynamicsModel<T> + ?Sized>(
    g: &mut Graph<T>,
    f: &F,
    x: NodeId,
    dt: f64,
) -> Result<NodeId> {
    if !(dt > 0.0) {
        return Err(Error::Invalid(format!("dt must be positive, got {dt}")));
    }
    let half = T::lit(dt / 2.0);
    let k1 = f.build(g, x)?;
    let d1 = g.scale(k1, half);
    let x2 = g.add(x, d1)?;
    let k2 = f.build(g, x2)?;
    let d2 = g.scale(k2, half);
    let x3 = g.add(x, d2)?;
    let k3 = f.build(g, x3)?;
    let d3 = g.scale(k3, T::lit(dt));
    let x4 = g.add(x, d3)?;
    let k4 = f.build(g, x4)?;
    let outer = g.add(k1, k4)?;
    let inner = g.add(k2, k3)?;
    let inner2 = g.scale(inner, T::lit(2.0));
    let sum = g.add(outer, inner2)?;
    let incr = g.scale(sum, T::lit(dt / 6.0));
    g.add(x, incr)
}

/// Unrolled RK4 rollout; returns the `n_steps + 1` state nodes starting at `x0`.
pub fn integrate<T: Real, F: DynamicsModel<T> + ?Sized>(
    g: &mut Graph<T>,
    f: &F,
    x0: NodeId,
    n_steps: usize,
    dt: f64,
) -> Result<Vec<NodeId>> {
    if n_steps == 0 {
        return Err(Error::Invalid("n_steps must be at least 1".into()));
    }
    let mut states = Vec::with_capacity(n_steps + 1);
    states.push(x0);
    let mut x = x0;
    for _ in 0..n_steps {
        x = rk4_step(g, f, x, dt)?;
        states.push(x);
    }
    Ok(states)
}

fn check_finite<T: Real>(x: &[T], what: &str) -> Result<()> {
    match x.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::NonFinite(format!("{what} (entry {i})"))),
        None => Ok(()),
    }
}

fn axpy<T: Real>(out: &mut [T], x: &[T], a: T, k: &[T]) {
    for ((o, &xi), &ki) in out.iter_mut().zip(x).zip(k) {
        *o = xi + a * ki;
    }
}

/// Scratch buffers for repeated plain RK4 steps.
struct Rk4Work<T> {
    k: [Vec<T>; 4],
    tmp: Vec<T>,
}

impl<T: Real> Rk4Work<T> {
    fn new(n: usize) -> Self {
        Self {
            k: std::array::from_fn(|_| vec![T::zero(); n]),
            tmp: vec![T::zero(); n],
        }
    }

    fn step(&mut self, f: &(impl VectorField<T> + ?Sized), x: &mut [T], dt: T) {
        let half = dt / T::lit(2.0);
        let [k1, k2, k3, k4] = &mut self.k;
        f.eval(x, k1);
        axpy(&mut self.tmp, x, half, k1);
        f.eval(&self.tmp, k2);
        axpy(&mut self.tmp, x, half, k2);
        f.eval(&self.tmp, k3);
        axpy(&mut self.tmp, x, dt, k3);
        f.eval(&self.tmp, k4);
        let sixth = dt / T::lit(6.0);
        let two = T::lit(2.0);
        for i in 0..x.len() {
            x[i] += sixth * (k1[i] + two * (k2[i] + k3[i]) + k4[i]);
        }
    }
}

/// One plain RK4 step on a flat state.
pub fn rk4_step_plain<T: Real>(
    f: &(impl VectorField<T> + ?Sized),
    x: &[T],
    dt: f64,
) -> Result<Vec<T>> {
    let mut out = x.to_vec();
    Rk4Work::new(x.len()).step(f, &mut out, T::lit(dt));
    check_finite(&out, "rk4 step")?;
    Ok(out)
}

fn subsampled<T: Real>(
    x0: &Tensor<T>,
    spec: StateSpec,
    dt: f64,
    n: usize,
    keep_every: usize,
    mut advance: impl FnMut(&mut [T]),
    scheme: &str,
) -> Result<Trajectory<T>> {
    if keep_every == 0 || n == 0 || n % keep_every != 0 {
        return Err(Error::Invalid(format!(
            "keep_every ({keep_every}) must divide the step count ({n})"
        )));
    }
    if x0.numel() != spec.len() {
        return Err(Error::Shape(format!(
            "initial state has {} entries, spec expects {}",
            x0.numel(),
            spec.len()
        )));
    }
    let shape = spec.shape();
    let mut x = x0.data().to_vec();
    let mut states = vec![Tensor::from_raw(shape.clone(), x.clone())];
    for step in 1..=n {
        advance(&mut x);
        if step % keep_every == 0 {
            check_finite(&x, scheme)?;
            states.push(Tensor::from_raw(shape.clone(), x.clone()));
        }
    }
    Trajectory::new(spec, dt * keep_every as f64, states)
}

/// Forward Euler at `dt_sim`, keeping every `keep_every`-th state.
pub fn euler_fine<T: Real>(
    f: &(impl VectorField<T> + ?Sized),
    x0: &Tensor<T>,
    spec: StateSpec,
    dt_sim: f64,
    n: usize,
    keep_every: usize,
) -> Result<Trajectory<T>> {
    let dt = T::lit(dt_sim);
    let mut d = vec![T::zero(); spec.len()];
    subsampled(
        x0,
        spec,
        dt_sim,
        n,
        keep_every,
        |x| {
            f.eval(x, &mut d);
            for (xi, &di) in x.iter_mut().zip(&d) {
                *xi += dt * di;
            }
        },
        "forward Euler step",
    )
}

/// Plain RK4 at `dt_sim`, keeping every `keep_every`-th state.
pub fn rk4_fine<T: Real>(
    f: &(impl VectorField<T> + ?Sized),
    x0: &Tensor<T>,
    spec: StateSpec,
    dt_sim: f64,
    n: usize,
    keep_every: usize,
) -> Result<Trajectory<T>> {
    let dt = T::lit(dt_sim);
    let mut work = Rk4Work::new(spec.len());
    subsampled(
        x0,
        spec,
        dt_sim,
        n,
        keep_every,
        |x| work.step(f, x, dt),
        "RK4 step",
    )
}

#[derive(Clone, Copy, Debug)]
pub struct Dopri5Options {
    pub rtol: f64,
    pub atol: f64,
    pub max_steps: usize,
}

impl Default for Dopri5Options {
    fn default() -> Self {
        Self {
            rtol: 1e-8,
            atol: 1e-10,
            max_steps: 1_000_000,
        }
    }
}

const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const A71: f64 = 35.0 / 384.0;
const A73: f64 = 500.0 / 1113.0;
const A74: f64 = 125.0 / 192.0;
const A75: f64 = -2187.0 / 6784.0;
const A76: f64 = 11.0 / 84.0;
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;
const D1: f64 = -12715105075.0 / 11282082432.0;
const D3: f64 = 87487479700.0 / 32700410799.0;
const D4: f64 = -10690763975.0 / 1880347072.0;
const D5: f64 = 701980252875.0 / 199316789632.0;
const D6: f64 = -1453857185.0 / 822651844.0;
const D7: f64 = 69997945.0 / 29380423.0;

fn weighted_rms(v: &[f64], scale: &[f64]) -> f64 {
    let s: f64 = v.iter().zip(scale).map(|(a, s)| (a / s).powi(2)).sum();
    (s / v.len().max(1) as f64).sqrt()
}

/// Adaptive Dormand–Prince 5(4) with PI step-size control, sampled at
/// `t_grid` through the 4th-order dense output. Simulation only.
pub fn dopri5(
    f: &(impl VectorField<f64> + ?Sized),
    x0: &[f64],
    t_grid: &[f64],
    opts: Dopri5Options,
) -> Result<Vec<Vec<f64>>> {
    if t_grid.first() != Some(&0.0) || t_grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Invalid(
            "time grid must start at 0 and be strictly increasing".into(),
        ));
    }
    let n = x0.len();
    let t_end = *t_grid.last().unwrap();
    let mut out = vec![x0.to_vec()];
    if t_grid.len() == 1 {
        return Ok(out);
    }
    let (rtol, atol) = (opts.rtol, opts.atol);
    let scale = |a: &[f64], b: &[f64]| -> Vec<f64> {
        a.iter()
            .zip(b)
            .map(|(x, y)| atol + rtol * x.abs().max(y.abs()))
            .collect()
    };

    let mut y = x0.to_vec();
    let mut k1 = vec![0.0; n];
    f.eval(&y, &mut k1);

    // initial step (Hairer & Wanner heuristic)
    let sc = scale(&y, &y);
    let d0 = weighted_rms(&y, &sc);
    let d1 = weighted_rms(&k1, &sc);
    let h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
    let y1: Vec<f64> = y.iter().zip(&k1).map(|(a, k)| a + h0 * k).collect();
    let mut f1 = vec![0.0; n];
    f.eval(&y1, &mut f1);
    let diff: Vec<f64> = f1.iter().zip(&k1).map(|(a, b)| a - b).collect();
    let d2 = weighted_rms(&diff, &sc) / h0;
    let h1 = if d1.max(d2) <= 1e-15 {
        (h0 * 1e-3).max(1e-6)
    } else {
        (0.01 / d1.max(d2)).powf(0.2)
    };
    let mut h = (100.0 * h0).min(h1).min(t_end);

    let (mut k2, mut k3, mut k4, mut k5, mut k6, mut k7) = (
        vec![0.0; n],
        vec![0.0; n],
        vec![0.0; n],
        vec![0.0; n],
        vec![0.0; n],
        vec![0.0; n],
    );
    let mut stage = vec![0.0; n];
    let mut y_new = vec![0.0; n];
    let mut err = vec![0.0; n];

    const SAFE: f64 = 0.9;
    const BETA: f64 = 0.04;
    const FAC_MIN: f64 = 0.2;
    const FAC_MAX: f64 = 10.0;
    let expo1 = 0.2 - BETA * 0.75;
    let mut facold: f64 = 1e-4;

    let mut t = 0.0;
    let mut next = 1;
    let mut steps = 0;
    while next < t_grid.len() {
        steps += 1;
        if steps > opts.max_steps {
            return Err(Error::StepUnderflow(t));
        }
        if h < 1e-14 * t.abs().max(1.0) {
            return Err(Error::StepUnderflow(t));
        }
        if t + h > t_end {
            h = t_end - t;
        }
        for i in 0..n {
            stage[i] = y[i] + h * A21 * k1[i];
        }
        f.eval(&stage, &mut k2);
        for i in 0..n {
            stage[i] = y[i] + h * (A31 * k1[i] + A32 * k2[i]);
        }
        f.eval(&stage, &mut k3);
        for i in 0..n {
            stage[i] = y[i] + h * (A41 * k1[i] + A42 * k2[i] + A43 * k3[i]);
        }
        f.eval(&stage, &mut k4);
        for i in 0..n {
            stage[i] = y[i] + h * (A51 * k1[i] + A52 * k2[i] + A53 * k3[i] + A54 * k4[i]);
        }
        f.eval(&stage, &mut k5);
        for i in 0..n {
            stage[i] = y[i]
                + h * (A61 * k1[i] + A62 * k2[i] + A63 * k3[i] + A64 * k4[i] + A65 * k5[i]);
        }
        f.eval(&stage, &mut k6);
        for i in 0..n {
            y_new[i] = y[i]
                + h * (A71 * k1[i] + A73 * k3[i] + A74 * k4[i] + A75 * k5[i] + A76 * k6[i]);
        }
        f.eval(&y_new, &mut k7);
        for i in 0..n {
            err[i] = h
                * (E1 * k1[i] + E3 * k3[i] + E4 * k4[i] + E5 * k5[i] + E6 * k6[i] + E7 * k7[i]);
        }
        let e = weighted_rms(&err, &scale(&y, &y_new));
        if !e.is_finite() {
            h *= FAC_MIN;
            continue;
        }
        let fac11 = e.powf(expo1);
        let fac = (fac11 / facold.powf(BETA) / SAFE).clamp(1.0 / FAC_MAX, 1.0 / FAC_MIN);
        if e <= 1.0 {
            facold = e.max(1e-4);
            let t_new = t + h;
            // dense output between t and t_new
            while next < t_grid.len() && t_grid[next] <= t_new + 1e-12 * t_new.abs().max(1.0) {
                let theta = ((t_grid[next] - t) / h).clamp(0.0, 1.0);
                let th1 = 1.0 - theta;
                let sample: Vec<f64> = (0..n)
                    .map(|i| {
                        let ydiff = y_new[i] - y[i];
                        let bspl = h * k1[i] - ydiff;
                        let c4 = ydiff - h * k7[i] - bspl;
                        let c5 = h
                            * (D1 * k1[i]
                                + D3 * k3[i]
                                + D4 * k4[i]
                                + D5 * k5[i]
                                + D6 * k6[i]
                                + D7 * k7[i]);
                        y[i] + theta * (ydiff + th1 * (bspl + theta * (c4 + th1 * c5)))
                    })
                    .collect();
                check_finite(&sample, "Dormand-Prince output")?;
                out.push(sample);
                next += 1;
            }
            std::mem::swap(&mut y, &mut y_new);
            std::mem::swap(&mut k1, &mut k7);
            t = t_new;
            h /= fac;
        } else {
            h /= (fac11 / SAFE).min(1.0 / FAC_MIN);
        }
    }
    Ok(out)
}

/// [`dopri5`] sampled on the uniform grid `0, dt, …, n·dt`, packaged as a
/// trajectory.
pub fn dopri5_uniform(
    f: &(impl VectorField<f64> + ?Sized),
    x0: &Tensor<f64>,
    spec: StateSpec,
    dt: f64,
    n: usize,
    opts: Dopri5Options,
) -> Result<Trajectory<f64>> {
    let grid: Vec<f64> = (0..=n).map(|k| k as f64 * dt).collect();
    let states = dopri5(f, x0.data(), &grid, opts)?;
    let shape = spec.shape();
    Trajectory::new(
        spec,
        dt,
        states
            .into_iter()
            .map(|s| Tensor::from_raw(shape.clone(), s))
            .collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::ParamSet;

    fn decay(g: &mut Graph<f64>, x: NodeId) -> Result<NodeId> {
        Ok(g.scale(x, -1.0))
    }

    fn zero_field(g: &mut Graph<f64>, x: NodeId) -> Result<NodeId> {
        Ok(g.scale(x, 0.0))
    }

    fn rollout(f: &dyn DynamicsModel<f64>, x0: f64, n: usize, dt: f64) -> Vec<f64> {
        let mut g = Graph::new();
        let x = g.input("x0", vec![1, 1], false).unwrap();
        let states = integrate(&mut g, f, x, n, dt).unwrap();
        g.forward(&[("x0", Tensor::new(vec![1, 1], vec![x0]).unwrap())])
            .unwrap();
        states.iter().map(|&s| g.value(s).unwrap().item()).collect()
    }

    #[test]
    fn null_dynamics_leaves_state_unchanged() {
        let traj = rollout(&zero_field, 0.7, 3, 0.5);
        assert!(traj.iter().all(|&v| v == 0.7));
    }

    #[test]
    fn rk4_single_decay_step() {
        let traj = rollout(&decay, 1.0, 1, 0.1);
        assert!((traj[1] - 0.904_837_5).abs() < 1e-9);
        assert!((traj[1] - (-0.1f64).exp()).abs() < 1e-7);
    }

    #[test]
    fn rk4_decay_ten_steps() {
        let traj = rollout(&decay, 1.0, 10, 0.1);
        assert_eq!(traj.len(), 11);
        assert!((traj[10] - (-1.0f64).exp()).abs() < 1e-6);
    }

    #[test]
    fn rk4_harmonic_oscillator_1000_steps() {
        let osc = |x: &[f64], d: &mut [f64]| {
            d[0] = x[1];
            d[1] = -x[0];
        };
        let traj = rk4_fine(
            &osc,
            &Tensor::new(vec![2], vec![1.0, 0.0]).unwrap(),
            StateSpec::Vector(2),
            0.01,
            1000,
            1000,
        )
        .unwrap();
        let end = traj.last().data();
        assert!((end[0] - 10f64.cos()).abs() < 1e-6);
        assert!((end[1] + 10f64.sin()).abs() < 1e-6);
    }

    #[test]
    fn rk4_chain_rule_matches_polynomial_and_finite_differences() {
        let mut g = Graph::new();
        let x = g.input("x0", vec![1, 1], true).unwrap();
        let next = rk4_step(&mut g, &decay, x, 0.1).unwrap();
        let root = g.sum(next);
        let mut p = ParamSet::new();
        p.insert("x0", Tensor::new(vec![1, 1], vec![0.3]).unwrap())
            .unwrap();
        g.forward(&p).unwrap();
        let grad = g.backward(root).unwrap().get("x0").unwrap().item();
        let poly = 1.0 - 0.1 + 0.005 - 0.1f64.powi(3) / 6.0 + 0.1f64.powi(4) / 24.0;
        assert!((grad - poly).abs() < 1e-12);
        let h = 1e-6;
        let fd = (rollout(&decay, 0.3 + h, 1, 0.1)[1] - rollout(&decay, 0.3 - h, 1, 0.1)[1])
            / (2.0 * h);
        assert!((grad - fd).abs() < 1e-8);
    }

    #[test]
    fn rk4_empirical_order_is_four() {
        let dts = [0.1, 0.05, 0.025, 0.0125];
        let errs: Vec<f64> = dts
            .iter()
            .map(|&dt| {
                let n = (1.0 / dt as f64).round() as usize;
                let traj = rollout(&decay, 1.0, n, dt);
                (traj[n] - (-1.0f64).exp()).abs()
            })
            .collect();
        let slope = fitted_slope(&dts, &errs);
        assert!((3.8..=4.2).contains(&slope), "slope {slope}");
    }

    pub(crate) fn fitted_slope(dts: &[f64], errs: &[f64]) -> f64 {
        let xs: Vec<f64> = dts.iter().map(|d| d.ln()).collect();
        let ys: Vec<f64> = errs.iter().map(|e| e.ln()).collect();
        let n = xs.len() as f64;
        let mx = xs.iter().sum::<f64>() / n;
        let my = ys.iter().sum::<f64>() / n;
        let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
        let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
        sxy / sxx
    }

    #[test]
    fn rk4_forward_then_backward_returns_near_start() {
        let f = |x: &[f64], d: &mut [f64]| {
            d[0] = x[1];
            d[1] = -x[0].sin();
        };
        for dt in [0.1, 0.05] {
            let x0 = [0.4, -0.2];
            let fwd = rk4_step_plain(&f, &x0, dt).unwrap();
            let neg = |x: &[f64], d: &mut [f64]| {
                f(x, d);
                d.iter_mut().for_each(|v| *v = -*v);
            };
            let back = rk4_step_plain(&neg, &fwd, dt).unwrap();
            let err = (back[0] - x0[0]).abs().max((back[1] - x0[1]).abs());
            assert!(err < 10.0 * dt.powi(5), "dt {dt}: {err}");
        }
    }

    #[test]
    fn rk4_plain_reports_blow_up() {
        let f = |x: &[f64], d: &mut [f64]| d[0] = x[0] * x[0] * 1e200;
        assert!(matches!(
            rk4_step_plain(&f, &[1e200], 1.0),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn dopri5_decay_to_one() {
        let f = |x: &[f64], d: &mut [f64]| d[0] = -x[0];
        let out = dopri5(&f, &[1.0], &[0.0, 0.25, 0.5, 1.0], Dopri5Options::default()).unwrap();
        assert_eq!(out.len(), 4);
        assert!((out[3][0] - (-1.0f64).exp()).abs() < 1e-8);
        assert!((out[1][0] - (-0.25f64).exp()).abs() < 1e-8);
    }

    #[test]
    fn dopri5_null_dynamics_constant() {
        let f = |_: &[f64], d: &mut [f64]| d.iter_mut().for_each(|v| *v = 0.0);
        let out = dopri5(&f, &[0.3, -2.0], &[0.0, 1.0, 2.0], Dopri5Options::default()).unwrap();
        assert!(out.iter().all(|s| s == &[0.3, -2.0]));
    }

    #[test]
    fn dopri5_small_angle_pendulum_period() {
        let omega0 = 2.0 * std::f64::consts::PI / 12.0;
        let f = move |x: &[f64], d: &mut [f64]| {
            d[0] = x[1];
            d[1] = -omega0 * omega0 * x[0].sin();
        };
        let dt = 0.01;
        let grid: Vec<f64> = (0..=3000).map(|k| k as f64 * dt).collect();
        let out = dopri5(&f, &[0.01, 0.0], &grid, Dopri5Options::default()).unwrap();
        // downward zero crossings of θ, located by linear interpolation
        let mut crossings = Vec::new();
        for k in 1..out.len() {
            let (a, b) = (out[k - 1][0], out[k][0]);
            if a > 0.0 && b <= 0.0 {
                crossings.push(grid[k - 1] + dt * a / (a - b));
            }
        }
        assert!(crossings.len() >= 2);
        let period = crossings[1] - crossings[0];
        let expected = 12.0;
        assert!((period - expected).abs() / expected < 1e-3, "period {period}");
    }

    #[test]
    fn dopri5_rejects_bad_grid() {
        let f = |_: &[f64], _: &mut [f64]| {};
        assert!(dopri5(&f, &[1.0], &[0.5, 1.0], Dopri5Options::default()).is_err());
        assert!(dopri5(&f, &[1.0], &[0.0, 1.0, 1.0], Dopri5Options::default()).is_err());
    }

    #[test]
    fn dopri5_reports_finite_time_blow_up() {
        // dX/dt = X² from X0 = 1 blows up at t = 1
        let f = |x: &[f64], d: &mut [f64]| d[0] = x[0] * x[0];
        let res = dopri5(&f, &[1.0], &[0.0, 2.0], Dopri5Options::default());
        assert!(res.is_err());
    }

    #[test]
    fn euler_fine_decay() {
        let f = |x: &[f64], d: &mut [f64]| d[0] = -x[0];
        let x0 = Tensor::new(vec![1], vec![1.0]).unwrap();
        let traj = euler_fine(&f, &x0, StateSpec::Vector(1), 1e-3, 1000, 100).unwrap();
        assert_eq!(traj.len(), 11);
        assert!((traj.dt() - 0.1).abs() < 1e-15);
        assert!((traj.last().item() - (-1.0f64).exp()).abs() < 1e-3);
    }

    #[test]
    fn euler_fine_requires_divisible_keep_every() {
        let f = |_: &[f64], _: &mut [f64]| {};
        let x0 = Tensor::new(vec![1], vec![1.0]).unwrap();
        assert!(euler_fine(&f, &x0, StateSpec::Vector(1), 1e-3, 10, 3).is_err());
    }

    #[test]
    fn euler_fine_reports_cfl_blow_up() {
        let f = |x: &[f64], d: &mut [f64]| d[0] = -1e3 * x[0];
        let x0 = Tensor::new(vec![1], vec![1.0]).unwrap();
        let res = euler_fine(&f, &x0, StateSpec::Vector(1), 1.0, 400, 400);
        assert!(matches!(res, Err(Error::NonFinite(_))));
    }

    #[test]
    fn trajectory_invariants() {
        let s = |v: f64| Tensor::new(vec![2], vec![v, v]).unwrap();
        assert!(Trajectory::new(StateSpec::Vector(2), 0.1, vec![s(0.0)]).is_err());
        assert!(Trajectory::new(StateSpec::Vector(2), 0.0, vec![s(0.0), s(1.0)]).is_err());
        assert!(Trajectory::new(StateSpec::Vector(3), 0.1, vec![s(0.0), s(1.0)]).is_err());
        let t = Trajectory::new(StateSpec::Vector(2), 0.1, vec![s(0.0), s(1.0)]).unwrap();
        assert_eq!(t.len(), 2);
    }
}
