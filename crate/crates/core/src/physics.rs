//! Parametric physical dynamics for the pendulum, reaction–diffusion and
//! damped-wave systems.
//!
//! Each system comes in two flavours: a plain right-hand side on flat
//! slices used for simulation, and a graph builder ([`PhysicalModel`]) used
//! during training. Learned physical parameters are stored unconstrained
//! and mapped through `floor + softplus(raw)`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::diffcore::{Graph, NodeId, Padding, ParamSet, Tensor};
use crate::error::{Error, Result};
use crate::integrators::{DynamicsModel, VectorField};
use crate::scalar::Real;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PendulumParams {
    pub omega0_sq: f64,
    pub alpha: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReacDiffParams {
    pub a: f64,
    pub b: f64,
    /// `None` drops both reaction terms (diffusion-only variant).
    pub k: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WaveParams {
    pub c: f64,
    /// Damping; `None` for the undamped variant.
    pub k: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundaryCondition {
    Periodic,
    NeumannZero,
}

impl BoundaryCondition {
    fn padding(self) -> Padding {
        match self {
            BoundaryCondition::Periodic => Padding::Circular,
            BoundaryCondition::NeumannZero => Padding::Replicate,
        }
    }
}

/// Uniform 2-D grid.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub height: usize,
    pub width: usize,
    pub dx: f64,
}

impl Grid {
    pub fn cells(&self) -> usize {
        self.height * self.width
    }
}

/// 5-point Laplacian of a single `[H, W]` field, written into `out`.
pub fn laplacian<T: Real>(field: &[T], grid: Grid, bc: BoundaryCondition, out: &mut [T]) {
    let (h, w) = (grid.height, grid.width);
    debug_assert!(h >= 3 && w >= 3 && field.len() == h * w && out.len() == h * w);
    let inv = T::lit(1.0 / (grid.dx * grid.dx));
    let four = T::lit(4.0);
    let (up, down, left, right): (
        Box<dyn Fn(usize) -> usize>,
        Box<dyn Fn(usize) -> usize>,
        Box<dyn Fn(usize) -> usize>,
        Box<dyn Fn(usize) -> usize>,
    ) = match bc {
        BoundaryCondition::Periodic => (
            Box::new(move |i| (i + h - 1) % h),
            Box::new(move |i| (i + 1) % h),
            Box::new(move |j| (j + w - 1) % w),
            Box::new(move |j| (j + 1) % w),
        ),
        BoundaryCondition::NeumannZero => (
            Box::new(|i: usize| i.saturating_sub(1)),
            Box::new(move |i| (i + 1).min(h - 1)),
            Box::new(|j: usize| j.saturating_sub(1)),
            Box::new(move |j| (j + 1).min(w - 1)),
        ),
    };
    let ups: Vec<usize> = (0..h).map(&up).collect();
    let downs: Vec<usize> = (0..h).map(&down).collect();
    let lefts: Vec<usize> = (0..w).map(&left).collect();
    let rights: Vec<usize> = (0..w).map(&right).collect();
    for i in 0..h {
        let (ru, rd, r) = (ups[i] * w, downs[i] * w, i * w);
        for j in 0..w {
            let c = field[r + j];
            out[r + j] = (field[ru + j] + field[rd + j] + field[r + lefts[j]] + field[r + rights[j]]
                - four * c)
                * inv;
        }
    }
}

/// [`laplacian`] on a `[H, W]` tensor.
pub fn laplacian_tensor<T: Real>(
    field: &Tensor<T>,
    bc: BoundaryCondition,
    dx: f64,
) -> Result<Tensor<T>> {
    let &[height, width] = field.shape() else {
        return Err(Error::Shape(format!("laplacian expects [H, W], got {:?}", field.shape())));
    };
    if height < 3 || width < 3 {
        return Err(Error::Shape(format!("laplacian needs H, W >= 3, got {:?}", field.shape())));
    }
    let mut out = vec![T::zero(); field.numel()];
    laplacian(field.data(), Grid { height, width, dx }, bc, &mut out);
    Ok(Tensor::from_raw(field.shape().to_vec(), out))
}

impl<T: Real> VectorField<T> for PendulumParams {
    fn eval(&self, x: &[T], d: &mut [T]) {
        let (u, v) = (x[0], x[1]);
        d[0] = v;
        d[1] = -T::lit(self.omega0_sq) * u.sin();
        if let Some(alpha) = self.alpha {
            d[1] -= T::lit(alpha) * v;
        }
    }
}

/// Reaction–diffusion right-hand side on a flat `[2, H, W]` state.
#[derive(Clone, Copy, Debug)]
pub struct ReacDiffField {
    pub params: ReacDiffParams,
    pub grid: Grid,
}

impl<T: Real> VectorField<T> for ReacDiffField {
    fn eval(&self, x: &[T], d: &mut [T]) {
        let n = self.grid.cells();
        let (u, v) = x.split_at(n);
        let (du, dv) = d.split_at_mut(n);
        laplacian(u, self.grid, BoundaryCondition::Periodic, du);
        laplacian(v, self.grid, BoundaryCondition::Periodic, dv);
        let (a, b) = (T::lit(self.params.a), T::lit(self.params.b));
        du.iter_mut().for_each(|e| *e *= a);
        dv.iter_mut().for_each(|e| *e *= b);
        if let Some(k) = self.params.k {
            let k = T::lit(k);
            for i in 0..n {
                du[i] += u[i] - u[i] * u[i] * u[i] - k - v[i];
                dv[i] += u[i] - v[i];
            }
        }
    }
}

/// Damped-wave right-hand side on a flat `[2, H, W]` state `(w, ∂w/∂t)`.
#[derive(Clone, Copy, Debug)]
pub struct WaveField {
    pub params: WaveParams,
    pub grid: Grid,
}

impl<T: Real> VectorField<T> for WaveField {
    fn eval(&self, x: &[T], d: &mut [T]) {
        let n = self.grid.cells();
        let (w, v) = x.split_at(n);
        let (dw, dv) = d.split_at_mut(n);
        dw.copy_from_slice(v);
        laplacian(w, self.grid, BoundaryCondition::NeumannZero, dv);
        let c2 = T::lit(self.params.c * self.params.c);
        dv.iter_mut().for_each(|e| *e *= c2);
        if let Some(k) = self.params.k {
            let k = T::lit(k);
            for i in 0..n {
                dv[i] -= k * v[i];
            }
        }
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `floor + softplus(raw)`.
pub fn constrain(raw: f64, floor: f64) -> f64 {
    floor + softplus(raw)
}

/// Inverse of [`constrain`]; `value` must lie strictly above `floor`.
pub fn unconstrain(value: f64, floor: f64) -> Result<f64> {
    let y = value - floor;
    if !(y > 0.0) || !y.is_finite() {
        return Err(Error::Invalid(format!(
            "value {value} is not above its floor {floor}"
        )));
    }
    Ok(if y > 30.0 { y + (-(-y).exp()).ln_1p() } else { y.exp_m1().ln() })
}

/// Parametric physical family `Fp`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    PendulumFrictionless,
    PendulumDamped,
    ReacDiffDiffusion,
    ReacDiffFull,
    WaveUndamped,
    WaveDamped,
}

impl Family {
    /// Parameter names (without the `phys.` prefix) and their floors.
    pub fn params(self) -> &'static [(&'static str, f64)] {
        match self {
            Family::PendulumFrictionless => &[("omega0_sq", 1e-4)],
            Family::PendulumDamped => &[("omega0_sq", 1e-4), ("alpha", 1e-4)],
            Family::ReacDiffDiffusion => &[("a", 1e-6), ("b", 1e-6)],
            Family::ReacDiffFull => &[("a", 1e-6), ("b", 1e-6), ("k", 1e-6)],
            Family::WaveUndamped => &[("c", 1.0)],
            Family::WaveDamped => &[("c", 1.0), ("k", 1.0)],
        }
    }

    pub fn is_field(self) -> bool {
        !matches!(self, Family::PendulumFrictionless | Family::PendulumDamped)
    }

    pub fn boundary(self) -> BoundaryCondition {
        match self {
            Family::WaveUndamped | Family::WaveDamped => BoundaryCondition::NeumannZero,
            _ => BoundaryCondition::Periodic,
        }
    }
}

pub const PARAM_PREFIX: &str = "phys.";

/// Graph-side physical model. Parameters are either learned (bound as
/// `phys.<name>` raw scalars) or fixed constants.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhysicalModel {
    pub family: Family,
    /// Grid spacing for field systems (ignored for the pendulum).
    pub dx: f64,
    /// `Some` pins the parameters to these values, in [`Family::params`] order.
    pub fixed: Option<Vec<f64>>,
}

impl PhysicalModel {
    pub fn learned(family: Family, dx: f64) -> Self {
        Self { family, dx, fixed: None }
    }

    pub fn fixed(family: Family, dx: f64, values: Vec<f64>) -> Result<Self> {
        if values.len() != family.params().len() {
            return Err(Error::Invalid(format!(
                "{family:?} takes {} parameters, got {}",
                family.params().len(),
                values.len()
            )));
        }
        Ok(Self { family, dx, fixed: Some(values) })
    }

    pub fn is_learned(&self) -> bool {
        self.fixed.is_none()
    }

    /// Raw initial parameters: given guesses where present, otherwise twice
    /// the floor. Empty for fixed models.
    pub fn init_params<T: Real>(&self, guesses: &BTreeMap<String, f64>) -> Result<ParamSet<T>> {
        let mut out = ParamSet::new();
        if !self.is_learned() {
            return Ok(out);
        }
        for &(name, floor) in self.family.params() {
            let value = guesses.get(name).copied().unwrap_or(2.0 * floor);
            out.insert(
                format!("{PARAM_PREFIX}{name}"),
                Tensor::scalar(T::lit(unconstrain(value, floor)?)),
            )?;
        }
        Ok(out)
    }

    /// Physical parameter values, keyed by name without the prefix.
    pub fn values<T: Real>(&self, params: &ParamSet<T>) -> Result<BTreeMap<String, f64>> {
        let spec = self.family.params();
        if let Some(fixed) = &self.fixed {
            return Ok(spec.iter().zip(fixed).map(|(&(n, _), &v)| (n.to_string(), v)).collect());
        }
        spec.iter()
            .map(|&(name, floor)| {
                let key = format!("{PARAM_PREFIX}{name}");
                let raw = params
                    .get(&key)
                    .ok_or_else(|| Error::Unbound(key.clone()))?
                    .item()
                    .to_f64_lossy();
                Ok((name.to_string(), constrain(raw, floor)))
            })
            .collect()
    }

    fn param_nodes<T: Real>(&self, g: &mut Graph<T>) -> Result<Vec<NodeId>> {
        let spec = self.family.params();
        let mut nodes = Vec::with_capacity(spec.len());
        for (i, &(name, floor)) in spec.iter().enumerate() {
            let key = format!("{PARAM_PREFIX}{name}");
            let node = match &self.fixed {
                Some(values) => {
                    let v = values[i];
                    g.cached(&format!("{key}#fixed={v:e}"), |g| Ok(g.scalar(T::lit(v))))?
                }
                None => g.cached(&format!("{key}#value"), |g| {
                    let raw = g.input(&key, Vec::new(), true)?;
                    let sp = g.softplus(raw);
                    let fl = g.scalar(T::lit(floor));
                    g.add(sp, fl)
                })?,
            };
            nodes.push(node);
        }
        Ok(nodes)
    }
}

fn const_cached<T: Real>(
    g: &mut Graph<T>,
    key: &str,
    shape: Vec<usize>,
    data: Vec<f64>,
) -> Result<NodeId> {
    g.cached(key, |g| {
        Ok(g.constant(Tensor::from_raw(shape, data.into_iter().map(T::lit).collect())))
    })
}

/// `[1, 2, 3, 3]` kernel picking channel `ch` through its centre tap.
fn pick_kernel(ch: usize) -> Vec<f64> {
    let mut k = vec![0.0; 18];
    k[ch * 9 + 4] = 1.0;
    k
}

/// `[2, 1, 3, 3]` kernel placing a single channel into output channel `ch`.
fn place_kernel(ch: usize) -> Vec<f64> {
    let mut k = vec![0.0; 18];
    k[ch * 9 + 4] = 1.0;
    k
}

/// `[1, 2, 3, 3]` Laplacian stencil on channel `ch`.
fn laplace_kernel(ch: usize, dx: f64) -> Vec<f64> {
    let s = 1.0 / (dx * dx);
    let mut k = vec![0.0; 18];
    for (tap, w) in [(1, s), (3, s), (4, -4.0 * s), (5, s), (7, s)] {
        k[ch * 9 + tap] = w;
    }
    k
}

struct FieldOps {
    padding: Padding,
    dx: f64,
}

impl FieldOps {
    fn pick<T: Real>(&self, g: &mut Graph<T>, x: NodeId, ch: usize) -> Result<NodeId> {
        let k = const_cached(g, &format!("field.pick{ch}"), vec![1, 2, 3, 3], pick_kernel(ch))?;
        g.conv2d(x, k, None, self.padding)
    }

    fn laplace<T: Real>(&self, g: &mut Graph<T>, x: NodeId, ch: usize) -> Result<NodeId> {
        let key = format!("field.lap{ch}.{:?}.{:e}", self.padding, self.dx);
        let k = const_cached(g, &key, vec![1, 2, 3, 3], laplace_kernel(ch, self.dx))?;
        g.conv2d(x, k, None, self.padding)
    }

    fn assemble<T: Real>(&self, g: &mut Graph<T>, c0: NodeId, c1: NodeId) -> Result<NodeId> {
        let k0 = const_cached(g, "field.place0", vec![2, 1, 3, 3], place_kernel(0))?;
        let k1 = const_cached(g, "field.place1", vec![2, 1, 3, 3], place_kernel(1))?;
        let a = g.conv2d(c0, k0, None, self.padding)?;
        let b = g.conv2d(c1, k1, None, self.padding)?;
        g.add(a, b)
    }
}

impl<T: Real> DynamicsModel<T> for PhysicalModel {
    fn build(&self, g: &mut Graph<T>, x: NodeId) -> Result<NodeId> {
        let p = self.param_nodes(g)?;
        let shape = g.shape(x).to_vec();
        if !self.family.is_field() {
            if shape.len() != 2 || shape[1] != 2 {
                return Err(Error::Shape(format!("pendulum state batch {shape:?}, expected [B, 2]")));
            }
            let su = const_cached(g, "pend.pick_u", vec![2, 1], vec![1.0, 0.0])?;
            let sv = const_cached(g, "pend.pick_v", vec![2, 1], vec![0.0, 1.0])?;
            let e0 = const_cached(g, "pend.place0", vec![1, 2], vec![1.0, 0.0])?;
            let e1 = const_cached(g, "pend.place1", vec![1, 2], vec![0.0, 1.0])?;
            let u = g.affine(x, su, None)?;
            let v = g.affine(x, sv, None)?;
            let s = g.sin(u);
            let restoring = g.mul(s, p[0])?;
            let mut acc = g.scale(restoring, T::lit(-1.0));
            if let Some(&alpha) = p.get(1) {
                let friction = g.mul(v, alpha)?;
                acc = g.sub(acc, friction)?;
            }
            let dpos = g.affine(v, e0, None)?;
            let dvel = g.affine(acc, e1, None)?;
            return g.add(dpos, dvel);
        }
        let ch = shape.len().checked_sub(3).map(|i| shape[i]);
        if ch != Some(2) || shape.len() > 4 {
            return Err(Error::Shape(format!("field state {shape:?}, expected [B, 2, H, W]")));
        }
        let ops = FieldOps { padding: self.family.boundary().padding(), dx: self.dx };
        match self.family {
            Family::ReacDiffDiffusion | Family::ReacDiffFull => {
                let lu = ops.laplace(g, x, 0)?;
                let lv = ops.laplace(g, x, 1)?;
                let mut du = g.mul(lu, p[0])?;
                let mut dv = g.mul(lv, p[1])?;
                if let Some(&k) = p.get(2) {
                    let u = ops.pick(g, x, 0)?;
                    let v = ops.pick(g, x, 1)?;
                    let u2 = g.square(u);
                    let u3 = g.mul(u2, u)?;
                    let r = g.sub(u, u3)?;
                    let r = g.sub(r, v)?;
                    let r = g.sub(r, k)?;
                    du = g.add(du, r)?;
                    let rv = g.sub(u, v)?;
                    dv = g.add(dv, rv)?;
                }
                ops.assemble(g, du, dv)
            }
            Family::WaveUndamped | Family::WaveDamped => {
                let v = ops.pick(g, x, 1)?;
                let lw = ops.laplace(g, x, 0)?;
                let c2 = g.square(p[0]);
                let mut dv = g.mul(lw, c2)?;
                if let Some(&k) = p.get(1) {
                    let damp = g.mul(v, k)?;
                    dv = g.sub(dv, damp)?;
                }
                ops.assemble(g, v, dv)
            }
            Family::PendulumFrictionless | Family::PendulumDamped => unreachable!(),
        }
    }
}

/// Linear family admitting a closed-form projection.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LinearFamily {
    /// `(aΔu, bΔv)`; solves for `(a, b)`.
    ReacDiffDiffusion,
    /// `(v, c²Δw)`; linear in `c²`, reported as `c`.
    WaveUndamped,
}

/// Solves `A θ = r` for a small dense symmetric system by Gaussian
/// elimination with partial pivoting.
fn solve_dense(mut a: Vec<Vec<f64>>, mut r: Vec<f64>) -> Result<Vec<f64>> {
    let n = r.len();
    let scale = a.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap();
        if !(a[piv][col].abs() > 1e-12 * scale) {
            return Err(Error::Singular("degenerate normal equations".into()));
        }
        a.swap(col, piv);
        r.swap(col, piv);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            for c in col..n {
                a[row][c] -= f * a[col][c];
            }
            r[row] -= f * r[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|c| a[row][c] * x[c]).sum();
        x[row] = (r[row] - s) / a[row][row];
    }
    Ok(x)
}

/// Least-squares projection of derivative targets onto a linear family:
/// minimizes `Σ‖target − Fp(X)‖²` over the family parameters through the
/// normal equations. States and targets are `[2, H, W]`.
pub fn project_linear_family(
    samples: &[(Tensor<f64>, Tensor<f64>)],
    family: LinearFamily,
    dx: f64,
) -> Result<Vec<f64>> {
    if samples.is_empty() {
        return Err(Error::Invalid("projection needs at least one sample".into()));
    }
    let (bc, n_par) = match family {
        LinearFamily::ReacDiffDiffusion => (BoundaryCondition::Periodic, 2),
        LinearFamily::WaveUndamped => (BoundaryCondition::NeumannZero, 1),
    };
    let mut ata = vec![vec![0.0; n_par]; n_par];
    let mut atr = vec![0.0; n_par];
    for (x, t) in samples {
        let &[2, height, width] = x.shape() else {
            return Err(Error::Shape(format!("projection state {:?}", x.shape())));
        };
        if t.shape() != x.shape() {
            return Err(Error::Shape(format!("target {:?} vs state {:?}", t.shape(), x.shape())));
        }
        let grid = Grid { height, width, dx };
        let n = grid.cells();
        let (xd, td) = (x.data(), t.data());
        let mut lap = vec![0.0; n];
        match family {
            LinearFamily::ReacDiffDiffusion => {
                for ch in 0..2 {
                    laplacian(&xd[ch * n..(ch + 1) * n], grid, bc, &mut lap);
                    let tc = &td[ch * n..(ch + 1) * n];
                    ata[ch][ch] += lap.iter().map(|l| l * l).sum::<f64>();
                    atr[ch] += lap.iter().zip(tc).map(|(l, t)| l * t).sum::<f64>();
                }
            }
            LinearFamily::WaveUndamped => {
                // the first channel carries no parameter; only the second informs c²
                laplacian(&xd[..n], grid, bc, &mut lap);
                ata[0][0] += lap.iter().map(|l| l * l).sum::<f64>();
                atr[0] += lap.iter().zip(&td[n..]).map(|(l, t)| l * t).sum::<f64>();
            }
        }
    }
    let theta = solve_dense(ata, atr)?;
    match family {
        LinearFamily::ReacDiffDiffusion => Ok(theta),
        LinearFamily::WaveUndamped => {
            if theta[0] < 0.0 {
                return Err(Error::Invalid(format!("projected c² = {} is negative", theta[0])));
            }
            Ok(vec![theta[0].sqrt()])
        }
    }
}
