//! Ground-truth simulation of the benchmark systems, train/valid/test
//! splits, observation noise and on-disk datasets.
//!
//! A dataset directory holds `meta.json` and `data.bin`; the payload is
//! little-endian `f64` laid out `[trajectory][time][channel][row][col]`
//! and guarded by a CRC32 stored in the metadata.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::integrators::{dopri5_uniform, euler_fine, rk4_fine, Dopri5Options, StateSpec, Trajectory};
use crate::physics::{
    BoundaryCondition, Grid, PendulumParams, ReacDiffField, ReacDiffParams, WaveField, WaveParams,
};
use crate::rng;

pub const SCHEMA_VERSION: u32 = 1;
const META_FILE: &str = "meta.json";
const DATA_FILE: &str = "data.bin";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }

    fn stream(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Valid => 2,
            Split::Test => 3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum System {
    Pendulum,
    Reacdiff,
    Wave,
}

impl System {
    pub fn name(self) -> &'static str {
        match self {
            System::Pendulum => "pendulum",
            System::Reacdiff => "reacdiff",
            System::Wave => "wave",
        }
    }
}

/// Everything about a dataset except its payload.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub system: System,
    pub split: Split,
    pub spec: StateSpec,
    pub n_traj: usize,
    pub n_states: usize,
    pub dt: f64,
    pub true_params: BTreeMap<String, f64>,
    pub noise_sigma: f64,
    pub seed: u64,
    #[serde(default)]
    pub dx: Option<f64>,
    #[serde(default)]
    pub bc: Option<BoundaryCondition>,
}

#[derive(Serialize, Deserialize)]
struct MetaFile {
    schema_version: u32,
    #[serde(flatten)]
    meta: DatasetMeta,
    crc32: u32,
}

/// A set of equally shaped, uniformly sampled trajectories.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    meta: DatasetMeta,
    data: Vec<f64>,
}

impl Dataset {
    pub fn new(meta: DatasetMeta, data: Vec<f64>) -> Result<Self> {
        let ds = Self { meta, data };
        ds.validate()?;
        Ok(ds)
    }

    fn validate(&self) -> Result<()> {
        let m = &self.meta;
        if m.n_traj == 0 || m.n_states < 2 || !(m.dt > 0.0) {
            return Err(Error::Invalid(format!(
                "dataset needs trajectories of at least 2 states and dt > 0 (got {} × {}, dt {})",
                m.n_traj, m.n_states, m.dt
            )));
        }
        let expected = m.n_traj * m.n_states * m.spec.len();
        if self.data.len() != expected {
            return Err(Error::Shape(format!(
                "payload holds {} values, metadata implies {expected}",
                self.data.len()
            )));
        }
        if let Some(i) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("dataset payload (entry {i})")));
        }
        Ok(())
    }

    /// Stacks trajectories of a common shape.
    pub fn from_trajectories(
        mut meta: DatasetMeta,
        trajectories: &[Trajectory<f64>],
    ) -> Result<Self> {
        let first = trajectories
            .first()
            .ok_or_else(|| Error::Invalid("no trajectories".into()))?;
        meta.spec = first.spec();
        meta.n_states = first.len();
        meta.n_traj = trajectories.len();
        meta.dt = first.dt();
        let mut data = Vec::with_capacity(meta.n_traj * meta.n_states * meta.spec.len());
        for t in trajectories {
            if t.spec() != meta.spec || t.len() != meta.n_states || t.dt() != meta.dt {
                return Err(Error::Shape("trajectories differ in shape, length or dt".into()));
            }
            for s in t.states() {
                data.extend_from_slice(s.data());
            }
        }
        Self::new(meta, data)
    }

    pub fn meta(&self) -> &DatasetMeta {
        &self.meta
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn spec(&self) -> StateSpec {
        self.meta.spec
    }

    pub fn dt(&self) -> f64 {
        self.meta.dt
    }

    pub fn n_traj(&self) -> usize {
        self.meta.n_traj
    }

    pub fn n_states(&self) -> usize {
        self.meta.n_states
    }

    pub fn state(&self, traj: usize, k: usize) -> &[f64] {
        let d = self.meta.spec.len();
        let start = (traj * self.meta.n_states + k) * d;
        &self.data[start..start + d]
    }

    pub fn trajectory(&self, i: usize) -> Trajectory<f64> {
        let shape = self.meta.spec.shape();
        let states = (0..self.meta.n_states)
            .map(|k| Tensor::from_raw(shape.clone(), self.state(i, k).to_vec()))
            .collect();
        Trajectory::new(self.meta.spec, self.meta.dt, states).expect("validated dataset")
    }

    /// Subset of trajectories, in the given order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let traj_len = self.meta.n_states * self.meta.spec.len();
        let mut data = Vec::with_capacity(indices.len() * traj_len);
        for &i in indices {
            if i >= self.meta.n_traj {
                return Err(Error::Invalid(format!("trajectory {i} out of range")));
            }
            data.extend_from_slice(&self.data[i * traj_len..(i + 1) * traj_len]);
        }
        let meta = DatasetMeta {
            n_traj: indices.len(),
            ..self.meta.clone()
        };
        Self::new(meta, data)
    }

    /// Keeps the first `n_states` states of every trajectory.
    pub fn truncate(&self, n_states: usize) -> Result<Self> {
        if n_states < 2 || n_states > self.meta.n_states {
            return Err(Error::Invalid(format!(
                "cannot truncate {} states to {n_states}",
                self.meta.n_states
            )));
        }
        let d = self.meta.spec.len();
        let mut data = Vec::with_capacity(self.meta.n_traj * n_states * d);
        for i in 0..self.meta.n_traj {
            for k in 0..n_states {
                data.extend_from_slice(self.state(i, k));
            }
        }
        Self::new(DatasetMeta { n_states, ..self.meta.clone() }, data)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let bytes: Vec<u8> = self.data.iter().flat_map(|v| v.to_le_bytes()).collect();
        let file = MetaFile {
            schema_version: SCHEMA_VERSION,
            meta: self.meta.clone(),
            crc32: crc32fast::hash(&bytes),
        };
        let meta_path = dir.join(META_FILE);
        let json = serde_json::to_string_pretty(&file).map_err(|e| Error::json(&meta_path, e))?;
        let data_path = dir.join(DATA_FILE);
        fs::write(&data_path, &bytes).map_err(|e| Error::io(&data_path, e))?;
        fs::write(&meta_path, json + "\n").map_err(|e| Error::io(&meta_path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta_path = dir.join(META_FILE);
        let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let raw: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| Error::json(&meta_path, e))?;
        let version = raw.get("schema_version").and_then(|v| v.as_u64());
        match version {
            Some(v) if v == SCHEMA_VERSION as u64 => {}
            Some(v) => {
                return Err(Error::Version {
                    found: v as u32,
                    expected: SCHEMA_VERSION,
                })
            }
            None => return Err(Error::corrupt(&meta_path, "missing schema_version")),
        }
        let file: MetaFile = serde_json::from_value(raw).map_err(|e| Error::json(&meta_path, e))?;
        let data_path = dir.join(DATA_FILE);
        let bytes = fs::read(&data_path).map_err(|e| Error::io(&data_path, e))?;
        let m = &file.meta;
        let expected = m.n_traj * m.n_states * m.spec.len() * 8;
        if bytes.len() != expected {
            return Err(Error::corrupt(
                &data_path,
                format!("{} bytes, expected {expected}", bytes.len()),
            ));
        }
        let computed = crc32fast::hash(&bytes);
        if computed != file.crc32 {
            return Err(Error::Checksum {
                path: data_path,
                stored: file.crc32,
                computed,
            });
        }
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        Self::new(file.meta, data).map_err(|e| Error::corrupt(&data_path, e.to_string()))
    }
}

/// Maps `f` over `0..n` on all available cores, preserving order.
fn par_map<R: Send>(n: usize, f: impl Fn(usize) -> Result<R> + Sync) -> Result<Vec<R>> {
    let threads = std::thread::available_parallelism().map_or(1, |p| p.get()).min(n.max(1));
    if threads <= 1 {
        return (0..n).map(f).collect();
    }
    let chunks: Vec<Result<Vec<R>>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..threads)
            .map(|t| {
                let f = &f;
                s.spawn(move || (t * n / threads..(t + 1) * n / threads).map(f).collect())
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(n);
    for c in chunks {
        out.extend(c?);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PendulumConfig {
    pub n_traj: usize,
    pub steps: usize,
    pub dt: f64,
    pub t0: f64,
    pub alpha: f64,
    pub sigma: f64,
}

impl Default for PendulumConfig {
    fn default() -> Self {
        Self {
            n_traj: 25,
            steps: 40,
            dt: 0.5,
            t0: 12.0,
            alpha: 0.2,
            sigma: 0.01,
        }
    }
}

impl PendulumConfig {
    pub fn params(&self) -> PendulumParams {
        let omega0 = 2.0 * std::f64::consts::PI / self.t0;
        PendulumParams {
            omega0_sq: omega0 * omega0,
            alpha: Some(self.alpha),
        }
    }
}

pub fn gen_pendulum(cfg: &PendulumConfig, split: Split, seed: u64) -> Result<Dataset> {
    if !(cfg.t0 > 0.0) || !(cfg.alpha >= 0.0) || !(cfg.sigma >= 0.0) || cfg.steps == 0 {
        return Err(Error::Invalid(format!("bad pendulum settings {cfg:?}")));
    }
    let params = cfg.params();
    let spec = StateSpec::Vector(2);
    let theta0 = Uniform::new(-std::f64::consts::FRAC_PI_2, std::f64::consts::FRAC_PI_2)
        .expect("valid range");
    let v0 = Uniform::new(-1.0, 1.0).expect("valid range");
    let noise = Normal::new(0.0, cfg.sigma).expect("sigma >= 0");
    let trajs = par_map(cfg.n_traj, |i| {
        let mut r = rng::stream(seed, split.stream(), i as u64);
        let x0 = Tensor::new(vec![2], vec![r.sample(theta0), r.sample(v0)])?;
        let clean = dopri5_uniform(&params, &x0, spec, cfg.dt, cfg.steps, Dopri5Options::default())?;
        if cfg.sigma == 0.0 {
            return Ok(clean);
        }
        let mut nr = rng::stream(seed, split.stream() + 0x100, i as u64);
        let states = clean
            .into_states()
            .into_iter()
            .map(|s| {
                let data = s.data().iter().map(|v| v + noise.sample(&mut nr)).collect();
                Tensor::new(s.shape().to_vec(), data)
            })
            .collect::<Result<Vec<_>>>()?;
        Trajectory::new(spec, cfg.dt, states)
    })?;
    let meta = DatasetMeta {
        system: System::Pendulum,
        split,
        spec,
        n_traj: 0,
        n_states: 0,
        dt: cfg.dt,
        true_params: BTreeMap::from([
            ("omega0_sq".into(), params.omega0_sq),
            ("alpha".into(), cfg.alpha),
        ]),
        noise_sigma: cfg.sigma,
        seed,
        dx: None,
        bc: None,
    };
    Dataset::from_trajectories(meta, &trajs)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReacDiffConfig {
    pub n_traj: usize,
    pub grid: usize,
    pub a: f64,
    pub b: f64,
    /// `None` simulates diffusion only.
    pub k: Option<f64>,
    pub dt_sim: f64,
    pub dt_data: f64,
    pub horizon: f64,
    pub t_init: f64,
}

impl Default for ReacDiffConfig {
    fn default() -> Self {
        Self {
            n_traj: 1280,
            grid: 32,
            a: 1e-3,
            b: 5e-3,
            k: Some(5e-3),
            dt_sim: 1e-3,
            dt_data: 0.1,
            horizon: 2.5,
            t_init: -0.5,
        }
    }
}

fn ratio(num: f64, den: f64, what: &str) -> Result<usize> {
    let r = num / den;
    if !(r > 0.0) || (r - r.round()).abs() > 1e-9 * r.max(1.0) {
        return Err(Error::Invalid(format!("{what} must be a positive integer multiple ({r})")));
    }
    Ok(r.round() as usize)
}

const MAX_RESAMPLES: u64 = 16;

pub fn gen_reacdiff(cfg: &ReacDiffConfig, split: Split, seed: u64) -> Result<Dataset> {
    if cfg.grid < 3 || !(cfg.t_init <= 0.0) {
        return Err(Error::Invalid(format!("bad reaction-diffusion settings {cfg:?}")));
    }
    let keep = ratio(cfg.dt_data, cfg.dt_sim, "dt_data / dt_sim")?;
    let warmup = if cfg.t_init == 0.0 { 0 } else { ratio(-cfg.t_init, cfg.dt_data, "t_init / dt_data")? };
    let kept = ratio(cfg.horizon, cfg.dt_data, "horizon / dt_data")?;
    let grid = Grid {
        height: cfg.grid,
        width: cfg.grid,
        dx: 2.0 / (cfg.grid as f64 - 1.0),
    };
    let field = ReacDiffField {
        params: ReacDiffParams { a: cfg.a, b: cfg.b, k: cfg.k },
        grid,
    };
    let spec = StateSpec::Field { channels: 2, height: cfg.grid, width: cfg.grid };
    let unit = Uniform::new(0.0, 1.0).expect("valid range");
    let trajs = par_map(cfg.n_traj, |i| {
        for attempt in 0..MAX_RESAMPLES {
            let mut r = rng::stream(seed, split.stream(), (i as u64) << 8 | attempt);
            let x0 = Tensor::from_fn(spec.shape(), |_| r.sample(unit));
            match euler_fine(&field, &x0, spec, cfg.dt_sim, (warmup + kept) * keep, keep) {
                Ok(t) => {
                    let states = t.into_states().split_off(warmup);
                    return Trajectory::new(spec, cfg.dt_data, states);
                }
                Err(Error::NonFinite(msg)) => {
                    log::warn!("reaction-diffusion sequence {i} blew up ({msg}); resampling");
                }
                Err(e) => return Err(e),
            }
        }
        Err(Error::NonFinite(format!("sequence {i} blew up {MAX_RESAMPLES} times")))
    })?;
    let mut true_params = BTreeMap::from([("a".into(), cfg.a), ("b".into(), cfg.b)]);
    if let Some(k) = cfg.k {
        true_params.insert("k".into(), k);
    }
    let meta = DatasetMeta {
        system: System::Reacdiff,
        split,
        spec,
        n_traj: 0,
        n_states: 0,
        dt: cfg.dt_data,
        true_params,
        noise_sigma: 0.0,
        seed,
        dx: Some(grid.dx),
        bc: Some(BoundaryCondition::Periodic),
    };
    Dataset::from_trajectories(meta, &trajs)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WaveConfig {
    pub n_traj: usize,
    pub grid: usize,
    pub c: f64,
    /// `None` simulates the undamped equation.
    pub k: Option<f64>,
    pub dt: f64,
    pub n_steps: usize,
    pub sigma_range: (f64, f64),
    /// Cut each simulated sequence into consecutive windows of this many
    /// steps; `None` keeps whole sequences.
    pub window: Option<usize>,
}

impl Default for WaveConfig {
    fn default() -> Self {
        Self {
            n_traj: 200,
            grid: 64,
            c: 330.0,
            k: Some(50.0),
            dt: 1e-3,
            n_steps: 300,
            sigma_range: (10.0, 100.0),
            window: Some(25),
        }
    }
}

/// Centred Gaussian bump `exp(−r²/σ²)` on an `n × n` grid.
pub fn gaussian_bump(n: usize, sigma: f64) -> Vec<f64> {
    let c = n as f64 / 2.0;
    (0..n * n)
        .map(|idx| {
            let (y, x) = ((idx / n) as f64, (idx % n) as f64);
            (-((x - c).powi(2) + (y - c).powi(2)) / (sigma * sigma)).exp()
        })
        .collect()
}

pub fn gen_wave(cfg: &WaveConfig, split: Split, seed: u64) -> Result<Dataset> {
    let (lo, hi) = cfg.sigma_range;
    if cfg.grid < 8 || !(lo > 0.0 && hi > lo) || cfg.n_steps == 0 {
        return Err(Error::Invalid(format!("bad wave settings {cfg:?}")));
    }
    let window = cfg.window.unwrap_or(cfg.n_steps);
    if window == 0 || cfg.n_steps % window != 0 {
        return Err(Error::Invalid(format!(
            "window {window} must divide the step count {}",
            cfg.n_steps
        )));
    }
    let grid = Grid { height: cfg.grid, width: cfg.grid, dx: 1.0 };
    let field = WaveField {
        params: WaveParams { c: cfg.c, k: cfg.k },
        grid,
    };
    let spec = StateSpec::Field { channels: 2, height: cfg.grid, width: cfg.grid };
    let width = Uniform::new(lo, hi).expect("valid range");
    let seqs = par_map(cfg.n_traj, |i| {
        let mut r = rng::stream(seed, split.stream(), i as u64);
        let mut x0 = gaussian_bump(cfg.grid, r.sample(width));
        x0.resize(spec.len(), 0.0);
        let x0 = Tensor::new(spec.shape(), x0)?;
        let full = rk4_fine(&field, &x0, spec, cfg.dt, cfg.n_steps, 1)?;
        let states = full.into_states();
        (0..cfg.n_steps / window)
            .map(|w| Trajectory::new(spec, cfg.dt, states[w * window..=(w + 1) * window].to_vec()))
            .collect::<Result<Vec<_>>>()
    })?;
    let trajs: Vec<_> = seqs.into_iter().flatten().collect();
    let mut true_params = BTreeMap::from([("c".into(), cfg.c)]);
    if let Some(k) = cfg.k {
        true_params.insert("k".into(), k);
    }
    let meta = DatasetMeta {
        system: System::Wave,
        split,
        spec,
        n_traj: 0,
        n_states: 0,
        dt: cfg.dt,
        true_params,
        noise_sigma: 0.0,
        seed,
        dx: Some(1.0),
        bc: Some(BoundaryCondition::NeumannZero),
    };
    Dataset::from_trajectories(meta, &trajs)
}

/// Split sizes for one generated experiment.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub valid: usize,
    pub test: usize,
}

impl SplitSizes {
    pub fn get(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Valid => self.valid,
            Split::Test => self.test,
        }
    }
}
