//! Declarative experiments: one JSON document names the system, the physical
//! prior, the augmentation and the optimizer settings, and the functions here
//! turn it into datasets, checkpoints, reports and metrics on disk.
//!
//! Layout of an experiment directory:
//!
//! ```text
//! data/{train,valid,test}/         datasets
//! runs/seed-<s>/checkpoint/        trained parameters
//! runs/seed-<s>/report.jsonl       one line per epoch
//! runs/seed-<s>/summary.json
//! runs/seed-<s>/run.json           identity of the run
//! runs/seed-<s>/metrics.{csv,json}
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::{AugmentModel, ConvNetSpec, MlpSpec};
use crate::datagen::{
    gen_pendulum, gen_reacdiff, gen_wave, Dataset, DatasetMeta, PendulumConfig, ReacDiffConfig, Split,
    SplitSizes, System, WaveConfig,
};
use crate::diffcore::Padding;
use crate::error::{Error, Result};
use crate::integrators::StateSpec;
use crate::metrics::{evaluate, write_metrics, MetricsRecord};
use crate::physics::{BoundaryCondition, Family, PhysicalModel};
use crate::training::{AugmentedModel, ModelSpec, TrainConfig, TrainReport};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhysicsLevel {
    None,
    /// Pendulum without friction, diffusion without reaction, wave without damping.
    Incomplete,
    Complete,
    /// The generating equation with its true coefficients, nothing learned.
    True,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentKind {
    None,
    Mlp,
    Convnet,
}

/// Dataset recipe. Only the section matching the system is used.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub seed: u64,
    pub pendulum: Option<PendulumConfig>,
    pub reacdiff: Option<ReacDiffConfig>,
    pub wave: Option<WaveConfig>,
    /// Per-split trajectory counts; overrides the recipe's `n_traj`.
    pub splits: Option<SplitSizes>,
}

/// Sections replaced wholesale when the desk-scale variant is requested.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Overrides {
    pub data: Option<DataConfig>,
    pub train: Option<TrainConfig>,
    pub seeds: Option<Vec<u64>>,
    pub mlp: Option<MlpSpec>,
    pub hidden_channels: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub system: System,
    pub physics: PhysicsLevel,
    pub augmentation: AugmentKind,
    #[serde(default)]
    pub train: TrainConfig,
    /// Starting values for learned physical parameters, by name.
    #[serde(default)]
    pub guesses: BTreeMap<String, f64>,
    #[serde(default)]
    pub data: DataConfig,
    /// Forecast horizon in steps; defaults to the whole test trajectory.
    #[serde(default)]
    pub horizon: Option<usize>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub mlp: Option<MlpSpec>,
    #[serde(default)]
    pub hidden_channels: Option<usize>,
    #[serde(default)]
    pub downscale: Option<Overrides>,
    /// Trajectories per forward pass during evaluation.
    #[serde(default = "default_chunk")]
    pub eval_chunk: usize,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_chunk() -> usize {
    64
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        match (self.system, self.augmentation) {
            (_, AugmentKind::None) => {}
            (System::Pendulum, AugmentKind::Mlp) => {}
            (System::Reacdiff | System::Wave, AugmentKind::Convnet) => {}
            (s, a) => {
                return Err(Error::Config(format!("{a:?} augmentation does not fit the {} system", s.name())));
            }
        }
        if self.physics == PhysicsLevel::None && self.augmentation == AugmentKind::None {
            return Err(Error::Config("neither a physical model nor an augmentation is enabled".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("empty seed list".into()));
        }
        if self.eval_chunk == 0 {
            return Err(Error::Config("eval_chunk must be positive".into()));
        }
        if self.horizon == Some(0) {
            return Err(Error::Config("horizon must be positive".into()));
        }
        self.train.validate()
    }

    /// The desk-scale variant: override sections replace their full-size
    /// counterparts.
    pub fn downscaled(&self) -> Result<Self> {
        let o = self
            .downscale
            .as_ref()
            .ok_or_else(|| Error::Config(format!("`{}` has no downscale section", self.name)))?;
        let mut out = self.clone();
        if let Some(d) = &o.data {
            out.data = d.clone();
        }
        if let Some(t) = &o.train {
            out.train = t.clone();
        }
        if let Some(s) = &o.seeds {
            out.seeds = s.clone();
        }
        if o.mlp.is_some() {
            out.mlp = o.mlp;
        }
        if o.hidden_channels.is_some() {
            out.hidden_channels = o.hidden_channels;
        }
        out.downscale = None;
        out.validate()?;
        Ok(out)
    }

    /// Row label in result tables.
    pub fn method(&self) -> String {
        let phys = match (self.system, self.physics) {
            (_, PhysicsLevel::None) => None,
            (System::Pendulum, PhysicsLevel::Incomplete) => Some("Param ODE (w0)"),
            (System::Pendulum, PhysicsLevel::Complete) => Some("Param ODE (w0, alpha)"),
            (System::Pendulum, PhysicsLevel::True) => Some("True ODE"),
            (System::Reacdiff, PhysicsLevel::Incomplete) => Some("Param PDE (a, b)"),
            (System::Reacdiff, PhysicsLevel::Complete) => Some("Param PDE (a, b, k)"),
            (System::Wave, PhysicsLevel::Incomplete) => Some("Param PDE (c)"),
            (System::Wave, PhysicsLevel::Complete) => Some("Param PDE (c, k)"),
            (_, PhysicsLevel::True) => Some("True PDE"),
        };
        match (phys, self.augmentation) {
            (None, _) => "Neural ODE".into(),
            (Some(p), AugmentKind::None) => p.into(),
            (Some(p), _) => format!("{p} + Fa"),
        }
    }

    fn family(&self) -> Option<Family> {
        match (self.system, self.physics) {
            (_, PhysicsLevel::None) => None,
            (System::Pendulum, PhysicsLevel::Incomplete) => Some(Family::PendulumFrictionless),
            (System::Pendulum, _) => Some(Family::PendulumDamped),
            (System::Reacdiff, PhysicsLevel::Incomplete) => Some(Family::ReacDiffDiffusion),
            (System::Reacdiff, _) => Some(Family::ReacDiffFull),
            (System::Wave, PhysicsLevel::Incomplete) => Some(Family::WaveUndamped),
            (System::Wave, _) => Some(Family::WaveDamped),
        }
    }

    /// Model architecture for data described by `meta`.
    pub fn model_spec(&self, meta: &DatasetMeta) -> Result<ModelSpec> {
        if meta.system != self.system {
            return Err(Error::Config(format!(
                "data are {} but the experiment is {}",
                meta.system.name(),
                self.system.name()
            )));
        }
        let dx = meta.dx.unwrap_or(1.0);
        let physics = match self.family() {
            None => None,
            Some(f) if self.physics == PhysicsLevel::True => {
                let values = f
                    .params()
                    .iter()
                    .map(|(name, _)| {
                        meta.true_params
                            .get(*name)
                            .copied()
                            .ok_or_else(|| Error::Config(format!("data carry no true value for `{name}`")))
                    })
                    .collect::<Result<Vec<_>>>()?;
                Some(PhysicalModel::fixed(f, dx, values)?)
            }
            Some(f) => Some(PhysicalModel::learned(f, dx)),
        };
        let augmentation = match self.augmentation {
            AugmentKind::None => None,
            AugmentKind::Mlp => Some(AugmentModel::Mlp(self.mlp.unwrap_or_default())),
            AugmentKind::Convnet => {
                let padding = match meta.bc {
                    Some(BoundaryCondition::Periodic) => Padding::Circular,
                    _ => Padding::Zero,
                };
                let mut c = ConvNetSpec::new(padding);
                if let Some(h) = self.hidden_channels {
                    c.hidden_channels = h;
                }
                Some(AugmentModel::ConvNet(c))
            }
        };
        let spec = ModelSpec { physics, augmentation };
        check_compat(&spec, meta.spec)?;
        Ok(spec)
    }
}

/// Rejects models whose input layout differs from the data's state layout.
pub fn check_compat(spec: &ModelSpec, state: StateSpec) -> Result<()> {
    let fits = |ok: bool, what: &str| {
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("{what} does not accept states of shape {:?}", state.shape())))
        }
    };
    if let Some(p) = &spec.physics {
        let vector = matches!(p.family, Family::PendulumFrictionless | Family::PendulumDamped);
        let ok = match state {
            StateSpec::Vector(n) => vector && n == 2,
            StateSpec::Field { channels, .. } => !vector && channels == 2,
        };
        fits(ok, &format!("{:?}", p.family))?;
    }
    match (&spec.augmentation, state) {
        (None, _) => Ok(()),
        (Some(AugmentModel::Mlp(m)), StateSpec::Vector(n)) => fits(m.input == n && m.output == n, "MLP"),
        (Some(AugmentModel::ConvNet(c)), StateSpec::Field { channels, .. }) => fits(c.channels == channels, "ConvNet"),
        (Some(_), _) => fits(false, "augmentation"),
    }
}

pub fn data_dir(root: &Path, split: Split) -> PathBuf {
    root.join(split.name())
}

/// Simulates and writes train, valid and test datasets under `out`.
pub fn generate(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    for split in Split::ALL {
        let n = cfg.data.splits.map(|s| s.get(split));
        let seed = cfg.data.seed;
        let ds = match cfg.system {
            System::Pendulum => {
                let mut c = cfg.data.pendulum.unwrap_or_default();
                c.n_traj = n.unwrap_or(c.n_traj);
                gen_pendulum(&c, split, seed)?
            }
            System::Reacdiff => {
                let mut c = cfg.data.reacdiff.unwrap_or_default();
                c.n_traj = n.unwrap_or(c.n_traj);
                gen_reacdiff(&c, split, seed)?
            }
            System::Wave => {
                let mut c = cfg.data.wave.unwrap_or_default();
                c.n_traj = n.unwrap_or(c.n_traj);
                gen_wave(&c, split, seed)?
            }
        };
        log::info!("{} {}: {} trajectories", cfg.system.name(), split.name(), ds.n_traj());
        ds.save(&data_dir(out, split))?;
    }
    Ok(())
}

/// Identity of one trained run, stored next to its checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunInfo {
    pub name: String,
    pub system: System,
    pub method: String,
    pub mode: String,
    pub seed: u64,
}

pub fn run_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed-{seed}"))
}

/// Outcome of [`train`]. `report` is `None` when nothing was learnable.
pub struct TrainedRun {
    pub info: RunInfo,
    pub model: AugmentedModel<f64>,
    pub report: Option<TrainReport>,
}

/// Trains one seed on `data/{train,valid}` and writes checkpoint, report and
/// run identity into `out`. A diverged run still writes everything; the
/// caller inspects `report`.
pub fn train(cfg: &ExperimentConfig, data: &Path, out: &Path, seed: u64) -> Result<TrainedRun> {
    let train_ds = Dataset::load(&data_dir(data, Split::Train))?;
    let valid_path = data_dir(data, Split::Valid);
    let valid = if valid_path.exists() { Some(Dataset::load(&valid_path)?) } else { None };
    let spec = cfg.model_spec(train_ds.meta())?;
    let mut model = AugmentedModel::<f64>::new(spec, &cfg.guesses, seed)?;
    let mut tc = cfg.train.clone();
    tc.seed = seed;
    let report = if model.params.is_empty() {
        log::info!("nothing to learn; checkpoint holds the fixed model");
        None
    } else {
        Some(model.fit(&train_ds, valid.as_ref(), &tc)?)
    };
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    model.save(&out.join("checkpoint"))?;
    if let Some(r) = &report {
        r.write(out)?;
    }
    let info = RunInfo {
        name: cfg.name.clone(),
        system: cfg.system,
        method: cfg.method(),
        mode: tc.mode.name().into(),
        seed,
    };
    write_json(&out.join("run.json"), &info)?;
    Ok(TrainedRun { info, model, report })
}

/// Scores the checkpoint in `run` on `data/test` and writes the metrics files.
pub fn evaluate_run(run: &Path, data: &Path, horizon: Option<usize>, chunk: usize) -> Result<MetricsRecord> {
    let info: RunInfo = read_json(&run.join("run.json"))?;
    let model = AugmentedModel::<f64>::load(&run.join("checkpoint"))?;
    let test = Dataset::load(&data_dir(data, Split::Test))?;
    if test.meta().system != info.system {
        return Err(Error::Config(format!(
            "checkpoint is for {} but the test data are {}",
            info.system.name(),
            test.meta().system.name()
        )));
    }
    check_compat(&model.spec, test.spec())?;
    let train_path = data_dir(data, Split::Train);
    let train_ds = if train_path.exists() { Some(Dataset::load(&train_path)?) } else { None };
    let horizon = horizon.unwrap_or(test.n_states() - 1);
    let eval = evaluate(&model, &test, train_ds.as_ref(), horizon, chunk)?;
    let record = MetricsRecord {
        run_id: format!("{}/seed-{}", info.name, info.seed),
        system: info.system,
        method: info.method,
        mode: info.mode,
        seed: info.seed,
        eval,
    };
    write_metrics(run, std::slice::from_ref(&record))?;
    Ok(record)
}

/// Runs `f` over `items` on up to `parallel` threads, keeping input order.
pub fn fan_out<I: Sync, O: Send>(items: &[I], parallel: usize, f: impl Fn(&I) -> O + Sync) -> Vec<O> {
    let parallel = parallel.clamp(1, items.len().max(1));
    if parallel == 1 {
        return items.iter().map(&f).collect();
    }
    let f = &f;
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..parallel)
            .map(|t| s.spawn(move || items.iter().skip(t).step_by(parallel).map(f).collect::<Vec<_>>()))
            .collect();
        let mut per: Vec<std::vec::IntoIter<O>> =
            handles.into_iter().map(|h| h.join().expect("worker panicked").into_iter()).collect();
        (0..items.len()).map(|i| per[i % parallel].next().expect("one result per item")).collect()
    })
}

/// Gathers every `metrics.json` below `root`, sorted by run id.
pub fn collect_metrics(root: &Path) -> Result<Vec<MetricsRecord>> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        let entries = fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?;
        for entry in entries {
            let path = entry.map_err(|e| Error::io(&dir, e))?.path();
            if path.is_dir() {
                stack.push(path);
            } else if path.file_name().is_some_and(|n| n == "metrics.json") {
                out.extend(crate::metrics::read_metrics(&path)?);
            }
        }
    }
    out.sort_by(|a, b| (&a.run_id, &a.mode).cmp(&(&b.run_id, &b.mode)));
    Ok(out)
}

pub(crate) fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<D: serde::de::DeserializeOwned>(path: &Path) -> Result<D> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::Mode;

    fn pendulum(physics: PhysicsLevel, augmentation: AugmentKind) -> ExperimentConfig {
        serde_json::from_value(serde_json::json!({
            "name": "t",
            "system": "pendulum",
            "physics": physics,
            "augmentation": augmentation,
        }))
        .unwrap()
    }

    #[test]
    fn compatibility_rules() {
        assert!(pendulum(PhysicsLevel::None, AugmentKind::None).validate().is_err());
        assert!(pendulum(PhysicsLevel::Complete, AugmentKind::Convnet).validate().is_err());
        assert!(pendulum(PhysicsLevel::Complete, AugmentKind::Mlp).validate().is_ok());
        let mut c = pendulum(PhysicsLevel::True, AugmentKind::None);
        c.system = System::Wave;
        assert!(c.validate().is_ok());
        c.augmentation = AugmentKind::Mlp;
        assert!(c.validate().is_err());
    }

    #[test]
    fn unknown_fields_rejected() {
        let r: std::result::Result<ExperimentConfig, _> = serde_json::from_str(
            r#"{"name":"x","system":"pendulum","physics":"none","augmentation":"mlp","bogus":1}"#,
        );
        assert!(r.is_err());
    }

    #[test]
    fn labels() {
        assert_eq!(pendulum(PhysicsLevel::Incomplete, AugmentKind::Mlp).method(), "Param ODE (w0) + Fa");
        assert_eq!(pendulum(PhysicsLevel::None, AugmentKind::Mlp).method(), "Neural ODE");
        assert_eq!(pendulum(PhysicsLevel::True, AugmentKind::None).method(), "True ODE");
    }

    #[test]
    fn downscale_replaces_sections() {
        let mut c = pendulum(PhysicsLevel::Complete, AugmentKind::Mlp);
        assert!(c.downscaled().is_err());
        c.downscale = Some(Overrides {
            train: Some(TrainConfig { mode: Mode::Vanilla, ..Default::default() }),
            seeds: Some(vec![4, 5]),
            ..Default::default()
        });
        let d = c.downscaled().unwrap();
        assert_eq!(d.train.mode, Mode::Vanilla);
        assert_eq!(d.seeds, vec![4, 5]);
        assert_eq!(d.data, c.data);
    }

    #[test]
    fn fan_out_keeps_order() {
        let items: Vec<u32> = (0..11).collect();
        for p in [1, 2, 3, 20] {
            assert_eq!(fan_out(&items, p, |x| x * 2), items.iter().map(|x| x * 2).collect::<Vec<_>>());
        }
    }

    #[test]
    fn true_model_pipeline_on_tiny_pendulum() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = pendulum(PhysicsLevel::True, AugmentKind::None);
        cfg.data.pendulum = Some(PendulumConfig { n_traj: 3, steps: 10, sigma: 0.0, ..Default::default() });
        let data = dir.path().join("data");
        generate(&cfg, &data).unwrap();
        let run = run_dir(&dir.path().join("runs"), 0);
        let trained = train(&cfg, &data, &run, 0).unwrap();
        assert!(trained.report.is_none());
        let rec = evaluate_run(&run, &data, None, 8).unwrap();
        assert_eq!(rec.eval.horizon, 10);
        assert!(!rec.eval.fa_applicable && rec.eval.avg_param_error_pct.is_none());
        // dopri5 data against an RK4 rollout at dt = 0.5: about -8.8 when run
        assert!(rec.eval.log_mse < -8.0, "{}", rec.eval.log_mse);
        assert_eq!(collect_metrics(dir.path()).unwrap(), vec![rec]);
    }

    #[test]
    fn model_spec_rejects_foreign_data() {
        let cfg = pendulum(PhysicsLevel::Complete, AugmentKind::Mlp);
        let ds = gen_pendulum(&PendulumConfig { n_traj: 1, steps: 2, ..Default::default() }, Split::Test, 0).unwrap();
        assert!(cfg.model_spec(ds.meta()).is_ok());
        let mut wave = cfg.clone();
        wave.system = System::Wave;
        wave.augmentation = AugmentKind::Convnet;
        assert!(wave.model_spec(ds.meta()).is_err());
    }
}
