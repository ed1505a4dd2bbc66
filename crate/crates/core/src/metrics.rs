//! Forecast error, parameter identification error and augmentation norm,
//! plus CSV/JSON emission and mean ± std aggregation across seeds.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datagen::{Dataset, System};
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::training::{AugmentedModel, Evaluator};

/// Base-10 log of a mean squared error; `−∞` when the error is exactly 0.
pub fn log_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::NEG_INFINITY
    } else {
        mse.log10()
    }
}

/// Mean squared error over the first `horizon` predicted steps of every
/// trajectory. `pred[i][k]` is the prediction of state `k + 1`.
pub fn mse_over_horizon(pred: &[Vec<Vec<f64>>], truth: &Dataset, horizon: usize) -> Result<f64> {
    if horizon == 0 || horizon >= truth.n_states() {
        return Err(Error::Invalid(format!(
            "horizon {horizon} outside 1..={}",
            truth.n_states() - 1
        )));
    }
    if pred.len() != truth.n_traj() {
        return Err(Error::Shape(format!("{} predictions for {} trajectories", pred.len(), truth.n_traj())));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for (i, p) in pred.iter().enumerate() {
        if p.len() < horizon {
            return Err(Error::Shape(format!("trajectory {i} has {} predicted steps", p.len())));
        }
        for k in 0..horizon {
            for (a, b) in p[k].iter().zip(truth.state(i, k + 1)) {
                sum += (a - b) * (a - b);
            }
            count += p[k].len();
        }
    }
    Ok(sum / count as f64)
}

/// Per-parameter `100·|est − true|/|true|` and their mean.
pub fn param_error_pct(
    estimated: &BTreeMap<String, f64>,
    truth: &BTreeMap<String, f64>,
) -> Result<(BTreeMap<String, f64>, f64)> {
    if estimated.is_empty() {
        return Err(Error::Invalid("no parameters to compare".into()));
    }
    let mut per = BTreeMap::new();
    for (name, &est) in estimated {
        let &t = truth
            .get(name)
            .ok_or_else(|| Error::Invalid(format!("no true value for `{name}`")))?;
        if t == 0.0 {
            return Err(Error::Invalid(format!("true value of `{name}` is zero")));
        }
        per.insert(name.clone(), 100.0 * (est - t).abs() / t.abs());
    }
    let avg = per.values().sum::<f64>() / per.len() as f64;
    Ok((per, avg))
}

/// Parameters in reporting units: the pendulum is reported through its
/// period `T0 = 2π/ω0` instead of `ω0²`.
pub fn reported_params(system: System, params: &BTreeMap<String, f64>) -> BTreeMap<String, f64> {
    let mut out = params.clone();
    if system == System::Pendulum {
        if let Some(w2) = out.remove("omega0_sq") {
            out.insert("t0".into(), 2.0 * std::f64::consts::PI / w2.sqrt());
        }
    }
    out
}

mod float_or_sentinel {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_str(&super::fmt_f64(*v))
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Num(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(v),
            Raw::Text(t) => super::parse_f64(&t).ok_or_else(|| serde::de::Error::custom(format!("bad number `{t}`"))),
        }
    }
}

fn fmt_f64(v: f64) -> String {
    if v == f64::NEG_INFINITY {
        "-inf".into()
    } else if v == f64::INFINITY {
        "inf".into()
    } else if v.is_nan() {
        "nan".into()
    } else {
        format!("{v}")
    }
}

fn parse_f64(s: &str) -> Option<f64> {
    match s {
        "-inf" => Some(f64::NEG_INFINITY),
        "inf" => Some(f64::INFINITY),
        "nan" => Some(f64::NAN),
        _ => s.parse().ok(),
    }
}

/// Outcome of evaluating one trained model on a test set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub horizon: usize,
    #[serde(with = "float_or_sentinel")]
    pub log_mse: f64,
    /// Parameters in reporting units (see [`reported_params`]).
    pub estimated_params: BTreeMap<String, f64>,
    pub param_error_pct: BTreeMap<String, f64>,
    pub avg_param_error_pct: Option<f64>,
    /// Reported as 0 with `fa_applicable = false` when there is no augmentation.
    pub fa_norm_sq: f64,
    pub fa_applicable: bool,
    /// Test trajectories whose rollout blew up and were left out.
    pub blown_up: usize,
    pub n_traj: usize,
}

/// Rolls out every test trajectory from its first state and scores it.
/// `fa_states` supplies the states for `‖Fa‖²` (normally the training set).
pub fn evaluate<T: Real>(
    model: &AugmentedModel<T>,
    test: &Dataset,
    fa_states: Option<&Dataset>,
    horizon: usize,
    chunk: usize,
) -> Result<Evaluation> {
    let mut eval = Evaluator::new(&model.spec, chunk);
    let preds = eval.rollout(&model.params, test, horizon)?;
    let blown_up = preds.iter().filter(|p| p.is_none()).count();
    let kept: Vec<usize> = (0..preds.len()).filter(|&i| preds[i].is_some()).collect();
    let log = if kept.is_empty() {
        f64::INFINITY
    } else {
        let p: Vec<Vec<Vec<f64>>> = preds.into_iter().flatten().collect();
        log_mse(mse_over_horizon(&p, &test.select(&kept)?, horizon)?)
    };
    let system = test.meta().system;
    let est = model.physical_values()?;
    let learned = model.spec.physics.as_ref().is_some_and(|p| p.is_learned());
    let (per, avg) = if learned && !est.is_empty() {
        let truth = reported_params(system, &test.meta().true_params);
        let (per, avg) = param_error_pct(&reported_params(system, &est), &truth)?;
        (per, Some(avg))
    } else {
        (BTreeMap::new(), None)
    };
    let fa_norm_sq = match fa_states {
        Some(ds) => eval.fa_norm_sq(&model.params, ds)?,
        None => None,
    };
    let fa_applicable = model.spec.augmentation.is_some();
    if blown_up > 0 {
        log::warn!("{blown_up} of {} test rollouts blew up", test.n_traj());
    }
    Ok(Evaluation {
        horizon,
        log_mse: log,
        estimated_params: if learned { reported_params(system, &est) } else { BTreeMap::new() },
        param_error_pct: per,
        avg_param_error_pct: avg,
        fa_norm_sq: fa_norm_sq.unwrap_or(0.0),
        fa_applicable,
        blown_up,
        n_traj: test.n_traj(),
    })
}

/// One row of the results table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub run_id: String,
    pub system: System,
    pub method: String,
    pub mode: String,
    pub seed: u64,
    #[serde(flatten)]
    pub eval: Evaluation,
}

const CSV_HEADER: &str = "run_id,system,method,mode,seed,horizon,log_mse,avg_param_error_pct,fa_norm_sq,blown_up,n_traj,estimated_params,param_error_pct";

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), fmt_f64)
}

fn kv(m: &BTreeMap<String, f64>) -> String {
    m.iter().map(|(k, v)| format!("{k}={}", fmt_f64(*v))).collect::<Vec<_>>().join(";")
}

pub fn to_csv(records: &[MetricsRecord]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in records {
        let e = &r.eval;
        let cells = [
            csv_field(&r.run_id),
            r.system.name().into(),
            csv_field(&r.method),
            r.mode.clone(),
            r.seed.to_string(),
            e.horizon.to_string(),
            fmt_f64(e.log_mse),
            opt(e.avg_param_error_pct),
            opt(e.fa_applicable.then_some(e.fa_norm_sq)),
            e.blown_up.to_string(),
            e.n_traj.to_string(),
            csv_field(&kv(&e.estimated_params)),
            csv_field(&kv(&e.param_error_pct)),
        ];
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

/// `metrics.csv` and `metrics.json` in `dir`.
pub fn write_metrics(dir: &Path, records: &[MetricsRecord]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let csv = dir.join("metrics.csv");
    fs::write(&csv, to_csv(records)).map_err(|e| Error::io(&csv, e))?;
    let json = dir.join("metrics.json");
    let text = serde_json::to_string_pretty(records).map_err(|e| Error::json(&json, e))?;
    fs::write(&json, text + "\n").map_err(|e| Error::io(&json, e))
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

/// Sample mean and standard deviation (`None` std for a single value).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    #[serde(with = "float_or_sentinel")]
    pub mean: f64,
    pub std: Option<f64>,
    pub n: usize,
}

impl Stat {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = (n > 1).then(|| {
            if mean.is_finite() {
                (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
            } else {
                0.0
            }
        });
        Some(Self { mean, std, n })
    }

    fn cell(s: Option<Self>, precision: usize) -> String {
        match s {
            None => "n/a".into(),
            Some(s) if !s.mean.is_finite() => fmt_f64(s.mean),
            Some(Stat { mean, std: None, .. }) => format!("{mean:.precision$}"),
            Some(Stat { mean, std: Some(sd), .. }) => format!("{mean:.precision$} ± {sd:.precision$}"),
        }
    }
}

/// Table-1 style row: one method, aggregated over seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub system: System,
    pub method: String,
    pub mode: String,
    pub seeds: Vec<u64>,
    pub log_mse: Option<Stat>,
    pub param_error_pct: Option<Stat>,
    pub fa_norm_sq: Option<Stat>,
}

pub fn aggregate(records: &[MetricsRecord]) -> Vec<SummaryRow> {
    let mut groups: BTreeMap<(System, String, String), Vec<&MetricsRecord>> = BTreeMap::new();
    for r in records {
        groups.entry((r.system, r.method.clone(), r.mode.clone())).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|((system, method, mode), rs)| {
            let mut seeds: Vec<u64> = rs.iter().map(|r| r.seed).collect();
            seeds.sort_unstable();
            let pick = |f: &dyn Fn(&MetricsRecord) -> Option<f64>| {
                let v: Vec<f64> = rs.iter().filter_map(|r| f(r)).collect();
                Stat::of(&v)
            };
            SummaryRow {
                system,
                method,
                mode,
                seeds,
                log_mse: pick(&|r| Some(r.eval.log_mse)),
                param_error_pct: pick(&|r| r.eval.avg_param_error_pct),
                fa_norm_sq: pick(&|r| r.eval.fa_applicable.then_some(r.eval.fa_norm_sq)),
            }
        })
        .collect()
}

/// Plain-text table, one section per system.
pub fn render_table(rows: &[SummaryRow]) -> String {
    let mut out = String::new();
    let mut current = None;
    let width = rows.iter().map(|r| r.method.chars().count()).max().unwrap_or(6).max(6);
    for r in rows {
        if current != Some(r.system) {
            if current.is_some() {
                out.push('\n');
            }
            current = Some(r.system);
            let _ = writeln!(out, "== {} ==", r.system.name());
            let _ = writeln!(
                out,
                "{:<width$}  {:<22}  {:>18}  {:>18}  {:>20}",
                "method", "mode", "log MSE", "%Err param", "|Fa|^2"
            );
        }
        let _ = writeln!(
            out,
            "{:<width$}  {:<22}  {:>18}  {:>18}  {:>20}",
            r.method,
            r.mode,
            Stat::cell(r.log_mse, 2),
            Stat::cell(r.param_error_pct, 2),
            Stat::cell(r.fa_norm_sq, 3),
        );
    }
    out
}

pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut out = String::from("system,method,mode,seeds,log_mse_mean,log_mse_std,param_error_pct_mean,param_error_pct_std,fa_norm_sq_mean,fa_norm_sq_std\n");
    for r in rows {
        let parts = |s: Option<Stat>| match s {
            None => ("n/a".to_string(), "n/a".to_string()),
            Some(s) => (fmt_f64(s.mean), opt(s.std)),
        };
        let (lm, ls) = parts(r.log_mse);
        let (pm, ps) = parts(r.param_error_pct);
        let (fm, fs) = parts(r.fa_norm_sq);
        let seeds = r.seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(";");
        let _ = writeln!(
            out,
            "{},{},{},{seeds},{lm},{ls},{pm},{ps},{fm},{fs}",
            r.system.name(),
            csv_field(&r.method),
            r.mode
        );
    }
    out
}
