//! λ grid search and single-axis ablations over a [`SyntheticTaskSet`].

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::analysis::{interference_norm_direct, pairwise_cosine_stats};
use crate::error::{Error, Result};
use crate::schema::{select_targets, SelectorMode, TargetSelector};
use crate::superposition::{ModelInput, StoreConfig, SuperpositionStore};
use crate::tensor::TensorMap;
use crate::transforms::TransformMode;

use super::{ArchConfig, Split, SyntheticTaskSet, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Lambda,
    Mode,
    /// Context matrix kind: `none`, `rbd` (±1 diagonal) or `rd` (normal diagonal).
    Context,
    SkipRate,
    Selector,
}

impl SweepAxis {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepAxis::Lambda => "lambda",
            SweepAxis::Mode => "mode",
            SweepAxis::Context => "context",
            SweepAxis::SkipRate => "skip_rate",
            SweepAxis::Selector => "selector",
        }
    }
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lambda" => Ok(SweepAxis::Lambda),
            "mode" => Ok(SweepAxis::Mode),
            "context" => Ok(SweepAxis::Context),
            "skip_rate" | "skip-rate" => Ok(SweepAxis::SkipRate),
            "selector" => Ok(SweepAxis::Selector),
            _ => Err(Error::Config(format!("unknown sweep axis `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub task_id: String,
    pub val_metric: f64,
    pub test_metric: f64,
    pub interference_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub setting: String,
    pub mode: TransformMode,
    pub lambda: f64,
    pub per_task: Vec<TaskMetrics>,
    pub avg_val_metric: f64,
    /// Mean test-split metric.
    pub avg_metric: f64,
    /// Mean |cos| over pairs of transformed deltas `O_j Δ_j`.
    pub mean_abs_cosine: f64,
    /// Mean over tasks of the retrieval-time interference norm.
    pub interference_norm: f64,
    pub median_interference_norm: f64,
    pub selected_layers: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub axis: SweepAxis,
    pub points: Vec<SweepPoint>,
    /// Setting with the best validation metric; ties go to the earliest point.
    pub argbest: String,
}

impl SweepResult {
    fn new(axis: SweepAxis, points: Vec<SweepPoint>) -> Result<Self> {
        let mut best: Option<&SweepPoint> = None;
        for p in &points {
            if best.is_none_or(|b| p.avg_val_metric > b.avg_val_metric) {
                best = Some(p);
            }
        }
        let argbest = best
            .ok_or_else(|| Error::Config("sweep has no settings".into()))?
            .setting
            .clone();
        Ok(Self { axis, points, argbest })
    }

    pub fn best(&self) -> &SweepPoint {
        self.point(&self.argbest).expect("argbest names a point")
    }

    pub fn point(&self, setting: &str) -> Option<&SweepPoint> {
        self.points.iter().find(|p| p.setting == setting)
    }

    pub const CSV_HEADER: &'static str =
        "axis,setting,mode,lambda,task_id,val_metric,test_metric,interference_norm,mean_abs_cosine,selected_layers";

    /// One row per setting per task, then an `avg` row per setting.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let axis = self.axis.as_str();
        writeln!(out, "{}", Self::CSV_HEADER).expect("writing to a String");
        for p in &self.points {
            for t in &p.per_task {
                writeln!(
                    out,
                    "{axis},{},{},{},{},{},{},{},{},{}",
                    p.setting,
                    p.mode,
                    p.lambda,
                    t.task_id,
                    t.val_metric,
                    t.test_metric,
                    t.interference_norm,
                    p.mean_abs_cosine,
                    p.selected_layers
                )
                .expect("writing to a String");
            }
            writeln!(
                out,
                "{axis},{},{},{},avg,{},{},{},{},{}",
                p.setting,
                p.mode,
                p.lambda,
                p.avg_val_metric,
                p.avg_metric,
                p.interference_norm,
                p.mean_abs_cosine,
                p.selected_layers
            )
            .expect("writing to a String");
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }
}

/// `0.1, 0.2, …, 1.0`.
pub fn default_lambda_grid() -> Vec<f64> {
    (1..=10).map(|i| f64::from(i) / 10.0).collect()
}

/// Parses `"start:stop:step"` into an inclusive grid.
pub fn parse_grid(spec: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = spec.split(':').collect();
    let [start, stop, step] = parts.as_slice() else {
        return Err(Error::Config(format!("grid `{spec}` is not start:stop:step")));
    };
    let num = |s: &str| {
        s.trim()
            .parse::<f64>()
            .map_err(|e| Error::Config(format!("grid `{spec}`: bad number `{s}`: {e}")))
    };
    let (start, stop, step) = (num(start)?, num(stop)?, num(step)?);
    if !(step > 0.0 && stop >= start && start.is_finite() && stop.is_finite()) {
        return Err(Error::Config(format!("grid `{spec}` is empty or unbounded")));
    }
    let n = ((stop - start) / step + 1e-9).floor() as usize + 1;
    let grid: Vec<f64> = (0..n)
        .map(|i| ((start + i as f64 * step) * 1e9).round() / 1e9)
        .collect();
    validate_grid(&grid)?;
    Ok(grid)
}

fn validate_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::Config("λ grid is empty".into()));
    }
    if grid.iter().any(|&l| !(l.is_finite() && l > 0.0)) {
        return Err(Error::Config("λ grid values must be positive".into()));
    }
    if grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Config("λ grid must be strictly increasing".into()));
    }
    Ok(())
}

/// Compresses all tasks under `config`, retrieves each and evaluates it.
fn run_point(ts: &SyntheticTaskSet, deltas: &[TensorMap], config: &StoreConfig, setting: String) -> Result<SweepPoint> {
    let ids = ts.task_ids();
    let inputs = ids
        .iter()
        .zip(&ts.finetuned)
        .map(|(id, m)| ModelInput::full(id.clone(), m.clone()));
    let store = SuperpositionStore::compress(ts.base.clone(), inputs, config.clone())?;
    let transforms = ids
        .iter()
        .map(|id| store.transform_for(id))
        .collect::<Result<Vec<_>>>()?;
    let lambda = f64::from(config.lambda);

    let mut per_task = Vec::with_capacity(ids.len());
    for (i, id) in ids.iter().enumerate() {
        let model = store.retrieve(id)?;
        per_task.push(TaskMetrics {
            task_id: id.clone(),
            val_metric: ts.evaluate(&model, i, Split::Validation)?,
            test_metric: ts.evaluate(&model, i, Split::Test)?,
            interference_norm: interference_norm_direct(deltas, &transforms, i, lambda)?,
        });
    }
    let mean_abs_cosine = if deltas.len() >= 2 {
        pairwise_cosine_stats(deltas, Some(&transforms))?.summary.mean_abs
    } else {
        0.0
    };
    let n = per_task.len() as f64;
    let mut norms: Vec<f64> = per_task.iter().map(|t| t.interference_norm).collect();
    norms.sort_by(f64::total_cmp);
    let median = if norms.len() % 2 == 1 {
        norms[norms.len() / 2]
    } else {
        (norms[norms.len() / 2 - 1] + norms[norms.len() / 2]) / 2.0
    };
    Ok(SweepPoint {
        setting,
        mode: config.mode,
        lambda,
        avg_val_metric: per_task.iter().map(|t| t.val_metric).sum::<f64>() / n,
        avg_metric: per_task.iter().map(|t| t.test_metric).sum::<f64>() / n,
        interference_norm: norms.iter().sum::<f64>() / n,
        median_interference_norm: median,
        mean_abs_cosine,
        selected_layers: select_targets(store.schema(), &config.selector)?.len(),
        per_task,
    })
}

/// One compress/retrieve/evaluate pass per λ; `config.lambda` is ignored.
pub fn grid_search_lambda(ts: &SyntheticTaskSet, config: &StoreConfig, grid: &[f64]) -> Result<SweepResult> {
    validate_grid(grid)?;
    let deltas = ts.deltas()?;
    let points = grid
        .iter()
        .map(|&l| {
            let cfg = config.clone().lambda(l as f32);
            run_point(ts, &deltas, &cfg, (l as f32).to_string())
        })
        .collect::<Result<Vec<_>>>()?;
    SweepResult::new(SweepAxis::Lambda, points)
}

fn context_mode(s: &str) -> Result<TransformMode> {
    match s {
        "none" | "identity" => Ok(TransformMode::Identity),
        "rbd" | "rsf" => Ok(TransformMode::Rsf),
        "rd" => Ok(TransformMode::Rd),
        _ => Err(Error::Config(format!("unknown context setting `{s}`"))),
    }
}

/// Varies one axis of `base` at a fixed λ. With `lambda = None` the λ is the
/// argbest of an srsf grid search over the default grid.
pub fn run_ablation(
    ts: &SyntheticTaskSet,
    axis: SweepAxis,
    settings: &[String],
    base: &StoreConfig,
    lambda: Option<f32>,
) -> Result<SweepResult> {
    if axis == SweepAxis::Lambda {
        let grid = settings
            .iter()
            .map(|s| s.parse::<f64>().map_err(|e| Error::Config(format!("bad λ `{s}`: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        return grid_search_lambda(ts, base, &grid);
    }
    if settings.is_empty() {
        return Err(Error::Config("ablation has no settings".into()));
    }
    let lambda = match lambda {
        Some(l) => l,
        None => {
            let srsf = StoreConfig {
                mode: TransformMode::Srsf,
                ..base.clone()
            };
            grid_search_lambda(ts, &srsf, &default_lambda_grid())?.best().lambda as f32
        }
    };
    let deltas = ts.deltas()?;
    let mut points = Vec::with_capacity(settings.len());
    for s in settings {
        let mut cfg = base.clone().lambda(lambda);
        let label = match axis {
            SweepAxis::Mode => {
                cfg.mode = s.parse::<TransformMode>().map_err(|e| Error::Config(e.to_string()))?;
                cfg.mode.as_str().to_string()
            }
            SweepAxis::Context => {
                cfg.mode = context_mode(s)?;
                s.clone()
            }
            SweepAxis::SkipRate => {
                let rate = s
                    .parse::<usize>()
                    .map_err(|e| Error::Config(format!("bad skip rate `{s}`: {e}")))?;
                cfg.selector = cfg.selector.clone().skip(rate);
                rate.to_string()
            }
            SweepAxis::Selector => {
                let mode = s.parse::<SelectorMode>().map_err(|e| Error::Config(e.to_string()))?;
                if mode == SelectorMode::Custom {
                    return Err(Error::Config("selector axis takes all, mlp or attn".into()));
                }
                cfg.selector = TargetSelector {
                    mode,
                    patterns: Vec::new(),
                    skip_rate: cfg.selector.skip_rate,
                };
                mode.to_string()
            }
            SweepAxis::Lambda => unreachable!("handled above"),
        };
        cfg.allow_non_orthogonal = !cfg.mode.is_orthogonal();
        points.push(run_point(ts, &deltas, &cfg, label)?);
    }
    SweepResult::new(axis, points)
}

fn default_seed() -> u64 {
    42
}

fn default_tasks() -> usize {
    8
}

fn default_mode() -> TransformMode {
    TransformMode::Srsf
}

/// A complete, serializable sweep description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    /// Seed of the synthetic suite.
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_tasks")]
    pub num_tasks: usize,
    #[serde(default)]
    pub arch: ArchConfig,
    #[serde(default)]
    pub train: TrainConfig,
    /// Seed of the transforms.
    #[serde(default = "default_seed")]
    pub global_seed: u64,
    #[serde(default = "default_mode")]
    pub mode: TransformMode,
    #[serde(default)]
    pub selector: TargetSelector,
    pub axis: SweepAxis,
    /// λ values for the lambda axis; defaults to `0.1..=1.0`.
    #[serde(default)]
    pub grid: Option<Vec<f64>>,
    /// Settings for the other axes.
    #[serde(default)]
    pub settings: Vec<String>,
    /// Fixed λ for ablations; defaults to the srsf argbest.
    #[serde(default)]
    pub lambda: Option<f32>,
}

impl SweepConfig {
    pub fn lambda_sweep(mode: TransformMode) -> Self {
        Self {
            seed: default_seed(),
            num_tasks: default_tasks(),
            arch: ArchConfig::default(),
            train: TrainConfig::default(),
            global_seed: default_seed(),
            mode,
            selector: TargetSelector::all(),
            axis: SweepAxis::Lambda,
            grid: None,
            settings: Vec::new(),
            lambda: None,
        }
    }

    pub fn store_config(&self) -> StoreConfig {
        StoreConfig::new(self.mode)
            .seed(self.global_seed)
            .selector(self.selector.clone())
    }

    /// Runs against an already generated suite.
    pub fn run_on(&self, ts: &SyntheticTaskSet) -> Result<SweepResult> {
        let base = self.store_config();
        match self.axis {
            SweepAxis::Lambda => {
                let grid = self.grid.clone().unwrap_or_else(default_lambda_grid);
                grid_search_lambda(ts, &base, &grid)
            }
            axis => run_ablation(ts, axis, &self.settings, &base, self.lambda),
        }
    }

    pub fn run(&self) -> Result<SweepResult> {
        let ts = super::generate_tasks_with(self.seed, self.num_tasks, &self.arch, &self.train)?;
        self.run_on(&ts)
    }
}
