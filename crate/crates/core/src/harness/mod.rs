//! A desk-scale experimental rig.
//!
//! [`generate_tasks`] builds a small multi-block network, pretrains it on a
//! shared linear teacher, then fine-tunes one copy per task on related teachers
//! with the input and output layers frozen. The fine-tuned checkpoints are the
//! models that get compressed; [`grid_search_lambda`] and [`run_ablation`]
//! measure how well each transform mode recovers them.
//!
//! Every stored weight is rounded to a `2^-20` grid so that fine-tuned minus
//! base differences are exact in f32 and single-model recovery is bit-exact.
//! Training, data and evaluation are pure functions of the seed.

mod net;
mod sweep;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::tensor::{self, TensorMap};

use net::Params;

pub use net::{QUANT_LIMIT, QUANT_STEP};
pub use sweep::{
    default_lambda_grid, grid_search_lambda, parse_grid, run_ablation, SweepAxis, SweepConfig, SweepPoint,
    SweepResult, TaskMetrics,
};

/// Shape of the student network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    pub width: usize,
    pub blocks: usize,
    pub d_in: usize,
    pub d_out: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            width: 32,
            blocks: 4,
            d_in: 16,
            d_out: 4,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.blocks < 2 {
            return Err(Error::Config(format!(
                "need at least 2 blocks for layer shuffling, got {}",
                self.blocks
            )));
        }
        if self.width == 0 || self.d_in == 0 || self.d_out == 0 {
            return Err(Error::Config("network dimensions must be positive".into()));
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.width * self.d_in + 2 * self.blocks * self.width * self.width + self.d_out * self.width
    }
}

/// Data sizes and optimizer settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub n_train: usize,
    /// Held-out samples; the first half is the validation split, the rest the test split.
    pub n_heldout: usize,
    pub pretrain_steps: usize,
    pub pretrain_lr: f64,
    pub finetune_steps: usize,
    pub finetune_lr: f64,
    /// Weight `ρ` of the shared teacher: `M_t = ρ M_shared + √(1−ρ²) R_t`.
    pub teacher_overlap: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            n_train: 512,
            n_heldout: 256,
            pretrain_steps: 300,
            pretrain_lr: 0.01,
            finetune_steps: 300,
            finetune_lr: 0.05,
            teacher_overlap: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_train == 0 || self.n_heldout < 2 {
            return Err(Error::Config(
                "need at least one training and two held-out samples".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.teacher_overlap) {
            return Err(Error::Config(format!(
                "teacher_overlap must lie in [0, 1], got {}",
                self.teacher_overlap
            )));
        }
        if !(self.pretrain_lr >= 0.0 && self.finetune_lr >= 0.0) {
            return Err(Error::Config("learning rates must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Validation,
    Test,
    /// The whole held-out set.
    Heldout,
}

/// One regression task: a linear teacher and its sampled data, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTask {
    pub task_id: String,
    /// `[d_out, d_in]`.
    pub teacher: Vec<f64>,
    pub x_train: Vec<f64>,
    pub y_train: Vec<f64>,
    pub x_heldout: Vec<f64>,
    pub y_heldout: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct SyntheticTaskSet {
    pub seed: u64,
    pub arch: ArchConfig,
    pub train: TrainConfig,
    pub tasks: Vec<SyntheticTask>,
    pub base: TensorMap,
    pub finetuned: Vec<TensorMap>,
}

fn normals(rng: &mut SplitMix64, n: usize, std: f64) -> Vec<f64> {
    (0..n).map(|_| rng.standard_normal() * std).collect()
}

/// `y[n, d_out] = x[n, d_in] · Mᵀ`.
fn teach(m: &[f64], x: &[f64], n: usize, d_in: usize, d_out: usize) -> Vec<f64> {
    let mut y = vec![0.0; n * d_out];
    for s in 0..n {
        for o in 0..d_out {
            y[s * d_out + o] = (0..d_in).map(|c| x[s * d_in + c] * m[o * d_in + c]).sum();
        }
    }
    y
}

/// Default training settings; see [`generate_tasks_with`].
pub fn generate_tasks(seed: u64, num_tasks: usize, arch: &ArchConfig) -> Result<SyntheticTaskSet> {
    generate_tasks_with(seed, num_tasks, arch, &TrainConfig::default())
}

pub fn generate_tasks_with(
    seed: u64,
    num_tasks: usize,
    arch: &ArchConfig,
    train: &TrainConfig,
) -> Result<SyntheticTaskSet> {
    arch.validate()?;
    train.validate()?;
    if num_tasks == 0 {
        return Err(Error::Config("need at least one task".into()));
    }
    let (d_in, d_out) = (arch.d_in, arch.d_out);
    let teacher_std = 1.0 / (d_in as f64).sqrt();
    let mut rng = SplitMix64::for_stream(seed, "harness", "suite");

    let mut params = Params::init(arch, &mut rng);
    let shared = normals(&mut rng, d_out * d_in, teacher_std);
    let x = normals(&mut rng, train.n_train * d_in, 1.0);
    let y = teach(&shared, &x, train.n_train, d_in, d_out);
    for _ in 0..train.pretrain_steps {
        params.step(arch, &x, &y, train.n_train, train.pretrain_lr, true);
    }
    let base = params.to_map(arch)?;
    let start = Params::from_map(&base, arch)?;

    let rho = train.teacher_overlap;
    let fresh = (1.0 - rho * rho).sqrt();
    let mut tasks = Vec::with_capacity(num_tasks);
    let mut finetuned = Vec::with_capacity(num_tasks);
    for t in 0..num_tasks {
        let own = normals(&mut rng, d_out * d_in, teacher_std);
        let teacher: Vec<f64> = shared.iter().zip(&own).map(|(s, r)| rho * s + fresh * r).collect();
        let x_train = normals(&mut rng, train.n_train * d_in, 1.0);
        let y_train = teach(&teacher, &x_train, train.n_train, d_in, d_out);
        let x_heldout = normals(&mut rng, train.n_heldout * d_in, 1.0);
        let y_heldout = teach(&teacher, &x_heldout, train.n_heldout, d_in, d_out);

        let mut p = start.clone();
        for _ in 0..train.finetune_steps {
            p.step(arch, &x_train, &y_train, train.n_train, train.finetune_lr, false);
        }
        finetuned.push(p.to_map(arch)?);
        tasks.push(SyntheticTask {
            task_id: format!("task{t}"),
            teacher,
            x_train,
            y_train,
            x_heldout,
            y_heldout,
        });
    }
    Ok(SyntheticTaskSet {
        seed,
        arch: *arch,
        train: *train,
        tasks,
        base,
        finetuned,
    })
}

/// Per-split averages of the base and fine-tuned models.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReferenceMetrics {
    pub base_val: f64,
    pub base_test: f64,
    pub finetuned_val: f64,
    pub finetuned_test: f64,
}

impl SyntheticTaskSet {
    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn task_ids(&self) -> Vec<String> {
        self.tasks.iter().map(|t| t.task_id.clone()).collect()
    }

    pub fn deltas(&self) -> Result<Vec<TensorMap>> {
        self.finetuned.iter().map(|m| tensor::sub(m, &self.base)).collect()
    }

    fn split_range(&self, split: Split) -> (usize, usize) {
        let half = self.train.n_heldout / 2;
        match split {
            Split::Validation => (0, half),
            Split::Test => (half, self.train.n_heldout),
            Split::Heldout => (0, self.train.n_heldout),
        }
    }

    /// Negative mean squared error of `model` on task `index` (higher is better).
    pub fn evaluate(&self, model: &TensorMap, index: usize, split: Split) -> Result<f64> {
        let task = self
            .tasks
            .get(index)
            .ok_or_else(|| Error::InvalidArgument(format!("task index {index} out of range")))?;
        let params = Params::from_map(model, &self.arch)?;
        let (lo, hi) = self.split_range(split);
        let (d_in, d_out) = (self.arch.d_in, self.arch.d_out);
        let x = &task.x_heldout[lo * d_in..hi * d_in];
        let y = &task.y_heldout[lo * d_out..hi * d_out];
        let n = hi - lo;
        Ok(-net::mse(&params.forward(&self.arch, x, n), y, n))
    }

    /// Training-set loss of `model` on task `index`.
    pub fn train_loss(&self, model: &TensorMap, index: usize) -> Result<f64> {
        let task = &self.tasks[index];
        let params = Params::from_map(model, &self.arch)?;
        Ok(params.loss(&self.arch, &task.x_train, &task.y_train, self.train.n_train))
    }

    /// Mean metric over tasks, with `models[i]` evaluated on task `i`.
    pub fn average_metric(&self, models: &[TensorMap], split: Split) -> Result<f64> {
        if models.len() != self.len() {
            return Err(Error::InvalidArgument(format!(
                "{} models for {} tasks",
                models.len(),
                self.len()
            )));
        }
        let mut sum = 0.0;
        for (i, m) in models.iter().enumerate() {
            sum += self.evaluate(m, i, split)?;
        }
        Ok(sum / self.len() as f64)
    }

    /// Mean metric of one shared model over all tasks.
    pub fn average_metric_shared(&self, model: &TensorMap, split: Split) -> Result<f64> {
        let mut sum = 0.0;
        for i in 0..self.len() {
            sum += self.evaluate(model, i, split)?;
        }
        Ok(sum / self.len() as f64)
    }

    pub fn reference_metrics(&self) -> Result<ReferenceMetrics> {
        Ok(ReferenceMetrics {
            base_val: self.average_metric_shared(&self.base, Split::Validation)?,
            base_test: self.average_metric_shared(&self.base, Split::Test)?,
            finetuned_val: self.average_metric(&self.finetuned, Split::Validation)?,
            finetuned_test: self.average_metric(&self.finetuned, Split::Test)?,
        })
    }
}

/// Elementwise mean of the models, accumulated in f64.
pub fn baseline_weight_averaging(models: &[TensorMap]) -> Result<TensorMap> {
    let first = models
        .first()
        .ok_or_else(|| Error::InvalidArgument("no models to average".into()))?;
    for m in &models[1..] {
        first.check_same_structure(m)?;
    }
    let n = models.len() as f64;
    let mut out = first.zeros_like();
    for (name, _) in first.iter() {
        let dst = out.get_mut(name).expect("zeros_like keeps names").data_mut();
        for (e, d) in dst.iter_mut().enumerate() {
            let sum: f64 = models
                .iter()
                .map(|m| f64::from(m.get(name).expect("structure checked").data()[e]))
                .sum();
            *d = (sum / n) as f32;
        }
    }
    Ok(out)
}

/// `Θ0 + λ Σ (Θ_i − Θ0)`, accumulated in input order in f32.
pub fn baseline_task_arithmetic(base: &TensorMap, models: &[TensorMap], lambda: f32) -> Result<TensorMap> {
    if models.is_empty() {
        return Err(Error::InvalidArgument("no models to merge".into()));
    }
    let mut acc = base.zeros_like();
    for m in models {
        acc = tensor::axpy(lambda, &tensor::sub(m, base)?, &acc)?;
    }
    tensor::add(base, &acc)
}
